import pytest
from hypothesis import given, strategies as st

from knitwit import lang as L
from knitwit.interp import (NIL, ArityViolation, DataTree, Error, Final, Next, initial_config,
                            output_list, parse_path, format_path, run, step)

from conftest import load


def prog(src: str) -> L.Program:
    return L.parse_program(src)


def test_initial_heap_is_isomorphic_to_the_tree(fig1):
    c = initial_config(fig1, DataTree.from_list([1, 2, 3]), {"key": 3})
    assert c.heap.nodes == {1, 2, 3}
    assert c.heap.fields["next"] == {1: 2, 2: 3, 3: NIL}
    assert c.nu_p == {"head": 1, "prev": NIL, "cur": NIL, "tmp": NIL}
    assert c.nu_d == {"key": 3}
    assert c.pc == 0


def test_binary_tree_ids_are_breadth_first():
    p = prog("pointer r\nfield left, right\n0: exit;")
    t = DataTree(2, {(): 5, (1,): 6, (2,): 7, (1, 2): 8})
    c = initial_config(p, t, {})
    assert c.heap.fields["left"] == {1: 2, 2: NIL, 3: NIL, 4: NIL}
    assert c.heap.fields["right"] == {1: 3, 2: 4, 3: NIL, 4: NIL}
    assert c.heap.data == {1: 5, 2: 6, 3: 7, 4: 8}


def test_tree_wider_than_program_is_rejected():
    with pytest.raises(ArityViolation):
        initial_config(prog("pointer r\n0: exit;"), DataTree(2, {(): 1, (2,): 1}), {})


def test_tree_must_be_prefix_closed():
    with pytest.raises(ValueError):
        DataTree(1, {(1,): 3})


def test_fig1_moves_key_to_front(fig1):
    ex = run(fig1, DataTree.from_list([1, 2, 3, 4, 5]), {"key": 3}, 1000)
    assert ex.outcome == "Final"
    assert output_list(ex.last, "head", "next") == [3, 4, 5]


def test_relinked_fig1_outputs_reversed_prefix():
    p = load("fig1_relinked.kw")
    ex = run(p, DataTree.from_list([1, 2, 3, 4, 5]), {"key": 3}, 1000)
    assert output_list(ex.last, "head", "next") == [3, 2, 1, 4, 5]


def test_nil_dereference_is_an_error_outcome():
    ex = run(load("nilderef.kw"), DataTree(1, {}), {}, 10)
    assert (ex.outcome, ex.reason) == ("Error", "NilDereference")
    assert len(ex.configs) == 1


def test_free_nil_is_an_error():
    p = prog("pointer x\n0: free x;\n1: exit;")
    assert step(p, initial_config(p, DataTree(1, {}), {})) == Error("NilFree")


def test_exit_is_final():
    p = prog("pointer x\n0: exit;")
    assert step(p, initial_config(p, DataTree(1, {}), {})) == Final()


def test_free_nils_every_reference():
    p = prog("pointer x, y\n0: y := x;\n1: free x;\n2: exit;")
    ex = run(p, DataTree.from_list([4, 5]), {}, 10)
    last = ex.last
    assert last.nu_p == {"x": NIL, "y": NIL}
    assert 1 not in last.heap.nodes


def test_new_allocates_a_fresh_node():
    p = prog("pointer x, y\n0: new y;\n1: x->next := y;\n2: exit;")
    ex = run(p, DataTree.from_list([7]), {}, 10)
    last = ex.last
    assert last.nu_p["y"] == 2
    assert last.heap.data[2] == 0
    assert last.heap.fields["next"] == {1: 2, 2: NIL}


def test_goto_loop_runs_out_of_fuel():
    ex = run(load("goto0.kw"), DataTree(1, {}), {}, 25)
    assert ex.outcome == "OutOfFuel"
    assert len(ex.configs) == 26


def test_step_is_deterministic(fig1):
    c = initial_config(fig1, DataTree.from_list([1, 2]), {"key": 2})
    assert step(fig1, c) == step(fig1, c)
    assert isinstance(step(fig1, c), Next)


def test_tree_json_round_trip():
    t = DataTree(2, {(): 1, (2,): 3, (2, 1): 4})
    assert DataTree.from_json(t.to_json()) == t
    assert t.to_json()["nodes"][2] == {"path": "2.1", "val": 4}


@given(st.lists(st.integers(1, 3), max_size=5))
def test_path_text_round_trip(path):
    assert parse_path(format_path(tuple(path))) == tuple(path)


@given(st.lists(st.integers(-5, 5), max_size=8))
def test_list_input_reads_back(values):
    p = prog("pointer h\n0: exit;")
    c = initial_config(p, DataTree.from_list(values), {})
    assert output_list(c, "h", "next") == values
