import pytest

from knitwit import ktree as K, lang as L
from knitwit.frames import FieldAssignNil, FieldAssignPtr, Nop, PtrHere, Rwd, sentinel
from knitwit.interp import DataTree, output_list, run

from conftest import load

U1, U2, U3, U4, U5 = (), (1,), (1, 1), (1, 1, 1), (1, 1, 1, 1)

# The running example's knitted tree as drawn: lace position -> (node, label
# position, pc, event, pointer variables with upd set).
FIG2 = {
    1: (U1, 2, 0, PtrHere("head"), set()),
    2: (U1, 3, 1, PtrHere("cur"), set()),
    3: (U1, 4, 2, Nop(), set()),
    4: (U2, 2, 3, PtrHere("tmp"), set()),
    5: (U1, 5, 4, FieldAssignNil("next"), {"tmp"}),
    6: (U1, 6, 5, PtrHere("prev"), set()),
    7: (U2, 3, 1, PtrHere("cur"), {"prev"}),
    8: (U2, 4, 2, Nop(), set()),
    9: (U3, 2, 3, PtrHere("tmp"), set()),
    10: (U2, 5, 4, FieldAssignPtr("next", "prev"), {"tmp"}),
    11: (U2, 6, 5, PtrHere("prev"), set()),
    12: (U3, 3, 1, PtrHere("cur"), {"prev"}),
    13: (U3, 4, 6, Nop(), set()),
    14: (U3, 5, 7, Nop(), set()),
    15: (U4, 2, 8, PtrHere("tmp"), set()),
    16: (U3, 6, 8, Rwd(2), {"tmp"}),
    17: (U2, 7, 8, Rwd(2), {"tmp", "cur"}),
    18: (U1, 7, 9, FieldAssignPtr("next", "tmp"), {"tmp", "cur", "prev"}),
    19: (U2, 8, 9, Rwd(7), set()),
    20: (U3, 7, 11, PtrHere("head"), set()),
}


@pytest.fixture
def fig2(fig1):
    return K.build_kt(fig1, DataTree.from_list([1, 2, 3, 4, 5]), 0, 8, {"key": 3})


def test_fig2_lace_matches_the_drawing(fig2):
    lace = fig2.lace()
    assert len(lace) == 20
    ptrs = fig2.shape.ptrs
    for pos, fid in enumerate(lace, start=1):
        node, index, pc, event, upd = FIG2[pos]
        f = fig2.frame(fid)
        assert (fid.node, fid.index) == (node, index), pos
        assert (f.pc, f.event) == (pc, event), pos
        assert {p for p, u in zip(ptrs, f.upd) if u} == upd, pos


def test_fig2_node_values_and_untouched_tail(fig2):
    assert [fig2.log(q)[0].val for q in (U1, U2, U3, U4, U5)] == [1, 2, 3, 4, 5]
    assert all(f.avail for f in fig2.log(U5)[1:])
    assert fig2.frame(fig2.lace()[0]).d == (3,)


def test_fig2_rewind_of_head_from_frame_15(fig2):
    assert K.positions_of(fig2, K.find_ptr(fig2, "head", 15)) == [9, 4, 1]


def test_fig2_exits_cleanly(fig2):
    assert K.exit_status(fig2) == "C"
    assert K.well_formed(fig2) == []


def test_one_frame_fewer_overflows(fig1):
    kt = K.build_kt(fig1, DataTree.from_list([1, 2, 3, 4, 5]), 0, 7, {"key": 3})
    assert K.exit_status(kt) == "O"


def test_decoding_matches_the_interpreter(fig1, fig2):
    ex = K.exec_decode(fig2)
    ref = run(fig1, DataTree.from_list([1, 2, 3, 4, 5]), {"key": 3}, 1000)
    assert ex.configs == ref.configs
    assert K.ptrvals_of(fig2) == {"head": 3, "prev": 2, "cur": 3, "tmp": 4}


def test_find_ptr_on_nil_pointer(fig2):
    with pytest.raises(K.NotFound):
        K.find_ptr(fig2, "prev", 1)


def test_backbone_pads_spare_children():
    t = DataTree(1, {(): 1, (1,): 2})
    assert K.backbone(t, 1, 1) == [(), (1,), (2,), (1, 1), (1, 2)]


def test_json_round_trip(fig1, fig2):
    obj = fig2.to_json()
    assert obj["status"] == "C" and obj["n"] == 8
    assert K.KnittedTree.from_json(fig1, obj) == fig2


def test_dot_export_mentions_every_lace_position(fig2):
    dot = fig2.to_dot()
    assert dot.startswith("digraph")
    for pos in (1, 20):
        assert f'<font color="red">{pos}</font>' in dot


def test_truncation_gives_a_prefix(fig2):
    cut = K.truncate(fig2, 10)
    assert len(cut.lace()) == 10
    assert cut.frame(cut.lace()[-1]).next == sentinel(5)
    assert K.well_formed(cut) == []
    kept = K.truncate(fig2, 10, keep_next=True)
    assert kept.frame(kept.lace()[-1]).next == fig2.frame(fig2.lace()[9]).next


def test_truncation_rejects_off_lace_positions(fig2):
    with pytest.raises(K.NotOnLace):
        K.truncate(fig2, 21)


def test_tampered_upd_flag_is_caught(fig2):
    logs = dict(fig2.logs)
    log = list(logs[U2])
    log[4] = log[4].with_(upd=(False,) * 4)
    logs[U2] = tuple(log)
    assert K.well_formed(K.KnittedTree(fig2.shape, logs))


def test_splice_of_two_runs(fig1, fig2):
    other = K.build_kt(fig1, DataTree.from_list([7, 8, 9, 3, 10, 11, 12]), 0, 8, {"key": 3})
    assert K.consistent_child(fig2.shape, other.log((1, 1, 1)), 1, fig2.log(U2))
    glued = K.splice(fig2, U2, 1, other, (1, 1, 1))
    assert glued.input_tree() == DataTree.from_list([1, 2, 3, 10, 11, 12])
    assert K.well_formed(glued) == []
    ex = K.exec_decode(glued)
    assert ex.configs == run(fig1, glued.input_tree(), {"key": 3}, 1000).configs
    assert output_list(ex.last, "head", "next") == [3, 10, 11, 12]


def test_splice_rejects_an_inconsistent_child(fig1, fig2):
    other = K.build_kt(fig1, DataTree.from_list([7, 8, 9, 3, 10, 11, 12]), 0, 8, {"key": 3})
    with pytest.raises(K.InconsistentChild):
        K.splice(fig2, U2, 1, other, (1, 1))


@pytest.mark.parametrize("name, tree, n, status", [
    ("exit.kw", [], 4, "C"),
    ("nilderef.kw", [], 4, "E"),
    ("goto0.kw", [], 4, "O"),
    ("walk.kw", [1, 2], 4, "O"),
    ("walk.kw", [1, 2], 5, "C"),
])
def test_fixture_statuses(name, tree, n, status):
    kt = K.build_kt(load(name), DataTree.from_list(tree), 0, n, {})
    assert K.exit_status(kt) == status


def test_allocation_without_spare_children_runs_out_of_memory():
    p = L.parse_program("pointer x\n0: new x;\n1: exit;")
    assert K.exit_status(K.build_kt(p, DataTree(1, {}), 0, 4)) == "M"
    assert K.exit_status(K.build_kt(p, DataTree(1, {}), 1, 4)) == "C"
