import subprocess

import pytest
from hypothesis import given, settings, strategies as st

from knitwit import chcgen as C, ktree as K, lang as L
from knitwit.driver import is_derivable, prepare
from knitwit.frames import Shape, log_top
from knitwit.interp import DataTree

from conftest import load, needs_z3


def expected_counts(n: int, arity: int) -> dict:
    # One backbone clause, one start clause, an internal step into every
    # index 3..n+1, a down step into every index 2..n+1 per child direction
    # and an up step into every index 3..n+1 per child direction.
    return {"I": 1, "II": 1, "III": n - 1, "IV": (n - 1) * arity, "V": n * arity, "VI": 0}


@pytest.fixture(scope="module")
def walk_system():
    return C.compile_system(prepare(load("walk.kw")), 0, 3)


@pytest.mark.parametrize("m, n", [(0, 3), (1, 3), (0, 5)])
def test_clause_counts(m, n):
    p = load("walk.kw")
    s = C.compile_system(p, m, n)
    assert s.counts() == expected_counts(n, p.k + m)


def test_fig1_clause_count(fig1):
    s = C.compile_system(fig1, 0, 8)
    assert s.counts() == expected_counts(8, 1)
    assert len(s.clauses) == 24


def test_event_alphabet_size(fig1):
    sh = Shape(fig1, 0, 8)
    pv, pf, n = len(fig1.pointer_vars), len(fig1.pointer_fields), 8
    assert len(sh.events) == pf * pv + pf + pv + n + n * pv + 3
    assert len(set(sh.events)) == len(sh.events)


def test_lab_signature_width(fig1):
    s = C.compile_system(fig1, 0, 8)
    per_frame = 9 + len(fig1.data_vars) + 2 * len(fig1.pointer_vars) + fig1.k
    assert len(s.signature) == 9 * per_frame
    assert len(C.frame_fields(s.shape)) == per_frame


def test_exit_query_is_added_once(walk_system):
    q = C.add_exit_query(walk_system, {"E"})
    assert q.counts()["VI"] == 1
    assert walk_system.counts()["VI"] == 0
    with pytest.raises(C.QueryAlreadyPresent):
        C.add_exit_query(q, {"O"})


def test_too_small_n_is_rejected():
    with pytest.raises(ValueError):
        C.compile_system(load("exit.kw"), 0, 1)


def test_flatten_rejects_wrong_length(walk_system):
    kt = K.build_kt(prepare(load("walk.kw")), DataTree.from_list([1]), 0, 4)
    with pytest.raises(C.SortError):
        C.flatten_log(walk_system.shape, "s", kt.log(()))


def test_flatten_rejects_ill_sorted_value(walk_system):
    kt = K.build_kt(walk_system.shape.program, DataTree.from_list([1]), 0, 3)
    log = kt.log(())
    bad = (log[0].with_(pc=99),) + log[1:]
    with pytest.raises(C.SortError):
        C.flatten_log(walk_system.shape, "s", bad)


def _prefix_labels(kt):
    labels = set()
    for pos in range(1, len(kt.lace()) + 1):
        labels.update(K.truncate(kt, pos).logs.values())
        labels.update(K.truncate(kt, pos, keep_next=True).logs.values())
    return labels


@pytest.mark.parametrize("values", [[], [1], [1, 2]])
def test_every_label_of_a_run_is_derivable(walk_system, values):
    kt = K.build_kt(walk_system.shape.program, DataTree.from_list(values), 0, 3)
    labels = _prefix_labels(kt)
    for sigma in labels:
        assert is_derivable(walk_system, sigma, labels)


def test_changed_pc_is_not_derivable(walk_system):
    kt = K.build_kt(walk_system.shape.program, DataTree.from_list([1, 2]), 0, 3)
    labels = _prefix_labels(kt)
    sigma = kt.log(())
    top = log_top(sigma)
    bad = sigma[:top - 1] + (sigma[top - 1].with_(pc=3),) + sigma[top:]
    assert bad not in labels
    assert not is_derivable(walk_system, bad, labels)


def test_query_fires_on_exit_label(walk_system):
    kt = K.build_kt(walk_system.shape.program, DataTree.from_list([1]), 0, 3)
    q = C.add_exit_query(walk_system, {K.exit_status(kt)})
    vi = next(c for c in q.clauses if c.kind == "VI")
    assert C.eval_clause(q, vi, {"s": kt.log(kt.end().node)})
    start = K.truncate(kt, 1)
    assert not C.eval_clause(q, vi, {"s": start.log(())})


def test_clause_with_interpretation(walk_system):
    c = walk_system.clauses[0]
    kt = K.build_kt(walk_system.shape.program, DataTree.from_list([1]), 0, 3)
    first = K.upto(walk_system.shape, kt.log((1,)), 1)
    assert C.eval_clause(walk_system, c, {"s": first}, lab=lambda log: True)
    assert not C.eval_clause(walk_system, c, {"s": first}, lab=lambda log: False)


def test_missing_binding_is_reported(walk_system):
    with pytest.raises(C.SortError):
        C.eval_clause(walk_system, walk_system.clauses[3], {"s": None})


def test_emission_is_deterministic():
    p = load("nilderef.kw")
    a = C.emit_smtlib(C.add_exit_query(C.compile_system(p, 0, 3), {"E"}))
    b = C.emit_smtlib(C.add_exit_query(C.compile_system(p, 0, 3), {"E"}))
    assert a == b
    assert a.startswith("; knitwit clauses")
    assert "(set-logic HORN)" in a and a.rstrip().endswith("(check-sat)")


def test_no_query_without_exit_set(walk_system):
    text = C.emit_smtlib(walk_system)
    assert "clause VI" not in text
    assert text.count("(assert") == len(walk_system.clauses)


def test_meta_matches_system(walk_system):
    q = C.add_exit_query(walk_system, {"E", "M"})
    text = C.emit_smtlib(q)
    meta = C.emit_meta(q, text)
    assert meta["clauses"] == len(q.clauses) == text.count("(assert")
    assert meta["clause_counts"] == q.counts()
    assert meta["query"] == ["E", "M"]
    assert meta["lab_arity"] == len(q.signature)
    assert meta["program_hash"] == L.program_hash(q.shape.program)


def test_datatype_mode_declares_the_event_alphabet(walk_system):
    text = C.emit_smtlib(walk_system, datatypes=True)
    decl = next(line for line in text.splitlines() if line.startswith("(declare-datatypes ((Ev"))
    assert decl.count("(ev") == len(walk_system.shape.events)


@given(st.integers(0, 2**16), st.sampled_from(["+", "-", "<", "="]))
@settings(max_examples=40)
def test_symbolic_algebra_folds_constants(x, op):
    A = C.SymbolicAlgebra()
    got = A.binop(op, A.const(x), A.const(3)) if op in "+-<" else A.eq(A.const(x), A.const(3))
    want = {"+": x + 3, "-": x - 3, "<": x < 3, "=": x == 3}[op]
    assert got.is_const and got.value == want


def test_hash_consing_shares_nodes():
    A = C.SymbolicAlgebra()
    x = A.var("s", 1, "val", C.INT)
    assert A.binop("+", x, A.const(1)) is A.binop("+", x, A.const(1))


def _z3(text: str) -> str:
    return subprocess.run(["z3", "-in"], input=text, capture_output=True, text=True,
                          timeout=60).stdout.split()[0]


@needs_z3
@pytest.mark.parametrize("name, n, ex, want", [
    ("exit.kw", 2, "E", "sat"),
    ("exit.kw", 2, "C", "unsat"),
    ("nilderef.kw", 3, "E", "unsat"),
    ("goto0.kw", 2, "O", "unsat"),
])
def test_encodings_agree(name, n, ex, want):
    s = C.add_exit_query(C.compile_system(prepare(load(name)), 0, n), {ex})
    answers = {_z3(C.emit_smtlib(s, datatypes=dt, simplify=simp))
               for dt in (False, True) for simp in (False, True)}
    assert answers == {want}
