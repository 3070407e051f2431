"""Invariants of knitted trees checked on random programs and inputs."""

from hypothesis import assume, given, settings, strategies as st

from knitwit import ktree as K
from knitwit.interp import run

from progs import cases


def fuel_for(kt) -> int:
    return (kt.shape.n + 1) * len(kt.logs)


@given(cases())
def test_decoding_is_a_prefix_of_the_interpreter_trace(case):
    p, t, seed, m, n = case
    kt = K.build_kt(p, t, m, n, seed)
    ex = K.exec_decode(kt)
    ref = run(p, t, seed, fuel_for(kt))
    assert ref.configs[:len(ex.configs)] == ex.configs
    if K.exit_status(kt) == "C":
        assert ref.outcome == "Final" and ref.configs == ex.configs


@given(cases())
def test_error_status_means_an_error_run(case):
    p, t, seed, m, n = case
    kt = K.build_kt(p, t, m, n, seed)
    ref = run(p, t, seed, fuel_for(kt))
    if K.exit_status(kt) == "E":
        assert ref.outcome == "Error"
    if ref.outcome == "Error":
        assert K.exit_status(kt) in {"E", "O", "M"}


@given(cases())
def test_runs_past_the_fuel_proxy_overflow_or_run_out_of_memory(case):
    p, t, seed, m, n = case
    kt = K.build_kt(p, t, m, n, seed)
    if run(p, t, seed, fuel_for(kt)).outcome == "OutOfFuel":
        assert K.exit_status(kt) in {"O", "M"}


@given(cases())
def test_knitted_trees_are_well_formed(case):
    p, t, seed, m, n = case
    kt = K.build_kt(p, t, m, n, seed)
    assert K.well_formed(kt) == []


@given(cases())
def test_every_lace_link_replays(case):
    p, t, seed, m, n = case
    kt = K.build_kt(p, t, m, n, seed)
    lace = kt.lace()
    for x, y in zip(lace, lace[1:]):
        assert K.replay_link(kt, x, y).same_modulo_next(kt.frame(y))


@given(cases())
def test_children_are_consistent_with_parents(case):
    p, t, seed, m, n = case
    kt = K.build_kt(p, t, m, n, seed)
    for q, log in kt.logs.items():
        if q:
            assert K.consistent_child(kt.shape, log, q[-1], kt.logs[q[:-1]])


@given(cases())
def test_upd_flags_match_the_lace(case):
    p, t, seed, m, n = case
    kt = K.build_kt(p, t, m, n, seed)
    for fid, upd in K.recompute_upd(kt).items():
        assert kt.frame(fid).upd == upd


@given(cases(), st.integers(1, 10**6))
def test_truncations_are_prefixes(case, where):
    p, t, seed, m, n = case
    kt = K.build_kt(p, t, m, n, seed)
    lace = kt.lace()
    pos = 1 + where % len(lace)
    cut = K.truncate(kt, pos)
    assert cut.lace() == lace[:pos]
    assert K.well_formed(cut) == []
    for fid in lace[:pos - 1]:
        assert cut.frame(fid) == kt.frame(fid)
    assert cut.frame(lace[pos - 1]).same_modulo_next(kt.frame(lace[pos - 1]))


@given(cases(max_nodes=4), cases(max_nodes=4))
@settings(max_examples=40)
def test_splicing_consistent_subtrees_gives_knitted_trees(a, b):
    p, t1, seed, m, n = a
    _, t2, _, _, _ = b
    assume(t2.arity <= t1.arity or all(j <= p.k for q in t2.nodes for j in q))
    k1 = K.build_kt(p, t1, m, n, seed)
    k2 = K.build_kt(p, type(t1)(t1.arity, dict(t2.nodes)), m, n, seed)
    for x in k1.logs:
        for j in range(1, k1.shape.arity + 1):
            if x + (j,) not in k1.logs:
                continue
            for y in k2.logs:
                if y and K.consistent_child(k1.shape, k2.logs[y], j, k1.logs[x]):
                    glued = K.splice(k1, x, j, k2, y)
                    assert K.well_formed(glued) == []
                    return
