import random

import pytest
from hypothesis import given, strategies as st

from knitwit import lang as L
from knitwit.interp import run

from conftest import FIXTURES, load
from progs import random_program, random_tree


def test_fig1_parses_into_twelve_statements(fig1):
    assert fig1.pointer_vars == ("head", "prev", "cur", "tmp")
    assert fig1.data_vars == (("key", "int"),)
    assert fig1.pointer_fields == ("next",)
    assert fig1.labels == list(range(12))
    assert fig1.k == 1
    assert fig1.root_pointer == "head"


def test_while_loop_is_flattened_with_explicit_successors(fig1):
    assert L.succ(fig1, 1, True) == 2
    assert L.succ(fig1, 1, False) == 6
    assert L.succ(fig1, 5) == 1  # loop back edge
    assert L.succ(fig1, 9) == 11  # jumps over the else branch
    assert L.succ(fig1, 11) is None


def test_compound_condition_shape(fig1):
    cond = fig1.stmts[1].op.cond
    assert cond == L.BinOp("and", L.Not(L.PtrEq("cur", None)),
                           L.BinOp("!=", L.Deref("cur"), L.Var("key")))


@pytest.mark.parametrize("src, error", [
    ("pointer x\n0: x := y;\n1: exit;", L.UndeclaredIdentifier),
    ("pointer x\n0: skip;\n0: exit;", L.DuplicateLabel),
    ("pointer x\nint d\n0: x := d;\n1: exit;", L.KindMismatch),
    ("pointer x\n0: x := ;", L.ProgramSyntaxError),
])
def test_parse_errors(src, error):
    with pytest.raises(error):
        L.parse_program(src)


def test_error_carries_line_and_column():
    with pytest.raises(L.LangError, match=r"2:9"):
        L.parse_program("pointer x\n0: x := y;\n1: exit;")


def test_validate_reports_dangling_goto():
    p = L.parse_program("pointer x\n0: goto 5;\n1: exit;")
    assert [d.rule for d in L.validate(p)] == ["UnknownLabel"]


@pytest.mark.parametrize("name", sorted(f.name for f in FIXTURES.glob("*.kw")))
def test_fixtures_are_valid(name):
    assert L.validate(load(name)) == []


def test_evaluate_arithmetic():
    e = L.BinOp("+", L.Var("a"), L.IntLit(2))
    assert L.evaluate(e, {"a": 3}) == 5
    assert L.evaluate(L.Not(L.BinOp("<", L.Var("a"), L.IntLit(2))), {"a": 3}) is True


def test_desugar_splits_compound_condition(fig1):
    d = L.desugar(fig1)
    assert all(L.is_kernel_op(s.op) for s in d.statements)
    assert not L.is_kernel_op(fig1.stmts[1].op)
    assert len(d.statements) == 15


def test_program_hash_ignores_comments_and_layout(fig1):
    src = (FIXTURES / "fig1.kw").read_text()
    stripped = "\n".join(line for line in src.splitlines() if not line.startswith("//"))
    assert L.program_hash(L.parse_program(stripped)) == L.program_hash(fig1)


@given(st.integers(0, 2**32 - 1))
def test_pretty_round_trips(seed):
    p = random_program(random.Random(seed))
    assert L.parse_program(L.pretty(p)) == p


@given(st.integers(0, 2**32 - 1), st.integers(-1, 3))
def test_desugaring_preserves_outcome_and_output(seed, d):
    rng = random.Random(seed)
    p = random_program(rng)
    t = random_tree(rng, p.k)
    a = run(p, t, {"d": d}, 200)
    b = run(L.desugar(p), t, {"d": d}, 2000)
    if a.outcome == "OutOfFuel":
        return
    assert b.outcome == a.outcome
    assert b.last.heap == a.last.heap
    assert {v: b.last.nu_p[v] for v in p.pointer_vars} == dict(a.last.nu_p)
