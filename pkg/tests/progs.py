"""Random small programs and trees for differential tests."""

from __future__ import annotations

import random

from hypothesis import strategies as st

from knitwit import lang as L
from knitwit.interp import DataTree

PTRS = ("x", "y", "z")
FIELDS = ("next", "left")


def random_op(rng: random.Random, ptrs, fields, data):
    p, q = rng.choice(ptrs), rng.choice(ptrs)
    pf = rng.choice(fields)
    kind = rng.choice(["nil", "ptr", "load", "store", "storenil", "read", "write", "arith",
                       "new", "free", "skip", "cmp", "localcond", "datacond", "assigncmp"])
    if kind == "nil":
        return L.AssignNil(p), 1
    if kind == "ptr":
        return L.AssignPtr(p, q), 1
    if kind == "load":
        return L.AssignFromField(p, q, pf), 1
    if kind == "store":
        return L.AssignToField(p, pf, q), 1
    if kind == "storenil":
        return L.AssignToFieldNil(p, pf), 1
    if kind == "read":
        return L.ReadData(data, p), 1
    if kind == "write":
        return L.WriteData(p, L.BinOp("+", L.Var(data), L.IntLit(rng.randint(0, 2)))), 1
    if kind == "arith":
        return L.AssignData(data, L.BinOp("-", L.Var(data), L.IntLit(1))), 1
    if kind == "new":
        return L.New(p), 1
    if kind == "free":
        return L.Free(p), 1
    if kind == "skip":
        return L.Skip(), 1
    if kind == "cmp":
        cond = L.PtrEq(p, q)
        return L.Branch(L.Not(cond) if rng.random() < 0.5 else cond), 2
    if kind == "assigncmp":
        return L.Branch(L.BinOp("<", L.Var(data), L.IntLit(rng.randint(0, 3)))), 2
    if kind == "localcond":
        cond = L.BinOp("and", L.Not(L.PtrEq(p, None)),
                       L.BinOp("!=", L.Deref(p), L.Var(data)))
        return L.Branch(cond), 2
    return L.Branch(L.BinOp(">", L.Var(data), L.IntLit(0))), 2


HEAP_OPS = (L.AssignFromField, L.AssignToField, L.AssignToFieldNil, L.ReadData, L.WriteData,
            L.Free)


def _heap_ptr(op) -> str | None:
    if isinstance(op, (L.AssignFromField, L.ReadData)):
        return op.source
    if isinstance(op, HEAP_OPS):
        return op.target
    return None


def random_program(rng: random.Random, size: int | None = None, k: int | None = None) -> L.Program:
    """A program of ``size`` blocks; heap operations are usually nil-guarded.

    Control mostly falls through, with occasional jumps (loops included).
    """
    size = size or rng.randint(2, 7)
    k = k or rng.choice([1, 1, 2])
    ptrs = PTRS[:rng.randint(2, 3)]
    fields = FIELDS[:k]
    blocks = [(L.AssignPtr(q, ptrs[0]), 1, None) for q in ptrs[1:] if rng.random() < 0.6]
    for _ in range(size):
        op, arity = random_op(rng, ptrs, fields, "d")
        ptr = _heap_ptr(op)
        guard = ptr is not None and rng.random() < 0.8
        blocks.append((op, arity, ptr if guard else None))
    # Assign labels: a guarded block takes two.
    starts, label = [], 0
    for op, arity, ptr in blocks:
        starts.append(label)
        label += 2 if ptr else 1
    exit_label = label

    def jump(i: int) -> int:
        fall = starts[i + 1] if i + 1 < len(starts) else exit_label
        if rng.random() < 0.15:
            return rng.choice(starts + [exit_label])
        return fall

    stmts = []
    for i, (op, arity, ptr) in enumerate(blocks):
        at = starts[i]
        after = starts[i + 1] if i + 1 < len(starts) else exit_label
        if ptr:
            stmts.append(L.Statement(at, L.Branch(L.Not(L.PtrEq(ptr, None))), (at + 1, after)))
            at += 1
        if arity == 1:
            stmts.append(L.Statement(at, op, (jump(i),)))
        else:
            stmts.append(L.Statement(at, op, (after, rng.choice(starts + [exit_label]))))
    stmts.append(L.Statement(exit_label, L.Exit(), ()))
    return L.Program(ptrs, (("d", "int"),), tuple(stmts), fields)


def random_tree(rng: random.Random, k: int, max_nodes: int = 5) -> DataTree:
    count = rng.choice([0] + [rng.randint(1, max_nodes)] * 4)
    nodes = {}
    if count:
        nodes[()] = rng.randint(0, 3)
        while len(nodes) < count:
            parent = rng.choice(list(nodes))
            child = parent + (rng.randint(1, k),)
            if child not in nodes:
                nodes[child] = rng.randint(0, 3)
    return DataTree(k, nodes)


@st.composite
def cases(draw, max_nodes: int = 5):
    """(program, tree, data seed, m, n) drawn from a seeded generator."""
    seed = draw(st.integers(0, 2**32 - 1))
    rng = random.Random(seed)
    p = random_program(rng)
    t = random_tree(rng, p.k, max_nodes)
    m = draw(st.integers(0, 2))
    n = draw(st.integers(3, 10))
    d = draw(st.integers(-1, 3))
    return p, t, {"d": d}, m, n


def corpus(count: int, seed: int = 0, max_statements: int = 8, max_nodes: int = 4,
           max_m: int = 1, max_n: int = 6):
    """``count`` deterministic (program, tree, seed, m, n) cases within the given bounds.

    Data values (tree labels and the seed) range over {0, 1, 2}.
    """
    rng = random.Random(seed)
    out = []
    while len(out) < count:
        p = random_program(rng, size=rng.randint(1, 5))
        if len(p.statements) > max_statements:
            continue
        t = random_tree(rng, p.k, max_nodes)
        t = DataTree(t.arity, {q: v % 3 for q, v in t.nodes.items()})
        out.append((p, t, {"d": rng.randint(0, 2)}, rng.randint(0, max_m), rng.randint(3, max_n)))
    return out
