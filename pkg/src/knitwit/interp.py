"""Reference small-step semantics: the ground truth every encoding is tested against."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Union

from .lang import (AssignCond, AssignData, AssignFromField, AssignNil, AssignPtr,
                   AssignToField, AssignToFieldNil, Branch, Deref, Exit, Exp, FieldEq,
                   Free, Goto, New, Program, PtrEq, ReadData, Skip, WriteData, evaluate)

NIL = 0

Path = tuple[int, ...]


class ArityViolation(ValueError):
    pass


# --------------------------------------------------------------------------
# Input trees


@dataclass(frozen=True)
class DataTree:
    """A finite prefix-closed tree over child indices ``1..arity`` with integer labels."""

    arity: int
    nodes: Mapping[Path, int] = field(default_factory=dict)

    def __post_init__(self):
        for path in self.nodes:
            if path and path[:-1] not in self.nodes:
                raise ValueError(f"tree is not prefix-closed at {format_path(path)!r}")
            if any(not 1 <= j <= self.arity for j in path):
                raise ArityViolation(f"child index out of range at {format_path(path)!r}")

    def __hash__(self):
        return hash((self.arity, tuple(sorted(self.nodes.items()))))

    def __eq__(self, other):
        return (isinstance(other, DataTree) and self.arity == other.arity
                and dict(self.nodes) == dict(other.nodes))

    def __len__(self) -> int:
        return len(self.nodes)

    def bfs(self) -> list[Path]:
        """Nodes in breadth-first order; position + 1 is the node id."""
        return sorted(self.nodes, key=lambda q: (len(q), q))

    @classmethod
    def from_list(cls, values, arity: int = 1) -> "DataTree":
        """A list along child 1: ``values[0]`` at the root."""
        return cls(arity, {(1,) * i: v for i, v in enumerate(values)})

    def to_json(self) -> dict:
        return {"arity": self.arity,
                "nodes": [{"path": format_path(q), "val": self.nodes[q]} for q in self.bfs()]}

    @classmethod
    def from_json(cls, obj: Mapping | str) -> "DataTree":
        if isinstance(obj, str):
            obj = json.loads(obj)
        nodes = {parse_path(n["path"]): int(n.get("val", 0)) for n in obj.get("nodes", [])}
        return cls(int(obj["arity"]), nodes)


def format_path(path: Path) -> str:
    return ".".join(map(str, path))


def parse_path(text: str) -> Path:
    return tuple(int(x) for x in text.split(".")) if text else ()


# --------------------------------------------------------------------------
# Heaps and configurations


@dataclass(frozen=True)
class Heap:
    """Live nodes with their data and pointer fields.  ``NIL`` is implicit."""

    nodes: frozenset[int]
    data: Mapping[int, int]
    fields: Mapping[str, Mapping[int, int]]
    next_id: int = field(default=1, compare=False)

    def get(self, node: int, pf: str) -> int:
        return self.fields[pf][node]

    def follow(self, start: int, pf: str, limit: int = 10_000) -> list[int]:
        """Node ids reached from ``start`` along ``pf`` (stops at nil or a cycle)."""
        out, seen, cur = [], set(), start
        while cur != NIL and cur not in seen and len(out) < limit:
            out.append(cur)
            seen.add(cur)
            cur = self.fields[pf][cur]
        return out


@dataclass(frozen=True)
class Configuration:
    heap: Heap
    nu_p: Mapping[str, int]
    nu_d: Mapping[str, int | bool]
    pc: int


@dataclass(frozen=True)
class Next:
    config: Configuration


@dataclass(frozen=True)
class Final:
    pass


@dataclass(frozen=True)
class Error:
    reason: str  # NilDereference | NilFree


StepResult = Union[Next, Final, Error]


@dataclass(frozen=True)
class Execution:
    configs: tuple[Configuration, ...]
    outcome: str  # Final | Error | OutOfFuel
    reason: str | None = None

    @property
    def last(self) -> Configuration:
        return self.configs[-1]


def initial_config(p: Program, t: DataTree, data_seed: Mapping[str, int | bool]) -> Configuration:
    """Heap isomorphic to ``t``; the first pointer variable points at its root."""
    if t.arity > p.k and any(j > p.k for q in t.nodes for j in q):
        raise ArityViolation(f"tree has arity {t.arity} but the program has {p.k} pointer fields")
    order = t.bfs()
    ids = {q: i + 1 for i, q in enumerate(order)}
    fields = {pf: {ids[q]: ids.get(q + (j + 1,), NIL) for q in order}
              for j, pf in enumerate(p.pointer_fields)}
    heap = Heap(frozenset(ids.values()), {ids[q]: t.nodes[q] for q in order}, fields,
                next_id=len(order) + 1)
    nu_p = {v: NIL for v in p.pointer_vars}
    if order:
        nu_p[p.root_pointer] = ids[()]
    nu_d = {name: data_seed.get(name, default_value(sort)) for name, sort in p.data_vars}
    return Configuration(heap, nu_p, nu_d, p.entry)


def default_value(sort: str) -> int | bool:
    return False if sort == "bool" else 0


class _NilDeref(Exception):
    pass


def _heap_atom(c: Configuration):
    def atom(e: Exp):
        if isinstance(e, Deref):
            node = c.nu_p[e.ptr]
            if node == NIL:
                raise _NilDeref
            return c.heap.data[node]
        if isinstance(e, PtrEq):
            right = NIL if e.right is None else c.nu_p[e.right]
            return c.nu_p[e.left] == right
        if isinstance(e, FieldEq):
            node = c.nu_p[e.ptr]
            if node == NIL:
                raise _NilDeref
            right = NIL if e.right is None else c.nu_p[e.right]
            return c.heap.get(node, e.field) == right
        raise TypeError(e)
    return atom


def step(p: Program, c: Configuration) -> StepResult:
    """One transition from ``c``; errors and termination are outcomes, not exceptions."""
    s = p.stmts[c.pc]
    op, heap, nu_p, nu_d = s.op, c.heap, c.nu_p, c.nu_d
    nxt = s.succ[0] if s.succ else None

    def go(heap=heap, nu_p=nu_p, nu_d=nu_d, pc=nxt) -> Next:
        return Next(Configuration(heap, nu_p, nu_d, pc))

    def set_ptr(name: str, node: int) -> dict:
        return {**nu_p, name: node}

    def set_field(node: int, pf: str, value: int) -> Heap:
        fields = {**heap.fields, pf: {**heap.fields[pf], node: value}}
        return Heap(heap.nodes, heap.data, fields, heap.next_id)

    if isinstance(op, Exit):
        return Final()
    if isinstance(op, (Skip, Goto)):
        return go()
    if isinstance(op, AssignNil):
        return go(nu_p=set_ptr(op.target, NIL))
    if isinstance(op, AssignPtr):
        return go(nu_p=set_ptr(op.target, nu_p[op.source]))
    if isinstance(op, AssignFromField):
        src = nu_p[op.source]
        if src == NIL:
            return Error("NilDereference")
        return go(nu_p=set_ptr(op.target, heap.get(src, op.field)))
    if isinstance(op, (AssignToField, AssignToFieldNil)):
        dst = nu_p[op.target]
        if dst == NIL:
            return Error("NilDereference")
        value = nu_p[op.source] if isinstance(op, AssignToField) else NIL
        return go(heap=set_field(dst, op.field, value))
    if isinstance(op, WriteData):
        dst = nu_p[op.target]
        try:
            value = evaluate(op.exp, nu_d, _heap_atom(c))
        except _NilDeref:
            return Error("NilDereference")
        if dst == NIL:
            return Error("NilDereference")
        return go(heap=Heap(heap.nodes, {**heap.data, dst: value}, heap.fields, heap.next_id))
    if isinstance(op, ReadData):
        src = nu_p[op.source]
        if src == NIL:
            return Error("NilDereference")
        return go(nu_d={**nu_d, op.target: heap.data[src]})
    if isinstance(op, (AssignData, AssignCond)):
        exp = op.exp if isinstance(op, AssignData) else op.cond
        try:
            value = evaluate(exp, nu_d, _heap_atom(c))
        except _NilDeref:
            return Error("NilDereference")
        return go(nu_d={**nu_d, op.target: value})
    if isinstance(op, Branch):
        try:
            value = bool(evaluate(op.cond, nu_d, _heap_atom(c)))
        except _NilDeref:
            return Error("NilDereference")
        return go(pc=s.succ[0] if value else s.succ[1])
    if isinstance(op, New):
        node = heap.next_id
        fields = {pf: {**m, node: NIL} for pf, m in heap.fields.items()}
        new_heap = Heap(heap.nodes | {node}, {**heap.data, node: 0}, fields, node + 1)
        return go(heap=new_heap, nu_p=set_ptr(op.target, node))
    if isinstance(op, Free):
        node = nu_p[op.target]
        if node == NIL:
            return Error("NilFree")
        nodes = heap.nodes - {node}
        data = {n: v for n, v in heap.data.items() if n != node}
        fields = {pf: {n: (NIL if v == node else v) for n, v in m.items() if n != node}
                  for pf, m in heap.fields.items()}
        nu_p2 = {v: (NIL if n == node else n) for v, n in nu_p.items()}
        return go(heap=Heap(nodes, data, fields, heap.next_id), nu_p=nu_p2)
    raise TypeError(f"unknown statement {op!r}")


def run(p: Program, t: DataTree, data_seed: Mapping[str, int | bool], fuel: int) -> Execution:
    """Execute for at most ``fuel`` steps."""
    configs = [initial_config(p, t, data_seed)]
    for _ in range(fuel):
        r = step(p, configs[-1])
        if isinstance(r, Final):
            return Execution(tuple(configs), "Final")
        if isinstance(r, Error):
            return Execution(tuple(configs), "Error", r.reason)
        configs.append(r.config)
    if isinstance(p.stmts[configs[-1].pc].op, Exit):
        return Execution(tuple(configs), "Final")
    return Execution(tuple(configs), "OutOfFuel")


def output_list(c: Configuration, pointer: str, pf: str) -> list[int]:
    """Data values along ``pf`` starting from the node ``pointer`` refers to."""
    return [c.heap.data[n] for n in c.heap.follow(c.nu_p[pointer], pf)]
