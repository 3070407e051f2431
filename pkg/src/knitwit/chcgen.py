"""Compile a program and its (m, n) bounds into a constrained Horn clause system.

A single relation ``Lab`` ranges over node labels (logs of ``n + 1`` frames).
Its clauses are:

* I    a non-root node that has only its backbone frame;
* II   the root at the start of the execution;
* III  an internal lace step adding frame ``i`` to the same node;
* IV   a lace step up from child ``j``, adding frame ``i`` to the parent;
* V    a lace step down into child ``j``, adding frame ``i`` to the child;
* VI   (optional) the exit query: a label whose frames show a status in ``ex``.

Constraints are :class:`ConstraintExp` DAGs built by running the shared step
rules of :mod:`knitwit.steprules` over :class:`SymbolicAlgebra`.  The same DAG
is evaluated concretely by :func:`eval_clause` and printed by
:func:`emit_smtlib`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from . import lang as L
from .frames import ERR, NOP, OOM, SELF, UP, Event, Frame, Log, PtrHere, Shape, zero_frame
from .steprules import (Algebra, LogView, UnsupportedStatement, _concrete_op, psi)

__all__ = [
    "ConstraintExp", "ChcClause", "ChcSystem", "SymbolicAlgebra", "SortError",
    "QueryAlreadyPresent", "UnsupportedStatement", "compile_system", "add_exit_query",
    "eval_clause", "emit_smtlib", "emit_meta", "frame_fields", "flatten_log", "STATUSES",
]

STATUSES = ("C", "E", "O", "M")

BOOL, INT, PC, EVENT, DIR = "bool", "int", "pc", "event", "dir"
ENUMS = (PC, EVENT, DIR)


class SortError(TypeError):
    pass


class QueryAlreadyPresent(ValueError):
    pass


# --------------------------------------------------------------------------
# Constraint expressions


class ConstraintExp:
    """A hash-consed node: build through :class:`SymbolicAlgebra` only.

    ``op`` is ``const``, ``var`` or an operator name; ``value`` holds the
    constant or the variable's ``(logvar, frame, field)`` address.
    """

    __slots__ = ("uid", "op", "args", "sort", "value")

    def __init__(self, uid: int, op: str, args: tuple, sort: str, value: Any = None):
        self.uid = uid
        self.op = op
        self.args = args
        self.sort = sort
        self.value = value

    def __repr__(self):
        if self.op == "const":
            return f"{self.value!s}:{self.sort}"
        if self.op == "var":
            return "{}{}.{}".format(*self.value)
        return f"({self.op} {' '.join(map(repr, self.args))})"

    @property
    def is_const(self) -> bool:
        return self.op == "const"


_CMP = {"<", "<=", ">", ">=", "=", "!="}
_ARITH = {"+", "-", "*"}


class SymbolicAlgebra(Algebra):
    """Builds constraint DAGs with constant folding and structural sharing."""

    symbolic = True

    def __init__(self):
        self._table: dict = {}
        self._coerced: dict = {}
        self.TRUE = self._mk("const", (), BOOL, True)
        self.FALSE = self._mk("const", (), BOOL, False)

    def _mk(self, op, args, sort, value=None) -> ConstraintExp:
        key = (op, tuple(a.uid for a in args), sort, value)
        node = self._table.get(key)
        if node is None:
            node = ConstraintExp(len(self._table), op, tuple(args), sort, value)
            self._table[key] = node
        return node

    def __len__(self) -> int:
        return len(self._table)

    # -- leaves
    def var(self, logvar: str, i: int, name: str, sort: str) -> ConstraintExp:
        return self._mk("var", (), sort, (logvar, i, name))

    def const(self, v):
        if isinstance(v, ConstraintExp):
            return v
        if isinstance(v, bool):
            return self.TRUE if v else self.FALSE
        if isinstance(v, int):
            return self._mk("const", (), INT, v)
        raise SortError(f"cannot lift {v!r}")

    def event(self, e: Event):
        return self._mk("const", (), EVENT, e)

    def typed(self, v: int, sort: str) -> ConstraintExp:
        return self._coerce(self.const(v), sort)

    # -- sorts
    def _coerce(self, x: ConstraintExp, sort: str) -> ConstraintExp:
        if x.sort == sort:
            return x
        if x.sort != INT or sort not in ENUMS:
            raise SortError(f"expected {sort}, got {x.sort}: {x!r}")
        key = (x.uid, sort)
        hit = self._coerced.get(key)
        if hit is not None:
            return hit
        if x.op == "const":
            out = self._mk("const", (), sort, x.value)
        elif x.op == "ite":
            out = self.ite(x.args[0], self._coerce(x.args[1], sort), self._coerce(x.args[2], sort))
        else:
            raise SortError(f"cannot read an integer expression as {sort}: {x!r}")
        self._coerced[key] = out
        return out

    def _unify(self, x, y) -> tuple[ConstraintExp, ConstraintExp]:
        x, y = self.const(x), self.const(y)
        if x.sort == y.sort:
            return x, y
        if x.sort in ENUMS:
            return x, self._coerce(y, x.sort)
        if y.sort in ENUMS:
            return self._coerce(x, y.sort), y
        raise SortError(f"sort mismatch: {x.sort} vs {y.sort}")

    def _bool(self, x) -> ConstraintExp:
        x = self.const(x)
        if x.sort != BOOL:
            raise SortError(f"expected bool, got {x.sort}: {x!r}")
        return x

    # -- connectives
    def and_(self, *xs):
        out, seen = [], set()
        for x in xs:
            x = self._bool(x)
            if x is self.FALSE:
                return self.FALSE
            if x is self.TRUE or x.uid in seen:
                continue
            seen.add(x.uid)
            out.append(x)
        if not out:
            return self.TRUE
        if len(out) == 1:
            return out[0]
        return self._mk("and", out, BOOL)

    def or_(self, *xs):
        out, seen = [], set()
        for x in xs:
            x = self._bool(x)
            if x is self.TRUE:
                return self.TRUE
            if x is self.FALSE or x.uid in seen:
                continue
            seen.add(x.uid)
            out.append(x)
        if not out:
            return self.FALSE
        if len(out) == 1:
            return out[0]
        return self._mk("or", out, BOOL)

    def not_(self, x):
        x = self._bool(x)
        if x.is_const:
            return self.const(not x.value)
        if x.op == "not":
            return x.args[0]
        return self._mk("not", (x,), BOOL)

    def implies(self, x, y):
        return self.or_(self.not_(x), y)

    def ite(self, c, x, y):
        c = self._bool(c)
        if c.is_const:
            return self.const(x) if c.value else self.const(y)
        x, y = self._unify(x, y)
        if x is y:
            return x
        if x.sort == BOOL:
            if x is self.TRUE and y is self.FALSE:
                return c
            if x is self.FALSE and y is self.TRUE:
                return self.not_(c)
            if y is self.FALSE:
                return self.and_(c, x)
            if x is self.TRUE:
                return self.or_(c, y)
        if c.op == "not":
            return self._mk("ite", (c.args[0], y, x), x.sort)
        return self._mk("ite", (c, x, y), x.sort)

    def eq(self, x, y):
        x, y = self._unify(x, y)
        if x is y:
            return self.TRUE
        if x.is_const and y.is_const:
            return self.const(x.value == y.value)
        if x.sort == BOOL:
            if x.is_const:
                return y if x.value else self.not_(y)
            if y.is_const:
                return x if y.value else self.not_(x)
        if x.uid > y.uid:
            x, y = y, x
        # An ite with constant leaves compared to a constant folds leaf-wise.
        if y.is_const and x.op == "ite" and _const_leaves(x):
            return self.ite(x.args[0], self.eq(x.args[1], y), self.eq(x.args[2], y))
        return self._mk("=", (x, y), BOOL)

    def ge(self, x, y):
        return self.binop(">=", x, y)

    def binop(self, op, x, y):
        if op == "and":
            return self.and_(x, y)
        if op == "or":
            return self.or_(x, y)
        x, y = self.const(x), self.const(y)
        if op == "=":
            return self.eq(x, y)
        if op == "!=":
            return self.not_(self.eq(x, y))
        if x.sort != INT or y.sort != INT:
            raise SortError(f"{op} needs integers, got {x.sort} and {y.sort}")
        if x.is_const and y.is_const:
            return self.const(_concrete_op(op, x.value, y.value))
        if op in _CMP:
            return self._mk(op, (x, y), BOOL)
        if op in _ARITH:
            return self._mk(op, (x, y), INT)
        raise SortError(f"unknown operator {op}")

    def select(self, idx, keys, fn, default):
        idx = self.const(idx)
        keys = tuple(keys)
        if idx.is_const:
            return fn(idx.value) if idx.value in keys else default
        if _const_leaves(idx):
            # Distribute over the constant leaves of an index chain.
            return self._distribute(idx, keys, fn, default, {})
        out = default
        for k in reversed(keys):
            out = self.ite(self.eq(idx, self.const(k)), fn(k), out)
        return out

    def _distribute(self, idx, keys, fn, default, memo):
        hit = memo.get(idx.uid)
        if hit is None:
            if idx.is_const:
                hit = fn(idx.value) if idx.value in keys else default
            else:
                hit = self.ite(idx.args[0], self._distribute(idx.args[1], keys, fn, default, memo),
                               self._distribute(idx.args[2], keys, fn, default, memo))
            memo[idx.uid] = hit
        return hit

    def is_true(self, x):
        return x is True or x is self.TRUE


def _const_leaves(x: ConstraintExp) -> bool:
    """Whether ``x`` is a constant or an ite tree with constant leaves."""
    stack = [x]
    seen = set()
    while stack:
        y = stack.pop()
        if y.uid in seen:
            continue
        seen.add(y.uid)
        if y.op == "ite":
            stack.extend(y.args[1:])
        elif y.op != "const":
            return False
    return True


# --------------------------------------------------------------------------
# Frame layout


def frame_fields(shape: Shape) -> list[tuple[str, str]]:
    """(field name, sort) of one frame, in the flattened argument order of ``Lab``."""
    out = [("avail", BOOL), ("active", BOOL), ("val", INT), ("pc", PC)]
    out += [(f"d_{name}", BOOL if sort == "bool" else INT) for name, sort in shape.data]
    out += [(f"upd_{p}", BOOL) for p in shape.ptrs]
    out += [(f"isnil_{p}", BOOL) for p in shape.ptrs]
    out += [("ev", EVENT)]
    out += [(f"ac_{j}", BOOL) for j in range(1, shape.arity + 1)]
    out += [("nd", DIR), ("ni", INT), ("pd", DIR), ("pi", INT)]
    return out


def _frame_values(shape: Shape, f: Frame) -> list:
    vals = [f.avail, f.active, f.val, f.pc, *f.d, *f.upd, *f.isnil, f.event, *f.ac,
            f.next[0], f.next[1], f.prev[0], f.prev[1]]
    return vals


def flatten_log(shape: Shape, logvar: str, log: Log) -> dict:
    """Variable assignment ``(logvar, frame, field) -> value`` for a concrete log."""
    if len(log) != shape.n + 1:
        raise SortError(f"log {logvar} has {len(log)} frames, expected {shape.n + 1}")
    names = frame_fields(shape)
    out = {}
    for i, f in enumerate(log, start=1):
        if not isinstance(f, Frame):
            raise SortError(f"frame {i} of {logvar} is not a Frame")
        vals = _frame_values(shape, f)
        if len(vals) != len(names):
            raise SortError(f"frame {i} of {logvar} does not match the program's frame layout")
        for (name, sort), v in zip(names, vals):
            _check_sort(shape, sort, v, f"{logvar}{i}.{name}")
            out[(logvar, i, name)] = v
    return out


def _check_sort(shape: Shape, sort: str, v, where: str) -> None:
    ok = {
        BOOL: lambda: isinstance(v, bool),
        INT: lambda: isinstance(v, int) and not isinstance(v, bool),
        PC: lambda: isinstance(v, int) and not isinstance(v, bool) and v in _pc_domain(shape),
        EVENT: lambda: v in shape.events,
        DIR: lambda: v in shape.dirs,
    }[sort]()
    if not ok:
        raise SortError(f"{where}: {v!r} is not a value of sort {sort}")


def _pc_domain(shape: Shape) -> tuple[int, ...]:
    return tuple(sorted({0, *shape.program.labels}))


class SymView(LogView):
    """Frame field access on a symbolic log variable."""

    def __init__(self, shape: Shape, A: SymbolicAlgebra, name: str):
        self.shape = shape
        self.log = None
        self.memo = {}
        self.A = A
        self.name = name
        self.sorts = dict(frame_fields(shape))

    def _v(self, i: int, fname: str):
        if not 1 <= i <= self.shape.n + 1:
            raise IndexError(f"frame {i} out of range")
        return self.A.var(self.name, i, fname, self.sorts[fname])

    def avail(self, i):
        return self._v(i, "avail")

    def active(self, i):
        return self._v(i, "active")

    def val(self, i):
        return self._v(i, "val")

    def pc(self, i):
        return self._v(i, "pc")

    def d(self, i, name):
        return self._v(i, f"d_{name}")

    def upd(self, i, p):
        return self._v(i, f"upd_{p}")

    def isnil(self, i, p):
        return self._v(i, f"isnil_{p}")

    def ev(self, i):
        return self._v(i, "ev")

    def ac(self, i, j):
        return self._v(i, f"ac_{j}")

    def next_dir(self, i):
        return self._v(i, "nd")

    def next_idx(self, i):
        return self._v(i, "ni")

    def prev_dir(self, i):
        return self._v(i, "pd")

    def prev_idx(self, i):
        return self._v(i, "pi")

    def field(self, i: int, fname: str):
        return self._v(i, fname)


# --------------------------------------------------------------------------
# Clauses and systems


@dataclass(frozen=True, eq=False)
class ChcClause:
    """``head <- Lab(body...) /\\ constraint``; ``head`` is None for a query."""

    kind: str  # I | II | III | IV | V | VI
    head: str | None
    body: tuple[str, ...]
    constraint: ConstraintExp
    index: int = 0  # frame added by the step (III-V)
    child: int = 0  # child position (IV, V)

    @property
    def logvars(self) -> tuple[str, ...]:
        out = [self.head] if self.head else []
        return tuple(out + [b for b in self.body if b not in out])

    def __str__(self):
        head = f"Lab({self.head})" if self.head else "false"
        body = " & ".join([f"Lab({b})" for b in self.body] + ["phi"])
        tag = self.kind + (f"[i={self.index}" + (f",j={self.child}]" if self.child else "]")
                           if self.index else "")
        return f"{tag}: {head} <- {body}"


@dataclass(frozen=True, eq=False)
class ChcSystem:
    shape: Shape
    clauses: tuple[ChcClause, ...]
    program_hash: str
    algebra: SymbolicAlgebra = field(repr=False)
    query: frozenset | None = None

    @property
    def params(self) -> tuple[int, int, int]:
        return (self.shape.k, self.shape.m, self.shape.n)

    @property
    def signature(self) -> list[tuple[str, str]]:
        """Flattened argument list of ``Lab``: (slot name, sort)."""
        return [(f"{name}{i}", sort) for i in range(1, self.shape.n + 2)
                for name, sort in frame_fields(self.shape)]

    def counts(self) -> dict[str, int]:
        out = {k: 0 for k in ("I", "II", "III", "IV", "V", "VI")}
        for c in self.clauses:
            out[c.kind] += 1
        return out


class _Compiler:
    def __init__(self, shape: Shape):
        self.shape = shape
        self.A = SymbolicAlgebra()
        self.views: dict[str, SymView] = {}
        self._cc: dict = {}

    def view(self, name: str) -> SymView:
        if name not in self.views:
            self.views[name] = SymView(self.shape, self.A, name)
        return self.views[name]

    # -- whole-frame predicates
    def blank(self, v: SymView, i: int):
        """Frame ``i`` holds the canonical available value."""
        return self.frame_is(v, i, zero_frame(self.shape))

    def frame_is(self, v: SymView, i: int, f: Frame, skip: Iterable[str] = ()):
        A, skip = self.A, set(skip)
        conds = []
        for (name, sort), val in zip(frame_fields(self.shape), _frame_values(self.shape, f)):
            if name in skip:
                continue
            lit = A.event(val) if sort == EVENT else A.typed(val, sort) if sort in ENUMS else A.const(val)
            conds.append(A.eq(v.field(i, name), lit))
        return A.and_(*conds)

    def same_frame(self, x: SymView, y: SymView, i: int):
        A = self.A
        return A.and_(*[A.eq(x.field(i, name), y.field(i, name)) for name, _ in frame_fields(self.shape)])

    def length(self, v: SymView, i: int):
        """``len(v, i)``: frame i unavailable, all later frames blank."""
        A = self.A
        return A.and_(A.not_(v.avail(i)), *[self.blank(v, l) for l in range(i + 1, self.shape.n + 2)])

    def prefix(self, theta: SymView, sigma: SymView, i: int):
        """``theta = sigma^{<i}``."""
        A = self.A
        return A.and_(*[self.same_frame(theta, sigma, l) for l in range(1, i)],
                      *[self.blank(theta, l) for l in range(i, self.shape.n + 2)])

    def next_in_range(self, v: SymView, i: int):
        """The forward link of a freshly added frame is a guess within the index range."""
        A, sh = self.A, self.shape
        return A.and_(A.or_(*[A.eq(v.next_dir(i), A.typed(d, DIR)) for d in sh.dirs]),
                      A.ge(v.next_idx(i), A.const(0)), A.ge(A.const(sh.n + 1), v.next_idx(i)))

    def backbone_frame(self, v: SymView):
        """Frame 1 of a non-root node: an input node or an auxiliary leaf."""
        A, sh = self.A, self.shape
        f1 = zero_frame(sh, avail=False)
        canon = self.frame_is(v, 1, f1, skip={"active", "val"} | {f"ac_{j}" for j in range(1, sh.arity + 1)})
        spare = [v.ac(1, j) for j in range(sh.k + 1, sh.arity + 1)]
        own = [v.ac(1, j) for j in range(1, sh.k + 1)]
        input_node = A.and_(v.active(1), *[A.not_(x) for x in spare])
        aux = A.and_(A.not_(v.active(1)), A.eq(v.val(1), A.const(0)), *spare, *[A.not_(x) for x in own])
        return A.and_(canon, A.or_(input_node, aux))

    def start(self, v: SymView):
        """Frames 1 and 2 of the root at the beginning of the execution."""
        A, sh = self.A, self.shape
        p = sh.program
        f1 = zero_frame(sh, avail=False)
        canon1 = self.frame_is(v, 1, f1, skip={"active", "val"} | {f"ac_{j}" for j in range(1, sh.arity + 1)})
        conds = [canon1, A.not_(v.avail(2)), A.eq(v.pc(2), A.typed(p.entry, PC)),
                 A.eq(v.active(2), v.active(1)), A.eq(v.val(2), v.val(1)),
                 A.eq(v.prev_dir(2), A.typed(SELF, DIR)), A.eq(v.prev_idx(2), A.const(2)),
                 self.next_in_range(v, 2)]
        conds += [A.eq(v.ac(2, j), v.ac(1, j)) for j in range(1, sh.arity + 1)]
        conds += [A.not_(v.upd(2, q)) for q in sh.ptrs]
        conds += [v.isnil(2, q) for q in sh.ptrs if q != p.root_pointer]
        r = p.root_pointer
        spare_off = [A.not_(v.ac(1, j)) for j in range(sh.k + 1, sh.arity + 1)]
        nonempty = A.and_(v.active(1), A.eq(v.ev(2), A.event(PtrHere(r))), A.not_(v.isnil(2, r)), *spare_off)
        empty = A.and_(A.not_(v.active(1)), A.eq(v.val(1), A.const(0)), A.eq(v.ev(2), A.event(NOP)),
                       v.isnil(2, r), *[A.not_(v.ac(1, j)) for j in range(1, sh.arity + 1)])
        conds.append(A.or_(nonempty, empty))
        return A.and_(*conds)

    # -- parent/child agreement
    def consistent_first_frames(self, child: SymView, j: int, parent: SymView):
        A, sh = self.A, self.shape
        s1a, t1a = parent.active(1), child.active(1)
        initial = A.and_(A.not_(parent.avail(2)), A.eq(parent.prev_dir(2), A.typed(SELF, DIR)),
                         A.eq(parent.prev_idx(2), A.const(2)))
        conds = [A.or_(initial, s1a), A.implies(t1a, s1a), A.eq(parent.ac(1, j), t1a)]
        if j > sh.k:
            conds.append(A.not_(t1a))
        return A.and_(*conds)

    def psi_down(self, parent: SymView, a: int, child: SymView, b: int, j: int):
        return psi(self.A, self.shape, parent, a, child, b, "down", j, child)

    def psi_up(self, child: SymView, a: int, parent: SymView, b: int, j: int):
        return psi(self.A, self.shape, child, a, parent, b, "up", j, parent)

    def consistent_child(self, child: SymView, j: int, parent: SymView):
        key = (child.name, j, parent.name)
        if key in self._cc:
            return self._cc[key]
        A, n = self.A, self.shape.n
        conds = [self.consistent_first_frames(child, j, parent)]
        jd, up = A.typed(j, DIR), A.typed(UP, DIR)
        for a in range(2, n + 1):
            for b in range(2, n + 2):
                # parent a -> child b
                trig = A.and_(A.not_(child.avail(b)), A.or_(
                    A.and_(A.not_(parent.avail(a)), A.eq(parent.next_dir(a), jd),
                           A.eq(parent.next_idx(a), A.const(b))),
                    A.and_(A.eq(child.prev_dir(b), up), A.eq(child.prev_idx(b), A.const(a)))))
                conds.append(A.implies(trig, self.psi_down(parent, a, child, b, j)))
                # child a -> parent b
                trig = A.and_(A.not_(parent.avail(b)), A.or_(
                    A.and_(A.not_(child.avail(a)), A.eq(child.next_dir(a), up),
                           A.eq(child.next_idx(a), A.const(b))),
                    A.and_(A.eq(parent.prev_dir(b), jd), A.eq(parent.prev_idx(b), A.const(a)))))
                conds.append(A.implies(trig, self.psi_up(child, a, parent, b, j)))
        out = A.and_(*conds)
        self._cc[key] = out
        return out

    # -- clauses
    def clause_first(self) -> ChcClause:
        s = self.view("s")
        phi = self.A.and_(self.length(s, 1), self.backbone_frame(s))
        return ChcClause("I", "s", (), phi)

    def clause_start(self) -> ChcClause:
        s = self.view("s")
        phi = self.A.and_(self.length(s, 2), self.start(s))
        return ChcClause("II", "s", (), phi)

    def clause_internal(self, i: int) -> ChcClause:
        A, sh = self.A, self.shape
        s, t = self.view("s"), self.view("t")
        phi = A.and_(self.prefix(t, s, i), self.length(s, i), self.next_in_range(s, i),
                     psi(A, sh, s, i - 1, s, i, "self", 0, s))
        return ChcClause("III", "s", ("t",), phi, index=i)

    def clause_up(self, i: int, j: int) -> ChcClause:
        """Parent ``s`` gains frame ``i`` from child ``c`` at position ``j``."""
        A, n = self.A, self.shape.n
        s, t, c = self.view("s"), self.view("t"), self.view("c")
        step = A.or_(*[A.and_(A.eq(s.prev_idx(i), A.const(a)), self.psi_up(c, a, s, i, j))
                       for a in range(2, n + 1)])
        phi = A.and_(self.prefix(t, s, i), self.length(s, i), self.next_in_range(s, i),
                     A.eq(s.prev_dir(i), A.typed(j, DIR)), step, self.consistent_child(c, j, s))
        return ChcClause("IV", "s", ("t", "c"), phi, index=i, child=j)

    def clause_down(self, i: int, j: int) -> ChcClause:
        """Child ``s`` at position ``j`` gains frame ``i`` from parent ``p``."""
        A, n = self.A, self.shape.n
        s, t, p = self.view("s"), self.view("t"), self.view("p")
        step = A.or_(*[A.and_(A.eq(s.prev_idx(i), A.const(a)), self.psi_down(p, a, s, i, j))
                       for a in range(2, n + 1)])
        phi = A.and_(self.prefix(t, s, i), self.length(s, i), self.next_in_range(s, i),
                     A.eq(s.prev_dir(i), A.typed(UP, DIR)), step, self.consistent_child(s, j, p))
        return ChcClause("V", "s", ("t", "p"), phi, index=i, child=j)

    def label_exit(self, v: SymView, ex: Iterable[str]):
        A, sh = self.A, self.shape
        ex = set(ex)
        parts = []
        for i in range(2, sh.n + 1):
            live = A.not_(v.avail(i))
            is_exit = A.or_(*[A.eq(v.pc(i), A.typed(lab, PC)) for lab in sh.program.exit_labels()])
            err = A.eq(v.ev(i), A.event(ERR))
            if "C" in ex:
                parts.append(A.and_(live, is_exit))
            if "E" in ex:
                parts.append(A.and_(live, A.not_(is_exit), err))
            if "M" in ex:
                parts.append(A.and_(live, A.not_(is_exit), A.not_(err), A.eq(v.ev(i), A.event(OOM))))
        if "O" in ex:
            parts.append(A.not_(v.avail(sh.n + 1)))
        return A.or_(*parts)


def _check_program(p: L.Program) -> None:
    for s in p.statements:
        op = s.op
        if isinstance(op, (L.AssignData, L.WriteData)) and not L.is_pure_data(op.exp):
            raise UnsupportedStatement(f"statement {s.label} reads the heap inside an expression; desugar first")
        if isinstance(op, (L.Branch, L.AssignCond)):
            cond = op.cond
            if L.is_compare_cond(cond) is None and not L.is_pure_data(cond):
                ok, _ = L.local_condition_pointer(cond)
                if not ok:
                    raise UnsupportedStatement(f"condition at {s.label} needs desugaring")


def compile_system(p: L.Program, m: int, n: int) -> ChcSystem:
    """Clauses I-V for ``p`` with ``m`` spare children per node and logs of ``n + 1`` frames."""
    if m < 0 or n < 2:
        raise ValueError("need m >= 0 and n >= 2")
    _check_program(p)
    shape = Shape(p, m, n)
    comp = _Compiler(shape)
    clauses = [comp.clause_first(), comp.clause_start()]
    clauses += [comp.clause_internal(i) for i in range(3, n + 2)]
    clauses += [comp.clause_up(i, j) for j in range(1, shape.arity + 1) for i in range(3, n + 2)]
    clauses += [comp.clause_down(i, j) for j in range(1, shape.arity + 1) for i in range(2, n + 2)]
    system = ChcSystem(shape, tuple(clauses), L.program_hash(p), comp.A)
    object.__setattr__(system, "_compiler", comp)
    return system


def add_exit_query(s: ChcSystem, ex: Iterable[str]) -> ChcSystem:
    """Append ``false <- Lab(s) /\\ label_exit(s, ex)``."""
    if s.query is not None:
        raise QueryAlreadyPresent("the system already has an exit query")
    ex = frozenset(ex)
    bad = ex - set(STATUSES)
    if bad:
        raise ValueError(f"unknown exit statuses {sorted(bad)}")
    comp: _Compiler = s.__dict__["_compiler"]
    q = ChcClause("VI", None, ("s",), comp.label_exit(comp.view("s"), ex))
    out = ChcSystem(s.shape, s.clauses + (q,), s.program_hash, s.algebra, ex)
    object.__setattr__(out, "_compiler", comp)
    return out


# --------------------------------------------------------------------------
# Concrete evaluation


def _postorder(root: ConstraintExp) -> list[ConstraintExp]:
    """Nodes reachable from ``root``, arguments before parents."""
    seen: dict[int, ConstraintExp] = {}
    stack = [root]
    while stack:
        x = stack.pop()
        if x.uid in seen:
            continue
        seen[x.uid] = x
        stack.extend(a for a in x.args if a.uid not in seen)
    # uids grow with construction, so arguments always precede their users.
    return [seen[u] for u in sorted(seen)]


def evaluate(root: ConstraintExp, env: Mapping) -> Any:
    """Value of ``root`` with variables read from ``env[(logvar, frame, field)]``."""
    vals: dict[int, Any] = {}
    for x in _postorder(root):
        op = x.op
        if op == "const":
            v = x.value
        elif op == "var":
            try:
                v = env[x.value]
            except KeyError:
                raise SortError(f"no value for {x!r}") from None
        elif op == "and":
            v = all(vals[a.uid] for a in x.args)
        elif op == "or":
            v = any(vals[a.uid] for a in x.args)
        elif op == "not":
            v = not vals[x.args[0].uid]
        elif op == "ite":
            v = vals[x.args[1].uid] if vals[x.args[0].uid] else vals[x.args[2].uid]
        elif op == "=":
            v = vals[x.args[0].uid] == vals[x.args[1].uid]
        else:
            v = _concrete_op(op, vals[x.args[0].uid], vals[x.args[1].uid])
        vals[x.uid] = v
    return vals[root.uid]


def eval_clause(system: ChcSystem, c: ChcClause, binding: Mapping[str, Log],
                lab: Callable[[Log], bool] | None = None) -> bool:
    """Concrete reading of a clause instance.

    Without ``lab`` the result is whether the constraint holds, i.e. whether
    the instance fires.  With ``lab`` (an interpretation of the relation) the
    result is the truth of ``body /\\ constraint => head``.
    """
    missing = [v for v in c.logvars if v not in binding]
    if missing:
        raise SortError(f"binding misses log variables {missing}")
    env: dict = {}
    for name in c.logvars:
        env.update(flatten_log(system.shape, name, binding[name]))
    fires = bool(evaluate(c.constraint, env))
    if lab is None:
        return fires
    if not fires or not all(lab(binding[b]) for b in c.body):
        return True
    return c.head is not None and bool(lab(binding[c.head]))


# --------------------------------------------------------------------------
# SMT-LIB emission


def _event_name(shape: Shape, e: Event) -> str:
    i = shape.events.index(e)
    slug = str(e).replace(":=", "_").replace(",", "_")
    return f"ev{i}_{slug}"


def _dir_name(d: int) -> str:
    return "dself" if d == SELF else "dup" if d == UP else f"d{d}"


def _int_lit(v: int) -> str:
    return str(v) if v >= 0 else f"(- {-v})"


class _Printer:
    def __init__(self, shape: Shape, datatypes: bool):
        self.shape = shape
        self.datatypes = datatypes
        self.ev_index = {e: i for i, e in enumerate(shape.events)}

    def sort(self, s: str) -> str:
        if s == BOOL:
            return "Bool"
        if s == INT or not self.datatypes:
            return "Int"
        return {PC: "Pc", EVENT: "Ev", DIR: "Dir"}[s]

    def const(self, x: ConstraintExp) -> str:
        v, s = x.value, x.sort
        if s == BOOL:
            return "true" if v else "false"
        if s == EVENT:
            return _event_name(self.shape, v) if self.datatypes else str(self.ev_index[v])
        if s == PC and self.datatypes:
            return f"pc{v}"
        if s == DIR and self.datatypes:
            return _dir_name(v)
        return _int_lit(v)

    def declarations(self) -> list[str]:
        if not self.datatypes:
            return []
        sh = self.shape
        pcs = " ".join(f"(pc{l})" for l in _pc_domain(sh))
        evs = " ".join(f"({_event_name(sh, e)})" for e in sh.events)
        dirs = " ".join(f"({_dir_name(d)})" for d in sh.dirs)
        return [f"(declare-datatypes ((Pc 0)) (({pcs})))",
                f"(declare-datatypes ((Ev 0)) (({evs})))",
                f"(declare-datatypes ((Dir 0)) (({dirs})))"]


def _var_name(logvar: str, i: int, fname: str) -> str:
    return f"{logvar}{i}_{fname}"


_SMT_OP = {"and": "and", "or": "or", "not": "not", "ite": "ite", "=": "=", "+": "+", "-": "-",
           "*": "*", "<": "<", "<=": "<=", ">": ">", ">=": ">="}


def _emit_term(pr: _Printer, root: ConstraintExp) -> str:
    """Print a DAG with shared subterms bound by layered ``let``s."""
    nodes = _postorder(root)
    uses: dict[int, int] = {}
    for x in nodes:
        for a in x.args:
            uses[a.uid] = uses.get(a.uid, 0) + 1
    shared = {x.uid for x in nodes if x.args and uses.get(x.uid, 0) > 1}
    level: dict[int, int] = {}
    text: dict[int, str] = {}
    layers: dict[int, list[tuple[str, str]]] = {}
    for x in nodes:
        if x.op == "const":
            s = pr.const(x)
            lv = 0
        elif x.op == "var":
            s = _var_name(*x.value)
            lv = 0
        else:
            args = " ".join(text[a.uid] for a in x.args)
            s = f"({_SMT_OP[x.op]} {args})"
            lv = max(level[a.uid] for a in x.args)
        if x.uid in shared and x is not root:
            lv += 1
            name = f"_{x.uid}"
            layers.setdefault(lv, []).append((name, s))
            s = name
        level[x.uid] = lv
        text[x.uid] = s
    out = text[root.uid]
    for lv in sorted(layers, reverse=True):
        binds = " ".join(f"({name} {body})" for name, body in layers[lv])
        out = f"(let ({binds}) {out})"
    return out


def substitute(A: SymbolicAlgebra, root: ConstraintExp, sub: Mapping) -> ConstraintExp:
    """Replace variables by the terms in ``sub`` and re-simplify."""
    out: dict[int, ConstraintExp] = {}
    for x in _postorder(root):
        op = x.op
        if op == "const":
            y = x
        elif op == "var":
            y = sub.get(x.value, x)
        else:
            args = [out[a.uid] for a in x.args]
            if op == "and":
                y = A.and_(*args)
            elif op == "or":
                y = A.or_(*args)
            elif op == "not":
                y = A.not_(args[0])
            elif op == "ite":
                y = A.ite(*args)
            elif op == "=":
                y = A.eq(*args)
            else:
                y = A.binop(op, *args)
        out[x.uid] = y
    return out[root.uid]


def _lit(A: SymbolicAlgebra, sort: str, v) -> ConstraintExp:
    if sort == EVENT:
        return A.event(v)
    if sort in ENUMS:
        return A.typed(v, sort)
    return A.const(v)


def specialize(system: ChcSystem, c: ChcClause) -> tuple[ConstraintExp, dict[str, list[ConstraintExp]]]:
    """Fold the frames a step clause pins down into its constraint.

    For a step adding frame ``i`` the head's frames above ``i`` are blank and
    the prefix variable equals the head below ``i``; substituting those values
    yields an equivalent clause over fewer variables.  Returns the simplified
    constraint and the argument terms of every ``Lab`` occurrence.
    """
    A, sh = system.algebra, system.shape
    fields = frame_fields(sh)
    blank = _frame_values(sh, zero_frame(sh))
    sub: dict = {}
    if c.index and c.head:
        i = c.index
        for l in range(1, sh.n + 2):
            for (name, sort), bv in zip(fields, blank):
                if l > i:
                    sub[(c.head, l, name)] = _lit(A, sort, bv)
                prefix = c.body[0]
                if l < i:
                    sub[(prefix, l, name)] = A.var(c.head, l, name, sort)
                else:
                    sub[(prefix, l, name)] = _lit(A, sort, bv)
    phi = substitute(A, c.constraint, sub) if sub else c.constraint
    args = {lv: [sub.get((lv, l, name), A.var(lv, l, name, sort))
                 for l in range(1, sh.n + 2) for name, sort in fields] for lv in c.logvars}
    return phi, args


def _clause_smt(system: ChcSystem, pr: _Printer, c: ChcClause, simplify: bool) -> str:
    fields = frame_fields(system.shape)
    n1 = system.shape.n + 1
    if simplify:
        phi, args = specialize(system, c)
    else:
        A = system.algebra
        phi = c.constraint
        args = {lv: [A.var(lv, l, name, sort) for l in range(1, n1 + 1) for name, sort in fields]
                for lv in c.logvars}
    free: dict = {}
    for node in [phi] + [t for ts in args.values() for t in ts]:
        for x in _postorder(node):
            if x.op == "var":
                free[x.value] = x.sort
    order = {(lv, l, name): (ci, l, fi) for ci, lv in enumerate(c.logvars)
             for l in range(1, n1 + 1) for fi, (name, _) in enumerate(fields)}
    decls = " ".join(f"({_var_name(*key)} {pr.sort(free[key])})" for key in sorted(free, key=order.__getitem__))

    def lab(lv: str) -> str:
        return "(Lab " + " ".join(_emit_term(pr, t) for t in args[lv]) + ")"

    body = [lab(b) for b in c.body]
    if phi is not system.algebra.TRUE:
        body.append(_emit_term(pr, phi))
    body_text = "true" if not body else body[0] if len(body) == 1 else "(and " + " ".join(body) + ")"
    head = lab(c.head) if c.head else "false"
    if not decls:
        return f"(assert (=> {body_text} {head}))"
    return f"(assert (forall ({decls}) (=> {body_text} {head})))"


def emit_smtlib(system: ChcSystem, datatypes: bool = False, simplify: bool = True) -> str:
    """The system in the HORN logic of SMT-LIB 2 (deterministic text).

    Enumerated sorts (program counters, events, directions) are integers by
    default and declared datatypes with ``datatypes=True``.  ``simplify``
    substitutes the values a clause pins down (see :func:`specialize`);
    without it every clause is printed verbatim.
    """
    pr = _Printer(system.shape, datatypes)
    sig = " ".join(pr.sort(s) for _, s in system.signature)
    k, m, n = system.params
    lines = [f"; knitwit clauses program={system.program_hash} k={k} m={m} n={n}",
             "(set-logic HORN)", *pr.declarations(), f"(declare-fun Lab ({sig}) Bool)"]
    for c in system.clauses:
        lines.append(f"; clause {c}")
        lines.append(_clause_smt(system, pr, c, simplify))
    lines.append("(check-sat)")
    return "\n".join(lines) + "\n"


def emit_meta(system: ChcSystem, smt_text: str, datatypes: bool = False) -> dict:
    sh = system.shape
    return {
        "program_hash": system.program_hash,
        "params": {"k": sh.k, "m": sh.m, "n": sh.n},
        "query": sorted(system.query) if system.query is not None else None,
        "clauses": len(system.clauses),
        "clause_counts": system.counts(),
        "enum_mode": "datatype" if datatypes else "int",
        "frame_layout": [{"field": f, "sort": s} for f, s in frame_fields(sh)],
        "lab_arity": len(system.signature),
        "events": [str(e) for e in sh.events],
        "smt_sha256": hashlib.sha256(smt_text.encode()).hexdigest(),
    }
