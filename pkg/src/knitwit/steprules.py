"""Local lace-step rules, written once over an algebra.

A lace step pushes one frame onto the log ``dst`` at index ``b``, given the
log ``src`` whose top frame ``a`` is the current end of the lace.  The step is
internal (``src is dst``), a move down to child ``j``, or a move up from child
``j``.  Everything the new frame holds is a function of those two log prefixes,
which is what makes the clause system compositional.

The rules are expressed against :class:`Algebra`.  :class:`Concrete` evaluates
them on actual logs (the replay functions of the tree module); the clause
generator supplies a symbolic algebra and obtains constraint terms from the
very same code.

Rewinding convention: a pointer lookup that has to leave the current node
walks back along ``prev`` links.  Intermediate nodes receive ``Rwd(i)``
frames (``i`` = last frame with the pointer's ``upd`` flag); the node the
pointer refers to receives the statement's effect directly on arrival.
``p := q->pf`` first pushes a ``Rwd`` marker on q's node (indexed by q's
``here`` event) and then resolves the field in a second step, rewinding with
``RwdP(i, r)`` frames if the field points elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from . import lang as L
from .frames import (ERR, NOP, OOM, SELF, UP, Event, FieldAssignNil, FieldAssignPtr,
                     Frame, Log, PtrHere, Rwd, RwdP, Shape)


class UnsupportedStatement(ValueError):
    pass


class NoStepApplicable(ValueError):
    pass


# --------------------------------------------------------------------------
# Algebras


class Algebra:
    """Operations the rules are written with; values are opaque to the rules."""

    symbolic = False

    def const(self, v: Any) -> Any: ...
    def event(self, e: Event) -> Any: ...
    def and_(self, *xs: Any) -> Any: ...
    def or_(self, *xs: Any) -> Any: ...
    def not_(self, x: Any) -> Any: ...
    def ite(self, c: Any, x: Any, y: Any) -> Any: ...
    def eq(self, x: Any, y: Any) -> Any: ...
    def ge(self, x: Any, y: Any) -> Any: ...
    def binop(self, op: str, x: Any, y: Any) -> Any: ...

    def select(self, idx: Any, keys: Iterable[int], fn: Callable[[int], Any], default: Any) -> Any:
        """``fn(idx)`` if ``idx`` is one of ``keys``, else ``default``."""
        raise NotImplementedError

    def is_true(self, x: Any) -> bool:
        """Statically known to be true (used only to prune)."""
        return x is True


class Concrete(Algebra):
    def const(self, v):
        return v

    def event(self, e):
        return e

    def and_(self, *xs):
        return all(xs)

    def or_(self, *xs):
        return any(xs)

    def not_(self, x):
        return not x

    def ite(self, c, x, y):
        return x if c else y

    def eq(self, x, y):
        return x == y

    def ge(self, x, y):
        return x >= y

    def binop(self, op, x, y):
        return _concrete_op(op, x, y)

    def select(self, idx, keys, fn, default):
        return fn(idx) if idx in set(keys) else default


def _concrete_op(op: str, x, y):
    if op == "+":
        return x + y
    if op == "-":
        return x - y
    if op == "*":
        return x * y
    if op == "=":
        return x == y
    if op == "!=":
        return x != y
    if op == "<":
        return x < y
    if op == "<=":
        return x <= y
    if op == ">":
        return x > y
    if op == ">=":
        return x >= y
    if op == "and":
        return bool(x) and bool(y)
    if op == "or":
        return bool(x) or bool(y)
    raise ValueError(op)


CONCRETE = Concrete()


# --------------------------------------------------------------------------
# Log views


class LogView:
    """Field access on frame ``i`` (1-based) of a log; concrete by default."""

    def __init__(self, shape: Shape, log: Log):
        self.shape = shape
        self.log = log
        self.memo: dict = {}

    def _f(self, i: int) -> Frame:
        return self.log[i - 1]

    def avail(self, i):
        return self._f(i).avail

    def active(self, i):
        return self._f(i).active

    def val(self, i):
        return self._f(i).val

    def pc(self, i):
        return self._f(i).pc

    def d(self, i, name):
        return self._f(i).d[self.shape.data_index[name]]

    def upd(self, i, p):
        return self._f(i).upd[self.shape.ptr_index[p]]

    def isnil(self, i, p):
        return self._f(i).isnil[self.shape.ptr_index[p]]

    def ev(self, i):
        return self._f(i).event

    def ac(self, i, j):
        return self._f(i).ac[j - 1]

    def next_dir(self, i):
        return self._f(i).next[0]

    def next_idx(self, i):
        return self._f(i).next[1]

    def prev_dir(self, i):
        return self._f(i).prev[0]

    def prev_idx(self, i):
        return self._f(i).prev[1]


def _memo(view: LogView, key, compute):
    m = view.memo
    if key not in m:
        m[key] = compute()
    return m[key]


# --------------------------------------------------------------------------
# Log queries (all memoized per view; positions are concrete unless noted)


def points_here(A: Algebra, v: LogView, c: int, q: str):
    """``q`` was set to this node at or before frame ``c`` and not updated since."""
    def compute():
        if c < 2:
            return A.const(False)
        here = A.eq(v.ev(c), A.event(PtrHere(q)))
        return A.or_(here, A.and_(A.not_(v.upd(c, q)), points_here(A, v, c - 1, q)))
    return _memo(v, ("ph", c, q), compute)


def last_upd(A: Algebra, v: LogView, c: int, q: str):
    """Largest index in [2, c] whose ``upd_q`` flag is set, defaulting to 2."""
    def compute():
        if c <= 2:
            return A.const(2)
        return A.ite(v.upd(c, q), A.const(c), last_upd(A, v, c - 1, q))
    return _memo(v, ("lu", c, q), compute)


def last_here(A: Algebra, v: LogView, c: int, q: str):
    """Largest index in [2, c] holding a ``q:=here`` event (0 if none)."""
    def compute():
        if c < 2:
            return A.const(0)
        return A.ite(A.eq(v.ev(c), A.event(PtrHere(q))), A.const(c), last_here(A, v, c - 1, q))
    return _memo(v, ("lh", c, q), compute)


FIELD_IMPLICIT, FIELD_NIL = 0, 1


def field_state(A: Algebra, v: LogView, c: int, pf: str):
    """(kind, index) of the latest assignment to ``pf`` in the node's current life.

    kind is FIELD_IMPLICIT (never assigned since the node became active),
    FIELD_NIL, or 2 + position of the pointer variable that was stored.
    The scan stops at the most recent inactive frame, so a reused node starts
    over with nil fields.
    """
    def compute():
        if c < 2:
            return A.const(FIELD_IMPLICIT), A.const(0)
        below_kind, below_idx = field_state(A, v, c - 1, pf)
        ev = v.ev(c)
        kind, idx = below_kind, below_idx
        for i, r in reversed(list(enumerate(v.shape.ptrs))):
            hit = A.eq(ev, A.event(FieldAssignPtr(pf, r)))
            kind, idx = A.ite(hit, A.const(2 + i), kind), A.ite(hit, A.const(c), idx)
        hit = A.eq(ev, A.event(FieldAssignNil(pf)))
        kind, idx = A.ite(hit, A.const(FIELD_NIL), kind), A.ite(hit, A.const(c), idx)
        dead = A.not_(v.active(c))
        return A.ite(dead, A.const(FIELD_IMPLICIT), kind), A.ite(dead, A.const(0), idx)
    return _memo(v, ("fs", c, pf), compute)


def alive_after(A: Algebra, v: LogView, c: int, top: int):
    """Every frame in (c, top] is active."""
    def compute():
        if c >= top:
            return A.const(True)
        return A.and_(v.active(c + 1), alive_after(A, v, c + 1, top))
    return _memo(v, ("alive", c, top), compute)


def _at(A, pos, lo, hi, fn, default):
    return A.select(pos, range(lo, hi + 1), fn, default)


# --------------------------------------------------------------------------
# Rule context


@dataclass
class Case:
    """One alternative of a statement's behaviour.

    ``dir`` is where the lace moves (an algebra value); ``cross`` cases only
    fire for moves to a neighbour, never internally.
    """

    cond: Any
    dir: Any
    fields: dict
    cross: bool = False


@dataclass
class Ctx:
    A: Algebra
    shape: Shape
    src: LogView
    a: int
    dst: LogView
    b: int
    move: str  # "self" | "down" | "up"
    j: int = 0  # child index of the move (down: target child; up: source child)
    E: dict = field(default_factory=dict)

    @property
    def move_dir(self) -> int:
        return SELF if self.move == "self" else self.j if self.move == "down" else UP

    @property
    def back_dir(self) -> int:
        return SELF if self.move == "self" else UP if self.move == "down" else self.j


def _is_rwd(A, shape: Shape, ev):
    return A.or_(*[A.eq(ev, A.event(Rwd(i))) for i in range(2, shape.n + 1)])


def _rwd_index(A, shape: Shape, ev):
    out = A.const(0)
    for i in range(shape.n, 1, -1):
        out = A.ite(A.eq(ev, A.event(Rwd(i))), A.const(i), out)
    return out


def _rwdp_index(A, shape: Shape, ev, r: str):
    out = A.const(0)
    for i in range(shape.n, 1, -1):
        out = A.ite(A.eq(ev, A.event(RwdP(i, r))), A.const(i), out)
    return out


def _is_rwdp(A, shape: Shape, ev, r: str):
    return A.or_(*[A.eq(ev, A.event(RwdP(i, r))) for i in range(2, shape.n + 1)])


def _rwd_event(A, shape: Shape, idx, ptr: str | None = None):
    make = (lambda i: A.event(Rwd(i))) if ptr is None else (lambda i: A.event(RwdP(i, ptr)))
    return _at(A, idx, 2, shape.n, make, make(2))


def _merge(A, c, yes: dict, no: dict, default: Callable[[Any], Any]) -> dict:
    out = {}
    for key in set(yes) | set(no):
        y = yes[key] if key in yes else default(key)
        n = no[key] if key in no else default(key)
        out[key] = y if y is n else A.ite(c, y, n)
    return out


# --------------------------------------------------------------------------
# The rule


@dataclass
class Outcome:
    fires: Any
    fields: dict  # key -> algebra value (see frame_keys)


def frame_keys(shape: Shape) -> list:
    keys: list = ["active", "val", "pc", "event"]
    keys += [("d", name) for name, _ in shape.data]
    keys += [("isnil", p) for p in shape.ptrs]
    keys += [("upd", p) for p in shape.ptrs]
    keys += [("ac", j) for j in range(1, shape.arity + 1)]
    keys += ["prev_dir", "prev_idx"]
    return keys


def continues(A: Algebra, shape: Shape, v: LogView, a: int):
    """Frame ``a`` is unavailable and non-terminal."""
    if a > shape.n:
        return A.const(False)
    pc = v.pc(a)
    ev = v.ev(a)
    not_exit = A.and_(*[A.not_(A.eq(pc, A.const(lab))) for lab in shape.program.exit_labels()])
    return A.and_(A.not_(v.avail(a)), not_exit, A.not_(A.eq(ev, A.event(ERR))),
                  A.not_(A.eq(ev, A.event(OOM))))


def lace_step(A: Algebra, shape: Shape, src: LogView, a: int, dst: LogView, b: int,
              move: str, j: int = 0) -> Outcome:
    """Whether the lace steps from frame ``a`` of ``src`` to frame ``b`` of ``dst``
    along ``move``, and the content of that new frame.
    """
    ctx = Ctx(A, shape, src, a, dst, b, move, j)
    _compute_excursion(ctx)

    def default(key):
        return _default(ctx, key)

    pc = src.pc(a)
    stmts = shape.program.statements
    if not A.symbolic:
        stmts = [s for s in stmts if s.label == pc]
    fires_by_label = []
    fields_by_label = []
    for s in stmts:
        if isinstance(s.op, L.Exit):
            continue
        cases = _statement_cases(ctx, s)
        hit = []
        fields: dict = {}
        for case in reversed(cases):
            if case.cross and move == "self":
                continue
            c = A.and_(case.cond, A.eq(case.dir, A.const(ctx.move_dir)))
            hit.append(c)
            fields = _merge(A, c, case.fields, fields, default)
        is_here = A.eq(pc, A.const(s.label))
        fires_by_label.append(A.and_(is_here, A.or_(*hit)))
        fields_by_label.append((is_here, fields))
    fires = A.and_(continues(A, shape, src, a), A.or_(*fires_by_label))
    merged: dict = {}
    for is_here, fields in reversed(fields_by_label):
        merged = _merge(A, is_here, fields, merged, default)
    out = {}
    for key in frame_keys(shape):
        if isinstance(key, tuple) and key[0] == "upd":
            continue
        out[key] = merged.get(key, default(key))
    for p in shape.ptrs:
        out[("upd", p)] = A.and_(A.not_(out[("isnil", p)]), ctx.E[p]) if move != "self" else A.const(False)
    out["prev_dir"] = A.const(ctx.back_dir)
    out["prev_idx"] = A.const(a)
    return Outcome(fires, out)


def _compute_excursion(ctx: Ctx) -> None:
    """E[q]: q received a ``here`` event while the lace was away from ``dst``."""
    A, src, a, dst, b = ctx.A, ctx.src, ctx.a, ctx.dst, ctx.b
    for q in ctx.shape.ptrs:
        if ctx.move == "self" or b <= 2:
            ctx.E[q] = A.const(False)
            continue
        back = UP if ctx.move == "down" else ctx.j
        dir_ok = A.eq(dst.next_dir(b - 1), A.const(back))
        start = dst.next_idx(b - 1)

        def suffix(c, q=q):
            def compute():
                here = A.eq(src.ev(c), A.event(PtrHere(q)))
                if c == a:
                    return here
                return A.or_(here, src.upd(c + 1, q), suffix(c + 1))
            return _memo(src, ("exc", c, a, q), compute)

        ctx.E[q] = A.and_(dir_ok, _at(A, start, 2, a, suffix, A.const(False)))


def _default(ctx: Ctx, key):
    A, src, a, dst, b = ctx.A, ctx.src, ctx.a, ctx.dst, ctx.b
    if key == "active":
        return dst.active(b - 1)
    if key == "val":
        return dst.val(b - 1)
    if key == "pc":
        return src.pc(a)
    if key == "event":
        return A.event(NOP)
    if key == "prev_dir":
        return A.const(ctx.back_dir)
    if key == "prev_idx":
        return A.const(a)
    kind, name = key
    if kind == "d":
        return src.d(a, name)
    if kind == "isnil":
        return src.isnil(a, name)
    if kind == "ac":
        if ctx.move == "up" and name == ctx.j:
            return src.active(a)
        return dst.ac(b - 1, name)
    raise KeyError(key)


def _next_pc(s: L.Statement):
    return s.succ[0]


# -- pointer lookups


def _lookup(ctx: Ctx, q: str, final: dict, on_nil: dict | None, fresh_guard=None) -> list[Case]:
    """Find the node ``q`` refers to and apply ``final`` there.

    ``on_nil`` is the internal outcome when ``q`` is nil (``None``: error).
    ``fresh_guard`` restricts when a fresh lookup starts (used by conditions
    that only dereference under short-circuit evaluation).
    """
    A, sh, src, a = ctx.A, ctx.shape, ctx.src, ctx.a
    ev = src.ev(a)
    is_r = _is_rwd(A, sh, ev)
    fresh = A.not_(is_r)
    if fresh_guard is not None:
        fresh = A.and_(fresh, fresh_guard)
    nil_q = src.isnil(a, q)
    here = points_here(A, src, a, q)
    self_dir = A.const(SELF)
    cases = [
        Case(A.and_(fresh, nil_q), self_dir, {"event": A.event(ERR)} if on_nil is None else on_nil),
        Case(A.and_(fresh, A.not_(nil_q), here), self_dir, final),
    ]
    pos = A.ite(is_r, _rwd_index(A, sh, ev), A.const(a))
    moving = A.or_(is_r, A.and_(fresh, A.not_(nil_q), A.not_(here)))
    cases.append(_rewind_case(ctx, moving, pos, [q], lambda _all, _b1: final))
    return cases


def _rewind_case(ctx: Ctx, cond, pos, ptrs: Sequence[str], on_arrival, rwd_ptr: str | None = None) -> Case:
    """Move one node further back along the lace while rewinding for ``ptrs``.

    On the neighbour, the rewind stops if any of ``ptrs`` points there
    (``on_arrival`` gets the "all point here" value and the arrival index)
    and otherwise pushes a rewind frame.
    """
    A, sh, src, a, dst, b = ctx.A, ctx.shape, ctx.src, ctx.a, ctx.dst, ctx.b
    lus = [_at(A, pos, 2, a, lambda c, q=q: last_upd(A, src, c, q), A.const(2)) for q in ptrs]
    a2 = lus[0]
    for other in lus[1:]:
        a2 = A.ite(A.ge(a2, other), a2, other)
    dir_ = _at(A, a2, 2, a, src.prev_dir, A.const(SELF))
    if ctx.move == "self":
        return Case(cond, dir_, {}, cross=True)
    b1 = _at(A, a2, 2, a, src.prev_idx, A.const(0))
    phs = [_at(A, b1, 2, b - 1, lambda c, q=q: points_here(A, dst, c, q), A.const(False)) for q in ptrs]
    arrive = A.or_(*phs)
    all_here = A.and_(*phs)
    dst_lus = [_at(A, b1, 2, b - 1, lambda c, q=q: last_upd(A, dst, c, q), A.const(2)) for q in ptrs]
    nxt = dst_lus[0]
    for other in dst_lus[1:]:
        nxt = A.ite(A.ge(nxt, other), nxt, other)
    stay = {"event": _rwd_event(A, sh, nxt, rwd_ptr)}
    fields = _merge(A, arrive, on_arrival(all_here, b1), stay, lambda k: _default(ctx, k))
    return Case(cond, dir_, fields, cross=True)


def _result_branch(ctx: Ctx, s: L.Statement, value) -> dict:
    A = ctx.A
    return {"pc": A.ite(value, A.const(s.succ[0]), A.const(s.succ[1]))}


# -- conditions


def _eval(A: Algebra, e: L.Exp, env: dict, atom) -> Any:
    if isinstance(e, (L.IntLit, L.BoolLit)):
        return A.const(e.value)
    if isinstance(e, L.Var):
        return env[e.name]
    if isinstance(e, (L.Deref, L.PtrEq, L.FieldEq)):
        return atom(e)
    if isinstance(e, L.Not):
        return A.not_(_eval(A, e.arg, env, atom))
    if e.op == "and":
        return A.and_(_eval(A, e.left, env, atom), _eval(A, e.right, env, atom))
    if e.op == "or":
        return A.or_(_eval(A, e.left, env, atom), _eval(A, e.right, env, atom))
    return A.binop(e.op, _eval(A, e.left, env, atom), _eval(A, e.right, env, atom))


def _needs(A: Algebra, e: L.Exp, env: dict, atom) -> Any:
    """Short-circuit evaluation of ``e`` reaches a ``->val`` read."""
    if isinstance(e, L.Deref):
        return A.const(True)
    if isinstance(e, L.Not):
        return _needs(A, e.arg, env, atom)
    if isinstance(e, L.BinOp):
        left = _needs(A, e.left, env, atom)
        right = _needs(A, e.right, env, atom)
        if e.op == "and":
            return A.or_(left, A.and_(_eval(A, e.left, env, atom), right))
        if e.op == "or":
            return A.or_(left, A.and_(A.not_(_eval(A, e.left, env, atom)), right))
        return A.or_(left, right)
    return A.const(False)


def _env(ctx: Ctx) -> dict:
    return {name: ctx.src.d(ctx.a, name) for name, _ in ctx.shape.data}


def _local_cond_cases(ctx: Ctx, s: L.Statement, cond: L.Exp, result: Callable[[Any], dict]) -> list[Case]:
    A, src, a = ctx.A, ctx.src, ctx.a
    env = _env(ctx)
    below_val = ctx.dst.val(ctx.b - 1)

    def atom(e):
        if isinstance(e, L.PtrEq):
            return src.isnil(a, e.left)
        return below_val

    value = _eval(A, cond, env, atom)
    ok, ptr = L.local_condition_pointer(cond)
    if ptr is None:
        return [Case(A.const(True), A.const(SELF), result(value))]
    needs = _needs(A, cond, env, atom)
    ev = src.ev(a)
    skip_read = A.and_(A.not_(_is_rwd(A, ctx.shape, ev)), A.not_(needs))
    return [Case(skip_read, A.const(SELF), result(value))] + \
        _lookup(ctx, ptr, result(value), None, fresh_guard=needs)


def _compare_cases(ctx: Ctx, p: str, q: str, result: Callable[[Any], dict]) -> list[Case]:
    A, sh, src, a = ctx.A, ctx.shape, ctx.src, ctx.a
    ev = src.ev(a)
    is_r = _is_rwd(A, sh, ev)
    fresh = A.not_(is_r)
    nil_p, nil_q = src.isnil(a, p), src.isnil(a, q)
    here_p, here_q = points_here(A, src, a, p), points_here(A, src, a, q)
    some_nil = A.or_(nil_p, nil_q)
    some_here = A.or_(here_p, here_q)
    cases = [
        Case(A.and_(fresh, some_nil), A.const(SELF), result(A.and_(nil_p, nil_q))),
        Case(A.and_(fresh, A.not_(some_nil), some_here), A.const(SELF), result(A.and_(here_p, here_q))),
    ]
    pos = A.ite(is_r, _rwd_index(A, sh, ev), A.const(a))
    moving = A.or_(is_r, A.and_(fresh, A.not_(some_nil), A.not_(some_here)))
    cases.append(_rewind_case(ctx, moving, pos, [p, q], lambda all_here, _b1: result(all_here)))
    return cases


# -- p := q->pf


def _from_field_cases(ctx: Ctx, s: L.Statement, op: L.AssignFromField) -> list[Case]:
    A, sh, src, a = ctx.A, ctx.shape, ctx.src, ctx.a
    p, q, pf = op.target, op.source, op.field
    nxt = A.const(_next_pc(s))
    ev = src.ev(a)
    is_r = _is_rwd(A, sh, ev)
    ri = _rwd_index(A, sh, ev)
    is_rp = {r: _is_rwdp(A, sh, ev, r) for r in sh.ptrs}
    fresh = A.and_(A.not_(is_r), *[A.not_(x) for x in is_rp.values()])
    nil_q = src.isnil(a, q)
    here_q = points_here(A, src, a, q)
    marker = A.and_(is_r, _at(A, ri, 2, a, lambda c: points_here(A, src, c, q), A.const(False)))
    set_nil = {("isnil", p): A.const(True), "pc": nxt}
    set_here = {"event": A.event(PtrHere(p)), ("isnil", p): A.const(False), "pc": nxt}

    cases = [Case(A.and_(fresh, nil_q), A.const(SELF), {"event": A.event(ERR)})]

    # Phase one: reach the node q refers to, leaving a marker there.
    moving = A.or_(A.and_(fresh, A.not_(nil_q), A.not_(here_q)), A.and_(is_r, A.not_(marker)))
    pos = A.ite(is_r, ri, A.const(a))

    def marker_frame(_all_here, b1):
        return {"event": _rwd_event(A, sh, _at(A, b1, 2, ctx.b - 1,
                                                lambda c: last_here(A, ctx.dst, c, q), A.const(2)))}
    cases.append(_rewind_case(ctx, moving, pos, [q], marker_frame))

    # Resolve the field at q's node.
    at_q = A.or_(A.and_(fresh, A.not_(nil_q), here_q), marker)
    kind, fidx = field_state(A, src, a, pf)
    j = sh.program.field_index(pf)
    child_on = src.ac(a, j)
    implicit = A.eq(kind, A.const(FIELD_IMPLICIT))
    cases.append(Case(A.and_(at_q, A.or_(A.eq(kind, A.const(FIELD_NIL)), A.and_(implicit, A.not_(child_on)))),
                      A.const(SELF), set_nil))
    cases.append(Case(A.and_(at_q, implicit, child_on), A.const(j), set_here))

    def arrive_at_target(_all_here, b1):
        valid = _at(A, b1, 2, ctx.b - 1, lambda c: alive_after(A, ctx.dst, c, ctx.b - 1), A.const(False))
        return _merge(A, valid, set_here, set_nil, lambda k: _default(ctx, k))

    for i, r in enumerate(sh.ptrs):
        stored = A.and_(at_q, A.eq(kind, A.const(2 + i)))
        local = _at(A, fidx, 2, a, lambda c, r=r: points_here(A, src, c, r), A.const(False))
        cases.append(Case(A.and_(stored, local), A.const(SELF), set_here))
        cases.append(_rewind_case(ctx, A.and_(stored, A.not_(local)), fidx, [r], arrive_at_target, rwd_ptr=r))
        # Phase two continues from a RwdP frame.
        cases.append(_rewind_case(ctx, is_rp[r], _rwdp_index(A, sh, ev, r), [r], arrive_at_target,
                                  rwd_ptr=r))
    return cases


# -- dispatcher


def _statement_cases(ctx: Ctx, s: L.Statement) -> list[Case]:
    A, sh, src, a = ctx.A, ctx.shape, ctx.src, ctx.a
    op = s.op
    here = A.const(SELF)
    true = A.const(True)
    if isinstance(op, (L.Skip, L.Goto)):
        return [Case(true, here, {"pc": A.const(_next_pc(s))})]
    nxt = A.const(s.succ[0]) if s.succ else None
    if isinstance(op, L.AssignNil):
        return [Case(true, here, {("isnil", op.target): A.const(True), "pc": nxt})]
    if isinstance(op, L.AssignData):
        if not L.is_pure_data(op.exp):
            raise UnsupportedStatement(f"statement {s.label} reads the heap inside an expression; desugar first")
        return [Case(true, here, {("d", op.target): _eval(A, op.exp, _env(ctx), None), "pc": nxt})]
    if isinstance(op, L.AssignPtr):
        final = {"event": A.event(PtrHere(op.target)), ("isnil", op.target): A.const(False), "pc": nxt}
        on_nil = {("isnil", op.target): A.const(True), "pc": nxt}
        return _lookup(ctx, op.source, final, on_nil)
    if isinstance(op, (L.AssignToField, L.AssignToFieldNil)):
        if isinstance(op, L.AssignToField):
            event = A.ite(src.isnil(a, op.source), A.event(FieldAssignNil(op.field)),
                          A.event(FieldAssignPtr(op.field, op.source)))
        else:
            event = A.event(FieldAssignNil(op.field))
        return _lookup(ctx, op.target, {"event": event, "pc": nxt}, None)
    if isinstance(op, L.WriteData):
        if not L.is_pure_data(op.exp):
            raise UnsupportedStatement(f"statement {s.label} reads the heap inside an expression; desugar first")
        return _lookup(ctx, op.target, {"val": _eval(A, op.exp, _env(ctx), None), "pc": nxt}, None)
    if isinstance(op, L.ReadData):
        return _lookup(ctx, op.source, {("d", op.target): ctx.dst.val(ctx.b - 1), "pc": nxt}, None)
    if isinstance(op, L.Free):
        final = {"active": A.const(False), "pc": nxt}
        for q in sh.ptrs:
            gone = A.and_(points_here(A, ctx.dst, ctx.b - 1, q), A.not_(ctx.E[q]))
            final[("isnil", q)] = A.or_(src.isnil(a, q), gone)
        final[("isnil", op.target)] = A.const(True)
        return _lookup(ctx, op.target, final, None)
    if isinstance(op, L.New):
        cases = []
        spare = range(sh.k + 1, sh.arity + 1)
        for jj in spare:
            free_slot = A.and_(A.not_(src.ac(a, jj)), *[src.ac(a, x) for x in range(sh.k + 1, jj)])
            cases.append(Case(free_slot, A.const(jj), {
                "event": A.event(PtrHere(op.target)), "active": A.const(True), "val": A.const(0),
                ("isnil", op.target): A.const(False), "pc": nxt}))
        cases.append(Case(A.and_(*[src.ac(a, x) for x in spare]), here, {"event": A.event(OOM)}))
        return cases
    if isinstance(op, L.AssignFromField):
        return _from_field_cases(ctx, s, op)
    if isinstance(op, (L.Branch, L.AssignCond)):
        cond = op.cond
        if isinstance(op, L.Branch):
            def result(v):
                return _result_branch(ctx, s, v)
        else:
            def result(v, target=op.target):
                return {("d", target): v, "pc": nxt}
        cmp = L.is_compare_cond(cond)
        if cmp is not None:
            p, q, neg = cmp
            if neg:
                return _compare_cases(ctx, p, q, lambda v: result(A.not_(v)))
            return _compare_cases(ctx, p, q, result)
        if L.is_pure_data(cond):
            return [Case(true, here, result(_eval(A, cond, _env(ctx), None)))]
        ok, _ = L.local_condition_pointer(cond)
        if not ok:
            raise UnsupportedStatement(f"condition at {s.label} needs desugaring")
        return _local_cond_cases(ctx, s, cond, result)
    raise UnsupportedStatement(f"statement {s.label}: {op!r}")


# --------------------------------------------------------------------------
# Concrete entry points


def build_frame(shape: Shape, out: Outcome, index: int) -> Frame:
    f = out.fields
    return Frame(
        avail=False,
        active=bool(f["active"]),
        val=f["val"],
        pc=f["pc"],
        d=tuple(f[("d", name)] for name, _ in shape.data),
        upd=tuple(bool(f[("upd", p)]) for p in shape.ptrs),
        isnil=tuple(bool(f[("isnil", p)]) for p in shape.ptrs),
        event=f["event"],
        ac=tuple(bool(f[("ac", j)]) for j in range(1, shape.arity + 1)),
        next=(SELF, index),
        prev=(f["prev_dir"], f["prev_idx"]),
    )


def frame_matches(A: Algebra, shape: Shape, out: Outcome, fv: LogView, b: int):
    """The frame ``b`` of ``fv`` is unavailable and equals the outcome (except ``next``)."""
    conds = [A.not_(fv.avail(b))]
    getters = {
        "active": lambda: fv.active(b), "val": lambda: fv.val(b), "pc": lambda: fv.pc(b),
        "event": lambda: fv.ev(b), "prev_dir": lambda: fv.prev_dir(b), "prev_idx": lambda: fv.prev_idx(b),
    }
    for key in frame_keys(shape):
        if isinstance(key, tuple):
            kind, name = key
            actual = {"d": fv.d, "isnil": fv.isnil, "upd": fv.upd, "ac": fv.ac}[kind](b, name)
        else:
            actual = getters[key]()
        conds.append(A.eq(actual, out.fields[key]))
    return A.and_(*conds)


def psi(A: Algebra, shape: Shape, src: LogView, a: int, dst: LogView, b: int, move: str, j: int,
        fv: LogView):
    """Frame ``b`` of ``fv`` is the lace successor of frame ``a`` of ``src``.

    The caller guarantees the prefix shapes (``a`` is the top of ``src`` and
    ``b - 1`` the top of ``dst``).  This covers the link itself, the rule's
    firing condition and every field of the new frame except its ``next``.
    """
    out = lace_step(A, shape, src, a, dst, b, move, j)
    move_dir = SELF if move == "self" else j if move == "down" else UP
    link = A.and_(A.eq(src.next_dir(a), A.const(move_dir)), A.eq(src.next_idx(a), A.const(b)))
    return A.and_(link, out.fires, frame_matches(A, shape, out, fv, b))
