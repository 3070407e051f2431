"""Knitted trees: one program execution folded onto its input tree.

Every backbone node carries a log of ``n + 1`` frames.  The unavailable
frames with index above 1 form the lace, a doubly linked chronological list
whose consecutive frames sit on the same node or on neighbouring nodes.

Two independent routes produce frames here:

* :func:`build_kt` simulates the program with global knowledge of the lace
  (searching backwards for the last ``p:=here`` event, walking tree paths);
* :func:`step_internal`, :func:`step_down` and :func:`step_up` apply the
  local rules of :mod:`knitwit.steprules`, which only see two log prefixes.

The replay property ties them together: every lace link of a built tree is
reproduced by the local rules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping

from . import lang as L
from .frames import (ERR, NOP, OOM, SELF, UP, Err, Event, FieldAssignNil, FieldAssignPtr,
                     Frame, Log, Oom, PtrHere, Rwd, RwdP, Shape, dir_name, frame_status,
                     log_top, parse_dir, parse_event, sentinel, zero_frame)
from .interp import NIL, ArityViolation, Configuration, DataTree, Execution, Heap, Path, \
    format_path, parse_path
from .steprules import CONCRETE, LogView, NoStepApplicable, build_frame, lace_step, psi

__all__ = [
    "FrameId", "KnittedTree", "FuelExhausted", "NotFound", "MalformedLace", "InconsistentChild",
    "NotOnLace", "NoStepApplicable", "backbone", "kt_init", "build_kt", "find_ptr", "exit_status",
    "exec_decode", "heap_of", "ptrvals_of", "step_internal", "step_down", "step_up",
    "consistent_child", "consistent_first_frames", "splice", "truncate", "well_formed",
    "recompute_upd", "first_frame_ok", "start_ok",
]


class FuelExhausted(RuntimeError):
    pass


class NotFound(LookupError):
    pass


class MalformedLace(ValueError):
    pass


class InconsistentChild(ValueError):
    pass


class NotOnLace(ValueError):
    pass


@dataclass(frozen=True, order=True)
class FrameId:
    node: Path
    index: int

    def __str__(self):
        return f"({format_path(self.node) or 'ε'},{self.index})"


# --------------------------------------------------------------------------
# Backbone and the knitted tree value


def backbone(t: DataTree, k: int, m: int) -> list[Path]:
    """Input nodes plus all their children up to arity ``k + m``, in BFS order."""
    if any(j > k for q in t.nodes for j in q):
        raise ArityViolation(f"input tree uses child indices above k={k}")
    inner = list(t.nodes) or [()]
    nodes = set(inner)
    for q in inner:
        nodes.update(q + (j,) for j in range(1, k + m + 1))
    return sorted(nodes, key=lambda q: (len(q), q))


@dataclass(frozen=True)
class KnittedTree:
    shape: Shape
    logs: Mapping[Path, Log]

    @property
    def n(self) -> int:
        return self.shape.n

    @property
    def nodes(self) -> list[Path]:
        return sorted(self.logs, key=lambda q: (len(q), q))

    def log(self, node: Path) -> Log:
        return self.logs[node]

    def frame(self, fid: FrameId) -> Frame:
        return self.logs[fid.node][fid.index - 1]

    def lace(self) -> list[FrameId]:
        """Frames in lace order; raises :class:`MalformedLace` on a broken chain."""
        return _walk_lace(self)

    def positions(self) -> dict[FrameId, int]:
        """Lace position of each lace frame, counting from 1."""
        return {fid: i + 1 for i, fid in enumerate(self.lace())}

    def end(self) -> FrameId:
        return self.lace()[-1]

    def input_tree(self) -> DataTree:
        nodes = {q: log[0].val for q, log in self.logs.items() if log[0].active}
        if not nodes:
            return DataTree(self.shape.k)
        return DataTree(self.shape.k, nodes)

    def data_seed(self) -> dict:
        root = self.logs[()][1]
        return {name: root.d[i] for i, (name, _) in enumerate(self.shape.data)}

    def __eq__(self, other):
        return (isinstance(other, KnittedTree) and self.shape == other.shape
                and dict(self.logs) == dict(other.logs))

    def __hash__(self):
        return hash((self.shape.m, self.shape.n, tuple(sorted(self.logs.items()))))

    # -- export

    def to_json(self) -> dict:
        positions = self.positions()
        sh = self.shape
        out = {"k": sh.k, "m": sh.m, "n": sh.n, "program": L.program_hash(sh.program),
               "status": exit_status(self), "nodes": []}
        for q in self.nodes:
            frames = []
            for i, f in enumerate(self.logs[q], start=1):
                frames.append(_frame_json(sh, f, positions.get(FrameId(q, i))))
            out["nodes"].append({"path": format_path(q), "frames": frames})
        return out

    @classmethod
    def from_json(cls, program: L.Program, obj: Mapping | str) -> "KnittedTree":
        if isinstance(obj, str):
            obj = json.loads(obj)
        sh = Shape(program, int(obj["m"]), int(obj["n"]))
        logs = {parse_path(node["path"]): tuple(_frame_from_json(sh, f) for f in node["frames"])
                for node in obj["nodes"]}
        return cls(sh, logs)

    def to_dot(self) -> str:
        """Backbone in black, lace in red with its positions."""
        sh = self.shape
        name = {q: f"n{i}" for i, q in enumerate(self.nodes)}
        lines = ["digraph knitted {", "  node [shape=plaintext, fontname=monospace];"]
        positions = self.positions()
        for q in self.nodes:
            cells = []
            for i, f in enumerate(self.logs[q], start=1):
                if f.avail:
                    break
                pos = positions.get(FrameId(q, i))
                head = f"<font color=\"red\">{pos}</font>" if pos else "&nbsp;"
                body = f"val:{f.val}" if i == 1 else f"pc:{f.pc}<br/>{_esc(str(f.event))}"
                upd = [p for p, u in zip(sh.ptrs, f.upd) if u]
                if upd:
                    body += "<br/>upd:" + ",".join(upd)
                cells.append(f"<td port=\"f{i}\">{head}<br/>{body}</td>")
            label = format_path(q) or "root"
            lines.append(f"  {name[q]} [label=<<table border=\"0\" cellborder=\"1\" cellspacing=\"0\">"
                         f"<tr><td>{label}</td>{''.join(cells)}</tr></table>>];")
        for q in self.nodes:
            if q:
                lines.append(f"  {name[q[:-1]]} -> {name[q]} [arrowhead=none, label=\"{q[-1]}\"];")
        lace = self.lace()
        for x, y in zip(lace, lace[1:]):
            lines.append(f"  {name[x.node]}:f{x.index} -> {name[y.node]}:f{y.index} "
                         f"[color=red, constraint=false, label=\"{positions[y]}\", fontcolor=red];")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _frame_json(sh: Shape, f: Frame, pos: int | None) -> dict:
    return {
        "avail": f.avail,
        "active": f.active,
        "val": f.val,
        "pc": f.pc,
        "d": {name: v for (name, _), v in zip(sh.data, f.d)},
        "upd": {p: u for p, u in zip(sh.ptrs, f.upd)},
        "isnil": {p: u for p, u in zip(sh.ptrs, f.isnil)},
        "event": str(f.event),
        "active_child": list(f.ac),
        "next": [dir_name(f.next[0]), f.next[1]],
        "prev": [dir_name(f.prev[0]), f.prev[1]],
        "lace_pos": pos,
    }


def _frame_from_json(sh: Shape, obj: Mapping) -> Frame:
    return Frame(
        avail=bool(obj["avail"]), active=bool(obj["active"]), val=int(obj["val"]), pc=int(obj["pc"]),
        d=tuple(obj["d"][name] for name, _ in sh.data),
        upd=tuple(bool(obj["upd"][p]) for p in sh.ptrs),
        isnil=tuple(bool(obj["isnil"][p]) for p in sh.ptrs),
        event=parse_event(obj["event"]),
        ac=tuple(bool(x) for x in obj["active_child"]),
        next=(parse_dir(obj["next"][0]), int(obj["next"][1])),
        prev=(parse_dir(obj["prev"][0]), int(obj["prev"][1])),
    )


def _step_target(node: Path, d: int) -> Path | None:
    if d == SELF:
        return node
    if d == UP:
        return node[:-1] if node else None
    return node + (d,)


def _walk_lace(kt: KnittedTree) -> list[FrameId]:
    root = kt.logs.get(())
    if root is None or root[1].avail:
        raise MalformedLace("the root has no second frame")
    if root[1].prev != (SELF, 2):
        raise MalformedLace("the root's second frame does not start the lace")
    out = [FrameId((), 2)]
    seen = {out[0]}
    while True:
        cur = out[-1]
        f = kt.frame(cur)
        d, idx = f.next
        if (d, idx) == sentinel(cur.index):
            break
        node = _step_target(cur.node, d)
        if node is None or node not in kt.logs or not 2 <= idx <= kt.n + 1:
            break
        g = kt.logs[node][idx - 1]
        back = SELF if d == SELF else UP if d != UP else cur.node[-1]
        if g.avail or g.prev != (back, cur.index):
            break
        nxt = FrameId(node, idx)
        if nxt in seen:
            raise MalformedLace(f"the lace revisits {nxt}")
        seen.add(nxt)
        out.append(nxt)
    return out


# --------------------------------------------------------------------------
# Base case


def _first_frame(shape: Shape, t: DataTree, q: Path) -> Frame:
    z = zero_frame(shape, avail=False)
    k = shape.k
    if q in t.nodes:
        ac = tuple((q + (j,)) in t.nodes if j <= k else False for j in range(1, shape.arity + 1))
        return z.with_(active=True, val=t.nodes[q], ac=ac)
    if q == ():
        return z  # empty input: the root keeps every allocation slot
    # Auxiliary leaf: its spare slots are marked taken so nothing is allocated below it.
    return z.with_(ac=tuple(j > k for j in range(1, shape.arity + 1)))


def kt_init(p: L.Program, t: DataTree, m: int, n: int,
            data_seed: Mapping[str, int | bool] | None = None) -> KnittedTree:
    """The knitted tree of the length-one execution (initial configuration only)."""
    shape = Shape(p, m, n)
    seed = dict(data_seed or {})
    empty = zero_frame(shape)
    logs = {}
    for q in backbone(t, shape.k, m):
        logs[q] = (_first_frame(shape, t, q),) + (empty,) * n
    root1 = logs[()][0]
    nonempty = bool(t.nodes)
    isnil = tuple(not (nonempty and v == p.root_pointer) for v in shape.ptrs)
    d = tuple(seed.get(name, False if sort == "bool" else 0) for name, sort in shape.data)
    root2 = Frame(False, root1.active, root1.val, p.entry, d, (False,) * len(shape.ptrs), isnil,
                  PtrHere(p.root_pointer) if nonempty else NOP, root1.ac, sentinel(2), (SELF, 2))
    logs[()] = (root1, root2) + (empty,) * (n - 1)
    return KnittedTree(shape, logs)


# --------------------------------------------------------------------------
# Global queries over a (possibly growing) lace


def tree_path(a: Path, b: Path) -> list[Path]:
    """Nodes on the backbone path from ``a`` (excluded) to ``b`` (included)."""
    c = 0
    while c < min(len(a), len(b)) and a[c] == b[c]:
        c += 1
    ups = [a[:i] for i in range(len(a) - 1, c - 1, -1)]
    downs = [b[:i] for i in range(c + 1, len(b) + 1)]
    return ups + downs


class _Lace:
    """Mutable logs plus lace bookkeeping; answers questions at a cut position."""

    def __init__(self, shape: Shape, logs: dict[Path, list[Frame]], lace: list[FrameId]):
        self.shape = shape
        self.logs = logs
        self.lace = lace
        self.pos = {fid: i + 1 for i, fid in enumerate(lace)}

    @classmethod
    def of(cls, kt: KnittedTree) -> "_Lace":
        lace = kt.lace()
        logs = {q: [f for f in log if not f.avail] for q, log in kt.logs.items()}
        return cls(kt.shape, logs, lace)

    def frame(self, fid: FrameId) -> Frame:
        return self.logs[fid.node][fid.index - 1]

    def at(self, pos: int) -> FrameId:
        return self.lace[pos - 1]

    def top(self, node: Path, upto: int) -> int:
        """Index of ``node``'s latest frame at or before lace position ``upto``."""
        log = self.logs[node]
        for i in range(len(log), 1, -1):
            if self.pos[FrameId(node, i)] <= upto:
                return i
        return 1

    def top_frame(self, node: Path, upto: int) -> Frame:
        return self.logs[node][self.top(node, upto) - 1]

    def last_here(self, p: str, upto: int) -> FrameId | None:
        ev = PtrHere(p)
        for pos in range(upto, 0, -1):
            fid = self.lace[pos - 1]
            if self.frame(fid).event == ev:
                return fid
        return None

    def ptr_node(self, p: str, upto: int) -> Path | None:
        f = self.frame(self.at(upto))
        if f.isnil[self.shape.ptr_index[p]]:
            return None
        here = self.last_here(p, upto)
        if here is None:
            raise NotFound(f"{p} is not nil but has no here event")
        return here.node

    def first_after(self, node: Path, pos: int) -> int:
        for i in range(2, len(self.logs[node]) + 1):
            if self.pos[FrameId(node, i)] > pos:
                return i
        raise NotFound(f"node {format_path(node)} has no frame after position {pos}")

    def route(self, src: Path, target: FrameId, stop: set[Path] | None = None) -> list[FrameId]:
        """The rewind route from ``src`` toward the node of ``target``.

        Intermediate nodes are paired with their first frame after ``target``;
        the last element is the node where the route stops (``target`` itself
        unless a node of ``stop`` comes first).
        """
        t = self.pos[target]
        out = []
        for w in tree_path(src, target.node):
            if stop and w in stop:
                return out + [FrameId(w, 0)]
            if w == target.node:
                return out + [target]
            out.append(FrameId(w, self.first_after(w, t)))
        return out

    def find_ptr(self, p: str, frm: FrameId) -> list[FrameId]:
        here = self.last_here(p, self.pos[frm])
        if here is None:
            raise NotFound(f"no here event for {p} before {frm}")
        if here.node == frm.node:
            return []
        return self.route(frm.node, here)

    def field_target(self, x: Path, pf: str, upto: int) -> Path | None:
        """The node ``x.pf`` refers to at lace position ``upto`` (None for nil)."""
        top = self.top(x, upto)
        log = self.logs[x]
        for i in range(top, 1, -1):
            f = log[i - 1]
            if not f.active:
                break
            if f.event == FieldAssignNil(pf):
                return None
            if isinstance(f.event, FieldAssignPtr) and f.event.field == pf:
                at = self.pos[FrameId(x, i)]
                y = self.last_here(f.event.ptr, at)
                if y is None:
                    raise NotFound(f"field event at {FrameId(x, i)} refers to an unset pointer")
                if y.node == x:
                    return x
                return y.node if self.alive_since(y.node, at, upto) else None
        if not log[0].active and top == 1:
            return None
        child = x + (self.shape.program.field_index(pf),)
        if child in self.logs and self.top_frame(child, upto).active:
            return child
        return None

    def alive_since(self, node: Path, after: int, upto: int) -> bool:
        for i in range(2, len(self.logs[node]) + 1):
            pos = self.pos[FrameId(node, i)]
            if after < pos <= upto and not self.logs[node][i - 1].active:
                return False
        return True


# --------------------------------------------------------------------------
# The builder


class _Stop(Exception):
    pass


class _Builder(_Lace):
    def __init__(self, kt: KnittedTree, fuel: int):
        logs = {q: [f for f in log if not f.avail] for q, log in kt.logs.items()}
        super().__init__(kt.shape, logs, [FrameId((), 2)])
        self.fuel = fuel
        self.pushes = 0

    @property
    def end(self) -> FrameId:
        return self.lace[-1]

    def push(self, node: Path, event: Event = NOP, *, d: Mapping | None = None,
             isnil: Mapping | None = None, **fields) -> FrameId:
        if self.pushes >= self.fuel:
            raise FuelExhausted(f"more than {self.fuel} frames needed")
        self.pushes += 1
        sh = self.shape
        end = self.end
        src = self.frame(end)
        u = end.node
        if node == u:
            fwd, back = SELF, SELF
        elif node[:-1] == u:
            fwd, back = node[-1], UP
        elif u[:-1] == node:
            fwd, back = UP, u[-1]
        else:
            raise MalformedLace(f"cannot step from {format_path(u)} to {format_path(node)}")
        log = self.logs[node]
        b = len(log) + 1
        self.logs[u][end.index - 1] = src.with_(next=(fwd, b))
        below = log[-1]
        ac = list(below.ac)
        if back not in (SELF, UP):
            ac[back - 1] = src.active
        dd = list(src.d)
        for name, v in (d or {}).items():
            dd[sh.data_index[name]] = v
        nil = list(src.isnil)
        for p, v in (isnil or {}).items():
            nil[sh.ptr_index[p]] = v
        f = Frame(False, fields.get("active", below.active), fields.get("val", below.val),
                  fields.get("pc", src.pc), tuple(dd), (False,) * len(sh.ptrs), tuple(nil), event,
                  tuple(ac), sentinel(b), (back, end.index))
        f = f.with_(upd=self._upd(node, b, f))
        log.append(f)
        fid = FrameId(node, b)
        self.lace.append(fid)
        self.pos[fid] = len(self.lace)
        if b == sh.n + 1:
            raise _Stop
        return fid

    def _upd(self, node: Path, b: int, f: Frame) -> tuple:
        if b <= 2:
            return (False,) * len(self.shape.ptrs)
        start = self.pos[FrameId(node, b - 1)]
        seen = {self.frame(fid).event for fid in self.lace[start:]}
        return tuple(not nil and PtrHere(p) in seen for p, nil in zip(self.shape.ptrs, f.isnil))

    # -- helpers

    def walk(self, route: list[FrameId], final_event: Event = NOP, last_event=None, **final) -> FrameId:
        """Push rewind frames along ``route`` and the statement's effect at its end."""
        for fid in route[:-1]:
            self.push(fid.node, Rwd(fid.index))
        target = route[-1].node if route else self.end.node
        if last_event is not None:
            return self.push(target, last_event)
        return self.push(target, final_event, **final)

    def isnil(self, p: str) -> bool:
        return self.frame(self.end).isnil[self.shape.ptr_index[p]]

    def here(self) -> int:
        return len(self.lace)

    # -- statements

    def run(self) -> None:
        try:
            while frame_status(self.shape, self.frame(self.end), self.end.index) == "N":
                self.execute(self.shape.program.stmts[self.frame(self.end).pc])
        except _Stop:
            pass

    def execute(self, s: L.Statement) -> None:
        op = s.op
        nxt = s.succ[0] if s.succ else None
        u = self.end.node
        if isinstance(op, (L.Skip, L.Goto)):
            self.push(u, pc=nxt)
        elif isinstance(op, L.AssignNil):
            self.push(u, isnil={op.target: True}, pc=nxt)
        elif isinstance(op, L.AssignData):
            env = self.env()
            self.push(u, d={op.target: L.evaluate(op.exp, env)}, pc=nxt)
        elif isinstance(op, L.AssignPtr):
            if self.isnil(op.source):
                self.push(u, isnil={op.target: True}, pc=nxt)
            else:
                self.walk(self.find_ptr(op.source, self.end), PtrHere(op.target),
                          isnil={op.target: False}, pc=nxt)
        elif isinstance(op, (L.AssignToField, L.AssignToFieldNil)):
            if self.isnil(op.target):
                return self.error()
            if isinstance(op, L.AssignToFieldNil) or self.isnil(op.source):
                ev = FieldAssignNil(op.field)
            else:
                ev = FieldAssignPtr(op.field, op.source)
            self.walk(self.find_ptr(op.target, self.end), ev, pc=nxt)
        elif isinstance(op, L.WriteData):
            if self.isnil(op.target):
                return self.error()
            self.walk(self.find_ptr(op.target, self.end), val=L.evaluate(op.exp, self.env()), pc=nxt)
        elif isinstance(op, L.ReadData):
            if self.isnil(op.source):
                return self.error()
            route = self.find_ptr(op.source, self.end)
            x = route[-1].node if route else u
            self.walk(route, d={op.target: self.top_frame(x, self.here()).val}, pc=nxt)
        elif isinstance(op, L.Free):
            if self.isnil(op.target):
                return self.error()
            route = self.find_ptr(op.target, self.end)
            x = route[-1].node if route else u
            nil = {q: True for q in self.shape.ptrs
                   if not self.isnil(q) and self.ptr_node(q, self.here()) == x}
            nil[op.target] = True
            self.walk(route, active=False, isnil=nil, pc=nxt)
        elif isinstance(op, L.New):
            for j in range(self.shape.k + 1, self.shape.arity + 1):
                child = u + (j,)
                if child in self.logs and not self.top_frame(child, self.here()).active:
                    self.push(child, PtrHere(op.target), active=True, val=0,
                              isnil={op.target: False}, pc=nxt)
                    return
            self.push(u, OOM)
        elif isinstance(op, L.AssignFromField):
            self.from_field(op, nxt)
        elif isinstance(op, (L.Branch, L.AssignCond)):
            self.condition(s)
        else:
            raise L.LangError(f"statement {s.label} cannot be encoded: {op!r}")

    def env(self) -> dict:
        f = self.frame(self.end)
        return {name: f.d[i] for i, (name, _) in enumerate(self.shape.data)}

    def error(self) -> None:
        self.push(self.end.node, ERR)

    def from_field(self, op: L.AssignFromField, nxt: int) -> None:
        p, q, pf = op.target, op.source, op.field
        if self.isnil(q):
            return self.error()
        route = self.find_ptr(q, self.end)
        if route:
            # Leave a marker on q's node, then resolve the field from there.
            self.walk(route, last_event=Rwd(route[-1].index))
        x = self.end.node
        upto = self.here()
        stored = self._stored_event(x, pf, upto)
        target = self.field_target(x, pf, upto)
        if stored is None or isinstance(self.frame(stored).event, FieldAssignNil) or target == x:
            if target is None:
                self.push(x, isnil={p: True}, pc=nxt)
            else:
                self.push(target, PtrHere(p), isnil={p: False}, pc=nxt)
            return
        r = self.frame(stored).event.ptr
        here_r = self.last_here(r, self.pos[stored])
        route2 = self.route(x, here_r)
        for fid in route2[:-1]:
            self.push(fid.node, RwdP(fid.index, r))
        if target is None:
            self.push(here_r.node, isnil={p: True}, pc=nxt)
        else:
            self.push(target, PtrHere(p), isnil={p: False}, pc=nxt)

    def _stored_event(self, x: Path, pf: str, upto: int) -> FrameId | None:
        """Latest assignment to ``x.pf`` in the node's current life (None: implicit)."""
        log = self.logs[x]
        for i in range(self.top(x, upto), 1, -1):
            f = log[i - 1]
            if not f.active:
                return None
            if isinstance(f.event, (FieldAssignPtr, FieldAssignNil)) and f.event.field == pf:
                return FrameId(x, i)
        return None

    def condition(self, s: L.Statement) -> None:
        op = s.op
        u = self.end.node

        def result(value) -> dict:
            if isinstance(op, L.Branch):
                return {"pc": s.succ[0] if value else s.succ[1]}
            return {"d": {op.target: bool(value)}, "pc": s.succ[0]}

        cmp = L.is_compare_cond(op.cond)
        if cmp is not None:
            p, q, neg = cmp
            if self.isnil(p) or self.isnil(q):
                eq = self.isnil(p) and self.isnil(q)
                self.push(u, **result(eq != neg))
                return
            upto = self.here()
            tp, tq = self.last_here(p, upto), self.last_here(q, upto)
            eq = tp.node == tq.node
            if u in (tp.node, tq.node):
                self.push(u, **result(eq != neg))
                return
            later = tp if self.pos[tp] >= self.pos[tq] else tq
            route = self.route(u, later, stop={tp.node, tq.node})
            for fid in route[:-1]:
                self.push(fid.node, Rwd(fid.index))
            self.push(route[-1].node, **result(eq != neg))
            return
        if L.is_pure_data(op.cond):
            self.push(u, **result(L.evaluate(op.cond, self.env())))
            return
        ok, ptr = L.local_condition_pointer(op.cond)
        if not ok:
            raise L.LangError(f"condition at {s.label} needs desugaring")
        read: list[str] = []
        upto = self.here()

        def atom(e):
            if isinstance(e, L.PtrEq):
                return self.isnil(e.left)
            if self.isnil(e.ptr):
                raise _NilRead
            read.append(e.ptr)
            return self.top_frame(self.ptr_node(e.ptr, upto), upto).val

        try:
            value = L.evaluate(op.cond, self.env(), atom)
        except _NilRead:
            return self.error()
        if not read:
            self.push(u, **result(value))
            return
        self.walk(self.find_ptr(ptr, self.end), **result(value))


class _NilRead(Exception):
    pass


def build_kt(p: L.Program, t: DataTree, m: int, n: int,
             data_seed: Mapping[str, int | bool] | None = None, fuel: int | None = None) -> KnittedTree:
    """The canonical knitted tree of the execution of ``p`` on ``t``.

    Building stops at an exit, an error, an out-of-memory event or when a
    frame lands on index ``n + 1``.  ``fuel`` bounds the number of pushed
    frames; the default is enough for any (m, n).
    """
    kt = kt_init(p, t, m, n, data_seed)
    if fuel is None:
        fuel = (n + 1) * len(kt.logs) + 1
    b = _Builder(kt, fuel)
    b.run()
    return _freeze(kt.shape, b.logs)


def _freeze(shape: Shape, logs: Mapping[Path, list[Frame]]) -> KnittedTree:
    empty = zero_frame(shape)
    return KnittedTree(shape, {q: tuple(log) + (empty,) * (shape.n + 1 - len(log))
                               for q, log in logs.items()})


def find_ptr(kt: KnittedTree, p: str, frm: FrameId | int) -> list[FrameId]:
    """Rewind route for ``p`` from a lace frame (or lace position).

    Empty when ``p`` points to the frame's own node; otherwise the first
    frame after ``p``'s last assignment on every node crossed, ending with
    the frame holding that assignment.
    """
    view = _Lace.of(kt)
    if isinstance(frm, int):
        frm = view.at(frm)
    if view.frame(frm).isnil[kt.shape.ptr_index[p]]:
        raise NotFound(f"{p} is nil at {frm}")
    return view.find_ptr(p, frm)


# --------------------------------------------------------------------------
# Status and decoding


def exit_status(kt: KnittedTree) -> str:
    end = kt.end()
    return frame_status(kt.shape, kt.frame(end), end.index)


def _completing(f: Frame) -> bool:
    return not isinstance(f.event, (Rwd, RwdP, Err, Oom))


class _Ids:
    """Heap ids: input nodes in BFS order, then one fresh id per allocation."""

    def __init__(self, view: _Lace):
        self.view = view
        sh = view.shape
        inputs = sorted((q for q, log in view.logs.items() if log[0].active),
                        key=lambda q: (len(q), q))
        self.input_ids = {q: i + 1 for i, q in enumerate(inputs)}
        self.allocs: list[tuple[int, Path]] = []  # (lace position, node)
        for pos in range(2, len(view.lace) + 1):
            fid = view.at(pos)
            f = view.frame(fid)
            prev = view.frame(view.at(pos - 1))
            stmt = sh.program.stmts.get(prev.pc)
            if isinstance(f.event, PtrHere) and stmt is not None and isinstance(stmt.op, L.New):
                self.allocs.append((pos, fid.node))

    def id_of(self, node: Path, upto: int) -> int:
        out = self.input_ids.get(node, NIL)
        for i, (pos, q) in enumerate(self.allocs):
            if pos <= upto and q == node:
                out = len(self.input_ids) + 1 + i
        return out

    def next_id(self, upto: int) -> int:
        return len(self.input_ids) + 1 + sum(1 for pos, _ in self.allocs if pos <= upto)


def _heap(view: _Lace, ids: _Ids, upto: int) -> Heap:
    sh = view.shape
    live = [q for q in view.logs if view.top_frame(q, upto).active]
    data = {ids.id_of(q, upto): view.top_frame(q, upto).val for q in live}
    fields = {}
    for pf in sh.fields:
        fields[pf] = {}
        for q in live:
            y = view.field_target(q, pf, upto)
            fields[pf][ids.id_of(q, upto)] = NIL if y is None else ids.id_of(y, upto)
    return Heap(frozenset(data), data, fields, ids.next_id(upto))


def _ptrvals(view: _Lace, ids: _Ids, upto: int) -> dict:
    out = {}
    for p in view.shape.ptrs:
        node = view.ptr_node(p, upto)
        out[p] = NIL if node is None else ids.id_of(node, upto)
    return out


def _cut(kt: KnittedTree, pos: int | None) -> tuple[_Lace, _Ids, int]:
    view = _Lace.of(kt)
    ids = _Ids(view)
    return view, ids, len(view.lace) if pos is None else pos


def heap_of(kt: KnittedTree, pos: int | None = None) -> Heap:
    """Heap at lace position ``pos`` (default: the end of the lace)."""
    view, ids, upto = _cut(kt, pos)
    return _heap(view, ids, upto)


def ptrvals_of(kt: KnittedTree, pos: int | None = None) -> dict:
    """Pointer variable values (heap ids, ``NIL`` = 0) at lace position ``pos``."""
    view, ids, upto = _cut(kt, pos)
    return _ptrvals(view, ids, upto)


def exec_decode(kt: KnittedTree) -> Execution:
    """Read the execution back off the lace, one configuration per completed statement."""
    view = _Lace.of(kt)
    ids = _Ids(view)
    sh = kt.shape
    configs = []
    for pos in range(1, len(view.lace) + 1):
        f = view.frame(view.at(pos))
        if pos > 1 and not _completing(f):
            continue
        nu_d = {name: f.d[i] for i, (name, _) in enumerate(sh.data)}
        configs.append(Configuration(_heap(view, ids, pos), _ptrvals(view, ids, pos), nu_d, f.pc))
    status = exit_status(kt)
    if status == "C":
        return Execution(tuple(configs), "Final")
    if status == "E":
        stmt = sh.program.stmts[kt.frame(kt.end()).pc]
        return Execution(tuple(configs), "Error", "NilFree" if isinstance(stmt.op, L.Free) else "NilDereference")
    return Execution(tuple(configs), "OutOfFuel")


# --------------------------------------------------------------------------
# Local steps (the concrete reading of the shared rules)


def _prefix_top(log: Log) -> int:
    top = log_top(log)
    if any(not f.avail for f in log[top:]):
        raise NoStepApplicable("log is not a stack")
    return top


def _step(shape: Shape, src: Log, dst: Log, move: str, j: int) -> Frame:
    a = _prefix_top(src)
    b = _prefix_top(dst) + 1 if dst is not src else a + 1
    if a < 2 or b > shape.n + 1:
        raise NoStepApplicable("no room for another frame")
    sv = LogView(shape, src)
    dv = sv if dst is src else LogView(shape, dst)
    out = lace_step(CONCRETE, shape, sv, a, dv, b, move, j)
    if not out.fires:
        raise NoStepApplicable(f"no {move} step fires from frame {a}")
    return build_frame(shape, out, b)


def step_internal(shape: Shape, log: Log) -> Frame:
    """Next frame on the same node; its ``next`` is the sentinel."""
    return _step(shape, log, log, "self", 0)


def step_down(shape: Shape, parent: Log, j: int, child: Log) -> Frame:
    """Next frame on child ``j`` when the lace leaves the parent's top frame."""
    return _step(shape, parent, child, "down", j)


def step_up(shape: Shape, child: Log, j: int, parent: Log) -> Frame:
    """Next frame on the parent when the lace leaves child ``j``'s top frame."""
    return _step(shape, child, parent, "up", j)


def upto(shape: Shape, log: Log, i: int) -> Log:
    """Frames ``1..i`` of ``log``; the rest made available."""
    empty = zero_frame(shape)
    return tuple(log[:i]) + (empty,) * (len(log) - i)


# --------------------------------------------------------------------------
# Parent/child consistency


def consistent_first_frames(shape: Shape, tau: Log, j: int, sigma: Log) -> bool:
    s1, t1 = sigma[0], tau[0]
    initial = not sigma[1].avail and sigma[1].prev == (SELF, 2)
    return ((initial or s1.active) and (not t1.active or s1.active)
            and (j <= shape.k or not t1.active) and s1.ac[j - 1] == t1.active)


def consistent_child(shape: Shape, tau: Log, j: int, sigma: Log) -> bool:
    """Child log ``tau`` (position ``j``) agrees with parent log ``sigma``.

    Every frame pair adjacent in the lace across the edge is re-derived
    by the local rules, triggered from either side of the link.
    """
    if not consistent_first_frames(shape, tau, j, sigma):
        return False
    n = shape.n
    A = CONCRETE
    tv = LogView(shape, tau)
    sv = LogView(shape, sigma)
    for a in range(2, n + 1):
        for b in range(2, n + 2):
            sa, tb = sigma[a - 1], tau[b - 1]
            if (not sa.avail and sa.next == (j, b) and not tb.avail) or \
                    (not tb.avail and tb.prev == (UP, a)):
                if not psi(A, shape, LogView(shape, upto(shape, sigma, a)), a,
                           LogView(shape, upto(shape, tau, b - 1)), b, "down", j, tv):
                    return False
            ta, sb = tau[a - 1], sigma[b - 1]
            if (not ta.avail and ta.next == (UP, b) and not sb.avail) or \
                    (not sb.avail and sb.prev == (j, a)):
                if not psi(A, shape, LogView(shape, upto(shape, tau, a)), a,
                           LogView(shape, upto(shape, sigma, b - 1)), b, "up", j, sv):
                    return False
    return True


# --------------------------------------------------------------------------
# Well-formedness


def first_frame_ok(shape: Shape, f: Frame) -> bool:
    spare = f.ac[shape.k:]
    if f.active:
        return not any(spare)
    return all(spare) and not any(f.ac[:shape.k])


def start_ok(shape: Shape, log: Log) -> bool:
    f1, f2 = log[0], log[1]
    p = shape.program
    if f2.avail or f2.prev != (SELF, 2) or f2.pc != p.entry:
        return False
    if f2.active != f1.active or f2.val != f1.val or f2.ac != f1.ac or any(f2.upd):
        return False
    root = shape.ptr_index[p.root_pointer]
    if not all(nil for i, nil in enumerate(f2.isnil) if i != root):
        return False
    if f1.active:
        return f2.event == PtrHere(p.root_pointer) and not f2.isnil[root] and not any(f2.ac[shape.k:])
    return f2.event == NOP and f2.isnil[root] and not any(f2.ac)


def well_formed(kt: KnittedTree, canonical: bool = True) -> list[str]:
    """Problems found in ``kt`` (empty when it is a knitted-tree prefix).

    Checks the backbone, the start of the lace, stack-shaped logs, a single
    unbroken lace covering every unavailable frame, terminal frames only at
    the end, parent/child consistency and the replay of every lace link.
    """
    sh = kt.shape
    problems = []
    try:
        expected = set(backbone(kt.input_tree(), sh.k, sh.m))
    except ArityViolation as e:
        return [str(e)]
    if set(kt.logs) != expected:
        problems.append("backbone does not match the input tree")
    for q, log in kt.logs.items():
        if len(log) != sh.n + 1:
            problems.append(f"log of {format_path(q)} has {len(log)} frames")
            continue
        top = log_top(log)
        if any(not f.avail for f in log[top:]) or top == 0:
            problems.append(f"log of {format_path(q)} is not a stack")
        if q and not first_frame_ok(sh, log[0]):
            problems.append(f"first frame of {format_path(q)} is not a backbone frame")
    if problems:
        return problems
    if not start_ok(sh, kt.logs[()]):
        problems.append("the root does not start the lace")
    try:
        lace = kt.lace()
    except MalformedLace as e:
        return problems + [str(e)]
    on_lace = set(lace)
    for q, log in kt.logs.items():
        for i in range(2, sh.n + 2):
            if not log[i - 1].avail and FrameId(q, i) not in on_lace:
                problems.append(f"frame {FrameId(q, i)} is off the lace")
    for fid in lace[:-1]:
        if frame_status(sh, kt.frame(fid), fid.index) != "N":
            problems.append(f"terminal frame {fid} is not at the end of the lace")
    if canonical and kt.frame(lace[-1]).next != sentinel(lace[-1].index):
        problems.append("the last lace frame has a non-canonical next")
    for q in kt.logs:
        if q and not consistent_child(sh, kt.logs[q], q[-1], kt.logs[q[:-1]]):
            problems.append(f"log of {format_path(q)} is inconsistent with its parent")
    for x, y in zip(lace, lace[1:]):
        try:
            got = _replay(kt, x, y)
        except NoStepApplicable as e:
            problems.append(f"link {x} -> {y}: {e}")
            continue
        if not got.same_modulo_next(kt.frame(y)):
            problems.append(f"link {x} -> {y} does not follow the local rules")
    return problems


def _replay(kt: KnittedTree, x: FrameId, y: FrameId) -> Frame:
    sh = kt.shape
    src = upto(sh, kt.log(x.node), x.index)
    if x.node == y.node:
        return step_internal(sh, src)
    dst = upto(sh, kt.log(y.node), y.index - 1)
    if y.node[:-1] == x.node:
        return step_down(sh, src, y.node[-1], dst)
    return step_up(sh, src, x.node[-1], dst)


def replay_link(kt: KnittedTree, x: FrameId, y: FrameId) -> Frame:
    """The frame the local rules put after ``x`` when moving to ``y``'s node."""
    return _replay(kt, x, y)


def recompute_upd(kt: KnittedTree) -> dict[FrameId, tuple]:
    """``upd`` flags re-derived from the lace for every lace frame."""
    view = _Lace.of(kt)
    out = {}
    for fid in view.lace:
        f = view.frame(fid)
        if fid.index <= 2:
            out[fid] = (False,) * len(kt.shape.ptrs)
            continue
        lo = view.pos[FrameId(fid.node, fid.index - 1)]
        hi = view.pos[fid]
        seen = {view.frame(view.at(p)).event for p in range(lo + 1, hi)}
        out[fid] = tuple(not nil and PtrHere(p) in seen for p, nil in zip(kt.shape.ptrs, f.isnil))
    return out


# --------------------------------------------------------------------------
# Truncation and splicing


def truncate(kt: KnittedTree, frame: FrameId | int, keep_next: bool = False) -> KnittedTree:
    """The prefix whose lace ends at ``frame`` (a FrameId or a lace position).

    The last frame's ``next`` becomes the sentinel unless ``keep_next``, in
    which case it still names its successor in ``kt``.
    """
    lace = kt.lace()
    if isinstance(frame, int):
        if not 1 <= frame <= len(lace):
            raise NotOnLace(f"lace position {frame} out of range")
        frame = lace[frame - 1]
    if frame not in lace:
        raise NotOnLace(f"{frame} is not on the lace")
    cut = lace.index(frame)
    drop = set(lace[cut + 1:])
    empty = zero_frame(kt.shape)
    logs = {}
    for q, log in kt.logs.items():
        new = []
        for i, f in enumerate(log, start=1):
            fid = FrameId(q, i)
            if fid in drop:
                f = empty
            elif fid == frame and not keep_next:
                f = f.with_(next=sentinel(i))
            new.append(f)
        logs[q] = tuple(new)
    return KnittedTree(kt.shape, logs)


def splice(k1: KnittedTree, t1: Path, j: int, k2: KnittedTree, t2: Path) -> KnittedTree:
    """Replace the ``j``-th subtree of ``t1`` in ``k1`` by the subtree of ``k2`` at ``t2``."""
    if k1.shape != k2.shape:
        raise InconsistentChild("the two trees have different parameters")
    if t1 not in k1.logs or t2 not in k2.logs:
        raise InconsistentChild("splice nodes are not in the backbones")
    if not consistent_child(k1.shape, k2.logs[t2], j, k1.logs[t1]):
        raise InconsistentChild(f"log of {format_path(t2)} is not a consistent child {j} "
                                f"of {format_path(t1)}")
    at = t1 + (j,)
    logs = {q: log for q, log in k1.logs.items() if q[:len(at)] != at}
    for q, log in k2.logs.items():
        if q[:len(t2)] == t2:
            logs[at + q[len(t2):]] = log
    return KnittedTree(k1.shape, logs)


def node_ids(kt: KnittedTree) -> dict[Path, int]:
    """BFS ids of the input nodes (the numbering used by heaps)."""
    return dict(_Ids(_Lace.of(kt)).input_ids)


def positions_of(kt: KnittedTree, fids: Iterable[FrameId]) -> list[int]:
    pos = kt.positions()
    return [pos[f] for f in fids]
