"""Exit-status queries, the MemSafe loop, and the brute-force label enumerator."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from . import lang as L
from .chcgen import (ChcClause, ChcSystem, STATUSES, UnsupportedStatement, _check_program,
                     add_exit_query, compile_system, emit_smtlib, eval_clause)
from .frames import SELF, UP, Log, log_top
from .interp import DataTree, Path
from .ktree import build_kt, truncate, upto
from .solver import EngineConfig, SolverAnswer, solve

__all__ = ["ExitQueryVerdict", "MemSafeVerdict", "BudgetExceeded", "prepare", "exit_status_query",
           "memsafe", "enumerate_prefixes", "all_trees", "derivations", "is_derivable",
           "VERDICT_SCHEMA"]

VERDICT_SCHEMA = 1


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class ExitQueryVerdict:
    answer: str  # Positive | Negative | Unknown
    evidence: SolverAnswer
    params: tuple[int, int]
    ex: frozenset[str]

    def to_json(self) -> dict:
        m, n = self.params
        return {"ex": "".join(s for s in STATUSES if s in self.ex), "m": m, "n": n,
                "status": self.answer, "solver": self.evidence.status,
                "time_s": round(self.evidence.wall_time, 3)}


@dataclass(frozen=True)
class MemSafeVerdict:
    result: str  # Safe | Unsafe | Exhausted | Unknown
    final_params: tuple[int, int]
    trace: tuple[ExitQueryVerdict, ...] = ()

    def to_json(self) -> dict:
        m, n = self.final_params
        return {"schema": VERDICT_SCHEMA, "result": self.result, "m": m, "n": n,
                "queries": [q.to_json() for q in self.trace]}


def prepare(p: L.Program) -> L.Program:
    """The program the clause generator receives.

    Statements the local rules encode directly are kept as written (this
    keeps one frame per statement); anything else goes through desugaring.
    """
    try:
        _check_program(p)
        return p
    except UnsupportedStatement:
        return L.desugar(p)


def _answer(a: SolverAnswer) -> str:
    return {"Unsat": "Positive", "Sat": "Negative"}.get(a.status, "Unknown")


def exit_status_query(p: L.Program, m: int, n: int, ex: Iterable[str],
                      engine: EngineConfig | str | None = None, timeout: float | None = None,
                      datatypes: bool = False) -> ExitQueryVerdict:
    """Does some (m, n)-knitted tree of ``p`` end with a status in ``ex``?

    Positive exactly when the solver finds the clause system unsatisfiable.
    """
    ex = frozenset(ex)
    if not ex:
        raise ValueError("the exit-status set must be nonempty")
    system = add_exit_query(compile_system(prepare(p), m, n), ex)
    answer = solve(emit_smtlib(system, datatypes=datatypes), timeout=timeout, engine=engine)
    return ExitQueryVerdict(_answer(answer), answer, (m, n), ex)


def memsafe(p: L.Program, m0: int = 0, n0: int = 2, max_m: int = 3, max_n: int = 12,
            budget: float | None = None, engine: EngineConfig | str | None = None,
            timeout: float | None = None) -> MemSafeVerdict:
    """Grow (m, n) until the exit-status queries settle memory safety.

    Per round: a positive {E} query means Unsafe; a positive {M} query bumps
    m; a positive {O} query bumps n; three negatives mean Safe.  Going past
    ``max_m``/``max_n`` or the wall-clock ``budget`` gives Exhausted, and an
    undecided solver answer stops the loop with Unknown.
    """
    if m0 < 0 or n0 < 2:
        raise ValueError("need m0 >= 0 and n0 >= 2")
    deadline = None if budget is None else time.monotonic() + budget
    m, n = m0, n0
    trace: list[ExitQueryVerdict] = []
    while m <= max_m and n <= max_n:
        bump = None
        for status in ("E", "M", "O"):
            limit = timeout
            clipped = False
            if deadline is not None:
                left = deadline - time.monotonic()
                if left <= 0:
                    return MemSafeVerdict("Exhausted", (m, n), tuple(trace))
                if limit is None or left < limit:
                    limit, clipped = left, True
            v = exit_status_query(p, m, n, {status}, engine=engine, timeout=limit)
            trace.append(v)
            if v.answer == "Unknown":
                out_of_time = clipped and v.evidence.status == "Timeout"
                return MemSafeVerdict("Exhausted" if out_of_time else "Unknown", (m, n), tuple(trace))
            if v.answer == "Positive":
                bump = status
                break
        if bump is None:
            return MemSafeVerdict("Safe", (m, n), tuple(trace))
        if bump == "E":
            return MemSafeVerdict("Unsafe", (m, n), tuple(trace))
        if bump == "M":
            m += 1
        else:
            n += 1
    return MemSafeVerdict("Exhausted", (min(m, max_m), min(n, max_n)), tuple(trace))


# --------------------------------------------------------------------------
# Brute-force enumeration of labels


def _shapes(k: int, size: int) -> Iterator[frozenset[Path]]:
    """Prefix-closed node sets over child indices 1..k with exactly ``size`` nodes."""
    if size == 0:
        yield frozenset()
        return
    seen = set()

    def grow(nodes: frozenset[Path]):
        if len(nodes) == size:
            if nodes not in seen:
                seen.add(nodes)
                yield nodes
            return
        frontier = sorted({q + (j,) for q in nodes for j in range(1, k + 1)} - nodes)
        for c in frontier:
            yield from grow(nodes | {c})

    yield from grow(frozenset({()}))


def all_trees(k: int, max_nodes: int, domain: Sequence[int]) -> Iterator[DataTree]:
    """Every input tree with at most ``max_nodes`` nodes labelled from ``domain``."""
    for size in range(max_nodes + 1):
        for nodes in sorted(_shapes(k, size), key=lambda s: sorted(s)):
            order = sorted(nodes, key=lambda q: (len(q), q))
            for vals in itertools.product(domain, repeat=len(order)):
                yield DataTree(k, dict(zip(order, vals)))


def _seeds(p: L.Program, domain: Sequence[int]) -> Iterator[dict]:
    choices = [(name, (False, True) if sort == "bool" else tuple(domain)) for name, sort in p.data_vars]
    for combo in itertools.product(*[c for _, c in choices]):
        yield dict(zip([name for name, _ in choices], combo))


def enumerate_prefixes(p: L.Program, m: int, n: int, tree_size_bound: int, data_domain: Sequence[int],
                       max_runs: int = 50_000, budget: float | None = None) -> set[Log]:
    """All node labels of all prefixes of knitted trees within the bounds.

    A prefix's last frame appears both with the sentinel ``next`` and with
    the link to its successor in the full tree.
    """
    p = prepare(p)
    deadline = None if budget is None else time.monotonic() + budget
    out: set[Log] = set()
    runs = 0
    for t in all_trees(p.k, tree_size_bound, data_domain):
        for seed in _seeds(p, data_domain):
            runs += 1
            if runs > max_runs:
                raise BudgetExceeded(f"more than {max_runs} (tree, seed) runs")
            if deadline is not None and time.monotonic() > deadline:
                raise BudgetExceeded("enumeration ran past its time budget")
            kt = build_kt(p, t, m, n, seed)
            for pos in range(1, len(kt.lace()) + 1):
                out.update(truncate(kt, pos).logs.values())
                out.update(truncate(kt, pos, keep_next=True).logs.values())
    return out


# --------------------------------------------------------------------------
# Derivability of a label from a label set (the closure oracle)


def _by_kind(system: ChcSystem) -> dict:
    out: dict = {}
    for c in system.clauses:
        out[(c.kind, c.index, c.child)] = c
    return out


def derivations(system: ChcSystem, sigma: Log, labels: set[Log] | frozenset[Log],
                first: bool = True) -> list[tuple[ChcClause, dict]]:
    """Clause instances deriving ``sigma`` whose body labels all lie in ``labels``."""
    sh = system.shape
    table = _by_kind(system)
    top = log_top(sigma)
    found: list = []

    def attempt(key, binding) -> bool:
        c = table.get(key)
        if c is None:
            return False
        if all(binding[b] in labels for b in c.body) and eval_clause(system, c, binding):
            found.append((c, binding))
            return first
        return False

    if top == 1 and attempt(("I", 0, 0), {"s": sigma}):
        return found
    if top == 2 and attempt(("II", 0, 0), {"s": sigma}):
        return found
    if top < 2:
        return found
    f = sigma[top - 1]
    theta = upto(sh, sigma, top - 1)
    if theta not in labels:
        return found
    pd, pi = f.prev
    if pd == SELF:
        attempt(("III", top, 0), {"s": sigma, "t": theta})
        return found
    if pd == UP:
        for j in range(1, sh.arity + 1):
            for par in labels:
                g = par[pi - 1] if 1 <= pi <= sh.n + 1 else None
                if g is None or g.avail or g.next != (j, top):
                    continue
                if attempt(("V", top, j), {"s": sigma, "t": theta, "p": par}):
                    return found
        return found
    for ch in labels:
        g = ch[pi - 1] if 1 <= pi <= sh.n + 1 else None
        if g is None or g.avail or g.next != (UP, top):
            continue
        if attempt(("IV", top, pd), {"s": sigma, "t": theta, "c": ch}):
            return found
    return found


def is_derivable(system: ChcSystem, sigma: Log, labels: set[Log] | frozenset[Log]) -> bool:
    return bool(derivations(system, sigma, labels))
