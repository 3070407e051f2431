"""Frame, event and log value types shared by the tree builder and the clause generator."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Union

from .lang import Exit, Program

# Directions: a child index j >= 1, or one of these.
SELF = 0
UP = -1


def dir_name(d: int) -> str:
    return "-" if d == SELF else "^" if d == UP else str(d)


def parse_dir(text: str) -> int:
    return SELF if text == "-" else UP if text == "^" else int(text)


# --------------------------------------------------------------------------
# Events


@dataclass(frozen=True)
class Nop:
    def __str__(self):
        return "nop"


@dataclass(frozen=True)
class Err:
    def __str__(self):
        return "err"


@dataclass(frozen=True)
class Oom:
    def __str__(self):
        return "oom"


@dataclass(frozen=True)
class PtrHere:
    ptr: str

    def __str__(self):
        return f"{self.ptr}:=here"


@dataclass(frozen=True)
class FieldAssignPtr:
    field: str
    ptr: str

    def __str__(self):
        return f"{self.field}:={self.ptr}"


@dataclass(frozen=True)
class FieldAssignNil:
    field: str

    def __str__(self):
        return f"{self.field}:=nil"


@dataclass(frozen=True)
class Rwd:
    index: int

    def __str__(self):
        return f"rwd_{self.index}"


@dataclass(frozen=True)
class RwdP:
    index: int
    ptr: str

    def __str__(self):
        return f"rwd_{self.index},{self.ptr}"


Event = Union[Nop, Err, Oom, PtrHere, FieldAssignPtr, FieldAssignNil, Rwd, RwdP]
NOP, ERR, OOM = Nop(), Err(), Oom()


def parse_event(text: str) -> Event:
    if text in ("nop", "err", "oom"):
        return {"nop": NOP, "err": ERR, "oom": OOM}[text]
    if text.startswith("rwd_"):
        body = text[4:]
        if "," in body:
            i, p = body.split(",", 1)
            return RwdP(int(i), p)
        return Rwd(int(body))
    lhs, rhs = text.split(":=", 1)
    if rhs == "here":
        return PtrHere(lhs)
    if rhs == "nil":
        return FieldAssignNil(lhs)
    return FieldAssignPtr(lhs, rhs)


# --------------------------------------------------------------------------
# Shape: everything the encoding needs to know about (program, m, n)


@dataclass(frozen=True)
class Shape:
    program: Program
    m: int
    n: int

    @property
    def k(self) -> int:
        return self.program.k

    @property
    def arity(self) -> int:
        return self.program.k + self.m

    @property
    def ptrs(self) -> tuple[str, ...]:
        return self.program.pointer_vars

    @property
    def fields(self) -> tuple[str, ...]:
        return self.program.pointer_fields

    @property
    def data(self) -> tuple[tuple[str, str], ...]:
        return self.program.data_vars

    @cached_property
    def ptr_index(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.ptrs)}

    @cached_property
    def data_index(self) -> dict[str, int]:
        return {name: i for i, (name, _) in enumerate(self.data)}

    @cached_property
    def events(self) -> tuple[Event, ...]:
        """The finite event alphabet, in a fixed order."""
        out: list[Event] = [NOP, ERR, OOM]
        out += [PtrHere(p) for p in self.ptrs]
        out += [FieldAssignNil(f) for f in self.fields]
        out += [FieldAssignPtr(f, p) for f in self.fields for p in self.ptrs]
        out += [Rwd(i) for i in range(1, self.n + 1)]
        out += [RwdP(i, p) for i in range(1, self.n + 1) for p in self.ptrs]
        return tuple(out)

    @cached_property
    def dirs(self) -> tuple[int, ...]:
        return (SELF, UP) + tuple(range(1, self.arity + 1))

    def is_exit(self, pc: int) -> bool:
        s = self.program.stmts.get(pc)
        return s is not None and isinstance(s.op, Exit)


# --------------------------------------------------------------------------
# Frames and logs


@dataclass(frozen=True)
class Frame:
    avail: bool
    active: bool
    val: int
    pc: int
    d: tuple
    upd: tuple[bool, ...]
    isnil: tuple[bool, ...]
    event: Event
    ac: tuple[bool, ...]
    next: tuple[int, int]
    prev: tuple[int, int]

    def with_(self, **kw) -> "Frame":
        return replace(self, **kw)

    def same_modulo_next(self, other: "Frame") -> bool:
        return replace(self, next=other.next) == other


def zero_frame(shape: Shape, avail: bool = True) -> Frame:
    """The canonical value of an available (or otherwise unspecified) frame."""
    d = tuple(False if sort == "bool" else 0 for _, sort in shape.data)
    nptr = len(shape.ptrs)
    return Frame(avail, False, 0, 0, d, (False,) * nptr, (False,) * nptr, NOP,
                 (False,) * shape.arity, (SELF, 0), (SELF, 0))


Log = tuple  # tuple of n+1 Frames; frame index i lives at position i-1


def log_top(log: Log) -> int:
    """Number of unavailable frames, i.e. the index of the top frame (0 if empty)."""
    top = 0
    for f in log:
        if f.avail:
            break
        top += 1
    return top


def is_stack(log: Log) -> bool:
    """Unavailable frames form a prefix of the log."""
    top = log_top(log)
    return all(f.avail for f in log[top:])


def len_holds(log: Log, i: int) -> bool:
    """``len(log, i)``: frame i is the last unavailable frame."""
    return (i == 0 or not log[i - 1].avail) and all(f.avail for f in log[i:])


def truncate_log(shape: Shape, log: Log, i: int) -> Log:
    """Keep frames 1..i-1 and make the rest available (the ``log^{<i}`` view)."""
    z = zero_frame(shape)
    return tuple(log[:i - 1]) + (z,) * (len(log) - (i - 1))


def sentinel(index: int) -> tuple[int, int]:
    """The canonical ``next`` of the last lace frame."""
    return (SELF, index)


def frame_status(shape: Shape, f: Frame, index: int) -> str:
    """Exit status of a single unavailable frame."""
    if index == shape.n + 1:
        return "O"
    if shape.is_exit(f.pc):
        return "C"
    if isinstance(f.event, Err):
        return "E"
    if isinstance(f.event, Oom):
        return "M"
    return "N"


def label_exit(shape: Shape, log: Log) -> set[str]:
    """Statuses present in a label: C/E/M from frames 2..n, O from frame n+1."""
    out = set()
    for i in range(2, shape.n + 1):
        f = log[i - 1]
        if f.avail:
            continue
        s = frame_status(shape, f, i)
        if s != "N":
            out.add(s)
    if not log[shape.n].avail:
        out.add("O")
    return out
