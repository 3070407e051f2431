"""The heap-manipulating source language.

Programs declare pointer variables, data variables (``int``/``bool``) and,
optionally, pointer fields; the body is a block of labelled statements.
Block structure (``if``/``while``) is flattened at parse time, so a
:class:`Program` is a label-addressed list of :class:`Statement` values, each
carrying its explicit successor labels.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Iterator, Mapping, Union

DATA_FIELD = "val"
DEFAULT_FIELD = "next"
SORTS = ("int", "bool")


# --------------------------------------------------------------------------
# Errors


class LangError(Exception):
    """Base class for parse-time errors; carries a 1-based source position."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.line = line
        self.col = col
        where = f" at {line}:{col}" if line else ""
        super().__init__(f"{type(self).__name__}{where}: {message}")


class ProgramSyntaxError(LangError):
    pass


class DuplicateLabel(LangError):
    pass


class UndeclaredIdentifier(LangError):
    pass


class KindMismatch(LangError):
    """A pointer used where data is expected, or the other way round."""


class ArityMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# Expressions


@dataclass(frozen=True)
class IntLit:
    value: int


@dataclass(frozen=True)
class BoolLit:
    value: bool


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Deref:
    """``p->val``; allowed in conditions and expressions until desugaring."""

    ptr: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Exp"
    right: "Exp"


@dataclass(frozen=True)
class Not:
    arg: "Exp"


@dataclass(frozen=True)
class PtrEq:
    """``left = right`` over pointer variables; ``right is None`` means nil."""

    left: str
    right: str | None


@dataclass(frozen=True)
class FieldEq:
    """``ptr->field = right``; ``right is None`` means nil."""

    ptr: str
    field: str
    right: str | None


Exp = Union[IntLit, BoolLit, Var, Deref, BinOp, Not, PtrEq, FieldEq]

ARITH_OPS = ("+", "-", "*")
ORDER_OPS = ("<", "<=", ">", ">=")
EQ_OPS = ("=", "!=")
BOOL_OPS = ("and", "or")


def subexps(e: Exp) -> Iterator[Exp]:
    """Pre-order walk over an expression."""
    yield e
    if isinstance(e, BinOp):
        yield from subexps(e.left)
        yield from subexps(e.right)
    elif isinstance(e, Not):
        yield from subexps(e.arg)


def is_pure_data(e: Exp) -> bool:
    """True when ``e`` mentions neither the heap nor pointer variables."""
    return not any(isinstance(s, (Deref, PtrEq, FieldEq)) for s in subexps(e))


def derefs(e: Exp) -> list[str]:
    """Pointers dereferenced through ``->val`` in ``e``, first occurrence order."""
    out: list[str] = []
    for s in subexps(e):
        if isinstance(s, Deref) and s.ptr not in out:
            out.append(s.ptr)
    return out


def evaluate(e: Exp, env: Mapping[str, int | bool],
             heap_atom: Callable[[Exp], int | bool] | None = None) -> int | bool:
    """Evaluate with short-circuit ``and``/``or``.

    ``heap_atom`` answers :class:`Deref`, :class:`PtrEq` and :class:`FieldEq`
    nodes; it is only called for atoms that short-circuiting actually reaches.
    """
    if isinstance(e, IntLit) or isinstance(e, BoolLit):
        return e.value
    if isinstance(e, Var):
        return env[e.name]
    if isinstance(e, (Deref, PtrEq, FieldEq)):
        if heap_atom is None:
            raise ValueError(f"heap atom {e} in a data-only context")
        return heap_atom(e)
    if isinstance(e, Not):
        return not evaluate(e.arg, env, heap_atom)
    op = e.op
    if op == "and":
        return bool(evaluate(e.left, env, heap_atom)) and bool(evaluate(e.right, env, heap_atom))
    if op == "or":
        return bool(evaluate(e.left, env, heap_atom)) or bool(evaluate(e.right, env, heap_atom))
    a = evaluate(e.left, env, heap_atom)
    b = evaluate(e.right, env, heap_atom)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "=":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    raise ValueError(f"unknown operator {op!r}")


# --------------------------------------------------------------------------
# Statements


@dataclass(frozen=True)
class AssignNil:
    target: str


@dataclass(frozen=True)
class AssignPtr:
    target: str
    source: str


@dataclass(frozen=True)
class AssignFromField:
    target: str
    source: str
    field: str


@dataclass(frozen=True)
class AssignToField:
    target: str
    field: str
    source: str


@dataclass(frozen=True)
class AssignToFieldNil:
    target: str
    field: str


@dataclass(frozen=True)
class WriteData:
    target: str
    exp: Exp


@dataclass(frozen=True)
class ReadData:
    target: str
    source: str


@dataclass(frozen=True)
class AssignData:
    target: str
    exp: Exp


@dataclass(frozen=True)
class AssignCond:
    """``d := cond`` where ``cond`` involves the heap (a pointer comparison)."""

    target: str
    cond: Exp


@dataclass(frozen=True)
class New:
    target: str


@dataclass(frozen=True)
class Free:
    target: str


@dataclass(frozen=True)
class Skip:
    pass


@dataclass(frozen=True)
class Goto:
    target: int


@dataclass(frozen=True)
class Branch:
    cond: Exp


@dataclass(frozen=True)
class Exit:
    pass


Op = Union[AssignNil, AssignPtr, AssignFromField, AssignToField, AssignToFieldNil,
           WriteData, ReadData, AssignData, AssignCond, New, Free, Skip, Goto,
           Branch, Exit]


@dataclass(frozen=True)
class Statement:
    """A labelled operation with its successors.

    ``succ`` is ``()`` for ``exit``, ``(then, else)`` for branches and a
    1-tuple otherwise.  ``None`` inside ``succ`` marks control falling off the
    end of the program (a validity error reported by :func:`validate`).
    """

    label: int
    op: Op
    succ: tuple[int | None, ...]


@dataclass(frozen=True)
class Program:
    pointer_vars: tuple[str, ...]
    data_vars: tuple[tuple[str, str], ...]
    statements: tuple[Statement, ...]
    pointer_fields: tuple[str, ...] = (DEFAULT_FIELD,)
    data_field: str = DATA_FIELD

    @cached_property
    def stmts(self) -> dict[int, Statement]:
        return {s.label: s for s in self.statements}

    @property
    def entry(self) -> int:
        return self.statements[0].label

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.statements]

    @property
    def k(self) -> int:
        return len(self.pointer_fields)

    @property
    def root_pointer(self) -> str:
        return self.pointer_vars[0]

    @cached_property
    def data_sorts(self) -> dict[str, str]:
        return dict(self.data_vars)

    @property
    def data_names(self) -> list[str]:
        return [n for n, _ in self.data_vars]

    def field_index(self, pf: str) -> int:
        """1-based child index that the implicit value of ``pf`` refers to."""
        return self.pointer_fields.index(pf) + 1

    def exit_labels(self) -> list[int]:
        return [s.label for s in self.statements if isinstance(s.op, Exit)]


# --------------------------------------------------------------------------
# Tokenizer

_KEYWORDS = {"pointer", "int", "bool", "field", "if", "then", "else", "fi", "while",
             "do", "od", "new", "free", "skip", "exit", "goto", "nil", "true", "false",
             "and", "or", "not"}

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\f\v]+|\n)
  | (?P<comment>//[^\n]*|\#[^\n]*)
  | (?P<num>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>:=|->|!=|==|<=|>=|&&|\|\||[→≠≤≥∧∨¬×:;,()=<>!+\-*])
""", re.VERBOSE)

_UNICODE = {"→": "->", "≠": "!=", "≤": "<=", "≥": ">=", "∧": "&&", "∨": "||",
            "¬": "!", "×": "*", "==": "="}


@dataclass(frozen=True)
class _Tok:
    kind: str  # num | ident | kw | op | eof
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if not m:
            raise ProgramSyntaxError(f"unexpected character {src[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        col = pos - line_start + 1
        if kind == "ws" and text == "\n":
            line += 1
            line_start = m.end()
        elif kind == "num":
            toks.append(_Tok("num", text, line, col))
        elif kind == "ident":
            toks.append(_Tok("kw" if text in _KEYWORDS else "ident", text, line, col))
        elif kind == "op":
            toks.append(_Tok("op", _UNICODE.get(text, text), line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


# --------------------------------------------------------------------------
# Parser
#
# Raw expressions are parsed without kind information, then classified into
# data expressions and heap atoms once declarations are known.


@dataclass(frozen=True)
class _RawName:
    name: str
    tok: _Tok


@dataclass(frozen=True)
class _RawField:
    ptr: str
    field: str
    tok: _Tok


@dataclass(frozen=True)
class _RawNil:
    tok: _Tok


@dataclass(frozen=True)
class _RawBin:
    op: str
    left: object
    right: object
    tok: _Tok


@dataclass(frozen=True)
class _RawNot:
    arg: object
    tok: _Tok


# Parsed block tree, flattened afterwards.
@dataclass
class _SimpleNode:
    label: int
    op: Op
    explicit: int | None = None


@dataclass
class _IfNode:
    label: int
    cond: Exp
    then_block: list = field(default_factory=list)
    else_block: list | None = None
    then_label: int | None = None  # flat form `if (c) then A else B`
    else_label: int | None = None


@dataclass
class _WhileNode:
    label: int
    cond: Exp
    body: list = field(default_factory=list)


_REL = {"=", "!=", "<", "<=", ">", ">="}


class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.i = 0
        self.pointers: list[str] = []
        self.data: list[tuple[str, str]] = []
        self.fields: list[str] = []
        self.fields_declared = False
        self.seen_labels: set[int] = set()

    # -- token helpers
    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def peek(self, offset: int = 1) -> _Tok:
        return self.toks[min(self.i + offset, len(self.toks) - 1)]

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("kw", "op") and t.text == text

    def advance(self) -> _Tok:
        t = self.tok
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        if not self.at(text):
            self.fail(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def fail(self, msg: str, tok: _Tok | None = None):
        t = tok or self.tok
        raise ProgramSyntaxError(msg, t.line, t.col)

    def ident(self) -> _Tok:
        if self.tok.kind != "ident":
            self.fail(f"expected identifier, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    # -- kinds
    def kind(self, name: str) -> str | None:
        if name in self.pointers:
            return "ptr"
        for n, s in self.data:
            if n == name:
                return s
        return None

    def require(self, tok: _Tok, *kinds: str) -> str:
        k = self.kind(tok.text)
        if k is None:
            raise UndeclaredIdentifier(tok.text, tok.line, tok.col)
        if kinds and k not in kinds and not ("data" in kinds and k in SORTS):
            raise KindMismatch(f"{tok.text} is {k}, expected {'/'.join(kinds)}", tok.line, tok.col)
        return k

    def use_field(self, tok: _Tok) -> str:
        name = tok.text
        if name == DATA_FIELD:
            return name
        if name not in self.fields:
            if self.fields_declared:
                raise UndeclaredIdentifier(f"pointer field {name}", tok.line, tok.col)
            self.fields.append(name)
        return name

    # -- program
    def program(self) -> Program:
        while self.tok.kind == "kw" and self.tok.text in ("pointer", "int", "bool", "field"):
            self.decl()
        if self.tok.kind == "eof":
            self.fail("program has no statements")
        block = self.block(("eof",))
        if self.tok.kind != "eof":
            self.fail(f"unexpected {self.tok.text!r}")
        statements = _flatten(block, None)
        fields = tuple(self.fields) if self.fields else (DEFAULT_FIELD,)
        return Program(tuple(self.pointers), tuple(self.data), tuple(statements), fields)

    def decl(self) -> None:
        kw = self.advance().text
        names = [self.ident()]
        while self.at(","):
            self.advance()
            names.append(self.ident())
        if self.at(";"):
            self.advance()
        for t in names:
            if t.text == DATA_FIELD or self.kind(t.text) is not None or t.text in self.fields:
                self.fail(f"{t.text} declared twice", t)
            if kw == "pointer":
                self.pointers.append(t.text)
            elif kw == "field":
                self.fields.append(t.text)
                self.fields_declared = True
            else:
                self.data.append((t.text, kw))

    def block(self, stops: tuple[str, ...]) -> list:
        items = []
        while not (self.tok.kind == "eof" or (self.tok.kind == "kw" and self.tok.text in stops)):
            items.append(self.statement())
        if not items:
            self.fail("empty block")
        return items

    def label(self) -> int:
        t = self.tok
        if t.kind != "num":
            self.fail(f"expected a statement label, found {t.text or 'end of input'!r}")
        self.advance()
        value = int(t.text)
        if value in self.seen_labels:
            raise DuplicateLabel(f"label {value} used twice", t.line, t.col)
        self.seen_labels.add(value)
        self.expect(":")
        return value

    def statement(self):
        lab = self.label()
        if self.at("if"):
            self.advance()
            cond = self.condition()
            self.expect("then")
            if self.tok.kind == "num" and not (self.peek().kind == "op" and self.peek().text == ":"):
                then_label = int(self.advance().text)
                self.expect("else")
                if self.tok.kind != "num":
                    self.fail("expected a label after else")
                else_label = int(self.advance().text)
                self.expect(";")
                return _IfNode(lab, cond, then_label=then_label, else_label=else_label)
            then_block = self.block(("else", "fi"))
            else_block = None
            if self.at("else"):
                self.advance()
                else_block = self.block(("fi",))
            self.expect("fi")
            self.expect(";")
            return _IfNode(lab, cond, then_block, else_block)
        if self.at("while"):
            self.advance()
            cond = self.condition()
            self.expect("do")
            body = self.block(("od",))
            self.expect("od")
            self.expect(";")
            return _WhileNode(lab, cond, body)
        op = self.simple()
        explicit = None
        if self.at("then"):
            self.advance()
            if self.tok.kind != "num":
                self.fail("expected a successor label after then")
            explicit = int(self.advance().text)
        self.expect(";")
        return _SimpleNode(lab, op, explicit)

    def simple(self) -> Op:
        t = self.tok
        if t.kind == "kw":
            if t.text == "skip":
                self.advance()
                return Skip()
            if t.text == "exit":
                self.advance()
                return Exit()
            if t.text == "goto":
                self.advance()
                if self.tok.kind != "num":
                    self.fail("expected a label after goto")
                return Goto(int(self.advance().text))
            if t.text in ("new", "free"):
                self.advance()
                p = self.ident()
                self.require(p, "ptr")
                return New(p.text) if t.text == "new" else Free(p.text)
            self.fail(f"unexpected keyword {t.text!r}")
        lhs = self.ident()
        if self.at("->"):
            self.advance()
            f = self.ident()
            self.require(lhs, "ptr")
            fname = self.use_field(f)
            self.expect(":=")
            rhs_tok = self.tok
            rhs = self.expr()
            if fname == DATA_FIELD:
                return WriteData(lhs.text, self.classify(rhs, "int"))
            if isinstance(rhs, _RawNil):
                return AssignToFieldNil(lhs.text, fname)
            if isinstance(rhs, _RawName):
                self.require(rhs.tok, "ptr")
                return AssignToField(lhs.text, fname, rhs.name)
            self.fail("a pointer field can only be assigned nil or a pointer variable", rhs_tok)
        self.expect(":=")
        k = self.require(lhs)
        rhs_tok = self.tok
        rhs = self.expr()
        if k == "ptr":
            if isinstance(rhs, _RawNil):
                return AssignNil(lhs.text)
            if isinstance(rhs, _RawName):
                self.require(rhs.tok, "ptr")
                return AssignPtr(lhs.text, rhs.name)
            if isinstance(rhs, _RawField) and rhs.field != DATA_FIELD:
                self.require(rhs.tok, "ptr")
                return AssignFromField(lhs.text, rhs.ptr, self.use_field(_field_tok(rhs)))
            self.fail("a pointer can only be assigned nil, a pointer, or a pointer field", rhs_tok)
        if isinstance(rhs, _RawField) and rhs.field == DATA_FIELD and k == "int":
            self.require(rhs.tok, "ptr")
            return ReadData(lhs.text, rhs.ptr)
        exp = self.classify(rhs, k)
        if k == "bool" and not is_pure_data(exp):
            return AssignCond(lhs.text, exp)
        return AssignData(lhs.text, exp)

    # -- raw expressions (precedence climbing)
    def condition(self) -> Exp:
        return self.classify(self.expr(), "bool")

    def expr(self):
        return self.or_expr()

    def or_expr(self):
        left = self.and_expr()
        while self.at("||") or self.at("or"):
            t = self.advance()
            left = _RawBin("or", left, self.and_expr(), t)
        return left

    def and_expr(self):
        left = self.not_expr()
        while self.at("&&") or self.at("and"):
            t = self.advance()
            left = _RawBin("and", left, self.not_expr(), t)
        return left

    def not_expr(self):
        if self.at("!") or self.at("not"):
            t = self.advance()
            return _RawNot(self.not_expr(), t)
        return self.rel_expr()

    def rel_expr(self):
        left = self.add_expr()
        if self.tok.kind == "op" and self.tok.text in _REL:
            t = self.advance()
            left = _RawBin(t.text, left, self.add_expr(), t)
        return left

    def add_expr(self):
        left = self.mul_expr()
        while self.at("+") or self.at("-"):
            t = self.advance()
            left = _RawBin(t.text, left, self.mul_expr(), t)
        return left

    def mul_expr(self):
        left = self.unary()
        while self.at("*"):
            t = self.advance()
            left = _RawBin("*", left, self.unary(), t)
        return left

    def unary(self):
        if self.at("-"):
            t = self.advance()
            if self.tok.kind == "num":
                return IntLit(-int(self.advance().text))
            return _RawBin("-", IntLit(0), self.unary(), t)
        return self.atom()

    def atom(self):
        t = self.tok
        if t.kind == "num":
            self.advance()
            return IntLit(int(t.text))
        if t.kind == "kw" and t.text in ("true", "false"):
            self.advance()
            return BoolLit(t.text == "true")
        if t.kind == "kw" and t.text == "nil":
            self.advance()
            return _RawNil(t)
        if self.at("("):
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "ident":
            self.advance()
            if self.at("->"):
                self.advance()
                f = self.ident()
                return _RawField(t.text, f.text, t)
            return _RawName(t.text, t)
        self.fail(f"unexpected {t.text or 'end of input'!r} in expression")

    # -- classification
    def ptr_side(self, raw) -> tuple[str, object] | None:
        """Classify an operand of = / != as a pointer-ish term, or None."""
        if isinstance(raw, _RawNil):
            return ("nil", None)
        if isinstance(raw, _RawName) and self.kind(raw.name) == "ptr":
            return ("var", raw.name)
        if isinstance(raw, _RawField) and raw.field != DATA_FIELD:
            return ("field", raw)
        return None

    def classify(self, raw, want: str) -> Exp:
        exp, sort = self._classify(raw)
        if sort != want:
            tok = getattr(raw, "tok", None) or self.tok
            raise KindMismatch(f"expression has sort {sort}, expected {want}", tok.line, tok.col)
        return exp

    def _classify(self, raw) -> tuple[Exp, str]:
        if isinstance(raw, IntLit):
            return raw, "int"
        if isinstance(raw, BoolLit):
            return raw, "bool"
        if isinstance(raw, _RawNil):
            self.fail("nil is only allowed in pointer comparisons", raw.tok)
        if isinstance(raw, _RawName):
            k = self.require(raw.tok)
            if k == "ptr":
                raise KindMismatch(f"pointer {raw.name} used as data", raw.tok.line, raw.tok.col)
            return Var(raw.name), k
        if isinstance(raw, _RawField):
            self.require(raw.tok, "ptr")
            if raw.field != DATA_FIELD:
                raise KindMismatch(f"pointer field {raw.field} used as data", raw.tok.line, raw.tok.col)
            return Deref(raw.ptr), "int"
        if isinstance(raw, _RawNot):
            arg, s = self._classify(raw.arg)
            if s != "bool":
                raise KindMismatch("negation of a non-boolean", raw.tok.line, raw.tok.col)
            return Not(arg), "bool"
        assert isinstance(raw, _RawBin)
        op = raw.op
        if op in EQ_OPS:
            lp, rp = self.ptr_side(raw.left), self.ptr_side(raw.right)
            if lp is not None or rp is not None:
                return self._heap_cond(raw, lp, rp), "bool"
        left, ls = self._classify(raw.left)
        right, rs = self._classify(raw.right)
        tok = raw.tok
        if op in ARITH_OPS or op in ORDER_OPS:
            if ls != "int" or rs != "int":
                raise KindMismatch(f"operator {op} needs integers", tok.line, tok.col)
            return BinOp(op, left, right), "int" if op in ARITH_OPS else "bool"
        if op in EQ_OPS:
            if ls != rs:
                raise KindMismatch(f"operator {op} compares {ls} with {rs}", tok.line, tok.col)
            return BinOp(op, left, right), "bool"
        if ls != "bool" or rs != "bool":
            raise KindMismatch(f"operator {op} needs booleans", tok.line, tok.col)
        return BinOp(op, left, right), "bool"

    def _heap_cond(self, raw: _RawBin, lp, rp) -> Exp:
        tok = raw.tok
        if lp is None or rp is None:
            raise KindMismatch("pointer compared with data", tok.line, tok.col)
        if lp[0] == "nil" and rp[0] != "nil":
            lp, rp = rp, lp
        if lp[0] == "nil":
            self.fail("comparison of nil with nil", tok)
        if rp[0] == "field":
            if lp[0] == "field":
                self.fail("at most one side of a pointer comparison may be a field", tok)
            lp, rp = rp, lp
        right = rp[1] if rp[0] == "var" else None
        if lp[0] == "field":
            f: _RawField = lp[1]
            self.require(f.tok, "ptr")
            atom: Exp = FieldEq(f.ptr, self.use_field(_field_tok(f)), right)
        else:
            atom = PtrEq(lp[1], right)
        return Not(atom) if raw.op == "!=" else atom


def _field_tok(f: _RawField) -> _Tok:
    return _Tok("ident", f.field, f.tok.line, f.tok.col)


def _first_label(block: list) -> int:
    return block[0].label


def _flatten(block: list, cont: int | None) -> list[Statement]:
    out: list[Statement] = []
    for idx, node in enumerate(block):
        after = block[idx + 1].label if idx + 1 < len(block) else cont
        if isinstance(node, _SimpleNode):
            if isinstance(node.op, Exit):
                succ: tuple = ()
            elif isinstance(node.op, Goto):
                succ = (node.op.target,)
            else:
                succ = (node.explicit if node.explicit is not None else after,)
            out.append(Statement(node.label, node.op, succ))
        elif isinstance(node, _WhileNode):
            out.append(Statement(node.label, Branch(node.cond), (_first_label(node.body), after)))
            out.extend(_flatten(node.body, node.label))
        else:
            if node.then_label is not None:
                out.append(Statement(node.label, Branch(node.cond), (node.then_label, node.else_label)))
                continue
            else_target = _first_label(node.else_block) if node.else_block else after
            out.append(Statement(node.label, Branch(node.cond), (_first_label(node.then_block), else_target)))
            out.extend(_flatten(node.then_block, after))
            if node.else_block:
                out.extend(_flatten(node.else_block, after))
    return out


def parse_program(source: str) -> Program:
    """Parse ``.kw`` source text into a flattened :class:`Program`."""
    return _Parser(source).program()


# --------------------------------------------------------------------------
# Control flow


def succ(p: Program, pc: int, branch: bool | None = None) -> int | None:
    """Successor of ``pc``; ``branch`` selects the arm of a conditional."""
    s = p.stmts[pc]
    if isinstance(s.op, Exit):
        if branch is not None:
            raise ArityMismatch(f"exit at {pc} has no branches")
        return None
    if isinstance(s.op, Branch):
        if branch is None:
            raise ArityMismatch(f"branch at {pc} needs a condition value")
        return s.succ[0] if branch else s.succ[1]
    if branch is not None:
        raise ArityMismatch(f"statement at {pc} is not a branch")
    return s.succ[0]


# --------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Diagnostic:
    rule: str
    label: int | None
    detail: str

    def __str__(self) -> str:
        where = f" at {self.label}" if self.label is not None else ""
        return f"{self.rule} {self.detail}{where}"


def _op_pointers(op: Op) -> list[str]:
    if isinstance(op, (AssignNil, New, Free)):
        return [op.target]
    if isinstance(op, AssignPtr):
        return [op.target, op.source]
    if isinstance(op, AssignFromField):
        return [op.target, op.source]
    if isinstance(op, AssignToField):
        return [op.target, op.source]
    if isinstance(op, AssignToFieldNil):
        return [op.target]
    if isinstance(op, WriteData):
        return [op.target] + _exp_pointers(op.exp)
    if isinstance(op, ReadData):
        return [op.source]
    if isinstance(op, (AssignData,)):
        return _exp_pointers(op.exp)
    if isinstance(op, AssignCond):
        return _exp_pointers(op.cond)
    if isinstance(op, Branch):
        return _exp_pointers(op.cond)
    return []


def _exp_pointers(e: Exp) -> list[str]:
    out = []
    for s in subexps(e):
        if isinstance(s, Deref):
            out.append(s.ptr)
        elif isinstance(s, PtrEq):
            out += [s.left] + ([s.right] if s.right is not None else [])
        elif isinstance(s, FieldEq):
            out += [s.ptr] + ([s.right] if s.right is not None else [])
    return out


def _op_fields(op: Op) -> list[str]:
    if isinstance(op, (AssignFromField, AssignToField, AssignToFieldNil)):
        return [op.field]
    exp = getattr(op, "exp", None) or getattr(op, "cond", None)
    if exp is None:
        return []
    return [s.field for s in subexps(exp) if isinstance(s, FieldEq)]


def _op_data(op: Op) -> list[tuple[str, str | None]]:
    """Data variables used by ``op`` with the sort they must have (None: any)."""
    out: list[tuple[str, str | None]] = []
    if isinstance(op, ReadData):
        out.append((op.target, "int"))
    if isinstance(op, AssignCond):
        out.append((op.target, "bool"))
    if isinstance(op, AssignData):
        out.append((op.target, None))
    exp = getattr(op, "exp", None) or getattr(op, "cond", None)
    if exp is not None:
        out += [(s.name, None) for s in subexps(exp) if isinstance(s, Var)]
    return out


def exp_sort(e: Exp, sorts: Mapping[str, str]) -> str | None:
    """Sort of ``e`` under ``sorts``; ``None`` when ill-sorted."""
    if isinstance(e, IntLit) or isinstance(e, Deref):
        return "int"
    if isinstance(e, (BoolLit, PtrEq, FieldEq)):
        return "bool"
    if isinstance(e, Var):
        return sorts.get(e.name)
    if isinstance(e, Not):
        return "bool" if exp_sort(e.arg, sorts) == "bool" else None
    ls, rs = exp_sort(e.left, sorts), exp_sort(e.right, sorts)
    if ls is None or rs is None:
        return None
    if e.op in ARITH_OPS:
        return "int" if ls == rs == "int" else None
    if e.op in ORDER_OPS:
        return "bool" if ls == rs == "int" else None
    if e.op in EQ_OPS:
        return "bool" if ls == rs else None
    return "bool" if ls == rs == "bool" else None


def validate(p: Program) -> list[Diagnostic]:
    """All validity violations of ``p``; empty iff the program is valid."""
    diags: list[Diagnostic] = []
    if not p.pointer_vars:
        diags.append(Diagnostic("NoPointerVariable", None, "at least one pointer variable is required"))
    if not p.pointer_fields:
        diags.append(Diagnostic("NoPointerField", None, "at least one pointer field is required"))
    if not p.statements:
        diags.append(Diagnostic("EmptyProgram", None, "no statements"))
        return diags
    names = list(p.pointer_vars) + p.data_names + list(p.pointer_fields)
    for n in sorted({n for n in names if names.count(n) > 1}):
        diags.append(Diagnostic("DuplicateDeclaration", None, n))
    for _, sort in p.data_vars:
        if sort not in SORTS:
            diags.append(Diagnostic("UnknownSort", None, sort))
    seen: set[int] = set()
    for s in p.statements:
        if s.label in seen:
            diags.append(Diagnostic("DuplicateLabel", s.label, str(s.label)))
        seen.add(s.label)
    ptrs, fields, sorts = set(p.pointer_vars), set(p.pointer_fields), p.data_sorts
    for s in p.statements:
        op = s.op
        for name in _op_pointers(op):
            if name not in ptrs:
                rule = "KindMismatch" if name in sorts else "UndeclaredIdentifier"
                diags.append(Diagnostic(rule, s.label, name))
        for f in _op_fields(op):
            if f not in fields:
                diags.append(Diagnostic("UndeclaredIdentifier", s.label, f))
        for name, want in _op_data(op):
            if name not in sorts:
                rule = "KindMismatch" if name in ptrs else "UndeclaredIdentifier"
                diags.append(Diagnostic(rule, s.label, name))
            elif want is not None and sorts[name] != want:
                diags.append(Diagnostic("SortMismatch", s.label, name))
        exp = getattr(op, "exp", None) if not isinstance(op, (AssignCond, Branch)) else op.cond
        if exp is not None and all(n in sorts for n, _ in _op_data(op) if n != getattr(op, "target", None)):
            want = "bool" if isinstance(op, (AssignCond, Branch)) else (
                "int" if isinstance(op, WriteData) else sorts.get(getattr(op, "target", ""), None))
            got = exp_sort(exp, sorts)
            if want is not None and got != want:
                diags.append(Diagnostic("SortMismatch", s.label, f"expected {want}"))
        arity = 0 if isinstance(op, Exit) else 2 if isinstance(op, Branch) else 1
        if len(s.succ) != arity:
            diags.append(Diagnostic("SuccessorArity", s.label, f"expected {arity} successors"))
        if isinstance(op, Goto) and s.succ != (op.target,):
            diags.append(Diagnostic("SuccessorArity", s.label, "goto successor differs from its target"))
        for t in s.succ:
            if t is None:
                diags.append(Diagnostic("MissingExit", s.label, "control falls off the end of the program"))
            elif t not in seen:
                diags.append(Diagnostic("UnknownLabel", s.label, str(t)))
    return diags


# --------------------------------------------------------------------------
# Desugaring


def is_kernel_cond(e: Exp) -> bool:
    """Branch conditions that survive desugaring: p=q, not(p=q), data relations."""
    if isinstance(e, Not):
        e = e.arg
        if isinstance(e, PtrEq):
            return e.right is not None
        return is_pure_data(Not(e))
    if isinstance(e, PtrEq):
        return e.right is not None
    return is_pure_data(e)


def is_kernel_op(op: Op) -> bool:
    if isinstance(op, Branch):
        return is_kernel_cond(op.cond)
    if isinstance(op, AssignCond):
        return isinstance(op.cond, PtrEq) and op.cond.right is not None
    if isinstance(op, (AssignData, WriteData)):
        return is_pure_data(op.exp)
    return True


def local_condition_pointer(e: Exp) -> tuple[bool, str | None]:
    """Whether ``e`` can be decided at a single node, and which pointer it reads.

    Such conditions combine data relations, ``p = nil`` tests and ``->val``
    reads of at most one pointer.  The knitted-tree builder and the clause
    generator evaluate them in one step, which keeps loop heads such as
    ``cur != nil && cur->val != key`` to a single frame.
    """
    ptrs = set()
    for s in subexps(e):
        if isinstance(s, FieldEq):
            return False, None
        if isinstance(s, PtrEq) and s.right is not None:
            return False, None
        if isinstance(s, Deref):
            ptrs.add(s.ptr)
    if len(ptrs) > 1:
        return False, None
    return True, (ptrs.pop() if ptrs else None)


def is_compare_cond(e: Exp) -> tuple[str, str, bool] | None:
    """``(p, q, negated)`` when ``e`` is ``p = q`` or ``not(p = q)``."""
    neg = False
    if isinstance(e, Not):
        neg, e = True, e.arg
    if isinstance(e, PtrEq) and e.right is not None:
        return e.left, e.right, neg
    return None


class _Fresh:
    def __init__(self, p: Program):
        self.names = set(p.pointer_vars) | set(p.data_names) | set(p.pointer_fields) | {DATA_FIELD}
        self.next_label = max(p.labels) + 1
        self.ptrs: list[str] = []
        self.data: list[tuple[str, str]] = []
        self.counter = 0

    def name(self, stem: str) -> str:
        while True:
            self.counter += 1
            cand = f"_{stem}{self.counter}"
            if cand not in self.names:
                self.names.add(cand)
                return cand

    def label(self) -> int:
        lab = self.next_label
        self.next_label += 1
        return lab


class _Desugarer:
    def __init__(self, p: Program):
        self.p = p
        self.fresh = _Fresh(p)
        self.nilvar: str | None = None
        self.out: list[Statement] = []

    def nil(self) -> str:
        if self.nilvar is None:
            self.nilvar = self.fresh.name("nil")
            self.fresh.ptrs.append(self.nilvar)
        return self.nilvar

    def emit(self, label: int, op: Op, succ: tuple) -> None:
        self.out.append(Statement(label, op, succ))

    def run(self) -> Program:
        for s in self.p.statements:
            if is_kernel_op(s.op):
                self.out.append(s)
            else:
                self.lower(s)
        stmts = self.out
        if self.nilvar is not None:
            init = Statement(self.fresh.label(), AssignNil(self.nilvar), (self.p.entry,))
            stmts = [init] + stmts
        return replace(self.p,
                       pointer_vars=self.p.pointer_vars + tuple(self.fresh.ptrs),
                       data_vars=self.p.data_vars + tuple(self.fresh.data),
                       statements=tuple(stmts))

    def lower(self, s: Statement) -> None:
        op = s.op
        if isinstance(op, Branch):
            self.cond(s.label, op.cond, s.succ[0], s.succ[1])
        elif isinstance(op, AssignCond):
            c = op.cond
            if isinstance(c, PtrEq):
                self.emit(s.label, AssignCond(op.target, PtrEq(c.left, self.nil())), s.succ)
                return
            yes, no = self.fresh.label(), self.fresh.label()
            self.cond(s.label, c, yes, no)
            self.emit(yes, AssignData(op.target, BoolLit(True)), s.succ)
            self.emit(no, AssignData(op.target, BoolLit(False)), s.succ)
        elif isinstance(op, (AssignData, WriteData)):
            label, exp = self.hoist(s.label, op.exp)
            self.emit(label, replace(op, exp=exp), s.succ)
        else:  # pragma: no cover - is_kernel_op covers every other statement
            raise AssertionError(op)

    def hoist(self, label: int, e: Exp) -> tuple[int, Exp]:
        """Emit reads for every ``p->val`` in ``e``; returns the label to continue at."""
        subst: dict[str, str] = {}
        for ptr in derefs(e):
            d = self.fresh.name("d")
            self.fresh.data.append((d, "int"))
            nxt = self.fresh.label()
            self.emit(label, ReadData(d, ptr), (nxt,))
            label = nxt
            subst[ptr] = d
        return label, _substitute(e, subst)

    def cond(self, label: int, e: Exp, yes: int, no: int) -> None:
        if is_pure_data(e):
            self.emit(label, Branch(e), (yes, no))
            return
        if isinstance(e, Not):
            inner = e.arg
            if isinstance(inner, (PtrEq, FieldEq)):
                self.atom(label, inner, yes, no, negate=True)
            else:
                self.cond(label, inner, no, yes)
            return
        if isinstance(e, (PtrEq, FieldEq)):
            self.atom(label, e, yes, no, negate=False)
            return
        if isinstance(e, BinOp) and e.op in BOOL_OPS:
            mid = self.fresh.label()
            if e.op == "and":
                self.cond(label, e.left, mid, no)
            else:
                self.cond(label, e.left, yes, mid)
            self.cond(mid, e.right, yes, no)
            return
        # data relation reading the heap
        label, pure = self.hoist(label, e)
        self.emit(label, Branch(pure), (yes, no))

    def atom(self, label: int, e: Exp, yes: int, no: int, negate: bool) -> None:
        if isinstance(e, FieldEq):
            t = self.fresh.name("p")
            self.fresh.ptrs.append(t)
            nxt = self.fresh.label()
            self.emit(label, AssignFromField(t, e.ptr, e.field), (nxt,))
            label, e = nxt, PtrEq(t, e.right)
        rhs = e.right if e.right is not None else self.nil()
        cmp = PtrEq(e.left, rhs)
        self.emit(label, Branch(Not(cmp) if negate else cmp), (yes, no))


def _substitute(e: Exp, subst: Mapping[str, str]) -> Exp:
    if isinstance(e, Deref) and e.ptr in subst:
        return Var(subst[e.ptr])
    if isinstance(e, BinOp):
        return BinOp(e.op, _substitute(e.left, subst), _substitute(e.right, subst))
    if isinstance(e, Not):
        return Not(_substitute(e.arg, subst))
    return e


def desugar(p: Program) -> Program:
    """Rewrite compound heap conditions into kernel statements.

    Afterwards every branch tests ``p = q``, ``not(p = q)`` or a pure data
    relation, ``p = nil`` tests compare against a fresh pointer that stays nil,
    and ``->val`` reads inside expressions become separate read statements.
    Fresh labels are allocated above the largest existing label.
    """
    if all(is_kernel_op(s.op) for s in p.statements):
        return p
    return _Desugarer(p).run()


# --------------------------------------------------------------------------
# Pretty printing

_PREC = {"or": 1, "and": 2, "=": 4, "!=": 4, "<": 4, "<=": 4, ">": 4, ">=": 4,
         "+": 5, "-": 5, "*": 6}
_SYMBOL = {"and": "&&", "or": "||"}


def format_exp(e: Exp, ctx: int = 0) -> str:
    if isinstance(e, IntLit):
        return str(e.value) if e.value >= 0 or ctx < 5 else f"({e.value})"
    if isinstance(e, BoolLit):
        return "true" if e.value else "false"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Deref):
        return f"{e.ptr}->{DATA_FIELD}"
    if isinstance(e, PtrEq):
        return _paren(f"{e.left} = {e.right or 'nil'}", 4, ctx)
    if isinstance(e, FieldEq):
        return _paren(f"{e.ptr}->{e.field} = {e.right or 'nil'}", 4, ctx)
    if isinstance(e, Not):
        a = e.arg
        if isinstance(a, PtrEq):
            return _paren(f"{a.left} != {a.right or 'nil'}", 4, ctx)
        if isinstance(a, FieldEq):
            return _paren(f"{a.ptr}->{a.field} != {a.right or 'nil'}", 4, ctx)
        return _paren("!" + format_exp(a, 3), 3, ctx)
    prec = _PREC[e.op]
    right_ctx = prec + 1 if prec != 4 else 5
    left_ctx = prec if prec != 4 else 5
    text = f"{format_exp(e.left, left_ctx)} {_SYMBOL.get(e.op, e.op)} {format_exp(e.right, right_ctx)}"
    return _paren(text, prec, ctx)


def _paren(text: str, prec: int, ctx: int) -> str:
    return f"({text})" if prec < ctx else text


def format_op(op: Op) -> str:
    if isinstance(op, AssignNil):
        return f"{op.target} := nil"
    if isinstance(op, AssignPtr):
        return f"{op.target} := {op.source}"
    if isinstance(op, AssignFromField):
        return f"{op.target} := {op.source}->{op.field}"
    if isinstance(op, AssignToField):
        return f"{op.target}->{op.field} := {op.source}"
    if isinstance(op, AssignToFieldNil):
        return f"{op.target}->{op.field} := nil"
    if isinstance(op, WriteData):
        return f"{op.target}->{DATA_FIELD} := {format_exp(op.exp)}"
    if isinstance(op, ReadData):
        return f"{op.target} := {op.source}->{DATA_FIELD}"
    if isinstance(op, AssignData):
        return f"{op.target} := {format_exp(op.exp)}"
    if isinstance(op, AssignCond):
        return f"{op.target} := {format_exp(op.cond, 5)}"
    if isinstance(op, New):
        return f"new {op.target}"
    if isinstance(op, Free):
        return f"free {op.target}"
    if isinstance(op, Skip):
        return "skip"
    if isinstance(op, Goto):
        return f"goto {op.target}"
    if isinstance(op, Exit):
        return "exit"
    raise TypeError(op)


def pretty(p: Program) -> str:
    """Render ``p`` in the flat ``.kw`` form; :func:`parse_program` reads it back."""
    lines = []
    if p.pointer_vars:
        lines.append("pointer " + ", ".join(p.pointer_vars) + ";")
    for sort in SORTS:
        names = [n for n, s in p.data_vars if s == sort]
        if names:
            lines.append(f"{sort} " + ", ".join(names) + ";")
    lines.append("field " + ", ".join(p.pointer_fields) + ";")
    stmts = p.statements
    for i, s in enumerate(stmts):
        nxt = stmts[i + 1].label if i + 1 < len(stmts) else None
        if isinstance(s.op, Branch):
            a, b = s.succ
            lines.append(f"{s.label}: if ({format_exp(s.op.cond)}) then {a} else {b};")
            continue
        text = f"{s.label}: {format_op(s.op)}"
        if not isinstance(s.op, (Exit, Goto)) and s.succ[0] != nxt:
            if s.succ[0] is None:
                raise ValueError(f"statement {s.label} falls off the end but is not last")
            text += f" then {s.succ[0]}"
        lines.append(text + ";")
    return "\n".join(lines) + "\n"


def program_hash(p: Program) -> str:
    import hashlib

    return hashlib.sha256(pretty(p).encode()).hexdigest()[:16]
