"""The ``kw`` command line: check, run, kt, emit, verify."""

from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click

from . import lang as L
from .chcgen import STATUSES, add_exit_query, compile_system, emit_meta, emit_smtlib
from .driver import memsafe, prepare
from .interp import DataTree, output_list, run as run_program
from .ktree import build_kt, exit_status
from .solver import ConfigError, EngineNotFound, load_config

EXIT_OK, EXIT_FAIL, EXIT_UNDECIDED = 0, 1, 2
VERDICT_CODES = {"Safe": EXIT_OK, "Unsafe": EXIT_FAIL, "Unknown": EXIT_UNDECIDED, "Exhausted": EXIT_UNDECIDED}


@dataclass
class RunReport:
    command: str
    inputs: list[dict] = field(default_factory=list)
    outcome: str = ""
    artifacts: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def add_input(self, path: str | Path) -> None:
        data = Path(path).read_bytes()
        self.inputs.append({"path": str(path), "sha256": hashlib.sha256(data).hexdigest()})


class _Ctx:
    def __init__(self, command: str, report: str | None):
        self.report_path = report
        self.report = RunReport(command)
        self.start = time.monotonic()

    def finish(self, outcome: str, code: int) -> None:
        self.report.outcome = outcome
        self.report.timings["total_s"] = round(time.monotonic() - self.start, 3)
        if self.report_path:
            Path(self.report_path).write_text(json.dumps(asdict(self.report), indent=2) + "\n")
        sys.exit(code)


def _load_program(path: str, ctx: _Ctx) -> L.Program:
    ctx.report.add_input(path)
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        click.echo(f"{path}: ProgramSyntaxError: the file is not UTF-8 text", err=True)
        ctx.finish("SyntaxError", EXIT_FAIL)
    try:
        p = L.parse_program(text)
    except L.LangError as e:
        click.echo(f"{path}: {e}", err=True)
        ctx.finish(type(e).__name__, EXIT_FAIL)
    diags = L.validate(p)
    if diags:
        for d in diags:
            click.echo(f"{path}: {d}", err=True)
        ctx.finish("Invalid", EXIT_FAIL)
    return p


def _load_tree(path: str | None, values: str | None, p: L.Program, ctx: _Ctx) -> DataTree:
    if values is not None:
        return DataTree.from_list([int(v) for v in values.split(",") if v.strip()], p.k)
    if path is None:
        return DataTree(p.k, {})
    ctx.report.add_input(path)
    try:
        return DataTree.from_json(Path(path).read_text())
    except (ValueError, KeyError) as e:
        click.echo(f"{path}: bad tree: {e}", err=True)
        ctx.finish("BadTree", EXIT_FAIL)


def _parse_seed(items: tuple[str, ...], p: L.Program) -> dict:
    sorts = p.data_sorts
    seed = {}
    for item in items:
        name, _, value = item.partition("=")
        if name not in sorts:
            raise click.BadParameter(f"{name!r} is not a data variable", param_hint="--seed")
        if sorts[name] == "bool":
            seed[name] = value.lower() in ("1", "true", "yes")
        else:
            seed[name] = int(value)
    return seed


def _write(path: str | None, text: str, ctx: _Ctx) -> None:
    if path is None or path == "-":
        click.echo(text, nl=False)
        return
    Path(path).write_text(text)
    ctx.report.artifacts.append(str(path))


_report = click.option("--report", type=click.Path(dir_okay=False), default=None,
                       help="Write a JSON run report to this file.")
_seed = click.option("--seed", "seed", multiple=True, metavar="VAR=VALUE",
                     help="Initial value of a data variable (repeatable).")
_tree = click.option("--tree", "tree_path", type=click.Path(exists=True, dir_okay=False), default=None,
                     help='Input tree as DataTree JSON {"arity":k,"nodes":[{"path":"1.2","val":7}]}.')
_list = click.option("--list", "list_values", default=None, metavar="V1,V2,...",
                     help="Input list along the first field (instead of --tree).")


@click.group()
@click.version_option(package_name="knitwit")
def main():
    """Memory-safety verification of heap-manipulating programs via knitted trees.

    Parameters follow the encoding's symbols: m is the number of spare
    children per node (allocation budget), n the number of frames per node
    label before overflow, and Ex a set of exit statuses among C (clean
    exit), E (nil dereference), O (label overflow) and M (out of memory).
    """


@main.command()
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@_report
def check(file, report):
    """Parse, validate and desugar FILE; print diagnostics."""
    ctx = _Ctx("check", report)
    p = _load_program(file, ctx)
    kernel = prepare(p)
    d = L.desugar(p)
    click.echo(f"ok: {len(p.statements)} statements, k={p.k}, "
               f"{len(d.statements)} after desugaring, {len(kernel.statements)} encoded")
    ctx.finish("ok", EXIT_OK)


@main.command("run")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@_tree
@_list
@_seed
@click.option("--fuel", default=10_000, show_default=True, help="Maximum number of steps.")
@click.option("--trace/--no-trace", default=True, show_default=True, help="Print every configuration.")
@_report
def run_cmd(file, tree_path, list_values, seed, fuel, trace, report):
    """Execute FILE on an input tree with the reference interpreter."""
    ctx = _Ctx("run", report)
    p = _load_program(file, ctx)
    t = _load_tree(tree_path, list_values, p, ctx)
    ex = run_program(p, t, _parse_seed(seed, p), fuel)
    if trace:
        for step, c in enumerate(ex.configs):
            ptrs = " ".join(f"{v}={c.nu_p[v] or 'nil'}" for v in p.pointer_vars)
            data = " ".join(f"{v}={c.nu_d[v]}" for v in p.data_names)
            click.echo(f"{step:4d} pc={c.pc} {ptrs} {data}".rstrip())
    last = ex.last
    pf = p.pointer_fields[0]
    values = output_list(last, p.root_pointer, pf)
    click.echo(f"outcome: {ex.outcome}" + (f" ({ex.reason})" if ex.reason else ""))
    click.echo(f"output: {' '.join(map(str, values))}")
    code = {"Final": EXIT_OK, "Error": EXIT_FAIL}.get(ex.outcome, EXIT_UNDECIDED)
    ctx.finish(ex.outcome, code)


@main.command()
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@_tree
@_list
@_seed
@click.option("-m", "--m", "m", default=0, show_default=True, help="Spare children per node (m).")
@click.option("-n", "--n", "n", default=8, show_default=True, help="Frames per label before overflow (n).")
@click.option("--json", "fmt", flag_value="json", default=True, help="Write JSON (default).")
@click.option("--dot", "fmt", flag_value="dot", help="Write Graphviz DOT.")
@click.option("-o", "--output", default=None, help="Output file (default: stdout).")
@_report
def kt(file, tree_path, list_values, seed, m, n, fmt, output, report):
    """Build the knitted tree of FILE's execution on an input tree."""
    ctx = _Ctx("kt", report)
    p = _load_program(file, ctx)
    t = _load_tree(tree_path, list_values, p, ctx)
    tree = build_kt(p, t, m, n, _parse_seed(seed, p))
    text = tree.to_dot() if fmt == "dot" else json.dumps(tree.to_json(), indent=1) + "\n"
    _write(output, text, ctx)
    status = exit_status(tree)
    click.echo(f"exit status: {status}", err=True)
    ctx.finish(status, EXIT_OK)


def _parse_ex(text: str | None) -> frozenset[str] | None:
    if not text:
        return None
    ex = frozenset(s.strip().upper() for s in text.split(",") if s.strip())
    bad = ex - set(STATUSES)
    if bad:
        raise click.BadParameter(f"unknown statuses {sorted(bad)}; use C,E,O,M", param_hint="--ex")
    return ex


@main.command()
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("-m", "--m", "m", default=0, show_default=True, help="Spare children per node (m).")
@click.option("-n", "--n", "n", default=8, show_default=True, help="Frames per label before overflow (n).")
@click.option("--ex", default=None, metavar="S,...", help="Add the exit query for these statuses (Ex).")
@click.option("--datatypes", is_flag=True, help="Declare enumerations as datatypes instead of integers.")
@click.option("--verbatim", is_flag=True, help="Print clauses without folding pinned-down frames.")
@click.option("-o", "--output", default=None, help="Output .smt2 file (default: stdout).")
@_report
def emit(file, m, n, ex, datatypes, verbatim, output, report):
    """Write FILE's Horn clause system as SMT-LIB 2 (plus a .meta.json sidecar)."""
    ctx = _Ctx("emit", report)
    p = _load_program(file, ctx)
    t0 = time.monotonic()
    system = compile_system(prepare(p), m, n)
    query = _parse_ex(ex)
    if query is not None:
        system = add_exit_query(system, query)
    text = emit_smtlib(system, datatypes=datatypes, simplify=not verbatim)
    ctx.report.timings["compile_s"] = round(time.monotonic() - t0, 3)
    _write(output, text, ctx)
    meta = emit_meta(system, text, datatypes)
    if output and output != "-":
        meta_path = str(Path(output).with_suffix("")) + ".meta.json"
        Path(meta_path).write_text(json.dumps(meta, indent=2) + "\n")
        ctx.report.artifacts.append(meta_path)
    click.echo(f"{meta['clauses']} clauses, Lab arity {meta['lab_arity']}", err=True)
    ctx.finish("emitted", EXIT_OK)


@main.command()
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--m0", default=0, show_default=True, help="Initial m.")
@click.option("--n0", default=2, show_default=True, help="Initial n.")
@click.option("--max-m", default=3, show_default=True, help="Largest m tried.")
@click.option("--max-n", default=12, show_default=True, help="Largest n tried.")
@click.option("--timeout", type=float, default=None, help="Seconds per solver call (default: config).")
@click.option("--budget", type=float, default=None, help="Wall-clock limit for the whole loop.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Solver config (default: ./kw.toml; KW_SOLVER overrides the engine).")
@_report
def verify(file, m0, n0, max_m, max_n, timeout, budget, config_path, report):
    """Decide memory safety of FILE; exit 0 Safe, 1 Unsafe, 2 Unknown/Exhausted."""
    ctx = _Ctx("verify", report)
    p = _load_program(file, ctx)
    try:
        engine = load_config(config_path)
        verdict = memsafe(p, m0, n0, max_m, max_n, budget=budget, engine=engine, timeout=timeout)
    except (EngineNotFound, ConfigError) as e:
        click.echo(f"error: {e}", err=True)
        ctx.finish("NoSolver", EXIT_UNDECIDED)
    click.echo(json.dumps(verdict.to_json(), indent=2))
    ctx.finish(verdict.result, VERDICT_CODES[verdict.result])


if __name__ == "__main__":
    main()
