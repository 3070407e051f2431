"""Run an external Horn-clause solver on SMT-LIB text and normalise its answer."""

from __future__ import annotations

import os
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["SolverAnswer", "EngineConfig", "EngineNotFound", "ConfigError", "PROFILES",
           "DEFAULT_TIMEOUT", "GRACE_S", "solve", "classify", "load_config", "resolve_engine"]

DEFAULT_TIMEOUT = 60.0
GRACE_S = 1.0
STATUSES = ("Sat", "Unsat", "Unknown", "Timeout", "SolverError")


class EngineNotFound(FileNotFoundError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SolverAnswer:
    status: str  # Sat | Unsat | Unknown | Timeout | SolverError
    raw: str
    wall_time: float

    def to_json(self) -> dict:
        return {"status": self.status, "time_s": round(self.wall_time, 3)}


@dataclass(frozen=True)
class EngineConfig:
    """How to invoke one solver.  ``{file}`` in ``args`` is the input path."""

    name: str
    path: str
    args: tuple[str, ...] = ("{file}",)
    input_mode: str = "file"  # file | stdin
    timeout_s: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if self.input_mode not in ("file", "stdin"):
            raise ConfigError(f"input_mode must be 'file' or 'stdin', not {self.input_mode!r}")

    def command(self, file: str | None) -> list[str]:
        exe = shutil.which(self.path)
        if exe is None:
            raise EngineNotFound(f"solver executable {self.path!r} ({self.name}) not found")
        args = [a.replace("{file}", file) if file else a for a in self.args]
        if self.input_mode == "file" and file and not any("{file}" in a for a in self.args):
            args.append(file)
        return [exe, *args]


PROFILES: dict[str, EngineConfig] = {
    # SMT-based engine (Spacer inside z3).
    "z3": EngineConfig("z3", "z3", ("-smt2", "{file}")),
    "z3-stdin": EngineConfig("z3-stdin", "z3", ("-smt2", "-in"), input_mode="stdin"),
    # Dedicated CHC solvers.
    "eldarica": EngineConfig("eldarica", "eld", ("-hsmt", "{file}")),
    "golem": EngineConfig("golem", "golem", ("{file}",)),
}


def classify(raw: str) -> str:
    """Status from the solver's output: the first token decides."""
    tokens = raw.split()
    first = tokens[0] if tokens else ""
    if first == "sat":
        return "Sat"
    if first == "unsat":
        return "Unsat"
    if first == "unknown":
        return "Unknown"
    if first == "timeout":
        return "Timeout"
    return "SolverError"


def _kill(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def solve(smt_text: str, timeout: float | None = None, engine: EngineConfig | str | None = None) -> SolverAnswer:
    """Run ``engine`` on ``smt_text`` for at most ``timeout`` seconds (plus a short grace)."""
    eng = resolve_engine(engine)
    timeout = eng.timeout_s if timeout is None else timeout
    with tempfile.TemporaryDirectory(prefix="kw-") as tmp:
        file = None
        if eng.input_mode == "file":
            file = str(Path(tmp) / "query.smt2")
            Path(file).write_text(smt_text)
        cmd = eng.command(file)
        start = time.monotonic()
        proc = subprocess.Popen(cmd, stdin=subprocess.PIPE if eng.input_mode == "stdin" else subprocess.DEVNULL,
                                stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
                                start_new_session=True)
        try:
            out, _ = proc.communicate(smt_text if eng.input_mode == "stdin" else None, timeout=timeout)
        except subprocess.TimeoutExpired:
            _kill(proc)
            try:
                out, _ = proc.communicate(timeout=GRACE_S)
            except subprocess.TimeoutExpired:
                out = ""
            proc.wait()
            return SolverAnswer("Timeout", out or "", time.monotonic() - start)
        wall = time.monotonic() - start
    return SolverAnswer(classify(out), out, wall)


# --------------------------------------------------------------------------
# Configuration


def _from_mapping(obj: Mapping, base: EngineConfig) -> EngineConfig:
    eng = obj.get("engine", {})
    if not isinstance(eng, Mapping):
        raise ConfigError("[engine] must be a table")
    if "profile" in eng:
        base = _profile(str(eng["profile"]))
    kw: dict = {}
    if "path" in eng:
        kw["path"] = str(eng["path"])
    if "args" in eng:
        args = eng["args"]
        if isinstance(args, str):
            args = args.split()
        kw["args"] = tuple(str(a) for a in args)
    if "input_mode" in eng:
        kw["input_mode"] = str(eng["input_mode"])
    if "timeout_s" in obj:
        kw["timeout_s"] = float(obj["timeout_s"])
    return replace(base, **kw)


def _profile(name: str) -> EngineConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown solver profile {name!r}; known: {', '.join(PROFILES)}")
    return PROFILES[name]


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> EngineConfig:
    """Engine settings from ``kw.toml`` (current directory unless ``path``), then ``KW_SOLVER``.

    ``KW_SOLVER`` is a profile name or an executable path; a path whose
    file name matches a profile keeps that profile's arguments.
    """
    env = os.environ if env is None else env
    cfg = PROFILES["z3"]
    file = Path(path) if path is not None else Path("kw.toml")
    if file.exists():
        with open(file, "rb") as fh:
            try:
                cfg = _from_mapping(tomllib.load(fh), cfg)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"{file}: {e}") from None
    elif path is not None:
        raise ConfigError(f"config file {file} does not exist")
    override = env.get("KW_SOLVER")
    if override:
        if override in PROFILES:
            cfg = replace(PROFILES[override], timeout_s=cfg.timeout_s)
        else:
            stem = Path(override).name
            by_exe = {p.path: p for p in PROFILES.values() if p.input_mode == "file"}
            base = by_exe.get(stem, EngineConfig(stem, override))
            cfg = replace(base, path=override, timeout_s=cfg.timeout_s)
    return cfg


def resolve_engine(engine: EngineConfig | str | None) -> EngineConfig:
    if isinstance(engine, EngineConfig):
        return engine
    if isinstance(engine, str):
        return _profile(engine)
    return load_config()
