import stat
import time

import pytest

from knitwit import solver as S

from conftest import needs_z3


def fake_engine(tmp_path, body: str, name="fake", input_mode="file") -> S.EngineConfig:
    exe = tmp_path / name
    exe.write_text("#!/bin/sh\n" + body + "\n")
    exe.chmod(exe.stat().st_mode | stat.S_IEXEC)
    args = ("{file}",) if input_mode == "file" else ()
    return S.EngineConfig(name, str(exe), args, input_mode=input_mode, timeout_s=5)


@pytest.mark.parametrize("raw, status", [
    ("sat\n", "Sat"),
    ("unsat\n(model)", "Unsat"),
    ("unknown\n", "Unknown"),
    ("timeout\n", "Timeout"),
    ("", "SolverError"),
    ("(error \"line 3\")\nsat\n", "SolverError"),
    ("saturated\n", "SolverError"),
])
def test_classify_uses_the_first_token(raw, status):
    assert S.classify(raw) == status


def test_file_mode_passes_the_path(tmp_path):
    eng = fake_engine(tmp_path, 'grep -q "check-sat" "$1" && echo unsat')
    a = S.solve("(check-sat)\n", engine=eng)
    assert a.status == "Unsat"
    assert a.wall_time >= 0


def test_stdin_mode_pipes_the_text(tmp_path):
    eng = fake_engine(tmp_path, 'grep -q "check-sat" && echo sat', input_mode="stdin")
    assert S.solve("(check-sat)\n", engine=eng).status == "Sat"


def test_timeout_kills_the_solver(tmp_path):
    eng = fake_engine(tmp_path, "sleep 30; echo sat")
    start = time.monotonic()
    a = S.solve("", timeout=0.5, engine=eng)
    assert a.status == "Timeout"
    assert time.monotonic() - start < 0.5 + S.GRACE_S + 2


def test_missing_executable():
    eng = S.EngineConfig("ghost", "/nonexistent/solver")
    with pytest.raises(S.EngineNotFound):
        S.solve("(check-sat)", engine=eng)


def test_bad_input_mode():
    with pytest.raises(S.ConfigError):
        S.EngineConfig("x", "z3", input_mode="socket")


def test_default_config_is_z3(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = S.load_config(env={})
    assert cfg == S.PROFILES["z3"]


def test_config_file_keys(tmp_path):
    cfg_file = tmp_path / "kw.toml"
    cfg_file.write_text('timeout_s = 7\n[engine]\npath = "/opt/eld"\nargs = ["-hsmt", "{file}"]\n'
                        'input_mode = "file"\n')
    cfg = S.load_config(cfg_file, env={})
    assert (cfg.path, cfg.args, cfg.input_mode, cfg.timeout_s) == ("/opt/eld", ("-hsmt", "{file}"), "file", 7.0)


def test_config_profile(tmp_path):
    cfg_file = tmp_path / "kw.toml"
    cfg_file.write_text('[engine]\nprofile = "z3-stdin"\n')
    assert S.load_config(cfg_file, env={}).input_mode == "stdin"


def test_env_override_by_profile_keeps_timeout(tmp_path):
    cfg_file = tmp_path / "kw.toml"
    cfg_file.write_text("timeout_s = 3\n")
    cfg = S.load_config(cfg_file, env={"KW_SOLVER": "eldarica"})
    assert (cfg.name, cfg.timeout_s) == ("eldarica", 3.0)


def test_env_override_by_path_reuses_profile_args(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = S.load_config(env={"KW_SOLVER": "/opt/bin/eld"})
    assert cfg.path == "/opt/bin/eld"
    assert cfg.args == S.PROFILES["eldarica"].args


def test_unknown_profile_and_bad_toml(tmp_path):
    f = tmp_path / "kw.toml"
    f.write_text('[engine]\nprofile = "nope"\n')
    with pytest.raises(S.ConfigError):
        S.load_config(f, env={})
    f.write_text("[engine\n")
    with pytest.raises(S.ConfigError):
        S.load_config(f, env={})
    with pytest.raises(S.ConfigError):
        S.load_config(tmp_path / "absent.toml", env={})


def test_command_appends_file_when_args_lack_it(tmp_path):
    eng = fake_engine(tmp_path, "echo sat")
    eng = S.EngineConfig(eng.name, eng.path, ("-v",))
    assert eng.command("/tmp/q.smt2")[1:] == ["-v", "/tmp/q.smt2"]


@needs_z3
def test_real_z3_round_trip():
    text = "(set-logic HORN)\n(declare-fun P (Int) Bool)\n" \
           "(assert (forall ((x Int)) (=> (= x 0) (P x))))\n" \
           "(assert (forall ((x Int)) (=> (and (P x) (> x 0)) false)))\n(check-sat)\n"
    assert S.solve(text, timeout=30, engine="z3").status == "Sat"
    assert S.solve(text.replace("(> x 0)", "(= x 0)"), timeout=30, engine="z3-stdin").status == "Unsat"


def test_to_json():
    assert S.SolverAnswer("Sat", "sat", 1.23456).to_json() == {"status": "Sat", "time_s": 1.235}
