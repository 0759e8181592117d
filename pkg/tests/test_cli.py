import csv
import json
import math

import pytest

from rtspec import cli
from rtspec.rayleigh import ContinuationError

SMALL = {"grid": {"n": 401}, "cocycle": {"T": 20, "T0": 10, "n_x2": 21, "n_angles": 8},
         "rayleigh": {"k": [1, 2, 4]}, "evolution": {"T": 5.0}, "crosscheck": {"pde_T": 5.0},
         "wavepacket": {"T": 1.0, "delta": [0.125]}}


def run_cli(tmp_path, command, cfg, name="out", extra=()):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    code = cli.main([command, "--config", str(path), "--out", str(out), *extra])
    return code, out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ----------------------------------------------------------------------------- config handling
def test_defaults_fill_in():
    cfg = cli.load_config("{}")
    assert cfg["grid"] == {"L": 20.0, "n": 801}
    assert cfg["_profile"].family == "P1"


@pytest.mark.parametrize("text, key", [
    ('{"grid": {"nn": 3}}', "grid.nn"),
    ('{"gird": {}}', "gird"),
    ('{"grid": {"n": "many"}}', "grid.n"),
    ('{"grid": {"n": 2.5}}', "grid.n"),
    ('{"rayleigh": {"k": [0]}}', "rayleigh.k"),
    ('{"evolution": {"init": "noise"}}', "evolution.init"),
    ('{"evolution": {"project": 1}}', "evolution.project"),
    ('{"profile": {"family": "P7"}}', "profile"),
    ('{"grid": null}', "grid"),
])
def test_bad_config_names_key(text, key):
    with pytest.raises(cli.ConfigError, match=f"'{key}'"):
        cli.load_config(text)


def test_invalid_json():
    with pytest.raises(cli.ConfigError, match="JSON"):
        cli.load_config("{grid: 1}")


def test_malformed_config_exit_code(tmp_path, caplog):
    code, _ = run_cli(tmp_path, "mu", {"cocycle": {"Tmax": 3}})
    assert code == 1
    assert "cocycle.Tmax" in caplog.text


def test_missing_config_file(tmp_path):
    assert cli.main(["mu", "--config", str(tmp_path / "none.json")]) == 1


# ----------------------------------------------------------------------------- reports
def test_emit_report_formatting(tmp_path):
    p = tmp_path / "r.csv"
    assert cli.emit_report(p, ["a", "b", "c"], [[1, 0.1, True]]) is False
    assert p.read_text() == "a,b,c\n1,1.0000000000000001e-01,true\n"


def test_emit_report_empty_and_nan(tmp_path):
    p = tmp_path / "e.csv"
    cli.emit_report(p, ["x"], [])
    assert p.read_text() == "x\n"
    assert cli.emit_report(p, ["x"], [[math.nan]]) is True
    assert p.read_text() == "x\nnan\n"


def test_nan_results_exit_3(tmp_path, monkeypatch):
    def bad(cfg, out, workers):
        return cli.emit_report(out / "bad.csv", ["v"], [[math.nan]])

    monkeypatch.setitem(cli.HANDLERS, "eigen", bad)
    code, out = run_cli(tmp_path, "eigen", SMALL)
    assert code == 3
    assert (out / "bad.csv").read_text() == "v\nnan\n"


def test_solver_failure_exit_3(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise ContinuationError("no convergence")

    monkeypatch.setattr(cli, "continue_in_eps", boom)
    code, _ = run_cli(tmp_path, "continue", SMALL)
    assert code == 3


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = tmp_path / "c.json"
    cfg.write_text("{}")
    assert cli.main(["validate", "--config", str(cfg), "--out", str(blocker / "sub")]) == 1


# ----------------------------------------------------------------------------- commands
def test_validate_vacuum_profile_exit_2(tmp_path):
    code, out = run_cli(tmp_path, "validate", {"profile": {"family": "P1", "params": [1, 1, 1]}})
    assert code == 2
    rows = {r[0]: r for r in read_csv(out / "validation.csv")[1:]}
    assert rows["rho_positive"][1] == "false"


def test_other_commands_validate_first(tmp_path):
    code, out = run_cli(tmp_path, "eigen", dict(SMALL, grid={"L": 2.0, "n": 81}))
    assert code == 2
    assert (out / "validation.csv").exists() and not (out / "eigen.csv").exists()


def test_mu_command(tmp_path):
    code, out = run_cli(tmp_path, "mu", SMALL)
    assert code == 0
    rows = read_csv(out / "mu.csv")
    assert rows[0] == ["method", "T", "value"]
    assert [r[0] for r in rows[1:]] == ["formula", "numeric"]
    assert float(rows[1][2]) == pytest.approx(math.sqrt(3) - 1, rel=1e-12)
    assert read_csv(out / "exponents.csv")[0] == ["x2", "xi1", "xi2", "T", "exponent"]
    assert len(read_csv(out / "exponents.csv")) == 1 + 21 * 8  # (-1, 0) is already one of the 8 angles
    hist = read_csv(out / "mu_history.csv")
    assert [float(r[0]) for r in hist[1:]] == [10.0, 20.0]


def test_eigen_and_continue_commands(tmp_path):
    cfg = dict(SMALL, rayleigh={"k": [1, 2], "continue_k": [1], "eps_target": 0.02, "dump_eigenfunctions": True},
               profile={"family": "P2"})
    code, out = run_cli(tmp_path, "eigen", cfg, "eig")
    assert code == 0
    rows = read_csv(out / "eigen.csv")
    assert rows[0] == cli.EIGEN_HEADER and len(rows) == 3
    assert (out / "eigenfunctions" / "phi_k1_eps0_re.csv").exists()
    code, out = run_cli(tmp_path, "continue", cfg, "cont")
    assert code == 0
    rows = read_csv(out / "continuation.csv")
    assert [float(r[1]) for r in rows[1:]] == pytest.approx([0.0, 0.01, 0.02])
    assert all(float(r[6]) <= 1e-10 and float(r[3]) > 0 for r in rows[1:])


def test_evolve_and_wavepacket_commands(tmp_path):
    code, out = run_cli(tmp_path, "evolve", SMALL, "ev")
    assert code == 0
    assert read_csv(out / "norms.csv")[0] == ["t", "log_norm", "div_residual"]
    growth = read_csv(out / "growth.csv")
    assert growth[1][1] == "eigenmode"
    code, out = run_cli(tmp_path, "wavepacket", SMALL, "wp")
    assert code == 0
    rows = read_csv(out / "wavepacket.csv")
    assert rows[1][0] == "8"


def test_crosscheck_summary_and_determinism(tmp_path):
    code_a, a = run_cli(tmp_path, "crosscheck", SMALL, "a")
    code_b, b = run_cli(tmp_path, "crosscheck", SMALL, "b")
    assert code_a == code_b == 0
    rows = read_csv(a / "summary.csv")
    assert rows[0] == ["method", "value", "gap_formula", "gap_eigen", "gap_pde"]
    assert [r[0] for r in rows[1:]] == ["formula", "eigen_k4", "pde_rate"]
    for name in ("summary.csv", "eigen.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_manifest_echoes_resolved_config(tmp_path):
    code, out = run_cli(tmp_path, "validate", SMALL)
    assert code == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "validate" and man["version"]
    assert set(man["config"]) == set(cli.DEFAULTS)
    for block, vals in cli.DEFAULTS.items():
        if isinstance(vals, dict):
            assert set(man["config"][block]) == set(vals)
    assert man["config"]["grid"]["n"] == 401


def test_workers_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RTSPEC_WORKERS", "2")
    code, out = run_cli(tmp_path, "mu", SMALL, "w2")
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["workers"] == 2
    monkeypatch.delenv("RTSPEC_WORKERS")
    code, ref = run_cli(tmp_path, "mu", SMALL, "w1")
    assert (out / "exponents.csv").read_bytes() == (ref / "exponents.csv").read_bytes()
    monkeypatch.setenv("RTSPEC_WORKERS", "lots")
    code, _ = run_cli(tmp_path, "mu", SMALL, "bad")
    assert code == 1
