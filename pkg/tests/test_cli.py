import csv
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disorder_switch import cli, solver
from disorder_switch.errors import ConvergenceError
from disorder_switch.model import Formulation, ModelParams
from disorder_switch.sim import SimConfig


def write_cfg(path, **entries):
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()))
    return path


def read_csv(path):
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_parse_defaults(self):
        cfg = cli.parse_config("# nothing but a comment\n\n")
        assert cfg.params == ModelParams() and cfg.formulation is Formulation.F1

    def test_parse_sections(self):
        cfg = cli.parse_config("model.lam=2\nsim.n_paths=7\nrun.formulation=F2\n"
                               "run.commands=solve, verify\nsweep.values=1,2\n")
        assert cfg.params.lam == 2.0 and cfg.sim.n_paths == 7
        assert cfg.formulation is Formulation.F2
        assert cfg.commands == ("solve", "verify") and cfg.sweep_values == (1.0, 2.0)

    @pytest.mark.parametrize("text", ["model.nope=1", "garbage", "run.commands=fly",
                                      "sim.dt=-1", "sweep.param=zeta"])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            cli.parse_config(text)

    @settings(max_examples=40, deadline=None)
    @given(lam=st.floats(0.01, 50), a=st.floats(0.01, 50), dt=st.floats(1e-5, 0.1),
           seed=st.integers(0, 2**64 - 1), form=st.sampled_from(["f1", "f2"]),
           pts=st.lists(st.floats(0, 1), min_size=1, max_size=4))
    def test_round_trip(self, lam, a, dt, seed, form, pts):
        cfg = cli.RunConfig(params=ModelParams(lam=lam, a=a), formulation=form,
                            sim=SimConfig(dt=dt, seed=seed), validate_points=tuple(pts),
                            commands=("solve", "sweep"))
        assert cli.parse_config(cli.format_config(cfg)) == cfg


@pytest.fixture
def baseline_cfg(tmp_path):
    return write_cfg(tmp_path / "run.cfg", **{"sim.n_paths": 3, "sim.horizon": 0.5,
                                             "solve.value_grid_n": 101})


class TestSolve:
    def test_outputs(self, tmp_path, baseline_cfg):
        out = tmp_path / "o"
        assert cli.main(["solve", "--config", str(baseline_cfg), "--out", str(out)]) == 0
        sol = cli.read_solution(out / "solution.json")
        assert abs(sol.upper - (1 - sol.lower)) < 1e-8
        rows = read_csv(out / "value_function.csv")
        assert list(rows[0]) == ["pi", "risk0", "risk1", "min_risk"] and len(rows) == 101
        assert rows[1]["pi"] == "0.01"
        assert "0.32141840116839" in rows[0]["risk0"]
        assert math.isclose(float(rows[50]["risk0"]), solver.bayes_risk(
            "f1", sol, ModelParams(), 0, 0.5), rel_tol=1e-15)

    def test_solution_round_trip(self, tmp_path, solved):
        for sol in solved.values():
            cli.write_solution(tmp_path / "s.json", sol)
            assert cli.read_solution(tmp_path / "s.json") == sol

    def test_rerun_is_byte_identical(self, tmp_path, baseline_cfg):
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["solve", "--config", str(baseline_cfg), "--out", str(out),
                             "--formulation", "f2"]) == 0
            blobs.append([(out / f).read_bytes() for f in ("solution.json", "value_function.csv")])
        assert blobs[0] == blobs[1]

    def test_inadmissible_exit_code(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.cfg", **{"model.a": 0.1, "model.b": 0.1})
        code = cli.main(["solve", "--config", str(cfg), "--out", str(tmp_path),
                         "--formulation", "f2"])
        assert code == 2
        assert "slack_lower=" in capsys.readouterr().err


class TestVerify:
    def test_passes_on_baseline(self, tmp_path, baseline_cfg):
        out = tmp_path / "o"
        assert cli.main(["verify", "--config", str(baseline_cfg), "--out", str(out)]) == 0
        rep = json.loads((out / "verify.json").read_text())
        assert rep["passed"] and rep["violations"] == []

    def test_fails_on_perturbed_thresholds(self, tmp_path, baseline_cfg, solved):
        out = tmp_path / "o"
        out.mkdir()
        bad = solver.ThresholdSolution.from_dict(solved["f1"].to_dict())
        bad.lower += 0.05
        cli.write_solution(out / "solution.json", bad)
        assert cli.main(["verify", "--config", str(baseline_cfg), "--out", str(out)]) == 3
        rep = json.loads((out / "verify.json").read_text())
        assert not rep["passed"]
        assert any(v["pi"] == pytest.approx(bad.lower) for v in rep["violations"])


class TestSimulateValidateSweep:
    def test_simulate_deterministic(self, tmp_path, baseline_cfg, monkeypatch):
        blobs = []
        for threads, name in (("1", "a"), ("3", "b")):
            monkeypatch.setenv("DISORDER_SWITCH_THREADS", threads)
            out = tmp_path / name
            assert cli.main(["simulate", "--config", str(baseline_cfg), "--out", str(out),
                             "--seed", "42"]) == 0
            blobs.append((out / "paths.csv").read_bytes())
        assert blobs[0] == blobs[1]
        rows = read_csv(tmp_path / "a" / "paths.csv")
        assert list(rows[0]) == ["path", "t", "theta", "x", "pi", "phase"]
        assert len(rows) == 3 * 501

    def test_validate(self, tmp_path):
        cfg = write_cfg(tmp_path / "v.cfg", **{"sim.n_paths": 400, "validate.points": "0.5"})
        out = tmp_path / "o"
        assert cli.main(["validate", "--config", str(cfg), "--out", str(out)]) == 0
        rep = json.loads((out / "validate.json").read_text())
        assert len(rep["entries"]) == 2
        for e in rep["entries"]:
            assert e["abs_error"] <= 3 * e["stderr"] + e["truncation_bound"]
            assert e["truncation_bound"] <= 0.005 * e["closed_form"] * 1.0000001

    def test_sweep(self, tmp_path, baseline_cfg):
        out = tmp_path / "o"
        assert cli.main(["sweep", "--config", str(baseline_cfg), "--out", str(out)]) == 0
        rows = read_csv(out / "sweep.csv")
        assert [r["value"] for r in rows] == ["0.5", "1", "2"]
        assert all(r["status"] == "ok" for r in rows)

    def test_run_executes_command_list(self, tmp_path):
        cfg = write_cfg(tmp_path / "r.cfg", **{"run.commands": "solve,verify"})
        out = tmp_path / "o"
        assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "solution.json").exists() and (out / "verify.json").exists()


class TestExitCodes:
    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["bogus"])
        assert exc.value.code == 1

    def test_bad_config_file(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.cfg", **{"model.sigma": -1})
        assert cli.main(["solve", "--config", str(cfg)]) == 1

    def test_numerical_failure(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise ConvergenceError("series budget exhausted")

        monkeypatch.setattr(solver, "solve_boundaries", boom)
        assert cli.main(["solve", "--out", str(tmp_path)]) == 4
