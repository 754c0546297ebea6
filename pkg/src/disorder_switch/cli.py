"""Command line entry point ``disorder-switch``.

Configuration is a flat ``key=value`` file with section prefixes::

    model.lam=1
    model.a=1
    sim.dt=0.001
    run.formulation=f1
    sweep.param=a
    sweep.values=0.5,1,2

Exit codes: 0 success, 1 usage, 2 inadmissible parameters, 3 verification
failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import model, sim, solver
from .errors import DisorderSwitchError, InadmissibleParametersError, VerificationError
from .model import Formulation, ModelParams
from .sim import SimConfig
from .solver import ThresholdSolution

COMMANDS = ("solve", "verify", "simulate", "validate", "sweep")

EXIT_OK, EXIT_USAGE, EXIT_INADMISSIBLE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    params: ModelParams = field(default_factory=ModelParams)
    formulation: Formulation = Formulation.F1
    sim: SimConfig = field(default_factory=SimConfig)
    output_dir: Path = Path("out")
    commands: Tuple[str, ...] = ("solve",)
    grid_n: int = 401
    value_grid_n: int = 201
    validate_points: Tuple[float, ...] = (0.2, 0.5, 0.8)
    auto_horizon: bool = True
    sweep_param: str = "a"
    sweep_values: Tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        self.formulation = Formulation.parse(self.formulation)
        self.output_dir = Path(self.output_dir)
        self.commands = tuple(self.commands)
        if not self.commands:
            raise ValueError("run.commands must not be empty")
        bad = [c for c in self.commands if c not in COMMANDS]
        if bad:
            raise ValueError(f"unknown commands: {', '.join(bad)}")
        if self.sweep_param not in {f.name for f in fields(ModelParams)}:
            raise ValueError(f"cannot sweep {self.sweep_param!r}")


_MODEL_KEYS = [f.name for f in fields(ModelParams)]
_SIM_KEYS = [f.name for f in fields(SimConfig)]


def parse_config(text: str) -> RunConfig:
    """Parse the flat ``key=value`` format; blank lines and ``#`` comments are ignored."""
    mp, sp, kw = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section == "model" and name in _MODEL_KEYS:
            mp[name] = float(value)
        elif section == "sim" and name in _SIM_KEYS:
            sp[name] = float(value) if name in ("dt", "horizon") else int(value)
        elif key == "run.formulation":
            kw["formulation"] = value
        elif key == "run.output_dir":
            kw["output_dir"] = value
        elif key == "run.commands":
            kw["commands"] = tuple(c.strip() for c in value.split(",") if c.strip())
        elif key == "verify.grid_n":
            kw["grid_n"] = int(value)
        elif key == "solve.value_grid_n":
            kw["value_grid_n"] = int(value)
        elif key == "validate.points":
            kw["validate_points"] = _floats(value)
        elif key == "validate.auto_horizon":
            kw["auto_horizon"] = _bool(value)
        elif key == "sweep.param":
            kw["sweep_param"] = value
        elif key == "sweep.values":
            kw["sweep_values"] = _floats(value)
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return RunConfig(params=ModelParams(**mp), sim=SimConfig(**sp), **kw)


def format_config(cfg: RunConfig) -> str:
    lines = [f"model.{k}={_fmt(getattr(cfg.params, k))}" for k in _MODEL_KEYS]
    lines += [f"sim.{k}={_fmt(getattr(cfg.sim, k))}" for k in _SIM_KEYS]
    lines += [
        f"run.formulation={cfg.formulation.value}",
        f"run.output_dir={cfg.output_dir.as_posix()}",
        f"run.commands={','.join(cfg.commands)}",
        f"verify.grid_n={cfg.grid_n}",
        f"solve.value_grid_n={cfg.value_grid_n}",
        f"validate.points={','.join(_fmt(v) for v in cfg.validate_points)}",
        f"validate.auto_horizon={_fmt(cfg.auto_horizon)}",
        f"sweep.param={cfg.sweep_param}",
        f"sweep.values={','.join(_fmt(v) for v in cfg.sweep_values)}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# File helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def write_solution(path: Path, sol: ThresholdSolution) -> None:
    _write_json(Path(path), sol.to_dict())


def read_solution(path: Path) -> ThresholdSolution:
    return ThresholdSolution.from_dict(json.loads(Path(path).read_text()))


def _solution_path(cfg: RunConfig) -> Path:
    return cfg.output_dir / "solution.json"


def _load_or_solve(cfg: RunConfig) -> ThresholdSolution:
    p = _solution_path(cfg)
    if p.exists():
        sol = read_solution(p)
        if sol.formulation is cfg.formulation:
            return sol
    return solver.solve_boundaries(cfg.formulation, None, cfg.params)


# ---------------------------------------------------------------------------
# Commands


def cmd_solve(cfg: RunConfig) -> ThresholdSolution:
    sol = solver.solve_boundaries(cfg.formulation, None, cfg.params)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_solution(_solution_path(cfg), sol)
    dc = model.derive(cfg.params)
    rows = []
    for pi in np.linspace(0.0, 1.0, cfg.value_grid_n):
        v0 = solver.bayes_risk(cfg.formulation, sol, cfg.params, 0, pi, dc)
        v1 = solver.bayes_risk(cfg.formulation, sol, cfg.params, 1, pi, dc)
        rows.append((pi, v0, v1, min(v0, v1)))
    _write_csv(cfg.output_dir / "value_function.csv", ["pi", "risk0", "risk1", "min_risk"], rows)
    return sol


def cmd_verify(cfg: RunConfig) -> solver.VariationalReport:
    sol = _load_or_solve(cfg)
    rep = solver.verify_variational(cfg.formulation, sol, cfg.params, cfg.grid_n)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.output_dir / "verify.json", rep.to_dict())
    if not rep.passed:
        raise VerificationError(
            f"{len(rep.violations)} violations; first at pi={rep.violations[0][1]:.6g}",
            rep.violations)
    return rep


def cmd_simulate(cfg: RunConfig) -> List[sim.PathRecord]:
    sol = _load_or_solve(cfg)
    recs = sim.simulate_paths(cfg.formulation, sol, cfg.sim, cfg.params)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)

    def path_rows():
        for p, rec in enumerate(recs):
            for k in range(len(rec.times)):
                yield (p, rec.times[k], int(rec.theta[k]), rec.x[k], rec.pi_filter[k],
                       int(rec.phase[k]))

    _write_csv(cfg.output_dir / "paths.csv", ["path", "t", "theta", "x", "pi", "phase"],
               path_rows())
    alarm_rows = ((p, t, d) for p, rec in enumerate(recs) for t, d in rec.alarms)
    _write_csv(cfg.output_dir / "alarms.csv", ["path", "t", "direction"], alarm_rows)
    return recs


def cmd_validate(cfg: RunConfig) -> dict:
    sol = _load_or_solve(cfg)
    dc = model.derive(cfg.params)
    entries = []
    for i in (0, 1):
        for pi in cfg.validate_points:
            cf = solver.bayes_risk(cfg.formulation, sol, cfg.params, i, pi, dc)
            sc = cfg.sim
            if cfg.auto_horizon:
                sc = sc.replace(horizon=max(sim.horizon_for(cf, cfg.params.r), sc.dt))
            est = sim.estimate_risk_mc(cfg.formulation, sol, i, pi, sc, cfg.params)
            tol = 3.0 * est.stderr + est.truncation_bound
            entries.append({
                "phase": i, "pi": pi, "closed_form": cf, "mc_mean": est.mean,
                "stderr": est.stderr, "truncation_bound": est.truncation_bound,
                "horizon": sc.horizon, "n_paths": est.n_paths,
                "clamp_fraction": est.clamp_fraction,
                "abs_error": abs(est.mean - cf), "tolerance": tol,
                "passed": bool(abs(est.mean - cf) <= tol),
            })
    report = {"formulation": cfg.formulation.value, "entries": entries,
              "passed": all(e["passed"] for e in entries)}
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.output_dir / "validate.json", report)
    if not report["passed"]:
        raise VerificationError("Monte Carlo risk disagrees with the closed form",
                                [(e["phase"], e["pi"]) for e in entries if not e["passed"]])
    return report


def cmd_sweep(cfg: RunConfig, param: Optional[str] = None,
              values: Optional[Sequence[float]] = None) -> List[dict]:
    param = param or cfg.sweep_param
    values = cfg.sweep_values if values is None else values
    rows = []
    for v in values:
        params = cfg.params.replace(**{param: v})
        row = {"param": param, "value": v}
        try:
            sol = solver.solve_boundaries(cfg.formulation, None, params)
            row.update(status="ok", lower=sol.lower, upper=sol.upper,
                       bar_lower=sol.bar_lower, bar_upper=sol.bar_upper,
                       coeff_lower=sol.coeff_lower, coeff_upper=sol.coeff_upper)
        except DisorderSwitchError as exc:
            row.update(status=type(exc).__name__, lower=math.nan, upper=math.nan,
                       bar_lower=math.nan, bar_upper=math.nan,
                       coeff_lower=math.nan, coeff_upper=math.nan)
        rows.append(row)
    cols = ["param", "value", "status", "lower", "upper", "bar_lower", "bar_upper",
            "coeff_lower", "coeff_upper"]
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.output_dir / "sweep.csv", cols, ([r[c] for c in cols] for r in rows))
    return rows


_DISPATCH = {"solve": cmd_solve, "verify": cmd_verify, "simulate": cmd_simulate,
             "validate": cmd_validate, "sweep": cmd_sweep}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="disorder-switch",
                description="Optimal alarm thresholds for alternating change-point detection.")
    p.add_argument("command", choices=COMMANDS + ("run",),
                   help="'run' executes run.commands from the config in order")
    p.add_argument("--config", type=Path, help="key=value configuration file")
    p.add_argument("--out", type=Path, help="output directory (overrides run.output_dir)")
    p.add_argument("--seed", type=int, help="simulation seed (overrides sim.seed)")
    p.add_argument("--formulation", choices=[f.value for f in Formulation])
    return p


def load_run_config(args) -> RunConfig:
    cfg = parse_config(args.config.read_text()) if args.config else RunConfig()
    if args.out is not None:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.sim = cfg.sim.replace(seed=args.seed)
    if args.formulation is not None:
        cfg.formulation = Formulation.parse(args.formulation)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args)
    except (OSError, ValueError) as exc:
        print(f"disorder-switch: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    commands = cfg.commands if args.command == "run" else (args.command,)
    try:
        for name in commands:
            _DISPATCH[name](cfg)
            print(f"{name}: ok ({cfg.output_dir})")
    except InadmissibleParametersError as exc:
        s0, s1 = exc.slacks
        print(f"disorder-switch: inadmissible parameters: {exc}\n"
              f"slack_lower={_fmt(s0)} slack_upper={_fmt(s1)}", file=sys.stderr)
        return EXIT_INADMISSIBLE
    except VerificationError as exc:
        print(f"disorder-switch: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DisorderSwitchError, ArithmeticError) as exc:
        print(f"disorder-switch: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
