"""Coupled free-boundary systems: thresholds, coefficients and risk functions.

Both formulations share one structure.  With homogeneous solutions
``(Y0, Y1)`` (Q_0, Q_1 in the first formulation; G_00, G_11 in the second)
and affine right-hand sides ``(W0, W1)`` (R_i resp. S_i), the boundary
conditions at a candidate point ``x`` give the 2x2 system

    c1 Y1(x) - c0 Y0(x) = W(x)
    c1 Y1'(x) - c0 Y0'(x) = W'(x)

solved with ``W = W0`` at the lower threshold and ``W = W1`` at the upper
one.  The thresholds are the pair (lower, upper) at which both solves give
the same (c0, c1).
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import optimize

from . import model
from .errors import (
    DisorderSwitchError,
    InadmissibleParametersError,
    NoSolutionError,
    SingularSystemError,
    VerificationError,
)
from .model import DerivedConstants, Formulation, ModelParams

MATCH_TOL = 1e-10
FIT_TOL = 1e-8
_SCAN_POINTS = 64


@dataclass
class ThresholdSolution:
    formulation: Formulation
    lower: float
    upper: float
    coeff_lower: float  # multiplies Q_0 / G_00 in the phase-0 value function
    coeff_upper: float  # multiplies Q_1 / G_11 in the phase-1 value function
    bar_lower: float
    bar_upper: float
    residuals: Dict[str, float] = field(default_factory=dict)
    admissible: bool = True
    slacks: Tuple[float, float] = (math.nan, math.nan)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["formulation"] = self.formulation.value
        d["slacks"] = list(self.slacks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdSolution":
        d = dict(d)
        d["formulation"] = Formulation.parse(d["formulation"])
        d["slacks"] = tuple(d.get("slacks", (math.nan, math.nan)))
        d["residuals"] = dict(d.get("residuals", {}))
        return cls(**d)


# ---------------------------------------------------------------------------
# Per-formulation building blocks


def _homogeneous(form: Formulation, dc: DerivedConstants, i: int, x: float):
    if form is Formulation.F1:
        v, d, _ = model.q_eval(dc, i, x)
        return v, d
    return model.g_eval(dc, i, i, x)


def _rhs(form: Formulation, params: ModelParams, side: int, x: float):
    if form is Formulation.F1:
        return model.r_fn(params, side, x), model.r_fn_deriv(params, side, x)
    return model.s_fn(params, side, x), model.s_fn_deriv(params, side, x)


def _value(form, dc, i, x, coeff):
    if form is Formulation.F1:
        return model.value_v_eval(dc, i, x, coeff)
    return model.value_u_eval(dc, i, x, coeff)


def _search_window(form: Formulation, dc: DerivedConstants) -> Tuple[float, float]:
    lo = model.PI_MIN
    if form is Formulation.F1:
        # Q_0 carries exp(kappa / pi); keep well inside double range.
        lo = max(lo, dc.kappa / 600.0)
    return lo, 1.0 - lo


def _coeffs_raw(form, params, dc, side, x):
    y0, dy0 = _homogeneous(form, dc, 0, x)
    y1, dy1 = _homogeneous(form, dc, 1, x)
    w, dw = _rhs(form, params, side, x)
    det = y1 * dy0 - dy1 * y0
    if abs(det) < 1e-14 * max(abs(y1 * dy0), abs(dy1 * y0), 1e-300):
        raise SingularSystemError(f"degenerate fundamental system at x={x!r}")
    c0 = (w * dy1 - dw * y1) / det
    c1 = (w * dy0 - dw * y0) / det
    return c0, c1


class _CoeffCache:
    """Memoised boundary solves for one (formulation, parameter) pair."""

    def __init__(self, form, params, dc):
        self.form, self.params, self.dc = form, params, dc
        self._memo = {}

    def __call__(self, side, x):
        key = (side, float(x))
        hit = self._memo.get(key)
        if hit is None:
            hit = self._memo[key] = _coeffs_raw(self.form, self.params, self.dc, side, x)
        return hit


def _coeffs(form, params, dc, side, x):
    return _coeffs_raw(form, params, dc, side, x)


def coeffs_at_lower(form, dc: Optional[DerivedConstants], params: ModelParams,
                    x: float) -> Tuple[float, float]:
    """(c0, c1) enforcing stopping and smooth fit for the phase-0 alarm at x."""
    form = Formulation.parse(form)
    dc = dc or model.derive(params)
    return _coeffs(form, params, dc, 0, float(x))


def coeffs_at_upper(form, dc: Optional[DerivedConstants], params: ModelParams,
                    x: float) -> Tuple[float, float]:
    """(c0, c1) enforcing stopping and smooth fit for the phase-1 alarm at x."""
    form = Formulation.parse(form)
    dc = dc or model.derive(params)
    return _coeffs(form, params, dc, 1, float(x))


# ---------------------------------------------------------------------------
# Scalar root finding helpers


def _brackets(f: Callable[[float], float], grid: np.ndarray) -> List[Tuple[float, float]]:
    vals = []
    for x in grid:
        try:
            vals.append(f(x))
        except (DisorderSwitchError, OverflowError, ZeroDivisionError):
            vals.append(math.nan)
    out = []
    for (x0, f0), (x1, f1) in zip(zip(grid, vals), zip(grid[1:], vals[1:])):
        if math.isfinite(f0) and math.isfinite(f1):
            if f0 == 0.0:
                out.append((x0, x0))
            elif f0 * f1 < 0:
                out.append((x0, x1))
    return out, vals


def _root(f, a, b):
    if a == b:
        return a
    return optimize.brentq(f, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


def _sign_pattern(vals) -> str:
    return "".join("." if not math.isfinite(v) else ("+" if v > 0 else "-") for v in vals)


def _solve_nested(inner_lo, inner_hi, outer_lo, outer_hi,
                  inner_eq: Callable[[float, float], float],
                  outer_eq: Callable[[float, float], float],
                  what: str) -> Tuple[float, float]:
    """Solve inner_eq(x, y) = 0 for y(x), then outer_eq(x, y(x)) = 0 for x.

    Multiple inner brackets are resolved in favour of the smallest outer
    residual.
    """
    ygrid = np.linspace(inner_lo, inner_hi, _SCAN_POINTS)

    def y_of(x):
        brs, vals = _brackets(lambda y: inner_eq(x, y), ygrid)
        if not brs:
            raise NoSolutionError(f"{what}: inner equation has no root at x={x!r}",
                                  _sign_pattern(vals))
        roots = [_root(lambda y: inner_eq(x, y), a, b) for a, b in brs]
        if len(roots) == 1:
            return roots[0]
        return min(roots, key=lambda y: abs(outer_eq(x, y)))

    def outer(x):
        return outer_eq(x, y_of(x))

    xgrid = np.linspace(outer_lo, outer_hi, _SCAN_POINTS)
    brs, vals = _brackets(outer, xgrid)
    if not brs:
        raise NoSolutionError(f"{what}: no sign change of the matching residual",
                              _sign_pattern(vals))
    # Prefer the bracket with the smallest |residual| at its ends.
    def score(br):
        i = int(np.searchsorted(xgrid, br[0]))
        return min(abs(vals[i]), abs(vals[min(i + 1, len(vals) - 1)]))

    a, b = min(brs, key=score)
    x = _root(outer, a, b)
    return x, y_of(x)


# ---------------------------------------------------------------------------
# Admissibility


def _f2_bound_terms(params: ModelParams) -> Tuple[float, float]:
    lr = params.lam + params.r
    p_term = params.r / (lr * (2.0 + params.a * lr))
    q_term = (params.lam + lr * (1.0 + params.b * lr)) / (lr * (2.0 + params.b * lr))
    return p_term, q_term


def _f2_hat(params: ModelParams, dc: DerivedConstants) -> Tuple[float, float]:
    """(p_hat, q_hat) solving the equality versions of the F2 generator bounds."""
    form = Formulation.F2
    lr = params.lam + params.r
    coeffs = _CoeffCache(form, params, dc)
    g11p = functools.lru_cache(maxsize=None)(lambda p: model.g_eval(dc, 1, 1, p)[1])
    g00p = functools.lru_cache(maxsize=None)(lambda q: model.g_eval(dc, 0, 0, q)[1])

    def e_lower(p, q):
        d11 = coeffs(1, q)[1]
        return (2.0 + params.a * lr) * p - params.r / lr + params.lam * d11 * g11p(p)

    def e_upper(p, q):
        d00 = coeffs(0, p)[0]
        return (2.0 + params.b * lr) * (1.0 - q) - params.r / lr - params.lam * d00 * g00p(q)

    lo, hi = _search_window(form, dc)
    try:
        return _solve_nested(0.5 + 1e-9, hi, lo, 0.5 - 1e-9,
                             e_upper, e_lower, "F2 admissibility bounds")
    except NoSolutionError:
        return 0.5, 0.5


def admissible_bounds(form, dc: Optional[DerivedConstants],
                      params: ModelParams) -> Tuple[float, float]:
    """Interior bounds (bar_lower, bar_upper) bracketing the optimal thresholds."""
    form = Formulation.parse(form)
    lam, r, a, b = params.lam, params.r, params.a, params.b
    if form is Formulation.F1:
        g_bar = (1.0 + lam * a) / (2.0 + a * (2.0 * lam + r))
        h_bar = (1.0 + b * (lam + r)) / (2.0 + b * (2.0 * lam + r))
        return g_bar, h_bar
    dc = dc or model.derive(params)
    p_hat, q_hat = _f2_hat(params, dc)
    p_term, q_term = _f2_bound_terms(params)
    return min(p_hat, p_term), max(q_hat, q_term)


@dataclass
class AdmissibilityReport:
    passed: bool
    slack_lower: float
    slack_upper: float
    bar_lower: float
    bar_upper: float
    message: str = ""


def check_admissibility(form, dc: Optional[DerivedConstants],
                        params: ModelParams) -> AdmissibilityReport:
    """Derivative conditions at the bounds that certify interior thresholds.

    ``slack_lower = a + V_1'(bar_l; bar_u) - V_0'(bar_l; bar_l)`` and
    ``slack_upper = V_1'(bar_u; bar_u) + b - V_0'(bar_u; bar_l)``; both
    must be positive.
    """
    form = Formulation.parse(form)
    dc = dc or model.derive(params)
    bl, bu = admissible_bounds(form, dc, params)
    lo, hi = _search_window(form, dc)
    if not (lo < bl < 0.5 < bu < hi):
        return AdmissibilityReport(False, math.nan, math.nan, bl, bu,
                                   "admissible rectangle is empty")
    try:
        c_low = _coeffs(form, params, dc, 0, bl)
        c_up = _coeffs(form, params, dc, 1, bu)
        d0_l = _value(form, dc, 0, bl, c_low[0])[1]
        d1_l = _value(form, dc, 1, bl, c_up[1])[1]
        d1_u = _value(form, dc, 1, bu, c_up[1])[1]
        d0_u = _value(form, dc, 0, bu, c_low[0])[1]
    except DisorderSwitchError as exc:
        return AdmissibilityReport(False, math.nan, math.nan, bl, bu, str(exc))
    s_low = params.a + d1_l - d0_l
    s_up = d1_u + params.b - d0_u
    ok = s_low > 0 and s_up > 0
    msg = "" if ok else "derivative conditions at the bounds fail"
    return AdmissibilityReport(ok, s_low, s_up, bl, bu, msg)


# ---------------------------------------------------------------------------
# Boundary solve


def _boundary_residuals(form, params, dc, lower, upper, c_lower, c_upper) -> Dict[str, float]:
    v0_l, d0_l = _value(form, dc, 0, lower, c_lower)
    v1_l, d1_l = _value(form, dc, 1, lower, c_upper)
    v0_u, d0_u = _value(form, dc, 0, upper, c_lower)
    v1_u, d1_u = _value(form, dc, 1, upper, c_upper)
    return {
        "stop_lower": v0_l - params.a * lower - v1_l,
        "fit_lower": d0_l - params.a - d1_l,
        "stop_upper": v1_u - params.b * (1.0 - upper) - v0_u,
        "fit_upper": d1_u + params.b - d0_u,
    }


def solve_boundaries(form, dc: Optional[DerivedConstants], params: ModelParams,
                     require_admissible: bool = True) -> ThresholdSolution:
    """Optimal alarm thresholds (lower, upper) and the value-function coefficients."""
    form = Formulation.parse(form)
    dc = dc or model.derive(params)
    adm = check_admissibility(form, dc, params)
    if require_admissible and not adm.passed:
        raise InadmissibleParametersError(
            f"{form.value}: parameters fail the admissibility conditions "
            f"(slacks {adm.slack_lower:.6g}, {adm.slack_upper:.6g}; {adm.message})",
            (adm.slack_lower, adm.slack_upper))
    lo, hi = _search_window(form, dc)
    bl, bu = adm.bar_lower, adm.bar_upper
    if not (lo < bl and bu < hi):
        bl, bu = 0.5, 0.5

    coeffs = _CoeffCache(form, params, dc)

    def inner(x, y):  # c0 matching
        return coeffs(0, x)[0] - coeffs(1, y)[0]

    def outer(x, y):  # c1 matching
        return coeffs(0, x)[1] - coeffs(1, y)[1]

    lower, upper = _solve_nested(bu, hi, lo, bl, inner, outer,
                                 f"{form.value} boundary system")
    c_lo = _coeffs(form, params, dc, 0, lower)
    c_up = _coeffs(form, params, dc, 1, upper)
    residuals = {"match_c0": c_lo[0] - c_up[0], "match_c1": c_lo[1] - c_up[1]}
    residuals.update(_boundary_residuals(form, params, dc, lower, upper, c_lo[0], c_up[1]))
    return ThresholdSolution(
        formulation=form, lower=lower, upper=upper,
        coeff_lower=c_lo[0], coeff_upper=c_up[1],
        bar_lower=adm.bar_lower, bar_upper=adm.bar_upper,
        residuals=residuals, admissible=adm.passed,
        slacks=(adm.slack_lower, adm.slack_upper))


# ---------------------------------------------------------------------------
# Risk functions


def _value_fn(sol: ThresholdSolution, dc, i, pi):
    coeff = sol.coeff_lower if i == 0 else sol.coeff_upper
    return _value(sol.formulation, dc, i, pi, coeff)


def _check_form(form, sol: ThresholdSolution) -> None:
    if Formulation.parse(form) is not sol.formulation:
        raise ValueError(f"solution belongs to {sol.formulation.value}, not {form}")


def bayes_risk_eval(form, sol: ThresholdSolution, params: ModelParams, i: int, pi: float,
                    dc: Optional[DerivedConstants] = None) -> Tuple[float, float]:
    """Optimal risk in phase ``i`` at belief ``pi`` and its derivative."""
    _check_form(form, sol)
    dc = dc or model.derive(params)
    pi = float(pi)
    if not 0.0 <= pi <= 1.0:
        raise ValueError("pi must lie in [0, 1]")
    if i == 0:
        if pi > sol.lower:
            return _value_fn(sol, dc, 0, pi)
        v, d = _value_fn(sol, dc, 1, pi)
        return params.a * pi + v, params.a + d
    if i == 1:
        if pi < sol.upper:
            return _value_fn(sol, dc, 1, pi)
        v, d = _value_fn(sol, dc, 0, pi)
        return params.b * (1.0 - pi) + v, d - params.b
    raise ValueError("i must be 0 or 1")


def bayes_risk(form, sol: ThresholdSolution, params: ModelParams, i: int, pi: float,
               dc: Optional[DerivedConstants] = None) -> float:
    return bayes_risk_eval(form, sol, params, i, pi, dc)[0]


def minimal_risk(form, sol: ThresholdSolution, params: ModelParams, pi: float,
                 dc: Optional[DerivedConstants] = None) -> float:
    """Smaller of the two phase risks at ``pi``."""
    dc = dc or model.derive(params)
    return min(bayes_risk(form, sol, params, 0, pi, dc),
               bayes_risk(form, sol, params, 1, pi, dc))


# ---------------------------------------------------------------------------
# Variational inequalities


def _second_derivative(form, dc, i, pi, value, deriv, inhom):
    """V'' from the ODE (generator - r) V = -inhom on a smooth piece."""
    drift = (model.GENERATOR_DRIFTS["chain"] if form is Formulation.F1
             else model.GENERATOR_DRIFTS["drop" if i == 0 else "rise"])
    diff = 0.5 * dc.rho * (pi * (1.0 - pi)) ** 2
    return (dc.r * value - inhom - drift(dc.lam, pi) * deriv) / diff


@dataclass
class VariationalReport:
    passed: bool
    min_slack: Dict[str, float]
    boundary_gaps: Dict[str, float]
    violations: List[Tuple[str, float, float]]
    grid_n: int

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "min_slack": self.min_slack,
            "boundary_gaps": self.boundary_gaps,
            "violations": [{"check": c, "pi": p, "slack": s} for c, p, s in self.violations],
            "grid_n": self.grid_n,
        }


def verify_variational(form, sol: ThresholdSolution, params: ModelParams,
                       grid_n: int = 401, dc: Optional[DerivedConstants] = None,
                       tol: float = 1e-10,
                       raise_on_failure: bool = False) -> VariationalReport:
    """Check the strict inequalities of the free-boundary problem on a grid.

    Obstacle gaps ``a pi + V_1 - V_0`` (above lower) and
    ``b (1 - pi) + V_0 - V_1`` (below upper) must be positive, and so must
    the generator slacks ``(L - r) V_0 + (1 - pi)`` below lower and
    ``(L - r) V_1 + pi`` above upper, where the value functions follow the
    obstacle.  Slacks below ``-tol`` are violations, and so are obstacle
    gaps at the thresholds themselves larger than ``FIT_TOL`` in magnitude.
    """
    _check_form(form, sol)
    form = sol.formulation
    dc = dc or model.derive(params)
    a, b = params.a, params.b
    grid = np.linspace(model.PI_MIN, model.PI_MAX, int(grid_n))
    slack = {"gap_phase0": math.inf, "gap_phase1": math.inf,
             "generator_phase0": math.inf, "generator_phase1": math.inf}
    violations = []
    which0 = "chain" if form is Formulation.F1 else "drop"
    which1 = "chain" if form is Formulation.F1 else "rise"

    def note(name, pi, s):
        slack[name] = min(slack[name], s)
        if s < -tol:
            violations.append((name, float(pi), float(s)))

    for pi in grid:
        v0, _ = bayes_risk_eval(form, sol, params, 0, pi, dc)
        v1, _ = bayes_risk_eval(form, sol, params, 1, pi, dc)
        if pi > sol.lower:
            note("gap_phase0", pi, a * pi + v1 - v0)
        if pi < sol.upper:
            note("gap_phase1", pi, b * (1.0 - pi) + v0 - v1)
        if pi < sol.lower:
            # V_0 = a pi + V_1(.; upper), V_1 smooth here with inhomogeneity pi
            w, dw = _value_fn(sol, dc, 1, pi)
            d2 = _second_derivative(form, dc, 1, pi, w, dw, pi)

            def F0(x, w=w, dw=dw, d2=d2):
                return a * x + w, a + dw, d2

            gen = model.apply_generator(form, which0, F0, pi, dc.lam, dc.rho)
            note("generator_phase0", pi, gen - dc.r * (a * pi + w) + (1.0 - pi))
        if pi > sol.upper:
            w, dw = _value_fn(sol, dc, 0, pi)
            d2 = _second_derivative(form, dc, 0, pi, w, dw, 1.0 - pi)

            def F1(x, w=w, dw=dw, d2=d2):
                return b * (1.0 - x) + w, dw - b, d2

            gen = model.apply_generator(form, which1, F1, pi, dc.lam, dc.rho)
            note("generator_phase1", pi, gen - dc.r * (b * (1.0 - pi) + w) + pi)

    gaps = {}
    for name, x in (("lower", sol.lower), ("upper", sol.upper)):
        v0 = _value_fn(sol, dc, 0, x)[0]
        v1 = _value_fn(sol, dc, 1, x)[0]
        gaps[f"phase0_at_{name}"] = a * x + v1 - v0
        gaps[f"phase1_at_{name}"] = b * (1.0 - x) + v0 - v1
    for key in ("phase0_at_lower", "phase1_at_upper"):
        if abs(gaps[key]) > FIT_TOL:
            x = sol.lower if key.endswith("lower") else sol.upper
            violations.append((f"stop_{key}", float(x), float(gaps[key])))
    report = VariationalReport(not violations, slack, gaps, violations, int(grid_n))
    if raise_on_failure and violations:
        raise VerificationError(
            f"{len(violations)} variational violations, first at pi={violations[0][1]:.6g}",
            violations)
    return report
