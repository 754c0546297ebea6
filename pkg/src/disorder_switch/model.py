"""Problem data, derived constants and the closed-form building blocks.

Conventions: phase ``i = 0`` is the problem whose next alarm signals a
change ``1 -> 0`` (stop when the posterior falls low), phase ``i = 1`` the
one whose next alarm signals ``0 -> 1``.

Homogeneous solutions
---------------------
First formulation.  With ``kappa = 2 lam / rho`` the substitution

    Q_0(pi) = sqrt(pi (1 - pi)) exp(kappa / pi) K(1 - 2 pi)

turns ``(L - r) Q = 0`` into Heun's double confluent equation for ``K`` with
parameters ``(-phi, -xi, 0, -psi)`` in the variable ``y = 1 - 2 pi``; in the
variable ``x = 1 / y`` this is the equation with ``(phi, psi, 0, xi)``.
Q_0 must stay bounded as pi -> 1, which is a condition at the irregular
singular point y = -1, not at y = 0.  We therefore take

    K = K_a + t K_b,   K_a(0) = 1, K_a'(0) = 0,   K_b(0) = 0, K_b'(0) = 1,

with the connection coefficient ``t`` fixed by the bounded branch.  That
branch is obtained from its asymptotic expansion at pi = 1 and integrated
inwards to pi = 1/2, a direction in which the unbounded solution decays.
For pi > 1/2 the same integration supplies Q_0 directly; for pi <= 1/2 the
Heun series is used.  Q_1(pi) = Q_0(1 - pi).

Second formulation.  G_00 and G_11 are the Tricomi-function solutions of
``(L_0 - r) G = 0`` and ``(L_1 - r) G = 0`` respectively; G_01 and G_10 are
the Kummer-Phi companions.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from scipy import integrate

from . import specfun
from .errors import ConvergenceError, EvaluationOverflowError
from .specfun import DEFAULT_CONTROL, SeriesControl

# All pi-grid work stays inside this window.
PI_MIN = 1e-4
PI_MAX = 1.0 - 1e-4

_LOG_MAX = 700.0


class Formulation(str, enum.Enum):
    F1 = "f1"  # telegraph regime, alarms do not affect Theta
    F2 = "f2"  # each change can only follow the previous alarm

    @classmethod
    def parse(cls, value) -> "Formulation":
        if isinstance(value, Formulation):
            return value
        return cls(str(value).strip().lower())


@dataclass(frozen=True)
class ModelParams:
    mu0: float = -1.0
    mu1: float = 1.0
    sigma: float = 1.0
    lam: float = 1.0
    r: float = 1.0
    a: float = 1.0
    b: float = 1.0
    pi0: float = 0.5

    def __post_init__(self):
        for name in ("mu0", "mu1", "sigma", "lam", "r", "a", "b", "pi0"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValueError(f"{name} must be a finite real number, got {v!r}")
            object.__setattr__(self, name, float(v))
        if self.mu0 == self.mu1:
            raise ValueError("mu0 and mu1 must differ")
        for name in ("sigma", "lam", "r", "a", "b"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.pi0 <= 1.0:
            raise ValueError("pi0 must lie in [0, 1]")

    def replace(self, **changes) -> "ModelParams":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return ModelParams(**fields)


@dataclass(frozen=True)
class DerivedConstants:
    rho: float
    phi: float
    psi: float
    xi_h: float
    gamma_plus: float
    gamma_minus: float
    lam: float
    r: float

    @property
    def kappa(self) -> float:
        """2 lam / rho, the rate of the exponential singularities."""
        return 2.0 * self.lam / self.rho

    @property
    def kummer_a(self) -> float:
        return self.gamma_plus - 1.0

    @property
    def kummer_b(self) -> float:
        return self.gamma_plus - self.gamma_minus + 1.0


def _constants(lam: float, r: float, rho: float) -> DerivedConstants:
    phi = 8.0 * lam / rho
    psi = phi * phi / 4.0 + phi - 8.0 * r / rho - 1.0
    xi_h = 4.0 * phi - psi
    half = 0.5 + lam / rho
    root = math.sqrt(half * half + 2.0 * r / rho)
    return DerivedConstants(rho=rho, phi=phi, psi=psi, xi_h=xi_h,
                            gamma_plus=half + root, gamma_minus=half - root,
                            lam=lam, r=r)


def derive(params: ModelParams) -> DerivedConstants:
    """Signal-to-noise ratio, Heun parameters and Kummer exponents.

    If the Kummer parameter ``gamma_+ - gamma_- + 1`` is within 1e-8 of an
    integer, ``lam`` is perturbed by a relative 1e-9 (with a warning) since
    Psi is only implemented for non-integer second parameter.
    """
    rho = ((params.mu1 - params.mu0) / params.sigma) ** 2
    lam = params.lam
    dc = _constants(lam, params.r, rho)
    bump = 0
    while abs(dc.kummer_b - round(dc.kummer_b)) < 1e-8:
        bump += 1
        lam = params.lam * (1.0 + bump * 1e-9)
        dc = _constants(lam, params.r, rho)
    if bump:
        warnings.warn(f"integer Kummer parameter; lambda perturbed to {lam!r}",
                      RuntimeWarning, stacklevel=2)
    return dc


def clamp_pi(pi: float) -> float:
    return min(max(float(pi), PI_MIN), PI_MAX)


# ---------------------------------------------------------------------------
# Q functions (first formulation)


def _log_prefactor(dc: DerivedConstants, pi: float) -> float:
    return 0.5 * math.log(pi * (1.0 - pi)) + dc.kappa / pi


def _dlog_prefactor(dc: DerivedConstants, pi: float) -> float:
    return (1.0 - 2.0 * pi) / (2.0 * pi * (1.0 - pi)) - dc.kappa / (pi * pi)


def _asymptotic_coefficients(dc: DerivedConstants, n: int) -> np.ndarray:
    """Formal expansion sum a_k u^k (u = 1 - pi) of the solution bounded at pi = 1."""
    lam, r, half_rho = dc.lam, dc.r, 0.5 * dc.rho
    a = np.zeros(n)
    a[0] = 1.0
    for m in range(n - 1):
        acc = (r + 2.0 * lam * m) * a[m] - half_rho * m * (m - 1) * a[m]
        if m >= 1:
            acc += half_rho * 2.0 * (m - 1) * (m - 2) * a[m - 1]
        if m >= 2:
            acc -= half_rho * (m - 2) * (m - 3) * a[m - 2]
        a[m + 1] = acc / (lam * (m + 1))
        if not abs(a[m + 1]) < 1e250:
            return a[: m + 1]
    return a


class _QBasis:
    """The solution of (L - r) Q = 0 bounded at pi = 1, in two representations."""

    def __init__(self, dc: DerivedConstants, ctl: SeriesControl):
        self.dc = dc
        self.ctl = ctl
        kappa = dc.kappa
        # small enough that the expansion reaches full precision before diverging
        self.u0 = min(0.05, kappa / 40.0, 0.25 * dc.lam / dc.r)
        self._asym = _asymptotic_coefficients(dc, 400)
        q0, dq0 = self._asymptotic(self.u0)

        def rhs(pi, y):
            diff = 0.5 * dc.rho * (pi * (1.0 - pi)) ** 2
            return [y[1], (dc.r * y[0] - dc.lam * (1.0 - 2.0 * pi) * y[1]) / diff]

        sol = integrate.solve_ivp(rhs, (1.0 - self.u0, 0.5), [q0, dq0], method="DOP853",
                                  rtol=1e-13, atol=1e-16 * (abs(q0) + abs(dq0)),
                                  dense_output=True)
        if not sol.success:
            raise ConvergenceError(f"bounded Q branch integration failed: {sol.message}")
        self._dense = sol.sol
        q_half, dq_half = sol.y[0, -1], sol.y[1, -1]
        # Convert to Heun normalisation K(0) = 1 at pi = 1/2.
        log_pref = _log_prefactor(dc, 0.5)
        k_half = q_half / math.exp(log_pref)
        dk_dpi = (dq_half - q_half * _dlog_prefactor(dc, 0.5)) / math.exp(log_pref)
        self.scale = 1.0 / k_half
        self.connection = float(-0.5 * dk_dpi / k_half)
        self.heun_params = (-dc.phi, -dc.xi_h, 0.0, -dc.psi)

    def _asymptotic(self, u: float) -> Tuple[float, float]:
        a = self._asym
        k = np.arange(a.size)
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            terms = a * u ** k
        # optimal truncation of the divergent expansion: stop at the smallest term
        size = np.abs(terms[1:])
        size[~np.isfinite(size)] = np.inf
        stop = int(np.argmin(size)) + 2
        val = math.fsum(terms[:stop])
        der = math.fsum((k[1:stop] * a[1:stop] * u ** (k[1:stop] - 1)).tolist())
        return val, -der

    def bounded_branch(self, pi: float) -> Tuple[float, float, str]:
        """Q_0 and Q_0' for pi >= 1/2."""
        u = 1.0 - pi
        if u <= self.u0:
            q, dq = self._asymptotic(u)
            method = "asymptotic"
        else:
            q, dq = self._dense(pi)
            method = "ode"
        return float(self.scale * q), float(self.scale * dq), method

    def heun_branch(self, pi: float) -> Tuple[float, float, str]:
        """Q_0 and Q_0' for pi <= 1/2 from the Heun series."""
        log_pref = _log_prefactor(self.dc, pi)
        if log_pref > _LOG_MAX:
            raise EvaluationOverflowError(f"Q_0 overflows at pi={pi!r}")
        y = 1.0 - 2.0 * pi
        hv = specfun.heun_dc_eval(*self.heun_params, y, self.ctl,
                                  h0=1.0, dh0=self.connection)
        pref = math.exp(log_pref)
        q = pref * hv.value
        dq = pref * (_dlog_prefactor(self.dc, pi) * hv.value - 2.0 * hv.deriv)
        return float(q), float(dq), "heun-" + hv.method


@lru_cache(maxsize=64)
def _q_basis(dc: DerivedConstants, ctl: SeriesControl) -> _QBasis:
    return _QBasis(dc, ctl)


def q_eval(dc: DerivedConstants, i: int, pi: float,
           ctl: SeriesControl = DEFAULT_CONTROL) -> Tuple[float, float, str]:
    """(Q_i(pi), Q_i'(pi), evaluation path)."""
    if i not in (0, 1):
        raise ValueError("i must be 0 or 1")
    pi = float(pi)
    arg = pi if i == 0 else 1.0 - pi
    # Q_0 extends continuously to pi = 1 (Q_1 to pi = 0).
    if not 0.0 < arg <= 1.0:
        raise ValueError(f"Q_{i} is singular at pi={pi!r}")
    basis = _q_basis(dc, ctl)
    if arg >= 0.5:
        q, dq, method = basis.bounded_branch(arg)
    else:
        q, dq, method = basis.heun_branch(arg)
    return q, (dq if i == 0 else -dq), method


def q_fn(dc: DerivedConstants, i: int, pi: float, ctl: SeriesControl = DEFAULT_CONTROL) -> float:
    """Q_0 (decreasing, singular at 0) or Q_1 (increasing, singular at 1)."""
    return q_eval(dc, i, pi, ctl)[0]


def q_fn_deriv(dc: DerivedConstants, i: int, pi: float,
               ctl: SeriesControl = DEFAULT_CONTROL) -> float:
    return q_eval(dc, i, pi, ctl)[1]


def q_connection(dc: DerivedConstants, ctl: SeriesControl = DEFAULT_CONTROL) -> float:
    """H'(0) of the Heun solution that makes Q_0 bounded at pi = 1."""
    return _q_basis(dc, ctl).connection


# ---------------------------------------------------------------------------
# G functions (second formulation)


def _g_left(dc: DerivedConstants, kind: str, pi: float,
            ctl: SeriesControl) -> Tuple[float, float]:
    """(1 - pi) z^g+ F(A, B; kappa z) and its pi-derivative, z = pi / (1 - pi)."""
    if not 0.0 < pi <= 1.0:
        raise ValueError(f"G is singular at pi={pi!r}")
    gp = dc.gamma_plus
    A, B = dc.kummer_a, dc.kummer_b
    if pi == 1.0:
        if kind != "psi":
            raise EvaluationOverflowError("G_01 is unbounded at pi = 1")
        # Psi(A, B; X) ~ X^-A (1 - A (A - B + 1) / X) as X -> infinity
        c = A * (A - B + 1.0)
        lead = dc.kappa ** (-A)
        return lead, lead * (1.0 + c / dc.kappa)
    z = pi / (1.0 - pi)
    arg = dc.kappa * z
    if kind == "psi":
        f = specfun.kummer_psi(A, B, arg, ctl)
        df = specfun.kummer_psi_deriv(A, B, arg, ctl)
    else:
        f = specfun.kummer_phi(A, B, arg, ctl)
        df = specfun.kummer_phi_deriv(A, B, arg, ctl)
    log_zg = gp * math.log(z)
    if log_zg > _LOG_MAX:
        raise EvaluationOverflowError(f"G overflows at pi={pi!r}")
    zg = math.exp(log_zg)
    val = (1.0 - pi) * zg * f
    der = zg * (gp / pi - 1.0) * f + zg * df * dc.kappa / (1.0 - pi)
    if not (math.isfinite(val) and math.isfinite(der)):
        raise EvaluationOverflowError(f"G overflows at pi={pi!r}")
    return val, der


def g_eval(dc: DerivedConstants, i: int, j: int, pi: float,
           ctl: SeriesControl = DEFAULT_CONTROL) -> Tuple[float, float]:
    """(G_ij(pi), G_ij'(pi)).

    G_00 (Psi) and G_01 (Phi) are written in pi / (1 - pi); G_11 and G_10 are
    the same expressions under pi -> 1 - pi.
    """
    if i not in (0, 1) or j not in (0, 1):
        raise ValueError("i, j must be 0 or 1")
    kind = "psi" if i == j else "phi"
    if i == 0:
        return _g_left(dc, kind, float(pi), ctl)
    val, der = _g_left(dc, kind, 1.0 - float(pi), ctl)
    return val, -der


def g_fn(dc, i, j, pi, ctl=DEFAULT_CONTROL) -> float:
    return g_eval(dc, i, j, pi, ctl)[0]


def g_fn_deriv(dc, i, j, pi, ctl=DEFAULT_CONTROL) -> float:
    return g_eval(dc, i, j, pi, ctl)[1]


# ---------------------------------------------------------------------------
# Affine pieces and candidate value functions


def r_fn(params: ModelParams, i: int, pi: float) -> float:
    """Right-hand sides of the F1 boundary equations."""
    common = (1.0 - 2.0 * pi) / (2.0 * params.lam + params.r)
    return (-params.a * pi if i == 0 else params.b * (1.0 - pi)) + common


def r_fn_deriv(params: ModelParams, i: int, pi: float) -> float:
    common = -2.0 / (2.0 * params.lam + params.r)
    return (-params.a if i == 0 else -params.b) + common


def s_fn(params: ModelParams, i: int, pi: float) -> float:
    """Right-hand sides of the F2 boundary equations."""
    common = (1.0 - 2.0 * pi) / (params.lam + params.r)
    return (-params.a * pi if i == 0 else params.b * (1.0 - pi)) + common


def s_fn_deriv(params: ModelParams, i: int, pi: float) -> float:
    common = -2.0 / (params.lam + params.r)
    return (-params.a if i == 0 else -params.b) + common


def _particular(lam: float, r: float, denom: float, i: int, pi: float) -> Tuple[float, float]:
    # (lam + r(1 - pi)) / (r * denom) for i = 0, (lam + r pi) / (r * denom) for i = 1
    if i == 0:
        return (lam + r * (1.0 - pi)) / (r * denom), -1.0 / denom
    return (lam + r * pi) / (r * denom), 1.0 / denom


def value_v_eval(dc: DerivedConstants, i: int, pi: float, coeff: float,
                 ctl: SeriesControl = DEFAULT_CONTROL) -> Tuple[float, float]:
    """V_i(pi) = coeff Q_i(pi) + particular solution, and its derivative."""
    p, dp = _particular(dc.lam, dc.r, 2.0 * dc.lam + dc.r, i, pi)
    if coeff == 0.0:
        return p, dp
    q, dq, _ = q_eval(dc, i, pi, ctl)
    return coeff * q + p, coeff * dq + dp


def value_v(dc, i, pi, coeff, ctl=DEFAULT_CONTROL) -> float:
    return value_v_eval(dc, i, pi, coeff, ctl)[0]


def value_u_eval(dc: DerivedConstants, i: int, pi: float, coeff: float,
                 ctl: SeriesControl = DEFAULT_CONTROL) -> Tuple[float, float]:
    """U_i(pi) = coeff G_ii(pi) + particular solution, and its derivative."""
    p, dp = _particular(dc.lam, dc.r, dc.lam + dc.r, i, pi)
    if coeff == 0.0:
        return p, dp
    g, dg = g_eval(dc, i, i, pi, ctl)
    return coeff * g + p, coeff * dg + dp


def value_u(dc, i, pi, coeff, ctl=DEFAULT_CONTROL) -> float:
    return value_u_eval(dc, i, pi, coeff, ctl)[0]


# ---------------------------------------------------------------------------
# Generators

GENERATOR_DRIFTS = {
    "chain": lambda lam, pi: lam * (1.0 - 2.0 * pi),
    "drop": lambda lam, pi: -lam * pi,
    "rise": lambda lam, pi: lam * (1.0 - pi),
}


def apply_generator(form: Formulation, which: str,
                    F: Callable[[float], Tuple[float, float, float]],
                    pi: float, lam: float, rho: float) -> float:
    """Apply the infinitesimal generator of the posterior process to ``F``.

    ``F(pi)`` returns ``(value, first derivative, second derivative)``.
    ``which`` is ``"chain"`` for the telegraph filter (first formulation) or
    ``"drop"`` / ``"rise"`` for the two filter branches of the second.
    """
    form = Formulation.parse(form)
    allowed = ("chain",) if form is Formulation.F1 else ("drop", "rise")
    if which not in allowed:
        raise ValueError(f"generator {which!r} does not belong to {form.value}")
    _, d1, d2 = F(pi)
    return GENERATOR_DRIFTS[which](lam, pi) * d1 + 0.5 * rho * (pi * (1.0 - pi)) ** 2 * d2
