"""Special functions: Gamma, Kummer's Phi/Psi and Heun's double confluent H.

Everything here is a pure function of its arguments.  Series evaluations
share one truncation policy (:class:`SeriesControl`): a partial sum is
accepted once three consecutive terms are below ``rel_tol`` relative to the
running sum, which guards against false stops on alternating series.

Heun's double confluent equation, after clearing the denominator
``(x - 1)^3 (x + 1)^3``, reads::

    (x^6 - 3x^4 + 3x^2 - 1) H'' + (2x^5 - a x^4 - 4x^3 + 2x + a) H'
        + (b x^2 + (2a + c) x + d) H = 0

and the power series ``H = sum c_k x^k`` obeys the seven-term recurrence::

    (n+2)(n+1) c_{n+2} = (n-4)(n-3) c_{n-4} - a (n-3) c_{n-3}
                         - ((n-2)(3n-5) - b) c_{n-2} + (2a + c) c_{n-1}
                         + (n(3n-1) + d) c_n + a (n+1) c_{n+1}

with ``c_0 = H(0)`` and ``c_1 = H'(0)``.  The series converges for |x| < 1.
For |x| > 1 the map x -> 1/x carries the equation with parameters
(a, b, c, d) into the one with (-a, -d, -c, -b), so the value there is the
series of the swapped equation at 1/x.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import (
    ConvergenceError,
    DegenerateParameterError,
    PoleError,
    SingularArgumentError,
)

__all__ = [
    "SeriesControl",
    "DEFAULT_CONTROL",
    "HeunValue",
    "gamma_fn",
    "kummer_phi",
    "kummer_phi_deriv",
    "kummer_psi",
    "kummer_psi_deriv",
    "heun_dc",
    "heun_dc_deriv",
    "heun_dc_eval",
]

# Stopping rule needs this many consecutive small terms.
_SMALL_RUN = 3
# Above this argument Psi comes from its Laplace integral; the difference
# formula cancels catastrophically (roughly e^x / x^alpha lost digits).
_PSI_INTEGRAL_FROM = 1.0
# Heun series is not trusted this close to the singular points +-1.
_HEUN_SINGULAR_BAND = 1e-3
# A series whose largest term exceeds the sum by this factor has lost too
# many digits to cancellation; the ODE is integrated instead.
_HEUN_CANCELLATION = 1e4


@dataclass(frozen=True)
class SeriesControl:
    """Truncation policy for the infinite series."""

    rel_tol: float = 1e-12
    max_terms: int = 10_000

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if int(self.max_terms) != self.max_terms or self.max_terms < 16:
            raise ValueError("max_terms must be an integer >= 16")


DEFAULT_CONTROL = SeriesControl()


def gamma_fn(x: float) -> float:
    """Euler's Gamma function for real ``x``; raises :class:`PoleError` at poles."""
    x = float(x)
    if x <= 0 and abs(x - round(x)) < 1e-12:
        raise PoleError(f"Gamma has a pole at {x!r}")
    # libm tgamma is accurate to a few ulp on [-50, 50].
    return math.gamma(x)


def _rgamma(x: float) -> float:
    """1/Gamma(x), zero at the poles."""
    if x <= 0 and abs(x - round(x)) < 1e-12:
        return 0.0
    return 1.0 / math.gamma(x)


# ---------------------------------------------------------------------------
# Kummer functions


def kummer_phi(alpha: float, beta: float, x: float,
               ctl: SeriesControl = DEFAULT_CONTROL) -> float:
    """Confluent hypergeometric function of the first kind, 1F1(alpha; beta; x)."""
    if beta <= 0 and abs(beta - round(beta)) < 1e-12:
        raise PoleError(f"beta={beta!r} is a non-positive integer")
    if x == 0.0:
        return 1.0
    total = 1.0
    term = 1.0
    small = 0
    for k in range(ctl.max_terms):
        term *= (alpha + k) / (beta + k) * x / (k + 1)
        total += term
        if term == 0.0:
            # alpha is a non-positive integer: the series is a polynomial
            return total
        if abs(term) <= ctl.rel_tol * abs(total):
            small += 1
            if small >= _SMALL_RUN:
                return total
        else:
            small = 0
    raise ConvergenceError(
        f"Phi({alpha}, {beta}; {x}) did not converge in {ctl.max_terms} terms")


def kummer_phi_deriv(alpha: float, beta: float, x: float,
                     ctl: SeriesControl = DEFAULT_CONTROL) -> float:
    """d/dx Phi(alpha, beta; x) = (alpha / beta) Phi(alpha + 1, beta + 1; x)."""
    if alpha == 0.0:
        return 0.0
    return alpha / beta * kummer_phi(alpha + 1.0, beta + 1.0, x, ctl)


def _check_beta_for_psi(beta: float) -> None:
    if abs(beta - round(beta)) < 1e-8:
        raise DegenerateParameterError(
            f"Psi needs non-integer beta, got {beta!r}; perturb the inputs")


def _psi_series(alpha, beta, x, ctl):
    # Difference of two Phi series; exact representation for non-integer beta.
    first = kummer_phi(alpha, beta, x, ctl) * _rgamma(1.0 + alpha - beta) * _rgamma(beta)
    second = (x ** (1.0 - beta)
              * kummer_phi(1.0 + alpha - beta, 2.0 - beta, x, ctl)
              * _rgamma(alpha) * _rgamma(2.0 - beta))
    return math.pi / math.sin(math.pi * beta) * (first - second)


def _psi_integral(alpha, beta, x):
    # Psi = x^-alpha / Gamma(alpha) * int_0^inf e^-s s^(alpha-1) (1 + s/x)^(beta-alpha-1) ds
    c = beta - alpha - 1.0

    def smooth(s):
        return math.exp(-s) * (1.0 + s / x) ** c

    head, _ = integrate.quad(smooth, 0.0, 1.0, weight="alg", wvar=(alpha - 1.0, 0.0),
                             epsabs=0.0, epsrel=1e-13, limit=200)
    tail, _ = integrate.quad(lambda s: smooth(s) * s ** (alpha - 1.0), 1.0, np.inf,
                             epsabs=0.0, epsrel=1e-13, limit=200)
    log_scale = -alpha * math.log(x) - math.lgamma(alpha)
    return math.exp(log_scale) * (head + tail)


def kummer_psi(alpha: float, beta: float, x: float,
               ctl: SeriesControl = DEFAULT_CONTROL) -> float:
    """Confluent hypergeometric function of the second kind (Tricomi U).

    Built from two ``kummer_phi`` series for small ``x``.  For ``x > 1`` and
    ``alpha > 0`` the equivalent Laplace integral is used instead, because the
    two series cancel to within ``e^x`` of each other there.
    """
    if not x > 0:
        raise ValueError("Psi is evaluated for x > 0 only")
    _check_beta_for_psi(beta)
    if alpha == 0.0:
        return 1.0
    if x > _PSI_INTEGRAL_FROM and alpha > 0:
        return _psi_integral(alpha, beta, x)
    return _psi_series(alpha, beta, x, ctl)


def kummer_psi_deriv(alpha: float, beta: float, x: float,
                     ctl: SeriesControl = DEFAULT_CONTROL) -> float:
    """d/dx Psi(alpha, beta; x) = -alpha Psi(alpha + 1, beta + 1; x)."""
    if alpha == 0.0:
        return 0.0
    return -alpha * kummer_psi(alpha + 1.0, beta + 1.0, x, ctl)


# ---------------------------------------------------------------------------
# Heun double confluent function


@dataclass(frozen=True)
class HeunValue:
    """Value and derivative of H at one point, with the evaluation path taken."""

    value: float
    deriv: float
    method: str  # "series", "series-inverted", "ode" or "ode-inverted"
    n_terms: int


class _HeunCoefficients:
    """Lazily extended Taylor coefficients of one Heun solution around 0."""

    _CHUNK = 256

    def __init__(self, a, b, c, d, h0, dh0):
        self.params = (a, b, c, d)
        self._coef = [float(h0), float(dh0)]
        self._lock = threading.Lock()
        self._array = np.array(self._coef)

    def upto(self, n: int) -> np.ndarray:
        if len(self._coef) >= n:
            return self._array[:n]
        with self._lock:
            a, b, c, d = self.params
            cf = self._coef
            target = max(n, len(cf) + self._CHUNK)
            while len(cf) < target:
                m = len(cf) - 2  # computing c_{m+2}
                acc = (m * (3 * m - 1) + d) * cf[m] + a * (m + 1) * cf[m + 1]
                if m >= 1:
                    acc += (2 * a + c) * cf[m - 1]
                if m >= 2:
                    acc -= ((m - 2) * (3 * m - 5) - b) * cf[m - 2]
                if m >= 3:
                    acc -= a * (m - 3) * cf[m - 3]
                if m >= 4:
                    acc += (m - 4) * (m - 3) * cf[m - 4]
                cf.append(acc / ((m + 2) * (m + 1)))
            self._array = np.array(cf)
        return self._array[:n]


@lru_cache(maxsize=128)
def _heun_coefficients(a, b, c, d, h0, dh0):
    return _HeunCoefficients(a, b, c, d, h0, dh0)


def _heun_series(a, b, c, d, h0, dh0, x, ctl):
    """Sum the Taylor series at |x| < 1.

    Returns (value, deriv, n_terms), or None when the budget runs out or the
    sum cancels badly.
    """
    coeffs = _heun_coefficients(a, b, c, d, h0, dh0)
    if x == 0.0:
        return float(h0), float(dh0), 1
    n_total = ctl.max_terms + 1
    start = 0
    block = 64
    val = 0.0
    der = 0.0
    small = 0
    peak = 0.0
    dpeak = 0.0
    while start < n_total:
        stop = min(n_total, start + block)
        cf = coeffs.upto(stop)[start:stop]
        k = np.arange(start, stop, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            terms = cf * x ** k
            dterms = k * cf * (x ** np.maximum(k - 1.0, 0.0))
        if not (np.all(np.isfinite(terms)) and np.all(np.isfinite(dterms))):
            return None
        peak = max(peak, float(np.max(np.abs(terms))))
        dpeak = max(dpeak, float(np.max(np.abs(dterms))))
        for j in range(stop - start):
            val += terms[j]
            der += dterms[j]
            if (abs(terms[j]) <= ctl.rel_tol * abs(val)
                    and abs(dterms[j]) <= ctl.rel_tol * max(abs(der), abs(val))):
                small += 1
                if small >= _SMALL_RUN:
                    if (peak > _HEUN_CANCELLATION * abs(val)
                            or dpeak > _HEUN_CANCELLATION * max(abs(der), abs(val))):
                        return None
                    return val, der, start + j + 1
            else:
                small = 0
        start = stop
        block = min(4 * block, 4096)
    return None


def _heun_rhs(a, b, c, d):
    def rhs(x, y):
        den = (x * x - 1.0) ** 3
        p = 2 * x**5 - a * x**4 - 4 * x**3 + 2 * x + a
        q = b * x * x + (2 * a + c) * x + d
        return [y[1], -(p * y[1] + q * y[0]) / den]
    return rhs


def _heun_ode(a, b, c, d, h0, dh0, x):
    sol = integrate.solve_ivp(_heun_rhs(a, b, c, d), (0.0, x), [h0, dh0],
                              method="DOP853", rtol=1e-13, atol=1e-15)
    if not sol.success:
        raise ConvergenceError(f"Heun ODE integration failed: {sol.message}")
    return float(sol.y[0, -1]), float(sol.y[1, -1])


def _heun_inner(a, b, c, d, h0, dh0, x, ctl):
    """Evaluate at |x| < 1: series first, ODE integration as fallback."""
    res = _heun_series(a, b, c, d, h0, dh0, x, ctl)
    if res is not None:
        return res[0], res[1], "series", res[2]
    if abs(x) > 1.0 - _HEUN_SINGULAR_BAND:
        raise ConvergenceError(
            f"Heun series did not converge at x={x!r} within {ctl.max_terms} terms")
    v, dv = _heun_ode(a, b, c, d, h0, dh0, x)
    return v, dv, "ode", ctl.max_terms


def heun_dc_eval(alpha: float, beta: float, gamma: float, delta: float, x: float,
                 ctl: SeriesControl = DEFAULT_CONTROL, *,
                 h0: float = 1.0, dh0: float = 0.0) -> HeunValue:
    """Evaluate H(alpha, beta, gamma, delta; x) and dH/dx with diagnostics.

    ``h0`` and ``dh0`` are the initial data at 0 (default H(0)=1, H'(0)=0).
    For |x| > 1 the inversion x -> 1/x is applied once, so the initial data
    then refer to the point at infinity of the original equation.
    """
    x = float(x)
    if abs(x) == 1.0:
        raise SingularArgumentError("x = +-1 is a singular point of the Heun equation")
    if abs(x) < 1.0:
        v, dv, method, n = _heun_inner(alpha, beta, gamma, delta, h0, dh0, x, ctl)
        return HeunValue(v, dv, method, n)
    y = 1.0 / x
    v, dv, method, n = _heun_inner(-alpha, -delta, -gamma, -beta, h0, dh0, y, ctl)
    return HeunValue(v, -dv * y * y, method + "-inverted", n)


def heun_dc(alpha, beta, gamma, delta, x, ctl=DEFAULT_CONTROL, *, h0=1.0, dh0=0.0):
    """Heun's double confluent function normalised by H(0)=1, H'(0)=0."""
    return heun_dc_eval(alpha, beta, gamma, delta, x, ctl, h0=h0, dh0=dh0).value


def heun_dc_deriv(alpha, beta, gamma, delta, x, ctl=DEFAULT_CONTROL, *, h0=1.0, dh0=0.0):
    """dH/dx; on |x| > 1 via the chain rule through x -> 1/x."""
    return heun_dc_eval(alpha, beta, gamma, delta, x, ctl, h0=h0, dh0=dh0).deriv
