"""Independent reference implementations used only by the test-suite.

Nothing here calls the package's special functions: Kummer functions come
from mpmath, Heun and homogeneous solutions from direct ODE integration,
and the risk functions from a shooting solve of the free-boundary problem.
"""

from __future__ import annotations

import math

import mpmath as mp
import numpy as np
from scipy import integrate, optimize

mp.mp.dps = 50


def kummer_phi(a, b, x):
    return float(mp.hyp1f1(a, b, x))


def kummer_psi(a, b, x):
    return float(mp.hyperu(a, b, x))


def heun_dc(alpha, beta, gamma, delta, x, h0=1.0, dh0=0.0):
    """Value and derivative of the double confluent Heun solution by ODE integration."""

    def rhs(z, y):
        h, dh = y
        d2 = -((2 * z**5 - alpha * z**4 - 4 * z**3 + 2 * z + alpha) * dh
               + (beta * z**2 + (2 * alpha + gamma) * z + delta) * h) / (z**2 - 1) ** 3
        return [dh, d2]

    if x == 0.0:
        return h0, dh0
    sol = integrate.solve_ivp(rhs, (0.0, x), [h0, dh0], method="DOP853",
                              rtol=1e-13, atol=1e-15)
    return sol.y[0, -1], sol.y[1, -1]


def constants(lam, r, rho):
    kap = 2.0 * lam / rho
    s = 0.5 + lam / rho
    root = math.sqrt(s * s + 2.0 * r / rho)
    return kap, s + root, s - root


# --- value functions by shooting ------------------------------------------------

_DRIFT = {
    "f1": (lambda lam, p: lam * (1 - 2 * p), lambda lam, p: lam * (1 - 2 * p)),
    "f2": (lambda lam, p: -lam * p, lambda lam, p: lam * (1 - p)),
}


def _integrate(drift, lam, r, rho, inhom, start, stop, y0):
    def rhs(p, y):
        v, dv = y
        diff = 0.5 * rho * (p * (1 - p)) ** 2
        return [dv, (r * v - inhom(p) - drift(lam, p) * dv) / diff]

    return integrate.solve_ivp(rhs, (start, stop), y0, method="Radau", rtol=1e-12,
                               atol=1e-14, dense_output=True)


class ShootingSolution:
    """Risk functions from integrating the continuation ODEs inward from the
    singular endpoints and imposing stopping and smooth fit at both thresholds.

    Starting near an endpoint with an arbitrary slope is harmless: the
    component along the solution that is unbounded at that endpoint decays
    during inward integration.
    """

    def __init__(self, form, lam, r, mu0, mu1, sigma, a, b, guess=(0.15, 0.85), u0=1e-4,
                 reach=0.01):
        rho = ((mu1 - mu0) / sigma) ** 2
        d0, d1 = _DRIFT[form]
        self.a, self.b = a, b
        # phase 0 lives on (lower, 1]; phase 1 on [0, upper)
        zero = lambda p: 0.0
        self.p0 = _integrate(d0, lam, r, rho, lambda p: 1 - p, 1 - u0, reach, [0.0, 0.0])
        self.h0 = _integrate(d0, lam, r, rho, zero, 1 - u0, reach, [1.0, 0.0])
        self.p1 = _integrate(d1, lam, r, rho, lambda p: p, u0, 1 - reach, [0.0, 0.0])
        self.h1 = _integrate(d1, lam, r, rho, zero, u0, 1 - reach, [1.0, 0.0])

        def eqs(z):
            g, h, c0, c1 = z
            v0g, dv0g = self._v(0, g, c0)
            v1g, dv1g = self._v(1, g, c1)
            v0h, dv0h = self._v(0, h, c0)
            v1h, dv1h = self._v(1, h, c1)
            return [v0g - a * g - v1g, dv0g - a - dv1g,
                    v1h - b * (1 - h) - v0h, dv1h + b - dv0h]

        # coefficients enter linearly: solve them for the initial thresholds
        g, h = guess
        A = np.array([[self.h0.sol(g)[0], -self.h1.sol(g)[0]],
                      [self.h0.sol(g)[1], -self.h1.sol(g)[1]]])
        rhs = np.array([a * g + self.p1.sol(g)[0] - self.p0.sol(g)[0],
                        a + self.p1.sol(g)[1] - self.p0.sol(g)[1]])
        c0, c1 = np.linalg.solve(A, rhs)
        z, info, ier, msg = optimize.fsolve(eqs, [g, h, c0, c1], full_output=True,
                                            xtol=1e-13)
        if ier != 1:
            raise RuntimeError(msg)
        self.lower, self.upper, self.c0, self.c1 = z

    def _v(self, i, p, c):
        part, hom = (self.p0, self.h0) if i == 0 else (self.p1, self.h1)
        y = part.sol(p) + c * hom.sol(p)
        return y[0], y[1]

    def risk(self, i, p):
        if i == 0:
            if p > self.lower:
                return self._v(0, p, self.c0)[0]
            return self.a * p + self._v(1, p, self.c1)[0]
        if p < self.upper:
            return self._v(1, p, self.c1)[0]
        return self.b * (1 - p) + self._v(0, p, self.c0)[0]
