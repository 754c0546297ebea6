"""Monte Carlo simulation of the regime, observations, filter and alarm procedure.

Randomness is counter based: every path owns Philox substreams keyed by
``(seed, path_index, stream)``, so a path's trajectory does not depend on
how paths are grouped or on the number of worker threads.  Paths are
processed in fixed blocks of ``BLOCK`` with vectorised Euler-Maruyama steps
and the per-path results are reduced in path order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import Formulation, ModelParams

EPS = 1e-9
BLOCK = 256

STREAM_NOISE = 0
STREAM_REGIME = 1

UP = "0->1"
DOWN = "1->0"


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    horizon: float = 10.0
    n_paths: int = 1000
    seed: int = 0
    series_cutoff: int = 200

    def __post_init__(self):
        for name in ("dt", "horizon"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite")
            object.__setattr__(self, name, v)
        if self.dt > self.horizon:
            raise ValueError("dt must not exceed horizon")
        for name in ("n_paths", "series_cutoff"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer")
            object.__setattr__(self, name, int(v))
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.horizon / self.dt - 1e-9))

    def replace(self, **changes) -> "SimConfig":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return SimConfig(**d)


@dataclass
class PathRecord:
    times: np.ndarray
    theta: np.ndarray
    x: np.ndarray
    pi_filter: np.ndarray
    phase: np.ndarray
    alarms: List[Tuple[float, str]] = field(default_factory=list)
    disorder_times: List[float] = field(default_factory=list)
    clamp_count: int = 0


@dataclass(frozen=True)
class RiskEstimate:
    mean: float
    stderr: float
    n_paths: int
    truncation_bound: float
    clamp_fraction: float = 0.0


def truncation_bound(r: float, horizon: float) -> float:
    return math.exp(-r * horizon) / r


def horizon_for(value: float, r: float, fraction: float = 0.005) -> float:
    """Smallest horizon T with exp(-r T) / r <= fraction * value."""
    return max(math.log(1.0 / (fraction * value * r)) / r, 0.0)


def worker_count(threads: Optional[int] = None) -> int:
    if threads is None:
        env = os.environ.get("DISORDER_SWITCH_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def rng_stream(seed: int, path_index: int, stream: int = STREAM_NOISE) -> np.random.Generator:
    """Independent generator for one (seed, path, purpose) triple."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(path_index), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Regime


def simulate_theta_f1(cfg: SimConfig, params: ModelParams, rng: np.random.Generator,
                      pi0: Optional[float] = None):
    """Telegraph signal on the time grid.

    Returns ``(times, theta, switch_times)``.  The initial state is 1 with
    probability ``pi0`` and holding times are exponential with rate lambda.
    """
    pi0 = params.pi0 if pi0 is None else pi0
    n = cfg.n_steps
    times = np.arange(n + 1) * cfg.dt
    theta0 = int(rng.random() < pi0)
    switches = _telegraph_switches(rng, params.lam, times[-1])
    count = np.searchsorted(switches, times, side="right")
    theta = (theta0 + count) % 2
    return times, theta.astype(np.int8), switches


def _telegraph_switches(rng, lam, end):
    out = []
    t = 0.0
    chunk = max(8, int(2 * lam * end) + 8)
    while True:
        gaps = rng.exponential(1.0 / lam, chunk) if lam > 0 else np.full(chunk, np.inf)
        cum = t + np.cumsum(gaps)
        out.append(cum[cum <= end])
        if cum[-1] > end:
            break
        t = cum[-1]
    return np.concatenate(out)


def _f2_immediate_prob(pi_alarm, branch):
    # rise: waiting for 0 -> 1, already there with probability pi
    return np.where(np.asarray(branch) == 1, pi_alarm, 1.0 - pi_alarm)


def _f2_delay(u, e, pi_alarm, branch, lam):
    prob = _f2_immediate_prob(pi_alarm, branch)
    with np.errstate(divide="ignore"):
        return np.where(u < prob, 0.0, e / lam)


def simulate_theta_f2(pi_alarm: float, params: ModelParams, rng: np.random.Generator,
                      branch: str = "rise") -> float:
    """Delay from an alarm to the next disorder.

    ``branch`` names the filter branch that starts at the alarm: on the
    rise branch the regime is already 1 with probability ``pi_alarm``, on
    the drop branch it is already 0 with probability ``1 - pi_alarm``.
    Otherwise the delay is exponential with rate lambda.
    """
    if branch not in ("rise", "drop"):
        raise ValueError("branch must be 'rise' or 'drop'")
    u, e = rng.random(), rng.standard_exponential()
    return float(_f2_delay(u, e, pi_alarm, 1 if branch == "rise" else 0, params.lam))


# ---------------------------------------------------------------------------
# Observation and filter


def simulate_observation(theta: np.ndarray, params: ModelParams, cfg: SimConfig,
                         rng: np.random.Generator) -> np.ndarray:
    """Increments over each grid step, drift taken at the step's left end."""
    theta = np.asarray(theta)[:-1]
    noise = rng.standard_normal(theta.shape[-1])
    return _increments(theta, noise, params, cfg.dt)


def _increments(theta, noise, params, dt):
    drift = params.mu0 + (params.mu1 - params.mu0) * theta
    return drift * dt + params.sigma * math.sqrt(dt) * noise


def _euler(pi, dx, drift, params, dt):
    dmu = params.mu1 - params.mu0
    innov = (dx - (params.mu0 + dmu * pi) * dt) / params.sigma
    return pi + drift * dt + (dmu / params.sigma) * pi * (1.0 - pi) * innov


def filter_step_f1(pi_prev, dx, params: ModelParams, cfg: SimConfig):
    drift = params.lam * (1.0 - 2.0 * np.asarray(pi_prev))
    return np.clip(_euler(pi_prev, dx, drift, params, cfg.dt), EPS, 1.0 - EPS)


def filter_step_f2(branch: str, pi_prev, dx, params: ModelParams, cfg: SimConfig):
    pi_prev = np.asarray(pi_prev)
    if branch == "drop":
        drift = -params.lam * pi_prev
    elif branch == "rise":
        drift = params.lam * (1.0 - pi_prev)
    else:
        raise ValueError("branch must be 'drop' or 'rise'")
    return np.clip(_euler(pi_prev, dx, drift, params, cfg.dt), EPS, 1.0 - EPS)


# ---------------------------------------------------------------------------
# Vectorised engine


@dataclass
class _BlockResult:
    risk: np.ndarray
    clamps: int
    steps: int
    first_alarm: np.ndarray
    samples: Optional[np.ndarray] = None
    lhs: Optional[np.ndarray] = None
    rhs: Optional[np.ndarray] = None
    completed: Optional[np.ndarray] = None
    records: Optional[List[PathRecord]] = None


def _simulate_block(form: Formulation, lower: float, upper: float, params: ModelParams,
                    cfg: SimConfig, phase0: int, pi0: float, paths: Sequence[int],
                    record: bool = False, sample_steps: Sequence[int] = (),
                    track_cycles: int = 0) -> _BlockResult:
    n = len(paths)
    steps = cfg.n_steps
    dt, lam, r = cfg.dt, params.lam, params.r
    f2 = form is Formulation.F2
    cutoff = cfg.series_cutoff

    noise = np.empty((n, steps))
    theta_grid = None
    if f2:
        unif = np.empty((n, cutoff + 1))
        expo = np.empty((n, cutoff + 1))
    else:
        theta_grid = np.empty((n, steps + 1), dtype=np.int8)
    switch_lists = []
    times = np.arange(steps + 1) * dt
    for j, p in enumerate(paths):
        noise[j] = rng_stream(cfg.seed, p, STREAM_NOISE).standard_normal(steps)
        reg = rng_stream(cfg.seed, p, STREAM_REGIME)
        if f2:
            unif[j] = reg.random(cutoff + 1)
            expo[j] = reg.standard_exponential(cutoff + 1)
        else:
            _, theta_grid[j], sw = simulate_theta_f1(cfg, params, reg, pi0)
            switch_lists.append(sw)

    pi = np.full(n, float(pi0))
    phase = np.full(n, int(phase0), dtype=np.int8)
    cycles = np.zeros(n, dtype=np.int64)
    risk = np.zeros(n)
    first_alarm = np.full(n, np.inf)
    clamps = 0
    rows = np.arange(n)
    eta = None
    eta_hist = zeta_hist = lhs = None
    if f2:
        eta = _f2_delay(unif[:, 0], expo[:, 0], pi, phase, lam)
        if track_cycles:
            eta_hist = np.full((n, track_cycles), np.inf)
            zeta_hist = np.full((n, track_cycles), np.nan)
            lhs = np.zeros((n, track_cycles))
            eta_hist[:, 0] = eta
    samples = np.empty((n, len(sample_steps))) if len(sample_steps) else None
    sample_pos = {int(k): c for c, k in enumerate(sample_steps)}
    step_w = (1.0 - math.exp(-r * dt)) / r
    sqdt_sig = params.sigma * math.sqrt(dt)
    dmu = params.mu1 - params.mu0

    if record:
        rec_theta = np.empty((n, steps + 1), dtype=np.int8)
        rec_x = np.zeros((n, steps + 1))
        rec_pi = np.empty((n, steps + 1))
        rec_phase = np.empty((n, steps + 1), dtype=np.int8)
        alarms = [[] for _ in range(n)]
        etas = [[float(e)] for e in eta] if f2 else None

    for k in range(steps + 1):
        t = k * dt
        disc = math.exp(-r * t)
        active = cycles < cutoff
        hit = active & np.where(phase == 0, pi <= lower, pi >= upper)
        if hit.any():
            cost = np.where(phase == 0, params.a * pi, params.b * (1.0 - pi))
            risk += np.where(hit, disc * cost, 0.0)
            idx = rows[hit]
            first_alarm[idx] = np.minimum(first_alarm[idx], t)
            if record:
                for j in idx:
                    alarms[j].append((t, UP if phase[j] == 1 else DOWN))
            phase[idx] = 1 - phase[idx]
            if f2 and track_cycles:
                c = cycles[idx]
                m = c < track_cycles
                zeta_hist[idx[m], c[m]] = t
            cycles[idx] += 1
            if f2:
                c = np.minimum(cycles[idx], cutoff)
                new_eta = t + _f2_delay(unif[idx, c], expo[idx, c], pi[idx], phase[idx], lam)
                eta[idx] = new_eta
                if track_cycles:
                    m = cycles[idx] < track_cycles
                    eta_hist[idx[m], cycles[idx][m]] = new_eta[m]
                if record:
                    for j, e in zip(idx, new_eta):
                        etas[j].append(float(e))
        if f2:
            theta = np.where(phase == 1, t >= eta, t < eta).astype(np.int8)
        else:
            theta = theta_grid[:, k]
        if k in sample_pos:
            samples[:, sample_pos[k]] = pi
        if record:
            rec_theta[:, k] = theta
            rec_pi[:, k] = pi
            rec_phase[:, k] = phase
        if k == steps:
            break
        active = cycles < cutoff
        integrand = np.where(phase == 0, 1.0 - pi, pi)
        risk += np.where(active, disc * step_w * integrand, 0.0)
        if f2 and track_cycles:
            c = np.minimum(cycles, track_cycles - 1)
            on = (cycles < track_cycles) & (theta == phase)
            lhs[rows[on], c[on]] += disc * step_w
        dx = (params.mu0 + dmu * theta) * dt + sqdt_sig * noise[:, k]
        if f2:
            drift = np.where(phase == 0, -lam * pi, lam * (1.0 - pi))
        else:
            drift = lam * (1.0 - 2.0 * pi)
        raw = _euler(pi, dx, drift, params, dt)
        out = (raw < EPS) | (raw > 1.0 - EPS)
        clamps += int(out.sum())
        pi = np.clip(raw, EPS, 1.0 - EPS)
        if record:
            rec_x[:, k + 1] = rec_x[:, k] + dx

    res = _BlockResult(risk=risk, clamps=clamps, steps=n * steps, first_alarm=first_alarm,
                       samples=samples)
    if f2 and track_cycles:
        end = steps * dt
        completed = np.isfinite(zeta_hist)
        zeta = np.where(completed, zeta_hist, end)
        # cycles that never started contribute nothing to either side
        started = np.zeros_like(completed)
        started[:, 0] = True
        started[:, 1:] = completed[:, :-1]
        with np.errstate(over="ignore", invalid="ignore"):
            gap = np.clip(zeta - eta_hist, 0.0, None)
            rhs = np.exp(-r * zeta) * np.expm1(r * gap) / r
        res.lhs = np.where(started, lhs, 0.0)
        res.rhs = np.where(started, np.nan_to_num(rhs), 0.0)
        res.completed = completed
    if record:
        recs = []
        for j in range(n):
            disorder = switch_lists[j].tolist() if not f2 else etas[j]
            recs.append(PathRecord(times=times.copy(), theta=rec_theta[j], x=rec_x[j],
                                   pi_filter=rec_pi[j], phase=rec_phase[j],
                                   alarms=alarms[j], disorder_times=disorder))
        res.records = recs
    return res


def _run_batch(form, lower, upper, params, cfg, phase0, pi0, threads=None, **kw):
    form = Formulation.parse(form)
    blocks = [range(s, min(s + BLOCK, cfg.n_paths)) for s in range(0, cfg.n_paths, BLOCK)]

    def job(b):
        return _simulate_block(form, lower, upper, params, cfg, phase0, pi0, b, **kw)

    workers = min(worker_count(threads), len(blocks))
    if workers == 1:
        return [job(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, blocks))


def _mean_se(x: np.ndarray) -> Tuple[float, float]:
    n = x.shape[0]
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return mean, se


# ---------------------------------------------------------------------------
# Public drivers


def default_phase(pi0: float) -> int:
    """Phase that waits for the regime change the prior makes likely next."""
    return 1 if pi0 < 0.5 else 0


def run_detection(form, sol, cfg: SimConfig, params: ModelParams, path_index: int = 0,
                  phase: Optional[int] = None, pi0: Optional[float] = None) -> PathRecord:
    """One path of the alternating threshold alarm procedure."""
    pi0 = params.pi0 if pi0 is None else float(pi0)
    phase = default_phase(pi0) if phase is None else int(phase)
    res = _simulate_block(Formulation.parse(form), sol.lower, sol.upper, params, cfg,
                          phase, pi0, [path_index], record=True)
    rec = res.records[0]
    rec.clamp_count = res.clamps
    return rec


def simulate_paths(form, sol, cfg: SimConfig, params: ModelParams,
                   phase: Optional[int] = None, pi0: Optional[float] = None,
                   threads: Optional[int] = None) -> List[PathRecord]:
    pi0 = params.pi0 if pi0 is None else float(pi0)
    phase = default_phase(pi0) if phase is None else int(phase)
    blocks = _run_batch(form, sol.lower, sol.upper, params, cfg, phase, pi0, threads,
                        record=True)
    return [rec for b in blocks for rec in b.records]


def first_alarm_times(form, sol, cfg: SimConfig, params: ModelParams,
                      phase: Optional[int] = None, pi0: Optional[float] = None,
                      threads: Optional[int] = None) -> np.ndarray:
    """Time of the first alarm on each path (inf when none before the horizon)."""
    pi0 = params.pi0 if pi0 is None else float(pi0)
    phase = default_phase(pi0) if phase is None else int(phase)
    blocks = _run_batch(form, sol.lower, sol.upper, params, cfg, phase, pi0, threads)
    return np.concatenate([b.first_alarm for b in blocks])


def _risk_samples(form, lower, upper, params, cfg, i, pi, threads):
    blocks = _run_batch(form, lower, upper, params, cfg, i, pi, threads)
    risk = np.concatenate([b.risk for b in blocks])
    clamp = sum(b.clamps for b in blocks) / max(1, sum(b.steps for b in blocks))
    return risk, clamp


def estimate_risk_mc(form, sol, i: int, pi: float, cfg: SimConfig, params: ModelParams,
                     threads: Optional[int] = None) -> RiskEstimate:
    """Discounted alarm costs plus detection-delay integrals, averaged over paths."""
    if i not in (0, 1):
        raise ValueError("i must be 0 or 1")
    risk, clamp = _risk_samples(form, sol.lower, sol.upper, params, cfg, i, pi, threads)
    mean, se = _mean_se(risk)
    return RiskEstimate(mean, se, cfg.n_paths, truncation_bound(params.r, cfg.horizon), clamp)


def perturbed_pairs(lower: float, upper: float) -> List[Tuple[float, float]]:
    """Five threshold pairs moved by 10% of the distance to the nearest endpoint."""
    up_in = 1.0 - 0.9 * (1.0 - upper)
    up_out = 1.0 - 1.1 * (1.0 - upper)
    return [(0.9 * lower, upper), (1.1 * lower, upper), (lower, up_in), (lower, up_out),
            (1.1 * lower, up_out)]


@dataclass
class PairedComparison:
    lower: float
    upper: float
    mean_diff: float  # perturbed minus solved
    stderr: float

    @property
    def z(self) -> float:
        return self.mean_diff / self.stderr if self.stderr > 0 else math.inf


def compare_thresholds(form, sol, i: int, pi: float, cfg: SimConfig, params: ModelParams,
                       pairs: Optional[Sequence[Tuple[float, float]]] = None,
                       threads: Optional[int] = None) -> List[PairedComparison]:
    """Paired risk differences of alternative thresholds against the solved ones."""
    pairs = perturbed_pairs(sol.lower, sol.upper) if pairs is None else pairs
    base, _ = _risk_samples(form, sol.lower, sol.upper, params, cfg, i, pi, threads)
    out = []
    for lo, up in pairs:
        alt, _ = _risk_samples(form, lo, up, params, cfg, i, pi, threads)
        mean, se = _mean_se(alt - base)
        out.append(PairedComparison(lo, up, mean, se))
    return out


@dataclass
class FilterMoments:
    times: List[float]
    mean: List[float]
    stderr: List[float]
    clamp_fraction: float


def filter_moments_f1(params: ModelParams, cfg: SimConfig, pi0: float,
                      times: Sequence[float], threads: Optional[int] = None) -> FilterMoments:
    """Mean of the first-formulation filter at the given times, no alarms."""
    steps = [int(round(t / cfg.dt)) for t in times]
    if max(steps) > cfg.n_steps:
        raise ValueError("sample time beyond horizon")
    blocks = _run_batch(Formulation.F1, -1.0, 2.0, params, cfg, 0, pi0, threads,
                        sample_steps=steps)
    s = np.concatenate([b.samples for b in blocks])
    clamp = sum(b.clamps for b in blocks) / max(1, sum(b.steps for b in blocks))
    means, ses = zip(*(_mean_se(s[:, c]) for c in range(s.shape[1])))
    return FilterMoments(list(times), list(means), list(ses), clamp)


@dataclass
class DelayIdentityReport:
    cycles: List[int]
    lhs_mean: List[float]
    rhs_mean: List[float]
    stderr: List[float]  # standard error of lhs_mean - rhs_mean, sides treated separately
    discrepancy_se: List[float]

    @property
    def max_discrepancy_se(self) -> float:
        return max(self.discrepancy_se)

    def to_dict(self) -> Dict[str, list]:
        return {k: getattr(self, k) for k in
                ("cycles", "lhs_mean", "rhs_mean", "stderr", "discrepancy_se")}


def check_delay_identity(form, sol, cfg: SimConfig, params: ModelParams,
                         n_cycles: int = 4, phase: Optional[int] = None,
                         pi0: Optional[float] = None,
                         threads: Optional[int] = None) -> DelayIdentityReport:
    """Compare both sides of the per-cycle delay identity on shared paths.

    For cycle n the left side is the grid integral of exp(-r t) over the
    part of (zeta_{n-1}, zeta_n) spent in the post-disorder state and the
    right side is exp(-r zeta_n) (exp(r (zeta_n - eta_n)^+) - 1) / r.
    A cycle still running at the horizon is closed at the horizon.
    """
    if Formulation.parse(form) is not Formulation.F2:
        raise ValueError("the delay identity concerns the second formulation")
    pi0 = params.pi0 if pi0 is None else float(pi0)
    phase = default_phase(pi0) if phase is None else int(phase)
    blocks = _run_batch(Formulation.F2, sol.lower, sol.upper, params, cfg, phase, pi0,
                        threads, track_cycles=n_cycles)
    lhs = np.concatenate([b.lhs for b in blocks])
    rhs = np.concatenate([b.rhs for b in blocks])
    rep = DelayIdentityReport([], [], [], [], [])
    for c in range(n_cycles):
        ml, sl = _mean_se(lhs[:, c])
        mr, sr = _mean_se(rhs[:, c])
        se = math.hypot(sl, sr)
        rep.cycles.append(c + 1)
        rep.lhs_mean.append(ml)
        rep.rhs_mean.append(mr)
        rep.stderr.append(se)
        rep.discrepancy_se.append(abs(ml - mr) / se if se > 0 else (0.0 if ml == mr else math.inf))
    return rep
