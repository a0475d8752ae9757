"""Iterative frame-to-volume registration baselines.

Four metric/optimizer combinations (mse or ncc, gradient descent or
Powell's conjugate directions), the random-guess baseline, and a
brute-force lattice oracle used to validate basins of convergence.
NCC objectives are negated so every combination minimizes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ZeroVarianceError
from .geometry import RigidParams
from .imagevol import Frame2D, Volume3D
from . import sampler

__all__ = [
    "OptimConfig",
    "RegistrationResult",
    "GridSpec",
    "TrainStats",
    "register_iterative",
    "gd_minimize",
    "powell_minimize",
    "random_guess",
    "delta_stats",
    "brute_force_oracle",
    "make_objective",
    "make_objective_grad",
]

GOLD = (math.sqrt(5.0) - 1.0) / 2.0  # 0.618...


@dataclass(frozen=True)
class OptimConfig:
    metric: str = "mse"  # mse | ncc
    optimizer: str = "powell"  # gd | powell
    max_iters: int = 200
    tol: float = 1e-6  # relative objective change
    gd_step: tuple = (0.1,) * 6  # mm and degrees per unit gradient
    powell_bracket: tuple = (1.0,) * 6  # initial direction scale, mm/deg
    seed: int = 0

    def __post_init__(self):
        if self.metric not in ("mse", "ncc"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.optimizer not in ("gd", "powell"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.max_iters < 1 or self.tol <= 0:
            raise ValueError("max_iters >= 1 and tol > 0 required")
        if any(s <= 0 for s in self.gd_step) or any(s <= 0 for s in self.powell_bracket):
            raise ValueError("step sizes must be positive")


@dataclass
class RegistrationResult:
    theta_est: RigidParams
    objective_trace: list
    iterations: int
    wall_time_s: float
    converged: bool


def _slice_at(frame: Frame2D, subvol: Volume3D, theta: np.ndarray):
    grid = sampler.affine_grid(
        RigidParams.from_array(theta), frame.height, frame.width, frame.spacing
    )
    return sampler.resample(subvol, grid)


def make_objective(frame: Frame2D, subvol: Volume3D, metric: str):
    """Value-only objective over the 6-parameter vector (lower is better)."""
    fpix = frame.pixels.astype(np.float64)

    def mse_obj(theta: np.ndarray) -> float:
        sl = _slice_at(frame, subvol, theta)
        d = sl.image.pixels - fpix
        return float(np.mean(d * d))

    def ncc_obj(theta: np.ndarray) -> float:
        sl = _slice_at(frame, subvol, theta)
        b = sl.image.pixels
        bm = b - b.mean()
        sb = np.sqrt(np.mean(bm * bm))
        if sb == 0.0:
            raise ZeroVarianceError("sampled slice is constant")
        am = fpix - fpix.mean()
        sa = np.sqrt(np.mean(am * am))
        if sa == 0.0:
            raise ZeroVarianceError("fixed frame is constant")
        return float(-np.mean(am * bm) / (sa * sb))

    return mse_obj if metric == "mse" else ncc_obj


def make_objective_grad(frame: Frame2D, subvol: Volume3D, metric: str):
    """Objective returning (value, 6-gradient) via the analytic slice Jacobian."""
    fpix = frame.pixels.astype(np.float64)
    npix = fpix.size

    def mse_obj(theta: np.ndarray):
        sl, jac = sampler.resample_with_jacobian(
            subvol, RigidParams.from_array(theta), frame.height, frame.width,
            frame.spacing,
        )
        r = sl.image.pixels - fpix
        val = float(np.mean(r * r))
        grad = 2.0 * np.einsum("hw,hwk->k", r, jac) / npix
        return val, grad

    def ncc_obj(theta: np.ndarray):
        sl, jac = sampler.resample_with_jacobian(
            subvol, RigidParams.from_array(theta), frame.height, frame.width,
            frame.spacing,
        )
        b = sl.image.pixels
        bm = b - b.mean()
        sb = np.sqrt(np.mean(bm * bm))
        if sb == 0.0:
            raise ZeroVarianceError("sampled slice is constant")
        am = fpix - fpix.mean()
        sa = np.sqrt(np.mean(am * am))
        if sa == 0.0:
            raise ZeroVarianceError("fixed frame is constant")
        val = float(np.mean(am * bm) / (sa * sb))
        # d ncc / d pixel, then chain through the slice Jacobian; negated
        dncc_db = am / (npix * sa * sb) - val * bm / (npix * sb * sb)
        grad = -np.einsum("hw,hwk->k", dncc_db, jac)
        return -val, grad

    return mse_obj if metric == "mse" else ncc_obj


def gd_minimize(objective_grad, theta0: RigidParams, cfg: OptimConfig) -> RegistrationResult:
    """Fixed-step descent with per-parameter scaling and backtracking halving.

    Each iteration moves along the scaled, normalized gradient so parameter
    k is displaced by at most step_k (mm or degrees); the step multiplier
    halves when a trial fails to decrease the objective (halting the line
    after 10 halvings) and stays shrunk, giving a finishing refinement.
    """
    t0 = time.perf_counter()
    x = theta0.as_array()
    steps = np.asarray(cfg.gd_step, dtype=float)
    f, g = objective_grad(x)
    if not math.isfinite(f):
        raise NonFiniteError("objective non-finite at the start point")
    trace = [f]
    scale = 1.0
    converged = False
    iterations = 0
    for _ in range(cfg.max_iters):
        iterations += 1
        h = steps * g
        hn = np.linalg.norm(h)
        if hn == 0.0:
            converged = True
            break
        direction = steps * (h / hn)
        accepted = False
        f_trial = f
        for _halving in range(10):
            trial = x - scale * direction
            f_trial, g_trial = objective_grad(trial)
            if math.isfinite(f_trial) and f_trial < f:
                accepted = True
                break
            scale *= 0.5  # non-decrease or non-finite: halve and retry
        if not accepted:
            converged = True  # no descent found along the gradient: stalled
            break
        change = f - f_trial
        x, f, g = trial, f_trial, g_trial
        trace.append(f)
        if change < cfg.tol * (1.0 + abs(f)):
            converged = True
            break
    return RegistrationResult(
        theta_est=RigidParams.from_array(x),
        objective_trace=trace,
        iterations=iterations,
        wall_time_s=time.perf_counter() - t0,
        converged=converged,
    )


def _line_minimize(objective, x: np.ndarray, direction: np.ndarray, f0: float):
    """Minimize objective along x + a*direction via bracketing + golden section.

    Returns (x_best, f_best) with f_best <= f0.
    """

    def g(a: float) -> float:
        v = objective(x + a * direction)
        return v if math.isfinite(v) else math.inf

    # bracket a minimum: walk downhill from 0 in the better of the two senses
    fa = f0
    a = 0.0
    b, fb = 1.0, g(1.0)
    if fb > fa:
        a, b = b, a
        fa, fb = fb, fa
    c = b + (1.0 + GOLD) * (b - a)
    fc = g(c)
    # cap the excursion: brackets beyond ~16 direction units leave any
    # plausible registration basin and invite degenerate similarity values
    while fc < fb and abs(c) < 16.0:
        a, fa = b, fb
        b, fb = c, fc
        c = b + (1.0 + GOLD) * (b - a)
        fc = g(c)
    lo, hi = (a, c) if a < c else (c, a)

    # golden-section shrink
    p = hi - GOLD * (hi - lo)
    q = lo + GOLD * (hi - lo)
    fp, fq = g(p), g(q)
    best_a, best_f = (b, fb) if fb < f0 else (0.0, f0)
    for _ in range(80):
        if fp <= fq:
            hi, q, fq = q, p, fp
            p = hi - GOLD * (hi - lo)
            fp = g(p)
            if fp < best_f:
                best_a, best_f = p, fp
        else:
            lo, p, fp = p, q, fq
            q = lo + GOLD * (hi - lo)
            fq = g(q)
            if fq < best_f:
                best_a, best_f = q, fq
        if hi - lo < 1e-4 * (abs(lo) + abs(hi) + 1e-3):
            break
    return x + best_a * direction, best_f


def powell_minimize(objective, theta0: RigidParams, cfg: OptimConfig) -> RegistrationResult:
    """Powell's conjugate-direction method with golden-section line search.

    Starts from the coordinate axes scaled by cfg.powell_bracket and
    replaces the direction of largest single-direction decrease with the
    iteration's composite displacement when Powell's test recommends it.
    """
    t0 = time.perf_counter()
    x = theta0.as_array()
    dirs = np.diag(np.asarray(cfg.powell_bracket, dtype=float))
    f = objective(x)
    if not math.isfinite(f):
        raise NonFiniteError("objective non-finite at the start point")
    trace = [f]
    converged = False
    iterations = 0
    for _ in range(cfg.max_iters):
        iterations += 1
        x_start = x.copy()
        f_start = f
        delta = 0.0
        big_k = 0
        for k in range(6):
            f_before = f
            x, f = _line_minimize(objective, x, dirs[k], f)
            if f_before - f > delta:
                delta = f_before - f
                big_k = k
        new_dir = x - x_start
        if np.any(new_dir != 0.0):
            f_ext = objective(2.0 * x - x_start)
            if math.isfinite(f_ext) and f_ext < f_start:
                t = 2.0 * (f_start - 2.0 * f + f_ext) * (f_start - f - delta) ** 2
                t -= delta * (f_start - f_ext) ** 2
                if t < 0.0:
                    x, f = _line_minimize(objective, x, new_dir, f)
                    dirs[big_k] = new_dir
        trace.append(f)
        if 2.0 * abs(f_start - f) <= cfg.tol * (abs(f_start) + abs(f) + 1e-300):
            converged = True
            break
    return RegistrationResult(
        theta_est=RigidParams.from_array(x),
        objective_trace=trace,
        iterations=iterations,
        wall_time_s=time.perf_counter() - t0,
        converged=converged,
    )


def register_iterative(
    frame: Frame2D, subvol: Volume3D, theta0: RigidParams, cfg: OptimConfig
) -> RegistrationResult:
    """Register one frame to a subvolume starting from theta0.

    Guarantees objective(theta_est) <= objective(theta0) by tracking the
    incumbent best evaluation.  A ZeroVariance objective (constant NCC
    slice) restarts from a jittered initialization up to 3 times.
    """
    t0 = time.perf_counter()
    best = {"f": math.inf, "x": theta0.as_array()}

    def track(fn):
        def wrapped(theta):
            out = fn(theta)
            v = out[0] if isinstance(out, tuple) else out
            if v < best["f"]:
                best["f"] = v
                best["x"] = np.array(theta, dtype=float)
            return out

        return wrapped

    rng = np.random.default_rng(cfg.seed)
    start = theta0
    for attempt in range(4):
        try:
            if cfg.optimizer == "gd":
                obj = track(make_objective_grad(frame, subvol, cfg.metric))
                result = gd_minimize(obj, start, cfg)
            else:
                obj = track(make_objective(frame, subvol, cfg.metric))
                result = powell_minimize(obj, start, cfg)
            break
        except ZeroVarianceError:
            if attempt == 3:
                raise
            jitter = rng.uniform(-1.0, 1.0, 6) * np.array([1, 1, 1, 2, 2, 2], float)
            start = RigidParams.from_array(theta0.as_array() + jitter)
    if best["f"] < result.objective_trace[-1]:
        result.theta_est = RigidParams.from_array(best["x"])
        result.objective_trace.append(best["f"])
    result.wall_time_s = time.perf_counter() - t0
    return result


@dataclass(frozen=True)
class TrainStats:
    """Per-component mean and standard deviation of training labels."""

    mean: tuple
    std: tuple


def delta_stats(labels) -> TrainStats:
    arr = np.array([p.as_array() for p in labels])
    return TrainStats(
        mean=tuple(float(v) for v in arr.mean(axis=0)),
        std=tuple(float(v) for v in arr.std(axis=0)),
    )


def random_guess(train_stats: TrainStats, seed: int) -> RigidParams:
    """Draw each parameter from the training-set normal statistics."""
    rng = np.random.default_rng(seed)
    draw = rng.normal(np.asarray(train_stats.mean), np.asarray(train_stats.std))
    return RigidParams.from_array(draw)


@dataclass(frozen=True)
class GridSpec:
    """Coarse 6-D search lattice centered on a pose."""

    half_range: tuple = (4.0,) * 6
    points: tuple = (5,) * 6
    center: RigidParams = field(default_factory=RigidParams)

    def axes(self):
        ctr = self.center.as_array()
        return [
            np.linspace(ctr[k] - self.half_range[k], ctr[k] + self.half_range[k],
                        self.points[k])
            if self.points[k] > 1 else np.array([ctr[k]])
            for k in range(6)
        ]


def brute_force_oracle(
    frame: Frame2D, subvol: Volume3D, grid_spec: GridSpec, metric: str = "mse"
):
    """Exhaustive lattice argmin of the objective (validation oracle).

    Returns (params, objective value) of the best lattice point.
    """
    obj = make_objective(frame, subvol, metric)
    axes = grid_spec.axes()
    best_f = math.inf
    best = None
    grids = np.meshgrid(*axes, indexing="ij")
    lattice = np.stack([g.ravel() for g in grids], axis=1)
    for theta in lattice:
        try:
            f = obj(theta)
        except ZeroVarianceError:
            continue
        if f < best_f:
            best_f = f
            best = theta
    if best is None:
        raise ZeroVarianceError("objective undefined on the whole lattice")
    return RigidParams.from_array(best), best_f
