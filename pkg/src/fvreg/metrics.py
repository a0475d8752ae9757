"""Image similarity measures, training losses, and evaluation statistics.

Both losses use the squared convention by default (mean squared error);
``squared=False`` switches to the unsquared Euclidean/RMS norm so the
difference between the two readings can be explored.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, EmptyBatchError, FvregError, ZeroVarianceError
from .geometry import RigidParams, corner_distance_error, relative_params
from .imagevol import Frame2D, Volume3D
from . import sampler

__all__ = [
    "mse",
    "ncc",
    "masked_ncc",
    "loss_trans",
    "loss_sim",
    "loss_sim_with_grad",
    "param_correlations",
    "ParamCorrelations",
    "RegPair",
    "EvalReport",
    "evaluate_pairs",
    "REPORT_CSV_HEADER",
    "reports_to_csv",
    "reports_from_csv",
]


def _check_dims(a: Frame2D, b: Frame2D):
    if a.pixels.shape != b.pixels.shape:
        raise DimensionMismatchError(
            f"frame shapes differ: {a.pixels.shape} vs {b.pixels.shape}"
        )


def mse(a: Frame2D, b: Frame2D) -> float:
    """Mean over pixels of the squared intensity difference."""
    _check_dims(a, b)
    d = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    return float(np.mean(d * d))


def _ncc_arrays(x: np.ndarray, y: np.ndarray) -> float:
    x = x.astype(np.float64).ravel()
    y = y.astype(np.float64).ravel()
    xm = x - x.mean()
    ym = y - y.mean()
    sx = np.sqrt(np.mean(xm * xm))
    sy = np.sqrt(np.mean(ym * ym))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVarianceError("ncc needs nonzero variance in both images")
    return float(np.mean(xm * ym) / (sx * sy))


def ncc(a: Frame2D, b: Frame2D) -> float:
    """Pearson correlation of the pixel vectors (population convention)."""
    _check_dims(a, b)
    return _ncc_arrays(a.pixels, b.pixels)


def masked_ncc(a: Frame2D, b: Frame2D, mask: np.ndarray) -> float:
    """Diagnostic variant of ncc restricted to the masked pixels."""
    _check_dims(a, b)
    if mask.shape != a.pixels.shape:
        raise DimensionMismatchError("mask shape differs from frames")
    if not mask.any():
        raise ZeroVarianceError("mask selects no pixels")
    return _ncc_arrays(a.pixels[mask], b.pixels[mask])


def _params_batch(batch) -> np.ndarray:
    arr = np.array([p.as_array() if isinstance(p, RigidParams) else p for p in batch])
    if arr.size == 0:
        raise EmptyBatchError("empty parameter batch")
    if arr.ndim != 2 or arr.shape[1] != 6:
        raise DimensionMismatchError(f"expected (N, 6) parameters, got {arr.shape}")
    return arr.astype(np.float64)


def loss_trans(preds, labels, squared: bool = True) -> float:
    """Parameter-regression loss: batch mean of the (squared) 6-vector norm."""
    p = _params_batch(preds)
    l = _params_batch(labels)
    if p.shape != l.shape:
        raise DimensionMismatchError(f"batch shapes differ: {p.shape} vs {l.shape}")
    sq = np.sum((p - l) ** 2, axis=1)
    return float(np.mean(sq if squared else np.sqrt(sq)))


def loss_sim(frames, volumes, thetas, squared: bool = True) -> float:
    """Image-similarity loss: batch mean of the (squared) per-pair slice error."""
    n = len(frames)
    if n == 0:
        raise EmptyBatchError("empty similarity batch")
    if not (len(volumes) == len(thetas) == n):
        raise DimensionMismatchError("frames/volumes/thetas lengths differ")
    total = 0.0
    for frame, vol, theta in zip(frames, volumes, thetas):
        sl = sampler.resample(
            vol, sampler.affine_grid(theta, frame.height, frame.width, frame.spacing)
        )
        pair = mse(frame, sl.image)
        total += pair if squared else np.sqrt(pair)
    return total / n


def loss_sim_with_grad(frames, volumes, thetas, squared: bool = True):
    """Similarity loss plus its gradient w.r.t. each pose, via the analytic
    slice Jacobian.  Returns (loss, (N, 6) array of d(loss)/d(theta_n))."""
    n = len(frames)
    if n == 0:
        raise EmptyBatchError("empty similarity batch")
    if not (len(volumes) == len(thetas) == n):
        raise DimensionMismatchError("frames/volumes/thetas lengths differ")
    total = 0.0
    grads = np.zeros((n, 6))
    for i, (frame, vol, theta) in enumerate(zip(frames, volumes, thetas)):
        sl, jac = sampler.resample_with_jacobian(
            vol, theta, frame.height, frame.width, frame.spacing
        )
        r = sl.image.pixels - frame.pixels.astype(np.float64)
        npix = r.size
        pair_mse = float(np.mean(r * r))
        g = 2.0 * np.einsum("hw,hwk->k", r, jac) / npix
        if squared:
            total += pair_mse
            grads[i] = g / n
        else:
            rms = np.sqrt(pair_mse)
            total += rms
            grads[i] = np.zeros(6) if rms == 0.0 else g / (2.0 * rms * n)
    return total / n, grads


@dataclass(frozen=True)
class ParamCorrelations:
    """Per-component Pearson coefficients; undefined components are flagged
    and excluded from the mean."""

    values: np.ndarray  # (6,), nan where undefined
    defined: np.ndarray  # (6,) bool
    mean: float


def param_correlations(preds, labels) -> ParamCorrelations:
    """Pearson coefficient per parameter component plus their mean."""
    p = _params_batch(preds)
    l = _params_batch(labels)
    if p.shape != l.shape:
        raise DimensionMismatchError(f"batch shapes differ: {p.shape} vs {l.shape}")
    if p.shape[0] < 3:
        raise EmptyBatchError("need at least 3 samples for correlations")
    values = np.full(6, np.nan)
    defined = np.zeros(6, dtype=bool)
    for k in range(6):
        x = p[:, k] - p[:, k].mean()
        y = l[:, k] - l[:, k].mean()
        vx = float(np.mean(x * x))
        vy = float(np.mean(y * y))
        if vx == 0.0 or vy == 0.0:
            continue
        values[k] = float(np.mean(x * y) / np.sqrt(vx * vy))
        defined[k] = True
    mean = float(np.mean(values[defined])) if defined.any() else float("nan")
    return ParamCorrelations(values=values, defined=defined, mean=mean)


@dataclass
class RegPair:
    """One registration problem: fixed frame, search subvolume, and the
    initialization / ground-truth poses in subvolume coordinates."""

    frame: Frame2D
    subvol: Volume3D
    theta_init: RigidParams
    theta_gt: RigidParams


@dataclass
class EvalReport:
    """Aggregate registration quality for one method over a pair set."""

    method: str
    dist_err_mm: float
    img_sim_ncc: float
    correlations: np.ndarray  # (6,) tx,ty,tz,ax,ay,az; nan if undefined
    corr_defined: np.ndarray  # (6,) bool
    corr_mean: float
    runtime_s: float
    init_dist_err_mm: float
    n_pairs: int
    n_failed: int

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dist_err_mm": self.dist_err_mm,
            "img_sim_ncc": self.img_sim_ncc,
            "correlations": [float(v) for v in self.correlations],
            "corr_defined": [bool(b) for b in self.corr_defined],
            "corr_mean": self.corr_mean,
            "runtime_s": self.runtime_s,
            "init_dist_err_mm": self.init_dist_err_mm,
            "n_pairs": self.n_pairs,
            "n_failed": self.n_failed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            method=d["method"],
            dist_err_mm=float(d["dist_err_mm"]),
            img_sim_ncc=float(d["img_sim_ncc"]),
            correlations=np.array(d["correlations"], dtype=float),
            corr_defined=np.array(d["corr_defined"], dtype=bool),
            corr_mean=float(d["corr_mean"]),
            runtime_s=float(d["runtime_s"]),
            init_dist_err_mm=float(d["init_dist_err_mm"]),
            n_pairs=int(d["n_pairs"]),
            n_failed=int(d["n_failed"]),
        )


REPORT_CSV_HEADER = (
    "method,dist_err_mm,img_sim_ncc,"
    "corr_tx,corr_ty,corr_tz,corr_ax,corr_ay,corr_az,corr_mean,runtime_s"
)


def reports_to_csv(reports) -> str:
    lines = [REPORT_CSV_HEADER]
    for r in reports:
        corr = ",".join(repr(float(v)) for v in r.correlations)
        lines.append(
            f"{r.method},{r.dist_err_mm!r},{r.img_sim_ncc!r},{corr},"
            f"{r.corr_mean!r},{r.runtime_s!r}"
        )
    return "\n".join(lines) + "\n"


def reports_from_csv(text: str):
    """Parse the CSV emitted by reports_to_csv (pinned columns only)."""
    lines = [ln for ln in text.strip().split("\n") if ln]
    if not lines or lines[0] != REPORT_CSV_HEADER:
        raise DimensionMismatchError("bad report CSV header")
    rows = []
    for ln in lines[1:]:
        toks = ln.split(",")
        if len(toks) != 11:
            raise DimensionMismatchError(f"bad report CSV row: {ln!r}")
        vals = [float(t) for t in toks[1:]]
        rows.append(
            EvalReport(
                method=toks[0],
                dist_err_mm=vals[0],
                img_sim_ncc=vals[1],
                correlations=np.array(vals[2:8]),
                corr_defined=~np.isnan(np.array(vals[2:8])),
                corr_mean=vals[8],
                runtime_s=vals[9],
                init_dist_err_mm=float("nan"),
                n_pairs=0,
                n_failed=0,
            )
        )
    return rows


def evaluate_pairs(method, pairs, method_name: str = "method") -> EvalReport:
    """Run a registration method over a pair set and aggregate the
    Table-style statistics.

    ``method`` is a callable RegPair -> RigidParams estimating the pose in
    subvolume coordinates.  Pairs where the method raises a package error
    are counted as failed and excluded from the aggregates.
    """
    if len(pairs) == 0:
        raise EmptyBatchError("no evaluation pairs")
    dist_errs = []
    nccs = []
    est_deltas = []
    label_deltas = []
    times = []
    init_errs = []
    n_failed = 0
    for pair in pairs:
        h, w, sp = pair.frame.height, pair.frame.width, pair.frame.spacing
        init_errs.append(
            corner_distance_error(pair.theta_init, pair.theta_gt, h, w, sp)
        )
        t0 = time.perf_counter()
        try:
            theta_est = method(pair)
            elapsed = time.perf_counter() - t0
            sl = sampler.resample(
                pair.subvol, sampler.affine_grid(theta_est, h, w, sp)
            )
            pair_ncc = ncc(pair.frame, sl.image)
            est_deltas.append(relative_params(theta_est, pair.theta_init))
            label_deltas.append(relative_params(pair.theta_gt, pair.theta_init))
        except FvregError:
            n_failed += 1
            continue
        times.append(elapsed)
        dist_errs.append(corner_distance_error(theta_est, pair.theta_gt, h, w, sp))
        nccs.append(pair_ncc)
    if not dist_errs:
        raise FvregError(f"all {len(pairs)} pairs failed for {method_name}")
    if len(est_deltas) >= 3:
        corr = param_correlations(est_deltas, label_deltas)
    else:
        corr = ParamCorrelations(np.full(6, np.nan), np.zeros(6, bool), float("nan"))
    return EvalReport(
        method=method_name,
        dist_err_mm=float(np.mean(dist_errs)),
        img_sim_ncc=float(np.mean(nccs)),
        correlations=corr.values,
        corr_defined=corr.defined,
        corr_mean=corr.mean,
        runtime_s=float(np.mean(times)),
        init_dist_err_mm=float(np.mean(init_errs)),
        n_pairs=len(pairs),
        n_failed=n_failed,
    )
