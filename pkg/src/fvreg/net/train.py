"""Training loop: pair sampling from sweeps, Adam updates, logging,
and parameter-file serialization."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import BadMagicError, DimensionMismatchError, OutOfBoundsError
from ..geometry import RigidParams, corner_distance_error, relative_params
from ..imagevol import SubvolumeSpec, center_crop_frame, crop_subvolume
from .. import metrics
from .layers import AdamState, adam_step
from .model import FvrNetConfig, forward, init_params, loss_and_grad

__all__ = [
    "TrainConfig",
    "TrainSample",
    "sample_pair",
    "train",
    "save_params",
    "load_params",
    "LOG_CSV_HEADER",
    "log_to_csv",
]

PARAMS_MAGIC = b"FVRNET1\n"
LOG_CSV_HEADER = "epoch,lr,train_loss,val_loss,val_dist_err_mm"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    pairs_per_epoch: int = 128
    lr: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    frame_range: int = 10
    seed: int = 0
    val_pairs: int = 32
    sample_retries: int = 10
    compute_dtype: str = "float32"  # forward/backward precision; f64 master weights

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.pairs_per_epoch) < 1:
            raise ValueError("epochs, batch_size, pairs_per_epoch must be >= 1")
        if self.lr <= 0 or not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("need lr > 0 and lr_decay in (0, 1]")
        if self.frame_range < 1:
            raise ValueError("frame_range must be >= 1")


@dataclass
class TrainSample:
    frame: object  # Frame2D (cropped)
    subvol: object  # Volume3D
    label: RigidParams  # pose of the frame in subvolume coordinates


def sample_pair(sweeps, rng, net_cfg: FvrNetConfig, frame_range: int) -> TrainSample:
    """Draw one training pair: target frame n, init frame uniformly within
    [n - R, n + R], subvolume cropped at the init pose, label = relative pose.

    Raises OutOfBoundsError if the crop leaves the volume (caller re-draws).
    """
    spec = SubvolumeSpec(
        crop_d=net_cfg.vol_depth,
        crop_h=net_cfg.vol_hw,
        crop_w=net_cfg.vol_hw,
        frame_range=frame_range,
    )
    sweep = sweeps[int(rng.integers(len(sweeps)))]
    n = int(rng.integers(sweep.n_frames))
    lo = max(0, n - frame_range)
    hi = min(sweep.n_frames - 1, n + frame_range)
    j = int(rng.integers(lo, hi + 1))
    subvol, _ = crop_subvolume(sweep.volume, sweep.poses[j], spec)
    label = relative_params(sweep.poses[n], sweep.poses[j])
    frame = center_crop_frame(sweep.frames[n], net_cfg.frame_hw)
    return TrainSample(frame=frame, subvol=subvol, label=label)


def _draw_with_retries(sweeps, rng, net_cfg, train_cfg):
    for _ in range(train_cfg.sample_retries):
        try:
            return sample_pair(sweeps, rng, net_cfg, train_cfg.frame_range)
        except OutOfBoundsError:
            continue
    return None


def _validate(samples, params, net_cfg, ct=np.float64):
    if not samples:
        return float("nan"), float("nan")
    run_params = (
        params if ct == np.float64 else {k: v.astype(ct) for k, v in params.items()}
    )
    losses = []
    dists = []
    for s in samples:
        theta, _ = forward(
            np.asarray(s.frame.pixels, dtype=ct),
            np.asarray(s.subvol.voxels, dtype=ct),
            run_params,
            net_cfg,
        )
        pred = RigidParams.from_array(np.asarray(theta, dtype=np.float64))
        loss = 0.0
        label = s.label.as_array()
        if net_cfg.loss_mode in ("trans", "both"):
            loss += float(np.sum((theta - label) ** 2))
        if net_cfg.loss_mode in ("sim", "both"):
            loss += net_cfg.sim_weight * metrics.loss_sim([s.frame], [s.subvol], [pred])
        losses.append(loss)
        dists.append(
            corner_distance_error(
                pred, s.label, s.frame.height, s.frame.width, s.frame.spacing
            )
        )
    return float(np.mean(losses)), float(np.mean(dists))


def train(train_sweeps, net_cfg: FvrNetConfig, train_cfg: TrainConfig,
          val_sweeps=None):
    """Train the network on sweep datasets.

    Returns (params, log) where log is one dict per epoch with keys
    epoch, lr, train_loss, val_loss, val_dist_err_mm, skipped_samples.
    Fully deterministic for fixed seeds and configs.
    """
    if not train_sweeps:
        raise ValueError("no training sweeps")
    params = init_params(net_cfg)
    state = AdamState()
    rng = np.random.default_rng(train_cfg.seed)

    val_samples = []
    if val_sweeps:
        vrng = np.random.default_rng(train_cfg.seed + 1)
        while len(val_samples) < train_cfg.val_pairs:
            s = _draw_with_retries(val_sweeps, vrng, net_cfg, train_cfg)
            if s is None:
                break
            val_samples.append(s)

    ct = np.dtype(train_cfg.compute_dtype)
    log = []
    n_batches = math.ceil(train_cfg.pairs_per_epoch / train_cfg.batch_size)
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr * train_cfg.lr_decay ** (epoch // train_cfg.lr_decay_every)
        epoch_losses = []
        skipped = 0
        for _ in range(n_batches):
            batch = []
            while len(batch) < train_cfg.batch_size:
                s = _draw_with_retries(train_sweeps, rng, net_cfg, train_cfg)
                if s is None:
                    skipped += 1
                    if skipped > 10 * train_cfg.batch_size:
                        raise OutOfBoundsError("sampler keeps leaving the volume")
                    continue
                batch.append(s)
            run_params = (
                params if ct == np.float64
                else {k: v.astype(ct) for k, v in params.items()}
            )
            grad_sum = None
            loss_sum = 0.0
            for s in batch:  # fixed index order keeps reductions deterministic
                loss, grads = loss_and_grad(s.frame, s.subvol, s.label, run_params, net_cfg)
                loss_sum += loss
                if grad_sum is None:
                    grad_sum = {k: g.astype(np.float64) for k, g in grads.items()}
                else:
                    for k in grad_sum:
                        grad_sum[k] += grads[k]
            k_inv = 1.0 / len(batch)
            grad_mean = {k: g * k_inv for k, g in grad_sum.items()}
            adam_step(params, grad_mean, state, lr)
            epoch_losses.append(loss_sum * k_inv)
        val_loss, val_dist = _validate(val_samples, params, net_cfg, ct)
        log.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(epoch_losses)),
                "val_loss": val_loss,
                "val_dist_err_mm": val_dist,
                "skipped_samples": skipped,
            }
        )
    return params, log


def log_to_csv(log) -> str:
    lines = [LOG_CSV_HEADER]
    for row in log:
        lines.append(
            f"{row['epoch']},{row['lr']!r},{row['train_loss']!r},"
            f"{row['val_loss']!r},{row['val_dist_err_mm']!r}"
        )
    return "\n".join(lines) + "\n"


def save_params(params: dict, path):
    """Binary parameter file: magic, then per-tensor records of
    (u32 name length, name, u32 rank, u32 extents, little-endian f64 data)."""
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        for name, arr in params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(PARAMS_MAGIC)) != PARAMS_MAGIC:
            raise BadMagicError(f"{path} is not a parameter file")
        params: dict = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DimensionMismatchError("truncated record header")
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise DimensionMismatchError(f"truncated payload for {name!r}")
            params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return params
