"""Dual-branch localization network: forward, backward, and loss assembly.

The frame branch lifts the 2D frame to ``vol_depth`` channels with a 2D
conv, reinterprets channels as depth, and runs two 3D conv blocks; the
volume branch runs the same two blocks on the raw subvolume, so both
feature maps have identical shape ("balanced").  Features are
concatenated along depth and regressed to the 6 pose parameters by a
small conv + fully-connected head.

Fusion ablations: ``early_fusion`` concatenates the replicated raw frame
with the raw volume in front of a single shared branch;
``unbalanced_late`` keeps the two branches but skips the channel lift, so
the frame contributes a depth-1 feature map.

A parameter set is an ordered dict name -> float64 ndarray (plain numpy
arrays are the tensor substrate).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatchError
from ..geometry import RigidParams
from ..imagevol import Frame2D, Volume3D
from .. import metrics
from . import layers as L

__all__ = [
    "FvrNetConfig",
    "init_params",
    "forward",
    "backward",
    "loss_and_grad",
    "infer",
    "frame_branch",
    "volume_branch",
    "fuse_and_localize",
]

FUSIONS = ("dual_balanced", "early_fusion", "unbalanced_late")
LOSS_MODES = ("trans", "sim", "both")


@dataclass(frozen=True)
class FvrNetConfig:
    fusion: str = "dual_balanced"
    loss_mode: str = "both"
    sim_weight: float = 1.0
    channels: tuple = (4, 8, 16, 32)  # branch c1, c2; head c3, c4
    fc_hidden: int = 48
    vol_depth: int = 32
    vol_hw: int = 128
    frame_hw: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.sim_weight < 0:
            raise ValueError("sim_weight must be >= 0")
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ValueError(f"need 4 positive channel counts, got {self.channels}")


def _uniform(rng, shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(cfg: FvrNetConfig) -> dict:
    """Fan-in-scaled uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    c1, c2, c3, c4 = cfg.channels
    p: dict = {}

    def conv(name, cout, cin, *kernel):
        p[f"{name}.w"] = _uniform(rng, (cout, cin) + kernel)
        p[f"{name}.b"] = np.zeros(cout)

    if cfg.fusion == "dual_balanced":
        conv("lift", cfg.vol_depth, 1, 3, 3)
    if cfg.fusion == "early_fusion":
        conv("s1", c1, 1, 3, 3, 3)
        conv("s2", c2, c1, 3, 3, 3)
    else:
        conv("f1", c1, 1, 3, 3, 3)
        conv("f2", c2, c1, 3, 3, 3)
        conv("v1", c1, 1, 3, 3, 3)
        conv("v2", c2, c1, 3, 3, 3)
    conv("h1", c3, c2, 3, 3, 3)
    conv("h2", c4, c3, 3, 3, 3)
    p["fc1.w"] = _uniform(rng, (cfg.fc_hidden, c4))
    p["fc1.b"] = np.zeros(cfg.fc_hidden)
    p["fc2.w"] = _uniform(rng, (6, cfg.fc_hidden))
    p["fc2.b"] = np.zeros(6)
    return p


def _block3d(x, params, name, cache):
    z = L.conv3d_forward(x, params[f"{name}.w"], params[f"{name}.b"])
    a = L.relu(z)
    out = L.avgpool2(a)
    cache[name] = (x, z, a.shape)
    return out


def _block3d_back(dout, params, name, cache, grads):
    x, z, a_shape = cache[name]
    da = L.avgpool2_backward(dout, a_shape)
    dz = L.relu_backward(da, z)
    dx, dw, db = L.conv3d_backward(x, params[f"{name}.w"], dz)
    grads[f"{name}.w"] = dw
    grads[f"{name}.b"] = db
    return dx


def frame_branch(frame: np.ndarray, params: dict, cfg: FvrNetConfig, cache=None):
    """Frame pathway producing the balanced 3D feature map."""
    cache = {} if cache is None else cache
    if frame.shape != (cfg.frame_hw, cfg.frame_hw):
        raise ShapeMismatchError(f"frame shape {frame.shape}")
    if cfg.fusion == "dual_balanced":
        z = L.conv2d_forward(frame[None], params["lift.w"], params["lift.b"])
        a = L.relu(z)
        cache["lift"] = (frame, z)
        x = a[None]  # channels reinterpreted as depth: (1, D, H, W)
    elif cfg.fusion == "unbalanced_late":
        x = frame[None, None]  # depth-1 volume, no channel lift
    else:
        raise ShapeMismatchError("early_fusion has no separate frame branch")
    x = _block3d(x, params, "f1", cache)
    x = _block3d(x, params, "f2", cache)
    return x


def volume_branch(vol: np.ndarray, params: dict, cfg: FvrNetConfig, cache=None):
    """Volume pathway: two 3D conv blocks with the frame branch's hyperparams."""
    cache = {} if cache is None else cache
    if vol.shape != (cfg.vol_depth, cfg.vol_hw, cfg.vol_hw):
        raise ShapeMismatchError(f"volume shape {vol.shape}")
    x = _block3d(vol[None], params, "v1", cache)
    x = _block3d(x, params, "v2", cache)
    return x


def _head(fused: np.ndarray, params: dict, cache: dict) -> np.ndarray:
    x = _block3d(fused, params, "h1", cache)
    x = _block3d(x, params, "h2", cache)
    cache["gap_shape"] = x.shape
    g = L.global_avg_pool(x)
    u = L.fully_connected(g, params["fc1.w"], params["fc1.b"])
    r = L.relu(u)
    out = L.fully_connected(r, params["fc2.w"], params["fc2.b"])
    cache["fc"] = (g, u, r)
    return out


def fuse_and_localize(
    f_feat: np.ndarray, v_feat: np.ndarray, params: dict, cfg: FvrNetConfig, cache=None
) -> np.ndarray:
    """Depth-concatenate branch features and regress the 6 parameters."""
    cache = {} if cache is None else cache
    if f_feat.shape[0] != v_feat.shape[0] or f_feat.shape[2:] != v_feat.shape[2:]:
        raise ShapeMismatchError(
            f"incompatible features {f_feat.shape} vs {v_feat.shape}"
        )
    fused = np.concatenate([f_feat, v_feat], axis=1)
    cache["split"] = f_feat.shape[1]
    return _head(fused, params, cache)


def forward(frame: np.ndarray, vol: np.ndarray, params: dict, cfg: FvrNetConfig):
    """Full forward pass -> (6-parameter estimate, cache for backward)."""
    frame = np.asarray(frame)
    vol = np.asarray(vol)
    if vol.shape != (cfg.vol_depth, cfg.vol_hw, cfg.vol_hw):
        raise ShapeMismatchError(f"volume shape {vol.shape}")
    cache: dict = {"fusion": cfg.fusion}
    if cfg.fusion == "early_fusion":
        if frame.shape != (cfg.frame_hw, cfg.frame_hw):
            raise ShapeMismatchError(f"frame shape {frame.shape}")
        rep = np.broadcast_to(frame, (cfg.vol_depth,) + frame.shape)
        x = np.concatenate([rep, vol], axis=0)[None]  # (1, 2D, H, W)
        x = _block3d(x, params, "s1", cache)
        x = _block3d(x, params, "s2", cache)
        theta = _head(x, params, cache)
    else:
        f_feat = frame_branch(frame, params, cfg, cache)
        v_feat = volume_branch(vol, params, cfg, cache)
        theta = fuse_and_localize(f_feat, v_feat, params, cfg, cache)
    return theta, cache


def backward(dtheta: np.ndarray, params: dict, cfg: FvrNetConfig, cache: dict) -> dict:
    """Parameter gradients for d(loss)/d(theta_pred) = dtheta."""
    grads: dict = {}
    g, u, r = cache["fc"]
    dr, grads["fc2.w"], grads["fc2.b"] = L.fully_connected_backward(
        r, params["fc2.w"], dtheta
    )
    du = L.relu_backward(dr, u)
    dg, grads["fc1.w"], grads["fc1.b"] = L.fully_connected_backward(
        g, params["fc1.w"], du
    )
    dx = L.global_avg_pool_backward(dg, cache["gap_shape"])
    dx = _block3d_back(dx, params, "h2", cache, grads)
    dfused = _block3d_back(dx, params, "h1", cache, grads)
    if cfg.fusion == "early_fusion":
        dx = _block3d_back(dfused, params, "s2", cache, grads)
        _block3d_back(dx, params, "s1", cache, grads)
        return grads
    split = cache["split"]
    df, dv = dfused[:, :split], dfused[:, split:]
    dv = _block3d_back(dv, params, "v2", cache, grads)
    _block3d_back(dv, params, "v1", cache, grads)
    df = _block3d_back(df, params, "f2", cache, grads)
    dxf = _block3d_back(df, params, "f1", cache, grads)
    if cfg.fusion == "dual_balanced":
        frame, z = cache["lift"]
        dz = L.relu_backward(dxf[0], z)
        _, grads["lift.w"], grads["lift.b"] = L.conv2d_backward(
            frame[None], params["lift.w"], dz
        )
    return grads


def loss_and_grad(
    frame: Frame2D,
    subvol: Volume3D,
    theta_label: RigidParams,
    params: dict,
    cfg: FvrNetConfig,
):
    """Single-sample loss and parameter gradients.

    loss = L_trans + sim_weight * L_sim according to loss_mode; the
    similarity term backpropagates into the pose through the analytic
    slice Jacobian and from there into every network parameter.
    """
    dt = next(iter(params.values())).dtype  # compute precision follows params
    fpix = np.asarray(frame.pixels, dtype=dt)
    vox = np.asarray(subvol.voxels, dtype=dt)
    theta, cache = forward(fpix, vox, params, cfg)
    theta64 = np.asarray(theta, dtype=np.float64)
    label = theta_label.as_array()
    loss = 0.0
    dtheta = np.zeros(6)
    if cfg.loss_mode in ("trans", "both"):
        resid = theta64 - label
        loss += float(resid @ resid)
        dtheta += 2.0 * resid
    if cfg.loss_mode in ("sim", "both"):
        sim, dsim = metrics.loss_sim_with_grad(
            [frame], [subvol], [RigidParams.from_array(theta64)]
        )
        loss += cfg.sim_weight * sim
        dtheta += cfg.sim_weight * dsim[0]
    grads = backward(dtheta.astype(dt), params, cfg, cache)
    return loss, grads


def infer(frame: Frame2D, subvol: Volume3D, params: dict, cfg: FvrNetConfig,
          dtype=np.float64):
    """Timed single forward pass -> (RigidParams, wall seconds).

    dtype=np.float32 runs the pass at single precision (documented
    tolerance: predictions match the 64-bit pass to ~1e-3 mm/deg).
    """
    fpix = np.asarray(frame.pixels, dtype=dtype)
    vox = np.asarray(subvol.voxels, dtype=dtype)
    if dtype == np.float64:
        run_params = params
    else:
        run_params = {k: v.astype(dtype) for k, v in params.items()}
    t0 = time.perf_counter()
    theta, _ = forward(fpix, vox, run_params, cfg)
    elapsed = time.perf_counter() - t0
    return RigidParams.from_array(np.asarray(theta, dtype=np.float64)), elapsed
