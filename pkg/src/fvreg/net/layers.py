"""Neural-net layer primitives on plain numpy arrays.

Tensors are per-sample and channels-first: (C, H, W) for 2D, (C, D, H, W)
for 3D.  Convolutions are stride-1 cross-correlations with zero padding
that preserves spatial dims (odd kernels).  Every forward has a matching
backward returning input/parameter gradients; all are exercised against
central finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatchError

__all__ = [
    "conv2d_forward",
    "conv2d_backward",
    "conv3d_forward",
    "conv3d_backward",
    "relu",
    "relu_backward",
    "avgpool2",
    "avgpool2_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "fully_connected",
    "fully_connected_backward",
    "AdamState",
    "adam_step",
]


def _check_conv_shapes(x, w, b, ndim):
    if x.ndim != ndim + 1 or w.ndim != ndim + 2:
        raise ShapeMismatchError(f"bad conv ranks: x{x.shape}, w{w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeMismatchError(
            f"input channels {x.shape[0]} != kernel channels {w.shape[1]}"
        )
    if b.shape != (w.shape[0],):
        raise ShapeMismatchError(f"bias shape {b.shape} != ({w.shape[0]},)")
    if any(k % 2 == 0 for k in w.shape[2:]):
        raise ShapeMismatchError(f"kernels must be odd, got {w.shape[2:]}")


def _im2col(xp: np.ndarray, kernel, spatial):
    """Lay the padded input out as (Cin*prod(kernel), prod(spatial)) columns."""
    win = np.lib.stride_tricks.sliding_window_view(
        xp, kernel, axis=tuple(range(1, xp.ndim))
    )
    n = len(kernel)
    order = (0,) + tuple(range(1 + n, 1 + 2 * n)) + tuple(range(1, 1 + n))
    return win.transpose(order).reshape(
        xp.shape[0] * int(np.prod(kernel)), int(np.prod(spatial))
    )


def _conv_forward(x, w, b):
    cin, *spatial = x.shape
    cout = w.shape[0]
    kernel = w.shape[2:]
    xp = np.pad(x, [(0, 0)] + [(k // 2, k // 2) for k in kernel])
    col = _im2col(xp, kernel, spatial)
    out = w.reshape(cout, -1) @ col + b[:, None]
    return out.reshape((cout, *spatial))


def _conv_backward(x, w, dout):
    cin, *spatial = x.shape
    cout = w.shape[0]
    kernel = w.shape[2:]
    pads = [k // 2 for k in kernel]
    xp = np.pad(x, [(0, 0)] + [(p, p) for p in pads])
    col = _im2col(xp, kernel, spatial)
    dout2 = dout.reshape(cout, -1)
    dw = (dout2 @ col.T).reshape(w.shape)
    db = dout2.sum(axis=1)
    dxcol = (w.reshape(cout, -1).T @ dout2).reshape((cin,) + kernel + tuple(spatial))
    dxp = np.zeros_like(xp)
    for tap in np.ndindex(*kernel):
        sl = (slice(None),) + tuple(slice(t, t + s) for t, s in zip(tap, spatial))
        dxp[sl] += dxcol[(slice(None),) + tap]
    dx = dxp[(slice(None),) + tuple(slice(p, p + s) for p, s in zip(pads, spatial))]
    return dx, dw, db


def conv2d_forward(x, w, b):
    """x (Cin, H, W), w (Cout, Cin, kh, kw), b (Cout,) -> (Cout, H, W)."""
    _check_conv_shapes(x, w, b, 2)
    return _conv_forward(x, w, b)


def conv2d_backward(x, w, dout):
    """Gradients (dx, dw, db) for conv2d_forward."""
    return _conv_backward(x, w, dout)


def conv3d_forward(x, w, b):
    """x (Cin, D, H, W), w (Cout, Cin, kd, kh, kw), b (Cout,) -> (Cout, D, H, W)."""
    _check_conv_shapes(x, w, b, 3)
    return _conv_forward(x, w, b)


def conv3d_backward(x, w, dout):
    """Gradients (dx, dw, db) for conv3d_forward."""
    return _conv_backward(x, w, dout)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0.0)


def _pool_axis(x, axis):
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    k = n // 2
    body = 0.5 * (x[0 : 2 * k : 2] + x[1 : 2 * k : 2])
    out = np.concatenate([body, x[2 * k :]], axis=0) if n % 2 else body
    return np.moveaxis(out, 0, axis)


def _pool_axis_backward(dout, n, axis):
    dout = np.moveaxis(dout, axis, 0)
    k = n // 2
    dx = np.empty((n,) + dout.shape[1:], dtype=dout.dtype)
    dx[0 : 2 * k : 2] = 0.5 * dout[:k]
    dx[1 : 2 * k : 2] = 0.5 * dout[:k]
    if n % 2:
        dx[-1] = dout[-1]
    return np.moveaxis(dx, 0, axis)


def avgpool2(x):
    """Factor-2 average pooling over all spatial axes (ceil mode: an odd
    trailing element forms its own window)."""
    out = x
    for axis in range(1, x.ndim):
        out = _pool_axis(out, axis)
    return out


def avgpool2_backward(dout, in_shape):
    dx = dout
    # reverse the per-axis pooling sequence
    for axis in range(dx.ndim - 1, 0, -1):
        dx = _pool_axis_backward(dx, in_shape[axis], axis)
    return dx


def global_avg_pool(x):
    """(C, spatial...) -> (C,) mean over all spatial positions."""
    return x.reshape(x.shape[0], -1).mean(axis=1)


def global_avg_pool_backward(dout, in_shape):
    n = int(np.prod(in_shape[1:]))
    out = np.repeat(dout[:, None] / n, n, axis=1)
    return out.reshape(in_shape)


def fully_connected(x, w, b):
    """x (n_in,), w (n_out, n_in), b (n_out,) -> (n_out,)."""
    if x.shape != (w.shape[1],) or b.shape != (w.shape[0],):
        raise ShapeMismatchError(f"fc shapes: x{x.shape}, w{w.shape}, b{b.shape}")
    return w @ x + b


def fully_connected_backward(x, w, dout):
    return w.T @ dout, np.outer(dout, x), dout.copy()


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam update with bias correction; mutates params and state."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"grad shape {g.shape} != param {p.shape} ({name})")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, state
