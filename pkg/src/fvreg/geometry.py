"""Rigid 6-DoF transforms and the corner-point distance metric.

Conventions used throughout the package:

* A pose is six numbers ``(tx, ty, tz, ax, ay, az)``: translations in
  millimeters, rotations in degrees about the x, y and z axes.
* The matrix form is ``T = Translate(tx,ty,tz) @ Rz(az) @ Ry(ay) @ Rx(ax)``,
  i.e. intrinsic z-y-x order, rotating about the coordinate origin.  The
  origin coincides with the volume center, so all rotations pivot there.
* Degrees (not radians) keep rotation magnitudes commensurate with
  millimeter translations, which matters for optimizer step scaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GimbalLockError

__all__ = [
    "RigidParams",
    "HomTransform",
    "params_to_matrix",
    "matrix_to_params",
    "compose",
    "inverse",
    "relative_params",
    "apply_relative",
    "slice_corners",
    "corner_distance_error",
    "hom_to_text",
    "hom_from_text",
]

# |cos(ay)| below this means the Euler extraction is ill-conditioned
GIMBAL_EPS = 1e-7


def _wrap_degrees(a: float) -> float:
    """Map an angle into [-180, 180)."""
    return (a + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class RigidParams:
    """Six rigid transform parameters: mm translations, degree rotations."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    az: float = 0.0

    def __post_init__(self):
        vals = (self.tx, self.ty, self.tz, self.ax, self.ay, self.az)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite rigid parameters: {vals}")
        for name in ("ax", "ay", "az"):
            object.__setattr__(self, name, _wrap_degrees(float(getattr(self, name))))
        for name in ("tx", "ty", "tz"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.ax, self.ay, self.az])

    @classmethod
    def from_array(cls, a) -> "RigidParams":
        a = np.asarray(a, dtype=float)
        if a.shape != (6,):
            raise ValueError(f"expected 6 parameters, got shape {a.shape}")
        return cls(*a.tolist())


@dataclass(frozen=True)
class HomTransform:
    """4x4 rigid homogeneous matrix (orthonormal rotation block, det +1)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError(f"last row must be exactly [0,0,0,1], got {m[3]}")
        r = m[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation block is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation block determinant is not +1 within 1e-9")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "HomTransform":
        return cls(np.eye(4))

    @property
    def rotation(self) -> np.ndarray:
        return self.m[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.m[:3, 3]


def _rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(p: RigidParams) -> np.ndarray:
    """3x3 rotation block Rz(az) @ Ry(ay) @ Rx(ax)."""
    return _rot_z(p.az) @ _rot_y(p.ay) @ _rot_x(p.ax)


def rotation_derivatives(p: RigidParams) -> np.ndarray:
    """d(rotation block)/d(angle in degrees), stacked (3, 3, 3) for ax, ay, az."""
    rx, ry, rz = _rot_x(p.ax), _rot_y(p.ay), _rot_z(p.az)
    cx, sx = math.cos(math.radians(p.ax)), math.sin(math.radians(p.ax))
    cy, sy = math.cos(math.radians(p.ay)), math.sin(math.radians(p.ay))
    cz, sz = math.cos(math.radians(p.az)), math.sin(math.radians(p.az))
    dx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    dy = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    dz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    scale = math.pi / 180.0  # parameters are degrees
    return np.stack([rz @ ry @ dx, rz @ dy @ rx, dz @ ry @ rx]) * scale


def params_to_matrix(p: RigidParams) -> HomTransform:
    """Homogeneous matrix Translate(t) @ Rz @ Ry @ Rx for the pose."""
    m = np.eye(4)
    m[:3, :3] = rotation_matrix(p)
    m[:3, 3] = (p.tx, p.ty, p.tz)
    return HomTransform(m)


def matrix_to_params(t: HomTransform) -> RigidParams:
    """Invert params_to_matrix.

    Raises GimbalLockError when |cos(ay)| < 1e-7; the caller decides how
    to fall back.  Away from that set the round trip is exact to 1e-9.
    """
    r = t.rotation
    cy = math.hypot(r[2, 1], r[2, 2])  # |cos(ay)|
    if cy < GIMBAL_EPS:
        raise GimbalLockError(f"|cos(ay)| = {cy:.3e} is below {GIMBAL_EPS:.0e}")
    ay = math.degrees(math.atan2(-r[2, 0], cy))
    ax = math.degrees(math.atan2(r[2, 1], r[2, 2]))
    az = math.degrees(math.atan2(r[1, 0], r[0, 0]))
    tx, ty, tz = t.translation
    return RigidParams(tx, ty, tz, ax, ay, az)


def compose(a: HomTransform, b: HomTransform) -> HomTransform:
    """Matrix product a @ b (apply b first, then a)."""
    return HomTransform(a.m @ b.m)


def inverse(t: HomTransform) -> HomTransform:
    """Rigid inverse via the transposed rotation block."""
    r = t.rotation.T
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = -r @ t.translation
    return HomTransform(m)


def relative_params(theta_n: RigidParams, theta_init: RigidParams) -> RigidParams:
    """Pose of theta_n expressed in theta_init's frame.

    Satisfies params_to_matrix(theta_init) @ params_to_matrix(result)
    == params_to_matrix(theta_n).  Propagates GimbalLockError.
    """
    rel = compose(inverse(params_to_matrix(theta_init)), params_to_matrix(theta_n))
    return matrix_to_params(rel)


def apply_relative(theta_init: RigidParams, delta: RigidParams) -> RigidParams:
    """Inverse of relative_params: compose delta inside theta_init's frame."""
    full = compose(params_to_matrix(theta_init), params_to_matrix(delta))
    return matrix_to_params(full)


def plane_coords(height_px: int, width_px: int, spacing_mm: float):
    """Centered physical (x, y) coordinates of a pixel lattice in the z=0 plane."""
    xs = (np.arange(width_px) - (width_px - 1) / 2.0) * spacing_mm
    ys = (np.arange(height_px) - (height_px - 1) / 2.0) * spacing_mm
    return xs, ys


def slice_corners(
    theta: RigidParams, height_px: int, width_px: int, spacing_mm: float
) -> np.ndarray:
    """Physical corners (4, 3) of the transformed sampling rectangle.

    Corner order: (row, col) = (0,0), (0,W-1), (H-1,0), (H-1,W-1).
    """
    if height_px < 1 or width_px < 1:
        raise ValueError("plane dimensions must be >= 1")
    xs, ys = plane_coords(height_px, width_px, spacing_mm)
    local = np.array(
        [
            [xs[0], ys[0], 0.0],
            [xs[-1], ys[0], 0.0],
            [xs[0], ys[-1], 0.0],
            [xs[-1], ys[-1], 0.0],
        ]
    )
    t = params_to_matrix(theta)
    return local @ t.rotation.T + t.translation


def corner_distance_error(
    theta_a: RigidParams,
    theta_b: RigidParams,
    height_px: int,
    width_px: int,
    spacing_mm: float,
) -> float:
    """Mean Euclidean distance (mm) between corresponding plane corners."""
    ca = slice_corners(theta_a, height_px, width_px, spacing_mm)
    cb = slice_corners(theta_b, height_px, width_px, spacing_mm)
    return float(np.mean(np.linalg.norm(ca - cb, axis=1)))


def hom_to_text(t: HomTransform) -> str:
    """Serialize as 16 ASCII decimals, row-major, whitespace-separated."""
    return " ".join(repr(v) for v in t.m.ravel())


def hom_from_text(text: str) -> HomTransform:
    """Parse the 16-number serialization produced by hom_to_text."""
    vals = [float(tok) for tok in text.split()]
    if len(vals) != 16:
        raise ValueError(f"expected 16 numbers, got {len(vals)}")
    return HomTransform(np.array(vals).reshape(4, 4))
