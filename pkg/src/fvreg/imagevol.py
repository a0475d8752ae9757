"""Image containers, synthetic phantom/sweep generation, and file I/O.

Physical conventions: a volume's voxel (k, i, j) (depth, row, col) sits at
physical (x, y, z) = ((j - cx)*sx, (i - cy)*sy, (k - cz)*sz) millimeters,
where (cz, cy, cx) is the volume's center voxel (default: the geometric
center (dim-1)/2 per axis).  Frames are square 2D images with isotropic
in-plane spacing, sampled on the z=0 plane of their pose.

Generated voxel and pixel values are stored at 32-bit float precision so
the .fvr file format (32-bit payload) round-trips bit-exactly; all
downstream arithmetic is done in 64-bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    DimensionMismatchError,
    OutOfBoundsError,
    TooSmallError,
)
from .geometry import RigidParams, params_to_matrix, rotation_matrix, slice_corners

__all__ = [
    "Frame2D",
    "Volume3D",
    "SweepDataset",
    "SubvolumeSpec",
    "center_crop_frame",
    "crop_subvolume",
    "normalize_intensity",
    "phantom_generate",
    "sweep_simulate",
    "save_volume",
    "load_volume",
    "save_frame",
    "load_frame",
    "save_sweep",
    "load_sweep",
]

VOLUME_MAGIC = b"FVRVOL1"
POSES_HEADER = "index,tx,ty,tz,ax,ay,az"


@dataclass
class Frame2D:
    """Dense 2D image with isotropic in-plane spacing (mm/pixel)."""

    pixels: np.ndarray
    spacing: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise DimensionMismatchError(f"frame must be 2D, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("frame contains non-finite pixels")
        self.spacing = float(self.spacing)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Volume3D:
    """Dense 3D image, (depth, height, width) with per-axis spacing (sz, sy, sx).

    ``center`` is the voxel coordinate (cz, cy, cx) of the physical origin;
    None means the geometric center (dim-1)/2.  Subvolume crops use an
    off-center value so their reference slice lands exactly on a voxel slab.
    """

    voxels: np.ndarray
    spacing: tuple = (0.5, 0.5, 0.5)
    center: tuple | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise DimensionMismatchError(f"volume must be 3D, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite voxels")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"bad spacing {self.spacing}")
        if self.center is None:
            d, h, w = self.voxels.shape
            self.center = ((d - 1) / 2.0, (h - 1) / 2.0, (w - 1) / 2.0)
        else:
            self.center = tuple(float(c) for c in self.center)

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    def bounds_mm(self) -> np.ndarray:
        """Interpolatable physical bounds [[xmin,xmax],[ymin,ymax],[zmin,zmax]]
        spanned by voxel centers."""
        d, h, w = self.voxels.shape
        sz, sy, sx = self.spacing
        cz, cy, cx = self.center
        return np.array(
            [
                [(0 - cx) * sx, (w - 1 - cx) * sx],
                [(0 - cy) * sy, (h - 1 - cy) * sy],
                [(0 - cz) * sz, (d - 1 - cz) * sz],
            ]
        )


@dataclass
class SweepDataset:
    """A volume plus an ordered trail of frames with known poses."""

    volume: Volume3D
    frames: list
    poses: list
    seed: int

    def __post_init__(self):
        if len(self.frames) != len(self.poses):
            raise DimensionMismatchError(
                f"{len(self.frames)} frames vs {len(self.poses)} poses"
            )

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class SubvolumeSpec:
    """Crop geometry for the registration search space around an init frame."""

    crop_d: int = 32
    crop_h: int = 128
    crop_w: int = 128
    frame_range: int = 10


def center_crop_frame(f: Frame2D, size: int = 128) -> Frame2D:
    """Centered size x size window of a frame; spacing preserved."""
    h, w = f.height, f.width
    if h < size or w < size:
        raise TooSmallError(f"frame {h}x{w} smaller than crop {size}x{size}")
    i0 = (h - size) // 2
    j0 = (w - size) // 2
    return Frame2D(f.pixels[i0 : i0 + size, j0 : j0 + size].copy(), f.spacing)


def normalize_intensity(img):
    """Min-max rescale to [0, 1]; a constant image maps to all zeros."""
    if isinstance(img, Frame2D):
        return Frame2D(_minmax(img.pixels), img.spacing)
    if isinstance(img, Volume3D):
        return Volume3D(_minmax(img.voxels), img.spacing, img.center)
    raise TypeError(f"expected Frame2D or Volume3D, got {type(img).__name__}")


def _minmax(a: np.ndarray) -> np.ndarray:
    lo = float(a.min())
    hi = float(a.max())
    if hi == lo:
        return np.zeros_like(a)
    out = (a.astype(np.float64) - lo) / (hi - lo)
    return out.astype(a.dtype)


def crop_subvolume(
    v: Volume3D, init_pose: RigidParams, spec: SubvolumeSpec = SubvolumeSpec()
):
    """Resample the registration subvolume around an initialization pose.

    The crop is axis-aligned with the init frame's axes and its depth slab
    at index crop_d//2 coincides exactly with the slice at ``init_pose``,
    so the init pose maps to the identity in subvolume coordinates.
    Returns (subvolume, world_from_subvolume transform).
    """
    from . import sampler  # local import: sampler depends on these types

    if spec.crop_d > v.depth or spec.crop_h > v.height or spec.crop_w > v.width:
        raise OutOfBoundsError("crop larger than source volume")
    sz, sy, sx = v.spacing
    cz = float(spec.crop_d // 2)
    cy = (spec.crop_h - 1) / 2.0
    cx = (spec.crop_w - 1) / 2.0
    zs = (np.arange(spec.crop_d) - cz) * sz
    ys = (np.arange(spec.crop_h) - cy) * sy
    xs = (np.arange(spec.crop_w) - cx) * sx
    local = np.stack(
        np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1
    )  # (W, H, D, 3) in (x, y, z)
    local = np.moveaxis(local, (0, 1, 2), (2, 1, 0))  # -> (D, H, W, 3)
    t = params_to_matrix(init_pose)
    world = local @ t.rotation.T + t.translation

    # convexity: the whole box is inside iff its 8 corners are
    corners = world[
        np.ix_([0, spec.crop_d - 1], [0, spec.crop_h - 1], [0, spec.crop_w - 1])
    ].reshape(-1, 3)
    bounds = v.bounds_mm()
    if np.any(corners < bounds[:, 0] - 1e-9) or np.any(corners > bounds[:, 1] + 1e-9):
        raise OutOfBoundsError("subvolume crop box exits the source volume")

    values, inside = sampler.trilinear_points(v, world.reshape(-1, 3))
    if not inside.all():
        raise OutOfBoundsError("subvolume sample points exit the source volume")
    sub = Volume3D(
        values.reshape(spec.crop_d, spec.crop_h, spec.crop_w),
        spacing=v.spacing,
        center=(cz, cy, cx),
    )
    return sub, t


# ---------------------------------------------------------------------------
# synthetic data generation


def phantom_generate(
    seed: int,
    depth: int = 96,
    height: int = 176,
    width: int = 176,
    spacing=(0.5, 0.5, 0.5),
    speckle_amplitude: float = 0.08,
) -> Volume3D:
    """Deterministic smooth test volume: Gaussian blobs plus band-limited speckle.

    The blob field is smooth enough that finite-difference gradient checks
    on resampled slices are well-conditioned; speckle adds low-amplitude
    high-frequency texture (<= 0.1 after normalization) so similarity
    landscapes are not degenerate.
    """
    if min(depth, height, width) < 48:
        raise ValueError("phantom dims must be >= 48 per axis")
    rng = np.random.default_rng(seed)
    sz, sy, sx = (float(s) for s in spacing)
    zs = (np.arange(depth) - (depth - 1) / 2.0) * sz
    ys = (np.arange(height) - (height - 1) / 2.0) * sy
    xs = (np.arange(width) - (width - 1) / 2.0) * sx
    extents = (zs[-1] - zs[0], ys[-1] - ys[0], xs[-1] - xs[0])

    base = np.zeros((depth, height, width))
    n_blobs = int(rng.integers(5, 16))
    for _ in range(n_blobs):
        ctr = [rng.uniform(-0.35, 0.35) * e for e in extents]
        sig = [rng.uniform(0.08, 0.22) * e for e in extents]
        amp = rng.uniform(0.35, 1.0) * (1.0 if rng.uniform() < 0.7 else -1.0)
        gz = np.exp(-0.5 * ((zs - ctr[0]) / sig[0]) ** 2)
        gy = np.exp(-0.5 * ((ys - ctr[1]) / sig[1]) ** 2)
        gx = np.exp(-0.5 * ((xs - ctr[2]) / sig[2]) ** 2)
        base += amp * gz[:, None, None] * gy[None, :, None] * gx[None, None, :]
    base = _minmax(base)

    if speckle_amplitude > 0.0:
        noise = rng.standard_normal((depth, height, width))
        fz = np.fft.fftfreq(depth)[:, None, None]
        fy = np.fft.fftfreq(height)[None, :, None]
        fx = np.fft.rfftfreq(width)[None, None, :]
        # gaussian low-pass, ~1.2 voxel smoothing scale
        sigma_vox = 1.2
        filt = np.exp(-2.0 * (np.pi * sigma_vox) ** 2 * (fz**2 + fy**2 + fx**2))
        speckle = np.fft.irfftn(np.fft.rfftn(noise) * filt, s=noise.shape)
        speckle /= np.max(np.abs(speckle))
        base = _minmax(base + speckle_amplitude * speckle)

    return Volume3D(base.astype(np.float32), (sz, sy, sx))


def sweep_simulate(
    v: Volume3D,
    seed: int,
    n_frames: int = 31,
    trajectory: str = "linear",
    frame_size: int = 128,
    frame_spacing: float = 0.4,
    step_mm: float = 0.5,
    step_deg: float = 0.5,
) -> SweepDataset:
    """Simulate a tracked sweep of frames through a volume.

    linear: constant ``step_mm`` advance along the (tilted) sweep axis;
    fan: constant ``step_deg`` rotation increment about the x axis.
    Both add smooth bounded jitter (<= 0.2 mm / 0.5 deg frame-to-frame) so
    every pose component varies across the sweep.  Every frame is rendered
    by slice-sampling the volume at its pose; an OutOfBoundsError means the
    trajectory left the volume.
    """
    from . import sampler

    if n_frames < 21:
        raise ValueError("need n_frames >= 21 (two frame_range neighborhoods)")
    if trajectory not in ("linear", "fan"):
        raise ValueError(f"unknown trajectory {trajectory!r}")
    rng = np.random.default_rng(seed)

    base_ax, base_ay = rng.uniform(-4.0, 4.0, 2)
    base_az = rng.uniform(-8.0, 8.0)
    base_t = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1)])
    amps = np.array([0.7, 0.7, 0.25, 1.2, 1.2, 1.2])
    periods = rng.uniform(25.0, 45.0, 6)
    phases = rng.uniform(0.0, 2.0 * np.pi, 6)
    steps = np.arange(n_frames) - (n_frames - 1) / 2.0
    jitter = amps * np.sin(2.0 * np.pi * steps[:, None] / periods + phases)

    sweep_axis = rotation_matrix(RigidParams(0, 0, 0, base_ax, base_ay, base_az))[:, 2]
    poses = []
    for i in range(n_frames):
        jt = jitter[i]
        ax, ay, az = base_ax + jt[3], base_ay + jt[4], base_az + jt[5]
        t = base_t + jt[:3]
        if trajectory == "linear":
            t = t + sweep_axis * (steps[i] * step_mm)
        else:
            ax = ax + steps[i] * step_deg
        poses.append(RigidParams(t[0], t[1], t[2], ax, ay, az))

    bounds = v.bounds_mm()
    frames = []
    for pose in poses:
        corners = slice_corners(pose, frame_size, frame_size, frame_spacing)
        if np.any(corners < bounds[:, 0] - 1e-9) or np.any(
            corners > bounds[:, 1] + 1e-9
        ):
            raise OutOfBoundsError(f"frame at {pose} exits the volume")
        grid = sampler.affine_grid(pose, frame_size, frame_size, frame_spacing)
        sampled = sampler.resample(v, grid)
        frames.append(
            Frame2D(sampled.image.pixels.astype(np.float32), frame_spacing)
        )
    return SweepDataset(volume=v, frames=frames, poses=poses, seed=int(seed))


# ---------------------------------------------------------------------------
# file formats


def save_volume(v: Volume3D, path):
    """Write the .fvr volume format (ASCII header + little-endian f32 payload)."""
    payload = np.ascontiguousarray(v.voxels, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC + b"\n")
        fh.write(f"{v.depth} {v.height} {v.width}\n".encode("ascii"))
        sz, sy, sx = v.spacing
        fh.write(f"{sz!r} {sy!r} {sx!r}\n".encode("ascii"))
        fh.write(b"\n")
        fh.write(payload.tobytes())


def load_volume(path) -> Volume3D:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != VOLUME_MAGIC:
            raise BadMagicError(f"expected {VOLUME_MAGIC!r}, got {magic!r}")
        try:
            d, h, w = (int(tok) for tok in fh.readline().split())
            sz, sy, sx = (float(tok) for tok in fh.readline().split())
        except ValueError as exc:
            raise DimensionMismatchError(f"malformed header in {path}") from exc
        if fh.readline() not in (b"\n", b"\r\n"):
            raise DimensionMismatchError(f"missing blank separator line in {path}")
        payload = fh.read()
    expected = d * h * w * 4
    if len(payload) != expected:
        raise DimensionMismatchError(
            f"payload is {len(payload)} bytes, expected {expected}"
        )
    voxels = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    return Volume3D(voxels, (sz, sy, sx))


def save_frame(f: Frame2D, path):
    """Frames reuse the volume format with depth 1."""
    save_volume(Volume3D(f.pixels[None], (f.spacing,) * 3), path)


def load_frame(path) -> Frame2D:
    v = load_volume(path)
    if v.depth != 1:
        raise DimensionMismatchError(f"frame file has depth {v.depth}, expected 1")
    return Frame2D(v.voxels[0], v.spacing[1])


def save_sweep(sweep: SweepDataset, dirpath):
    """Write a sweep directory: volume.fvr, frames/NNNN.fvr, poses.csv, meta.json."""
    os.makedirs(os.path.join(dirpath, "frames"), exist_ok=True)
    save_volume(sweep.volume, os.path.join(dirpath, "volume.fvr"))
    for i, frame in enumerate(sweep.frames):
        save_frame(frame, os.path.join(dirpath, "frames", f"{i:04d}.fvr"))
    lines = [POSES_HEADER]
    for i, p in enumerate(sweep.poses):
        lines.append(f"{i},{p.tx!r},{p.ty!r},{p.tz!r},{p.ax!r},{p.ay!r},{p.az!r}")
    with open(os.path.join(dirpath, "poses.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(dirpath, "meta.json"), "w") as fh:
        json.dump({"seed": sweep.seed}, fh)


def load_sweep(dirpath) -> SweepDataset:
    volume = load_volume(os.path.join(dirpath, "volume.fvr"))
    with open(os.path.join(dirpath, "poses.csv")) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != POSES_HEADER:
        raise DimensionMismatchError(f"bad poses.csv header in {dirpath}")
    poses = []
    for ln in lines[1:]:
        toks = ln.split(",")
        if len(toks) != 7:
            raise DimensionMismatchError(f"bad poses.csv row: {ln!r}")
        poses.append(RigidParams(*(float(t) for t in toks[1:])))
    frames = []
    for i in range(len(poses)):
        frames.append(load_frame(os.path.join(dirpath, "frames", f"{i:04d}.fvr")))
    meta_path = os.path.join(dirpath, "meta.json")
    seed = 0
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            seed = int(json.load(fh).get("seed", 0))
    return SweepDataset(volume=volume, frames=frames, poses=poses, seed=seed)
