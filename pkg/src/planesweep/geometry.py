"""Pinhole camera geometry: intrinsics, SE(3) poses, epipolar sampling.

Conventions, fixed across the whole package:

* integer pixel ``(x, y)`` sits at continuous coordinate ``(x, y)``; a
  bilinear footprint is valid for ``0 <= x <= width-1`` and
  ``0 <= y <= height-1`` (border coordinates included)
* a :class:`Pose` maps points from its source frame into its target frame,
  ``p_target = R @ p_source + t``
* trajectory files hold camera-to-world poses, one per line, in TUM order
  ``timestamp tx ty tz qx qy qz qw`` with the quaternion as (x, y, z, w)
* downscaling by a power-of-two factor ``s`` maps the principal point with
  ``c' = (c + 0.5)/s - 0.5`` and rounds image dimensions up (``ceil``)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError

# Projections with camera-frame z at or below this are invalid (behind or
# numerically on the camera plane).
Z_EPS = 1e-6

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"image must be at least 2x2, got {self.width}x{self.height}")

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, u: float, v: float) -> bool:
        """True if (u, v) lies inside the closed bilinear-sampling domain."""
        return 0.0 <= u <= self.width - 1 and 0.0 <= v <= self.height - 1


@dataclass(frozen=True)
class Pose:
    """Rigid transform p_target = rotation @ p_source + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (|R^T R - I| = {err:.3e})")
        det = np.linalg.det(r)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation must have det 1, got {det!r}")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_quaternion(qx: float, qy: float, qz: float, qw: float,
                        translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Pose from a unit quaternion in (x, y, z, w) order; normalized first."""
        n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
        if n == 0.0:
            raise ValueError("zero quaternion")
        x, y, z, w = qx / n, qy / n, qz / n, qw / n
        r = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        return Pose(r, np.asarray(translation, dtype=np.float64))

    def to_quaternion(self) -> tuple[float, float, float, float]:
        """Quaternion (x, y, z, w) of the rotation, w >= 0."""
        r = self.rotation
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            w = 0.25 * s
            x = (r[2, 1] - r[1, 2]) / s
            y = (r[0, 2] - r[2, 0]) / s
            z = (r[1, 0] - r[0, 1]) / s
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            w = (r[2, 1] - r[1, 2]) / s
            x = 0.25 * s
            y = (r[0, 1] + r[1, 0]) / s
            z = (r[0, 2] + r[2, 0]) / s
        elif r[1, 1] > r[2, 2]:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            w = (r[0, 2] - r[2, 0]) / s
            x = (r[0, 1] + r[1, 0]) / s
            y = 0.25 * s
            z = (r[1, 2] + r[2, 1]) / s
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            w = (r[1, 0] - r[0, 1]) / s
            x = (r[0, 2] + r[2, 0]) / s
            y = (r[1, 2] + r[2, 1]) / s
            z = 0.25 * s
        if w < 0:
            x, y, z, w = -x, -y, -z, -w
        return (float(x), float(y), float(z), float(w))

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self.compose(other))(p) == self(other(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, dirs: np.ndarray) -> np.ndarray:
        """Rotate direction vectors of shape (..., 3) (no translation)."""
        return np.asarray(dirs, dtype=np.float64) @ self.rotation.T


@dataclass(frozen=True)
class InverseDepthGrid:
    """Uniform discretization of inverse depth into k_bins bin centers."""

    k_bins: int = 256
    rho_min: float = 0.0
    rho_max: float = 4.0

    def __post_init__(self):
        if self.k_bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.k_bins}")
        if not self.rho_min < self.rho_max:
            raise ValueError(f"need rho_min < rho_max, got [{self.rho_min}, {self.rho_max}]")

    def centers(self) -> np.ndarray:
        """Bin centers; endpoints are rho_min and rho_max exactly."""
        return np.linspace(self.rho_min, self.rho_max, self.k_bins)

    @property
    def bin_width(self) -> float:
        return (self.rho_max - self.rho_min) / (self.k_bins - 1)

    def nearest_bin(self, rho) -> np.ndarray:
        """Index of the nearest bin center, clipped to range (ties to even)."""
        idx = np.rint((np.asarray(rho, dtype=np.float64) - self.rho_min) / self.bin_width)
        return np.clip(idx, 0, self.k_bins - 1).astype(np.int64)


@dataclass(frozen=True)
class EpipolarSample:
    """One candidate match location in the live image."""

    pixel: tuple[float, float]
    in_bounds: bool


def backproject(u, rho: float, intr: CameraIntrinsics):
    """Lift pixel u at inverse depth rho to a camera-frame point.

    Returns ``(point, at_infinity)``.  For rho > 0 the point is
    K^-1 [u, 1] / rho; for rho == 0 the homogeneous direction K^-1 [u, 1]
    is returned with ``at_infinity=True`` so that downstream transforms
    apply rotation only.
    """
    if rho < 0:
        raise ValueError(f"inverse depth must be nonnegative, got {rho}")
    ux, uy = float(u[0]), float(u[1])
    d = np.array([(ux - intr.cx) / intr.fx, (uy - intr.cy) / intr.fy, 1.0])
    if rho == 0:
        return d, True
    return d / rho, False


def project(p, intr: CameraIntrinsics) -> tuple[tuple[float, float], bool]:
    """Project a camera-frame point (or direction) to the image plane.

    Returns ``((u, v), valid)``; valid requires z > Z_EPS and the result
    inside the bilinear-sampling domain.  Points behind the camera get
    a nan pixel and valid=False.
    """
    x, y, z = (float(p[0]), float(p[1]), float(p[2]))
    if z <= Z_EPS:
        return (math.nan, math.nan), False
    u = intr.fx * (x / z) + intr.cx
    v = intr.fy * (y / z) + intr.cy
    return (u, v), intr.contains(u, v)


def epipolar_samples(u, grid: InverseDepthGrid, pose_live_from_ref: Pose,
                     intr_ref: CameraIntrinsics,
                     intr_live: CameraIntrinsics) -> list[EpipolarSample]:
    """Candidate match locations for reference pixel u, one per depth bin.

    Each sample is the projection into the live camera of the reference ray
    at that bin's inverse depth.  Out-of-bounds samples are flagged, never
    clamped; bin rho == 0 uses the rotation-only point at infinity.
    """
    ux, uy = float(u[0]), float(u[1])
    d = np.array([(ux - intr_ref.cx) / intr_ref.fx, (uy - intr_ref.cy) / intr_ref.fy, 1.0])
    rd = pose_live_from_ref.rotation @ d
    t = pose_live_from_ref.translation
    out = []
    for rho in grid.centers():
        q = rd + rho * t  # homogeneous live-frame point, scale rho
        thresh = Z_EPS * rho if rho > 0 else Z_EPS
        if q[2] <= thresh:
            out.append(EpipolarSample((math.nan, math.nan), False))
            continue
        su = intr_live.fx * (q[0] / q[2]) + intr_live.cx
        sv = intr_live.fy * (q[1] / q[2]) + intr_live.cy
        out.append(EpipolarSample((su, sv), intr_live.contains(su, sv)))
    return out


def epipolar_sample_grid(grid: InverseDepthGrid, pose_live_from_ref: Pose,
                         intr_ref: CameraIntrinsics, intr_live: CameraIntrinsics,
                         bins: np.ndarray | None = None):
    """Vectorized epipolar samples for every reference pixel and depth bin.

    Returns ``(coords, valid)`` with coords of shape (K, H, W, 2) holding
    (x, y) sub-pixel live-image positions and valid of shape (K, H, W).
    Invalid entries hold unusable coordinates and must be masked.
    """
    w, h = intr_ref.width, intr_ref.height
    xs = (np.arange(w, dtype=np.float64) - intr_ref.cx) / intr_ref.fx
    ys = (np.arange(h, dtype=np.float64) - intr_ref.cy) / intr_ref.fy
    dirs = np.empty((h, w, 3))
    dirs[..., 0] = xs[None, :]
    dirs[..., 1] = ys[:, None]
    dirs[..., 2] = 1.0
    rd = dirs @ pose_live_from_ref.rotation.T  # (H, W, 3)
    t = pose_live_from_ref.translation
    rhos = grid.centers() if bins is None else np.asarray(bins, dtype=np.float64)
    k = rhos.shape[0]

    q = rd[None, :, :, :] + rhos[:, None, None, None] * t[None, None, None, :]
    qz = q[..., 2]
    thresh = np.where(rhos > 0, Z_EPS * rhos, Z_EPS)[:, None, None]
    front = qz > thresh
    safe_z = np.where(front, qz, 1.0)
    coords = np.empty((k, h, w, 2))
    coords[..., 0] = intr_live.fx * (q[..., 0] / safe_z) + intr_live.cx
    coords[..., 1] = intr_live.fy * (q[..., 1] / safe_z) + intr_live.cy
    in_img = (
        (coords[..., 0] >= 0.0) & (coords[..., 0] <= intr_live.width - 1)
        & (coords[..., 1] >= 0.0) & (coords[..., 1] <= intr_live.height - 1)
    )
    return coords, front & in_img


def scale_intrinsics(intr: CameraIntrinsics, factor: int) -> CameraIntrinsics:
    """Intrinsics for an image downscaled by a power-of-two factor.

    Dimensions round up (matching the replicate-pad-to-even pyramid rule);
    the principal point follows the pixel-center convention.
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"scale factor must be a positive integer, got {factor!r}")
    if factor & (factor - 1):
        raise ValueError(f"scale factor must be a power of two, got {factor}")
    if factor == 1:
        return intr
    return CameraIntrinsics(
        fx=intr.fx / factor,
        fy=intr.fy / factor,
        cx=(intr.cx + 0.5) / factor - 0.5,
        cy=(intr.cy + 0.5) / factor - 0.5,
        width=-(-intr.width // factor),
        height=-(-intr.height // factor),
    )


def load_intrinsics(path) -> CameraIntrinsics:
    """Read intrinsics from a text file: one line "fx fy cx cy width height"."""
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataFormatError(f"{path}: expected 6 fields, got {len(parts)}")
            try:
                fx, fy, cx, cy = (float(v) for v in parts[:4])
                w, hgt = int(parts[4]), int(parts[5])
            except ValueError as e:
                raise DataFormatError(f"{path}: {e}") from e
            return CameraIntrinsics(fx, fy, cx, cy, w, hgt)
    raise DataFormatError(f"{path}: no intrinsics line found")


def save_intrinsics(intr: CameraIntrinsics, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{float(intr.fx)!r} {float(intr.fy)!r} {float(intr.cx)!r} {float(intr.cy)!r} {int(intr.width)} {int(intr.height)}\n")


def load_trajectory(path) -> list[tuple[float, Pose]]:
    """Read a TUM trajectory file as (timestamp, camera-to-world pose) pairs."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                ts, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts)
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from e
            out.append((ts, Pose.from_quaternion(qx, qy, qz, qw, (tx, ty, tz))))
    return out


def save_trajectory(entries, path) -> None:
    """Write (timestamp, camera-to-world pose) pairs in TUM format."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in entries:
            qx, qy, qz, qw = pose.to_quaternion()
            t = pose.translation
            tx, ty, tz = (float(v) for v in t)
            f.write(f"{ts:.6f} {tx!r} {ty!r} {tz!r} {qx!r} {qy!r} {qz!r} {qw!r}\n")
