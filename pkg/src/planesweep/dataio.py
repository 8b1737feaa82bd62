"""RGB-D sequence ingestion, keyframe windows, training pairs, synthetic scenes.

On-disk sequences use the TUM layout: ``rgb/<t>.png``, ``depth/<t>.png``
(16-bit, meters * depth_scale, 0 = no data), ``groundtruth.txt`` (camera-to-
world trajectory) and ``camera.txt`` (intrinsics line).  An optional
``dataset.txt`` with ``key=value`` lines can override ``depth_scale``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .depthmap import DepthMap
from .errors import DataFormatError
from .geometry import (CameraIntrinsics, Pose, load_intrinsics, load_trajectory,
                       save_intrinsics, save_trajectory)
from .learning.loss import TrainingPair

logger = logging.getLogger(__name__)

ASSOCIATION_TOLERANCE = 0.02  # seconds, TUM tooling convention
DEFAULT_DEPTH_SCALE = 5000.0

SCENE_KINDS = ("textured_plane", "repeated_texture", "stepped_boxes")


@dataclass(frozen=True)
class SequenceFrame:
    """One RGB-D frame; depth of 0 marks pixels without data."""

    timestamp: float
    rgb: np.ndarray          # (H, W, 3) uint8
    depth: np.ndarray        # (H, W) float64 meters, 0 = invalid
    pose: Pose               # camera-to-world

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.uint8)
        depth = np.asarray(self.depth, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must be H x W x 3, got {rgb.shape}")
        if depth.shape != rgb.shape[:2]:
            raise ValueError(f"depth {depth.shape} must match rgb plane {rgb.shape[:2]}")
        if np.any(depth < 0):
            raise ValueError("depth must be nonnegative (0 marks no data)")
        rgb.flags.writeable = False
        depth.flags.writeable = False
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)

    @property
    def depth_valid(self) -> np.ndarray:
        return self.depth > 0

    def depth_map(self) -> DepthMap:
        return DepthMap(self.depth, self.depth_valid)


@dataclass(frozen=True)
class Sequence:
    frames: tuple[SequenceFrame, ...]
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class KeyframeWindow:
    """A reference frame and its surrounding live frames with relative poses."""

    reference: SequenceFrame
    lives: tuple[SequenceFrame, ...]
    relative_poses: tuple[Pose, ...]  # live-from-reference, aligned with lives

    def __post_init__(self):
        if len(self.lives) != len(self.relative_poses) or not self.lives:
            raise ValueError("window needs at least one live frame with its pose")
        object.__setattr__(self, "lives", tuple(self.lives))
        object.__setattr__(self, "relative_poses", tuple(self.relative_poses))


def _timestamps_from_dir(path) -> dict[float, str]:
    out = {}
    for name in sorted(os.listdir(path)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in (".png", ".ppm"):
            continue
        try:
            out[float(stem)] = os.path.join(path, name)
        except ValueError:
            logger.warning("skipping %s: filename is not a timestamp", name)
    return out


def _nearest(ts: float, keys: np.ndarray):
    i = int(np.argmin(np.abs(keys - ts)))
    return keys[i], abs(keys[i] - ts)


def load_rgb_image(path) -> np.ndarray:
    """Read a PNG or PPM as an H x W x 3 uint8 array."""
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def _read_depth_png(path, scale: float) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise DataFormatError(f"{path}: expected single-channel 16-bit depth PNG")
    return arr.astype(np.float64) / scale


def _read_dataset_config(dirpath) -> dict[str, str]:
    cfg_path = os.path.join(dirpath, "dataset.txt")
    out: dict[str, str] = {}
    if os.path.exists(cfg_path):
        with open(cfg_path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#") or "=" not in line:
                    continue
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def load_tum_sequence(dirpath, tolerance: float = ASSOCIATION_TOLERANCE) -> Sequence:
    """Load a TUM-layout directory, associating rgb/depth/pose by timestamp.

    Frames missing a depth image or trajectory entry within ``tolerance``
    seconds are dropped (a warning reports the count).
    """
    rgb_dir = os.path.join(dirpath, "rgb")
    depth_dir = os.path.join(dirpath, "depth")
    traj_path = os.path.join(dirpath, "groundtruth.txt")
    cam_path = os.path.join(dirpath, "camera.txt")
    for p in (rgb_dir, depth_dir, traj_path, cam_path):
        if not os.path.exists(p):
            raise DataFormatError(f"sequence directory is missing {p}")

    cfg = _read_dataset_config(dirpath)
    scale = float(cfg.get("depth_scale", DEFAULT_DEPTH_SCALE))
    intr = load_intrinsics(cam_path)
    rgbs = _timestamps_from_dir(rgb_dir)
    depths = _timestamps_from_dir(depth_dir)
    traj = load_trajectory(traj_path)
    if not rgbs or not depths or not traj:
        raise DataFormatError(f"{dirpath}: empty rgb/, depth/ or trajectory")

    depth_keys = np.array(sorted(depths))
    traj_keys = np.array([t for t, _ in traj])
    traj_map = dict(traj)

    frames = []
    dropped = 0
    for ts in sorted(rgbs):
        dk, derr = _nearest(ts, depth_keys)
        tk, terr = _nearest(ts, traj_keys)
        if derr > tolerance or terr > tolerance:
            dropped += 1
            continue
        frames.append(SequenceFrame(
            timestamp=ts,
            rgb=load_rgb_image(rgbs[ts]),
            depth=_read_depth_png(depths[dk], scale),
            pose=traj_map[tk],
        ))
    if dropped:
        logger.warning("dropped %d of %d frames without association within %.3f s",
                       dropped, len(rgbs), tolerance)
    if not frames:
        raise DataFormatError(f"{dirpath}: no frame could be associated")
    return Sequence(tuple(frames), intr)


def save_tum_sequence(seq: Sequence, dirpath,
                      depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    """Write a sequence in the TUM layout (depth quantized to 1/depth_scale m)."""
    rgb_dir = os.path.join(dirpath, "rgb")
    depth_dir = os.path.join(dirpath, "depth")
    os.makedirs(rgb_dir, exist_ok=True)
    os.makedirs(depth_dir, exist_ok=True)
    for fr in seq.frames:
        name = f"{fr.timestamp:.6f}.png"
        Image.fromarray(fr.rgb).save(os.path.join(rgb_dir, name), format="PNG")
        q = np.clip(np.rint(fr.depth * depth_scale), 0, 65535).astype(np.uint16)
        Image.fromarray(q).save(os.path.join(depth_dir, name), format="PNG")
    save_trajectory([(fr.timestamp, fr.pose) for fr in seq.frames],
                    os.path.join(dirpath, "groundtruth.txt"))
    save_intrinsics(seq.intrinsics, os.path.join(dirpath, "camera.txt"))
    if depth_scale != DEFAULT_DEPTH_SCALE:
        with open(os.path.join(dirpath, "dataset.txt"), "w", encoding="utf-8") as f:
            f.write(f"depth_scale={depth_scale!r}\n")


def relative_pose(world_from_ref: Pose, world_from_live: Pose) -> Pose:
    """Live-from-reference transform from two camera-to-world poses."""
    return world_from_live.inverse().compose(world_from_ref)


def make_window(seq: Sequence, ref_index: int, half_width: int = 30,
                stride: int = 1) -> KeyframeWindow:
    """Build the keyframe window of up to half_width past and future frames.

    Indices are truncated at the sequence ends.  Raises ValueError when no
    live frame remains.
    """
    if not 0 <= ref_index < len(seq):
        raise ValueError(f"reference index {ref_index} outside sequence of {len(seq)}")
    if half_width < 1:
        raise ValueError("half_width must be at least 1 (a window needs live frames)")
    if stride < 1:
        raise ValueError("stride must be positive")
    ref = seq.frames[ref_index]
    lives = []
    poses = []
    for k in range(-half_width, half_width + 1):
        i = ref_index + k * stride
        if k == 0 or not 0 <= i < len(seq):
            continue
        fr = seq.frames[i]
        lives.append(fr)
        poses.append(relative_pose(ref.pose, fr.pose))
    if not lives:
        raise ValueError("window is empty after truncation")
    return KeyframeWindow(ref, tuple(lives), tuple(poses))


def make_training_pairs(seq: Sequence, gap: int = 30) -> list[TrainingPair]:
    """Pairs (i, i+gap) with the reference frame's inverse depth as target."""
    if gap < 1:
        raise ValueError("gap must be positive")
    pairs = []
    for i in range(len(seq) - gap):
        ref = seq.frames[i]
        live = seq.frames[i + gap]
        valid = ref.depth_valid
        rho = np.where(valid, 1.0 / np.where(valid, ref.depth, 1.0), 0.0)
        pairs.append(TrainingPair(
            ref_rgb=ref.rgb,
            live_rgb=live.rgb,
            pose=relative_pose(ref.pose, live.pose),
            gt_rho=rho,
            gt_valid=valid,
        ))
    return pairs


# ---------------------------------------------------------------------------
# Synthetic scenes with exact analytic ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    """Parameters for the ray-cast fixture generator.

    The camera path translates along world x with identity rotation, centered
    on the middle frame; pixel dirs are cast through the pinhole model and
    intersected with fronto-parallel geometry, so per-pixel depth is exact.
    Fields beyond the common block apply only to their scene kind.
    """

    kind: str = "textured_plane"
    width: int = 64
    height: int = 48
    fx: float = 64.0
    fy: float = 64.0
    n_frames: int = 11
    baseline: float = 0.02        # per-frame x step in meters
    depth: float = 2.0            # plane depth in meters
    noise_sigma: float = 0.0      # additive Gaussian RGB noise, 0-255 scale
    seed: int = 0
    # repeated_texture only:
    stripe_period: float = 0.22   # world meters
    stripe_amp: float = 80.0
    envelope_amp: float = 12.0
    envelope_periods: tuple[float, float] = (0.9, 1.31)
    # stepped_boxes only: (x0, x1, y0, y1, depth) in world meters
    boxes: tuple[tuple[float, float, float, float, float], ...] = (
        (-0.35, 0.05, -0.3, 0.1, 1.4),
        (0.15, 0.55, -0.1, 0.35, 1.0),
    )

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        if self.n_frames < 1:
            raise ValueError("need at least one frame")
        if self.depth <= 0:
            raise ValueError("plane depth must be positive")
        if self.kind == "stepped_boxes" and any(b[4] <= 0 for b in self.boxes):
            raise ValueError("box depths must be positive")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, (self.width - 1) / 2.0,
                                (self.height - 1) / 2.0, self.width, self.height)


def _plane_texture(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Smooth non-periodic RGB texture over world coordinates (0..255 floats)."""
    r = 127.5 + 55 * np.sin(2 * np.pi * x / 0.71 + 0.9) + 35 * np.sin(2 * np.pi * y / 0.53 + 2.1)
    g = 127.5 + 50 * np.sin(2 * np.pi * (x + y) / 0.37 + 1.3) + 30 * np.sin(2 * np.pi * x / 1.13)
    b = 127.5 + 45 * np.sin(2 * np.pi * (x - 0.7 * y) / 0.47) + 35 * np.sin(2 * np.pi * y / 0.97 + 0.4)
    return np.stack([r, g, b], axis=-1)


def _striped_texture(x: np.ndarray, y: np.ndarray, cfg: SceneConfig,
                     phases: np.ndarray) -> np.ndarray:
    """Periodic stripes plus a weak low-frequency envelope (same on all channels).

    The stripes repeat exactly, so single-channel matching along x is
    ambiguous; only the envelope (and image noise) distinguishes the aliases.
    """
    stripes = cfg.stripe_amp * np.cos(2 * np.pi * x / cfg.stripe_period)
    e1, e2 = cfg.envelope_periods
    env = cfg.envelope_amp * (np.cos(2 * np.pi * x / e1 + phases[0])
                              + np.cos(2 * np.pi * x / e2 + phases[1]))
    env = env + 0.5 * cfg.envelope_amp * np.cos(2 * np.pi * y / (0.8 * e1) + phases[2])
    v = 127.5 + stripes + env
    return np.stack([v, v, v], axis=-1)


def synth_scene(cfg: SceneConfig) -> Sequence:
    """Render an RGB-D sequence with exact per-pixel depth from analytic geometry."""
    intr = cfg.intrinsics()
    rng = np.random.default_rng(cfg.seed)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    xs = (np.arange(cfg.width, dtype=np.float64) - intr.cx) / intr.fx
    ys = (np.arange(cfg.height, dtype=np.float64) - intr.cy) / intr.fy
    dir_x = np.broadcast_to(xs[None, :], (cfg.height, cfg.width))
    dir_y = np.broadcast_to(ys[:, None], (cfg.height, cfg.width))

    frames = []
    for i in range(cfg.n_frames):
        cam_x = (i - (cfg.n_frames - 1) / 2.0) * cfg.baseline
        if cfg.kind == "stepped_boxes":
            depth = np.full((cfg.height, cfg.width), cfg.depth)
            surface = np.zeros((cfg.height, cfg.width), dtype=np.int64)
            for bi, (x0, x1, y0, y1, bd) in enumerate(cfg.boxes, start=1):
                wx = cam_x + bd * dir_x
                wy = bd * dir_y
                hit = (wx >= x0) & (wx <= x1) & (wy >= y0) & (wy <= y1) & (bd < depth)
                depth = np.where(hit, bd, depth)
                surface = np.where(hit, bi, surface)
            wx = cam_x + depth * dir_x
            wy = depth * dir_y
            rgb = _plane_texture(wx, wy)
            # shift box textures so faces are visually distinct from the backdrop
            rgb = rgb + surface[..., None] * 40.0 * np.sin(wx * 9.0 + wy * 7.0)[..., None]
        else:
            depth = np.full((cfg.height, cfg.width), cfg.depth)
            wx = cam_x + cfg.depth * dir_x
            wy = cfg.depth * dir_y
            if cfg.kind == "textured_plane":
                rgb = _plane_texture(wx, wy)
            else:
                rgb = _striped_texture(wx, wy, cfg, phases)
        if cfg.noise_sigma > 0:
            rgb = rgb + rng.normal(0.0, cfg.noise_sigma, size=rgb.shape)
        rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
        pose = Pose(np.eye(3), np.array([cam_x, 0.0, 0.0]))
        frames.append(SequenceFrame(float(i), rgb, depth, pose))
    return Sequence(tuple(frames), intr)
