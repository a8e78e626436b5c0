"""Dataset ingestion, keyframe selection, sliding windows and preprocessing.

On-disk layout::

    root/scenes/<scene_id>/image/000000.png    8-bit RGB
    root/scenes/<scene_id>/cam.txt             "fx fy cx cy"
    root/scenes/<scene_id>/poses.txt           optional, 12 reals per line (3x4 camera-to-world)
    root/scenes/<scene_id>/depth/000000.png    optional, 16-bit, meters * 256, 0 = missing

A stereo rig is stored as two scenes (one per camera).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .geometry import Intrinsics, PoseSE3, relative_from_absolute

log = logging.getLogger(__name__)

DEPTH_SCALE = 256.0
DEFAULT_WINDOW = 10
DEFAULT_SIGMA = 0.3


class DatasetError(ValueError):
    """Malformed dataset content; the message names the offending file."""


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_image_png(path, image: np.ndarray) -> None:
    """Write an RGB image given as floats in [0, 1] or uint8."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")


def read_image(path) -> np.ndarray:
    """8-bit RGB image as uint8 (H, W, 3)."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DatasetError(f"{path}: cannot decode image")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_depth_png(path, depth: np.ndarray) -> None:
    """Depth in meters to 16-bit PNG (value / 256 = meters, 0 = missing)."""
    d = np.asarray(depth, dtype=np.float64)
    raw = np.clip(np.round(np.where(np.isfinite(d) & (d > 0), d, 0.0) * DEPTH_SCALE), 0, 65535)
    if not cv2.imwrite(str(path), raw.astype(np.uint16)):
        raise OSError(f"could not write {path}")


def read_depth_png(path) -> Tuple[np.ndarray, np.ndarray]:
    """(depth in meters, validity mask) from a 16-bit PNG."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None or raw.ndim != 2:
        raise DatasetError(f"{path}: cannot decode 16-bit depth image")
    raw = raw.astype(np.float64)
    return raw / DEPTH_SCALE, raw > 0


def read_intrinsics(path) -> Intrinsics:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: missing intrinsics file")
    fields = path.read_text().split()
    if len(fields) != 4:
        raise DatasetError(f"{path}: expected 'fx fy cx cy', got {len(fields)} values")
    try:
        fx, fy, cx, cy = (float(v) for v in fields)
        return Intrinsics(fx, fy, cx, cy)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def write_poses(path, poses: Sequence[np.ndarray]) -> None:
    """KITTI pose format: one 3x4 row-major camera-to-world matrix per line."""
    with open(path, "w") as fh:
        for m in poses:
            fh.write(" ".join(repr(float(v)) for v in np.asarray(m)[:3, :4].reshape(-1)) + "\n")


def read_poses(path) -> List[np.ndarray]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            vals = line.split()
            if len(vals) != 12:
                raise DatasetError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
            try:
                m = np.eye(4)
                m[:3, :4] = np.array([float(v) for v in vals]).reshape(3, 4)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            out.append(m)
    return out


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------

@dataclass
class SceneIndex:
    scene_id: str
    frame_ids: List[int]
    image_paths: List[Path]
    intrinsics: Intrinsics
    image_size: Tuple[int, int]
    poses: Optional[List[np.ndarray]] = None
    depth_paths: Optional[List[Path]] = None

    def __len__(self) -> int:
        return len(self.frame_ids)

    def subset(self, keep: Sequence[int]) -> "SceneIndex":
        keep = list(keep)
        return replace(
            self,
            frame_ids=[self.frame_ids[i] for i in keep],
            image_paths=[self.image_paths[i] for i in keep],
            poses=None if self.poses is None else [self.poses[i] for i in keep],
            depth_paths=None if self.depth_paths is None else [self.depth_paths[i] for i in keep],
        )


@dataclass
class DatasetIndex:
    root: Optional[Path] = None
    scenes: Dict[str, SceneIndex] = field(default_factory=dict)
    unfiltered: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scenes)

    def frame_count(self) -> int:
        return sum(len(s) for s in self.scenes.values())


def load_dataset(root) -> DatasetIndex:
    """Index every scene under ``root/scenes``; an absent or empty root gives an empty index."""
    root = Path(root)
    index = DatasetIndex(root=root)
    scenes_dir = root / "scenes"
    if not scenes_dir.is_dir():
        return index
    for scene_dir in sorted(p for p in scenes_dir.iterdir() if p.is_dir()):
        images = sorted((scene_dir / "image").glob("*.png"))
        K = read_intrinsics(scene_dir / "cam.txt")
        if not images:
            continue
        frame_ids = []
        for p in images:
            try:
                frame_ids.append(int(p.stem))
            except ValueError as exc:
                raise DatasetError(f"{p}: image names must be zero-padded frame numbers") from exc
        first = read_image(images[0])
        size = first.shape[:2]
        for p in images[1:]:
            hdr = cv2.imread(str(p), cv2.IMREAD_COLOR)
            if hdr is None:
                raise DatasetError(f"{p}: cannot decode image")
            if hdr.shape[:2] != size:
                raise DatasetError(f"{p}: size {hdr.shape[:2]} differs from {size}")
        poses = None
        pose_file = scene_dir / "poses.txt"
        if pose_file.exists():
            poses = read_poses(pose_file)
            if len(poses) < max(frame_ids) + 1:
                raise DatasetError(f"{pose_file}: {len(poses)} poses for frame ids up to {max(frame_ids)}")
            poses = [poses[i] for i in frame_ids]
        depth_paths = None
        if (scene_dir / "depth").is_dir():
            depth_paths = [scene_dir / "depth" / p.name for p in images]
            for p in depth_paths:
                if not p.exists():
                    raise DatasetError(f"{p}: missing depth map")
        index.scenes[scene_dir.name] = SceneIndex(scene_dir.name, frame_ids, images, K, size, poses, depth_paths)
    return index


def keyframe_filter(index: DatasetIndex, sigma: float = DEFAULT_SIGMA) -> DatasetIndex:
    """Keep a frame iff it moved at least ``sigma`` meters from the last kept frame.

    Scenes without poses pass through unchanged and are listed in
    ``unfiltered``.
    """
    out = DatasetIndex(root=index.root, unfiltered=list(index.unfiltered))
    for sid, scene in index.scenes.items():
        if scene.poses is None:
            log.warning("scene %s has no poses; keyframe filtering skipped", sid)
            if sid not in out.unfiltered:
                out.unfiltered.append(sid)
            out.scenes[sid] = scene
            continue
        kept = select_keyframes([m[:3, 3] for m in scene.poses], sigma)
        out.scenes[sid] = scene.subset(kept)
    return out


def select_keyframes(positions: Sequence[np.ndarray], sigma: float) -> List[int]:
    if len(positions) == 0:
        return []
    kept = [0]
    last = np.asarray(positions[0], float)
    for i in range(1, len(positions)):
        p = np.asarray(positions[i], float)
        if np.linalg.norm(p - last) >= sigma:
            kept.append(i)
            last = p
    return kept


@dataclass(frozen=True)
class WindowRef:
    scene_id: str
    start: int
    length: int

    @property
    def positions(self) -> range:
        return range(self.start, self.start + self.length)


def make_windows(index: DatasetIndex, n: int = DEFAULT_WINDOW, stride: int = 1) -> List[WindowRef]:
    """Forward sliding windows of ``n`` keyframes; short scenes contribute none."""
    if n < 1 or stride < 1:
        raise ValueError("window length and stride must be positive")
    out = []
    for sid, scene in index.scenes.items():
        for start in range(0, len(scene) - n + 1, stride):
            out.append(WindowRef(sid, start, n))
    return out


def epoch_order(n_windows: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded permutation of window indices for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n_windows)


# ---------------------------------------------------------------------------
# samples and preprocessing
# ---------------------------------------------------------------------------

@dataclass
class SequenceSample:
    frames: List[np.ndarray]
    intrinsics: Intrinsics
    frame_ids: List[int]
    gt_depths: Optional[List[np.ndarray]] = None
    gt_valid: Optional[List[np.ndarray]] = None
    gt_rel_poses: Optional[List[PoseSE3]] = None
    direction: str = "forward"
    scene_id: str = ""

    def __post_init__(self):
        if len(self.frame_ids) != len(self.frames):
            raise ValueError("one frame id per frame required")
        diffs = np.diff(self.frame_ids)
        if self.direction == "forward" and np.any(diffs <= 0):
            raise ValueError("forward sample ids must increase")
        if self.direction == "backward" and np.any(diffs >= 0):
            raise ValueError("backward sample ids must decrease")
        if self.gt_rel_poses is not None and len(self.gt_rel_poses) != len(self.frames) - 1:
            raise ValueError("need N-1 relative poses")

    def __len__(self) -> int:
        return len(self.frames)

    def reversed(self) -> "SequenceSample":
        """Backward-order copy; relative poses become inverses in reverse order."""
        return SequenceSample(
            frames=self.frames[::-1],
            intrinsics=self.intrinsics,
            frame_ids=self.frame_ids[::-1],
            gt_depths=None if self.gt_depths is None else self.gt_depths[::-1],
            gt_valid=None if self.gt_valid is None else self.gt_valid[::-1],
            gt_rel_poses=None if self.gt_rel_poses is None else [p.inverse() for p in self.gt_rel_poses[::-1]],
            direction="backward" if self.direction == "forward" else "forward",
            scene_id=self.scene_id,
        )

    def gt_inverse_depths(self) -> Optional[List[np.ndarray]]:
        if self.gt_depths is None:
            return None
        valid = self.gt_valid or [d > 0 for d in self.gt_depths]
        return [np.where(v, 1.0 / np.where(v, d, 1.0), 0.0) for d, v in zip(self.gt_depths, valid)]


def reverse(sample: SequenceSample) -> SequenceSample:
    return sample.reversed()


def preprocess(image: np.ndarray, K: Optional[Intrinsics] = None,
               size: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, Optional[Intrinsics]]:
    """Bilinear resize to ``size=(H, W)`` and scale to [0, 1]; rescale ``K`` to match."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"cannot preprocess image of shape {img.shape}")
    h, w = img.shape[:2]
    if img.dtype == np.uint8:
        out = img.astype(np.float64) / 255.0
    else:
        out = img.astype(np.float64)
    if size is not None and tuple(size) != (h, w):
        th, tw = size
        out = cv2.resize(out, (tw, th), interpolation=cv2.INTER_LINEAR)
        if K is not None:
            K = K.scaled(tw / w, th / h)
    return out, K


def resize_depth(depth: np.ndarray, valid: np.ndarray, size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour resize of a sparse depth map (interpolating would blend missing pixels)."""
    if depth.shape == tuple(size):
        return depth, valid
    th, tw = size
    d = cv2.resize(np.where(valid, depth, 0.0), (tw, th), interpolation=cv2.INTER_NEAREST)
    return d, d > 0


class SampleLoader:
    """Materializes windows into :class:`SequenceSample` objects, caching decoded frames."""

    def __init__(self, index: DatasetIndex, size: Optional[Tuple[int, int]] = None):
        self.index = index
        self.size = size
        self._cache: Dict[Tuple[str, int], tuple] = {}

    def frame(self, scene: SceneIndex, pos: int) -> tuple:
        key = (scene.scene_id, pos)
        if key not in self._cache:
            img, K = preprocess(read_image(scene.image_paths[pos]), scene.intrinsics, self.size)
            depth = valid = None
            if scene.depth_paths is not None:
                depth, valid = read_depth_png(scene.depth_paths[pos])
                depth, valid = resize_depth(depth, valid, img.shape[:2])
            self._cache[key] = (img, K, depth, valid)
        return self._cache[key]

    def sample(self, ref: WindowRef) -> SequenceSample:
        scene = self.index.scenes[ref.scene_id]
        items = [self.frame(scene, p) for p in ref.positions]
        frames = [it[0] for it in items]
        K = items[0][1]
        depths = [it[2] for it in items] if scene.depth_paths is not None else None
        valid = [it[3] for it in items] if scene.depth_paths is not None else None
        rel = None
        if scene.poses is not None:
            ms = [scene.poses[p] for p in ref.positions]
            rel = [relative_from_absolute(a, b) for a, b in zip(ms[:-1], ms[1:])]
        return SequenceSample(frames, K, [scene.frame_ids[p] for p in ref.positions], depths, valid, rel,
                              "forward", ref.scene_id)

    def scene_frames(self, scene_id: str) -> SequenceSample:
        scene = self.index.scenes[scene_id]
        return self.sample(WindowRef(scene_id, 0, len(scene)))
