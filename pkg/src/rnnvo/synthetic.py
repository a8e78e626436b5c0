"""Ray-cast renderer for a textured plane seen by a moving pinhole camera.

Frames are rendered independently by ray/plane intersection, so they are an
oracle for the warping code rather than a product of it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .geometry import Intrinsics, PoseSE3, relative_from_absolute, se3_matrix


@dataclass
class PlaneTexture:
    """Smooth color texture: a sum of random plane waves per channel."""

    seed: int = 0
    n_waves: int = 6
    min_wavelength: float = 0.8
    max_wavelength: float = 3.0
    _waves: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        for _ in range(3):
            theta = rng.uniform(0, np.pi, self.n_waves)
            lam = rng.uniform(self.min_wavelength, self.max_wavelength, self.n_waves)
            phase = rng.uniform(0, 2 * np.pi, self.n_waves)
            amp = rng.uniform(0.5, 1.0, self.n_waves)
            self._waves.append((np.cos(theta) * 2 * np.pi / lam, np.sin(theta) * 2 * np.pi / lam, phase, amp))

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        chans = []
        for ka, kb, phase, amp in self._waves:
            s = np.zeros_like(a)
            for i in range(len(phase)):
                s += amp[i] * np.sin(ka[i] * a + kb[i] * b + phase[i])
            chans.append(0.5 + 0.45 * s / amp.sum())
        return np.stack(chans, axis=-1)


@dataclass
class PlaneScene:
    height: int = 64
    width: int = 96
    K: Intrinsics = Intrinsics(60.0, 60.0, 47.5, 31.5)
    plane_point: tuple = (0.0, 0.0, 6.0)
    plane_normal: tuple = (0.25, -0.35, -1.0)
    texture: PlaneTexture = field(default_factory=PlaneTexture)

    def _basis(self):
        n = np.asarray(self.plane_normal, float)
        n = n / np.linalg.norm(n)
        e1 = np.cross(n, [0.0, 1.0, 0.0])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return n, e1, e2

    def render(self, cam_to_world: np.ndarray) -> tuple:
        """(image H x W x 3 in [0, 1], depth H x W in meters) for one camera."""
        n, e1, e2 = self._basis()
        p0 = np.asarray(self.plane_point, float)
        v, u = np.mgrid[0:self.height, 0:self.width].astype(float)
        rays_cam = np.stack([(u - self.K.cx) / self.K.fx, (v - self.K.cy) / self.K.fy, np.ones_like(u)], -1)
        R, c = cam_to_world[:3, :3], cam_to_world[:3, 3]
        rays = rays_cam @ R.T
        denom = rays @ n
        s = ((p0 - c) @ n) / denom
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("plane is not in front of the camera at every pixel")
        points = c + s[..., None] * rays
        rel = points - p0
        image = self.texture(rel @ e1, rel @ e2)
        return np.clip(image, 0.0, 1.0), s

    def depth_at(self, cam_to_world: np.ndarray) -> np.ndarray:
        return self.render(cam_to_world)[1]


def straight_trajectory(n_frames: int, step=(0.3, 0.0, 0.1), yaw_per_frame: float = 0.0,
                        start: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """Camera-to-world matrices for a constant-velocity camera."""
    step_pose = PoseSE3((0.0, yaw_per_frame, 0.0), step)
    m = np.eye(4) if start is None else np.asarray(start, float)
    out = [m]
    for _ in range(n_frames - 1):
        m = m @ se3_matrix(step_pose)
        out.append(m)
    return out


@dataclass
class SyntheticSequence:
    images: List[np.ndarray]
    depths: List[np.ndarray]
    cam_to_world: List[np.ndarray]
    K: Intrinsics

    @property
    def rel_poses(self) -> List[PoseSE3]:
        """``P_{t->t-1}`` for t = 1..N-1."""
        return [relative_from_absolute(a, b) for a, b in zip(self.cam_to_world[:-1], self.cam_to_world[1:])]

    def __len__(self) -> int:
        return len(self.images)


def make_sequence(n_frames: int = 10, scene: Optional[PlaneScene] = None, step=(0.3, 0.0, 0.1),
                  yaw_per_frame: float = 0.0) -> SyntheticSequence:
    scene = scene or PlaneScene()
    traj = straight_trajectory(n_frames, step, yaw_per_frame)
    images, depths = zip(*(scene.render(m) for m in traj))
    return SyntheticSequence(list(images), list(depths), traj, scene.K)


def write_scene(root, scene_id: str, seq: SyntheticSequence, with_poses: bool = True,
                with_depth: bool = True) -> Path:
    """Write a sequence in the on-disk dataset layout under ``root/scenes/<scene_id>``."""
    from .data import write_depth_png, write_image_png, write_poses

    d = Path(root) / "scenes" / scene_id
    (d / "image").mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(seq.images):
        write_image_png(d / "image" / f"{i:06d}.png", im)
    K = seq.K
    (d / "cam.txt").write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")
    if with_poses:
        write_poses(d / "poses.txt", seq.cam_to_world)
    if with_depth:
        (d / "depth").mkdir(exist_ok=True)
        for i, dep in enumerate(seq.depths):
            write_depth_png(d / "depth" / f"{i:06d}.png", dep)
    return d


def to_sample(seq: SyntheticSequence, scene_id: str = "synthetic"):
    """In-memory training sample with ground truth attached."""
    from .data import SequenceSample

    return SequenceSample(
        frames=list(seq.images), intrinsics=seq.K, frame_ids=list(range(len(seq))),
        gt_depths=list(seq.depths), gt_valid=[np.ones(d.shape, dtype=bool) for d in seq.depths],
        gt_rel_poses=seq.rel_poses, scene_id=scene_id,
    )
