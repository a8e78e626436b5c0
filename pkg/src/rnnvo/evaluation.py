"""Depth and odometry metrics, trajectory integration and alignment."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import no_grad
from .data import read_poses, write_poses
from .geometry import PoseSE3

DEPTH_CAP = 80.0
KITTI_LENGTHS = tuple(range(100, 801, 100))


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------

@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def mean(cls, items: Sequence["DepthMetrics"]) -> "DepthMetrics":
        if not items:
            raise EvaluationError("no metrics to average")
        return cls(**{k: float(np.mean([getattr(m, k) for m in items])) for k in cls.names()})


def depth_metrics(pred: np.ndarray, gt: np.ndarray, cap: float = DEPTH_CAP, scale_align: str = "median",
                  valid: Optional[np.ndarray] = None) -> DepthMetrics:
    """Error and accuracy metrics over pixels with ``0 < gt <= cap``.

    ``scale_align="median"`` multiplies the prediction by
    ``median(gt) / median(pred)`` over those pixels before clamping to ``cap``.
    """
    if scale_align not in ("none", "median"):
        raise ValueError(f"unknown scale alignment {scale_align!r}")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = (gt > 0) & (gt <= cap)
    if valid is not None:
        mask &= np.asarray(valid, bool)
    if not mask.any():
        raise EvaluationError("no valid ground-truth pixels")
    p, g = pred[mask], gt[mask]
    if np.any(~(p > 0)):
        raise EvaluationError("predicted depth must be positive")
    if scale_align == "median":
        p = p * (np.median(g) / np.median(p))
    p = np.minimum(p, cap)
    ratio = np.maximum(p / g, g / p)
    diff = p - g
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25 ** 2)),
        a3=float(np.mean(ratio < 1.25 ** 3)),
    )


def evaluate_depths(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], valids=None,
                    cap: float = DEPTH_CAP, scale_align: str = "median") -> Tuple[List[DepthMetrics], DepthMetrics]:
    """Per-frame metrics and their mean."""
    if len(preds) != len(gts):
        raise EvaluationError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    valids = valids if valids is not None else [None] * len(gts)
    rows = [depth_metrics(p, g, cap, scale_align, v) for p, g, v in zip(preds, gts, valids)]
    return rows, DepthMetrics.mean(rows)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def _as_matrix(p) -> np.ndarray:
    if isinstance(p, PoseSE3):
        return p.matrix()
    if hasattr(p, "data") and not isinstance(p, np.ndarray):
        p = p.data
    m = np.asarray(p, dtype=np.float64)
    if m.shape == (6,):
        return PoseSE3.from_vector(m).matrix()
    if m.shape == (3, 4):
        m = np.vstack([m, [0.0, 0.0, 0.0, 1.0]])
    if m.shape != (4, 4):
        raise EvaluationError(f"pose must be 4x4, 3x4 or a 6-vector, got {m.shape}")
    return m


def integrate_trajectory(rel_poses: Sequence) -> List[np.ndarray]:
    """Camera-to-world poses from relatives ``P_{t->t-1}``, with ``M_0 = I``.

    ``P_{t->t-1}`` maps points from camera t into camera t-1, so the new camera
    sits at ``M_t = M_{t-1} @ P_{t->t-1}``. No drift correction is applied.
    """
    traj = [np.eye(4)]
    for p in rel_poses:
        traj.append(traj[-1] @ _as_matrix(p))
    return traj


def relative_poses(trajectory: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Inverse of :func:`integrate_trajectory`: ``inv(M_{t-1}) @ M_t``."""
    mats = [_as_matrix(m) for m in trajectory]
    return [np.linalg.solve(a, b) for a, b in zip(mats[:-1], mats[1:])]


def scale_factor(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> float:
    """Least-squares ``s`` minimising ``sum ||s p_i - g_i||^2`` over first-frame-anchored positions."""
    P = np.array([_as_matrix(m)[:3, 3] for m in pred])
    G = np.array([_as_matrix(m)[:3, 3] for m in gt])
    P, G = P - P[0], G - G[0]
    denom = float(np.sum(P * P))
    if denom == 0.0:
        raise EvaluationError("cannot scale-align a trajectory with no translation")
    return float(np.sum(P * G)) / denom


def align(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], mode: str = "scale") -> List[np.ndarray]:
    if len(pred) != len(gt):
        raise EvaluationError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if mode == "none":
        return [_as_matrix(m).copy() for m in pred]
    if mode != "scale":
        raise ValueError(f"unknown alignment mode {mode!r}")
    s = scale_factor(pred, gt)
    mats = [_as_matrix(m) for m in pred]
    origin = mats[0][:3, 3].copy()
    out = []
    for m in mats:
        a = m.copy()
        a[:3, 3] = origin + s * (m[:3, 3] - origin)
        out.append(a)
    return out


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, accurate near zero and near pi."""
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0)))


def path_distances(trajectory: Sequence[np.ndarray]) -> np.ndarray:
    pos = np.array([_as_matrix(m)[:3, 3] for m in trajectory])
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass
class SegmentError:
    start: int
    end: int
    length: float
    t_err: float      # fraction of length
    r_err: float      # rad per meter


@dataclass
class OdometryMetrics:
    t_err: float               # percent
    r_err: float               # degrees per meter
    segments: List[SegmentError] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.segments

    def as_dict(self) -> Dict[str, float]:
        return {"t_err": self.t_err, "r_err": self.r_err, "segments": len(self.segments)}


def odometry_metrics(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                     lengths: Sequence[float] = KITTI_LENGTHS) -> OdometryMetrics:
    """Average translation (%) and rotation (deg/m) drift over sub-sequences.

    For every start frame and ladder length ``L`` the end frame is the first
    whose GT path distance reaches ``L`` past the start. Errors are measured
    on ``inv(gt_rel) @ pred_rel`` and divided by ``L``. A trajectory shorter
    than every length yields an empty result with NaN errors.
    """
    if len(pred) != len(gt):
        raise EvaluationError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    P = [_as_matrix(m) for m in pred]
    G = [_as_matrix(m) for m in gt]
    dist = path_distances(G)
    segments: List[SegmentError] = []
    n = len(G)
    for i in range(n):
        for L in lengths:
            j = int(np.searchsorted(dist, dist[i] + L, side="left"))
            if j >= n:
                continue
            gt_rel = np.linalg.solve(G[i], G[j])
            pred_rel = np.linalg.solve(P[i], P[j])
            E = np.linalg.solve(gt_rel, pred_rel)
            segments.append(SegmentError(i, j, float(L), float(np.linalg.norm(E[:3, 3])) / L,
                                         rotation_angle(E[:3, :3]) / L))
    if not segments:
        return OdometryMetrics(float("nan"), float("nan"), [])
    t = float(np.mean([s.t_err for s in segments])) * 100.0
    r = float(np.degrees(np.mean([s.r_err for s in segments])))
    return OdometryMetrics(t, r, segments)


def write_trajectory(path, trajectory: Sequence[np.ndarray]) -> None:
    write_poses(path, [_as_matrix(m) for m in trajectory])


def read_trajectory(path) -> List[np.ndarray]:
    return read_poses(path)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def write_metrics_csv(path, rows: Sequence[Tuple[str, Dict[str, float]]], aggregate: Dict[str, float]) -> None:
    """Header, one row per frame or sequence, then an ``aggregate`` row."""
    names = list(aggregate)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name"] + names)
        for name, values in rows:
            w.writerow([name] + [repr(float(values[k])) for k in names])
        w.writerow(["aggregate"] + [repr(float(aggregate[k])) for k in names])


def read_metrics_csv(path) -> Dict[str, Dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {row.pop("name"): {k: float(v) for k, v in row.items()} for row in reader}


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class SceneOutput:
    depths: List[np.ndarray]
    rel_poses: List[PoseSE3]            # P_{t->t-1}, t = 1..N-1

    @property
    def trajectory(self) -> List[np.ndarray]:
        return integrate_trajectory(self.rel_poses)


class StreamingInference:
    """Frame-by-frame inference whose hidden states persist across calls."""

    def __init__(self, model):
        self.model = model
        self.model.eval()
        self.model.reset()
        self.count = 0

    def push(self, image) -> Tuple[np.ndarray, Optional[PoseSE3]]:
        """Depth for this frame and, from the second frame on, ``P_{t->t-1}``."""
        with no_grad():
            step = self.model.step(image)
        depth = 1.0 / np.asarray(step.inverse_depth.data, dtype=np.float64)
        pose = PoseSE3.from_matrix(np.asarray(step.pose_matrix.data, dtype=np.float64)) if self.count else None
        self.count += 1
        return depth, pose


def infer_scene(model, frames: Sequence) -> SceneOutput:
    """Run one continuous pass over a whole scene; states are never reset mid-scene."""
    stream = StreamingInference(model)
    depths, poses = [], []
    for im in frames:
        d, p = stream.push(im)
        depths.append(d)
        if p is not None:
            poses.append(p)
    return SceneOutput(depths, poses)


def windowed_depths(model, frames: Sequence, window: int) -> List[np.ndarray]:
    """Depth of frame t from a fresh pass over frames ``max(0, t-window+1) .. t``."""
    if window < 1:
        raise ValueError("window must be >= 1")
    net = model.depth_net
    net.eval()
    out = []
    with no_grad():
        for t in range(len(frames)):
            states = None
            for im in frames[max(0, t - window + 1):t + 1]:
                xi, _, states = net(im, states)
            out.append(1.0 / np.asarray(xi.data, dtype=np.float64))
    return out


def window_sweep(model, frames: Sequence, gt_depths: Sequence, sizes: Sequence[int] = (1, 3, 5, 10, 20),
                 valids=None, cap: float = DEPTH_CAP, scale_align: str = "median",
                 include_full: bool = True) -> Dict[str, DepthMetrics]:
    """Depth metrics as a function of how many frames precede each estimate."""
    results: Dict[str, DepthMetrics] = {}
    for w in sizes:
        _, agg = evaluate_depths(windowed_depths(model, frames, w), gt_depths, valids, cap, scale_align)
        results[str(w)] = agg
    if include_full:
        _, agg = evaluate_depths(infer_scene(model, frames).depths, gt_depths, valids, cap, scale_align)
        results["full"] = agg
    return results
