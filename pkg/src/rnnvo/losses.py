"""Training objectives: multi-view photometric reprojection, forward-backward
flow consistency, smoothness, absolute depth and mask regularization.

Sequences follow the pass order they were predicted in. For a pass over
frames ``0..N-1``, ``poses[k]`` is the 4x4 relative pose ``P_{k+1->k}``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError
from .geometry import Intrinsics, bilinear_sample, pose_tensor, project


def interval_weight(delta: int) -> float:
    """Reprojection weight for frames ``delta`` apart: ``1 / (2**delta - 1)``."""
    if delta < 1:
        raise ValueError("frame interval must be >= 1")
    return 1.0 / (2.0 ** delta - 1.0)


@dataclass(frozen=True)
class LossWeights:
    depth: float = 1.0
    smooth: float = 1.0
    flow_consistency: float = 0.05
    mask_reg: float = 0.05

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    @staticmethod
    def reprojection(delta: int) -> float:
        return interval_weight(delta)


@dataclass
class PairReport:
    target: int
    source: int
    weight: float
    loss: float
    valid: int


@dataclass
class LossReport:
    reprojection_fw: float = 0.0
    reprojection_bw: float = 0.0
    flow_consistency: float = 0.0
    smoothness: float = 0.0
    depth: float = 0.0
    mask_reg: float = 0.0
    total: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    supervised: bool = False

    TERMS = ("reprojection_fw", "reprojection_bw", "flow_consistency", "smoothness", "depth", "mask_reg")

    def weighted_sum(self) -> float:
        w = self.weights
        total = (self.reprojection_fw + self.reprojection_bw + w.smooth * self.smoothness
                 + w.flow_consistency * self.flow_consistency + w.mask_reg * self.mask_reg)
        if self.supervised:
            total += w.depth * self.depth
        return total

    @property
    def reprojection(self) -> float:
        return self.reprojection_fw + self.reprojection_bw

    def as_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.TERMS}
        out["total"] = self.total
        return out


def _image(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 2:
        t = ops.reshape(t, t.shape + (1,))
    if t.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got {t.shape}")
    return t


def _masked_mean(per_pixel: Tensor, mask: np.ndarray) -> tuple:
    """(masked mean, valid count); zero when no pixel is valid."""
    count = int(mask.sum())
    if count == 0:
        return Tensor(0.0, dtype=per_pixel.dtype), 0
    return ops.mul(ops.sum(ops.mul(per_pixel, mask)), 1.0 / count), count


def reprojection_pair(target, source, depth_t, pose_t_to_i, K: Intrinsics) -> tuple:
    """Masked mean L1 photometric error of ``source`` warped into ``target``.

    Returns ``(loss, mask)``.
    """
    target, source = _image(target), _image(source)
    coords, _, mask = project(depth_t, pose_t_to_i, K)
    warped = bilinear_sample(source, coords)
    err = ops.mean(ops.absolute(ops.sub(target, warped)), axis=-1)
    loss, _ = _masked_mean(err, mask)
    return loss, mask


def multi_view_reprojection(images: Sequence, depths: Sequence, rel_poses: Sequence, K: Intrinsics,
                            max_interval: Optional[int] = None) -> tuple:
    """Weighted sum over ordered pairs ``i < t`` of the masked photometric error.

    ``max_interval=1`` restricts to consecutive pairs. Returns
    ``(loss, [PairReport], [mask])``.
    """
    n = len(images)
    if n < 2:
        raise ValueError("reprojection needs at least two frames")
    if len(depths) != n or len(rel_poses) != n - 1:
        raise ShapeError(f"got {n} images, {len(depths)} depths and {len(rel_poses)} poses")
    imgs = [_image(im) for im in images]
    shape = imgs[0].shape
    if any(im.shape != shape for im in imgs):
        raise ShapeError("images in a sequence must share a shape")
    mats = [pose_tensor(p, dtype=imgs[0].dtype) for p in rel_poses]
    total = None
    reports: List[PairReport] = []
    masks: List[np.ndarray] = []
    for t in range(1, n):
        chained = None
        lowest = 0 if max_interval is None else max(0, t - max_interval)
        for i in range(t - 1, lowest - 1, -1):
            # P_{t->i} = P_{i+1->i} @ P_{t->i+1}
            chained = mats[i] if chained is None else ops.matmul(mats[i], chained)
            lam = interval_weight(t - i)
            loss, mask = reprojection_pair(imgs[t], imgs[i], depths[t], chained, K)
            term = ops.mul(loss, lam)
            total = term if total is None else ops.add(total, term)
            reports.append(PairReport(t, i, lam, float(loss.data), int(mask.sum())))
            masks.append(mask)
    return total, reports, masks


def flow_consistency(depth_a, depth_b, pose_a_to_b, pose_b_to_a, K: Intrinsics) -> Tensor:
    """Forward-backward flow consistency for one frame pair (symmetric in A, B)."""
    coords_ab, f_ab, mask_ab = project(depth_a, pose_a_to_b, K)
    coords_ba, f_ba, mask_ba = project(depth_b, pose_b_to_a, K)
    fhat_ab = bilinear_sample(ops.neg(f_ba), coords_ab)
    fhat_ba = bilinear_sample(ops.neg(f_ab), coords_ba)
    term_ab, _ = _masked_mean(ops.sum(ops.absolute(ops.sub(f_ab, fhat_ab)), axis=-1), mask_ab)
    term_ba, _ = _masked_mean(ops.sum(ops.absolute(ops.sub(f_ba, fhat_ba)), axis=-1), mask_ba)
    return ops.add(term_ab, term_ba)


def sequence_flow_consistency(fw_depths: Sequence, fw_poses: Sequence, bw_depths: Sequence,
                              bw_poses: Sequence, K: Intrinsics) -> Tensor:
    """Sum of pairwise flow consistency over consecutive frames.

    ``bw_*`` come from the pass over the reversed sequence, so backward index
    ``j`` is frame ``N-1-j`` and ``bw_poses[j-1]`` maps frame ``N-1-j`` to ``N-j``.
    For the pair (t, t-1) the forward pass supplies ``Z_t`` and ``P_{t->t-1}``;
    the backward pass supplies ``Z_{t-1}`` and ``P_{t-1->t}``.
    """
    n = len(fw_depths)
    if len(bw_depths) != n or len(fw_poses) != n - 1 or len(bw_poses) != n - 1:
        raise ShapeError("forward and backward passes must cover the same frames")
    total = None
    for t in range(1, n):
        j = n - t
        term = flow_consistency(fw_depths[t], bw_depths[j], fw_poses[t - 1], bw_poses[j - 1], K)
        total = term if total is None else ops.add(total, term)
    return total


def _image_gradient_weights(image: np.ndarray) -> tuple:
    """exp(-|dI|) along x and y, averaged over channels."""
    im = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if im.ndim == 2:
        im = im[..., None]
    gx = np.zeros(im.shape[:2])
    gy = np.zeros(im.shape[:2])
    gx[:, :-1] = np.abs(im[:, 1:] - im[:, :-1]).mean(-1)
    gy[:-1, :] = np.abs(im[1:] - im[:-1]).mean(-1)
    return np.exp(-gx), np.exp(-gy)


def smoothness(inverse_depths: Sequence, images: Optional[Sequence] = None, mode: str = "edge-aware",
               gt_inverse_depths: Optional[Sequence] = None, gt_valid: Optional[Sequence] = None) -> Tensor:
    """Mean first-order smoothness of inverse depth over a sequence.

    Each direction is averaged over the positions where its forward
    difference exists (``H x (W-1)`` and ``(H-1) x W``, restricted to pairs of
    valid GT pixels in ``gt-gradient`` mode).
    """
    if mode not in ("edge-aware", "gt-gradient"):
        raise ValueError(f"unknown smoothness mode {mode!r}")
    if mode == "gt-gradient" and gt_inverse_depths is None:
        raise ValueError("gt-gradient smoothness requires ground-truth inverse depth")
    if mode == "edge-aware" and images is None:
        raise ValueError("edge-aware smoothness requires images")
    terms = []
    for t, xi in enumerate(inverse_depths):
        h, w = xi.shape
        gx = ops.spatial_gradient(xi, axis=1)
        gy = ops.spatial_gradient(xi, axis=0)
        if mode == "edge-aware":
            ex, ey = _image_gradient_weights(images[t])
            mx = np.zeros((h, w))
            mx[:, :-1] = 1.0
            my = np.zeros((h, w))
            my[:-1, :] = 1.0
            tx = ops.mul(ops.sum(ops.mul(ops.absolute(gx), ex * mx)), 1.0 / (h * (w - 1)))
            ty = ops.mul(ops.sum(ops.mul(ops.absolute(gy), ey * my)), 1.0 / ((h - 1) * w))
        else:
            gt = np.asarray(gt_inverse_depths[t].data if isinstance(gt_inverse_depths[t], Tensor)
                            else gt_inverse_depths[t], dtype=np.float64)
            valid = np.ones((h, w), bool) if gt_valid is None else np.asarray(gt_valid[t], bool)
            ggx = np.zeros((h, w))
            ggy = np.zeros((h, w))
            ggx[:, :-1] = gt[:, 1:] - gt[:, :-1]
            ggy[:-1, :] = gt[1:] - gt[:-1]
            mx = np.zeros((h, w))
            mx[:, :-1] = valid[:, 1:] & valid[:, :-1]
            my = np.zeros((h, w))
            my[:-1, :] = valid[1:] & valid[:-1]
            tx, _ = _masked_mean(ops.absolute(ops.sub(gx, ggx)), mx)
            ty, _ = _masked_mean(ops.absolute(ops.sub(gy, ggy)), my)
        terms.append(ops.add(tx, ty))
    return ops.mul(ops.sum(ops.stack(terms)), 1.0 / len(terms))


def depth_supervision(inverse_depths: Sequence, gt_inverse_depths: Sequence,
                      gt_valid: Optional[Sequence] = None) -> Tensor:
    """Mean |xi - xi_gt| over valid GT pixels of the whole sequence."""
    total = None
    count = 0
    for t, xi in enumerate(inverse_depths):
        gt = gt_inverse_depths[t]
        gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
        valid = np.ones(xi.shape, bool) if gt_valid is None else np.asarray(gt_valid[t], bool)
        gt = np.where(valid, gt, 0.0)
        term = ops.sum(ops.mul(ops.absolute(ops.sub(xi, gt)), valid.astype(np.float64)))
        total = term if total is None else ops.add(total, term)
        count += int(valid.sum())
    if count == 0:
        raise ValueError("depth supervision needs at least one valid GT pixel")
    return ops.mul(total, 1.0 / count)


def mask_regularization(masks: Sequence) -> Tensor:
    """Mean of ``1 - mask`` over every pixel of every mask.

    Geometric (constant) masks make this a constant; tensors that carry
    gradient (a learned mask) are penalized through the graph.
    """
    if len(masks) == 0:
        return Tensor(0.0)
    parts = [ops.mean(ops.sub(1.0, m if isinstance(m, Tensor) else Tensor(m))) for m in masks]
    return ops.mul(ops.sum(ops.stack(parts)), 1.0 / len(parts))


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

@dataclass
class SequencePrediction:
    """Network outputs for one pass: inverse depths (H x W) and N-1 relative 4x4 poses."""

    inverse_depths: List[Tensor]
    poses: List[Tensor]

    @property
    def depths(self) -> List[Tensor]:
        return [ops.reciprocal(xi) for xi in self.inverse_depths]


def total_loss(images: Sequence, fw: SequencePrediction, bw: SequencePrediction, K: Intrinsics,
               weights: LossWeights = LossWeights(), supervised: bool = False,
               gt_inverse_depths: Optional[Sequence] = None, gt_valid: Optional[Sequence] = None,
               max_interval: Optional[int] = None) -> tuple:
    """Combine every term for a forward pass and its reversed-sequence pass.

    ``images`` and the optional GT are in forward order. Returns
    ``(total_tensor, LossReport)``.
    """
    images = [_image(im) for im in images]
    rev_images = images[::-1]
    fw_depths, bw_depths = fw.depths, bw.depths
    l_fw, _, masks_fw = multi_view_reprojection(images, fw_depths, fw.poses, K, max_interval)
    l_bw, _, masks_bw = multi_view_reprojection(rev_images, bw_depths, bw.poses, K, max_interval)
    l_fc = sequence_flow_consistency(fw_depths, fw.poses, bw_depths, bw.poses, K)
    l_reg = mask_regularization(masks_fw + masks_bw)
    all_xi = list(fw.inverse_depths) + list(bw.inverse_depths)
    if supervised:
        if gt_inverse_depths is None:
            raise ValueError("supervised loss requires ground-truth inverse depth")
        gt_all = list(gt_inverse_depths) + list(gt_inverse_depths)[::-1]
        valid_all = None if gt_valid is None else list(gt_valid) + list(gt_valid)[::-1]
        l_smooth = smoothness(all_xi, mode="gt-gradient", gt_inverse_depths=gt_all, gt_valid=valid_all)
        l_depth = depth_supervision(all_xi, gt_all, valid_all)
    else:
        l_smooth = smoothness(all_xi, images + rev_images, mode="edge-aware")
        l_depth = None

    total = ops.add(ops.add(l_fw, l_bw), ops.mul(l_smooth, weights.smooth))
    total = ops.add(total, ops.mul(l_fc, weights.flow_consistency))
    total = ops.add(total, ops.mul(l_reg, weights.mask_reg))
    if l_depth is not None:
        total = ops.add(total, ops.mul(l_depth, weights.depth))
    report = LossReport(
        reprojection_fw=float(l_fw.data), reprojection_bw=float(l_bw.data),
        flow_consistency=float(l_fc.data), smoothness=float(l_smooth.data),
        depth=float(l_depth.data) if l_depth is not None else 0.0, mask_reg=float(l_reg.data),
        total=float(total.data), weights=weights, supervised=supervised,
    )
    return total, report
