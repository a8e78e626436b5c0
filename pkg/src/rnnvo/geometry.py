"""Camera model, SE(3) algebra and the differentiable warping module.

Conventions: pixel centers sit at integer coordinates with the origin at the
top-left; coordinates are ``(u, v) = (column, row)``. A relative pose
``P_{a->b}`` maps 3D points expressed in camera ``a`` into camera ``b``, so
with camera-to-world matrices ``M``, ``P_{t->t-1} = inv(M_{t-1}) @ M_t``.
Images and flows are H x W x C here; the networks work in NCHW.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError, make_result

SMALL_ANGLE = 1e-8
# below this angle the Jacobian uses its second-order expansion
_JAC_SMALL_ANGLE = 1e-5
MIN_PROJECTED_DEPTH = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def check_image(self, height: int, width: int) -> None:
        if not (0 <= self.cx <= width - 1 and 0 <= self.cy <= height - 1):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {height}x{width} image")

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        """Intrinsics after resizing the image by (sx, sy) with half-pixel alignment."""
        return Intrinsics(self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5)


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues' formula for an axis-angle vector (float64)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    wx = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + wx
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * wx + b * (wx @ wx)


def so3_exp_jacobian(w) -> np.ndarray:
    """dR/dw_i stacked as a (3, 3, 3) array, index 0 selecting w_i."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    eye = np.eye(3)
    wx = skew(w)
    out = np.empty((3, 3, 3))
    if theta < _JAC_SMALL_ANGLE:
        for i in range(3):
            ex = skew(eye[i])
            out[i] = ex + 0.5 * (ex @ wx + wx @ ex)
        return out
    R = so3_exp(w)
    for i in range(3):
        out[i] = (w[i] * wx + skew(np.cross(w, (eye - R)[:, i]))) @ R / (theta * theta)
    return out


@dataclass(frozen=True)
class PoseSE3:
    """Rigid motion as axis-angle rotation (radians) plus translation (meters)."""

    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if len(self.rotation) != 3 or len(self.translation) != 3:
            raise ValueError("rotation and translation must be 3-vectors")

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_vector(cls, vec) -> "PoseSE3":
        vec = np.asarray(vec, dtype=np.float64).reshape(6)
        return cls(vec[:3], vec[3:])

    @classmethod
    def from_matrix(cls, m) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        rotvec = Rotation.from_matrix(m[:3, :3]).as_rotvec()
        return cls(rotvec, m[:3, 3])

    def vector(self) -> np.ndarray:
        return np.array(self.rotation + self.translation)

    def matrix(self) -> np.ndarray:
        return se3_matrix(self)

    def inverse(self) -> "PoseSE3":
        R = so3_exp(self.rotation)
        t = -R.T @ np.asarray(self.translation)
        return PoseSE3(-np.asarray(self.rotation), t)


def se3_matrix(pose: PoseSE3) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = so3_exp(pose.rotation)
    m[:3, 3] = pose.translation
    return m


def compose(p_ab: PoseSE3, p_bc: PoseSE3) -> PoseSE3:
    """``P_{a->c}`` with matrix ``M(p_bc) @ M(p_ab)``."""
    return PoseSE3.from_matrix(se3_matrix(p_bc) @ se3_matrix(p_ab))


def composite(poses: Sequence[PoseSE3]) -> PoseSE3:
    """Fold :func:`compose` over a chain listed in application order.

    ``composite([P_{t->t-1}, P_{t-1->t-2}, ..., P_{i+1->i}])`` is ``P_{t->i}``.
    """
    m = np.eye(4)
    for p in poses:
        m = se3_matrix(p) @ m
    return PoseSE3.from_matrix(m)


def relative_from_absolute(m_prev: np.ndarray, m_cur: np.ndarray) -> PoseSE3:
    """``P_{t->t-1}`` from camera-to-world matrices of frames t-1 and t."""
    return PoseSE3.from_matrix(np.linalg.inv(m_prev) @ m_cur)


# ---------------------------------------------------------------------------
# differentiable pose
# ---------------------------------------------------------------------------

def se3_exp(vec: Tensor) -> Tensor:
    """Differentiable map from a 6-vector (rotation, translation) to a 4x4 matrix."""
    if vec.shape != (6,):
        raise ShapeError(f"pose vector must have shape (6,), got {vec.shape}")
    v = vec.data.astype(np.float64)
    m = np.eye(4)
    m[:3, :3] = so3_exp(v[:3])
    m[:3, 3] = v[3:]
    jac = so3_exp_jacobian(v[:3])
    dtype = vec.dtype

    def backward(g):
        g = g.astype(np.float64)
        grad = np.empty(6)
        grad[:3] = np.tensordot(jac, g[:3, :3], axes=([1, 2], [0, 1]))
        grad[3:] = g[:3, 3]
        return (grad.astype(dtype),)

    return make_result(m.astype(dtype), (vec,), backward, "se3_exp")


PoseLike = Union[PoseSE3, Tensor, np.ndarray]


def pose_tensor(pose: PoseLike, dtype=None) -> Tensor:
    """A 4x4 matrix tensor for any accepted pose representation."""
    if isinstance(pose, Tensor):
        if pose.shape == (4, 4):
            return pose
        return se3_exp(pose)
    if isinstance(pose, PoseSE3):
        return Tensor(se3_matrix(pose), dtype=dtype)
    arr = np.asarray(pose, dtype=np.float64)
    if arr.shape == (4, 4):
        return Tensor(arr, dtype=dtype)
    return Tensor(se3_matrix(PoseSE3.from_vector(arr)), dtype=dtype)


def chain(mats: Iterable[Tensor]) -> Tensor:
    """Matrix product in application order: the first element acts first."""
    out = None
    for m in mats:
        out = m if out is None else ops.matmul(m, out)
    if out is None:
        raise ValueError("empty pose chain")
    return out


def inverse_matrix(m: Tensor) -> Tensor:
    """Differentiable rigid inverse ``[R^T, -R^T t]``."""
    rt = ops.transpose(m[:3, :3])
    t = m[:3, 3:4]
    top = ops.concat([rt, ops.neg(ops.matmul(rt, t))], axis=1)
    bottom = Tensor(np.array([[0.0, 0.0, 0.0, 1.0]]), dtype=m.dtype)
    return ops.concat([top, bottom], axis=0)


# ---------------------------------------------------------------------------
# sampling and warping
# ---------------------------------------------------------------------------

SNAP_TOLERANCE = 1e-10


def _snap(c: np.ndarray) -> np.ndarray:
    """Round coordinates within SNAP_TOLERANCE of an integer.

    Back-projection and re-projection through K^-1 and K leave roundoff of
    about 1e-14 px; snapping makes an identity warp reproduce the image bit
    for bit.
    """
    r = np.rint(c)
    return np.where(np.abs(c - r) < SNAP_TOLERANCE, r, c)


def bilinear_sample(grid: Tensor, coords: Tensor) -> Tensor:
    """Sample an (H, W, C) grid at (H', W', 2) coordinates ``(u, v)``.

    Coordinates outside the image are clamped to the border for value
    purposes; the gradient w.r.t. a clamped coordinate is zero.
    """
    if grid.ndim != 3 or coords.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample grid {grid.shape} coords {coords.shape}")
    h, w, c = grid.shape
    if h < 2 or w < 2:
        raise ShapeError("bilinear_sample needs at least a 2x2 grid")
    g = grid.data
    dtype = g.dtype
    cu, cv = coords.data[..., 0], coords.data[..., 1]
    inside_u = (cu >= 0) & (cu <= w - 1)
    inside_v = (cv >= 0) & (cv <= h - 1)
    x = np.clip(_snap(cu), 0, w - 1)
    y = np.clip(_snap(cv), 0, h - 1)
    x0 = np.minimum(np.floor(x), w - 2).astype(np.int64)
    y0 = np.minimum(np.floor(y), h - 2).astype(np.int64)
    wx = (x - x0).astype(dtype)[..., None]
    wy = (y - y0).astype(dtype)[..., None]
    g00, g01 = g[y0, x0], g[y0, x0 + 1]
    g10, g11 = g[y0 + 1, x0], g[y0 + 1, x0 + 1]
    out = (1 - wx) * (1 - wy) * g00 + wx * (1 - wy) * g01 + (1 - wx) * wy * g10 + wx * wy * g11

    def backward(gout):
        ggrid = gcoords = None
        if grid.requires_grad:
            flat = np.zeros((h * w, c), dtype=dtype)
            base = (y0 * w + x0).reshape(-1)
            gf = gout.reshape(-1, c)
            wxf, wyf = wx.reshape(-1, 1), wy.reshape(-1, 1)
            for offset, weight in ((0, (1 - wxf) * (1 - wyf)), (1, wxf * (1 - wyf)),
                                   (w, (1 - wxf) * wyf), (w + 1, wxf * wyf)):
                contrib = gf * weight
                for ch in range(c):
                    flat[:, ch] += np.bincount(base + offset, weights=contrib[:, ch], minlength=h * w)
            ggrid = flat.reshape(h, w, c)
        if coords.requires_grad:
            du = ((1 - wy) * (g01 - g00) + wy * (g11 - g10)) * gout
            dv = ((1 - wx) * (g10 - g00) + wx * (g11 - g01)) * gout
            gcoords = np.stack([du.sum(-1) * inside_u, dv.sum(-1) * inside_v], axis=-1).astype(dtype)
        return ggrid, gcoords

    return make_result(out.astype(dtype), (grid, coords), backward, "bilinear_sample")


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of integer pixel coordinates ``(u, v)``."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u, v], axis=-1).astype(np.float64)


def _as_depth_tensor(depth) -> Tensor:
    depth = depth if isinstance(depth, Tensor) else Tensor(depth)
    if depth.ndim != 2:
        raise ShapeError(f"depth must be H x W, got {depth.shape}")
    if np.any(depth.data <= 0):
        raise ValueError("depth must be positive at every pixel")
    return depth


def project(depth: Tensor, pose: PoseLike, K: Intrinsics):
    """Back-project with depth, move by ``pose``, project with ``K``.

    Returns ``(coords, flow, mask)`` where ``coords`` is (H, W, 2), ``flow``
    is ``coords - p`` and ``mask`` is a constant float array that is 1 where
    the projection lands inside ``[0, W-1] x [0, H-1]`` in front of the camera.
    """
    depth = _as_depth_tensor(depth)
    h, w = depth.shape
    dtype = depth.dtype
    base = pixel_grid(h, w)
    pix = np.stack([base[..., 0].ravel(), base[..., 1].ravel(), np.ones(h * w)])
    rays = Tensor(np.linalg.inv(K.matrix()) @ pix, dtype=dtype)
    m = pose_tensor(pose, dtype=dtype)
    points = ops.mul(rays, ops.reshape(depth, (1, h * w)))
    cam = ops.add(ops.matmul(m[:3, :3], points), m[:3, 3:4])
    z = ops.clamp(cam[2], lo=MIN_PROJECTED_DEPTH)
    u = ops.add(ops.mul(ops.div(cam[0], z), K.fx), K.cx)
    v = ops.add(ops.mul(ops.div(cam[1], z), K.fy), K.cy)
    coords = ops.reshape(ops.stack([u, v], axis=-1), (h, w, 2))
    flow = ops.sub(coords, Tensor(base, dtype=dtype))
    cu, cv = _snap(coords.data[..., 0]), _snap(coords.data[..., 1])
    mask = ((cu >= 0) & (cu <= w - 1) & (cv >= 0) & (cv <= h - 1)
            & (cam.data[2].reshape(h, w) > MIN_PROJECTED_DEPTH)).astype(dtype)
    return coords, flow, mask


def warp(source_image, depth_t, pose_t_to_i: PoseLike, K: Intrinsics):
    """Warp view i into view t.

    Returns ``(mask, warped_image, flow)`` with ``warped_image`` shaped like
    ``source_image`` (H, W, C) and ``flow = p' - p`` of shape (H, W, 2).
    """
    source = source_image if isinstance(source_image, Tensor) else Tensor(source_image)
    if source.ndim == 2:
        source = ops.reshape(source, source.shape + (1,))
    depth = _as_depth_tensor(depth_t)
    if source.shape[:2] != depth.shape:
        raise ShapeError(f"image {source.shape} and depth {depth.shape} sizes differ")
    coords, flow, mask = project(depth, pose_t_to_i, K)
    return mask, bilinear_sample(source, coords), flow


def pseudo_inverse_flow(flow_b_to_a, depth_a, pose_a_to_b: PoseLike, K: Intrinsics):
    """Interpolate ``-F_{B->A}`` at A's projected coordinates.

    Returns ``(mask, pseudo_inverse F^_{A->B}, direct F_{A->B})``.
    """
    fba = flow_b_to_a if isinstance(flow_b_to_a, Tensor) else Tensor(flow_b_to_a)
    if fba.ndim != 3 or fba.shape[-1] != 2:
        raise ShapeError(f"flow must be H x W x 2, got {fba.shape}")
    return warp(ops.neg(fba), depth_a, pose_a_to_b, K)
