"""Seeded gradient-check cases shared by the unit tests and the acceptance run.

Every case builds random 64-bit inputs from a seed and returns a
GradCheckResult. Inputs to kinked primitives (abs, relu, clamp) are drawn
away from the kink so central differences stay on one linear piece.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from rnnvo.autodiff import GradCheckResult, Tensor, gradient_check, ops, precision
from rnnvo.geometry import Intrinsics, bilinear_sample, chain, inverse_matrix, se3_exp
from rnnvo.losses import (LossWeights, SequencePrediction, depth_supervision, flow_consistency,
                          mask_regularization, multi_view_reprojection, reprojection_pair, smoothness,
                          total_loss)
from rnnvo.nets import ConvLSTMCell, NetConfig, RecurrentModel

TOL64 = 1e-5
TOL32 = 1e-3


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _weighted(y: Tensor, rng) -> Tensor:
    """Random linear functional of ``y`` so every output element matters."""
    w = rng.normal(size=y.shape)
    return ops.sum(ops.mul(y, w))


def _unary(op, sampler):
    def case(seed):
        rng = np.random.default_rng(seed)
        x = _t(sampler(rng, (3, 4)))
        w = rng.normal(size=(3, 4))
        return gradient_check(lambda a: ops.sum(ops.mul(op(a), w)), [x], tol=TOL64)
    return case


def _binary(op, sa, sb, shape_b=(3, 4)):
    def case(seed):
        rng = np.random.default_rng(seed)
        a, b = _t(sa(rng, (3, 4))), _t(sb(rng, shape_b))
        w = rng.normal(size=(3, 4))
        return gradient_check(lambda x, y: ops.sum(ops.mul(op(x, y), w)), [a, b], tol=TOL64)
    return case


normal = lambda rng, s: rng.normal(size=s)
positive = lambda rng, s: rng.uniform(0.5, 2.0, s)
away = lambda rng, s: _away(rng, s)


def case_clamp(seed):
    rng = np.random.default_rng(seed)
    x = _t(_away(rng, (4, 5), 0.1, 1.0) + rng.choice([0.0, 2.0, -2.0], (4, 5)))
    return gradient_check(lambda a: _weighted(ops.clamp(a, -1.0, 1.0), np.random.default_rng(seed)), [x],
                          tol=TOL64)


def case_sum_axis(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 4))
    return gradient_check(lambda a: ops.sum(ops.mul(ops.sum(a, axis=1), w)), [x], tol=TOL64)


def case_mean_axis(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(3,))
    return gradient_check(lambda a: ops.sum(ops.mul(ops.mean(a, axis=(0, 2)), w)), [x], tol=TOL64)


def case_shape_ops(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(3, 2, 2))

    def f(a):
        y = ops.transpose(ops.reshape(a, (4, 3, 2)), (1, 0, 2))
        return ops.sum(ops.mul(y[:, 1:3], w))
    return gradient_check(f, [x], tol=TOL64)


def case_concat_stack(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng.normal(size=(2, 3))), _t(rng.normal(size=(2, 5)))
    c = _t(rng.normal(size=(2, 8)))
    w = rng.normal(size=(2, 2, 8))
    return gradient_check(lambda x, y, z: ops.sum(ops.mul(ops.stack([ops.concat([x, y], axis=1), z]), w)),
                          [a, b, c], tol=TOL64)


def case_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    return gradient_check(lambda x, y: ops.sum(ops.mul(ops.matmul(x, y), w)), [a, b], tol=TOL64)


def _conv_case(stride, cin=2, cout=3, h=6, w=7, k=3):
    def case(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng.normal(size=(2, cin, h, w)))
        wt = _t(rng.normal(size=(cout, cin, k, k)))
        b = _t(rng.normal(size=(cout,)))
        return gradient_check(lambda a, kk, bb: _weighted(ops.conv2d(a, kk, bb, stride=stride), np.random.default_rng(seed + 1)),
                              [x, wt, b], tol=TOL64)
    return case


def case_deconv(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.normal(size=(1, 2, 3, 4)))
    wt = _t(rng.normal(size=(2, 3, 3, 3)))
    b = _t(rng.normal(size=(3,)))
    return gradient_check(lambda a, kk, bb: _weighted(ops.conv_transpose2d(a, kk, bb, stride=2),
                                                       np.random.default_rng(seed + 1)), [x, wt, b], tol=TOL64)


def _bn_case(training):
    def case(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng.normal(size=(2, 3, 4, 5)) * 2 + 1)
        g = _t(rng.uniform(0.5, 1.5, 3))
        b = _t(rng.normal(size=3))
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, 3)

        def f(a, gg, bb):
            # fresh buffer copies keep repeated evaluations identical
            return _weighted(ops.batch_norm(a, gg, bb, rm.copy(), rv.copy(), training), np.random.default_rng(seed + 1))
        return gradient_check(f, [x, g, b], eps=1e-4, order=4, tol=TOL64)
    return case


def _grad_case(axis):
    def case(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng.normal(size=(5, 6)))
        return gradient_check(lambda a: _weighted(ops.spatial_gradient(a, axis), np.random.default_rng(seed + 1)),
                              [x], tol=TOL64)
    return case


def case_se3_exp(seed):
    rng = np.random.default_rng(seed)
    scale = [1.0, 1e-3, 1e-6][seed % 3]
    v = np.concatenate([rng.normal(size=3) * scale, rng.normal(size=3)])
    x = _t(v)
    w = rng.normal(size=(4, 4))
    eps = 1e-6 * min(1.0, scale * 10)
    return gradient_check(lambda a: ops.sum(ops.mul(se3_exp(a), w)), [x], eps=max(eps, 1e-9), tol=TOL64)


def case_chain_inverse(seed):
    rng = np.random.default_rng(seed)
    a = _t(np.concatenate([rng.normal(size=3) * 0.3, rng.normal(size=3)]))
    b = _t(np.concatenate([rng.normal(size=3) * 0.3, rng.normal(size=3)]))
    w = rng.normal(size=(4, 4))
    return gradient_check(lambda x, y: ops.sum(ops.mul(inverse_matrix(chain([se3_exp(x), se3_exp(y)])), w)),
                          [a, b], tol=TOL64)


def case_bilinear(seed):
    rng = np.random.default_rng(seed)
    grid = _t(rng.normal(size=(5, 6, 2)))
    # keep coordinates off integer lines: bilinear interpolation is kinked there
    cu = rng.integers(0, 5, (3, 4)) + rng.uniform(0.1, 0.9, (3, 4))
    cv = rng.integers(0, 4, (3, 4)) + rng.uniform(0.1, 0.9, (3, 4))
    coords = _t(np.stack([cu, cv], -1))
    return gradient_check(lambda g, c: _weighted(bilinear_sample(g, c), np.random.default_rng(seed + 1)),
                          [grid, coords], eps=1e-6, tol=TOL64)


# ---------------------------------------------------------------------------
# loss terms on 8 x 12 instances
# ---------------------------------------------------------------------------

H, W = 8, 12
K = Intrinsics(10.0, 10.0, 5.5, 3.5)


def _smooth_image(rng, h=H, w=W, c=3):
    v, u = np.mgrid[0:h, 0:w].astype(float)
    chans = []
    for _ in range(c):
        a, b, p = rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9), rng.uniform(0, 6)
        chans.append(0.5 + 0.4 * np.sin(a * u + b * v + p))
    return np.stack(chans, -1)


def _affine_image(rng, offset=0.0, h=H, w=W, c=3):
    """Per-channel affine intensities: bilinear sampling of these has no kinks."""
    v, u = np.mgrid[0:h, 0:w].astype(float)
    a, b = rng.uniform(-0.05, 0.05, (2, c))
    return offset + 0.3 + a * u[..., None] + b * v[..., None]


def _smooth_depth(rng, h=H, w=W):
    v, u = np.mgrid[0:h, 0:w].astype(float)
    a, b, p = rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5), rng.uniform(0, 6)
    return Tensor(3.0 + 0.3 * np.sin(a * u + b * v + p) + rng.uniform(-0.2, 0.2), requires_grad=True,
                  dtype=np.float64)


def _pose_vec(rng):
    """Small rotation and lateral motion with a dominant forward step.

    Every pixel then lands well inside the other view, so validity masks
    cannot flip under finite-difference perturbations. The lateral part keeps
    the flow away from zero at the image centre.
    """
    lateral = rng.uniform([0.05, 0.03], [0.08, 0.05]) * rng.choice([-1.0, 1.0], 2)
    return np.concatenate([rng.normal(size=3) * 0.005, lateral, [rng.uniform(0.4, 0.5)]])


# Warp-based terms are piecewise smooth. Affine images make photometric terms
# smooth in depth and pose, so a wide fourth-order step is safe there and keeps
# cancellation error far below the smallest checked gradients. Sampled flow
# fields are not affine: pose entries move every pixel and need a narrow step
# so no sample crosses a bilinear cell edge.
WIDE = dict(eps=1e-3, order=4)
DEPTH = dict(eps=1e-2, order=4)
NARROW = dict(eps=1e-5, order=4)


def check_groups(f, inputs, groups, tol=TOL64, **kw) -> GradCheckResult:
    """Gradient-check ``f`` one input group at a time, each with its own stencil.

    ``groups`` is a list of ``(indices, stencil)``; the worst group decides.
    """
    worst = None
    for idx, stencil in groups:
        sub = [inputs[i] for i in idx]

        def g(*args, idx=idx):
            full = list(inputs)
            for i, a in zip(idx, args):
                full[i] = a
            return f(*full)
        r = gradient_check(g, sub, tol=tol, **stencil, **kw)
        if worst is None or r.max_rel_error > worst.max_rel_error:
            worst = GradCheckResult(r.passed, r.max_rel_error, r.worst_index, idx[r.worst_input])
    worst.passed = worst.max_rel_error <= tol
    return worst


def case_reprojection_pair(seed):
    rng = np.random.default_rng(seed)
    # the offset keeps photometric residuals away from the L1 kink
    tgt, src = _t(_affine_image(rng, offset=2.0)), _t(_affine_image(rng))
    depth = _smooth_depth(rng)
    pose = _t(_pose_vec(rng))
    return check_groups(lambda s, d, p: reprojection_pair(tgt, s, d, se3_exp(p), K)[0], [src, depth, pose],
                        [((0, 1), DEPTH), ((2,), WIDE)])


def case_multi_view(seed):
    rng = np.random.default_rng(seed)
    imgs = [_affine_image(rng, offset=2.0 * k) for k in range(3)]
    depths = [_smooth_depth(rng) for _ in range(3)]
    poses = [_t(_pose_vec(rng)) for _ in range(2)]

    def f(d1, d2, p0, p1):
        return multi_view_reprojection(imgs, [depths[0], d1, d2], [se3_exp(p0), se3_exp(p1)], K)[0]
    return check_groups(f, [depths[1], depths[2], poses[0], poses[1]], [((0, 1), DEPTH), ((2, 3), WIDE)])


def case_flow_consistency(seed):
    rng = np.random.default_rng(seed)
    da, db = _smooth_depth(rng), _smooth_depth(rng)
    pab, pba = _t(_pose_vec(rng)), _t(_pose_vec(rng))
    return check_groups(lambda a, b, x, y: flow_consistency(a, b, se3_exp(x), se3_exp(y), K),
                        [da, db, pab, pba], [((0, 1), WIDE), ((2, 3), NARROW)])


def _ramp_inverse_depth(rng):
    """Tilted ramp with jitter: neighbour differences stay clear of the L1 kink."""
    v, u = np.mgrid[0:H, 0:W].astype(float)
    su, sv = rng.choice([-1.0, 1.0], 2)
    return _t(0.5 + su * 0.03 * (u - W / 2) + sv * 0.03 * (v - H / 2) + rng.uniform(-0.005, 0.005, (H, W)))


def case_smooth_edge(seed):
    rng = np.random.default_rng(seed)
    xis = [_ramp_inverse_depth(rng) for _ in range(2)]
    imgs = [_smooth_image(rng) for _ in range(2)]
    return gradient_check(lambda a, b: smoothness([a, b], imgs, "edge-aware"), xis, eps=1e-4, order=4, tol=TOL64)


def case_smooth_gt(seed):
    rng = np.random.default_rng(seed)
    xis = [_ramp_inverse_depth(rng) for _ in range(2)]
    # the mirrored ramp keeps predicted and GT differences apart
    gts = [1.0 - x.data + rng.uniform(-0.005, 0.005, (H, W)) for x in xis]
    valid = [rng.uniform(size=(H, W)) > 0.3 for _ in range(2)]
    # piecewise linear with every kink farther than the step, so a wide step is exact
    return gradient_check(lambda a, b: smoothness([a, b], mode="gt-gradient", gt_inverse_depths=gts, gt_valid=valid),
                          xis, eps=1e-2, tol=TOL64)


def case_depth_supervision(seed):
    rng = np.random.default_rng(seed)
    xis = [_t(rng.uniform(0.3, 0.6, (H, W))) for _ in range(2)]
    gts = [x.data + _away(rng, (H, W), 0.05, 0.2) for x in xis]
    valid = [rng.uniform(size=(H, W)) > 0.3 for _ in range(2)]
    return gradient_check(lambda a, b: depth_supervision([a, b], gts, valid), xis, eps=1e-2, tol=TOL64)


def case_mask_reg(seed):
    rng = np.random.default_rng(seed)
    masks = [_t(rng.uniform(size=(H, W))) for _ in range(3)]
    return gradient_check(lambda *m: mask_regularization(list(m)), masks, tol=TOL64)


# ---------------------------------------------------------------------------
# recurrent pieces
# ---------------------------------------------------------------------------

def case_convlstm_unroll(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        cell = ConvLSTMCell(rng, 2, 3)
    xs = [_t(rng.normal(size=(1, 2, 4, 5))) for _ in range(3)]
    w = rng.normal(size=(1, 3, 4, 5))

    def f(weight, bias, *inputs):
        state = None
        total = None
        for x in inputs:
            y, state = cell(x, state)
            term = ops.sum(ops.mul(y, w))
            total = term if total is None else ops.add(total, term)
        return ops.add(total, ops.sum(ops.mul(state.c, w)))
    return gradient_check(f, [cell.weight, cell.bias] + xs, eps=1e-4, order=4, tol=TOL64)


def tiny_config(**kw) -> NetConfig:
    base = dict(height=H, width=W, encoder_channels=(2,) * 7, decoder_channels=(2,) * 6, final_deconv_channels=2,
                pose_channels=(2,) * 7, width_scale=1.0, head_init_scale=1.0, init_depth=3.0,
                bn_min_count=16)
    base.update(kw)
    return NetConfig(**base)


# Finite differences of an O(1) loss resolve about 1e-11 in absolute terms, so
# entries whose gradient is below this floor cannot be checked at 1e-5 relative.
RESOLVABLE = 1e-5


def case_full_loss(seed, max_elements: int = 6, tensors_per_net: int = 4):
    """Differentiate the whole unsupervised objective w.r.t. seeded network weights.

    Four parameter tensors are drawn from each network, and up to
    ``max_elements`` entries of each whose gradient is resolvable.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        model = RecurrentModel(tiny_config(seed=seed))
    # Deep levels of a 2-channel net carry near-zero activations, which sit on
    # the activation kinks. Random batch-norm offsets move every unit clear of them.
    for name, p in model.named_parameters().items():
        if name.endswith("bn.beta"):
            p.data[...] = _away(rng, p.shape, 0.3, 1.0)
    # bias the pose head towards a forward step so warps stay inside the frame
    model.pose_net.out.weight.data *= 0.1
    model.pose_net.out.bias.data[5] = 0.4
    model.train()
    frames = [_affine_image(rng, offset=2.0 * k) for k in range(2)]
    params = model.named_parameters()
    weights = LossWeights()
    buffers = {k: v.copy() for k, v in model.state_dict().items()}

    # the parameter tensors are perturbed in place, so f ignores its arguments;
    # batch-norm running buffers are reset so every evaluation sees the same state
    def f(*_):
        for net, prefix in ((model.depth_net, "depth."), (model.pose_net, "pose.")):
            for k, buf in net.named_buffers().items():
                buf[...] = buffers[prefix + k]
        fw = model.rollout(frames)
        bw = model.rollout(frames[::-1])
        pf = SequencePrediction([s.inverse_depth for s in fw], [s.pose_matrix for s in fw[1:]])
        pb = SequencePrediction([s.inverse_depth for s in bw], [s.pose_matrix for s in bw[1:]])
        return total_loss(frames, pf, pb, K, weights)[0]

    with precision(np.float64):
        for t in params.values():
            t.grad = None
        f().backward()
        usable = {n: np.flatnonzero(np.abs(t.grad) >= RESOLVABLE) for n, t in params.items() if t.grad is not None}
        pick, elements = [], []
        for prefix in ("depth.", "pose."):
            names = sorted(n for n, idx in usable.items() if n.startswith(prefix) and idx.size)
            for n in rng.choice(names, min(tensors_per_net, len(names)), replace=False):
                idx = usable[n]
                pick.append(n)
                elements.append(rng.choice(idx, min(max_elements, idx.size), replace=False))
        return gradient_check(f, [params[n] for n in pick], **NARROW, tol=TOL64, elements=elements)


CASES: Dict[str, Callable] = {
    "add": _binary(ops.add, normal, normal, (4,)),
    "sub": _binary(ops.sub, normal, normal),
    "mul": _binary(ops.mul, normal, normal, (1, 4)),
    "div": _binary(ops.div, normal, positive),
    "neg": _unary(ops.neg, normal),
    "power": _unary(lambda a: ops.power(a, 3.0), away),
    "square": _unary(ops.square, normal),
    "abs": _unary(ops.absolute, away),
    "exp": _unary(ops.exp, normal),
    "log": _unary(ops.log, positive),
    "sqrt": _unary(ops.sqrt, positive),
    "reciprocal": _unary(ops.reciprocal, positive),
    "sigmoid": _unary(ops.sigmoid, normal),
    "tanh": _unary(ops.tanh, normal),
    "relu": _unary(ops.relu, away),
    "leaky_relu": _unary(ops.leaky_relu, away),
    "scalar_broadcast": _unary(lambda a: ops.mul(ops.add(a, 2.5), 0.7), normal),
    "clamp": case_clamp,
    "sum": case_sum_axis,
    "mean": case_mean_axis,
    "reshape_transpose_slice": case_shape_ops,
    "concat_stack": case_concat_stack,
    "matmul": case_matmul,
    "conv2d_s1": _conv_case(1),
    "conv2d_s2": _conv_case(2),
    "conv2d_s2_odd": _conv_case(2, h=5, w=7),
    "conv_transpose2d": case_deconv,
    "batch_norm_train": _bn_case(True),
    "batch_norm_eval": _bn_case(False),
    "spatial_gradient_x": _grad_case(1),
    "spatial_gradient_y": _grad_case(0),
    "se3_exp": case_se3_exp,
    "chain_inverse": case_chain_inverse,
    "bilinear_sample": case_bilinear,
    "reprojection_pair": case_reprojection_pair,
    "multi_view_reprojection": case_multi_view,
    "flow_consistency": case_flow_consistency,
    "smoothness_edge_aware": case_smooth_edge,
    "smoothness_gt_gradient": case_smooth_gt,
    "depth_supervision": case_depth_supervision,
    "mask_regularization": case_mask_reg,
    "convlstm_3_step": case_convlstm_unroll,
    "full_unsupervised_loss": case_full_loss,
}

SEEDS = (0, 1, 2)


def all_trials() -> List[Tuple[str, int]]:
    return [(name, seed) for name in CASES for seed in SEEDS]


def run(name: str, seed: int):
    with precision(np.float64):
        return CASES[name](seed)
