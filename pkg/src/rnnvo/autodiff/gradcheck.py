"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_index: Optional[tuple] = None
    worst_input: int = 0

    def __bool__(self) -> bool:
        return self.passed


# central stencils: offsets (in units of eps) and weights
_STENCILS = {
    2: ((1.0, -1.0), (0.5, -0.5)),
    4: ((2.0, 1.0, -1.0, -2.0), (-1.0 / 12, 8.0 / 12, -8.0 / 12, 1.0 / 12)),
}


def numerical_gradient(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float,
                       elements: Optional[Sequence[Optional[np.ndarray]]] = None,
                       order: int = 2) -> list:
    """Central differences of scalar ``f(*inputs)`` w.r.t. each input.

    Inputs are perturbed in place and restored. ``elements[k]`` optionally
    restricts input ``k`` to a set of flat indices (others stay zero).
    """
    offsets, weights = _STENCILS[order]
    grads = []
    with no_grad():
        for k, t in enumerate(inputs):
            x = t.data
            g = np.zeros(x.shape, dtype=np.float64)
            flat = x.reshape(-1)
            gflat = g.reshape(-1)
            idx = range(flat.size) if elements is None or elements[k] is None else elements[k]
            for i in idx:
                orig = flat[i]
                acc = 0.0
                for off, wt in zip(offsets, weights):
                    flat[i] = orig + off * eps
                    acc += wt * float(f(*inputs).data)
                flat[i] = orig
                gflat[i] = acc / eps
            grads.append(g)
    return grads


def gradient_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                   tol: float = 1e-5, numeric_f: Optional[Callable[..., Tensor]] = None,
                   numeric_inputs: Optional[Sequence[Tensor]] = None, max_elements: Optional[int] = None,
                   seed: int = 0, order: int = 2,
                   elements: Optional[Sequence[Optional[np.ndarray]]] = None) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``. ``numeric_f``
    and ``numeric_inputs`` let the finite-difference side evaluate a
    higher-precision copy of the same function (used to check 32-bit graphs
    against a 64-bit oracle). ``max_elements`` checks a seeded random subset
    of each input's entries, for functions too expensive to difference fully;
    ``elements`` names the flat indices to check explicitly instead.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError("gradient_check needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    nf = numeric_f or f
    ninputs = list(numeric_inputs) if numeric_inputs is not None else inputs
    if elements is not None:
        elements = [None if e is None else np.asarray(e, dtype=np.int64) for e in elements]
    elif max_elements is not None:
        rng = np.random.default_rng(seed)
        elements = [None if t.size <= max_elements else rng.choice(t.size, max_elements, replace=False)
                    for t in ninputs]
    numeric = numerical_gradient(nf, ninputs, eps, elements, order)

    worst = (0.0, None, 0)
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        if elements is not None and elements[k] is not None:
            sel = np.zeros(a.size, dtype=bool)
            sel[elements[k]] = True
            a = np.where(sel.reshape(a.shape), a, 0.0)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
            raise NonFiniteError("non-finite gradient in gradient_check")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        rel = np.abs(a - n) / denom
        if rel.size and rel.max() > worst[0]:
            idx = np.unravel_index(int(rel.argmax()), rel.shape)
            worst = (float(rel.max()), tuple(int(i) for i in idx), k)
    return GradCheckResult(worst[0] <= tol, worst[0], worst[1], worst[2])
