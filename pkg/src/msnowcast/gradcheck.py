"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def numerical_grad(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-4,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place)."""
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        orig = x.data[idx]
        x.data[idx] = orig + h
        fp = f().item()
        x.data[idx] = orig - h
        fm = f().item()
        x.data[idx] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out, list(indices)


def analytic_grads(f: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    for t in wrt:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in wrt]


def finite_diff_check(
    f: Callable[[], Tensor],
    wrt: Tensor | Sequence[Tensor],
    tol: float = 1e-4,
    h: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    The relative error is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    with both maxima taken over all checked entries, so entries whose true
    gradient is near zero do not dominate through truncation noise.
    ``max_entries`` samples a random subset of entries per tensor.
    """
    tensors = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    grads = analytic_grads(f, tensors)
    rng = np.random.default_rng(seed)
    a_all, n_all = [], []
    for t, g in zip(tensors, grads):
        idx = list(np.ndindex(*t.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = rng.choice(len(idx), size=max_entries, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        num, idx = numerical_grad(f, t, h, idx)
        a_all.append(np.array([g[i] for i in idx], dtype=np.float64))
        n_all.append(num)
    a = np.concatenate(a_all)
    n = np.concatenate(n_all)
    abs_err = float(np.max(np.abs(a - n))) if a.size else 0.0
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)))
    rel = abs_err / scale if scale > 0 else abs_err
    return GradCheckReport(rel, abs_err, int(a.size), tol)
