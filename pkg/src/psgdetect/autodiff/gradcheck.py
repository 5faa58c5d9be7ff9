"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckReport:
    max_rel_err: list[float]
    tol: float
    worst_index: list[tuple] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_err)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err, default=0.0)

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED"
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_err)
        return f"gradcheck {status}: max rel err per input [{errs}] (tol {self.tol:g})"


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, tuple]:
    if analytic.size == 0:
        return 0.0, ()
    diff = np.abs(analytic - numeric)
    # floor the denominator at a fraction of the gradient's overall scale so
    # entries that are exactly zero analytically do not divide by ~0
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    rel = diff / denom
    idx = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return float(rel[idx]), tuple(int(i) for i in idx)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tol: float = 1e-4,
    seed: int = 0,
) -> GradcheckReport:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` receives one :class:`Tensor` per input and may return a tensor of
    any shape; it is reduced to a scalar with a fixed random projection. Inputs
    are promoted to float64. The step for element ``x`` is ``1e-5 * (1 + |x|)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)

    def scalar(values: list[np.ndarray]) -> float:
        o = fn(*[Tensor(v) for v in values])
        return float(np.sum(o.data * proj))

    (out * Tensor(proj)).sum().backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    errors, where = [], []
    for i, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            h = 1e-5 * (1.0 + abs(orig))
            flat[j] = orig + h
            fp = scalar(arrays)
            flat[j] = orig - h
            fm = scalar(arrays)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * h)
        err, idx = _relative_error(analytic[i], numeric)
        errors.append(err)
        where.append(idx)
    return GradcheckReport(errors, tol, where)
