"""1D interval geometry: IoU and the default-window grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInterval, NonDividing


def iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Jaccard index of two half-open intervals given as ``(start, duration)``."""
    (sa, da), (sb, db) = a, b
    if da <= 0 or db <= 0:
        raise EmptyInterval(f"intervals need positive duration, got {da} and {db}")
    inter = min(sa + da, sb + db) - max(sa, sb)
    if inter <= 0:
        return 0.0
    return inter / (da + db - inter)


def iou_matrix(starts_a, durs_a, starts_b, durs_b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    sa = np.asarray(starts_a, dtype=np.float64)[:, None]
    ea = sa + np.asarray(durs_a, dtype=np.float64)[:, None]
    sb = np.asarray(starts_b, dtype=np.float64)[None, :]
    eb = sb + np.asarray(durs_b, dtype=np.float64)[None, :]
    inter = np.clip(np.minimum(ea, eb) - np.maximum(sa, sb), 0.0, None)
    union = (ea - sa) + (eb - sb) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


@dataclass(frozen=True)
class DefaultGrid:
    """``n`` windows ``[j*tau, (j+1)*tau)`` tiling a segment of ``T`` samples."""

    T: int
    tau: int

    @property
    def n(self) -> int:
        return self.T // self.tau

    @property
    def starts(self) -> np.ndarray:
        return np.arange(self.n, dtype=np.float64) * self.tau

    @property
    def centers(self) -> np.ndarray:
        return self.starts + self.tau / 2.0

    def windows(self) -> list[tuple[int, int]]:
        return [(j * self.tau, (j + 1) * self.tau) for j in range(self.n)]


def default_grid(T: int, tau: int) -> DefaultGrid:
    if tau <= 0 or T <= 0:
        raise NonDividing(f"window {tau} and segment {T} must be positive")
    if T % tau:
        raise NonDividing(f"window {tau} does not divide segment length {T}")
    return DefaultGrid(int(T), int(tau))
