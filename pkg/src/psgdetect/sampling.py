"""Class-balanced segment sampling for training.

A class ``k`` is drawn uniformly from ``0..K``. For an event class, one event
of that class is drawn uniformly from all such events and the segment start is
proposed uniformly in ``[mid - T, mid + T]`` (samples), clamped to the record,
and redrawn until the segment covers at least half of the event. For the
non-event class, uniform starts are redrawn until the segment touches no event.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dsp import Recording
from .errors import ExhaustedAttempts, NoEventOfClass, RecordTooShort
from .ingest.annotations import ScoredEvent
from .intervals import DefaultGrid
from .model import TargetAssignment, encode_targets

MIN_ANCHOR_OVERLAP = 0.5
MIN_CLIPPED_FRACTION = 0.25
MAX_ATTEMPTS = 100


@dataclass
class SegmentSample:
    x: np.ndarray  # (C, T) float32
    events: list[ScoredEvent]  # clipped, segment-relative seconds
    record_id: str
    start: int  # first sample of the segment in the record
    anchor_class: int = 0
    anchor: ScoredEvent | None = None


def sample_class(rng: np.random.Generator, K: int) -> int:
    if K < 1:
        raise ValueError("K must be >= 1")
    return int(rng.integers(0, K + 1))


def segment_events(record: Recording, start: int, T: int,
                   min_fraction: float = MIN_CLIPPED_FRACTION) -> list[ScoredEvent]:
    """Events intersecting ``[start, start+T)``, clipped and re-based to the segment.

    A clipped event is kept only if at least ``min_fraction`` of its original
    duration remains inside the segment.
    """
    fs = record.fs
    seg_lo, seg_hi = start / fs, (start + T) / fs
    out = []
    for e in record.events:
        lo, hi = max(e.start_s, seg_lo), min(e.end_s, seg_hi)
        if hi <= lo:
            continue
        if (hi - lo) < min_fraction * e.duration_s - 1e-12:
            continue
        out.append(ScoredEvent(e.class_k, lo - seg_lo, hi - lo))
    return out


def _overlap_s(e: ScoredEvent, lo: float, hi: float) -> float:
    return max(0.0, min(e.end_s, hi) - max(e.start_s, lo))


def _check_length(record: Recording, T: int) -> int:
    if record.n_samples < T:
        raise RecordTooShort(f"record {record.record_id!r} has {record.n_samples} samples, segment needs {T}")
    return record.n_samples - T


def sample_segment(record: Recording, k: int, rng: np.random.Generator, T: int,
                   max_attempts: int = MAX_ATTEMPTS, anchor: ScoredEvent | None = None) -> SegmentSample:
    last = _check_length(record, T)
    fs = record.fs
    if k >= 1:
        if anchor is None:
            pool = [e for e in record.events if e.class_k == k]
            if not pool:
                raise NoEventOfClass(k, [record.record_id])
            anchor = pool[int(rng.integers(len(pool)))]
        mid = int(round(anchor.mid_s * fs))
        for _ in range(max_attempts):
            start = int(np.clip(rng.integers(mid - T, mid + T + 1), 0, last))
            covered = _overlap_s(anchor, start / fs, (start + T) / fs)
            if covered >= MIN_ANCHOR_OVERLAP * anchor.duration_s:
                break
        else:
            raise ExhaustedAttempts(f"no segment covering half of event at {anchor.start_s:.2f} s "
                                    f"in {record.record_id!r} after {max_attempts} draws")
    else:
        for _ in range(max_attempts):
            start = int(rng.integers(0, last + 1))
            lo, hi = start / fs, (start + T) / fs
            if not any(_overlap_s(e, lo, hi) > 0 for e in record.events):
                break
        else:
            raise ExhaustedAttempts(f"no event-free segment in {record.record_id!r} after {max_attempts} draws")
    x = record.channels[:, start : start + T]
    return SegmentSample(x, segment_events(record, start, T), record.record_id, start, k, anchor if k else None)


@dataclass
class Batch:
    x: np.ndarray  # (B, C, T)
    samples: list[SegmentSample]
    targets: list[list[TargetAssignment]]


def class_schedule(B: int, K: int, rng: np.random.Generator) -> list[int]:
    """Balanced class labels for one minibatch: counts differ by at most one."""
    if B < K + 1:
        raise ValueError(f"batch size {B} cannot hold all {K + 1} classes")
    base, rem = divmod(B, K + 1)
    counts = np.full(K + 1, base)
    if rem:
        counts[rng.choice(K + 1, size=rem, replace=False)] += 1
    return [k for k in range(K + 1) for _ in range(counts[k])]


def draw_sample(records: Sequence[Recording], k: int, rng: np.random.Generator, T: int) -> SegmentSample:
    """One segment of class ``k``; event anchors are uniform over all class-k events."""
    if k == 0:
        return sample_segment(records[int(rng.integers(len(records)))], 0, rng, T)
    counts = np.array([sum(e.class_k == k for e in r.events) for r in records])
    total = int(counts.sum())
    if total == 0:
        raise NoEventOfClass(k, [r.record_id for r in records])
    i = int(rng.integers(total))
    ri = int(np.searchsorted(np.cumsum(counts), i, side="right"))
    offset = i - (int(np.cumsum(counts)[ri - 1]) if ri else 0)
    anchor = [e for e in records[ri].events if e.class_k == k][offset]
    return sample_segment(records[ri], k, rng, T, anchor=anchor)


def make_minibatch(records: Sequence[Recording], B: int, rng: np.random.Generator, K: int,
                   grids: Sequence[DefaultGrid], match_iou: float = 0.5) -> Batch:
    samples = [draw_sample(records, k, rng, grids[0].T) for k in class_schedule(B, K, rng)]
    x = np.stack([s.x for s in samples]).astype(np.float32, copy=False)
    fs = records[0].fs
    targets = [encode_targets(s.events, grids, fs, match_iou) for s in samples]
    return Batch(x, samples, targets)
