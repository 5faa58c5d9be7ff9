"""Scored-event sidecar files (``class,start_s,duration_s``)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from ..errors import AnnotationError, NegativeDuration, UnknownClassLabel

DEFAULT_LABEL_MAP: dict[str, int] = {"AR": 1, "LM": 2}
HEADER = ("class", "start_s", "duration_s")


@dataclass(frozen=True)
class ScoredEvent:
    """One scored event: class index ``k >= 1``, onset and duration in seconds."""

    class_k: int
    start_s: float
    duration_s: float

    def __post_init__(self):
        if self.duration_s <= 0:
            raise NegativeDuration(f"event duration must be positive, got {self.duration_s}")
        if self.start_s < 0:
            raise AnnotationError(f"event start must be >= 0, got {self.start_s}")
        if self.class_k < 1:
            raise AnnotationError(f"event class must be >= 1, got {self.class_k}")

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    @property
    def mid_s(self) -> float:
        return self.start_s + 0.5 * self.duration_s


def load_annotations(
    path: str | Path,
    label_map: Mapping[str, int] = DEFAULT_LABEL_MAP,
    ignore: Iterable[str] = (),
) -> list[ScoredEvent]:
    """Read a sidecar CSV; labels in ``ignore`` are skipped, others must be mapped."""
    ignore = {s.upper() for s in ignore}
    lookup = {k.upper(): v for k, v in label_map.items()}
    events = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and tuple(c.strip().lower() for c in row) == HEADER:
                continue
            if len(row) != 3:
                raise AnnotationError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            label = row[0].strip().upper()
            if label in ignore:
                continue
            if label not in lookup:
                raise UnknownClassLabel(f"{path}:{lineno}: unknown class label {row[0]!r}")
            try:
                start, dur = float(row[1]), float(row[2])
            except ValueError as exc:
                raise AnnotationError(f"{path}:{lineno}: non-numeric field") from exc
            if dur <= 0:
                raise NegativeDuration(f"{path}:{lineno}: duration {dur} is not positive")
            events.append(ScoredEvent(lookup[label], start, dur))
    events.sort(key=lambda e: (e.start_s, e.class_k, e.duration_s))
    return events


def write_annotations(
    path: str | Path,
    events: Iterable[ScoredEvent],
    label_map: Mapping[str, int] = DEFAULT_LABEL_MAP,
) -> None:
    names = {v: k for k, v in label_map.items()}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for e in sorted(events, key=lambda e: (e.start_s, e.class_k)):
            w.writerow([names[e.class_k], repr(float(e.start_s)), repr(float(e.duration_s))])
