"""Glue between file formats and the numerical modules."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

from .dsp import Recording, load_recording, preprocess_record, save_recording
from .ingest.annotations import DEFAULT_LABEL_MAP, ScoredEvent, load_annotations
from .ingest.edf import read_edf
from .ingest.montage import MontageConfig, derive_channels

A = TypeVar("A")
R = TypeVar("R")


def parallel_map(fn: Callable[[A], R], items: Sequence[A], jobs: int = 1) -> list[R]:
    """Order-preserving map over worker processes (in-process when ``jobs <= 1``)."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def load_raw_record(edf_path: str | Path, csv_path: str | Path | None = None,
                    montage: MontageConfig | None = None, record_id: str | None = None) -> Recording:
    """EDF + annotation CSV -> preprocessed 128 Hz recording."""
    edf_path = Path(edf_path)
    channels = derive_channels(read_edf(edf_path), montage)
    events = load_annotations(csv_path, DEFAULT_LABEL_MAP) if csv_path else []
    return preprocess_record(channels, events, record_id or edf_path.stem)


def _preprocess_one(args) -> str:
    edf_path, csv_path, stem = args
    save_recording(load_raw_record(edf_path, csv_path), stem)
    return str(stem)


def find_pairs(directory: str | Path) -> list[tuple[Path, Path | None]]:
    """``(edf, csv)`` pairs in a directory, matched by file stem, sorted by name."""
    directory = Path(directory)
    out = []
    for edf in sorted(directory.glob("*.edf")):
        csv_path = edf.with_suffix(".csv")
        out.append((edf, csv_path if csv_path.exists() else None))
    return out


def preprocess_dir(src: str | Path, cache: str | Path, jobs: int = 1) -> list[Path]:
    cache = Path(cache)
    cache.mkdir(parents=True, exist_ok=True)
    work = [(str(e), str(c) if c else None, str(cache / e.stem)) for e, c in find_pairs(src)]
    return [Path(p) for p in parallel_map(_preprocess_one, work, jobs)]


def load_cache_dir(cache: str | Path) -> list[Recording]:
    """Every cached recording in a directory; other JSON files (manifests) are ignored."""
    stems = [p.with_suffix("") for p in sorted(Path(cache).glob("*.json"))]
    return [load_recording(s) for s in stems if s.with_suffix(".f32").exists()]


def select_class(records: Iterable[Recording], class_labels: Sequence[str],
                 label_map: dict[str, int] = DEFAULT_LABEL_MAP) -> list[Recording]:
    """Keep only the named classes, renumbered 1..K in the given order."""
    remap = {label_map[name]: i + 1 for i, name in enumerate(class_labels)}
    out = []
    for rec in records:
        events = [ScoredEvent(remap[e.class_k], e.start_s, e.duration_s) for e in rec.events if e.class_k in remap]
        out.append(rec.with_events(events))
    return out
