"""Derivation of the six analysis channels from recorded electrodes.

EEG and EOG are referenced to the contralateral mastoid, chin EMG is used as
recorded and the leg EMG channel is left minus right anterior tibialis.
Records that already carry a referenced derivation (e.g. ``EEG C3-A2``) use it
directly via the alias table.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import LengthMismatch, MissingChannel, RateMismatch, UnknownLabel
from .edf import EdfRecord, RawChannel, read_channel


@dataclass(frozen=True)
class Derivation:
    label: str
    plus: str
    minus: str | None = None


@dataclass(frozen=True)
class Montage:
    derivations: tuple[Derivation, ...]

    @property
    def labels(self) -> list[str]:
        return [d.label for d in self.derivations]


DEFAULT_DERIVATIONS: tuple[Derivation, ...] = (
    Derivation("C3-M2", "C3", "M2"),
    Derivation("C4-M1", "C4", "M1"),
    Derivation("EOGL-M2", "EOGL", "M2"),
    Derivation("EOGR-M1", "EOGR", "M1"),
    Derivation("Chin", "Chin", None),
    Derivation("LegL-LegR", "LegL", "LegR"),
)

# channel modality, used for per-modality filtering downstream
MODALITY = {"C3-M2": "eeg", "C4-M1": "eeg", "EOGL-M2": "eog", "EOGR-M1": "eog", "Chin": "emg", "LegL-LegR": "emg"}

DEFAULT_ALIASES: dict[str, str] = {
    "A1": "M1", "A2": "M2",
    "E1": "EOGL", "LOC": "EOGL", "EOG(L)": "EOGL", "EOG L": "EOGL",
    "E2": "EOGR", "ROC": "EOGR", "EOG(R)": "EOGR", "EOG R": "EOGR",
    "EMG": "Chin", "CHIN EMG": "Chin", "CHIN1-CHIN2": "Chin", "EMG CHIN": "Chin",
    "LEG/L": "LegL", "L LEG": "LegL", "LLEG": "LegL", "LAT": "LegL",
    "LEG/R": "LegR", "R LEG": "LegR", "RLEG": "LegR", "RAT": "LegR",
    "EEG C3-A2": "C3-M2", "C3-A2": "C3-M2", "EEG C4-A1": "C4-M1", "C4-A1": "C4-M1",
    "LOC-A2": "EOGL-M2", "E1-M2": "EOGL-M2", "ROC-A1": "EOGR-M1", "E2-M1": "EOGR-M1",
    "LEG": "LegL-LegR", "LEG EMG": "LegL-LegR",
}


def _norm(label: str) -> str:
    return re.sub(r"\s+", " ", label.strip()).casefold()


@dataclass
class MontageConfig:
    derivations: tuple[Derivation, ...] = DEFAULT_DERIVATIONS
    aliases: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_ALIASES))

    def canonical(self, label: str) -> str:
        """Map a recorded label to its canonical name (case-insensitive)."""
        table = {_norm(k): v for k, v in self.aliases.items()}
        return table.get(_norm(label), label.strip())

    @classmethod
    def from_json(cls, path: str | Path) -> "MontageConfig":
        cfg = json.loads(Path(path).read_text())
        unknown = set(cfg) - {"derivations", "aliases"}
        if unknown:
            raise ValueError(f"{path}: unknown montage config keys {sorted(unknown)}")
        derivs = cfg.get("derivations")
        derivations = (
            tuple(Derivation(d["label"], d["plus"], d.get("minus")) for d in derivs)
            if derivs is not None else DEFAULT_DERIVATIONS
        )
        aliases = dict(DEFAULT_ALIASES)
        aliases.update(cfg.get("aliases", {}))
        return cls(derivations, aliases)


def resolve_montage(available: Sequence[str], config: MontageConfig | None = None) -> Montage:
    """Bind each derivation to labels actually present in a record.

    A pre-referenced channel wins over computing the difference. Missing
    inputs reject the record.
    """
    config = config or MontageConfig()
    by_canon: dict[str, str] = {}
    for label in available:
        by_canon.setdefault(_norm(config.canonical(label)), label)

    bound, missing = [], []
    for d in config.derivations:
        direct = by_canon.get(_norm(d.label))
        if direct is not None:
            bound.append(Derivation(d.label, direct, None))
            continue
        plus = by_canon.get(_norm(d.plus))
        minus = by_canon.get(_norm(d.minus)) if d.minus else None
        if plus is None or (d.minus and minus is None):
            missing.append(d.label)
            continue
        bound.append(Derivation(d.label, plus, minus))
    if missing:
        raise MissingChannel(f"cannot derive {missing} from channels {list(available)}")
    return Montage(tuple(bound))


def apply_montage(channels: Mapping[str, RawChannel] | Sequence[RawChannel], montage: Montage) -> list[RawChannel]:
    if not isinstance(channels, Mapping):
        channels = {c.label: c for c in channels}
    lookup = {_norm(k): v for k, v in channels.items()}

    def get(label: str) -> RawChannel:
        try:
            return lookup[_norm(label)]
        except KeyError:
            raise UnknownLabel(f"montage references missing channel {label!r}") from None

    out = []
    for d in montage.derivations:
        plus = get(d.plus)
        if d.minus is None:
            out.append(RawChannel(d.label, plus.fs, np.asarray(plus.samples, dtype=np.float64).copy(), plus.physical_dim))
            continue
        minus = get(d.minus)
        if plus.fs != minus.fs:
            raise RateMismatch(f"{d.label}: {d.plus} at {plus.fs} Hz vs {d.minus} at {minus.fs} Hz")
        if len(plus.samples) != len(minus.samples):
            raise LengthMismatch(f"{d.label}: {len(plus.samples)} vs {len(minus.samples)} samples")
        diff = np.asarray(plus.samples, dtype=np.float64) - np.asarray(minus.samples, dtype=np.float64)
        out.append(RawChannel(d.label, plus.fs, diff, plus.physical_dim))
    return out


def derive_channels(record: EdfRecord, config: MontageConfig | None = None) -> list[RawChannel]:
    """Resolve and apply the montage to a parsed EDF record."""
    montage = resolve_montage(record.labels, config)
    needed = {lab for d in montage.derivations for lab in (d.plus, d.minus) if lab}
    return apply_montage({lab: read_channel(record, lab) for lab in needed}, montage)
