"""Labelled synthetic recordings for end-to-end verification.

Every channel carries pink background noise. An arousal adds an alpha-band
(8-12 Hz) oscillation to both EEG and both EOG derivations and triples the
chin EMG amplitude for its duration; a leg movement adds a rectified 20-60 Hz
noise burst to the leg channel. Burst power relative to the channel's
background power is ``snr_db``. Every burst has a raised-cosine taper of
10 % of its duration at either end.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import InfeasibleRates
from .ingest.annotations import DEFAULT_LABEL_MAP, ScoredEvent, write_annotations
from .ingest.edf import RawChannel, write_edf

AR, LM = DEFAULT_LABEL_MAP["AR"], DEFAULT_LABEL_MAP["LM"]
CHANNELS = ("C3-M2", "C4-M1", "EOGL-M2", "EOGR-M1", "Chin", "LegL-LegR")
BACKGROUND_RMS_UV = {"C3-M2": 20.0, "C4-M1": 20.0, "EOGL-M2": 15.0, "EOGR-M1": 15.0, "Chin": 5.0, "LegL-LegR": 4.0}
CHIN_GAIN = 3.0
MIN_GAP_S = 1.0


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    duration_s: float = 3600.0
    fs: float = 256.0
    ar_rate: float = 24.0
    lm_rate: float = 36.0
    ar_duration_s: tuple[float, float] = (3.0, 15.0)
    lm_duration_s: tuple[float, float] = (0.5, 10.0)
    snr_db: float = 10.0
    overlap_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "ar_duration_s", tuple(self.ar_duration_s))
        object.__setattr__(self, "lm_duration_s", tuple(self.lm_duration_s))
        if self.ar_rate < 0 or self.lm_rate < 0:
            raise ValueError("event rates must be >= 0")
        if self.duration_s <= 0 or self.fs <= 0:
            raise ValueError("duration and fs must be positive")
        for name, (lo, hi), floor in (("ar", self.ar_duration_s, 3.0), ("lm", self.lm_duration_s, 0.5)):
            if not floor <= lo < hi:
                raise ValueError(f"{name}_duration_s must satisfy {floor} <= lo < hi, got {(lo, hi)}")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthRecord:
    channels: list[RawChannel]
    events: list[ScoredEvent]
    spec: SynthSpec
    injected: dict[int, int] = field(default_factory=dict)


def pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = np.inf
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / x.std()


def _taper(n: int) -> np.ndarray:
    env = np.ones(n)
    m = max(1, int(0.1 * n))
    ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(m) + 0.5) / m)
    env[:m] = ramp
    env[-m:] = ramp[::-1]
    return env


def _place(rng, rate_per_h, dur_range, spec: SynthSpec, fixed=()) -> list[tuple[float, float]]:
    """Poisson onsets plus ``fixed`` intervals, thinned so none overlap."""
    lo, hi = dur_range
    hours = spec.duration_s / 3600.0
    n = rng.poisson(rate_per_h * hours)
    durs = rng.uniform(lo, hi, n)
    onsets = rng.uniform(MIN_GAP_S, spec.duration_s - MIN_GAP_S, n)
    cands = [(float(s), float(d)) for s, d in zip(onsets, durs) if s + d <= spec.duration_s - MIN_GAP_S]
    # fixed intervals take priority during thinning
    ordered = sorted(fixed) + sorted(cands)
    kept: list[tuple[float, float]] = []
    for s, d in ordered:
        if all(s >= ks + kd + MIN_GAP_S or s + d + MIN_GAP_S <= ks for ks, kd in kept):
            kept.append((s, d))
    return sorted(kept)


def generate(spec: SynthSpec) -> SynthRecord:
    for rate, (lo, hi) in ((spec.ar_rate, spec.ar_duration_s), (spec.lm_rate, spec.lm_duration_s)):
        occupancy = rate * ((lo + hi) / 2 + MIN_GAP_S) / 3600.0
        if occupancy > 0.5:
            raise InfeasibleRates(f"rate {rate}/h with durations {lo}-{hi} s cannot be placed without overlap")

    rng = np.random.default_rng(spec.seed)
    fs = spec.fs
    n = int(round(spec.duration_s * fs))
    amp = 10.0 ** (spec.snr_db / 20.0)

    data = {name: pink_noise(rng, n) * BACKGROUND_RMS_UV[name] for name in CHANNELS}

    ar = _place(rng, spec.ar_rate, spec.ar_duration_s, spec)
    co = []
    lm_lo, lm_hi = spec.lm_duration_s
    for s, d in ar:
        if rng.random() < spec.overlap_fraction:
            ld = float(rng.uniform(lm_lo, min(lm_hi, d)))
            co.append((s + float(rng.uniform(0, d - ld)), ld))
    lm = _place(rng, spec.lm_rate, spec.lm_duration_s, spec, fixed=co)

    injected = {AR: 0, LM: 0}
    t = np.arange(n) / fs
    for s, d in ar:
        i0, i1 = int(round(s * fs)), int(round((s + d) * fs))
        env = _taper(i1 - i0)
        freq = rng.uniform(8.0, 12.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sqrt(2.0) * amp * np.sin(2 * np.pi * freq * t[i0:i1] + phase) * env
        for name in CHANNELS[:4]:
            data[name][i0:i1] += wave * BACKGROUND_RMS_UV[name]
        data["Chin"][i0:i1] *= 1.0 + (CHIN_GAIN - 1.0) * env
        injected[AR] += 1

    band = sps.butter(4, (20.0, min(60.0, 0.45 * fs)), btype="bandpass", fs=fs, output="sos")
    for s, d in lm:
        i0, i1 = int(round(s * fs)), int(round((s + d) * fs))
        burst = np.abs(sps.sosfilt(band, rng.standard_normal(i1 - i0 + 64))[64:])
        burst /= np.sqrt(np.mean(burst**2))
        data["LegL-LegR"][i0:i1] += amp * BACKGROUND_RMS_UV["LegL-LegR"] * burst * _taper(i1 - i0)
        injected[LM] += 1

    events = [ScoredEvent(AR, s, d) for s, d in ar] + [ScoredEvent(LM, s, d) for s, d in lm]
    events.sort(key=lambda e: (e.start_s, e.class_k))
    channels = [RawChannel(name, fs, data[name]) for name in CHANNELS]
    return SynthRecord(channels, events, spec, injected)


def write_record(rec: SynthRecord, out_dir: str | Path, name: str) -> tuple[Path, Path]:
    """Export as ``<name>.edf`` (16-bit, +/-250 uV) and ``<name>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    edf_path, csv_path = out / f"{name}.edf", out / f"{name}.csv"
    write_edf(edf_path, rec.channels, phys_range=(-250.0, 250.0), recording_id=f"synthetic seed={rec.spec.seed}")
    write_annotations(csv_path, rec.events)
    return edf_path, csv_path
