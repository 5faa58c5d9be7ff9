"""Signal conditioning: resampling to 128 Hz, Butterworth filtering, z-scoring."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .errors import ConstantChannel, InvalidCutoff, LengthMismatch, SignalTooShort, ZeroRate
from .ingest.annotations import ScoredEvent
from .ingest.edf import RawChannel
from .ingest.montage import MODALITY

TARGET_FS = 128
KAISER_BETA = 5.0
EEG_BAND = (0.3, 35.0)
EMG_HIGHPASS = 10.0
FILTER_ORDER = 4


@dataclass(frozen=True)
class FilterSpec:
    kind: str  # "bandpass" | "highpass"
    cutoffs_hz: tuple[float, ...]
    fs: float
    order: int = FILTER_ORDER

    def __post_init__(self):
        nyq = self.fs / 2
        if self.kind == "bandpass":
            if len(self.cutoffs_hz) != 2 or not self.cutoffs_hz[0] < self.cutoffs_hz[1]:
                raise InvalidCutoff(f"bandpass needs low < high, got {self.cutoffs_hz}")
        elif self.kind == "highpass":
            if len(self.cutoffs_hz) != 1:
                raise InvalidCutoff(f"highpass needs one cutoff, got {self.cutoffs_hz}")
        else:
            raise InvalidCutoff(f"unknown filter kind {self.kind!r}")
        if any(not 0 < f < nyq for f in self.cutoffs_hz):
            raise InvalidCutoff(f"cutoffs {self.cutoffs_hz} must lie strictly inside (0, {nyq})")
        if self.order < 1:
            raise InvalidCutoff("filter order must be >= 1")


@dataclass(frozen=True)
class ResampleSpec:
    source_fs: float
    target_fs: float = TARGET_FS
    kaiser_beta: float = KAISER_BETA

    @property
    def ratio(self) -> tuple[int, int]:
        """Reduced (up, down) with up/down == target_fs/source_fs."""
        if self.source_fs <= 0 or self.target_fs <= 0:
            raise ZeroRate(f"sampling rates must be positive ({self.source_fs} -> {self.target_fs})")
        from fractions import Fraction

        r = Fraction(self.target_fs).limit_denominator(10**6) / Fraction(self.source_fs).limit_denominator(10**6)
        return r.numerator, r.denominator


# -- Butterworth design -----------------------------------------------------------
def _bilinear_zpk(z: np.ndarray, p: np.ndarray, k: float, fs: float):
    fs2 = 2.0 * fs
    zd = (fs2 + z) / (fs2 - z)
    pd = (fs2 + p) / (fs2 - p)
    # zeros at analog infinity land on z = -1
    zd = np.concatenate([zd, -np.ones(len(p) - len(z))])
    kd = k * np.real(np.prod(fs2 - z) / np.prod(fs2 - p))
    return zd, pd, kd


def _pair_sections(z: np.ndarray, p: np.ndarray, k: float) -> np.ndarray:
    """Group conjugate pole pairs into biquads, zeros two at a time."""
    upper = sorted((x for x in p if x.imag > 1e-12), key=lambda x: abs(x))
    real = sorted((x.real for x in p if abs(x.imag) <= 1e-12), key=abs)
    den = [[1.0, -2.0 * x.real, abs(x) ** 2] for x in upper]
    while len(real) >= 2:
        a, b = real.pop(0), real.pop(0)
        den.append([1.0, -(a + b), a * b])
    if real:
        den.append([1.0, -real.pop(), 0.0])

    zr = sorted(np.real_if_close(z).real)
    pairs = []
    while len(zr) >= 2:
        # opposite ends keep each section's numerator well scaled (e.g. +1/-1)
        a, b = zr.pop(0), zr.pop(-1)
        pairs.append([1.0, -(a + b), a * b])
    if zr:
        pairs.append([1.0, -zr.pop(), 0.0])
    while len(pairs) < len(den):
        pairs.append([1.0, 0.0, 0.0])

    sos = np.array([num + d for num, d in zip(pairs, den)], dtype=np.float64)
    sos[0, :3] *= k
    return sos


def design_butterworth(spec: FilterSpec) -> np.ndarray:
    """Digital Butterworth filter as an (n_sections, 6) second-order-section array.

    Analog prototype -> lowpass-to-{high,band}pass transform at prewarped edge
    frequencies -> bilinear transform. Rows are ``[b0, b1, b2, 1, a1, a2]``.
    """
    n = spec.order
    fs = spec.fs
    proto = np.exp(1j * np.pi * (2 * np.arange(n) + n + 1) / (2 * n))
    warped = [2.0 * fs * math.tan(math.pi * f / fs) for f in spec.cutoffs_hz]
    if spec.kind == "highpass":
        (w,) = warped
        p = w / proto
        z = np.zeros(n, dtype=complex)
        k = float(np.real(1.0 / np.prod(-proto)))
    else:
        w1, w2 = warped
        bw, w0 = w2 - w1, math.sqrt(w1 * w2)
        half = proto * bw / 2.0
        root = np.sqrt(half * half - w0 * w0)
        p = np.concatenate([half + root, half - root])
        z = np.zeros(n, dtype=complex)
        k = bw**n
    zd, pd, kd = _bilinear_zpk(z, p, k, fs)
    return _pair_sections(zd, pd, kd)


def sos_response(sos: np.ndarray, freqs_hz, fs: float) -> np.ndarray:
    """Complex single-pass frequency response of a section cascade."""
    w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs
    zi = np.exp(-1j * w)
    h = np.ones_like(zi)
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 * zi + b2 * zi * zi) / (a0 + a1 * zi + a2 * zi * zi)
    return h


def filtfilt(x: np.ndarray, sos: np.ndarray, order: int = FILTER_ORDER) -> np.ndarray:
    """Zero-phase forward-backward filtering with odd-reflection padding.

    Padding length is ``3 * (2 * order)``. Each pass starts from the
    steady-state section state scaled to the first padded sample.
    """
    x = np.asarray(x, dtype=np.float64)
    padlen = 3 * (2 * order)
    if x.ndim != 1:
        raise ValueError("filtfilt expects a 1D signal")
    if len(x) <= padlen:
        raise SignalTooShort(f"signal of {len(x)} samples needs more than {padlen} for padding")
    left = 2 * x[0] - x[padlen:0:-1]
    right = 2 * x[-1] - x[-2 : -padlen - 2 : -1]
    ext = np.concatenate([left, x, right])
    zi = sps.sosfilt_zi(sos)
    y, _ = sps.sosfilt(sos, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = sps.sosfilt(sos, y, zi=zi * y[0])
    return y[::-1][padlen:-padlen].copy()


# -- resampling ------------------------------------------------------------------------
HALF_LEN_FACTOR = 20


def kaiser_lowpass(up: int, down: int, beta: float = KAISER_BETA) -> np.ndarray:
    """Windowed-sinc anti-alias filter for the up/down rate change.

    Cutoff at min(pi/up, pi/down) of the upsampled rate, ``2*20*max(up, down)+1``
    taps, DC gain ``up`` (compensating the zero-stuffing).
    """
    max_rate = max(up, down)
    half = HALF_LEN_FACTOR * max_rate
    t = np.arange(-half, half + 1, dtype=np.float64)
    cutoff = 1.0 / max_rate
    h = cutoff * np.sinc(cutoff * t) * np.kaiser(2 * half + 1, beta)
    return h * (up / h.sum())


def resample_polyphase(x: np.ndarray, spec: ResampleSpec, chunk: int = 1 << 15) -> np.ndarray:
    """Rational-rate resampling by polyphase FIR filtering.

    Output sample ``m`` is ``sum_j h[p + j*up] * x[n - j]`` where
    ``q = m*down + half``, ``p = q mod up`` and ``n = q // up``; only the
    branch ``p`` of the filter is evaluated, never the zero-stuffed signal.
    Output length is ``ceil(len(x) * up / down)``.
    """
    up, down = spec.ratio
    x = np.asarray(x, dtype=np.float64)
    if up == down == 1:
        return x.copy()
    h = kaiser_lowpass(up, down, spec.kaiser_beta)
    half = (len(h) - 1) // 2
    n_taps = -(-len(h) // up)
    hp = np.zeros(n_taps * up)
    hp[: len(h)] = h
    branches = hp.reshape(n_taps, up).T  # branches[p, j] = h[p + j*up]

    n_out = -(-len(x) * up // down)
    xpad = np.concatenate([np.zeros(n_taps), x, np.zeros(n_taps + 1)])
    j = np.arange(n_taps)
    y = np.empty(n_out)
    for lo in range(0, n_out, chunk):
        m = np.arange(lo, min(lo + chunk, n_out))
        q = m * down + half
        phase = q % up
        n = q // up
        idx = np.clip(n[:, None] - j[None, :] + n_taps, 0, len(xpad) - 1)
        y[m] = np.einsum("mj,mj->m", branches[phase], xpad[idx])
    return y


# -- normalisation -----------------------------------------------------------------------
def znormalize(x: np.ndarray) -> np.ndarray:
    """Subtract the mean and divide by the population standard deviation."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean()
    sd = x.std()
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, abs(mu)):
        raise ConstantChannel("channel has zero variance")
    y = (x - mu) / sd
    # second pass removes the residual rounding error of the first
    return (y - y.mean()) / y.std()


# -- full per-record pipeline ------------------------------------------------------------
@dataclass
class Recording:
    channels: np.ndarray  # (C, N) float32, z-scored
    labels: list[str]
    fs: float = TARGET_FS
    events: list[ScoredEvent] = field(default_factory=list)
    record_id: str = ""

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs

    def with_events(self, events: Sequence[ScoredEvent]) -> "Recording":
        return Recording(self.channels, self.labels, self.fs, list(events), self.record_id)


def filter_for(label: str, fs: float) -> FilterSpec:
    modality = MODALITY.get(label, "eeg")
    if modality == "emg":
        return FilterSpec("highpass", (EMG_HIGHPASS,), fs)
    return FilterSpec("bandpass", EEG_BAND, fs)


def preprocess_channel(ch: RawChannel, target_fs: float = TARGET_FS) -> np.ndarray:
    if np.ptp(ch.samples) == 0:
        raise ConstantChannel(f"channel {ch.label!r} is constant")
    x = resample_polyphase(ch.samples, ResampleSpec(ch.fs, target_fs))
    x = filtfilt(x, design_butterworth(filter_for(ch.label, target_fs)))
    try:
        return znormalize(x)
    except ConstantChannel:
        raise ConstantChannel(f"channel {ch.label!r} is constant after filtering") from None


def preprocess_record(
    channels: Sequence[RawChannel],
    events: Sequence[ScoredEvent] = (),
    record_id: str = "",
    target_fs: float = TARGET_FS,
) -> Recording:
    """Resample, filter per modality and z-score every montage channel."""
    out = [preprocess_channel(ch, target_fs) for ch in channels]
    n = min(len(x) for x in out)
    if max(len(x) for x in out) - n > 1:
        raise LengthMismatch(f"channel lengths diverge after resampling: {[len(x) for x in out]}")
    data = np.stack([x[:n] for x in out]).astype(np.float32)
    return Recording(data, [c.label for c in channels], target_fs, sorted(events, key=lambda e: e.start_s), record_id)


# -- cache container ------------------------------------------------------------------
def save_recording(rec: Recording, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.f32`` (little-endian float32, channel-major) and ``<stem>.json``."""
    stem = Path(stem)
    bin_path, meta_path = stem.with_suffix(".f32"), stem.with_suffix(".json")
    bin_path.write_bytes(np.ascontiguousarray(rec.channels, dtype="<f4").tobytes())
    meta = {
        "record_id": rec.record_id,
        "labels": rec.labels,
        "fs": rec.fs,
        "n_samples": rec.n_samples,
        "events": [[e.class_k, e.start_s, e.duration_s] for e in rec.events],
    }
    meta_path.write_text(json.dumps(meta, indent=1))
    return bin_path, meta_path


def load_recording(stem: str | Path) -> Recording:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    data = np.fromfile(stem.with_suffix(".f32"), dtype="<f4").astype(np.float32)
    data = data.reshape(len(meta["labels"]), meta["n_samples"])
    events = [ScoredEvent(int(k), float(s), float(d)) for k, s, d in meta["events"]]
    return Recording(data, list(meta["labels"]), float(meta["fs"]), events, meta["record_id"])
