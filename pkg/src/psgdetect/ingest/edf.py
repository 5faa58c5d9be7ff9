"""Bit-exact reader/writer for plain EDF files.

An EDF file is a 256-byte fixed header, 256 bytes of per-signal header for each
of ``ns`` signals (stored field-major: all labels, then all transducers, ...),
followed by ``num_records`` data records. Each data record holds, for every
signal in order, ``samples_per_record`` little-endian int16 values.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import MalformedHeader, TruncatedData, UnknownLabel, UnsupportedVariant

_MAIN_FIELDS = (
    ("version", 8),
    ("patient_id", 80),
    ("recording_id", 80),
    ("startdate", 8),
    ("starttime", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("num_records", 8),
    ("record_duration", 8),
    ("num_signals", 4),
)
_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dim", 8),
    ("phys_min", 8),
    ("phys_max", 8),
    ("dig_min", 8),
    ("dig_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)
ANNOTATION_LABEL = "EDF Annotations"


@dataclass(frozen=True)
class EdfHeader:
    version: str
    patient_id: str
    recording_id: str
    start_datetime: dt.datetime | None
    header_bytes: int
    num_records: int
    record_duration_s: Fraction
    num_signals: int
    reserved: str = ""


@dataclass(frozen=True)
class SignalHeader:
    label: str
    physical_dim: str
    phys_min: float
    phys_max: float
    dig_min: int
    dig_max: int
    samples_per_record: int
    transducer: str = ""
    prefiltering: str = ""

    @property
    def gain(self) -> float:
        return (self.phys_max - self.phys_min) / (self.dig_max - self.dig_min)


@dataclass(frozen=True)
class RawChannel:
    label: str
    fs: float
    samples: np.ndarray
    physical_dim: str = "uV"

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class EdfRecord:
    header: EdfHeader
    signals: list[SignalHeader]
    digital: list[np.ndarray] = field(repr=False)

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.signals]

    def index(self, label: str) -> int:
        key = label.strip().casefold()
        for i, s in enumerate(self.signals):
            if s.label.strip().casefold() == key:
                return i
        raise UnknownLabel(f"no signal labelled {label!r}; available: {self.labels}")

    @property
    def duration_s(self) -> float:
        return float(self.header.num_records * self.header.record_duration_s)


# -- field helpers --------------------------------------------------------------
def _ascii(raw: bytes, name: str) -> str:
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"field {name!r} is not ASCII") from exc


def _int(raw: bytes, name: str) -> int:
    text = _ascii(raw, name)
    try:
        return int(text)
    except ValueError:
        raise MalformedHeader(f"field {name!r} is not an integer: {text!r}") from None


def _float(raw: bytes, name: str) -> float:
    text = _ascii(raw, name)
    try:
        return float(text)
    except ValueError:
        raise MalformedHeader(f"field {name!r} is not numeric: {text!r}") from None


def _fraction(raw: bytes, name: str) -> Fraction:
    text = _ascii(raw, name)
    try:
        return Fraction(text)
    except ValueError:
        raise MalformedHeader(f"field {name!r} is not numeric: {text!r}") from None


def _datetime(date: str, time: str) -> dt.datetime | None:
    try:
        d, m, y = (int(p) for p in date.split("."))
        hh, mm, ss = (int(p) for p in time.split("."))
    except ValueError:
        return None
    # EDF clipping date convention: 85-99 -> 19xx, 00-84 -> 20xx
    year = 1900 + y if y >= 85 else 2000 + y
    try:
        return dt.datetime(year, m, d, hh, mm, ss)
    except ValueError:
        return None


# -- parsing ----------------------------------------------------------------------
def parse_edf_header(blob: bytes) -> tuple[EdfHeader, list[SignalHeader]]:
    if len(blob) < 256:
        raise MalformedHeader(f"EDF header needs 256 bytes, got {len(blob)}")
    pos, main = 0, {}
    for name, width in _MAIN_FIELDS:
        main[name] = blob[pos : pos + width]
        pos += width

    ns = _int(main["num_signals"], "num_signals")
    header_bytes = _int(main["header_bytes"], "header_bytes")
    if ns < 1:
        raise MalformedHeader(f"num_signals must be >= 1, got {ns}")
    if header_bytes != 256 + 256 * ns:
        raise MalformedHeader(f"header_bytes={header_bytes} but 256 + 256*{ns} = {256 + 256 * ns}")
    if len(blob) < header_bytes:
        raise MalformedHeader(f"header declares {header_bytes} bytes, only {len(blob)} available")
    reserved = _ascii(main["reserved"], "reserved")
    if reserved.startswith("EDF+D"):
        raise UnsupportedVariant("discontinuous EDF+ recordings are not supported")
    num_records = _int(main["num_records"], "num_records")
    if num_records < 1:
        raise UnsupportedVariant(f"num_records={num_records}: unknown or empty record structure")
    duration = _fraction(main["record_duration"], "record_duration")
    if duration <= 0:
        raise UnsupportedVariant(f"record duration must be positive, got {duration}")

    header = EdfHeader(
        version=_ascii(main["version"], "version"),
        patient_id=_ascii(main["patient_id"], "patient_id"),
        recording_id=_ascii(main["recording_id"], "recording_id"),
        start_datetime=_datetime(_ascii(main["startdate"], "startdate"), _ascii(main["starttime"], "starttime")),
        header_bytes=header_bytes,
        num_records=num_records,
        record_duration_s=duration,
        num_signals=ns,
        reserved=reserved,
    )

    cols: dict[str, list[bytes]] = {}
    pos = 256
    for name, width in _SIGNAL_FIELDS:
        cols[name] = [blob[pos + i * width : pos + (i + 1) * width] for i in range(ns)]
        pos += width * ns

    signals = []
    for i in range(ns):
        spr = _int(cols["samples_per_record"][i], "samples_per_record")
        dig_min = _int(cols["dig_min"][i], "dig_min")
        dig_max = _int(cols["dig_max"][i], "dig_max")
        phys_min = _float(cols["phys_min"][i], "phys_min")
        phys_max = _float(cols["phys_max"][i], "phys_max")
        label = _ascii(cols["label"][i], "label")
        if spr < 1:
            raise MalformedHeader(f"signal {label!r}: samples_per_record must be >= 1")
        if label != ANNOTATION_LABEL:
            if dig_min >= dig_max:
                raise MalformedHeader(f"signal {label!r}: dig_min {dig_min} >= dig_max {dig_max}")
            if phys_min == phys_max:
                raise MalformedHeader(f"signal {label!r}: phys_min == phys_max")
        signals.append(
            SignalHeader(
                label=label,
                physical_dim=_ascii(cols["physical_dim"][i], "physical_dim"),
                phys_min=phys_min,
                phys_max=phys_max,
                dig_min=dig_min,
                dig_max=dig_max,
                samples_per_record=spr,
                transducer=_ascii(cols["transducer"][i], "transducer"),
                prefiltering=_ascii(cols["prefiltering"][i], "prefiltering"),
            )
        )
    return header, signals


def read_edf(source: str | Path | bytes) -> EdfRecord:
    """Parse an EDF file (path or raw bytes) into digital sample arrays."""
    blob = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    header, signals = parse_edf_header(blob)
    spr = np.array([s.samples_per_record for s in signals])
    record_len = int(spr.sum())
    needed = header.header_bytes + 2 * record_len * header.num_records
    if len(blob) < needed:
        raise TruncatedData(f"data section holds {len(blob) - header.header_bytes} bytes, expected {needed - header.header_bytes}")
    data = np.frombuffer(blob, dtype="<i2", count=record_len * header.num_records, offset=header.header_bytes)
    data = data.reshape(header.num_records, record_len)
    bounds = np.concatenate([[0], np.cumsum(spr)])
    digital = [data[:, bounds[i] : bounds[i + 1]].reshape(-1).copy() for i in range(len(signals))]
    return EdfRecord(header, signals, digital)


def digital_to_physical(dig: np.ndarray, sig: SignalHeader) -> np.ndarray:
    return (dig.astype(np.float64) - sig.dig_min) * sig.gain + sig.phys_min


def read_channel(record: EdfRecord, label: str) -> RawChannel:
    i = record.index(label)
    sig = record.signals[i]
    fs = float(sig.samples_per_record / record.header.record_duration_s)
    return RawChannel(sig.label, fs, digital_to_physical(record.digital[i], sig), sig.physical_dim)


# -- writing ------------------------------------------------------------------------
def _fmt_num(x: float, width: int = 8) -> str:
    if float(x).is_integer() and len(str(int(x))) <= width:
        return str(int(x))
    for prec in range(width, 0, -1):
        text = f"{x:.{prec}g}"
        if len(text) <= width:
            return text
    raise ValueError(f"cannot format {x} in {width} characters")


def _field(text: str, width: int) -> bytes:
    raw = text.encode("ascii")
    if len(raw) > width:
        raise ValueError(f"field value {text!r} exceeds {width} bytes")
    return raw.ljust(width, b" ")


def physical_to_digital(x: np.ndarray, phys_min: float, phys_max: float,
                        dig_min: int = -32768, dig_max: int = 32767) -> np.ndarray:
    scaled = (np.asarray(x, dtype=np.float64) - phys_min) / (phys_max - phys_min) * (dig_max - dig_min) + dig_min
    return np.clip(np.round(scaled), dig_min, dig_max).astype("<i2")


def write_edf(
    path: str | Path,
    channels: Sequence[RawChannel],
    phys_range: tuple[float, float] = (-250.0, 250.0),
    record_duration_s: int = 1,
    patient_id: str = "X",
    recording_id: str = "X",
    start: dt.datetime = dt.datetime(2000, 1, 1),
) -> None:
    """Write channels to an EDF file with 16-bit quantisation over ``phys_range``."""
    ns = len(channels)
    spr = []
    for ch in channels:
        n = ch.fs * record_duration_s
        if not float(n).is_integer():
            raise ValueError(f"{ch.label}: fs {ch.fs} x record duration is not an integer")
        spr.append(int(n))
    num_records = len(channels[0].samples) // spr[0]
    for ch, n in zip(channels, spr):
        if len(ch.samples) != num_records * n:
            raise ValueError(f"{ch.label}: length {len(ch.samples)} is not {num_records} records of {n}")
    lo, hi = phys_range

    head = b"".join([
        _field("0", 8),
        _field(patient_id, 80),
        _field(recording_id, 80),
        _field(start.strftime("%d.%m.%y"), 8),
        _field(start.strftime("%H.%M.%S"), 8),
        _field(str(256 + 256 * ns), 8),
        _field("", 44),
        _field(str(num_records), 8),
        _field(_fmt_num(record_duration_s), 8),
        _field(str(ns), 4),
    ])
    per_signal = [
        [_field(ch.label, 16) for ch in channels],
        [_field("", 80) for _ in channels],
        [_field(ch.physical_dim, 8) for ch in channels],
        [_field(_fmt_num(lo), 8) for _ in channels],
        [_field(_fmt_num(hi), 8) for _ in channels],
        [_field("-32768", 8) for _ in channels],
        [_field("32767", 8) for _ in channels],
        [_field("", 80) for _ in channels],
        [_field(str(n), 8) for n in spr],
        [_field("", 32) for _ in channels],
    ]
    head += b"".join(b"".join(col) for col in per_signal)

    blocks = [physical_to_digital(ch.samples, lo, hi).reshape(num_records, n) for ch, n in zip(channels, spr)]
    body = np.concatenate(blocks, axis=1).astype("<i2").tobytes()
    Path(path).write_bytes(head + body)
