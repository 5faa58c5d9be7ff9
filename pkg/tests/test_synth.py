import numpy as np
import pytest

from psgdetect.errors import InfeasibleRates
from psgdetect.ingest.annotations import load_annotations
from psgdetect.ingest.edf import read_channel, read_edf
from psgdetect.pipeline import load_raw_record
from psgdetect.synth import AR, CHANNELS, LM, SynthSpec, generate, write_record


def test_zero_rates_pure_noise():
    rec = generate(SynthSpec(seed=1, duration_s=120, ar_rate=0, lm_rate=0))
    assert rec.events == []
    assert [c.label for c in rec.channels] == list(CHANNELS)
    assert all(len(c.samples) == 120 * 256 for c in rec.channels)


def test_labelled_count_equals_injected():
    rec = generate(SynthSpec(seed=3, duration_s=3600, ar_rate=20, lm_rate=30))
    n_ar = sum(e.class_k == AR for e in rec.events)
    n_lm = sum(e.class_k == LM for e in rec.events)
    assert (n_ar, n_lm) == (rec.injected[AR], rec.injected[LM])
    assert n_ar > 5 and n_lm > 5


def test_no_same_class_overlap_and_duration_bounds():
    spec = SynthSpec(seed=4, duration_s=3600)
    rec = generate(spec)
    for k, (lo, hi) in ((AR, spec.ar_duration_s), (LM, spec.lm_duration_s)):
        ev = [e for e in rec.events if e.class_k == k]
        assert all(lo <= e.duration_s < hi for e in ev)
        assert all(a.end_s <= b.start_s for a, b in zip(ev, ev[1:]))
        assert all(0 <= e.start_s and e.end_s <= spec.duration_s for e in ev)


def _bandpower(x, fs, lo, hi):
    f = np.fft.rfftfreq(len(x), 1 / fs)
    p = np.abs(np.fft.rfft(x * np.hanning(len(x)))) ** 2
    return p[(f >= lo) & (f <= hi)].sum() / len(x)


def test_arousal_alpha_bandpower_exceeds_background():
    spec = SynthSpec(seed=5, duration_s=1800, ar_rate=20, lm_rate=0, snr_db=10)
    rec = generate(spec)
    fs = spec.fs
    eeg = rec.channels[0].samples
    busy = np.zeros(len(eeg), dtype=bool)
    for e in rec.events:
        busy[int(e.start_s * fs) : int(e.end_s * fs)] = True
    for e in [e for e in rec.events if e.class_k == AR]:
        n = int(e.duration_s * fs)
        seg = eeg[int(e.start_s * fs) : int(e.start_s * fs) + n]
        # background reference: the nearest event-free stretch of equal length
        for s in range(int(e.end_s * fs) + int(fs), len(eeg) - n, n):
            if not busy[s : s + n].any():
                ref = eeg[s : s + n]
                break
        gain = 10 * np.log10(_bandpower(seg, fs, 8, 12) / _bandpower(ref, fs, 8, 12))
        assert gain >= 6.0


def test_leg_burst_is_high_frequency():
    spec = SynthSpec(seed=6, duration_s=600, ar_rate=0, lm_rate=60)
    rec = generate(spec)
    leg = rec.channels[5].samples
    e = max(rec.events, key=lambda e: e.duration_s)
    i0, n = int(e.start_s * 256), int(e.duration_s * 256)
    seg = leg[i0 : i0 + n]
    ref = leg[i0 - n - 256 : i0 - 256] if i0 > n + 256 else leg[i0 + n + 256 : i0 + 2 * n + 256]
    assert 10 * np.log10(_bandpower(seg, 256, 20, 60) / _bandpower(ref, 256, 20, 60)) >= 6.0


def test_same_seed_bit_identical():
    a = generate(SynthSpec(seed=9, duration_s=300))
    b = generate(SynthSpec(seed=9, duration_s=300))
    c = generate(SynthSpec(seed=10, duration_s=300))
    assert a.events == b.events
    for x, y in zip(a.channels, b.channels):
        assert x.samples.tobytes() == y.samples.tobytes()
    assert not np.array_equal(a.channels[0].samples, c.channels[0].samples)


def test_infeasible_rates():
    with pytest.raises(InfeasibleRates):
        generate(SynthSpec(duration_s=60, ar_rate=400))
    with pytest.raises(ValueError):
        SynthSpec(ar_rate=-1)
    with pytest.raises(ValueError):
        SynthSpec(ar_duration_s=(2.0, 5.0))


def test_edf_csv_round_trip(tmp_path):
    rec = generate(SynthSpec(seed=11, duration_s=300))
    edf, csv = write_record(rec, tmp_path, "n0")
    assert load_annotations(csv) == rec.events
    back = read_edf(edf)
    lsb = 500.0 / 65535
    for ch in rec.channels:
        got = read_channel(back, ch.label)
        assert got.fs == ch.fs
        assert np.max(np.abs(got.samples - ch.samples)) <= lsb / 2 + 1e-9
    pre = load_raw_record(edf, csv)
    assert pre.events == rec.events and pre.fs == 128.0
