import numpy as np
import pytest

from oracles import match_ref, nms_ref
from psgdetect.ingest.annotations import ScoredEvent
from psgdetect.intervals import iou_matrix
from psgdetect.model import ModelConfig, build
from psgdetect.postprocess import (
    CandidateEvent,
    RecordMetrics,
    WindowScores,
    evaluate_record,
    events_per_hour,
    match_events,
    nms,
    predict_record,
    prf1,
    score_record,
    segment_starts,
    subject_summary,
    sweep,
    sweep_argmax,
    write_sweep_csv,
)


def _random_cands(rng, n, classes=(1, 2)):
    out = []
    for _ in range(n):
        # coarse values make probability and start ties common
        out.append(CandidateEvent(int(rng.choice(classes)), float(rng.integers(1, 6)) / 5,
                                  float(rng.integers(0, 40)) / 2, float(rng.integers(1, 12)) / 2))
    return out


def test_nms_equals_bruteforce_1000():
    rng = np.random.default_rng(0)
    for i in range(1000):
        cands = _random_cands(rng, int(rng.integers(0, 51)))
        thr = float(rng.choice([0.0, 0.1, 0.3, 0.5, 0.9]))
        got = [(c.class_k, c.probability, c.start_s, c.duration_s) for c in nms(cands, thr)]
        want = nms_ref([(c.class_k, c.probability, c.start_s, c.duration_s) for c in cands], thr)
        assert got == want, i


def test_match_equals_bruteforce_1000():
    rng = np.random.default_rng(1)
    for i in range(1000):
        preds = [ScoredEvent(1, float(rng.integers(0, 60)) / 2, float(rng.integers(1, 10)) / 2)
                 for _ in range(int(rng.integers(0, 51)))]
        truths = [ScoredEvent(1, float(rng.integers(0, 60)) / 2, float(rng.integers(1, 10)) / 2)
                  for _ in range(int(rng.integers(0, 51)))]
        thr = float(rng.choice([0.0, 0.1, 0.3, 0.5]))
        m = match_events(preds, truths, thr)
        tp, fp, fn, pairs = match_ref([(p.start_s, p.duration_s) for p in preds],
                                      [(t.start_s, t.duration_s) for t in truths], thr)
        assert (m.tp, m.fp, m.fn) == (tp, fp, fn), i
        assert [(a, b) for a, b, _ in m.pairs] == [(a, b) for a, b, _ in pairs], i


def test_nms_properties():
    rng = np.random.default_rng(2)
    for _ in range(200):
        cands = _random_cands(rng, 40)
        kept = nms(cands, 0.3)
        for k in (1, 2):
            g = [c for c in kept if c.class_k == k]
            if len(g) > 1:
                m = iou_matrix([c.start_s for c in g], [c.duration_s for c in g],
                               [c.start_s for c in g], [c.duration_s for c in g])
                np.fill_diagonal(m, 0)
                assert m.max() <= 0.3
    assert nms([], 0.3) == []


def test_nms_tie_keeps_earlier_start():
    a = CandidateEvent(1, 0.8, 10.0, 4.0)
    b = CandidateEvent(1, 0.8, 9.0, 4.0)
    assert nms([a, b], 0.3) == [b]


def test_match_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = [ScoredEvent(1, float(rng.uniform(0, 30)), float(rng.uniform(0.5, 5))) for _ in range(rng.integers(0, 15))]
        t = [ScoredEvent(1, float(rng.uniform(0, 30)), float(rng.uniform(0.5, 5))) for _ in range(rng.integers(0, 15))]
        a, b = match_events(p, t, 0.2), match_events(t, p, 0.2)
        assert (a.tp, a.fp, a.fn) == (b.tp, b.fn, b.fp)


def test_match_examples():
    t = [ScoredEvent(1, 0.0, 2.0)]
    assert match_events([ScoredEvent(1, 1.0, 2.0)], t, 0.3).tp == 1  # IoU 1/3
    assert match_events([ScoredEvent(1, 1.0, 2.0)], t, 0.5).tp == 0
    assert match_events([ScoredEvent(1, 2.0, 2.0)], t, 0.0).tp == 0  # touching only
    m = match_events([ScoredEvent(1, 0.0, 2.0)] * 2, t, 0.1)
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)


def test_prf1():
    assert prf1(0, 0, 0) == (0.0, 0.0, 0.0)
    assert prf1(3, 1, 2) == (0.75, 0.6, pytest.approx(6 / 9))
    rng = np.random.default_rng(4)
    for tp, fp, fn in rng.integers(0, 20, (200, 3)):
        if tp + fp + fn:
            assert prf1(tp, fp, fn)[2] == 2 * tp / (2 * tp + fp + fn)


def test_events_per_hour():
    assert events_per_hour([ScoredEvent(1, 0, 1)] * 10, 8.0) == 1.25
    assert events_per_hour([], 2.0) == 0.0
    assert events_per_hour([ScoredEvent(1, 0, 9)] * 10, 8.0) == 1.25
    with pytest.raises(ValueError):
        events_per_hour([], 0.0)


def test_empty_record_flagged():
    (m,) = evaluate_record("r", [], [], 0.1, 1.0, [1])
    assert m.flagged and (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)


def _rm(f1, pr=0.5, re=0.5, k=1):
    return RecordMetrics("r", k, 0, 0, 0, pr, re, f1, 0.0, 0.0)


def test_subject_summary():
    (row,) = subject_summary([_rm(0.6), _rm(0.8)])
    assert row.f1_mean == pytest.approx(0.7) and row.f1_std == pytest.approx(0.1)
    (row,) = subject_summary([_rm(0.42)])
    assert row.f1_mean == 0.42 and row.f1_std == 0.0
    with pytest.raises(ValueError):
        subject_summary([])


def test_subject_summary_against_hand_aggregates():
    rng = np.random.default_rng(5)
    f1 = rng.uniform(0, 1, 20)
    pr = rng.uniform(0, 1, 20)
    rows = subject_summary([_rm(a, b, k=1) for a, b in zip(f1, pr)] + [_rm(a, k=2) for a in f1[:5]])
    assert [r.class_k for r in rows] == [1, 2]
    n = len(f1)
    mean = sum(f1) / n
    std = (sum((v - mean) ** 2 for v in f1) / n) ** 0.5
    assert rows[0].f1_mean == pytest.approx(mean, abs=1e-12)
    assert rows[0].f1_std == pytest.approx(std, abs=1e-12)
    assert rows[0].precision_mean == pytest.approx(sum(pr) / n, abs=1e-12)
    assert rows[1].n_records == 5


# -- inference and sweeps ---------------------------------------------------------------
def test_segment_starts():
    assert segment_starts(100, 40) == [0, 20, 40, 60]
    assert segment_starts(110, 40) == [0, 20, 40, 60, 70]
    assert segment_starts(30, 40) == [0]
    assert segment_starts(100, 40, 40) == [0, 40, 60]


def _scores(rng, rid, n=60):
    return WindowScores(rid, 600.0, np.ones(n, dtype=int), rng.uniform(0.01, 1, n),
                        rng.uniform(0, 590, n), rng.uniform(1, 10, n))


def test_sweep_properties(tmp_path):
    rng = np.random.default_rng(6)
    scores = [_scores(rng, f"r{i}") for i in range(4)]
    truths = {s.record_id: [ScoredEvent(1, float(a), float(b))
                            for a, b in zip(rng.uniform(0, 590, 20), rng.uniform(1, 10, 20))] for s in scores}
    thetas = [0.1, 0.3, 0.5, 0.7, 1.0]
    ious = [0.1, 0.3, 0.5, 0.7]
    pts = sweep(scores, truths, ious, thetas, 0.3)
    by = {(p.eval_iou, p.theta): p for p in pts}
    for th in thetas:
        f = [by[(i, th)].f1 for i in ious]
        assert all(b <= a for a, b in zip(f, f[1:]))
    n = [by[(0.1, th)].n_pred for th in thetas]
    assert all(b <= a for a, b in zip(n, n[1:]))
    assert by[(0.1, 1.0)].n_pred == 0 and all(by[(i, 1.0)].recall == 0 for i in ious)

    # a single grid point equals direct evaluation
    (one,) = sweep(scores, truths, [0.3], [0.5], 0.3)
    rows = []
    for s in scores:
        m = match_events(s.detect(0.5, 0.3), truths[s.record_id], 0.3)
        rows.append(prf1(m.tp, m.fp, m.fn))
    np.testing.assert_allclose([one.precision, one.recall, one.f1], np.mean(rows, axis=0))

    best = sweep_argmax(pts, eval_iou=0.1)[1]
    assert best.f1 == max(p.f1 for p in pts if p.eval_iou == 0.1)
    write_sweep_csv(tmp_path / "s.csv", pts)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "eval_iou,theta,f1,precision,recall" and len(lines) == len(pts) + 1


def test_sweep_rejects_empty_grid():
    with pytest.raises(ValueError):
        sweep([], {}, [], [0.5], 0.3)


def _zero_detector(cfg, logit_bias):
    det = build(cfg)
    for head in det.heads:
        head.clf.weight.data[...] = 0
        head.loc.weight.data[...] = 0
        head.loc.bias.data[...] = 0
        b = head.clf.bias.data.reshape(cfg.K + 1, -1)
        b[0] = 0.0
        b[1:] = logit_bias
    return det


def _flat_record(seconds, fs=128.0):
    from psgdetect.dsp import Recording

    x = np.random.default_rng(0).standard_normal((6, int(seconds * fs))).astype(np.float32)
    return Recording(x, ["c"] * 6, fs, [], "flat")


CFG = ModelConfig(T=1536, n_max=4, scales=(384,))


def test_zero_probability_heads_give_no_events():
    det = _zero_detector(CFG, -800.0)  # softmax underflows to exactly 0 for the event class
    assert predict_record(det, _flat_record(100), theta_clf=0.0) == []


def test_confident_heads_cover_record_once_per_window():
    # every window predicts its own default interval with the same probability
    det = _zero_detector(CFG, 5.0)
    rec = _flat_record(60)
    s = score_record(det, rec)
    assert s.start_s.min() == 0.0 and (s.start_s + s.duration).max() == pytest.approx(60.0)
    events = predict_record(det, rec, theta_clf=0.5, nms_iou=0.3)
    # overlapping segments yield duplicates that global NMS collapses to one per window
    starts = [e.start_s for e in events]
    assert starts == sorted(set(starts)) and len(events) == 60 // 3
    assert all(e.duration_s == pytest.approx(3.0) for e in events)


def test_short_record_is_padded_and_clipped():
    det = _zero_detector(CFG, 5.0)
    rec = _flat_record(5)
    events = predict_record(det, rec, theta_clf=0.5)
    assert events and max(e.end_s for e in events) <= 5.0 + 1e-9


def test_stride_agreement_on_interior_events():
    det = _zero_detector(CFG, 5.0)
    rec = _flat_record(48)
    a = predict_record(det, rec, 0.5, 0.3, stride=CFG.T)
    b = predict_record(det, rec, 0.5, 0.3, stride=CFG.T // 2)
    assert [(e.start_s, e.duration_s) for e in a] == [(e.start_s, e.duration_s) for e in b]


def test_boundary_straddling_event_single_candidate():
    # two overlapping segments both see the same event; after NMS only one survives
    cands = [CandidateEvent(1, 0.9, 11.0, 2.0), CandidateEvent(1, 0.85, 11.05, 2.0)]
    assert len(nms(cands, 0.3)) == 1


def test_candidate_validation():
    with pytest.raises(ValueError):
        CandidateEvent(1, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        CandidateEvent(1, 0.5, 1.0, 0.0)
