"""Whole-night inference, suppression, event matching and scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import no_grad
from .dsp import Recording
from .errors import RecordTooShort
from .ingest.annotations import ScoredEvent
from .intervals import DefaultGrid, iou_matrix
from .model import Detector, decode_loc, forward


@dataclass(frozen=True)
class CandidateEvent:
    class_k: int
    probability: float
    start_s: float
    duration_s: float

    def __post_init__(self):
        if not 0.0 < self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside (0, 1]")
        if not self.duration_s > 0:
            raise ValueError(f"duration must be positive, got {self.duration_s}")

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    def to_event(self) -> ScoredEvent:
        return ScoredEvent(self.class_k, self.start_s, self.duration_s)


# -- suppression ------------------------------------------------------------------------
def _nms_indices(prob: np.ndarray, start: np.ndarray, dur: np.ndarray, nms_iou: float) -> np.ndarray:
    order = np.lexsort((start, -prob))
    s, d = start[order], dur[order]
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.flatnonzero(alive[i + 1 :]) + i + 1
        if len(rest):
            ov = iou_matrix(s[i : i + 1], d[i : i + 1], s[rest], d[rest])[0]
            alive[rest[ov > nms_iou]] = False
    return np.asarray(keep, dtype=np.int64)


def nms(candidates: Sequence[CandidateEvent], nms_iou: float) -> list[CandidateEvent]:
    """Greedy per-class suppression.

    Candidates are visited by probability (ties: earlier start); each kept one
    removes every remaining same-class candidate with IoU > ``nms_iou``.
    Output is sorted by start time.
    """
    kept: list[CandidateEvent] = []
    for k in sorted({c.class_k for c in candidates}):
        group = [c for c in candidates if c.class_k == k]
        prob = np.array([c.probability for c in group])
        start = np.array([c.start_s for c in group])
        dur = np.array([c.duration_s for c in group])
        kept.extend(group[i] for i in _nms_indices(prob, start, dur, nms_iou))
    kept.sort(key=lambda c: (c.start_s, c.class_k, -c.probability))
    return kept


# -- whole-night inference -----------------------------------------------------------
@dataclass
class WindowScores:
    """Every default window of every segment of one record, decoded to absolute time.

    Thresholding and suppression can then be repeated for many settings
    without re-running the network.
    """

    record_id: str
    duration_s: float
    class_k: np.ndarray  # (M,)
    probability: np.ndarray  # (M,)
    start_s: np.ndarray  # (M,)
    duration: np.ndarray  # (M,)

    def candidates(self, theta_clf: float) -> list[CandidateEvent]:
        sel = np.flatnonzero(self.probability >= theta_clf)
        return [CandidateEvent(int(self.class_k[i]), float(self.probability[i]),
                               float(self.start_s[i]), float(self.duration[i])) for i in sel]

    def detect(self, theta_clf: float, nms_iou: float) -> list[CandidateEvent]:
        return nms(self.candidates(theta_clf), nms_iou)


def segment_starts(n_samples: int, T: int, stride: int | None = None) -> list[int]:
    """Starts at multiples of ``stride`` plus a final segment flush with the record end."""
    stride = stride or T // 2
    if n_samples <= T:
        return [0]
    starts = list(range(0, n_samples - T + 1, stride))
    if starts[-1] != n_samples - T:
        starts.append(n_samples - T)
    return starts


def _reflect_pad(x: np.ndarray, T: int) -> np.ndarray:
    while x.shape[1] < T:
        need = T - x.shape[1]
        x = np.pad(x, ((0, 0), (0, min(need, x.shape[1] - 1))), mode="reflect")
    return x


def score_record(det: Detector, rec: Recording, stride: int | None = None, batch: int = 32) -> WindowScores:
    cfg = det.config
    x = rec.channels
    if x.shape[1] < 2:
        raise RecordTooShort(f"record {rec.record_id!r} has {x.shape[1]} samples")
    if x.shape[1] < cfg.T:
        x = _reflect_pad(x, cfg.T)
    starts = segment_starts(x.shape[1], cfg.T, stride)
    cls, prob, beg, dur = [], [], [], []
    was_training = det.training
    det.eval()
    try:
        with no_grad():
            for i in range(0, len(starts), batch):
                chunk = starts[i : i + batch]
                xb = np.stack([x[:, s : s + cfg.T] for s in chunk])
                raw = forward(det, xb)
                for out in raw:
                    probs = out.class_probs  # (b, K+1, N_d)
                    grid = DefaultGrid(cfg.T, out.tau)
                    for b, s0 in enumerate(chunk):
                        st, du = decode_loc(out.loc.data[b], grid, rec.fs)
                        for k in range(1, probs.shape[1]):
                            cls.append(np.full(grid.n, k))
                            prob.append(probs[b, k].astype(np.float64))
                            beg.append(st + s0 / rec.fs)
                            dur.append(du)
    finally:
        det.train(was_training)
    cls, prob, beg, dur = (np.concatenate(a) for a in (cls, prob, beg, dur))
    # clip decoded intervals to the real record
    end = np.minimum(beg + dur, rec.duration_s)
    beg = np.maximum(beg, 0.0)
    ok = (end > beg) & (prob > 0)
    return WindowScores(rec.record_id, rec.duration_s, cls[ok], prob[ok], beg[ok], (end - beg)[ok])


def predict_record(det: Detector, rec: Recording, theta_clf: float | None = None,
                   nms_iou: float | None = None, stride: int | None = None) -> list[CandidateEvent]:
    """Slide half-overlapping segments over the night, threshold, then one global NMS."""
    theta = det.config.theta_clf if theta_clf is None else theta_clf
    nms_iou = det.config.nms_iou if nms_iou is None else nms_iou
    return score_record(det, rec, stride).detect(theta, nms_iou)


# -- matching and metrics --------------------------------------------------------------------
@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]  # (pred index, true index, iou)
    tp: int
    fp: int
    fn: int


def match_events(preds: Sequence, truths: Sequence, eval_iou: float) -> MatchResult:
    """Greedy one-to-one matching by descending IoU for a single class.

    Pairs with equal IoU are taken in (prediction, truth) index order. A pair
    needs IoU >= ``eval_iou`` and a non-empty overlap.
    """
    n_p, n_t = len(preds), len(truths)
    pairs: list[tuple[int, int, float]] = []
    if n_p and n_t:
        m = iou_matrix([p.start_s for p in preds], [p.duration_s for p in preds],
                       [t.start_s for t in truths], [t.duration_s for t in truths])
        pi, ti = np.nonzero((m >= eval_iou) & (m > 0))
        vals = m[pi, ti]
        order = np.lexsort((ti, pi, -vals))
        used_p = np.zeros(n_p, dtype=bool)
        used_t = np.zeros(n_t, dtype=bool)
        for o in order:
            a, b = pi[o], ti[o]
            if not used_p[a] and not used_t[b]:
                used_p[a] = used_t[b] = True
                pairs.append((int(a), int(b), float(vals[o])))
    tp = len(pairs)
    return MatchResult(pairs, tp, n_p - tp, n_t - tp)


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1; undefined ratios are reported as 0."""
    pr = tp / (tp + fp) if tp + fp else 0.0
    re = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    return pr, re, f1


def events_per_hour(events: Sequence, total_hours: float) -> float:
    if total_hours <= 0:
        raise ValueError("total_hours must be positive")
    return len(events) / total_hours


@dataclass
class RecordMetrics:
    record_id: str
    class_k: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    pred_per_hour: float
    true_per_hour: float
    flagged: bool = False  # no predictions and no truths: metrics defined as 0


def evaluate_record(record_id: str, preds: Sequence, truths: Sequence, eval_iou: float,
                    hours: float, classes: Iterable[int]) -> list[RecordMetrics]:
    out = []
    for k in classes:
        p = [e for e in preds if e.class_k == k]
        t = [e for e in truths if e.class_k == k]
        m = match_events(p, t, eval_iou)
        pr, re, f1 = prf1(m.tp, m.fp, m.fn)
        out.append(RecordMetrics(record_id, k, m.tp, m.fp, m.fn, pr, re, f1,
                                 events_per_hour(p, hours), events_per_hour(t, hours), not p and not t))
    return out


# -- cohort summaries ---------------------------------------------------------------------
@dataclass
class CohortRow:
    class_k: int
    n_records: int
    f1_mean: float
    f1_std: float
    precision_mean: float
    precision_std: float
    recall_mean: float
    recall_std: float


def subject_summary(metrics: Sequence[RecordMetrics]) -> list[CohortRow]:
    """Per-class mean and population standard deviation over records."""
    if not metrics:
        raise ValueError("subject_summary needs at least one record")
    rows = []
    for k in sorted({m.class_k for m in metrics}):
        sel = [m for m in metrics if m.class_k == k]
        f1 = np.array([m.f1 for m in sel])
        pr = np.array([m.precision for m in sel])
        re = np.array([m.recall for m in sel])
        rows.append(CohortRow(k, len(sel), f1.mean(), f1.std(), pr.mean(), pr.std(), re.mean(), re.std()))
    return rows


@dataclass
class SweepPoint:
    class_k: int
    eval_iou: float
    theta: float
    f1: float
    precision: float
    recall: float
    n_pred: int = 0


def sweep(scores: Sequence[WindowScores], truths: Mapping[str, Sequence[ScoredEvent]],
          iou_grid: Sequence[float], theta_grid: Sequence[float], nms_iou: float,
          classes: Sequence[int] = (1,)) -> list[SweepPoint]:
    """Subject-averaged F1/Pr/Re over an (eval_iou, theta) grid.

    ``scores`` come from :func:`score_record`, so the network runs once per
    record regardless of grid size.
    """
    if not len(iou_grid) or not len(theta_grid):
        raise ValueError("sweep grids must be non-empty")
    points = []
    for theta in theta_grid:
        dets = {s.record_id: s.detect(theta, nms_iou) for s in scores}
        for eval_iou in iou_grid:
            for k in classes:
                rows = []
                n_pred = 0
                for s in scores:
                    p = [c for c in dets[s.record_id] if c.class_k == k]
                    t = [e for e in truths[s.record_id] if e.class_k == k]
                    m = match_events(p, t, eval_iou)
                    rows.append(prf1(m.tp, m.fp, m.fn))
                    n_pred += len(p)
                pr, re, f1 = np.mean(rows, axis=0)
                points.append(SweepPoint(k, float(eval_iou), float(theta), float(f1), float(pr), float(re), n_pred))
    points.sort(key=lambda p: (p.class_k, p.eval_iou, p.theta))
    return points


def sweep_argmax(points: Sequence[SweepPoint], eval_iou: float | None = None) -> dict[int, SweepPoint]:
    """Best F1 per class (first in grid order on ties), optionally at a fixed eval IoU."""
    best: dict[int, SweepPoint] = {}
    for p in points:
        if eval_iou is not None and not np.isclose(p.eval_iou, eval_iou):
            continue
        cur = best.get(p.class_k)
        if cur is None or p.f1 > cur.f1:
            best[p.class_k] = p
    return best


# -- CSV writers ------------------------------------------------------------------------
def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_sweep_csv(path: str | Path, points: Sequence[SweepPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eval_iou", "theta", "f1", "precision", "recall"])
        for p in points:
            w.writerow([_fmt(p.eval_iou), _fmt(p.theta), _fmt(p.f1), _fmt(p.precision), _fmt(p.recall)])


def write_record_metrics_csv(path: str | Path, metrics: Sequence[RecordMetrics], names: Mapping[int, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "class", "tp", "fp", "fn", "precision", "recall", "f1",
                    "pred_per_hour", "true_per_hour", "flagged"])
        for m in metrics:
            w.writerow([m.record_id, names.get(m.class_k, m.class_k), m.tp, m.fp, m.fn, _fmt(m.precision),
                        _fmt(m.recall), _fmt(m.f1), _fmt(m.pred_per_hour), _fmt(m.true_per_hour), int(m.flagged)])


def write_summary_csv(path: str | Path, rows: Sequence[CohortRow], names: Mapping[int, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "n_records", "f1_mean", "f1_std", "precision_mean", "precision_std",
                    "recall_mean", "recall_std"])
        for r in rows:
            w.writerow([names.get(r.class_k, r.class_k), r.n_records, _fmt(r.f1_mean), _fmt(r.f1_std),
                        _fmt(r.precision_mean), _fmt(r.precision_std), _fmt(r.recall_mean), _fmt(r.recall_std)])


def write_scatter_csv(path: str | Path, metrics: Sequence[RecordMetrics], names: Mapping[int, str]) -> None:
    """One row per record with its F1 for every class, for scatter plots."""
    classes = sorted({m.class_k for m in metrics})
    table: dict[str, dict[int, float]] = {}
    for m in metrics:
        table.setdefault(m.record_id, {})[m.class_k] = m.f1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id"] + [f"f1_{names.get(k, k)}" for k in classes])
        for rid in sorted(table):
            w.writerow([rid] + [_fmt(table[rid][k]) if k in table[rid] else "" for k in classes])
