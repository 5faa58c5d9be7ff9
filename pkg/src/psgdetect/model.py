"""The single-shot event detection network and its target/loss machinery.

Network layout per segment ``x`` of shape (C, T):

* channel mixing: 1x1 convolution, C -> C, linear;
* feature pyramid: ``n_max`` blocks of conv(k=3, same padding) -> batch norm ->
  ReLU -> max pool(2). Block 1 maps C -> 8 channels, block n maps
  2^(n+1) -> 2^(n+2), so the trunk ends at (C~, T~) = (2^(n_max+2), T / 2^n_max);
* optional bidirectional GRU with C~ units per direction -> (2 C~, T~);
* per window scale tau, a classification head and a localisation head, each a
  convolution whose kernel spans the whole reduced segment (kernel = stride =
  T~), emitting (K+1) N_d class scores and 2 N_d offsets.

Localisation targets are ``((event_center - window_center) / tau,
ln(event_duration / tau))`` in samples.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ops
from .autodiff.nn import BatchNorm1d, BiGRU, Conv1d, Module
from .autodiff.tensor import Tensor, as_tensor, concat, getitem
from .errors import InvalidConfig, ShapeMismatch
from .ingest.annotations import ScoredEvent
from .intervals import DefaultGrid, default_grid, iou_matrix

FS = 128


@dataclass(frozen=True)
class ModelConfig:
    C: int = 6
    T: int = 15360
    n_max: int = 7
    K: int = 1
    scales: tuple[int, ...] = (384,)
    use_rnn: bool = False
    theta_clf: float = 0.5
    nms_iou: float = 0.3
    match_iou: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        self.validate()

    def validate(self) -> None:
        if self.C < 1 or self.K < 1 or self.n_max < 1:
            raise InvalidConfig("C, K and n_max must be >= 1")
        if self.T % (2 ** self.n_max):
            raise InvalidConfig(f"T={self.T} not divisible by 2^n_max={2 ** self.n_max}")
        if not self.scales:
            raise InvalidConfig("at least one window scale is required")
        if len(set(self.scales)) != len(self.scales):
            raise InvalidConfig(f"duplicate scales in {self.scales}")
        for tau in self.scales:
            if tau <= 0 or self.T % tau:
                raise InvalidConfig(f"scale {tau} does not divide T={self.T}")
        if not 0.0 < self.theta_clf < 1.0:
            raise InvalidConfig(f"theta_clf must lie in (0, 1), got {self.theta_clf}")
        if not 0.0 <= self.nms_iou <= 1.0 or not 0.0 < self.match_iou <= 1.0:
            raise InvalidConfig("nms_iou / match_iou out of range")

    @property
    def c_tilde(self) -> int:
        return 2 ** (2 + self.n_max)

    @property
    def t_tilde(self) -> int:
        return self.T // 2 ** self.n_max

    @property
    def head_channels(self) -> int:
        return 2 * self.c_tilde if self.use_rnn else self.c_tilde

    def n_defaults(self, tau: int) -> int:
        return self.T // tau

    def grids(self) -> list[DefaultGrid]:
        return [default_grid(self.T, tau) for tau in self.scales]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidConfig(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


class FeatureBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = Conv1d(c_in, c_out, 3, rng, padding=1)
        self.bn = BatchNorm1d(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.maxpool1d(ops.relu(self.bn(self.conv(x))), 2, 2)


class DetectionHead(Module):
    def __init__(self, c_in: int, t_tilde: int, n_classes: int, n_d: int, rng: np.random.Generator):
        # zero heads start at the uniform softmax and the window's own default interval
        self.clf = Conv1d(c_in, n_classes * n_d, t_tilde, rng, stride=t_tilde, init="zeros")
        self.loc = Conv1d(c_in, 2 * n_d, t_tilde, rng, stride=t_tilde, init="zeros")
        self.n_classes = n_classes
        self.n_d = n_d

    def __call__(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        b = feats.shape[0]
        logits = self.clf(feats).reshape(b, self.n_classes, self.n_d)
        loc = self.loc(feats).reshape(b, 2, self.n_d)
        return logits, loc


@dataclass
class ScaleOutput:
    tau: int
    logits: Tensor  # (B, K+1, N_d)
    loc: Tensor  # (B, 2, N_d)

    @property
    def class_probs(self) -> np.ndarray:
        return ops.softmax(self.logits.detach(), axis=1).data


@dataclass
class RawPredictions:
    scales: list[ScaleOutput]

    def __iter__(self):
        return iter(self.scales)


class Detector(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.mix = Conv1d(config.C, config.C, 1, rng, init="fan_in")
        blocks = [FeatureBlock(config.C, 8, rng)]
        for n in range(2, config.n_max + 1):
            blocks.append(FeatureBlock(2 ** (n + 1), 2 ** (n + 2), rng))
        self.blocks = blocks
        self.rnn = BiGRU(config.c_tilde, config.c_tilde, rng) if config.use_rnn else None
        self.heads = [
            DetectionHead(config.head_channels, config.t_tilde, config.K + 1, config.n_defaults(tau), rng)
            for tau in config.scales
        ]

    def features(self, x: Tensor) -> Tensor:
        h = self.mix(x)
        for block in self.blocks:
            h = block(h)
        if self.rnn is not None:
            h = self.rnn(h)
        return h

    def __call__(self, x) -> RawPredictions:
        return forward(self, x)


def build(config: ModelConfig) -> Detector:
    return Detector(config)


def forward(det: Detector, x) -> RawPredictions:
    """Run the network on ``x`` of shape (C, T) or (B, C, T)."""
    cfg = det.config
    x = as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.shape[1:] != (cfg.C, cfg.T):
        raise ShapeMismatch(f"input {x.shape} does not match (B, {cfg.C}, {cfg.T})")
    feats = det.features(x)
    outs = []
    for tau, head in zip(cfg.scales, det.heads):
        logits, loc = head(feats)
        outs.append(ScaleOutput(tau, logits, loc))
    return RawPredictions(outs)


# -- targets -----------------------------------------------------------------------------
@dataclass
class TargetAssignment:
    """Per-scale training targets for one segment."""

    tau: int
    class_target: np.ndarray  # (N_d,) int, 0 = non-event
    loc_target: np.ndarray  # (2, N_d)
    match_mask: np.ndarray  # (N_d,) bool
    matched_event: np.ndarray = field(default=None)  # (N_d,) index into events, -1 if none


def _best_window(ious: np.ndarray, centers: np.ndarray, event_center: float) -> int:
    """Highest IoU; ties go to the window centred nearest the event, then earliest."""
    best = ious.max()
    cands = np.flatnonzero(ious == best)
    if len(cands) == 1:
        return int(cands[0])
    dist = np.abs(centers[cands] - event_center)
    return int(cands[np.argmin(dist)])


def encode_targets(
    events: Sequence[ScoredEvent],
    grids: Sequence[DefaultGrid],
    fs: float = FS,
    match_iou: float = 0.5,
) -> list[TargetAssignment]:
    """Assign events (seconds, segment-relative) to default windows.

    A window is positive for the event it overlaps most when that IoU reaches
    ``match_iou``; on top of that each event claims its single best window.
    Events are processed in order, so a later event's claim wins a contested
    best window.
    """
    starts = np.array([e.start_s * fs for e in events], dtype=np.float64)
    durs = np.array([e.duration_s * fs for e in events], dtype=np.float64)
    classes = np.array([e.class_k for e in events], dtype=np.int64)
    out = []
    for grid in grids:
        n = grid.n
        cls = np.zeros(n, dtype=np.int64)
        loc = np.zeros((2, n), dtype=np.float64)
        owner = np.full(n, -1, dtype=np.int64)
        if len(events):
            m = iou_matrix(starts, durs, grid.starts, np.full(n, float(grid.tau)))  # (E, N)
            best_evt = m.argmax(axis=0)
            best_iou = m[best_evt, np.arange(n)]
            owner[best_iou >= match_iou] = best_evt[best_iou >= match_iou]
            centers = grid.centers
            for i in range(len(events)):
                if m[i].max() > 0:
                    owner[_best_window(m[i], centers, starts[i] + durs[i] / 2)] = i
            pos = owner >= 0
            ev = owner[pos]
            cls[pos] = classes[ev]
            loc[0, pos] = (starts[ev] + durs[ev] / 2 - centers[pos]) / grid.tau
            loc[1, pos] = np.log(durs[ev] / grid.tau)
        out.append(TargetAssignment(grid.tau, cls, loc, owner >= 0, owner))
    return out


def decode_loc(loc: np.ndarray, grid: DefaultGrid, fs: float = FS) -> tuple[np.ndarray, np.ndarray]:
    """Map localisation outputs (2, N_d) to (start_s, duration_s) arrays."""
    loc = np.asarray(loc, dtype=np.float64)
    center = grid.centers + loc[0] * grid.tau
    dur = grid.tau * np.exp(loc[1])
    return (center - dur / 2) / fs, dur / fs


@dataclass
class Candidate:
    class_k: int
    probability: float
    start_s: float
    duration_s: float


def decode_candidates(
    raw: RawPredictions,
    theta_clf: float,
    fs: float = FS,
    index: int = 0,
) -> list[Candidate]:
    """Candidates from batch element ``index`` whose class probability >= theta."""
    cands = []
    for out in raw:
        probs = out.class_probs[index]  # (K+1, N_d)
        grid = DefaultGrid(probs.shape[1] * out.tau, out.tau)
        starts, durs = decode_loc(out.loc.data[index], grid, fs)
        for k in range(1, probs.shape[0]):
            for j in np.flatnonzero(probs[k] >= theta_clf):
                cands.append(Candidate(k, float(probs[k, j]), float(starts[j]), float(durs[j])))
    return cands


# -- loss --------------------------------------------------------------------------------
NEG_POS_RATIO = 3


def mine_negatives(ce: np.ndarray, positive: np.ndarray) -> np.ndarray:
    """Selection mask: all positives plus the hardest negatives per segment.

    ``ce`` and ``positive`` are (B, N_d). A segment with p positives keeps its
    3p highest-loss negatives; one without positives keeps N_d // 4 of them.
    """
    bsz, n = ce.shape
    sel = positive.copy()
    for b in range(bsz):
        npos = int(positive[b].sum())
        want = NEG_POS_RATIO * npos if npos else max(1, n // 4)
        neg = np.flatnonzero(~positive[b])
        want = min(want, len(neg))
        if want == 0:
            continue
        # stable order: larger loss first, earlier window on ties
        order = np.lexsort((neg, -ce[b, neg]))
        sel[b, neg[order[:want]]] = True
    return sel


def loss(raw: RawPredictions, targets: Sequence[Sequence[TargetAssignment]], loc_weight: float = 1.0) -> Tensor:
    """Classification + localisation loss summed over scales.

    ``targets[b][s]`` is the assignment of segment ``b`` at scale ``s``. The
    classification term is the mean cross-entropy over positives and mined
    negatives; the localisation term is the smooth-L1 over matched windows
    (both coordinates summed), averaged per matched window, and omitted when
    nothing is matched.
    """
    total = None
    for s, out in enumerate(raw):
        cls_t = np.stack([t[s].class_target for t in targets])
        loc_t = np.stack([t[s].loc_target for t in targets])
        pos = np.stack([t[s].match_mask for t in targets])
        ce_all = ops.cross_entropy(out.logits, cls_t, axis=1, reduction="none")  # (B, N_d)
        sel = mine_negatives(ce_all.data, pos)
        term = getitem(ce_all, sel).mean()
        npos = int(pos.sum())
        if npos:
            sl = ops.smooth_l1(out.loc, loc_t, reduction="none")  # (B, 2, N_d)
            mask = np.broadcast_to(pos[:, None, :], sl.shape)
            term = term + getitem(sl, mask).sum() * (loc_weight / npos)
        total = term if total is None else total + term
    return total
