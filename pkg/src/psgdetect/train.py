"""Minibatch SGD training with eval-loss driven decay and early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import load_tensors, no_grad, save_tensors
from .dsp import Recording
from .errors import CheckpointError, InvalidConfig, NonFiniteGradient, NonFiniteLoss
from .model import Detector, ModelConfig, TargetAssignment, build, encode_targets, forward, loss
from .sampling import class_schedule, draw_sample, sample_segment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    B: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    steps_per_epoch: int | None = None  # None: ceil(train events / B)
    max_epochs: int = 200
    patience: int = 10
    decay_every: int = 5
    decay_factor: float = 0.5
    clip_norm: float | None = 5.0
    clip_mode: str = "tensor"  # "tensor": cap each parameter's norm; "global": cap the joint norm
    eval_per_class: int = 16  # eval segments per class per record

    def __post_init__(self):
        if self.B < 1 or self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig("need B >= 1, lr > 0 and momentum in [0, 1)")
        if self.max_epochs < 1 or self.patience < 1 or self.decay_every < 1:
            raise InvalidConfig("max_epochs, patience and decay_every must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise InvalidConfig("steps_per_epoch must be >= 1")
        if not 0.0 < self.decay_factor < 1.0:
            raise InvalidConfig("decay_factor must lie in (0, 1)")
        if self.clip_mode not in ("tensor", "global"):
            raise InvalidConfig(f"clip_mode must be 'tensor' or 'global', got {self.clip_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise InvalidConfig(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)


# -- optimiser --------------------------------------------------------------------------
@dataclass
class OptimState:
    lr: float = 1e-3
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    epochs_since_best: int = 0
    best_eval_loss: float = math.inf


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the raw norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NonFiniteGradient(f"non-finite gradient in {bad}")
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def clip_per_tensor(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale each gradient in place so its own L2 norm is at most ``max_norm``; returns the raw global norm.

    A single tensor with a large gradient (the wide detection heads) then no
    longer shrinks the update of every other layer.
    """
    sq = {k: float(np.sum(np.square(g, dtype=np.float64))) for k, g in grads.items()}
    norm = math.sqrt(sum(sq.values()))
    if not math.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NonFiniteGradient(f"non-finite gradient in {bad}")
    if max_norm is not None:
        for k, g in grads.items():
            n = math.sqrt(sq[k])
            if n > max_norm:
                g *= max_norm / n
    return norm


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """Classical momentum: ``v = momentum * v + g``; ``p -= lr * v`` (in place)."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"velocity shape {v.shape} != parameter shape {p.shape} for {name}")
        v *= state.momentum
        v += g
        p -= state.lr * v


# -- schedule ---------------------------------------------------------------------------
class PlateauSchedule:
    """Halve the learning rate every ``decay_every`` epochs without a new best; stop after ``patience``.

    Both counters reset whenever the eval loss reaches a new minimum.
    """

    def __init__(self, state: OptimState, patience: int = 10, decay_every: int = 5, factor: float = 0.5):
        self.state = state
        self.patience = patience
        self.decay_every = decay_every
        self.factor = factor

    def update(self, eval_loss: float) -> str:
        """Record one epoch's eval loss; returns 'best', 'decay', 'stop' or 'wait'."""
        s = self.state
        if eval_loss < s.best_eval_loss:
            s.best_eval_loss = eval_loss
            s.epochs_since_best = 0
            return "best"
        s.epochs_since_best += 1
        if s.epochs_since_best >= self.patience:
            return "stop"
        if s.epochs_since_best % self.decay_every == 0:
            s.lr *= self.factor
            return "decay"
        return "wait"


# -- eval set ---------------------------------------------------------------------------
@dataclass
class EvalSet:
    x: np.ndarray  # (N, C, T)
    targets: list[list[TargetAssignment]]
    sources: list[tuple[str, int]]

    def __len__(self) -> int:
        return len(self.x)


def build_eval_set(records: Sequence[Recording], model_cfg: ModelConfig, per_class: int = 16,
                   seed: int = 0) -> EvalSet:
    """Fixed stratified segments: per record and class, ``per_class`` segments.

    Event-anchored segments use events spread evenly over the record's class-k
    events; the proposal draws come from a generator seeded by ``seed`` and the
    record position, so the set depends only on its inputs.
    """
    grids = model_cfg.grids()
    xs, targets, sources = [], [], []
    for i, rec in enumerate(records):
        rng = np.random.default_rng([seed, i])
        for k in range(model_cfg.K + 1):
            if k == 0:
                segs = [sample_segment(rec, 0, rng, model_cfg.T) for _ in range(per_class)]
            else:
                pool = [e for e in rec.events if e.class_k == k]
                if not pool:
                    continue
                idx = np.linspace(0, len(pool) - 1, per_class).round().astype(int)
                segs = [sample_segment(rec, k, rng, model_cfg.T, anchor=pool[j]) for j in idx]
            for s in segs:
                xs.append(s.x)
                targets.append(encode_targets(s.events, grids, rec.fs, model_cfg.match_iou))
                sources.append((s.record_id, s.start))
    return EvalSet(np.stack(xs).astype(np.float32), targets, sources)


def evaluate_loss(det: Detector, eval_set: EvalSet, batch: int = 32) -> float:
    """Mean loss over the eval set in inference mode (batch-norm running statistics)."""
    was_training = det.training
    det.eval()
    total, n = 0.0, 0
    try:
        with no_grad():
            for i in range(0, len(eval_set), batch):
                xb = eval_set.x[i : i + batch]
                value = float(loss(forward(det, xb), eval_set.targets[i : i + batch]).data)
                total += value * len(xb)
                n += len(xb)
    finally:
        det.train(was_training)
    return total / n


# -- training loop ----------------------------------------------------------------------
@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    eval_loss: float
    lr: float
    seconds: float


@dataclass
class TrainRunRecord:
    epochs: list[EpochLog] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    best_eval_loss: float = math.inf

    def write_csv(self, path: str | Path, include_time: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "eval_loss", "lr", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.eval_loss), repr(e.lr),
                            f"{e.seconds:.3f}" if include_time else ""])


@dataclass
class TrainResult:
    detector: Detector
    record: TrainRunRecord
    best_state: dict[str, np.ndarray]


def count_events(records: Sequence[Recording], K: int) -> int:
    return sum(1 for r in records for e in r.events if 1 <= e.class_k <= K)


def _grads(det: Detector) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    named = dict(det.named_parameters())
    params = {k: p.data for k, p in named.items()}
    grads = {k: p.grad for k, p in named.items() if p.grad is not None}
    return params, grads


def train_step(det: Detector, x: np.ndarray, targets, state: OptimState, clip_norm: float | None,
               clip_mode: str = "tensor") -> float:
    det.zero_grad()
    value = loss(forward(det, x), targets)
    lv = float(value.data)
    if not math.isfinite(lv):
        raise NonFiniteLoss(f"loss became {lv} at epoch {state.epoch} (lr={state.lr})")
    value.backward()
    params, grads = _grads(det)
    (clip_per_tensor if clip_mode == "tensor" else clip_by_global_norm)(grads, clip_norm)
    sgd_step(params, grads, state)
    return lv


def train(model_cfg: ModelConfig, cfg: TrainConfig, train_records: Sequence[Recording],
          eval_records: Sequence[Recording], progress=None) -> TrainResult:
    """Train from scratch and return the detector restored to its best-eval epoch.

    ``progress`` is an optional callable receiving each :class:`EpochLog`.
    """
    det = build(model_cfg)
    det.train()
    grids = model_cfg.grids()
    steps = cfg.steps_per_epoch or max(1, math.ceil(count_events(train_records, model_cfg.K) / cfg.B))
    eval_set = build_eval_set(eval_records, model_cfg, cfg.eval_per_class, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    fs = train_records[0].fs

    state = OptimState(lr=cfg.lr, momentum=cfg.momentum)
    schedule = PlateauSchedule(state, cfg.patience, cfg.decay_every, cfg.decay_factor)
    run = TrainRunRecord()
    best_state = det.state_dict()
    log.info("training: %d steps/epoch, %d eval segments", steps, len(eval_set))

    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        t0 = time.perf_counter()
        lr_used = state.lr
        losses = []
        for _ in range(steps):
            samples = [draw_sample(train_records, k, rng, model_cfg.T)
                       for k in class_schedule(cfg.B, model_cfg.K, rng)]
            x = np.stack([s.x for s in samples])
            targets = [encode_targets(s.events, grids, fs, model_cfg.match_iou) for s in samples]
            losses.append(train_step(det, x, targets, state, cfg.clip_norm, cfg.clip_mode))
        eval_loss = evaluate_loss(det, eval_set)
        if not math.isfinite(eval_loss):
            raise NonFiniteLoss(f"eval loss became {eval_loss} at epoch {epoch}")
        entry = EpochLog(epoch, float(np.mean(losses)), eval_loss, lr_used, time.perf_counter() - t0)
        run.epochs.append(entry)
        action = schedule.update(eval_loss)
        if action == "best":
            best_state = det.state_dict()
            run.best_epoch, run.best_eval_loss = epoch, eval_loss
        log.info("epoch %d train %.4f eval %.4f lr %.2e (%s)", epoch, entry.train_loss, eval_loss, lr_used, action)
        if progress is not None:
            progress(entry)
        if action == "stop":
            run.stop_reason = "early_stop"
            break
    else:
        run.stop_reason = "max_epochs"

    det.load_state_dict(best_state)
    det.eval()
    return TrainResult(det, run, best_state)


# -- checkpoints ------------------------------------------------------------------------
def save_checkpoint(path: str | Path, det: Detector, meta: dict | None = None) -> None:
    payload = {"model_config": det.config.to_dict()}
    payload.update(meta or {})
    save_tensors(path, det.state_dict(), payload)


def load_checkpoint(path: str | Path) -> tuple[Detector, dict]:
    tensors, meta = load_tensors(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: manifest lacks model_config")
    cfg = dict(meta["model_config"])
    cfg["scales"] = tuple(cfg["scales"])
    det = build(ModelConfig.from_dict(cfg))
    try:
        det.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    det.eval()
    return det, meta
