"""Command-line entry point: ``psgdetect <command> ...``.

Anything that changes numbers lives in JSON config files; flags carry paths,
parallelism and verbosity. Every command leaves a ``manifest.json`` next to
its outputs with the config, its hash, the seed and library versions.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .errors import PsgDetectError
from .ingest.annotations import DEFAULT_LABEL_MAP, ScoredEvent, load_annotations, write_annotations
from .model import ModelConfig
from .pipeline import load_cache_dir, parallel_map, preprocess_dir, select_class
from .postprocess import (
    evaluate_record,
    score_record,
    subject_summary,
    sweep,
    sweep_argmax,
    write_record_metrics_csv,
    write_scatter_csv,
    write_summary_csv,
    write_sweep_csv,
)
from .synth import SynthSpec, generate, write_record
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("psgdetect")

CACHE_ENV = "PSGDETECT_CACHE"
LABEL_NAMES = {v: k for k, v in DEFAULT_LABEL_MAP.items()}


class ConfigError(PsgDetectError, ValueError):
    def __init__(self, message: str, file: str | None = None, field: str | None = None):
        super().__init__(message)
        self.file = file
        self.field = field


# -- config handling ------------------------------------------------------------------
def read_json(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", str(path))
    return data


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, seed: int | None = None, **extra) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "versions": {
            "psgdetect": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
RUN_KEYS = {"seed", "classes", "train_dir", "eval_dir", "out_dir"}


def parse_run_config(raw: dict, source: str = "<config>") -> tuple[ModelConfig, TrainConfig, dict]:
    """Split a flat run config into model, training and path settings."""
    unknown = set(raw) - MODEL_KEYS - TRAIN_KEYS - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", source, sorted(unknown)[0])
    for key in ("train_dir", "eval_dir", "out_dir"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}", source, key)
    seed = raw.get("seed", 0)
    classes = raw.get("classes", ["AR"])
    if not isinstance(classes, list) or not classes:
        raise ConfigError("classes must be a non-empty list of labels", source, "classes")
    for c in classes:
        if c not in DEFAULT_LABEL_MAP:
            raise ConfigError(f"unknown class label {c!r}", source, "classes")
    model_kw = {k: raw[k] for k in MODEL_KEYS if k in raw}
    model_kw.setdefault("K", len(classes))
    if model_kw["K"] != len(classes):
        raise ConfigError(f"K={model_kw['K']} but {len(classes)} classes listed", source, "K")
    train_kw = {k: raw[k] for k in TRAIN_KEYS if k in raw}
    for key, kw, cls in (("model", model_kw, ModelConfig), ("train", train_kw, TrainConfig)):
        try:
            cfg = cls(seed=seed, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {key} setting: {exc}", source) from None
        if cls is ModelConfig:
            model_cfg = cfg
        else:
            train_cfg = cfg
    paths = {"classes": list(classes), "train_dir": raw["train_dir"], "eval_dir": raw["eval_dir"],
             "out_dir": raw["out_dir"], "seed": seed}
    return model_cfg, train_cfg, paths


def _grid(text: str | None, default: Sequence[float]) -> list[float]:
    if text is None:
        return [float(x) for x in default]
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"grid {text!r} is not a comma-separated list of numbers") from None


def _class_names(meta: dict) -> dict[int, str]:
    labels = meta.get("classes") or [LABEL_NAMES[k] for k in sorted(LABEL_NAMES)]
    return {i + 1: name for i, name in enumerate(labels)}


# -- commands -------------------------------------------------------------------------
SYNTH_KEYS = {f.name for f in fields(SynthSpec)} | {"n_records", "prefix"}


def _synth_one(args) -> str:
    spec_kw, out_dir, name = args
    write_record(generate(SynthSpec(**spec_kw)), out_dir, name)
    return name


def cmd_synth(args) -> None:
    raw = read_json(args.spec)
    unknown = set(raw) - SYNTH_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", args.spec, sorted(unknown)[0])
    n = int(raw.get("n_records", 1))
    prefix = str(raw.get("prefix", "rec"))
    spec_kw = {k: v for k, v in raw.items() if k not in ("n_records", "prefix")}
    base = SynthSpec(**spec_kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    work = [({**base.to_dict(), "seed": base.seed + i}, str(out), f"{prefix}{i:03d}") for i in range(n)]
    names = parallel_map(_synth_one, work, args.jobs)
    write_manifest(out, "synth", raw, base.seed, records=names)
    log.info("wrote %d synthetic records to %s", n, out)


def cmd_preprocess(args) -> None:
    cache = args.cache or os.environ.get(CACHE_ENV)
    if not cache:
        raise ConfigError(f"no cache directory: pass --cache or set {CACHE_ENV}")
    stems = preprocess_dir(args.input, cache, args.jobs)
    if not stems:
        raise ConfigError(f"no .edf files found in {args.input}", args.input)
    write_manifest(Path(cache), "preprocess", {"input": str(args.input)}, None, records=[s.name for s in stems])
    log.info("preprocessed %d records into %s", len(stems), cache)


def run_training(raw: dict, source: str = "<config>") -> Path:
    model_cfg, train_cfg, paths = parse_run_config(raw, source)
    train_recs = select_class(load_cache_dir(paths["train_dir"]), paths["classes"])
    eval_recs = select_class(load_cache_dir(paths["eval_dir"]), paths["classes"])
    if not train_recs or not eval_recs:
        raise ConfigError("train_dir and eval_dir must each hold at least one preprocessed record", source)
    out = Path(paths["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    result = train(model_cfg, train_cfg, train_recs, eval_recs)
    run = result.record
    save_checkpoint(out / "model.ckpt", result.detector, {
        "train_config": train_cfg.to_dict(),
        "classes": paths["classes"],
        "best_eval_loss": run.best_eval_loss,
        "best_epoch": run.best_epoch,
        "stop_reason": run.stop_reason,
    })
    run.write_csv(out / "train_log.csv")
    write_manifest(out, "train", raw, paths["seed"], stop_reason=run.stop_reason,
                   best_epoch=run.best_epoch, best_eval_loss=run.best_eval_loss)
    return out


def cmd_train(args) -> None:
    raw = read_json(args.config)
    if args.out:
        raw["out_dir"] = args.out
    out = run_training(raw, str(args.config))
    log.info("checkpoint written to %s", out / "model.ckpt")


def _detect_one(args) -> tuple[str, float, list]:
    ckpt, rec, theta, nms_iou = args
    det, _ = load_checkpoint(ckpt)
    return rec.record_id, rec.duration_s, score_record(det, rec).detect(theta, nms_iou)


def cmd_detect(args) -> None:
    det, meta = load_checkpoint(args.checkpoint)
    theta = det.config.theta_clf if args.theta is None else args.theta
    nms_iou = det.config.nms_iou if args.nms_iou is None else args.nms_iou
    names = _class_names(meta)
    label_map = {name: DEFAULT_LABEL_MAP[name] for name in names.values()}
    records = load_cache_dir(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = parallel_map(_detect_one, [(args.checkpoint, r, theta, nms_iou) for r in records], args.jobs)
    durations = {}
    for rid, dur, cands in results:
        events = [ScoredEvent(DEFAULT_LABEL_MAP[names[c.class_k]], c.start_s, c.duration_s) for c in cands]
        write_annotations(out / f"{rid}.csv", events, label_map)
        durations[rid] = dur
    (out / "records.json").write_text(json.dumps(durations, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "detect", {"checkpoint": str(args.checkpoint), "theta_clf": theta, "nms_iou": nms_iou},
                   det.config.seed, records=sorted(durations))


def cmd_evaluate(args) -> None:
    pred_dir, truth_dir, out = Path(args.pred), Path(args.truth), Path(args.out)
    durations = {}
    if (pred_dir / "records.json").exists():
        durations = json.loads((pred_dir / "records.json").read_text())
    ids = sorted(p.stem for p in pred_dir.glob("*.csv"))
    if not ids:
        raise ConfigError(f"no prediction CSVs in {pred_dir}", str(pred_dir))
    metrics = []
    for rid in ids:
        truth_path = truth_dir / f"{rid}.csv"
        if not truth_path.exists():
            raise ConfigError(f"no ground truth for record {rid!r}", str(truth_path))
        preds = load_annotations(pred_dir / f"{rid}.csv")
        truths = load_annotations(truth_path)
        classes = [DEFAULT_LABEL_MAP[c] for c in args.classes] if args.classes else sorted(LABEL_NAMES)
        if rid in durations:
            hours = durations[rid] / 3600.0
        else:
            # without the detector's record list, the last event end bounds the night
            hours = max([e.end_s for e in preds + truths] + [1.0]) / 3600.0
        metrics.extend(evaluate_record(rid, preds, truths, args.eval_iou, hours, classes))
    out.mkdir(parents=True, exist_ok=True)
    write_record_metrics_csv(out / "record_metrics.csv", metrics, LABEL_NAMES)
    write_summary_csv(out / "summary.csv", subject_summary(metrics), LABEL_NAMES)
    write_scatter_csv(out / "scatter.csv", metrics, LABEL_NAMES)
    write_manifest(out, "evaluate", {"pred": str(pred_dir), "truth": str(truth_dir), "eval_iou": args.eval_iou,
                                     "classes": args.classes}, None)


DEFAULT_IOU_GRID = [round(0.1 * i, 1) for i in range(1, 10)]
DEFAULT_THETA_GRID = [round(0.05 * i, 2) for i in range(1, 21)]


def _score_one(args):
    ckpt, rec = args
    det, _ = load_checkpoint(ckpt)
    return score_record(det, rec)


def run_sweep(checkpoint: str | Path, records, out: Path, iou_grid, theta_grid,
              nms_iou: float | None = None, jobs: int = 1) -> dict:
    det, meta = load_checkpoint(checkpoint)
    names = _class_names(meta)
    nms_iou = det.config.nms_iou if nms_iou is None else nms_iou
    if jobs > 1:
        scores = parallel_map(_score_one, [(str(checkpoint), r) for r in records], jobs)
    else:
        scores = [score_record(det, r) for r in records]
    truths = {r.record_id: r.events for r in records}
    classes = list(range(1, det.config.K + 1))
    points = sweep(scores, truths, iou_grid, theta_grid, nms_iou, classes)
    out.mkdir(parents=True, exist_ok=True)
    best = {}
    for k in classes:
        write_sweep_csv(out / f"sweep_{names[k]}.csv", [p for p in points if p.class_k == k])
    # best theta at every eval IoU, then the overall optimum per class
    with open(out / "argmax.csv", "w") as fh:
        fh.write("class,scope,eval_iou,theta,f1,precision,recall\n")
        for fixed in sorted(set(float(x) for x in iou_grid)) + [None]:
            for k, p in sorted(sweep_argmax(points, fixed).items()):
                scope = "overall" if fixed is None else "at_iou"
                fh.write(f"{names[k]},{scope},{p.eval_iou:.6f},{p.theta:.6f},{p.f1:.6f},"
                         f"{p.precision:.6f},{p.recall:.6f}\n")
                if fixed is None:
                    best[names[k]] = p
    write_manifest(out, "sweep", {"checkpoint": str(checkpoint), "iou_grid": list(iou_grid),
                                  "theta_grid": list(theta_grid), "nms_iou": nms_iou}, det.config.seed)
    return {"points": points, "best": best, "names": names}


def cmd_sweep(args) -> None:
    cfg = read_json(args.config) if args.config else {}
    unknown = set(cfg) - {"iou_grid", "theta_grid", "nms_iou"}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", args.config, sorted(unknown)[0])
    _, meta = load_checkpoint(args.checkpoint)
    records = select_class(load_cache_dir(args.input), meta.get("classes") or ["AR"])
    run_sweep(args.checkpoint, records, Path(args.out),
              cfg.get("iou_grid", DEFAULT_IOU_GRID), cfg.get("theta_grid", DEFAULT_THETA_GRID),
              cfg.get("nms_iou"), args.jobs)


# -- entry point ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psgdetect", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"psgdetect {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate labelled synthetic EDF/CSV records")
    s.add_argument("--spec", required=True, help="JSON synthesis spec")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="montage, filter, resample and normalise EDF records")
    s.add_argument("--input", required=True, help="directory of .edf (+ .csv) files")
    s.add_argument("--cache", help=f"output cache directory (default: ${CACHE_ENV})")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a detector from a JSON run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override out_dir from the config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="write predicted events for preprocessed records")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="preprocessed cache directory")
    s.add_argument("--out", required=True)
    s.add_argument("--theta", type=float, help="classification threshold (default: from checkpoint)")
    s.add_argument("--nms-iou", type=float, help="suppression IoU (default: from checkpoint)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("evaluate", help="score prediction CSVs against ground truth CSVs")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--eval-iou", type=float, default=0.1)
    s.add_argument("--classes", nargs="+", choices=sorted(DEFAULT_LABEL_MAP), help="labels to score (default: all)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="F1 surface over eval IoU and classification threshold")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="preprocessed cache directory")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON with iou_grid, theta_grid, nms_iou")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (PsgDetectError, OSError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        for attr in ("file", "field"):
            if getattr(exc, attr, None):
                err[attr] = getattr(exc, attr)
        if isinstance(exc, OSError) and exc.filename:
            err["file"] = str(exc.filename)
        print(json.dumps(err), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
