"""Command-line surface.

Exit codes: 0 ok, 1 usage, 2 config, 3 data validation, 4 runtime.
Errors are emitted as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import dataset as ds
from . import pipeline
from .baselines import FEATURE_KINDS
from .config import ExperimentConfig, load_config, save_config
from .dataset import FrameStore
from .errors import ConfigError, DataValidationError, EndoscrubError
from .evaluation import aggregate_folds
from .model import load_checkpoint
from .synth import generate_corpus

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class _UsageExit(Exception):
    def __init__(self, message):
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageExit(f"{self.prog}: {message}\n{self.format_usage()}")


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def build_parser() -> _Parser:
    p = _Parser(prog="endoscrub",
                description="Out-of-body frame detection and video scrubbing")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("ingest", help="validate and import a corpus")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("folds", help="write fold split files")
    sp.add_argument("--config")

    sp = sub.add_parser("pretrain", help="rotation pretext pretraining")
    sp.add_argument("--config")
    sp.add_argument("--fold", type=int, required=True)

    sp = sub.add_parser("finetune", help="fine-tune a pretext checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--fold", type=int, required=True)
    sp.add_argument("--fraction", type=float, default=1.0)
    sp.add_argument("--from", dest="from_ckpt")

    sp = sub.add_parser("train-supervised", help="fully supervised baseline")
    sp.add_argument("--config")
    sp.add_argument("--fold", type=int, required=True)
    sp.add_argument("--fraction", type=float, default=1.0)
    sp.add_argument("--init", default="random")

    sp = sub.add_parser("train-baseline", help="handcrafted-feature baseline")
    sp.add_argument("--config")
    sp.add_argument("--fold", type=int, required=True)
    sp.add_argument("--fraction", type=float, default=1.0)
    sp.add_argument("--feature", required=True, choices=FEATURE_KINDS)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    sp.add_argument("--config")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--fold", type=int, required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--out")

    sp = sub.add_parser("report", help="cross-fold mean/std summary CSV")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--out")

    sp = sub.add_parser("scrub", help="scrub a video with a checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--video", required=True, help="video_id in the corpus")
    sp.add_argument("--margin", type=int)
    sp.add_argument("--smooth", type=int)
    sp.add_argument("--out", required=True)
    return p


def _corpus(cfg: ExperimentConfig) -> pipeline.Corpus:
    return pipeline.Corpus(cfg.corpus_dir)


def _fold(cfg: ExperimentConfig, k: int):
    path = Path(cfg.run_dir) / "folds" / f"fold_{k}.json"
    if not path.exists():
        folds = pipeline.write_folds(cfg, _corpus(cfg),
                                     Path(cfg.run_dir) / "folds")
        if not (0 <= k < len(folds)):
            raise ConfigError(f"fold {k} outside 0..{len(folds) - 1}")
        return folds[k]
    return pipeline.load_fold(path)


def _cmd_synth(args) -> int:
    cfg = load_config(args.config)
    generate_corpus(cfg.synth, args.out)
    save_config(cfg, Path(args.out) / "config.yaml")
    print(f"corpus written to {args.out}")
    return 0


def _cmd_ingest(args) -> int:
    records = ds.load_manifest(args.manifest)
    durations = {r.video_id: r.duration_s for r in records}
    segments = ds.parse_annotations(args.annotations, durations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = FrameStore(out / "frames")
    new_records = []
    for r in records:
        n = ds.extract_frames(r.frame_dir, store, r.video_id)
        logger.info("ingested %s: %d frames", r.video_id, n)
        new_records.append(ds.VideoRecord(
            r.video_id, r.procedure_type, r.duration_s, r.source_fps,
            str(out / "frames" / r.video_id)))
    ds.write_manifest(new_records, out / "manifest.json")
    ds.write_annotations(segments, out / "annotations.csv")
    print(f"ingested {len(records)} videos to {args.out}")
    return 0


def _cmd_folds(args) -> int:
    cfg = load_config(args.config)
    folds = pipeline.write_folds(cfg, _corpus(cfg), Path(cfg.run_dir) / "folds")
    print(f"wrote {len(folds)} fold files under {cfg.run_dir}/folds")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    _, log, run_dir = pipeline.run_pretrain(cfg, _corpus(cfg),
                                            _fold(cfg, args.fold))
    print(f"pretrained: {run_dir} (best val loss {log.best_val_loss():.4f})")
    return 0


def _cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    ckpt = args.from_ckpt or (Path(cfg.run_dir) / f"pretrain_fold{args.fold}"
                              / "checkpoint.ckpt")
    _, log, run_dir = pipeline.run_finetune(
        cfg, _corpus(cfg), _fold(cfg, args.fold), args.fraction,
        pretext_ckpt=ckpt)
    print(f"fine-tuned: {run_dir} (best val loss {log.best_val_loss():.4f})")
    return 0


def _cmd_train_supervised(args) -> int:
    cfg = load_config(args.config)
    init, weights = args.init, None
    if init.startswith("weights:"):
        init, weights = "external-weights", init.split(":", 1)[1]
    elif init != "random":
        raise ConfigError(f"--init must be 'random' or 'weights:PATH', got {init}")
    _, log, run_dir = pipeline.run_supervised(
        cfg, _corpus(cfg), _fold(cfg, args.fold), args.fraction,
        init=init, weights_path=weights)
    print(f"trained: {run_dir} (best val loss {log.best_val_loss():.4f})")
    return 0


def _cmd_train_baseline(args) -> int:
    cfg = load_config(args.config)
    corpus = _corpus(cfg)
    fold = _fold(cfg, args.fold)
    model, log, run_dir = pipeline.run_baseline(
        cfg, corpus, fold, args.fraction, args.feature)
    report = pipeline.evaluate_baseline(cfg, corpus, fold, model,
                                        args.feature, run_dir=run_dir,
                                        fraction=args.fraction)
    print(f"baseline {args.feature}: {run_dir} (test mF1 {report['mF1']:.2f})")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    corpus = _corpus(cfg)
    fold = _fold(cfg, args.fold)
    model, meta = load_checkpoint(args.ckpt)
    run_dir = Path(args.out) if args.out else \
        Path(cfg.run_dir) / f"eval_fold{args.fold}_{args.split}"
    run_dir.mkdir(parents=True, exist_ok=True)
    report = pipeline.evaluate_model(cfg, corpus, fold, model,
                                     split=args.split, run_dir=run_dir,
                                     method=meta.phase)
    print(f"mF1 {report['mF1']:.2f} -> {run_dir}/metrics.json")
    return 0


def _cmd_report(args) -> int:
    runs = Path(args.runs)
    cells: dict = {}
    for metrics_file in sorted(runs.glob("**/metrics.json")):
        with open(metrics_file) as f:
            m = json.load(f)
        key = (m.get("method", "model"), m.get("fraction", 1.0))
        cells.setdefault(key, []).append(m["mF1"])
    if not cells:
        raise DataValidationError(f"no metrics.json found under {runs}")
    methods = sorted({k[0] for k in cells})
    fractions = sorted({k[1] for k in cells})
    out_path = Path(args.out) if args.out else runs / "report.csv"
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method"] + [f"{fr:g}" for fr in fractions])
        for method in methods:
            row = [method]
            for fr in fractions:
                vals = cells.get((method, fr))
                if not vals:
                    row.append("")
                elif len(vals) == 1:
                    row.append(f"{vals[0]:.2f}")
                else:
                    rep = aggregate_folds(vals)
                    row.append(f"{rep.mean:.2f} (±{rep.std:.2f})")
            w.writerow(row)
    print(f"report written to {out_path}")
    return 0


def _cmd_scrub(args) -> int:
    cfg = load_config(args.config)
    corpus = _corpus(cfg)
    if args.video not in corpus.record_by_id:
        raise DataValidationError(f"unknown video_id {args.video!r}")
    record = corpus.record_by_id[args.video]
    model, meta = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edl, audit = pipeline.scrub_video(
        cfg, model, record, corpus.store, out / "frames",
        margin_s=args.margin, smooth_window=args.smooth,
        model_hash=meta.config_hash,
        edl_path=out / "edit_list.json", audit_path=out / "audit.json")
    removed = sum(e - s for s, e in edl.remove)
    print(f"scrubbed {args.video}: removed {removed}s of {edl.duration_s}s "
          f"-> {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "folds": _cmd_folds,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "train-supervised": _cmd_train_supervised,
    "train-baseline": _cmd_train_baseline,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "scrub": _cmd_scrub,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as e:
        _emit_error("usage", str(e))
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        _emit_error("config", str(e))
        return EXIT_CONFIG
    except DataValidationError as e:
        _emit_error("data", str(e))
        return EXIT_DATA
    except (EndoscrubError, OSError, RuntimeError, ValueError) as e:
        _emit_error("runtime", str(e))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
