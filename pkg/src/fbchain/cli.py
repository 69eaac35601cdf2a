"""Command-line entry points: prepare, synth, train, eval, ablate.

A prepared data directory holds ``samples.npz`` (all 2D samples) and
``folds.json`` (subject -> fold, plus source paths). Relative ``--data-dir``
values are resolved under ``$FBCHAIN_DATA_ROOT`` when it is set, and that
variable is also the default data directory.

Exit codes: 0 success, 1 user error (bad input, config or checkpoint),
2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from fbchain.checkpoint import CheckpointError, load_checkpoint, load_params
from fbchain.config import RunConfig, config_hash, dump_config, load_config
from fbchain.datasets import (
    VolumeError,
    assign_folds,
    extract_roi,
    inject_noise_slices,
    load_samples,
    load_volume,
    save_samples,
    slice_volume,
    split_fold,
    stack_samples,
    synth_dataset,
)
from fbchain.errors import ConfigError, ShapeError
from fbchain.evaluation import cam, evaluate_predictions, save_cam_panel
from fbchain.network import ROW_NAMES, ablation_config, build_model
from fbchain.training import TrainConfig, predict, train

log = logging.getLogger("fbchain")

DATA_ROOT_ENV = "FBCHAIN_DATA_ROOT"
SAMPLES_FILE = "samples.npz"
FOLDS_FILE = "folds.json"
MANIFEST_FILE = "manifest.json"


class UserError(Exception):
    """Bad input from the caller; exits with code 1."""


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    start_time: float
    end_time: float = 0.0
    revision: str = "unknown"
    artifacts: Dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
        return path


def _revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    rev = out.stdout.strip()
    return rev if out.returncode == 0 and rev else "unknown"


def _manifest(command: str, params: dict, seed: int, start: float) -> RunManifest:
    return RunManifest(command, config_hash(params), seed, start, revision=_revision())


def resolve_data_dir(arg: Optional[str]) -> Path:
    root = os.environ.get(DATA_ROOT_ENV)
    if arg is None:
        if root is None:
            raise UserError(f"no data directory given and ${DATA_ROOT_ENV} is not set")
        return Path(root)
    p = Path(arg)
    if root is not None and not p.is_absolute():
        return Path(root) / p
    return p


def _load_prepared(data_dir: Path):
    samples_path, folds_path = data_dir / SAMPLES_FILE, data_dir / FOLDS_FILE
    for p in (samples_path, folds_path):
        if not p.exists():
            raise UserError(f"{p} not found; run `fbchain prepare` or `fbchain synth` first")
    samples = load_samples(samples_path)
    meta = json.loads(folds_path.read_text())
    fold_of = {sid: int(info["fold"]) for sid, info in meta["subjects"].items()}
    return samples, fold_of, meta


def _split(samples, fold_of, meta, fold: int, seed: int):
    if not 0 <= fold < int(meta["folds"]):
        raise UserError(f"fold {fold} does not exist (data has {meta['folds']} folds)")
    return split_fold(samples, fold_of, fold, seed=seed)


def _write_prepared(out: Path, samples, subjects: Dict[str, dict], folds: int, seed: int) -> Dict[int, int]:
    out.mkdir(parents=True, exist_ok=True)
    fold_of = assign_folds(subjects, folds, seed)
    for sid in subjects:
        subjects[sid]["fold"] = fold_of[sid]
    save_samples(out / SAMPLES_FILE, samples)
    meta = {"folds": folds, "seed": seed, "subjects": {k: subjects[k] for k in sorted(subjects)}}
    (out / FOLDS_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))
    counts = {f: 0 for f in range(folds)}
    for s in samples:
        counts[fold_of[s.subject_id]] += 1
    return counts


def _print_counts(counts: Dict[int, int]) -> None:
    for f, n in counts.items():
        print(f"fold {f}: {n} samples")


# -- commands ----------------------------------------------------------------


def _find_pairs(input_dir: Path):
    """Decathlon layout (imagesTr/ + labelsTr/) or flat ``<id>_image.*`` / ``<id>_label.*``."""
    pairs = []
    images_dir, labels_dir = input_dir / "imagesTr", input_dir / "labelsTr"
    if images_dir.is_dir():
        for img in sorted(images_dir.iterdir()):
            if img.name.startswith("."):
                continue
            pairs.append((img.name.split(".")[0], img, labels_dir / img.name))
        return pairs
    for img in sorted(input_dir.glob("*_image.*")):
        sid = img.name.split("_image.")[0]
        suffix = img.name.split("_image", 1)[1]
        pairs.append((sid, img, input_dir / f"{sid}_label{suffix}"))
    return pairs


def cmd_prepare(args) -> int:
    start = time.time()
    input_dir = Path(args.input_dir)
    if not input_dir.is_dir():
        raise UserError(f"input directory {input_dir} does not exist")
    pairs = _find_pairs(input_dir)
    if not pairs:
        raise UserError(f"no volumes found in {input_dir}")
    if args.folds > len(pairs):
        raise UserError(f"{args.folds} folds requested but only {len(pairs)} subjects")
    samples, subjects, failed = [], {}, []
    for sid, img, lab in pairs:
        try:
            v = load_volume(img, lab, subject_id=sid)
            roi = extract_roi(v, args.roi_size)
            slices = slice_volume(roi)
            rng = np.random.default_rng([args.seed, len(subjects)])
            samples.extend(inject_noise_slices(slices, [roi], args.noise_fraction, rng))
            subjects[sid] = {"image": str(img), "label": str(lab)}
        except (VolumeError, OSError, ValueError) as exc:
            failed.append((sid, str(exc)))
    if len(subjects) < args.folds:
        for sid, msg in failed:
            print(f"failed: {sid}: {msg}", file=sys.stderr)
        raise UserError(f"only {len(subjects)} readable subjects for {args.folds} folds")
    out = Path(args.output_dir)
    counts = _write_prepared(out, samples, subjects, args.folds, args.seed)
    _print_counts(counts)
    m = _manifest("prepare", vars_clean(args), args.seed, start)
    m.artifacts = {"samples": str(out / SAMPLES_FILE), "folds": str(out / FOLDS_FILE)}
    m.summary = {"subjects": len(subjects), "samples": len(samples), "failed": [s for s, _ in failed]}
    m.end_time = time.time()
    m.write(out)
    if failed:
        for sid, msg in failed:
            print(f"failed: {sid}: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args) -> int:
    start = time.time()
    samples = synth_dataset(args.n, args.size, args.seed, per_subject=args.per_subject)
    subjects = {s.subject_id: {"image": "synthetic", "label": "synthetic"} for s in samples}
    out = Path(args.output_dir)
    counts = _write_prepared(out, samples, subjects, args.folds, args.seed)
    _print_counts(counts)
    m = _manifest("synth", vars_clean(args), args.seed, start)
    m.artifacts = {"samples": str(out / SAMPLES_FILE), "folds": str(out / FOLDS_FILE)}
    m.summary = {"subjects": len(subjects), "samples": len(samples)}
    m.end_time = time.time()
    m.write(out)
    return 0


def _train_one(run: RunConfig, train_set, val_set, out_dir: Path, resume: bool):
    train_cfg = replace(run.train, checkpoint_dir=str(out_dir))
    model = build_model(run.model)
    resume_ckpt = None
    if resume:
        last = out_dir / "last.ckpt"
        if not last.exists():
            raise UserError(f"--resume given but {last} does not exist")
        resume_ckpt = load_checkpoint(last)
        if resume_ckpt.config.to_dict() != run.model.to_dict():
            raise UserError(f"{last} was trained with a different model config")
    return model, *train(model, train_set, val_set, train_cfg, resume=resume_ckpt)


def cmd_train(args) -> int:
    start = time.time()
    run = load_config(args.config)
    data_dir = resolve_data_dir(args.data_dir)
    samples, fold_of, meta = _load_prepared(data_dir)
    train_set, val_set, test_set = _split(samples, fold_of, meta, args.fold, run.train.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(run))
    _, best, history = _train_one(run, train_set, val_set, out, args.resume)
    last = history.records[-1] if history.records else {}
    print(f"trained {len(history)} epochs; best val DSC {best.best_metric:.4f} at epoch {best.epoch}")
    m = _manifest("train", {"config": run.to_dict(), "fold": args.fold, "data": str(data_dir)}, run.train.seed, start)
    m.artifacts = {"best": str(out / "best.ckpt"), "last": str(out / "last.ckpt"),
                   "history": str(out / "history.jsonl"), "config": str(out / "config.ini")}
    m.summary = {"epochs": len(history), "best_epoch": best.epoch, "best_val_dsc": best.best_metric,
                 "last": {k: v for k, v in last.items() if k != "wall_time"},
                 "split_sizes": {"train": len(train_set), "val": len(val_set), "test": len(test_set)}}
    m.end_time = time.time()
    m.write(out)
    return 0


def _eval_model(model, samples, threshold: float, mode: str):
    if not samples:
        return evaluate_predictions([], [], threshold=threshold, mode=mode), None
    images, masks = stack_samples(samples)
    probs = predict(model, images)
    ids = [f"{s.subject_id}:{s.slice_index}" for s in samples]
    report = evaluate_predictions(list(probs[:, 0]), list(masks[:, 0]), ids, threshold, mode)
    return report, probs


def cmd_eval(args) -> int:
    start = time.time()
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        run = load_config(args.config)
        model = build_model(run.model)
        load_params(model, ckpt.params)
    else:
        model = ckpt.build()
    data_dir = resolve_data_dir(args.data_dir)
    samples, fold_of, meta = _load_prepared(data_dir)
    parts = dict(zip(("train", "val", "test"), _split(samples, fold_of, meta, args.fold, args.seed)))
    parts["all"] = samples
    subset = parts[args.split]
    report, probs = _eval_model(model, subset, args.threshold, args.mode)
    out = Path(args.out_dir)
    report.write(out)
    if report.notice:
        print(f"notice: {report.notice}")
    print(json.dumps({"n_samples": len(report.per_sample), **report.aggregate, "auc": report.auc}, sort_keys=True))
    artifacts = {"metrics": str(out / "metrics.jsonl"), "roc": str(out / "roc.csv")}
    if args.cam and subset:
        cam_dir = out / "cam"
        cam_dir.mkdir(exist_ok=True)
        for k, s in enumerate(subset[: args.cam_limit]):
            heat = cam(model, s.image)
            pred = (probs[k, 0] >= args.threshold).astype(np.uint8)
            save_cam_panel(cam_dir / f"{k:04d}_{s.subject_id}_{s.slice_index}.png", s.image, s.mask, heat, pred)
        artifacts["cam"] = str(cam_dir)
    m = _manifest("eval", vars_clean(args), args.seed, start)
    m.artifacts = artifacts
    m.summary = {"aggregate": report.aggregate, "auc": report.auc, "notice": report.notice}
    m.end_time = time.time()
    m.write(out)
    return 0


def ablation_table(results: Dict[str, List[float]]) -> str:
    lines = ["| row | DSC mean | DSC std | seeds |", "|---|---|---|---|"]
    for row in ROW_NAMES:
        if row in results:
            v = np.asarray(results[row], dtype=np.float64)
            lines.append(f"| {row} | {v.mean():.4f} | {v.std():.4f} | {len(v)} |")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    start = time.time()
    rows = args.rows.split(",") if args.rows else list(ROW_NAMES)
    unknown = [r for r in rows if r not in ROW_NAMES]
    if unknown:
        raise UserError(f"unknown ablation rows {unknown}; choose from {list(ROW_NAMES)}")
    rows = [r for r in ROW_NAMES if r in rows]
    seeds = [int(s) for s in args.seeds.split(",")]
    base = load_config(args.config) if args.config else RunConfig()
    if args.epochs is not None:
        base = RunConfig(base.model, replace(base.train, epochs=args.epochs))
    data_dir = resolve_data_dir(args.data_dir)
    samples, fold_of, meta = _load_prepared(data_dir)
    out = Path(args.out_dir)
    results: Dict[str, List[float]] = {}
    hashes = {}
    for row in rows:
        model_cfg = ablation_config(row, base.model)
        for seed in seeds:
            run = RunConfig(replace(model_cfg, seed=seed), replace(base.train, seed=seed))
            hashes.setdefault(row, config_hash(ablation_config(row, base.model).to_dict()))
            train_set, val_set, test_set = _split(samples, fold_of, meta, args.fold, seed)
            run_dir = out / row / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "config.ini").write_text(dump_config(run))
            model, best, _ = _train_one(run, train_set, val_set, run_dir, resume=False)
            load_params(model, best.params)
            report, _ = _eval_model(model, test_set, 0.5, "per_slice")
            report.write(run_dir)
            score = report.aggregate["dsc"]
            results.setdefault(row, []).append(float("nan") if score is None else score)
            print(f"{row} seed {seed}: test DSC {score}", flush=True)
    table = ablation_table(results)
    print(table)
    (out / "ablation.md").write_text(table + "\n")
    summary = {row: {"dsc": v, "mean": float(np.mean(v)), "std": float(np.std(v)), "config_hash": hashes[row]}
               for row, v in results.items()}
    (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    m = _manifest("ablate", {"base": base.to_dict(), "rows": rows, "seeds": seeds, "fold": args.fold},
                  seeds[0], start)
    m.artifacts = {"table": str(out / "ablation.md"), "json": str(out / "ablation.json")}
    m.summary = summary
    m.end_time = time.time()
    m.write(out)
    return 0


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbchain", description="Hippocampus segmentation with feedback chains.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("prepare", help="volumes -> ROI slices + fold manifest")
    q.add_argument("--input-dir", required=True)
    q.add_argument("--output-dir", required=True)
    q.add_argument("--roi-size", type=int, default=32)
    q.add_argument("--folds", type=int, default=10)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--noise-fraction", type=float, default=1 / 3)
    q.set_defaults(func=cmd_prepare)

    q = sub.add_parser("synth", help="write a synthetic 2D dataset in prepared form")
    q.add_argument("--output-dir", required=True)
    q.add_argument("--n", type=int, default=400)
    q.add_argument("--size", type=int, default=32)
    q.add_argument("--per-subject", type=int, default=1)
    q.add_argument("--folds", type=int, default=10)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("train", help="train one model on one fold")
    q.add_argument("--config", required=True)
    q.add_argument("--data-dir")
    q.add_argument("--fold", type=int, default=0)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--resume", action="store_true")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--config", help="build the model from this config instead of the checkpoint's")
    q.add_argument("--data-dir")
    q.add_argument("--fold", type=int, default=0)
    q.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    q.add_argument("--seed", type=int, default=0, help="split seed used at training time")
    q.add_argument("--threshold", type=float, default=0.5)
    q.add_argument("--mode", choices=("per_slice", "pooled"), default="per_slice")
    q.add_argument("--out-dir", required=True)
    q.add_argument("--cam", action="store_true", help="write input/truth/attention/segmentation panels")
    q.add_argument("--cam-limit", type=int, default=16)
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("ablate", help="train and test ablation rows over seeds")
    q.add_argument("--data-dir")
    q.add_argument("--out-dir", required=True)
    q.add_argument("--rows", help=f"comma list from {','.join(ROW_NAMES)} (default: all)")
    q.add_argument("--seeds", default="0")
    q.add_argument("--config", help="base config; rows override the module switches")
    q.add_argument("--epochs", type=int)
    q.add_argument("--fold", type=int, default=0)
    q.set_defaults(func=cmd_ablate)
    return p


USER_ERRORS = (UserError, ConfigError, CheckpointError, VolumeError, ShapeError, FileNotFoundError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a bug
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
