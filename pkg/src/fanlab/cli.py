"""``fanlab`` command-line interface.

Exit codes: 0 success, 1 user or configuration error, 2 numerical failure.
Setting FAN_REFERENCE_MODE=1 pins every BLAS pool to one thread.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .arch import DepthRegressor, FAN, count_parameters, size_sweep_configs
from .checkpoint import load_model, read_checkpoint, restore, save_checkpoint
from .config import load_config
from .data.dataset import load_dataset, split_train_val
from .data.pts import write_pts
from .data.synth import synth_generate
from .errors import ConfigurationError, ContractError, DataError, FanError
from .evaluation import (FanPredictor, PassthroughPredictor, ablation_report, depth_errors, evaluate,
                         guides_to_batch, mean_nme, predict_depth, prepare_crops)
from .gradcheck import run_gradcheck
from .landmarks import LandmarkSet
from .metrics import AUC_THRESHOLD, CED_MAX, CED_STEP, auc, ced_curve, failure_rate, nme
from .training import TrainConfig, depth_preset, fan_preset, guided_preset, train

log = logging.getLogger("fanlab")

PRESETS = {"fan2d": fan_preset, "fan3d": fan_preset, "guided": guided_preset, "depth": depth_preset}
PRECISIONS = {"float32": np.float32, "float64": np.float64}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are user errors (1); 2 is reserved for numerical failures
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def reference_mode() -> bool:
    return os.environ.get("FAN_REFERENCE_MODE", "") == "1"


def _thread_limit(threads: int | None):
    if reference_mode():
        threads = 1
    if threads is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def _dataset(path, split: str = "all", require_depth: bool = False):
    samples = load_dataset(path, require_depth=require_depth)
    if not samples:
        raise DataError(f"{path}: empty manifest")
    if split == "all":
        return samples
    tr, va = split_train_val(samples)
    return tr if split == "train" else va


def _train_config(args) -> TrainConfig:
    if args.config:
        cfg = load_config(args.config)
        if args.kind and args.kind != cfg.kind:
            raise ConfigurationError(f"--kind {args.kind} conflicts with config kind {cfg.kind}")
    else:
        cfg = PRESETS[args.kind or "fan2d"]()
        if args.kind == "fan3d":
            cfg = replace(cfg, kind="fan3d")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.zero_guides:
        overrides["zero_guides"] = True
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    manifest = synth_generate(args.count, args.seed or 0, args.out, num_landmarks=args.landmarks,
                              yaw_range=(args.yaw_min, args.yaw_max), size=args.size)
    print(f"wrote {args.count} samples to {manifest}")
    return 0


def cmd_train(args) -> int:
    dtype = PRECISIONS[args.precision]
    model = optimizer = None
    start = 0
    finetune = None
    if args.resume and args.finetune:
        raise ConfigurationError("--resume and --finetune are mutually exclusive")
    source = args.resume or args.finetune
    if source:
        cfg, model, optimizer = restore(read_checkpoint(source), dtype)
        start = read_checkpoint(source).epoch
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.epochs is not None:
            cfg = replace(cfg, epochs=args.epochs)
        if args.finetune:
            finetune = args.finetune_epochs
            if finetune is None or finetune < 1:
                raise ConfigurationError("--finetune needs --finetune-epochs N (N >= 1)")
    else:
        cfg = _train_config(args)
    samples = load_dataset(args.data, require_depth=cfg.kind == "depth")
    tr, va = split_train_val(samples)
    history = []

    def on_epoch(entry):
        history.append(entry)
        print(entry.line(), flush=True)

    result = train(cfg, tr, va, model=model, optimizer=optimizer, start_epoch=start,
                   finetune_epochs=finetune, on_epoch=on_epoch, dtype=dtype)
    save_checkpoint(args.out, cfg, result.model, result.optimizer, result.epoch)
    if args.log:
        with open(args.log, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "learning_rate", "train_loss", "train_error", "val_error"])
            for e in history:
                w.writerow([e.epoch, repr(e.learning_rate), repr(e.train_loss), repr(e.train_error),
                            repr(e.val_error)])
    print(f"saved {args.out} ({count_parameters(result.model)} parameters, epoch {result.epoch})")
    return 0


def cmd_eval(args) -> int:
    if args.passthrough:
        samples = _dataset(args.data, args.split)
        predictor = PassthroughPredictor(num_landmarks=len(samples[0].landmarks))
    else:
        if not args.ckpt:
            raise ConfigurationError("eval needs --ckpt (or --passthrough)")
        cfg, model = load_model(args.ckpt, PRECISIONS[args.precision])
        if isinstance(model, DepthRegressor):
            samples = _dataset(args.data, args.split, require_depth=True)
            errs = depth_errors(model, samples)
            print(f"samples {len(samples)}")
            print(f"depth error (mean |dz|/d) {float(np.mean(errs)):.6f}")
            return 0
        samples = _dataset(args.data, args.split)
        predictor = FanPredictor(model, zero_guides=args.zero_guides)
    results = evaluate(predictor, samples, noise=args.noise, face_px=args.face_px, seed=args.seed or 0)
    curve = ced_curve(results, CED_STEP, max(CED_MAX, args.auc_threshold))
    print(f"samples {len(results)}")
    print(f"NME mean {mean_nme(results):.6f}")
    print(f"AUC@{args.auc_threshold:g} {auc(curve, args.auc_threshold):.6f}")
    print(f"failure rate {failure_rate(results, args.auc_threshold):.6f}")
    if args.ced:
        curve.to_csv(args.ced)
        print(f"wrote CED to {args.ced}")
    return 0


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


def cmd_annotate(args) -> int:
    dtype = PRECISIONS[args.precision]
    _, fan2d = load_model(args.ckpt2d, dtype)
    _, guided = load_model(args.ckpt_guided, dtype)
    if not (isinstance(fan2d, FAN) and not fan2d.cfg.guided):
        raise ConfigurationError(f"{args.ckpt2d} is not a 2D FAN checkpoint")
    if not (isinstance(guided, FAN) and guided.cfg.guided):
        raise ConfigurationError(f"{args.ckpt_guided} is not a guided FAN checkpoint")
    regressor = None
    if args.ckpt_depth:
        _, regressor = load_model(args.ckpt_depth, dtype)
        if not isinstance(regressor, DepthRegressor):
            raise ConfigurationError(f"{args.ckpt_depth} is not a depth regressor checkpoint")
    res = fan2d.cfg.input_resolution
    if guided.cfg.input_resolution != res or (regressor and regressor.cfg.input_resolution != res):
        raise ConfigurationError("annotation networks must share one input resolution")
    samples = _dataset(args.data, args.split)
    crops = prepare_crops(samples, res)
    canon = [c for c, _ in crops]
    stage1 = FanPredictor(fan2d).predict(canon)
    by_id = {id(c): p for c, p in zip(canon, stage1)}
    stage2_pred = FanPredictor(guided, batch_size=len(canon), guide_fn=lambda c: by_id[id(c)])
    stage2 = stage2_pred.predict(canon)
    fed, expected = stage2_pred.last_guides, guides_to_batch(stage1, res).astype(stage2_pred.last_guides.dtype)
    log_line = f"guide channels {_digest(fed)} encode(2D output) {_digest(expected)}"
    print(log_line)
    if _digest(fed) != _digest(expected):
        raise ContractError("guide channels fed to the guided network differ from the 2D output encoding")
    if regressor is not None:
        z_canon = predict_depth(regressor, [c.with_(landmarks=p) for c, p in zip(canon, stage2)])
    out = Path(args.out)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    errors = []
    for i, (s, (_, aff), p) in enumerate(zip(samples, crops, stage2)):
        xy = aff.to_original(p).xy
        z = z_canon[i] * s.bbox.d if regressor is not None else np.zeros(len(xy))
        pts = LandmarkSet(np.column_stack([xy, z]), p.visible.copy())
        name = s.id or f"sample_{i:05d}"
        write_pts(out / "landmarks" / f"{name}.pts", pts)
        errors.append(nme(s.landmarks, pts, s.bbox))
    print(f"annotated {len(samples)} samples into {out}")
    print(f"NME vs reference landmarks {float(np.mean(errors)):.6f}")
    return 0


def cmd_ablate(args) -> int:
    dtype = PRECISIONS[args.precision]
    samples = _dataset(args.data, args.split)
    params: dict = {"seed": args.seed or 0}
    if args.levels:
        params["levels"] = args.levels
    if args.face_px:
        params["face_px"] = [None if v <= 0 else v for v in args.face_px]
    if args.protocol == "size":
        models = []
        if args.ckpt:
            for path in args.ckpt:
                _, m = load_model(path, dtype)
                models.append((f"{count_parameters(m)}", m))
        else:
            if not args.train_data:
                raise ConfigurationError("size protocol needs --ckpt files or --train-data to train the ladder")
            base = load_config(args.config) if args.config else fan_preset()
            train_set, val_set = split_train_val(load_dataset(args.train_data))
            for mc in size_sweep_configs(base.model):
                cfg = replace(base, model=mc, seed=args.seed or 0,
                              epochs=args.epochs if args.epochs is not None else base.epochs)
                result = train(cfg, train_set, val_set, dtype=dtype,
                               on_epoch=lambda e: print(e.line(), flush=True))
                models.append((f"{count_parameters(result.model)}", result.model))
        table = ablation_report(models, samples, "size", params)
    else:
        if not args.ckpt or len(args.ckpt) != 1:
            raise ConfigurationError(f"{args.protocol} protocol needs exactly one --ckpt")
        _, model = load_model(args.ckpt[0], dtype)
        if args.per_bin:
            from .metrics import balanced_subset
            samples = balanced_subset(samples, args.per_bin, seed=args.seed or 0)
        table = ablation_report(model, samples, args.protocol, params)
    table.to_csv(args.out)
    _print_table(["condition", *table.columns], [[c, *(f"{v:.4f}" for v in row)]
                                                 for c, row in zip(table.conditions, table.values)])
    print(f"wrote {args.out}")
    return 0


def _print_table(header, rows) -> None:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for r in [header, *rows]:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


def cmd_report(args) -> int:
    for path in args.inputs:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise DataError(f"{path}: empty file")
        header, body = rows[0], rows[1:]
        print(f"== {path}")
        if header == ["threshold", "fraction"]:
            t = np.array([float(r[0]) for r in body])
            f = np.array([float(r[1]) for r in body])
            from .metrics import CedCurve
            curve = CedCurve(t, f)
            thr = args.auc_threshold
            print(f"AUC@{thr:g} {auc(curve, thr):.6f}")
            print(f"fraction above {thr:g} {1.0 - curve.at(thr):.6f}")
        else:
            _print_table(header, [[r[0], *(f"{float(v):.4f}" for v in r[1:])] for r in body])
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed or 0, cases_per_op=args.cases)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 2


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fanlab", description="Face alignment network training and evaluation.")
    p.add_argument("--version", action="version", version=f"fanlab {__version__}")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--config", help="configuration file with [train] and [model] sections")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    p.add_argument("--precision", choices=sorted(PRECISIONS), default="float32")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic face dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--landmarks", type=int, choices=(5, 68), default=68)
    s.add_argument("--yaw-min", type=float, default=-90.0)
    s.add_argument("--yaw-max", type=float, default=90.0)
    s.add_argument("--size", type=int, default=160)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a network")
    s.add_argument("--kind", choices=sorted(PRESETS))
    s.add_argument("--data", required=True, help="manifest file or dataset directory")
    s.add_argument("--out", required=True, help="checkpoint to write")
    s.add_argument("--epochs", type=int)
    s.add_argument("--zero-guides", action="store_true", help="feed all-zero guide channels")
    s.add_argument("--resume", help="continue a run from this checkpoint")
    s.add_argument("--finetune", help="start from this checkpoint at the lowest learning rate")
    s.add_argument("--finetune-epochs", type=int)
    s.add_argument("--log", help="write per-epoch metrics as CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("all", "train", "val"), default="all")
    s.add_argument("--ced", help="write the CED curve as CSV")
    s.add_argument("--auc-threshold", type=float, default=AUC_THRESHOLD)
    s.add_argument("--noise", type=float, default=0.0, help="bounding-box noise level")
    s.add_argument("--face-px", type=float, default=None, help="reduce face resolution to this many pixels")
    s.add_argument("--zero-guides", action="store_true")
    s.add_argument("--passthrough", action="store_true", help="use ground truth as the prediction")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("annotate", help="2D FAN followed by the guided network (and optional depth)")
    s.add_argument("--ckpt2d", required=True)
    s.add_argument("--ckpt-guided", required=True)
    s.add_argument("--ckpt-depth")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("all", "train", "val"), default="all")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("ablate", help="AUC tables per condition and yaw bin")
    s.add_argument("--protocol", choices=("yaw", "noise", "resolution", "size"), required=True)
    s.add_argument("--ckpt", nargs="*")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("all", "train", "val"), default="all")
    s.add_argument("--out", required=True)
    s.add_argument("--levels", type=float, nargs="*")
    s.add_argument("--face-px", type=float, nargs="*", help="face sizes; 0 means native")
    s.add_argument("--per-bin", type=int, help="yaw-balanced subset size per bin")
    s.add_argument("--train-data", help="size protocol: train each ladder config on this dataset")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="summarise CED and ablation CSV files")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--auc-threshold", type=float, default=AUC_THRESHOLD)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op")
    s.add_argument("--cases", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("fanlab: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except FanError as exc:
        print(f"fanlab: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fanlab: error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"fanlab: numerical error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
