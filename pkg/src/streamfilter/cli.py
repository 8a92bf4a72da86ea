"""Command-line interface.

Exit codes: 0 success, 1 invalid input or arguments, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys

import numpy as np

from . import datagen, evaluation, fileio, models, training
from .geometry import PLAUSIBLE, Tractogram

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def sidecar(path: str, ext: str) -> str:
    return os.path.splitext(path)[0] + ext


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits: {text}")
    return v


def _id_set(text: str) -> frozenset:
    return frozenset(int(t) for t in text.split(",") if t.strip())


# ----------------------------------------------------------------------


def _load_labeled(path, labels_path=None) -> Tractogram:
    t = fileio.load_fib(path)
    lp = labels_path or sidecar(path, ".labels")
    t.labels = fileio.load_labels(lp, expected=len(t))
    if np.any(t.labels > 1):
        raise ValueError(f"{lp}: expected p/np labels, found class ids")
    return t


def _load_classes(path, classes_path=None) -> Tractogram:
    t = fileio.load_fib(path)
    cp = classes_path or sidecar(path, ".classes")
    t.class_ids = fileio.load_labels(cp, expected=len(t))
    return t


def _spec(args) -> models.ModelSpec:
    return models.ModelSpec(arch=args.arch, k=args.k, seed=args.seed, pooling=args.pooling)


def _config(args) -> training.TrainConfig:
    return training.TrainConfig(spec=_spec(args), epochs=args.epochs, batch=args.batch,
                                lr=args.lr, seed=args.seed, val_fraction=args.val_fraction,
                                resample_to=args.resample)


def _write_report(path, text):
    if path:
        fileio.atomic_write(path, text)
    else:
        sys.stdout.write(text)


def cmd_generate(args):
    cfg = datagen.default_config(args.n, args.plausible_fraction, args.seed, args.points)
    t = datagen.generate(cfg)
    fileio.save_fib(args.out, t)
    fileio.save_labels(sidecar(args.out, ".labels"), t.labels)
    fileio.save_class_ids(sidecar(args.out, ".classes"), t.class_ids)


def cmd_label(args):
    if args.include is not None:
        t = _load_classes(args.inp, args.classes)
        labels = datagen.relabel_inclusive(t.class_ids, args.include)
    else:
        t = fileio.load_fib(args.inp)
        labels = datagen.apply_exclusive_rules(t)
    fileio.save_labels(args.out or sidecar(args.inp, ".labels"), labels)


def cmd_train(args):
    t = _load_labeled(args.inp, args.labels)
    res = training.train(_config(args), t)
    fileio.save_ckpt(args.out, res.model)
    if args.report:
        fileio.atomic_write(args.report, res.log.to_csv())


def cmd_cv(args):
    t = _load_labeled(args.inp, args.labels)
    folds = training.split_folds(t, args.folds, args.seed)
    res = training.cross_validate(_config(args), folds)
    _write_report(args.report, res.to_csv())


def cmd_incremental(args):
    t = _load_classes(args.inp, args.classes)
    stages = [_id_set(s) for s in args.stages.split(";") if s.strip()]
    out = training.incremental_train(_config(args), t, stages)
    rows = []
    for stage, rep in out:
        row = rep.as_row()
        row["stage"] = " ".join(str(c) for c in stage)
        rows.append(row)
    _write_report(args.report, evaluation.metrics_csv(rows, ("stage",) + evaluation.METRIC_FIELDS))


def _predictions_csv(preds) -> str:
    rows = [dict(index=i, prob_plausible=p.prob_plausible,
                 label="p" if p.label == PLAUSIBLE else "np") for i, p in enumerate(preds)]
    return evaluation.metrics_csv(rows, ("index", "prob_plausible", "label"))


def load_predictions(path, expected: int | None = None) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["index", "prob_plausible", "label"]:
        raise fileio.FormatError(path, 1, "expected header 'index,prob_plausible,label'")
    out = []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != 3 or row[2] not in ("p", "np"):
            raise fileio.FormatError(path, ln, f"malformed prediction row {row}")
        out.append(PLAUSIBLE if row[2] == "p" else 0)
    if expected is not None and len(out) != expected:
        raise fileio.FormatError(path, len(rows), f"{len(out)} predictions for {expected} streamlines")
    return np.array(out, dtype=np.int64)


def cmd_infer(args):
    model = fileio.load_ckpt(args.model)
    t = fileio.load_fib(args.inp)
    dtype = np.float32 if args.float32 else None
    preds = models.predict_batch(model, t, args.resample, args.workers, dtype=dtype)
    fileio.atomic_write(args.out, _predictions_csv(preds))


def cmd_eval(args):
    t = _load_labeled(args.inp, args.labels)
    if args.pred:
        pred = load_predictions(args.pred, expected=len(t))
    elif args.model:
        model = fileio.load_ckpt(args.model)
        pred = np.array([p.label for p in models.predict_batch(model, t, args.resample)])
    else:
        raise ValueError("eval needs --pred or --model")
    rep = evaluation.confusion_metrics(pred, t.labels)
    _write_report(args.report, evaluation.metrics_csv([rep.as_row()], evaluation.METRIC_FIELDS))
    if args.categories:
        cells = evaluation.per_category_report(pred, t.labels, t.streamlines)
        fileio.atomic_write(args.categories, evaluation.category_csv(cells))


def cmd_permtest(args):
    model = fileio.load_ckpt(args.model)
    t = _load_labeled(args.inp, args.labels)
    rep = evaluation.permutation_test(model, t, seed=args.seed, resample_to=args.resample)
    _write_report(args.report, evaluation.metrics_csv([rep.as_row()], evaluation.METRIC_FIELDS))


def cmd_fliptest(args):
    model = fileio.load_ckpt(args.model)
    t = fileio.load_fib(args.inp)
    dev = evaluation.flip_test(model, t, args.resample)
    _write_report(args.report, evaluation.metrics_csv([{"max_deviation": dev}],
                                                      ("max_deviation",)))


def cmd_attribute(args):
    model = fileio.load_ckpt(args.model)
    t = fileio.load_fib(args.inp)
    rows = []
    from .geometry import resample

    for i, s in enumerate(t.streamlines):
        pts = resample(s, args.resample) if args.resample else s
        counts = evaluation.max_activation_attribution(model, pts)
        rows.extend(dict(index=i, point=j, x=float(p[0]), y=float(p[1]), z=float(p[2]),
                         count=int(c)) for j, (p, c) in enumerate(zip(pts, counts)))
    fileio.atomic_write(args.out, evaluation.metrics_csv(
        rows, ("index", "point", "x", "y", "z", "count")))


def cmd_latent(args):
    model = fileio.load_ckpt(args.model)
    t = fileio.load_fib(args.inp)
    z = models.export_latent(model, t, args.resample)
    buf = io.StringIO()
    buf.write(f"index,{','.join(f'z{j}' for j in range(z.shape[1]))}\n")
    for i, row in enumerate(z):
        buf.write(f"{i}," + ",".join(f"{v:.17g}" for v in row) + "\n")
    fileio.atomic_write(args.out, buf.getvalue())


def cmd_voxel_dsc(args):
    t = fileio.load_fib(args.inp)
    if args.other:
        kept = fileio.load_fib(args.other).streamlines
    elif args.pred:
        pred = load_predictions(args.pred, expected=len(t))
        kept = [s for s, p in zip(t.streamlines, pred) if p == PLAUSIBLE]
    else:
        raise ValueError("voxel-dsc needs --other or --pred")
    pts = np.concatenate(t.streamlines + list(kept))
    r = max(float(np.abs(pts).max()) + args.voxel_mm, 70.0)
    bounds = evaluation.brain_bounds(r)
    a = evaluation.voxelize(t.streamlines, args.voxel_mm, bounds)
    b = evaluation.voxelize(kept, args.voxel_mm, bounds)
    row = dict(voxels_a=a.count(), voxels_b=b.count(), dsc=evaluation.volumetric_dsc(a, b))
    _write_report(args.report, evaluation.metrics_csv([row], ("voxels_a", "voxels_b", "dsc")))


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="streamfilter", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=_u64, default=0)
        return sp

    def model_flags(sp):
        sp.add_argument("--arch", choices=models.ARCHITECTURES, default="vf")
        sp.add_argument("--epochs", type=int, default=200)
        sp.add_argument("--batch", type=int, default=256)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--k", type=int, default=5)
        sp.add_argument("--pooling", choices=("max", "mean"), default="max")
        sp.add_argument("--val-fraction", type=float, default=0.2)

    def resample_flag(sp):
        sp.add_argument("--resample", type=int, default=16)

    sp = cmd("generate", cmd_generate, "write a synthetic tractogram with .labels/.classes sidecars")
    sp.set_defaults(seed=42)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--plausible-fraction", type=float, default=0.6)
    sp.add_argument("--points", type=int, default=32)

    sp = cmd("label", cmd_label, "label a tractogram (exclusive rules, or inclusive by class)")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out")
    sp.add_argument("--include", type=_id_set, help="comma-separated class ids kept plausible")
    sp.add_argument("--classes")

    sp = cmd("train", cmd_train, "train a model and save a checkpoint")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", help="training log CSV")
    model_flags(sp)
    resample_flag(sp)

    sp = cmd("cv", cmd_cv, "k-fold cross-validation")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--report")
    model_flags(sp)
    resample_flag(sp)

    sp = cmd("incremental", cmd_incremental, "retrain over growing inclusive label stages")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--classes")
    sp.add_argument("--stages", required=True, help="e.g. '1,2;1,2,3;1,2,3,4'")
    sp.add_argument("--report")
    model_flags(sp)
    resample_flag(sp)

    sp = cmd("infer", cmd_infer, "predict plausibility, one CSV row per streamline")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--float32", action="store_true")
    resample_flag(sp)

    sp = cmd("eval", cmd_eval, "confusion metrics against labels")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--pred")
    sp.add_argument("--model")
    sp.add_argument("--report")
    sp.add_argument("--categories", help="per length/curvature cell CSV")
    resample_flag(sp)

    sp = cmd("permtest", cmd_permtest, "metrics on point-shuffled streamlines")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--report")
    resample_flag(sp)

    sp = cmd("fliptest", cmd_fliptest, "max logit change under point-order reversal")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--report")
    resample_flag(sp)

    sp = cmd("attribute", cmd_attribute, "per-point max-activation counts")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    resample_flag(sp)

    sp = cmd("latent", cmd_latent, "export pooled global descriptors")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    resample_flag(sp)

    sp = cmd("voxel-dsc", cmd_voxel_dsc, "volumetric Dice between a tractogram and a filtered subset")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--other")
    sp.add_argument("--pred")
    sp.add_argument("--voxel-mm", type=float, default=2.0)
    sp.add_argument("--report")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_INVALID
    try:
        args.fn(args)
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
