"""Command-line workflows: synth, annotate, train, predict, eval, bench."""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data
from .annotator import DEFAULT_THRESHOLD, Sample, annotate_dataset, binarize, coarse_point, generate_pseudo_label, worker_count
from .bilevel import TrainConfig, rank_samples_by_alpha, train
from .diffusion import DiffusionParams
from .errors import PointHeatError
from .metrics import dataset_metrics, target_iou
from .model import DetectorState, predict
from .superpixel import slic


class UsageError(Exception):
    pass


# Each variant edits (train config, initial theta). Group A changes how labels
# are made and trains single-level; group B removes one piece of the bi-level loop.
ABLATIONS = {
    "A1": lambda c, t: (c.with_(label_mode="point", bilevel=False), t),
    "A2": lambda c, t: (c.with_(bilevel=False), t.with_(rho=1.0)),
    "A3": lambda c, t: (c.with_(bilevel=False), t.with_(rho=0.0)),
    "A4": lambda c, t: (c.with_(bilevel=False), t),
    "B1": lambda c, t: (c.with_(activation=0, lookahead=False), t),
    "B2": lambda c, t: (c.with_(meta_weights=False), t),
    "B3": lambda c, t: (c.with_(regenerate_labels=False), t),
    "B4": lambda c, t: (c.with_(beta=0.0), t),
    "full": lambda c, t: (c, t),
}

SPX_DEFAULTS = {"cell": 6, "compactness": 10.0, "iters": 10}


def apply_ablation(name, cfg: TrainConfig, theta: DiffusionParams):
    try:
        return ABLATIONS[name](cfg, theta)
    except KeyError:
        raise UsageError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}") from None


# ---------------------------------------------------------------- config merge

def _field_types(cls):
    return {f.name: f.default for f in fields(cls)}


def merge_config(file_values: dict, overrides: dict):
    """Defaults, then the JSON file, then explicit flags. Returns (TrainConfig, DiffusionParams, spx kwargs)."""
    tkeys, dkeys = _field_types(TrainConfig), _field_types(DiffusionParams)
    skeys = dict(SPX_DEFAULTS)
    unknown = set(file_values) - set(tkeys) - set(dkeys) - set(skeys)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = TrainConfig(**{k: v for k, v in merged.items() if k in tkeys})
        theta = DiffusionParams(**{k: v for k, v in merged.items() if k in dkeys})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    spx = {k: merged.get(k, v) for k, v in skeys.items()}
    return cfg, theta, spx


def _read_config(path):
    if path is None:
        return {}
    try:
        values = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return values


# ---------------------------------------------------------------- data helpers

def _load_samples(root, split=None, with_masks=True):
    idx = data.load_dataset(root, split)
    out = []
    for e in idx:
        mask = data.read_mask(e.mask_path) if (with_masks and e.mask_path) else None
        out.append(Sample(data.read_pgm(e.image_path), list(e.points), sample_id=e.image_id, mask=mask))
    return out


def _jitter_points(samples, seed):
    from scipy import ndimage

    for k, s in enumerate(samples):
        rng = np.random.default_rng([seed, k])
        comps = ndimage.label(s.mask, structure=np.ones((3, 3)))[0] if s.mask is not None else None
        new = []
        for p in s.points:
            if comps is not None and comps[p.y, p.x]:
                truth = comps == comps[p.y, p.x]
            else:
                truth = np.zeros(s.image.shape, bool)  # 3-px disk, clipped to the image
            new.append(coarse_point(p, rng, truth))
        s.points = new


def _stack_same_size(samples, what):
    shapes = {s.image.shape for s in samples}
    if len(shapes) > 1:
        raise UsageError(f"{what} images differ in size {sorted(shapes)}; crop them to a common size first")


# ---------------------------------------------------------------- subcommands

def cmd_synth(a):
    spec = data.SceneSpec(size=a.size, coarse=a.coarse, seed=a.seed,
                          n_targets=(a.min_targets, a.max_targets))
    scenes = data.synth_dataset(spec, a.count)
    splits = data.split_622(a.count, a.seed) if a.splits else None
    data.write_dataset(a.out, scenes, splits=splits)
    print(f"wrote {a.count} scenes to {a.out}")
    return 0


def cmd_annotate(a):
    cfg, theta, spx = merge_config(_read_config(a.config), {
        "kappa": a.kappa, "tau": a.tau, "steps": a.steps, "rho": a.rho,
        "cell": a.cell, "compactness": a.compactness})
    samples = _load_samples(a.data, a.split)
    if a.coarse:
        _jitter_points(samples, a.seed)
    out = Path(a.out)
    (out / "soft").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    labels = annotate_dataset(samples, theta, workers=worker_count(), spx_kw=spx)
    elapsed = time.perf_counter() - t0
    n_targets = sum(len(s.points) for s in samples)

    ious = []
    for s, lab in zip(samples, labels):
        data.write_smsk(out / "soft" / f"{s.sample_id}.smsk", lab.astype(np.float32))
        if s.points:
            spx_ = s.superpixels
            merged = np.zeros(s.image.shape, bool)
            for p in s.points:
                m = binarize(generate_pseudo_label(s.image, p, theta, spx_), a.threshold)
                merged |= m
                if s.mask is not None:
                    ious.append(target_iou(m, s.mask, p))
        else:
            merged = np.zeros(s.image.shape, bool)
        data.write_mask(out / "masks" / f"{s.sample_id}.pgm", merged)

    print(f"annotated {len(samples)} images, {n_targets} targets")
    if ious:
        print(f"mean per-target IoU vs truth: {np.mean(ious):.4f}")
    if n_targets:
        print(f"mean seconds/target: {elapsed / n_targets:.4f}")
    return 0


def cmd_train(a):
    overrides = {k: getattr(a, k) for k in (
        "epochs", "activation", "theta_period", "beta", "lr_omega", "lr_phi", "lr_theta",
        "weight_decay", "batch_size", "crop", "seed", "kappa", "tau", "steps", "rho")}
    cfg, theta, spx = merge_config(_read_config(a.config), overrides)
    cfg, theta = apply_ablation(a.ablation, cfg, theta)
    if spx != SPX_DEFAULTS:
        raise UsageError("superpixel settings are fixed during training; use annotate to explore them")
    train_set = _load_samples(a.data, a.split, with_masks=False)
    val_set = _load_samples(a.val, a.val_split, with_masks=False)
    if not train_set or not val_set:
        raise UsageError("training and validation sets must be nonempty")
    _stack_same_size(val_set, "validation")
    if cfg.crop >= max(max(s.image.shape) for s in train_set):
        _stack_same_size(train_set, "training")

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, train_set, val_set, theta0=theta, log_path=out / "log.jsonl",
                checkpoint_path=out / "last_finite.dckp", workers=worker_count())
    det = res.detector
    data.write_checkpoint(out / "detector.dckp", det.params, det.m, det.v, det.step)
    (out / "theta.json").write_text(json.dumps(
        {"kappa": res.theta.kappa, "tau": res.theta.tau, "steps": res.theta.steps, "rho": res.theta.rho},
        indent=2) + "\n")
    cfg_out = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    cfg_out["ablation"] = a.ablation
    (out / "config.json").write_text(json.dumps(cfg_out, indent=2) + "\n")
    try:
        ranking = rank_samples_by_alpha(res)
    except PointHeatError:
        ranking = None
    if ranking is not None:
        with open(out / "alpha_rank.csv", "w") as fh:
            fh.write("image_id,mean_alpha\n")
            for sid, w in ranking:
                fh.write(f"{sid},{w!r}\n")
    last = res.history[-1]
    print(f"trained {cfg.epochs} epochs ({a.ablation}); final train loss {last['train_loss']:.4f}, "
          f"val loss {last['val_loss']:.4f}; theta kappa={res.theta.kappa:.4g} tau={res.theta.tau:.4g} "
          f"rho={res.theta.rho:.4g}")
    return 0


def cmd_predict(a):
    params, m, v, step = data.read_checkpoint(a.checkpoint)
    det = DetectorState(params, m, v, step)
    samples = _load_samples(a.data, a.split, with_masks=False)
    out = Path(a.out)
    (out / "soft").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        y = predict(det, s.image)
        data.write_smsk(out / "soft" / f"{s.sample_id}.smsk", y.astype(np.float32))
        data.write_mask(out / "masks" / f"{s.sample_id}.pgm", y >= a.threshold)
    print(f"wrote {len(samples)} predictions to {out}")
    return 0


def _mask_dir(path):
    p = Path(path)
    if (p / "masks").is_dir():
        p = p / "masks"
    if not p.is_dir():
        raise UsageError(f"{path} is not a directory")
    return {f.stem: f for f in sorted(p.glob("*.pgm"))}


def cmd_eval(a):
    preds, gts = _mask_dir(a.pred), _mask_dir(a.gt)
    if a.split:
        keep = {e.image_id for e in data.load_dataset(a.gt, a.split)}
        gts = {k: v for k, v in gts.items() if k in keep}
    if set(preds) != set(gts):
        missing = sorted(set(gts) ^ set(preds))
        raise PointHeatError(f"prediction and truth ids differ: {', '.join(missing[:5])}")
    ids = sorted(gts)
    report = dataset_metrics([data.read_mask(preds[i]) for i in ids], [data.read_mask(gts[i]) for i in ids],
                             dist_thresh=a.dist, ids=ids)
    Path(a.report).parent.mkdir(parents=True, exist_ok=True)
    Path(a.report).write_text(report.to_json() + "\n")
    print(f"IoU {report.iou:.4f}  nIoU {report.niou:.4f}  Pd {report.pd:.4f}  Fa {report.fa * 1e6:.2f}e-6")
    return 0


def bench_times(samples, theta, spx, repeat):
    """Seconds per target: the point's own label plus its share of the image's superpixels."""
    times = []
    for s in samples:
        if not s.points:
            continue
        for _ in range(repeat):
            t0 = time.perf_counter()
            seg = slic(s.image, **spx)
            t_spx = time.perf_counter() - t0
            for p in s.points:
                t0 = time.perf_counter()
                generate_pseudo_label(s.image, p, theta, seg)
                times.append(time.perf_counter() - t0 + t_spx / len(s.points))
    return np.asarray(times)


def cmd_bench(a):
    _, theta, spx = merge_config(_read_config(a.config), {})
    samples = _load_samples(a.data, a.split, with_masks=False)
    if not any(s.points for s in samples):
        raise PointHeatError("no annotated targets to time")
    bench_times(samples[:1], theta, spx, 1)  # warm-up (compiled kernels)
    t = bench_times(samples, theta, spx, a.repeat)
    row = {"targets": int(t.size), "median_s": float(np.median(t)), "p95_s": float(np.percentile(t, 95)),
           "mean_s": float(t.mean())}
    print(f"{'op':<24}{'n':>8}{'median s':>12}{'p95 s':>12}")
    print(f"{'generate_pseudo_label':<24}{row['targets']:>8}{row['median_s']:>12.5f}{row['p95_s']:>12.5f}")
    if a.json:
        Path(a.json).write_text(json.dumps(row, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------- parser

def _theta_flags(p):
    p.add_argument("--kappa", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--rho", type=float)


def build_parser():
    ap = argparse.ArgumentParser(prog="pointheat", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--coarse", action="store_true", help="jittered interior points instead of centroids")
    p.add_argument("--splits", action="store_true", help="also write a 6:2:2 splits.csv")
    p.add_argument("--min-targets", type=int, default=1)
    p.add_argument("--max-targets", type=int, default=3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("annotate", help="pseudo-labels from point annotations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--config")
    _theta_flags(p)
    p.add_argument("--cell", type=int)
    p.add_argument("--compactness", type=float)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--coarse", action="store_true", help="jitter each point inside its target first")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", help="train the detector")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--val-split")
    p.add_argument("--config")
    p.add_argument("--ablation", default="full", choices=list(ABLATIONS))
    for name, typ in (("epochs", int), ("activation", int), ("theta-period", int), ("beta", float),
                      ("lr-omega", float), ("lr-phi", float), ("lr-theta", float), ("weight-decay", float),
                      ("batch-size", int), ("crop", int), ("seed", int)):
        p.add_argument(f"--{name}", type=typ)
    _theta_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a trained detector over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="IoU, nIoU, Pd, Fa of predicted masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--dist", type=float, default=3.0)
    p.add_argument("--split", help="score only this split of the truth dataset")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="pseudo-label latency per target")
    p.add_argument("--data", required=True)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--split")
    p.add_argument("--config")
    p.add_argument("--json")
    p.set_defaults(func=cmd_bench)
    return ap


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (PointHeatError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
