"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

The lines are collected in ``RESULTS`` and printed again at the end of the
pytest run (see ``conftest.pytest_terminal_summary``).  Criteria 5-7 train
many detectors and take tens of minutes on one core.
"""
import copy
import functools
import time

import numpy as np
import pytest

from pointheat import data
from pointheat.annotator import Sample, binarize, generate_pseudo_label
from pointheat.bilevel import (TrainConfig, alignment_loss, combined_gradient, evaluate_soft_iou,
                               rank_samples_by_alpha, train, val_gradient)
from pointheat.cli import apply_ablation, bench_times, run
from pointheat.diffusion import (DiffusionParams, EdgeWeights, build_edge_weights, diffuse, diffuse_vjp,
                                 stable_step_bound)
from pointheat.field import PointAnnotation, delta_field
from pointheat.metrics import MetricsReport, dataset_metrics, target_iou
from pointheat.model import N_PARAMS, DetectorState, detector_backward, detector_forward, soft_iou_loss
from pointheat.superpixel import slic

from conftest import central_fd, rel_err

RESULTS = {}
SEEDS = range(20)


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


# ---------------------------------------------------------------- 1. physics

def _physics_case(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((24, 20))
    w = build_edge_weights(img, rng.uniform(0.05, 0.5))
    tau = rng.uniform(0.1, 1.0) * stable_step_bound(w)
    u0 = rng.random(img.shape)
    u = diffuse(u0, w, tau, int(rng.integers(20, 80)))
    mass = abs(u.sum() - u0.sum()) / np.abs(u0).sum()
    maxp = u.min() >= u0.min() - 1e-15 and u.max() <= u0.max() + 1e-15

    # variance of the free-space kernel on 65x65
    k, tau_v = int(rng.integers(20, 61)), float(rng.uniform(0.1, 0.25))
    flat = EdgeWeights(np.ones((65, 64)), np.ones((64, 65)))
    h = diffuse(delta_field((65, 65), PointAnnotation(32, 32)), flat, tau_v, k)
    x = np.arange(65) - 32
    var = ((h.sum(axis=0) * x**2).sum(), (h.sum(axis=1) * x**2).sum())
    var_err = max(abs(v / (2 * tau_v * k) - 1) for v in var)

    # a sharp vertical edge at a random column
    c = int(rng.integers(8, 24))
    two = np.zeros((32, 32))
    two[:, c:] = 1.0
    we = build_edge_weights(two, 0.05)
    src = PointAnnotation(int(rng.integers(0, c)), int(rng.integers(0, 32)))
    ue = diffuse(delta_field(two.shape, src), we, 0.9 * stable_step_bound(we), 100)
    leak = ue[:, c:].sum() / ue.sum()
    return mass, maxp, var_err, leak


def test_criterion_1_diffusion_physics():
    t0 = time.perf_counter()
    cases = [_physics_case(s) for s in SEEDS]
    dt = time.perf_counter() - t0
    mass = max(c[0] for c in cases)
    maxp = all(c[1] for c in cases)
    var_err = max(c[2] for c in cases)
    leak = max(c[3] for c in cases)
    ok = mass <= 1e-9 and maxp and var_err <= 0.01 and leak <= 1e-6 and dt < 10
    assert report(1, ok, f"mass {mass:.1e} (<=1e-9), max principle {maxp}, variance err {var_err:.2%} (<=1%), "
                         f"leak {leak:.1e} (<=1e-6), {dt:.1f} s (<10)")


# ---------------------------------------------------------------- 2. gradients

def _grad_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}

    img, u0, up = rng.random((8, 8)), rng.random((8, 8)), rng.standard_normal((8, 8))
    p = DiffusionParams(kappa=rng.uniform(0.2, 0.6), tau=rng.uniform(0.05, 0.2), steps=int(rng.integers(1, 12)))
    g, gk, gt = diffuse_vjp(u0, img, p, up)

    def obj(x0, kappa, tau):
        return np.sum(up * diffuse(x0, build_edge_weights(img, kappa), tau, p.steps))

    fg = central_fd(lambda v: obj(v.reshape(8, 8), p.kappa, p.tau), u0.ravel()).reshape(8, 8)
    fk = central_fd(lambda v: obj(u0, v[0], p.tau), [p.kappa])
    ft = central_fd(lambda v: obj(u0, p.kappa, v[0]), [p.tau])
    errs["diffuse_vjp"] = max(rel_err(g, fg), rel_err(gk, fk[0]), rel_err(gt, ft[0]))

    st = DetectorState(rng.normal(0, 0.3, N_PARAMS))
    x = rng.random((2, 7, 7))
    upd = rng.standard_normal((2, 7, 7))
    y, tape = detector_forward(st, x)
    gd = detector_backward(tape, upd)
    # a pre-activation sits within 1e-6 of a leaky kink for one seed, so a smaller step
    fd = central_fd(lambda q: float(np.sum(upd * detector_forward(DetectorState(q), x)[0])), st.params, 1e-7)
    errs["detector_backward"] = rel_err(gd, fd)

    pred, tgt = rng.uniform(0.05, 0.95, (2, 6, 6)), (rng.random((2, 6, 6)) > 0.5).astype(float)
    w = rng.standard_normal(2)
    _, gs = soft_iou_loss(pred, tgt)
    fs = central_fd(lambda q: float(w @ soft_iou_loss(q.reshape(pred.shape), tgt)[0]), pred.ravel())
    errs["soft_iou_loss"] = rel_err(w[:, None, None] * gs, fs.reshape(pred.shape))

    sy, slab = rng.random((8, 8)), (rng.random((8, 8)) > 0.6).astype(float)
    sp = DiffusionParams(kappa=rng.uniform(0.2, 0.6), tau=rng.uniform(0.05, 0.2), rho=rng.uniform(0.2, 0.8))
    _, gth = alignment_loss(sp, [sy], [slab], [img], steps=5)
    fth = central_fd(lambda v: alignment_loss(DiffusionParams(kappa=v[0], tau=v[1], rho=v[2]),
                                              [sy], [slab], [img], 5)[0], [sp.kappa, sp.tau, sp.rho])
    errs["surrogate_theta"] = rel_err(gth, fth)

    tx, tt = rng.random((2, 8, 8)), (rng.random((2, 8, 8)) > 0.6).astype(float)
    vx, vt = rng.random((2, 8, 8)), (rng.random((2, 8, 8)) > 0.6).astype(float)
    alpha, beta = rng.uniform(0.5, 1.5, 2), float(rng.uniform(0, 1))
    yt, tp = detector_forward(st, tx)
    _, dl = soft_iou_loss(yt, tt)
    grads = detector_backward(tp, dl, per_sample=True)
    _, gv = val_gradient(st, vx, vt)
    gc = combined_gradient(grads, alpha, beta, gv)

    def inner(q):
        s = DetectorState(q)
        lt = soft_iou_loss(detector_forward(s, tx)[0], tt)[0]
        lv = soft_iou_loss(detector_forward(s, vx)[0], vt)[0]
        return float(alpha @ lt / len(alpha) + beta * np.mean(lv))

    errs["combined_inner"] = rel_err(gc, central_fd(inner, st.params))
    return errs


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    all_errs = [_grad_errors(s) for s in SEEDS]
    dt = time.perf_counter() - t0
    worst = {k: max(e[k] for e in all_errs) for k in all_errs[0]}
    ok = all(v <= 1e-4 for v in worst.values()) and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report(2, ok, f"max rel err {detail} (<=1e-4), {dt:.1f} s (<60)")


# ---------------------------------------------------------------- 3. pseudo-mask quality

def _mask_quality(coarse):
    scenes = data.synth_dataset(data.SceneSpec(size=256, seed=7, coarse=coarse), 50)
    params = DiffusionParams()
    ious = []
    for sc in scenes:
        spx = slic(sc.image, cell=6)
        for p in sc.points:
            m = binarize(generate_pseudo_label(sc.image, p, params, spx))
            ious.append(target_iou(m, sc.mask, p))
    return float(np.mean(ious)), len(ious)


def test_criterion_3_pseudo_mask_quality():
    centroid, n = _mask_quality(False)
    coarse, _ = _mask_quality(True)
    ok = centroid >= 0.55 and centroid >= coarse
    assert report(3, ok, f"mean IoU centroid {centroid:.3f} (>=0.55) vs coarse {coarse:.3f} over {n} targets")


# ---------------------------------------------------------------- 4. latency

def test_criterion_4_latency():
    scenes = data.synth_dataset(data.SceneSpec(size=256, seed=11), 10)
    samples = [Sample(s.image, s.points) for s in scenes]
    spx = {"cell": 6, "compactness": 10.0, "iters": 10}
    bench_times(samples[:1], DiffusionParams(), spx, 1)
    t = bench_times(samples, DiffusionParams(), spx, 3)
    med = float(np.median(t))
    assert report(4, med <= 0.05, f"median {med * 1000:.1f} ms/target, p95 {np.percentile(t, 95) * 1000:.1f} ms "
                                  f"over {t.size} timings (<=50 ms; reference 12 ms)")


# ---------------------------------------------------------------- 5. ablation ordering

def _plain_set(seed, n, size=32):
    scenes = data.synth_dataset(data.SceneSpec(size=size, seed=seed), n)
    return [Sample(sc.image, sc.points, sample_id=i, mask=sc.mask) for i, sc in enumerate(scenes)]


@pytest.mark.slow
def test_criterion_5_ablation_ordering():
    t0 = time.perf_counter()
    tr, va, te = _plain_set(100, 200), _plain_set(200, 50), _plain_set(300, 50)
    base = TrainConfig(epochs=120, activation=30, theta_period=10, seed=0)
    te_x, te_m = [s.image for s in te], [s.mask for s in te]
    score = {}
    for name in ("A1", "A2", "A3", "A4", "B2", "B3", "B4", "full"):
        cfg, th = apply_ablation(name, base, DiffusionParams())
        r = train(cfg, copy.deepcopy(tr), copy.deepcopy(va), theta0=th)
        score[name] = evaluate_soft_iou(r.detector, te_x, te_m)
    dt = time.perf_counter() - t0
    checks = {
        "full>=B2": score["full"] >= score["B2"],
        "full>=B3": score["full"] >= score["B3"],
        "full>=B4": score["full"] >= score["B4"],
        "A4>=A2": score["A4"] >= score["A2"],
        "A4>=A3": score["A4"] >= score["A3"],
        "A2>=A1": score["A2"] >= score["A1"],
        "A3>=A1": score["A3"] >= score["A1"],
        "full-A1>=0.15": score["full"] - score["A1"] >= 0.15,
        "runtime<=30min": dt <= 1800,
    }
    failed = [k for k, v in checks.items() if not v]
    table = " ".join(f"{k}={v:.4f}" for k, v in score.items())
    assert report(5, not failed, f"{table}; {dt / 60:.1f} min; failed: {', '.join(failed) or 'none'}")


# ---------------------------------------------------------------- 6./7. sample weights

def contrast_suite(seed, n, size=32):
    """Alternating low (amplitude 0.25) and high (0.8) contrast scenes."""
    lo = data.synth_dataset(data.SceneSpec(size=size, amplitude=(0.25, 0.25), seed=seed), (n + 1) // 2)
    hi = data.synth_dataset(data.SceneSpec(size=size, amplitude=(0.8, 0.8), seed=seed + 5000), n // 2)
    out = []
    for i in range(n):
        sc, b = (lo[i // 2], "low") if i % 2 == 0 else (hi[i // 2], "high")
        out.append(Sample(sc.image, sc.points, sample_id=i, mask=sc.mask, bucket=b))
    return out


def weight_config(seed):
    return TrainConfig(epochs=120, activation=30, theta_period=10, seed=seed)


@functools.lru_cache(maxsize=None)
def weighted_run(seed):
    tr, va = contrast_suite(1000 + seed, 200), contrast_suite(2000 + seed, 50)
    return tr, va, train(weight_config(seed), copy.deepcopy(tr), copy.deepcopy(va))


@pytest.mark.slow
def test_criterion_6_low_contrast_weighted_up():
    rows, wins = [], 0
    for seed in range(5):
        _, _, r = weighted_run(seed)
        act = [h for h in r.history if h["active"]]
        lo = float(np.mean([h["alpha_by_bucket"]["low"] for h in act]))
        hi = float(np.mean([h["alpha_by_bucket"]["high"] for h in act]))
        wins += lo > hi
        rows.append(f"{lo:.3f}/{hi:.3f}")
    assert report(6, wins >= 4, f"mean alpha low/high per seed {' '.join(rows)}; low>high in {wins}/5 (need 4)")


@pytest.mark.slow
def test_criterion_7_alpha_selection():
    rows, beats, ratios = [], 0, []
    for seed in range(5):
        tr, va, r = weighted_run(seed)
        te = contrast_suite(3000 + seed, 50)
        te_x, te_m = [s.image for s in te], [s.mask for s in te]
        n = len(tr)
        top = [i for i, _ in rank_samples_by_alpha(r)][:n // 2]
        rnd = np.random.default_rng([seed, 7]).permutation(n)[:n // 2].tolist()
        plain = weight_config(seed).with_(bilevel=False)
        sc = {}
        for name, sel in (("full", range(n)), ("top", sorted(top)), ("random", sorted(rnd))):
            rr = train(plain, [copy.deepcopy(tr[i]) for i in sel], copy.deepcopy(va))
            sc[name] = evaluate_soft_iou(rr.detector, te_x, te_m)
        ratios.append(sc["top"] / sc["full"])
        beats += sc["top"] > sc["random"]
        rows.append(f"{sc['top']:.3f}/{sc['random']:.3f}/{sc['full']:.3f}")
    ok = min(ratios) >= 0.95 and beats >= 4
    assert report(7, ok, f"top/random/full per seed {' '.join(rows)}; min top/full {min(ratios):.3f} (>=0.95), "
                         f"top>random in {beats}/5 (need 4)")


# ---------------------------------------------------------------- 8. determinism

def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_cli_determinism(tmp_path, monkeypatch):
    trees = []
    for k, threads in enumerate(("1", "4", "1")):
        monkeypatch.setenv("APP_THREADS", threads)
        o = tmp_path / f"run{k}"
        d = o / "data"
        assert run(["synth", "--count", "10", "--size", "24", "--seed", "5", "--splits", "--out", str(d)]) == 0
        assert run(["annotate", "--data", str(d), "--out", str(o / "ann")]) == 0
        assert run(["annotate", "--data", str(d), "--coarse", "--seed", "2", "--out", str(o / "ann_c")]) == 0
        assert run(["train", "--data", str(d), "--val", str(d), "--out", str(o / "tr"), "--epochs", "4", "--activation", "2",
                    "--theta-period", "2", "--seed", "3"]) == 0
        assert run(["predict", "--data", str(d), "--checkpoint", str(o / "tr" / "detector.dckp"),
                    "--out", str(o / "pred")]) == 0
        assert run(["eval", "--pred", str(o / "pred"), "--gt", str(d), "--report", str(o / "report.json")]) == 0
        trees.append(_tree(o))
    same = trees[0] == trees[1] == trees[2]
    kinds = sorted({p.rsplit(".", 1)[-1] for p in trees[0] if "." in p})
    assert report(8, same, f"{len(trees[0])} files ({', '.join(kinds)}) bit-identical for APP_THREADS 1, 4, 1")


# ---------------------------------------------------------------- 9. ingestion

def test_criterion_9_ingestion_round_trip(tmp_path):
    scenes = data.synth_dataset(data.SceneSpec(size=40, seed=21), 5)
    splits = data.split_622(5, 0)
    data.write_dataset(tmp_path / "ds", scenes, splits=splits)
    idx = data.load_dataset(tmp_path / "ds")
    ok = len(idx) == 5
    for e, sc in zip(idx, scenes):
        ok &= np.array_equal(data.read_pgm(e.image_path), sc.image)
        ok &= np.array_equal(data.read_mask(e.mask_path), sc.mask)
        ok &= [(p.x, p.y) for p in e.points] == [(p.x, p.y) for p in sc.points]

    rng = np.random.default_rng(0)
    soft = rng.random((13, 17)).astype(np.float32)  # the format stores float32
    data.write_smsk(tmp_path / "a.smsk", soft)
    ok &= np.array_equal(data.read_smsk(tmp_path / "a.smsk"), soft)
    st = DetectorState.init(4)
    data.write_checkpoint(tmp_path / "d.dckp", st.params, st.m, st.v, 9)
    ck = data.read_checkpoint(tmp_path / "d.dckp")
    ok &= np.array_equal(ck[0], st.params)
    m = dataset_metrics([s.mask for s in scenes], [s.mask for s in scenes])
    ok &= MetricsReport.from_json(m.to_json()) == m
    assert report(9, bool(ok), "PGM images/masks, points, SMSK, checkpoint and metrics JSON round-trip exactly; "
                               "real-dataset numbers out of scope")
