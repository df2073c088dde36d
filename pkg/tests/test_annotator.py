import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointheat.annotator import (Sample, annotate_dataset, binarize, blend, coarse_point, diffusion_field,
                                 generate_pseudo_label, label_sample, region_grow)
from pointheat.data import SceneSpec, Target, synth_dataset
from pointheat.diffusion import DiffusionParams
from pointheat.errors import AnnotationError
from pointheat.field import PointAnnotation, delta_field, normalize_field
from pointheat.superpixel import region_mask, slic


def scene(seed=3, size=48):
    return synth_dataset(SceneSpec(size=size, seed=seed), 1)[0]


def test_rho_endpoints():
    sc = scene()
    p = sc.points[0]
    spx = slic(sc.image, cell=6)
    m0 = generate_pseudo_label(sc.image, p, DiffusionParams(rho=0.0), spx)
    assert np.array_equal(m0.field, region_mask(spx, p).astype(float))
    m1 = generate_pseudo_label(sc.image, p, DiffusionParams(rho=1.0), spx)
    assert np.array_equal(m1.field, diffusion_field(sc.image, p, DiffusionParams()))


def test_gaussian_target_label_quality():
    # one target, sigma 2.5, contrast 0.6, centroid annotation
    rng = np.random.default_rng(4)
    from scipy.ndimage import gaussian_filter
    clutter = gaussian_filter(rng.standard_normal((64, 64)), 6.0)
    clutter = 0.25 + 0.08 * normalize_field(clutter)
    t = Target(30.0, 33.0, 0.6, 2.5, 2.5, 0.0)
    bump = t.render((64, 64))
    img = np.clip(clutter + bump + 0.01 * rng.standard_normal((64, 64)), 0, 1)
    truth = bump >= 0.3
    s = Sample(img, [PointAnnotation(30, 33)])
    m = binarize(generate_pseudo_label(img, s.points[0], DiffusionParams(), s.ensure_superpixels()))
    iou = (m & truth).sum() / (m | truth).sum()
    assert iou >= 0.60


def test_binarize_rules():
    p = PointAnnotation(2, 3)
    b = np.zeros((6, 6))
    b[1:4, 1:4] = 1
    from pointheat.annotator import SoftMask
    assert np.array_equal(binarize(SoftMask(b, p), 0.5), b > 0)
    z = binarize(SoftMask(np.zeros((6, 6)), p))
    assert z.sum() == 1 and z[3, 2]
    d = binarize(SoftMask(normalize_field(delta_field((6, 6), p)), p), 0.9)
    assert d.sum() == 1 and d[3, 2]
    with pytest.raises(ValueError):
        binarize(SoftMask(b, p), 1.0)


def test_point_outside():
    img = np.zeros((8, 8))
    with pytest.raises(AnnotationError):
        generate_pseudo_label(img, PointAnnotation(8, 0), DiffusionParams(), slic(img, cell=8))
    with pytest.raises(AnnotationError, match="s7"):
        annotate_dataset([Sample(img, [PointAnnotation(0, -1)], sample_id="s7")], DiffusionParams())


def test_empty_and_zero_points():
    assert annotate_dataset([], DiffusionParams()) == []
    s = Sample(np.zeros((8, 8)), [])
    assert np.array_equal(annotate_dataset([s], DiffusionParams())[0], np.zeros((8, 8)))


def test_two_points_merge_and_idempotence():
    sc = scene(5, 64)
    a, b = PointAnnotation(10, 10), PointAnnotation(50, 52)
    spx = slic(sc.image, cell=6)
    params = DiffusionParams()
    la = generate_pseudo_label(sc.image, a, params, spx).field
    lb = generate_pseudo_label(sc.image, b, params, spx).field
    s = Sample(sc.image, [a, b], superpixels=spx)
    assert np.array_equal(label_sample(s, params), np.maximum(la, lb))
    s2 = Sample(sc.image, [a, b, a], superpixels=spx)
    assert np.array_equal(label_sample(s2, params), label_sample(s, params))


def test_thread_count_does_not_change_labels(monkeypatch):
    samples = [Sample(sc.image, sc.points, i) for i, sc in enumerate(synth_dataset(SceneSpec(size=40, seed=9), 8))]
    one = annotate_dataset(samples, DiffusionParams(), workers=1)
    for s in samples:
        s.superpixels = None
    monkeypatch.setenv("APP_THREADS", "4")
    four = annotate_dataset(samples, DiffusionParams())
    assert all(np.array_equal(x, y) for x, y in zip(one, four))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 1), st.floats(0, 1))
def test_monotone_in_rho_inside_region(seed, r1, r2):
    sc = scene(seed % 50, 32)
    p = sc.points[0] if sc.points else PointAnnotation(16, 16)
    u = diffusion_field(sc.image, p, DiffusionParams())
    c = region_mask(slic(sc.image, cell=6), p)
    lo, hi = min(r1, r2), max(r1, r2)
    sel = c & (u < 1)
    assert np.all(blend(u, c, hi)[sel] <= blend(u, c, lo)[sel])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_label_range_and_determinism(seed):
    sc = scene(seed, 32)
    s1, s2 = Sample(sc.image, sc.points), Sample(sc.image.copy(), list(sc.points))
    l1, l2 = label_sample(s1, DiffusionParams()), label_sample(s2, DiffusionParams())
    assert np.array_equal(l1, l2)
    assert l1.min() >= 0 and l1.max() <= 1


def test_coarse_point_inside_truth():
    rng = np.random.default_rng(0)
    truth = np.zeros((20, 20), bool)
    truth[5:9, 6:10] = True
    for _ in range(50):
        q = coarse_point(PointAnnotation(7, 7), rng, truth)
        assert truth[q.y, q.x]
    for _ in range(50):
        q = coarse_point(PointAnnotation(0, 0), rng, np.zeros((20, 20), bool))
        assert q.x**2 + q.y**2 <= 9 and q.x >= 0 and q.y >= 0


def test_region_grow_baseline():
    img = np.zeros((16, 16))
    img[4:8, 4:8] = 1.0
    m = region_grow(img, PointAnnotation(5, 5))
    assert np.array_equal(m, img > 0.5)
