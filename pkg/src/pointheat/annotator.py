"""Point annotations to soft pseudo-labels: heat diffusion fused with a superpixel prior."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionParams, build_edge_weights, diffuse_point
from .errors import AnnotationError
from .field import PointAnnotation, as_field, normalize_field
from .superpixel import SuperpixelLabels, region_mask, slic

DEFAULT_THRESHOLD = 0.3


@dataclass(frozen=True)
class SoftMask:
    field: np.ndarray
    source: PointAnnotation


@dataclass
class Sample:
    """One training image with its point annotations and derived state."""

    image: np.ndarray
    points: list
    sample_id: int | str = 0
    mask: np.ndarray | None = None  # ground truth, evaluation only
    bucket: str = "all"
    label: np.ndarray | None = None
    alpha: float = 1.0
    superpixels: SuperpixelLabels | None = field(default=None, repr=False)

    def ensure_superpixels(self, cell=6, compactness=10.0, iters=10):
        if self.superpixels is None:
            self.superpixels = slic(self.image, cell, compactness, iters)
        return self.superpixels


def diffusion_field(image, p: PointAnnotation, params: DiffusionParams) -> np.ndarray:
    """Normalized heat field after ``params.steps`` steps from a delta at ``p``."""
    w = build_edge_weights(image, params.kappa)
    return normalize_field(diffuse_point(w, p, params.tau, params.steps))


def blend(u, region, rho) -> np.ndarray:
    """``rho * u + (1 - rho) * region`` before the final normalization."""
    return rho * u + (1.0 - rho) * np.asarray(region, dtype=np.float64)


def generate_pseudo_label(image, p: PointAnnotation, params: DiffusionParams,
                          spx: SuperpixelLabels) -> SoftMask:
    image = as_field(image, "image")
    if not p.inside(image.shape):
        raise AnnotationError(f"point {p} outside {image.shape[1]}x{image.shape[0]} image")
    u = diffusion_field(image, p, params)
    c = region_mask(spx, p)
    return SoftMask(normalize_field(blend(u, c, params.rho)), p)


def binarize(m: SoftMask, rel_threshold=DEFAULT_THRESHOLD) -> np.ndarray:
    if not 0 < rel_threshold < 1:
        raise ValueError(f"rel_threshold must lie in (0, 1), got {rel_threshold}")
    top = m.field.max()
    if top <= 0:
        out = np.zeros(m.field.shape, dtype=bool)
        out[m.source.y, m.source.x] = True
        return out
    return m.field >= rel_threshold * top


def point_label(shape, points) -> np.ndarray:
    """Naive point supervision: ones at the annotated pixels only."""
    out = np.zeros(shape)
    for p in points:
        out[p.y, p.x] = 1.0
    return out


def label_sample(sample: Sample, params: DiffusionParams, spx_kw=None) -> np.ndarray:
    """Pixelwise max over the soft masks of every point of ``sample``."""
    out = np.zeros(sample.image.shape)
    if not sample.points:
        return out
    for p in sample.points:
        if not p.inside(sample.image.shape):
            raise AnnotationError(f"sample {sample.sample_id!r}: point {p} outside image")
    spx = sample.ensure_superpixels(**(spx_kw or {}))
    for p in sample.points:
        np.maximum(out, generate_pseudo_label(sample.image, p, params, spx).field, out=out)
    return out


def worker_count(default=1):
    """Worker fan-out cap from ``APP_THREADS``."""
    try:
        return max(1, int(os.environ.get("APP_THREADS", default)))
    except ValueError:
        return default


def annotate_dataset(samples, params: DiffusionParams, workers=None, spx_kw=None):
    """Regenerate one merged soft label per sample, in sample order.

    Labels are stored on the samples and also returned as a list.
    """
    samples = list(samples)
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or len(samples) < 2:
        labels = [label_sample(s, params, spx_kw) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            labels = list(pool.map(lambda s: label_sample(s, params, spx_kw), samples))
    for s, lab in zip(samples, labels):
        s.label = lab
    return labels


def coarse_point(p: PointAnnotation, rng, truth=None, radius=3) -> PointAnnotation:
    """Jitter ``p`` uniformly within ``truth`` (a target mask) or a disk around it."""
    if truth is not None and np.any(truth):
        ys, xs = np.nonzero(truth)
    else:
        dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
        keep = dx**2 + dy**2 <= radius**2
        ys, xs = (dy[keep] + p.y), (dx[keep] + p.x)
        if truth is not None:
            h, w = truth.shape
            ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
            ys, xs = ys[ok], xs[ok]
    k = int(rng.integers(len(ys)))
    return PointAnnotation(int(xs[k]), int(ys[k]), p.target_id)


def region_grow(image, p: PointAnnotation, rel_tol=0.5) -> np.ndarray:
    """Flood fill from ``p`` over pixels brighter than a fraction of the seed's local contrast.

    A crude baseline kept for directional comparison with the diffusion labels.
    """
    from scipy import ndimage

    image = as_field(image, "image")
    bg = np.median(image)
    level = bg + rel_tol * (image[p.y, p.x] - bg)
    comp, _ = ndimage.label(image >= level)
    lab = comp[p.y, p.x]
    if lab == 0:
        out = np.zeros(image.shape, dtype=bool)
        out[p.y, p.x] = True
        return out
    return comp == lab
