"""Pixel IoU, nIoU, probability of detection and false-alarm rate."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .field import as_mask

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Component:
    pixels: np.ndarray  # (N, 2) rows of (y, x), scan order
    centroid: tuple  # (x, y)

    @property
    def size(self):
        return len(self.pixels)


def connected_components(mask) -> list:
    """8-connected components ordered by the scan position of their first pixel."""
    m = as_mask(mask)
    lab, n = ndimage.label(m, structure=_EIGHT)
    if n == 0:
        return []
    ys, xs = np.nonzero(lab)  # scan order
    ids = lab[ys, xs]
    order = np.argsort(ids, kind="stable")
    bounds = np.searchsorted(ids[order], np.arange(1, n + 2))
    comps = []
    for k in range(n):
        sel = order[bounds[k]:bounds[k + 1]]
        px = np.column_stack([ys[sel], xs[sel]])
        comps.append(Component(px, (float(xs[sel].mean()), float(ys[sel].mean()))))
    comps.sort(key=lambda c: (c.pixels[0, 0], c.pixels[0, 1]))
    return comps


def pixel_iou(pred, gt) -> float:
    p, g = as_mask(pred), as_mask(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and truth {g.shape} differ")
    union = np.sum(p | g)
    if union == 0:
        return 1.0
    return float(np.sum(p & g) / union)


def target_iou(pred, gt, point) -> float:
    """IoU of one target's mask against the truth component it annotates.

    That is the 8-connected truth component containing ``point``, else the
    one whose centroid is nearest; 0 when the truth is empty.
    """
    p, g = as_mask(pred), as_mask(gt)
    lab, n = ndimage.label(g, structure=_EIGHT)
    if n == 0:
        return 0.0
    k = lab[point.y, point.x]
    if k == 0:
        cents = ndimage.center_of_mass(g, lab, range(1, n + 1))
        d = [np.hypot(cy - point.y, cx - point.x) for cy, cx in cents]
        k = int(np.argmin(d)) + 1
    return pixel_iou(p, lab == k)


def match_components(pred_comps, gt_comps, dist_thresh=3.0):
    """Greedy nearest-first matching of centroids within ``dist_thresh``.

    Returns ``{gt index: pred index}``.
    """
    pairs = []
    for gi, g in enumerate(gt_comps):
        for pi, p in enumerate(pred_comps):
            d = float(np.hypot(g.centroid[0] - p.centroid[0], g.centroid[1] - p.centroid[1]))
            if d <= dist_thresh:
                pairs.append((d, gi, pi))
    pairs.sort()
    used_g, used_p, out = set(), set(), {}
    for _, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        out[gi] = pi
    return out


@dataclass
class ImageRow:
    image_id: str
    iou: float
    detected: int
    targets: int
    false_pixels: int
    intersection: int
    union: int
    pixels: int


@dataclass
class MetricsReport:
    iou: float
    niou: float
    pd: float
    fa: float
    per_image: list = field(default_factory=list)
    dist_thresh: float = 3.0

    @classmethod
    def from_rows(cls, rows, dist_thresh=3.0):
        inter = sum(r.intersection for r in rows)
        union = sum(r.union for r in rows)
        targets = sum(r.targets for r in rows)
        pixels = sum(r.pixels for r in rows)
        return cls(
            iou=float(inter / union) if union else 1.0,
            niou=float(np.mean([r.iou for r in rows])) if rows else 1.0,
            pd=float(sum(r.detected for r in rows) / targets) if targets else 1.0,
            fa=float(sum(r.false_pixels for r in rows) / pixels) if pixels else 0.0,
            per_image=list(rows),
            dist_thresh=dist_thresh,
        )

    def recompute(self) -> "MetricsReport":
        return MetricsReport.from_rows(self.per_image, self.dist_thresh)

    def to_dict(self):
        d = asdict(self)
        d["fa_1e-6"] = self.fa * 1e6
        return d

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d.pop("fa_1e-6", None)
        d["per_image"] = [ImageRow(**r) for r in d["per_image"]]
        return cls(**d)


def image_row(pred, gt, image_id="0", dist_thresh=3.0) -> ImageRow:
    p, g = as_mask(pred), as_mask(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and truth {g.shape} differ")
    pc, gc = connected_components(p), connected_components(g)
    matched = match_components(pc, gc, dist_thresh)
    hit = set(matched.values())
    false_px = sum(c.size for i, c in enumerate(pc) if i not in hit)
    inter, union = int(np.sum(p & g)), int(np.sum(p | g))
    return ImageRow(str(image_id), pixel_iou(p, g), len(matched), len(gc), int(false_px), inter, union, int(p.size))


def dataset_metrics(preds, gts, dist_thresh=3.0, ids=None) -> MetricsReport:
    """Pooled IoU, mean per-image IoU, P_d and F_a over aligned mask lists."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground-truth masks")
    ids = ids or [str(i) for i in range(len(preds))]
    rows = [image_row(p, g, i, dist_thresh) for p, g, i in zip(preds, gts, ids)]
    return MetricsReport.from_rows(rows, dist_thresh)
