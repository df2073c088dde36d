"""SLIC superpixels on single-channel images."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidParam
from .field import PointAnnotation, as_field, gradient_magnitude

# Intensity enters the clustering on a 0..100 lightness scale, the range
# the usual SLIC compactness values (1..40, default 10) are tuned for.
LIGHTNESS_SCALE = 100.0


@dataclass(frozen=True)
class SuperpixelLabels:
    labels: np.ndarray  # (H, W) int64, values in [0, count)

    @property
    def count(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def shape(self):
        return self.labels.shape


def _grid_seeds(h, w, cell):
    """Exact cell centres in pixel-index coordinates (may fall between pixels)."""
    ny, nx = max(1, round(h / cell)), max(1, round(w / cell))
    ys = (np.arange(ny) + 0.5) * h / ny - 0.5
    xs = (np.arange(nx) + 0.5) * w / nx - 0.5
    return [(y, x) for y in ys for x in xs]


def _perturb(seeds, grad):
    """Move each seed to the lowest-gradient pixel of the 3x3 window around
    its nearest pixel. A seed stays where it is (possibly off-grid) unless
    some pixel is strictly lower; scan order breaks ties between pixels."""
    h, w = grad.shape
    out = []
    for fy, fx in seeds:
        y, x = min(int(np.floor(fy + 0.5)), h - 1), min(int(np.floor(fx + 0.5)), w - 1)
        best, by, bx = grad[y, x], fy, fx
        for yy in range(max(0, y - 1), min(h, y + 2)):
            for xx in range(max(0, x - 1), min(w, x + 2)):
                if grad[yy, xx] < best:
                    best, by, bx = grad[yy, xx], float(yy), float(xx)
        out.append((by, bx))
    return out


@numba.njit(cache=True)
def _kmeans(feat, centers, cell, spatial, iters):
    h, w = feat.shape
    k = centers.shape[0]
    labels = np.full((h, w), -1, np.int64)
    dist = np.empty((h, w))
    sums = np.empty((k, 4))
    for _ in range(iters):
        dist[:] = np.inf
        labels[:] = -1
        for c in range(k):  # ascending: strict < keeps the lower index on ties
            ci, cx, cy = centers[c, 0], centers[c, 1], centers[c, 2]
            r0 = max(0, int(np.floor(cy - cell)))
            r1 = min(h, int(np.ceil(cy + cell)) + 1)
            c0 = max(0, int(np.floor(cx - cell)))
            c1 = min(w, int(np.ceil(cx + cell)) + 1)
            for y in range(r0, r1):
                dy = y - cy
                for x in range(c0, c1):
                    dx = x - cx
                    di = feat[y, x] - ci
                    d = di * di + spatial * (dx * dx + dy * dy)
                    if d < dist[y, x]:
                        dist[y, x] = d
                        labels[y, x] = c
        sums[:] = 0.0
        for y in range(h):
            for x in range(w):
                c = labels[y, x]
                if c >= 0:
                    sums[c, 0] += feat[y, x]
                    sums[c, 1] += x
                    sums[c, 2] += y
                    sums[c, 3] += 1.0
        for c in range(k):
            n = sums[c, 3]
            if n > 0:
                centers[c, 0] = sums[c, 0] / n
                centers[c, 1] = sums[c, 1] / n
                centers[c, 2] = sums[c, 2] / n
    return labels


@numba.njit(cache=True)
def _components(lab):
    """4-connected components of equal value, numbered in scan order."""
    h, w = lab.shape
    comp = np.full(h * w, -1, np.int64)
    queue = np.empty(h * w, np.int64)
    starts = np.empty(h * w + 1, np.int64)
    values = np.empty(h * w, np.int64)
    flat = lab.ravel()
    n, tail = 0, 0
    for s in range(h * w):
        if comp[s] >= 0:
            continue
        starts[n] = tail
        values[n] = flat[s]
        comp[s] = n
        queue[tail] = s
        tail += 1
        head = starts[n]
        while head < tail:
            p = queue[head]
            head += 1
            y, x = p // w, p % w
            for q in (p - w if y > 0 else -1, p + w if y < h - 1 else -1,
                      p - 1 if x > 0 else -1, p + 1 if x < w - 1 else -1):
                if q >= 0 and comp[q] < 0 and flat[q] == flat[p]:
                    comp[q] = n
                    queue[tail] = q
                    tail += 1
        n += 1
    starts[n] = tail
    return comp, queue, starts[: n + 1], values[:n]


@numba.njit(cache=True)
def _enforce_connectivity(lab, nlabels):
    h, w = lab.shape
    comp, queue, starts, values = _components(lab)
    ncomp = values.shape[0]
    sizes = starts[1:] - starts[:-1]
    main = np.full(nlabels, -1, np.int64)
    for c in range(ncomp):  # first largest component of a label wins ties
        v = values[c]
        if v >= 0 and (main[v] < 0 or sizes[c] > sizes[main[v]]):
            main[v] = c
    settled = np.zeros(ncomp, np.bool_)
    label_size = np.zeros(nlabels, np.int64)
    for v in range(nlabels):
        if main[v] >= 0:
            settled[main[v]] = True
            label_size[v] = sizes[main[v]]
    final = values.copy()
    if not settled.any():
        big = 0
        for c in range(ncomp):
            if sizes[c] > sizes[big]:
                big = c
        final[big] = 0
        settled[big] = True
        label_size[0] = sizes[big]

    pending = True
    while pending:
        pending = False
        progress = False
        for c in range(ncomp):  # components are in scan order of their first pixel
            if settled[c]:
                continue
            best = -1
            for i in range(starts[c], starts[c + 1]):
                p = queue[i]
                y, x = p // w, p % w
                for q in (p - w if y > 0 else -1, p + w if y < h - 1 else -1,
                          p - 1 if x > 0 else -1, p + 1 if x < w - 1 else -1):
                    if q < 0:
                        continue
                    d = comp[q]
                    if d == c or not settled[d]:
                        continue
                    v = final[d]
                    if best < 0 or label_size[v] > label_size[best] or (
                            label_size[v] == label_size[best] and v < best):
                        best = v
            if best < 0:
                pending = True
                continue
            final[c] = best
            settled[c] = True
            label_size[best] += sizes[c]
            progress = True
        if pending and not progress:
            raise RuntimeError("superpixel connectivity enforcement made no progress")

    out = np.empty(h * w, np.int64)
    for p in range(h * w):
        out[p] = final[comp[p]]
    # consecutive ids in order of first appearance
    remap = np.full(nlabels, -1, np.int64)
    nxt = 0
    for p in range(h * w):
        v = out[p]
        if remap[v] < 0:
            remap[v] = nxt
            nxt += 1
        out[p] = remap[v]
    return out.reshape(h, w)


def slic(image, cell=16, compactness=10.0, iters=10) -> SuperpixelLabels:
    """Superpixels by local k-means on (lightness, x, y).

    Distance is ``dL^2 + (ds / cell)^2 * compactness^2`` with lightness
    ``100 * intensity``; each centre searches a ``2 * cell`` window and the
    lower centre index wins ties. Non-main fragments of a label (and
    pixels no window reached) are merged into the largest adjacent label,
    so every region ends up 4-connected.
    """
    image = as_field(image, "image")
    h, w = image.shape
    if cell < 4:
        raise InvalidParam(f"cell must be >= 4, got {cell}")
    if cell > min(h, w):
        raise InvalidParam(f"cell {cell} larger than image side {min(h, w)}")
    if not compactness > 0:
        raise InvalidParam("compactness must be > 0")
    if iters < 1:
        raise InvalidParam("iters must be >= 1")

    seeds = _perturb(_grid_seeds(h, w, cell), gradient_magnitude(image))
    feat = np.ascontiguousarray(image * LIGHTNESS_SCALE)
    centers = np.array([[feat[min(int(np.floor(y + 0.5)), h - 1), min(int(np.floor(x + 0.5)), w - 1)], x, y]
                        for y, x in seeds], dtype=np.float64)
    spatial = (compactness / cell) ** 2
    labels = _kmeans(feat, centers, float(cell), spatial, int(iters))
    return SuperpixelLabels(_enforce_connectivity(labels, len(seeds)))


def region_mask(spx: SuperpixelLabels, p: PointAnnotation) -> np.ndarray:
    if not p.inside(spx.shape):
        raise InvalidParam(f"point {p} outside the segmentation")
    return spx.labels == spx.labels[p.y, p.x]
