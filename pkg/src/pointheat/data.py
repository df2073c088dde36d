"""Synthetic infrared scenes, dataset layout and binary file formats.

Layout of a dataset directory::

    root/images/<id>.pgm      16-bit P5 grayscale
    root/masks/<id>.pgm       8-bit P5, 0 / 255 (optional)
    root/points.csv           image_id,x,y,target_id
    root/splits.csv           image_id,split
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import GenerationError, IngestError
from .field import PointAnnotation

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    n_targets: tuple = (1, 3)
    amplitude: tuple = (0.2, 0.9)
    sigma: tuple = (1.0, 4.0)
    clutter: float = 0.08
    clutter_scale: float = 6.0
    background: float = 0.25
    noise: float = 0.01
    coarse: bool = False
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.amplitude
        if not 0.2 <= lo <= hi <= 0.9:
            raise ValueError(f"amplitude range {self.amplitude} outside [0.2, 0.9]")
        lo, hi = self.sigma
        if not 1.0 <= lo <= hi <= 4.0:
            raise ValueError(f"sigma range {self.sigma} outside [1, 4]")
        if self.n_targets[0] < 0 or self.n_targets[0] > self.n_targets[1]:
            raise ValueError(f"bad target count range {self.n_targets}")
        if self.size < 8:
            raise ValueError("size must be >= 8")


@dataclass(frozen=True)
class Target:
    cx: float
    cy: float
    amplitude: float
    sigma_x: float
    sigma_y: float
    angle: float

    def render(self, shape) -> np.ndarray:
        h, w = shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = xs - self.cx, ys - self.cy
        a = (c * dx + s * dy) / self.sigma_x
        b = (-s * dx + c * dy) / self.sigma_y
        return self.amplitude * np.exp(-0.5 * (a * a + b * b))

    def half_max_area(self) -> float:
        return math.pi * 2.0 * math.log(2.0) * self.sigma_x * self.sigma_y


@dataclass
class Scene:
    image: np.ndarray
    mask: np.ndarray
    points: list
    targets: list = field(default_factory=list)


def quantize16(image):
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0) / 65535.0


def _smooth_noise(rng, shape, scale):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="reflect")
    sd = n.std()
    return n / sd if sd > 0 else n


def synth_scene(spec: SceneSpec) -> Scene:
    """Render ``clip(clutter + targets + noise)`` with exact half-max truth."""
    from .annotator import coarse_point

    rng = np.random.default_rng(spec.seed)
    shape = (spec.size, spec.size)
    n = int(rng.integers(spec.n_targets[0], spec.n_targets[1] + 1))
    margin = 4
    targets, masks = [], []
    for _ in range(n):
        for _attempt in range(100):
            t = Target(
                cx=float(rng.uniform(margin, spec.size - 1 - margin)),
                cy=float(rng.uniform(margin, spec.size - 1 - margin)),
                amplitude=float(rng.uniform(*spec.amplitude)),
                sigma_x=float(rng.uniform(*spec.sigma)),
                sigma_y=float(rng.uniform(*spec.sigma)),
                angle=float(rng.uniform(0.0, math.pi)),
            )
            m = t.render(shape) >= 0.5 * t.amplitude
            if not m.any():
                continue
            if all((m & o).sum() <= 0.5 * min(m.sum(), o.sum()) for o in masks):
                break
        else:
            raise GenerationError(f"could not place target {len(targets)} after 100 attempts")
        targets.append(t)
        masks.append(m)

    clutter = spec.background + spec.clutter * _smooth_noise(rng, shape, spec.clutter_scale)
    signal = np.zeros(shape)
    for t in targets:
        signal += t.render(shape)
    noise = spec.noise * rng.standard_normal(shape)
    image = quantize16(clutter + signal + noise)

    gt = np.zeros(shape, dtype=bool)
    points = []
    for i, (t, m) in enumerate(zip(targets, masks)):
        gt |= m
        p = PointAnnotation(int(round(t.cx)), int(round(t.cy)), i)
        if spec.coarse:
            p = coarse_point(p, rng, m)
        points.append(p)
    return Scene(image, gt, points, targets)


def scene_seed(seed, index):
    """Per-scene seed derived from a base seed and the scene index."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def synth_dataset(spec: SceneSpec, count: int):
    return [synth_scene(_replace_seed(spec, scene_seed(spec.seed, i))) for i in range(count)]


def _replace_seed(spec, seed):
    from dataclasses import replace

    return replace(spec, seed=seed)


# ---------------------------------------------------------------- PGM

def write_pgm(path, array, bits=16):
    """Write a P5 PGM; floats in [0, 1] are scaled, integers/bools are stored as is."""
    a = np.asarray(array)
    maxval = 65535 if bits == 16 else 255
    if a.dtype == bool:
        q = a.astype(np.int64) * maxval
    elif np.issubdtype(a.dtype, np.floating):
        q = np.round(np.clip(a, 0.0, 1.0) * maxval).astype(np.int64)
    else:
        q = a.astype(np.int64)
    h, w = q.shape
    dtype = ">u2" if bits == 16 else "u1"
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(q.astype(dtype).tobytes())


def read_pgm(path, raw=False):
    """Read a P5 PGM; returns floats in [0, 1] unless ``raw``."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise IngestError(f"{path}: bad magic {data[:2]!r}, expected P5")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise IngestError(f"{path}: malformed header") from None
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < nbytes:
        raise IngestError(f"{path}: expected {nbytes} pixel bytes, found {len(data) - pos}")
    q = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    if raw:
        return q.astype(np.int64)
    return q.astype(np.float64) / maxval


def write_mask(path, mask):
    write_pgm(path, np.asarray(mask, dtype=bool), bits=8)


def read_mask(path):
    return read_pgm(path, raw=True) > 0


# ---------------------------------------------------------------- SMSK / DCKP

def write_smsk(path, values):
    v = np.asarray(values, dtype="<f4")
    h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(b"SMSK" + struct.pack("<II", w, h) + v.tobytes())


def read_smsk(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"SMSK":
        raise IngestError(f"{path}: bad magic {data[:4]!r}, expected SMSK")
    if len(data) < 12:
        raise IngestError(f"{path}: truncated header")
    w, h = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * w * h:
        raise IngestError(f"{path}: expected {4 * w * h} value bytes, found {len(data) - 12}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


def write_checkpoint(path, params, m=None, v=None, step=0):
    """DCKP: magic, u32 count, f64 params, f64 first moments, f64 second moments, u64 step."""
    params = np.asarray(params, dtype="<f8")
    n = params.size
    m = np.zeros(n) if m is None else m
    v = np.zeros(n) if v is None else v
    with open(path, "wb") as fh:
        fh.write(b"DCKP" + struct.pack("<I", n))
        for a in (params, m, v):
            fh.write(np.asarray(a, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", int(step)))


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != b"DCKP":
        raise IngestError(f"{path}: bad magic {data[:4]!r}, expected DCKP")
    (n,) = struct.unpack("<I", data[4:8])
    if len(data) != 8 + 24 * n + 8:
        raise IngestError(f"{path}: size does not match {n} parameters")
    arrs = [np.frombuffer(data, dtype="<f8", count=n, offset=8 + 8 * n * k).astype(np.float64) for k in range(3)]
    (step,) = struct.unpack("<Q", data[8 + 24 * n:])
    return arrs[0], arrs[1], arrs[2], int(step)


# ---------------------------------------------------------------- dataset dirs

@dataclass(frozen=True)
class DatasetEntry:
    image_id: str
    image_path: Path
    points: tuple
    mask_path: Path | None
    split: str | None = None


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    entries: tuple
    split: str | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def split_622(count, seed=0):
    """Assign split tags in 6:2:2 proportion with a seeded shuffle."""
    order = np.random.default_rng(seed).permutation(count)
    n_train, n_val = int(round(0.6 * count)), int(round(0.2 * count))
    tags = [None] * count
    for rank, i in enumerate(order):
        tags[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return tags


def write_dataset(root, scenes, ids=None, splits=None):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    ids = ids or [f"{i:05d}" for i in range(len(scenes))]
    with open(root / "points.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id", "x", "y", "target_id"])
        for sid, sc in zip(ids, scenes):
            write_pgm(root / "images" / f"{sid}.pgm", sc.image, bits=16)
            if sc.mask is not None:
                write_mask(root / "masks" / f"{sid}.pgm", sc.mask)
            for p in sc.points:
                wr.writerow([sid, p.x, p.y, p.target_id])
    if splits is not None:
        with open(root / "splits.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["image_id", "split"])
            for sid, tag in zip(ids, splits):
                wr.writerow([sid, tag])
    return ids


def _pgm_shape(path):
    data = Path(path).read_bytes()[:64]
    if data[:2] != b"P5":
        raise IngestError(f"{path}: bad magic {data[:2]!r}, expected P5")
    tokens = data[2:].split()
    try:
        return int(tokens[1]), int(tokens[0])
    except (IndexError, ValueError):
        raise IngestError(f"{path}: malformed header") from None


def load_dataset(root, split=None) -> DatasetIndex:
    """Validate a dataset directory and index it, optionally for one split."""
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise IngestError(f"{root}: missing images/ directory")
    ids = sorted(p.stem for p in img_dir.glob("*.pgm"))
    shapes = {sid: _pgm_shape(img_dir / f"{sid}.pgm") for sid in ids}

    points = {sid: [] for sid in ids}
    pfile = root / "points.csv"
    if pfile.exists():
        with open(pfile, newline="") as fh:
            rows = list(csv.reader(fh))
        if rows and rows[0] != ["image_id", "x", "y", "target_id"]:
            raise IngestError(f"{pfile}:1: bad header {rows[0]}")
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != 4:
                raise IngestError(f"{pfile}:{lineno}: expected 4 fields, got {len(row)}")
            sid = row[0]
            if sid not in shapes:
                raise IngestError(f"{pfile}:{lineno}: unknown image {sid!r}")
            try:
                x, y, tid = int(row[1]), int(row[2]), int(row[3])
            except ValueError:
                raise IngestError(f"{pfile}:{lineno}: non-integer field in {row}") from None
            p = PointAnnotation(x, y, tid)
            if not p.inside(shapes[sid]):
                h, w = shapes[sid]
                raise IngestError(f"{pfile}:{lineno}: point ({x}, {y}) outside {w}x{h} image {sid!r}")
            points[sid].append(p)

    tags = {}
    sfile = root / "splits.csv"
    if sfile.exists():
        with open(sfile, newline="") as fh:
            rows = list(csv.reader(fh))
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != 2 or row[1] not in SPLITS:
                raise IngestError(f"{sfile}:{lineno}: bad split row {row}")
            if row[0] not in shapes:
                raise IngestError(f"{sfile}:{lineno}: unknown image {row[0]!r}")
            tags[row[0]] = row[1]

    entries = []
    for sid in ids:
        tag = tags.get(sid)
        if split is not None and tags and tag != split:
            continue
        mpath = root / "masks" / f"{sid}.pgm"
        if mpath.exists():
            if _pgm_shape(mpath) != shapes[sid]:
                raise IngestError(f"{mpath}: mask shape differs from image")
        else:
            mpath = None
        entries.append(DatasetEntry(sid, img_dir / f"{sid}.pgm", tuple(points[sid]), mpath, tag))
    return DatasetIndex(root, tuple(entries), split)
