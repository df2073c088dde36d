"""A tiny fully convolutional detector with a hand-written backward pass.

Three 3x3 same-padded convolutions, channels 1 -> 8 -> 8 -> 1, leaky
rectifiers in between and a logistic output. Images go in as ``(H, W)``
or batches ``(B, H, W)``.

The flat parameter vector stores, per layer, the kernel in
``(c_out, ky, kx, c_in)`` order followed by the bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, ShapeError, TapeError

CHANNELS = (1, 8, 8, 1)
LEAK = 0.1
EPS_IOU = 1e-7


def _layer_shapes():
    return [((co, 3, 3, ci), (co,)) for ci, co in zip(CHANNELS[:-1], CHANNELS[1:])]


def param_count() -> int:
    return sum(int(np.prod(k)) + int(np.prod(b)) for k, b in _layer_shapes())


N_PARAMS = param_count()


def unpack(params):
    """Split the flat vector into ``[(kernel, bias), ...]`` views."""
    out, i = [], 0
    for kshape, bshape in _layer_shapes():
        nk, nb = int(np.prod(kshape)), int(np.prod(bshape))
        out.append((params[i:i + nk].reshape(kshape), params[i + nk:i + nk + nb]))
        i += nk + nb
    return out


@dataclass(frozen=True)
class DetectorState:
    params: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (N_PARAMS,):
            raise ShapeError(f"expected {N_PARAMS} parameters, got {p.shape}")
        object.__setattr__(self, "params", p)
        for name in ("m", "v"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.zeros(N_PARAMS))

    @classmethod
    def zeros(cls):
        return cls(np.zeros(N_PARAMS))

    @classmethod
    def init(cls, seed=0):
        """He-style initialization from a seeded generator, zero biases."""
        rng = np.random.default_rng(seed)
        parts = []
        for kshape, bshape in _layer_shapes():
            fan_in = kshape[1] * kshape[2] * kshape[3]
            std = np.sqrt(2.0 / ((1 + LEAK**2) * fan_in))
            parts += [rng.normal(0.0, std, int(np.prod(kshape))), np.zeros(bshape)]
        return cls(np.concatenate(parts))


def _im2col(x):
    """``(B, C, H, W)`` -> ``(B, 9C, H*W)`` with zero padding; row ``(3i + j) C + c``."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, 9, c, h, w))
    for i in range(3):
        for j in range(3):
            cols[:, 3 * i + j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, 9 * c, h * w)


def _col2im(dcols, c, h, w):
    b = dcols.shape[0]
    d = dcols.reshape(b, 9, c, h, w)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += d[:, 3 * i + j]
    return dxp[:, :, 1:-1, 1:-1]


LOGIT_CLIP = 30.0


def sigmoid(z):
    # the clamp keeps outputs strictly inside (0, 1) in float64; beyond it
    # the true value is within 1e-13 of the limit anyway
    return 0.5 * (1.0 + np.tanh(0.5 * np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)))


@dataclass
class Tape:
    state: DetectorState
    checksum: int
    squeeze: bool
    cols: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    out: np.ndarray = None


def _checksum(params):
    return hash(params.tobytes())


def detector_forward(state: DetectorState, image):
    """Predict per-pixel target probability; returns ``(prediction, tape)``."""
    x = np.asarray(image, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"expected (H, W) or (B, H, W) input, got {x.shape}")
    b, h, w = x.shape
    tape = Tape(state, _checksum(state.params), squeeze)
    a = x[:, None]
    layers = unpack(state.params)
    for li, (k, bias) in enumerate(layers):
        cols = _im2col(a)
        z = np.matmul(k.reshape(k.shape[0], -1), cols) + bias[:, None]  # (B, O, HW)
        tape.cols.append(cols)
        tape.pre.append(z)
        a = np.where(z > 0, z, LEAK * z) if li < len(layers) - 1 else sigmoid(z)
        a = a.reshape(b, -1, h, w)
    y = a[:, 0]
    tape.out = y
    return (y[0] if squeeze else y), tape


def detector_backward(tape: Tape, upstream, per_sample=False):
    """Parameter gradient of ``<upstream, prediction>``.

    With ``per_sample`` a batch tape yields one gradient row per image;
    otherwise the rows are summed.
    """
    if _checksum(tape.state.params) != tape.checksum:
        raise TapeError("detector parameters changed since the forward pass")
    g = np.asarray(upstream, dtype=np.float64)
    if tape.squeeze:
        g = g[None]
    if g.shape != tape.out.shape:
        raise TapeError(f"upstream shape {g.shape[1:] if tape.squeeze else g.shape} does not match the taped prediction")
    y = tape.out
    b, h, w = y.shape
    dz = (g * y * (1.0 - y)).reshape(b, 1, h * w)
    layers = unpack(tape.state.params)
    grads = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        k, _ = layers[li]
        kmat = k.reshape(k.shape[0], -1)
        gk = np.matmul(dz, tape.cols[li].transpose(0, 2, 1))  # (B, O, 9C)
        grads[li] = (gk.reshape(b, -1), dz.sum(axis=2))
        if li > 0:
            dcols = np.matmul(kmat.T, dz)
            da = _col2im(dcols, k.shape[3], h, w).reshape(b, -1, h * w)
            dz = da * np.where(tape.pre[li - 1] > 0, 1.0, LEAK)
    rows = np.concatenate([np.concatenate([gk, gb], axis=1) for gk, gb in grads], axis=1)
    return rows if per_sample else rows.sum(axis=0)


def soft_iou_loss(pred, target, eps=EPS_IOU):
    """``1 - sum(p t) / (sum p + sum t - sum(p t) + eps)`` and its gradient.

    Works on a single field or a batch; a batch gets one loss per image.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    axes = (-2, -1)
    inter = (p * t).sum(axis=axes)
    union = p.sum(axis=axes) + t.sum(axis=axes) - inter + eps
    loss = 1.0 - inter / union
    i_ = np.expand_dims(inter, axes)
    u_ = np.expand_dims(union, axes)
    grad = -(t * u_ - i_ * (1.0 - t)) / u_**2
    if p.ndim == 2:
        return float(loss), grad
    return loss, grad


def loss_and_grads(state: DetectorState, images, targets, per_sample=True):
    """Soft-IoU losses of a batch and the parameter gradient of each."""
    y, tape = detector_forward(state, images)
    loss, gpred = soft_iou_loss(y, targets)
    return loss, detector_backward(tape, gpred, per_sample=per_sample), y


def check_finite(grad, **diag):
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient", dict(diag, bad=int(np.sum(~np.isfinite(grad)))))


def adam_update(params, m, v, step, grad, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
    """One Adam step with decoupled weight decay; returns new arrays."""
    b1, b2 = betas
    step = step + 1
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1**step)
    vhat = v / (1.0 - b2**step)
    params = params - lr * weight_decay * params - lr * mhat / (np.sqrt(vhat) + eps)
    return params, m, v, step


def adamw_step(state: DetectorState, grad, lr=1e-3, weight_decay=1e-4) -> DetectorState:
    check_finite(grad, step=state.step)
    p, m, v, step = adam_update(state.params, state.m, state.v, state.step, grad, lr, weight_decay)
    return replace(state, params=p, m=m, v=v, step=step)


def predict(state: DetectorState, images, batch=16):
    """Forward pass in chunks, no tape kept."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        return detector_forward(state, x)[0]
    return np.concatenate([detector_forward(state, x[i:i + batch])[0] for i in range(0, len(x), batch)])
