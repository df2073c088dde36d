"""Single-loop bi-level training: detector weights, sample weights and diffusion parameters.

Per batch, after the outer level activates:

1. a small meta network maps per-sample statistics to loss weights alpha;
2. the alpha hypergradient is taken through a one-step lookahead of the
   detector and pushed into the meta network;
3. the detector steps on the weighted training gradient plus ``beta``
   times the validation gradient.

On theta-period epochs the diffusion parameters are also fitted so that
diffusing the detector output reproduces the pseudo-labels, and the
labels are then regenerated with the new parameters.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .annotator import DEFAULT_THRESHOLD, annotate_dataset, point_label
from .diffusion import (MAX_UNROLL, UNIVERSAL_STEP_BOUND, DiffusionParams, build_edge_weights,
                        diffuse, diffuse_vjp)
from .errors import DivergenceError, InvalidParam, NotReady
from .model import (DetectorState, adam_update, adamw_step, check_finite, loss_and_grads, predict,
                    soft_iou_loss)

N_FEATURES = 4
HIDDEN = 16
KAPPA_MIN = 1e-3
RHO_EPS = 1e-6


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    activation: int = 80
    theta_period: int = 20
    beta: float = 0.5
    lr_omega: float = 1e-3
    lr_phi: float = 1e-3
    lr_theta: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int = 16
    val_batch_size: int = 16
    crop: int = 256
    surrogate_steps: int = 5
    seed: int = 0
    # switches used by the ablation variants
    bilevel: bool = True
    meta_weights: bool = True
    lookahead: bool = True
    update_theta: bool = True
    regenerate_labels: bool = True
    label_mode: str = "diffusion"  # or "point"

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidParam("epochs must be >= 1")
        if not 0 <= self.activation < self.epochs:
            raise InvalidParam(f"activation epoch {self.activation} must lie in [0, {self.epochs})")
        if self.theta_period < 1:
            raise InvalidParam("theta_period must be >= 1")
        if self.beta < 0:
            raise InvalidParam("beta must be >= 0")
        if self.batch_size < 1 or self.val_batch_size < 1:
            raise InvalidParam("batch sizes must be >= 1")
        if not 0 <= self.surrogate_steps <= MAX_UNROLL:
            raise InvalidParam(f"surrogate_steps must lie in [0, {MAX_UNROLL}]")
        if self.label_mode not in ("diffusion", "point"):
            raise InvalidParam(f"unknown label_mode {self.label_mode!r}")

    def with_(self, **changes):
        return replace(self, **changes)


# ---------------------------------------------------------------- meta network

def _meta_shapes():
    return [(HIDDEN, N_FEATURES), (HIDDEN,), (HIDDEN,), (1,)]


META_PARAMS = sum(int(np.prod(s)) for s in _meta_shapes())


def _meta_unpack(params):
    out, i = [], 0
    for s in _meta_shapes():
        n = int(np.prod(s))
        out.append(params[i:i + n].reshape(s))
        i += n
    return out


@dataclass(frozen=True)
class MetaState:
    params: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (META_PARAMS,):
            raise InvalidParam(f"expected {META_PARAMS} meta parameters, got {p.shape}")
        object.__setattr__(self, "params", p)
        for name in ("m", "v"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.zeros(META_PARAMS))

    @classmethod
    def zeros(cls):
        return cls(np.zeros(META_PARAMS))

    @classmethod
    def init(cls, seed=0):
        """Random hidden layer, zero output layer: every raw weight starts at 1."""
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, math.sqrt(2.0 / N_FEATURES), (HIDDEN, N_FEATURES))
        return cls(np.concatenate([w1.ravel(), np.zeros(HIDDEN), np.zeros(HIDDEN), np.zeros(1)]))


def _meta_raw(phi: MetaState, feats):
    w1, b1, w2, b2 = _meta_unpack(phi.params)
    z = feats @ w1.T + b1
    hid = np.where(z > 0, z, 0.1 * z)
    s = hid @ w2 + b2[0]
    raw = 2.0 / (1.0 + np.exp(-s))
    return raw, (z, hid)


def meta_forward(phi: MetaState, feats) -> np.ndarray:
    """Sample weights: ``2 * logistic(net(f))`` rescaled to batch mean 1."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if feats.shape[0] == 0:
        raise InvalidParam("empty batch")
    raw, _ = _meta_raw(phi, feats)
    return raw / raw.mean()


def meta_backward(phi: MetaState, feats, upstream) -> np.ndarray:
    """Gradient wrt the meta parameters of ``sum_i upstream_i * alpha_i``,
    including the Jacobian of the mean normalization."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    h = np.asarray(upstream, dtype=np.float64)
    raw, (z, hid) = _meta_raw(phi, feats)
    n, mean = len(raw), raw.mean()
    d_raw = h / mean - np.dot(h, raw) / (n * mean**2)
    d_s = d_raw * raw * (1.0 - raw / 2.0)  # d(2 sigma(s))/ds = 2 sigma (1 - sigma)
    _, _, w2, _ = _meta_unpack(phi.params)
    g_w2 = hid.T @ d_s
    g_b2 = np.array([d_s.sum()])
    d_z = np.outer(d_s, w2) * np.where(z > 0, 1.0, 0.1)
    g_w1 = d_z.T @ feats
    g_b1 = d_z.sum(axis=0)
    return np.concatenate([g_w1.ravel(), g_b1, g_w2, g_b2])


def meta_step(phi: MetaState, grad, lr) -> MetaState:
    check_finite(grad, where="meta")
    p, m, v, step = adam_update(phi.params, phi.m, phi.v, phi.step, grad, lr)
    return replace(phi, params=p, m=m, v=v, step=step)


def compactness(mask) -> float:
    """``4 pi area / perimeter^2`` with the perimeter counted in pixel faces, clamped to [0, 1]."""
    m = np.asarray(mask, dtype=bool)
    area = m.sum()
    if area == 0:
        return 0.0
    p = np.pad(m, 1)
    perim = np.sum(p[1:, :] != p[:-1, :]) + np.sum(p[:, 1:] != p[:, :-1])
    return float(min(1.0, 4.0 * math.pi * area / perim**2))


def label_stats(label, threshold=DEFAULT_THRESHOLD):
    """(area fraction, compactness) of a soft label."""
    top = label.max()
    if top <= 0:
        return 0.0, 0.0
    return float(label.sum() / label.size), compactness(label >= threshold * top)


def sample_features(losses, stats, progress) -> np.ndarray:
    """Rows of (training loss, label area fraction, label compactness, progress)."""
    stats = np.asarray(stats, dtype=np.float64).reshape(-1, 2)
    f = np.column_stack([np.asarray(losses, dtype=np.float64), stats, np.full(len(stats), float(progress))])
    return f


# ---------------------------------------------------------------- inner level

def combined_gradient(train_grads, alpha, beta=0.0, val_grad=None):
    """``sum_i alpha_i g_i / n + beta g_val``."""
    g = np.asarray(alpha, dtype=np.float64) @ train_grads / len(alpha)
    if beta and val_grad is not None:
        g = g + beta * val_grad
    return g


def val_gradient(state: DetectorState, images, labels):
    """Mean soft-IoU loss of a validation batch and its parameter gradient."""
    loss, g, _ = loss_and_grads(state, images, labels, per_sample=False)
    return float(np.mean(loss)), g / len(images)


def inner_step(state: DetectorState, images, labels, alpha, beta, val_images, val_labels,
               lr=1e-3, weight_decay=1e-4) -> DetectorState:
    """One optimizer step on the weighted training gradient plus ``beta`` times the validation gradient."""
    _, grads, _ = loss_and_grads(state, images, labels)
    g_val = None
    if beta:
        _, g_val = val_gradient(state, val_images, val_labels)
    g = combined_gradient(grads, alpha, beta, g_val)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite inner gradient", {"step": state.step})
    return adamw_step(state, g, lr, weight_decay)


def alpha_hypergradient(state: DetectorState, train_grads, alpha, val_images, val_labels,
                        lr_omega, lookahead=True):
    """First-order one-step hypergradient ``h_i = -lr <g_i, g_val(w+)>``.

    ``w+ = w - lr * sum_i alpha_i g_i``. Returns ``(h, validation loss at w+)``.
    """
    if lookahead and lr_omega:
        ahead = replace(state, params=state.params - lr_omega * (np.asarray(alpha) @ train_grads))
    else:
        ahead = state
    loss, g_val = val_gradient(ahead, val_images, val_labels)
    h = -lr_omega * (train_grads @ g_val)
    if not np.all(np.isfinite(h)):
        raise DivergenceError("non-finite hypergradient", {"step": state.step})
    return h, loss


# ---------------------------------------------------------------- diffusion surrogate

@dataclass(frozen=True)
class ThetaState:
    """Diffusion parameters with Adam moments over (kappa, log tau, logit rho)."""

    params: DiffusionParams
    m: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    step: int = 0


def _logit(r):
    r = min(max(r, RHO_EPS), 1.0 - RHO_EPS)
    return math.log(r / (1.0 - r))


def surrogate_forward(y, image, params: DiffusionParams, steps=5):
    """``rho * diffuse(y) + (1 - rho) * y`` with the image's edge weights."""
    y = np.asarray(y, dtype=np.float64)
    w = build_edge_weights(image, params.kappa)
    d = diffuse(y, w, params.tau, steps)
    return y + params.rho * (d - y)  # exact at both endpoints


def surrogate_vjp(y, image, params: DiffusionParams, upstream, steps=5):
    """Gradient of ``<upstream, surrogate>`` wrt (kappa, tau, rho)."""
    y = np.asarray(y, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    w = build_edge_weights(image, params.kappa)
    d = diffuse(y, w, params.tau, steps)
    _, gk, gt = diffuse_vjp(y, image, params.with_(steps=steps), params.rho * g)
    return np.array([gk, gt, float(np.sum(g * (d - y)))])


def alignment_loss(theta: DiffusionParams, preds, labels, images, steps=5):
    """Mean over the batch of ``L(M(y), y_hat) + L(M(y), y)`` and its (kappa, tau, rho) gradient."""
    total, grad = 0.0, np.zeros(3)
    for y, lab, img in zip(preds, labels, images):
        m = surrogate_forward(y, img, theta, steps)
        l1, g1 = soft_iou_loss(m, lab)
        l2, g2 = soft_iou_loss(m, y)
        total += l1 + l2
        grad += surrogate_vjp(y, img, theta, g1 + g2, steps)
    n = len(preds)
    return total / n, grad / n


def theta_step(theta: ThetaState, preds, labels, images, lr=1e-2, steps=5):
    """One Adam step on the alignment loss, then projection onto the valid set.

    Returns ``(new theta, loss before the step)``.
    """
    if len(preds) == 0:
        raise InvalidParam("theta_step needs a nonempty batch")
    p = theta.params
    loss, g = alignment_loss(p, preds, labels, images, steps)
    # chain to the unconstrained coordinates (kappa, log tau, logit rho)
    g_u = g * np.array([1.0, p.tau, p.rho * (1.0 - p.rho)])
    check_finite(g_u, where="theta")
    u = np.array([p.kappa, math.log(p.tau), _logit(p.rho)])
    u, m, v, step = adam_update(u, theta.m, theta.v, theta.step, g_u, lr)
    kappa = max(float(u[0]), KAPPA_MIN)
    tau = min(math.exp(float(u[1])), UNIVERSAL_STEP_BOUND)
    rho = min(max(1.0 / (1.0 + math.exp(-float(u[2]))), 0.0), 1.0)
    new = ThetaState(p.with_(kappa=kappa, tau=tau, rho=rho), m, v, step)
    return new, loss


# ---------------------------------------------------------------- schedule

@dataclass
class TrainResult:
    detector: DetectorState
    meta: MetaState
    theta: DiffusionParams
    history: list
    sample_ids: list


def _crop(rng, sample, size):
    h, w = sample.image.shape
    if h <= size and w <= size:
        return sample.image, sample.label
    r = int(rng.integers(0, max(1, h - size + 1)))
    c = int(rng.integers(0, max(1, w - size + 1)))
    return sample.image[r:r + size, c:c + size], sample.label[r:r + size, c:c + size]


def _relabel(samples, cfg: TrainConfig, theta: DiffusionParams, workers=None):
    if cfg.label_mode == "point":
        for s in samples:
            s.label = point_label(s.image.shape, s.points)
    else:
        annotate_dataset(samples, theta, workers=workers)
    return [label_stats(s.label) for s in samples]


def evaluate_soft_iou(state: DetectorState, images, masks) -> float:
    """Mean soft IoU (``1 - loss``) of the detector against reference masks."""
    preds = predict(state, np.asarray(images))
    loss, _ = soft_iou_loss(preds, np.asarray(masks, dtype=np.float64))
    return float(1.0 - np.mean(loss))


def train(config: TrainConfig, dataset, val_set, theta0: DiffusionParams = None,
          log_path=None, checkpoint_path=None, workers=None) -> TrainResult:
    """Run the full schedule; deterministic given ``config.seed``.

    Epochs before ``config.activation`` are plain training (alpha = 1,
    beta = 0). ``dataset`` and ``val_set`` are lists of ``Sample``; their
    ``label`` fields are (re)generated here, validation labels included.
    """
    cfg = config
    samples, val = list(dataset), list(val_set)
    if not samples or not val:
        raise InvalidParam("train needs nonempty training and validation sets")
    theta = ThetaState(theta0 or DiffusionParams())
    stats = _relabel(samples, cfg, theta.params, workers)
    _relabel(val, cfg, theta.params, workers)

    det = DetectorState.init(cfg.seed)
    phi = MetaState.init(cfg.seed + 1)
    rng_order = np.random.default_rng([cfg.seed, 0])
    rng_val = np.random.default_rng([cfg.seed, 1])
    rng_crop = np.random.default_rng([cfg.seed, 2])
    n = len(samples)
    ids = [s.sample_id for s in samples]
    buckets = sorted({s.bucket for s in samples})
    val_images = np.stack([s.image for s in val])
    history = []
    logf = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            active = cfg.bilevel and epoch >= cfg.activation
            theta_epoch = (active and cfg.update_theta and cfg.label_mode == "diffusion"
                           and epoch % cfg.theta_period == 0)
            val_labels = np.stack([s.label for s in val])
            order = rng_order.permutation(n)
            alpha_epoch = np.ones(n)
            losses = np.zeros(n)
            theta_losses = []
            for b0 in range(0, n, cfg.batch_size):
                idx = order[b0:b0 + cfg.batch_size]
                crops = [_crop(rng_crop, samples[i], cfg.crop) for i in idx]
                x = np.stack([c[0] for c in crops])
                t = np.stack([c[1] for c in crops])
                loss, grads, y = loss_and_grads(det, x, t)
                losses[idx] = loss
                if not np.all(np.isfinite(grads)):
                    raise DivergenceError("non-finite training gradient",
                                          {"epoch": epoch, "samples": [ids[i] for i in idx]})
                alpha = np.ones(len(idx))
                g_val = None
                if active:
                    vsel = rng_val.choice(len(val), size=min(cfg.val_batch_size, len(val)), replace=False)
                    vx, vt = val_images[vsel], val_labels[vsel]
                    if cfg.meta_weights:
                        feats = sample_features(loss, [stats[i] for i in idx], epoch / cfg.epochs)
                        alpha = meta_forward(phi, feats)
                        h, _ = alpha_hypergradient(det, grads, alpha, vx, vt, cfg.lr_omega, cfg.lookahead)
                        phi = meta_step(phi, meta_backward(phi, feats, h), cfg.lr_phi)
                        alpha = meta_forward(phi, feats)
                    if cfg.beta:
                        _, g_val = val_gradient(det, vx, vt)
                    if theta_epoch:
                        new_theta, tl = theta_step(theta, y, t, x, cfg.lr_theta, cfg.surrogate_steps)
                        theta = new_theta
                        theta_losses.append(tl)
                alpha_epoch[idx] = alpha
                g = combined_gradient(grads, alpha, cfg.beta if active else 0.0, g_val)
                if not np.all(np.isfinite(g)):
                    raise DivergenceError("non-finite inner gradient", {"epoch": epoch, "step": det.step})
                det = adamw_step(det, g, cfg.lr_omega, cfg.weight_decay)

            if theta_epoch and cfg.regenerate_labels:
                stats = _relabel(samples, cfg, theta.params, workers)
                _relabel(val, cfg, theta.params, workers)

            val_loss = 1.0 - evaluate_soft_iou(det, val_images, np.stack([s.label for s in val]))
            rec = {
                "epoch": epoch,
                "active": bool(active),
                "train_loss": float(losses.mean()),
                "val_loss": float(val_loss),
                "alpha_by_bucket": {b: float(np.mean([a for a, s in zip(alpha_epoch, samples) if s.bucket == b]))
                                    for b in buckets},
                "kappa": theta.params.kappa,
                "tau": theta.params.tau,
                "rho": theta.params.rho,
                "alpha": alpha_epoch.tolist(),
            }
            if theta_losses:
                rec["theta_loss"] = float(np.mean(theta_losses))
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
    except DivergenceError as exc:
        exc.diagnostics["last_finite"] = det
        if checkpoint_path:
            from .data import write_checkpoint

            write_checkpoint(checkpoint_path, det.params, det.m, det.v, det.step)
            exc.diagnostics["checkpoint"] = str(checkpoint_path)
        raise
    finally:
        if logf:
            logf.close()
    return TrainResult(det, phi, theta.params, history, ids)


def rank_samples_by_alpha(history, sample_ids=None):
    """Samples by descending time-averaged alpha over post-activation epochs.

    Returns ``[(sample_id, mean alpha), ...]``; ties keep id order.
    """
    if isinstance(history, TrainResult):
        sample_ids = history.sample_ids if sample_ids is None else sample_ids
        history = history.history
    active = [np.asarray(rec["alpha"]) for rec in history if rec.get("active")]
    if not active:
        raise NotReady("no post-activation epochs in the history")
    mean = np.mean(active, axis=0)
    ids = list(range(len(mean))) if sample_ids is None else list(sample_ids)
    order = sorted(range(len(mean)), key=lambda i: (-mean[i], i))
    return [(ids[i], float(mean[i])) for i in order]


def config_to_json(cfg: TrainConfig) -> dict:
    return asdict(cfg)
