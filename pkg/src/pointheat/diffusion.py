"""Edge-stopping heat diffusion on the pixel grid.

Conductances live on the faces between 4-neighbours, so the discrete
Laplacian is symmetric and the explicit update conserves mass exactly
(up to rounding) under zero-flux boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParam, ShapeError, UnstableStep
from .field import PointAnnotation, as_field

# Any conductances in (0, 1] on a 2D grid give node degree <= 4, so this
# step bound is stable for every image and every kappa.
UNIVERSAL_STEP_BOUND = 0.25
MAX_UNROLL = 64


@dataclass(frozen=True)
class EdgeWeights:
    """Face conductances: ``horizontal[r, c]`` joins (c, r)-(c+1, r),
    ``vertical[r, c]`` joins (c, r)-(c, r+1)."""

    horizontal: np.ndarray  # (H, W-1)
    vertical: np.ndarray  # (H-1, W)

    @property
    def shape(self):
        return self.vertical.shape[0] + 1, self.horizontal.shape[1] + 1

    def crop(self, r0, r1, c0, c1) -> "EdgeWeights":
        return EdgeWeights(self.horizontal[r0:r1, c0:c1 - 1], self.vertical[r0:r1 - 1, c0:c1])

    def degree(self) -> np.ndarray:
        deg = np.zeros(self.shape)
        deg[:, :-1] += self.horizontal
        deg[:, 1:] += self.horizontal
        deg[:-1, :] += self.vertical
        deg[1:, :] += self.vertical
        return deg


@dataclass(frozen=True)
class DiffusionParams:
    kappa: float = 0.12
    tau: float = 0.9 * UNIVERSAL_STEP_BOUND
    steps: int = 40
    rho: float = 0.5

    def __post_init__(self):
        if not self.kappa > 0:
            raise InvalidParam(f"kappa must be > 0, got {self.kappa}")
        if not 0 < self.tau <= UNIVERSAL_STEP_BOUND:
            raise InvalidParam(f"tau must lie in (0, {UNIVERSAL_STEP_BOUND}], got {self.tau}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise InvalidParam(f"steps must be a nonnegative integer, got {self.steps}")
        if not 0 <= self.rho <= 1:
            raise InvalidParam(f"rho must lie in [0, 1], got {self.rho}")

    def with_(self, **changes) -> "DiffusionParams":
        return replace(self, **changes)


def _face_diffs(image):
    return image[:, 1:] - image[:, :-1], image[1:, :] - image[:-1, :]


def _conductance(diff, kappa):
    w = np.exp(-np.square(diff / kappa))
    # exp underflows to 0 for very sharp edges; weights must stay positive
    return np.maximum(w, np.finfo(np.float64).tiny)


def build_edge_weights(image, kappa) -> EdgeWeights:
    """Exponential edge-stopping conductance ``exp(-(dI / kappa)^2)`` per face."""
    if not kappa > 0:
        raise InvalidParam(f"kappa must be > 0, got {kappa}")
    image = as_field(image, "image")
    dh, dv = _face_diffs(image)
    return EdgeWeights(_conductance(dh, kappa), _conductance(dv, kappa))


def stable_step_bound(w: EdgeWeights) -> float:
    """Largest explicit step keeping ``I - tau L`` entrywise nonnegative."""
    dmax = w.degree().max()
    if dmax == 0:
        return np.inf
    return 1.0 / dmax


def _apply(u, w: EdgeWeights):
    """Return ``-L u``: net inflow at every pixel."""
    out = np.zeros_like(u)
    fh = w.horizontal * (u[:, 1:] - u[:, :-1])
    out[:, :-1] += fh
    out[:, 1:] -= fh
    fv = w.vertical * (u[1:, :] - u[:-1, :])
    out[:-1, :] += fv
    out[1:, :] -= fv
    return out


def _check(u0, w, tau):
    if u0.shape != w.shape:
        raise ShapeError(f"field shape {u0.shape} does not match weights {w.shape}")
    bound = stable_step_bound(w)
    if not 0 < tau <= bound:
        raise UnstableStep(f"tau={tau} outside (0, {bound}]")


def diffuse(u0, w: EdgeWeights, tau, steps) -> np.ndarray:
    """Run ``steps`` explicit Euler steps ``u <- u - tau L u``."""
    u = as_field(u0, "u0").copy()
    _check(u, w, tau)
    for _ in range(int(steps)):
        u += tau * _apply(u, w)
    return u


def diffuse_point(w: EdgeWeights, point: PointAnnotation, tau, steps) -> np.ndarray:
    """Diffuse a unit delta at ``point``.

    Heat moves at most one pixel per step, so the update is run on the
    window within ``steps + 1`` pixels of the source; the field outside
    stays exactly zero and the result equals the full-grid computation.
    """
    h, wd = w.shape
    if not point.inside((h, wd)):
        raise InvalidParam(f"point {point} outside {wd}x{h} grid")
    _check(np.empty((h, wd)), w, tau)
    r = int(steps) + 1
    r0, r1 = max(0, point.y - r), min(h, point.y + r + 1)
    c0, c1 = max(0, point.x - r), min(wd, point.x + r + 1)
    local = w.crop(r0, r1, c0, c1)
    u = np.zeros((r1 - r0, c1 - c0))
    u[point.y - r0, point.x - c0] = 1.0
    for _ in range(int(steps)):
        u += tau * _apply(u, local)
    out = np.zeros((h, wd))
    out[r0:r1, c0:c1] = u
    return out


def diffuse_vjp(u0, w_image, params: DiffusionParams, upstream):
    """Reverse-mode product of ``diffuse`` with ``upstream``.

    Returns ``(grad_u0, grad_kappa, grad_tau)``; ``kappa`` enters through
    the conductances built from ``w_image``.
    """
    u0 = as_field(u0, "u0")
    image = as_field(w_image, "image")
    g = as_field(upstream, "upstream").copy()
    if g.shape != u0.shape:
        raise ShapeError(f"upstream shape {g.shape} does not match field {u0.shape}")
    steps = int(params.steps)
    if steps > MAX_UNROLL:
        raise InvalidParam(f"cannot unroll {steps} > {MAX_UNROLL} steps")
    kappa, tau = params.kappa, params.tau
    w = build_edge_weights(image, kappa)
    _check(u0, w, tau)

    tape = [u0.copy()]
    u = tape[0]
    for _ in range(steps):
        u = u + tau * _apply(u, w)
        tape.append(u)

    gw_h = np.zeros_like(w.horizontal)
    gw_v = np.zeros_like(w.vertical)
    grad_tau = 0.0
    for k in range(steps - 1, -1, -1):
        uk = tape[k]
        grad_tau += float(np.sum(g * _apply(uk, w)))
        # d<g, -Lu>/dw_pq = (g_p - g_q)(u_q - u_p) summed per face
        gw_h += tau * (g[:, :-1] - g[:, 1:]) * (uk[:, 1:] - uk[:, :-1])
        gw_v += tau * (g[:-1, :] - g[1:, :]) * (uk[1:, :] - uk[:-1, :])
        g = g + tau * _apply(g, w)  # L is symmetric

    dh, dv = _face_diffs(image)
    dwdk_h = w.horizontal * 2.0 * dh**2 / kappa**3
    dwdk_v = w.vertical * 2.0 * dv**2 / kappa**3
    grad_kappa = float(np.sum(gw_h * dwdk_h) + np.sum(gw_v * dwdk_v))
    return g, grad_kappa, grad_tau
