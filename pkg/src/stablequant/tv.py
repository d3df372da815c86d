"""Anisotropic total-variation smoothing and the discrete TV norm.

Both directions use the forward difference kernel [-1, 1] with Neumann
(replicate) boundaries, so the flux across the image border is zero and
constant maps are exact fixed points.
"""
from __future__ import annotations

import warnings

import numpy as np

from .tensor import Function, ShapeError, Tensor

TV_EPS = 1e-3
GAMMA2_INIT = 0.01
GAMMA2_MAX = 0.1


class MaximumPrincipleWarning(UserWarning):
    pass


def _flux(d, eps):
    # d / (|d| + eps); eps == 0 gives sign(d) with sign(0) = 0
    denom = np.abs(d) + eps
    return np.divide(d, denom, out=np.zeros_like(d), where=denom > 0)


def _dflux(d, eps):
    denom = np.abs(d) + eps
    return np.divide(eps, denom * denom, out=np.zeros_like(d), where=denom > 0)


def _grad_t(f, axis):
    """G^T f for the forward difference along ``axis``."""
    pad = [(0, 0)] * f.ndim
    pad[axis] = (1, 1)
    fp = np.pad(f, pad)
    return -np.diff(fp, axis=axis)


def tv_laplacian(x: np.ndarray, eps: float = TV_EPS) -> np.ndarray:
    """(D_x + D_y) x over the last two axes."""
    out = np.zeros_like(x)
    for axis in (x.ndim - 1, x.ndim - 2):
        out += _grad_t(_flux(np.diff(x, axis=axis), eps), axis)
    return out


def max_principle_ok(gamma2: float, eps: float) -> bool:
    """Sufficient condition for min(x) <= S(x) <= max(x): 4 gamma^2 / eps <= 1."""
    return eps > 0 and 4.0 * gamma2 / eps <= 1.0


class TVSmooth(Function):
    @staticmethod
    def forward(ctx, x, gamma, eps):
        if x.ndim < 2:
            raise ShapeError("tv_smooth needs at least a 2-D map")
        ctx.save(x, gamma)
        ctx.attrs = {"eps": eps}
        g2 = float(gamma) ** 2
        return x - g2 * tv_laplacian(x, eps)

    @staticmethod
    def backward(ctx, g):
        x, gamma = ctx.saved
        eps = ctx.attrs["eps"]
        g2 = float(gamma) ** 2
        gx = ggamma = None
        if ctx.needs[0]:
            # Jacobian of D x is G^T diag(flux'(Gx)) G, which is symmetric
            lap = np.zeros_like(g)
            for axis in (x.ndim - 1, x.ndim - 2):
                lap += _grad_t(_dflux(np.diff(x, axis=axis), eps) * np.diff(g, axis=axis), axis)
            gx = g - g2 * lap
        if ctx.needs[1]:
            ggamma = np.asarray(-2.0 * float(gamma) * (g * tv_laplacian(x, eps)).sum())
        return gx, ggamma


def tv_smooth(x: Tensor, gamma: Tensor | float, eps: float = TV_EPS, warn: bool = True) -> Tensor:
    """One edge-aware smoothing step x - gamma^2 (D_x + D_y) x.

    Weights are recomputed from the current ``x``. ``eps=0`` gives the
    sign-only form used at inference. Emits a
    :class:`MaximumPrincipleWarning` when gamma^2 exceeds the bound that
    guarantees no new extrema.
    """
    if not isinstance(gamma, Tensor):
        gamma = Tensor(float(gamma))
    if warn and not max_principle_ok(float(gamma.data) ** 2, eps):
        warnings.warn(f"gamma^2={float(gamma.data) ** 2:.3g} exceeds the maximum-principle bound "
                      f"eps/4={eps / 4:.3g}", MaximumPrincipleWarning, stacklevel=2)
    return TVSmooth.apply(x, gamma, eps=eps)


def tv_norm_raw(x: np.ndarray) -> float:
    return float(sum(np.abs(np.diff(x, axis=a)).sum() for a in (x.ndim - 1, x.ndim - 2)))


class TVNorm(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(x)
        return np.asarray(tv_norm_raw(x), dtype=x.dtype)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved
        out = np.zeros_like(x)
        for axis in (x.ndim - 1, x.ndim - 2):
            out += _grad_t(np.sign(np.diff(x, axis=axis)), axis)
        return out * g


def tv_norm(x: Tensor) -> Tensor:
    """Anisotropic discrete TV: sum |G_x x| + |G_y x| over the last two axes."""
    return TVNorm.apply(x)
