"""Uniform per-layer fake quantization with learnable clip scales.

Weights use a signed grid with ``2**(b-1) - 1`` positive levels, activations
an unsigned grid with ``2**b - 1`` levels. The forward pass rounds; the
backward pass uses the straight-through estimator, including the casewise
gradient for the clip scale ``alpha``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Function, Tensor, is_grad_enabled

WEIGHT_NORM_EPS = 1e-6
ALPHA_FLOOR = 1e-6
OFF_GRID_TOL = 1e-9


class OffGridError(ValueError):
    """A tensor that should lie on a quantization grid does not."""


def round_half_away(t):
    """Round to nearest integer, ties away from zero."""
    t = np.asarray(t)
    return np.sign(t) * np.floor(np.abs(t) + 0.5)


def levels(bits: int, signed: bool) -> int:
    """Number of positive grid steps for a ``bits``-wide quantizer."""
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    return 2 ** (bits - 1) - 1 if signed else 2 ** bits - 1


def quantize_pointwise(t, bits: int):
    """round((2^b - 1) t) / (2^b - 1) for t already in [-1, 1] or [0, 1]."""
    n = 2 ** bits - 1
    return round_half_away(np.asarray(t, dtype=float) * n) / n


def grid_index(x, alpha: float, n: int, signed: bool):
    """Integer grid index of ``x`` after clipping to [-alpha|0, alpha]."""
    lo = -1.0 if signed else 0.0
    return round_half_away(n * np.clip(x / alpha, lo, 1.0))


def alpha_gradient(x, x_b, alpha: float, signed: bool = False):
    """STE derivative of the fake-quantized value with respect to ``alpha``.

    0 below the clip floor (-1 for signed), 1 above the ceiling, and
    (x_b - x) / alpha in between.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    x = np.asarray(x, dtype=float)
    x_b = np.asarray(x_b, dtype=float)
    floor = -1.0 if signed else 0.0
    inner = (x_b - x) / alpha
    out = np.where(x >= alpha, 1.0, np.where(x <= (-alpha if signed else 0.0), floor, inner))
    return out if out.ndim else float(out)


class FakeQuant(Function):
    @staticmethod
    def forward(ctx, x, alpha, n, signed):
        a = float(alpha)
        q = grid_index(x, a, n, signed)
        out = (a * (q / n)).astype(x.dtype)
        ctx.save(x, out)
        ctx.attrs = {"alpha": a, "signed": signed}
        return out

    @staticmethod
    def backward(ctx, g):
        x, out = ctx.saved
        a, signed = ctx.attrs["alpha"], ctx.attrs["signed"]
        lo = -a if signed else 0.0
        inside = (x > lo) & (x < a)
        gx = g * inside
        galpha = None
        if ctx.needs[1]:
            galpha = np.asarray((g * alpha_gradient(x, out, a, signed)).sum())
        return gx, galpha


class NormalizeWeights(Function):
    @staticmethod
    def forward(ctx, w, eps):
        if w.size < 2:
            raise ValueError("weight normalization needs at least 2 elements")
        d = w - w.mean()
        sigma = np.sqrt((d * d).mean())
        s = sigma + eps
        ctx.save(d, sigma, s)
        return d / s

    @staticmethod
    def backward(ctx, g):
        d, sigma, s = ctx.saved
        gw = (g - g.mean()) / s
        if sigma > 0:
            gw = gw - d * (g * d).sum() / (d.size * sigma * s * s)
        return gw


def normalize_weights(w: Tensor, eps: float = WEIGHT_NORM_EPS) -> Tensor:
    """(w - mean) / (std + eps) over the whole tensor (population std)."""
    return NormalizeWeights.apply(w, eps=eps)


@dataclass
class QuantParams:
    """Per-layer quantizer state: bit width, signedness and clip scale.

    ``alpha`` is a learnable scalar tensor. It starts uninitialised and is
    set from the first tensor the quantizer sees (99.9th percentile of
    absolute values for activations, max absolute value for weights).
    """

    bits: int = 8
    signed: bool = False
    enabled: bool = True
    role: str = "act"
    name: str = ""
    alpha: Tensor = field(default_factory=lambda: Tensor(1.0, requires_grad=True))
    initialized: bool = False

    def __post_init__(self):
        levels(self.bits, self.signed)
        if self.role not in ("act", "weight"):
            raise ValueError(f"unknown quantizer role {self.role!r}")

    @property
    def n(self) -> int:
        return levels(self.bits, self.signed)

    @property
    def scale(self) -> float:
        """Real value of one integer step."""
        return float(self.alpha.data) / self.n

    def set_alpha(self, value: float) -> None:
        self.alpha.data = np.asarray(max(float(value), ALPHA_FLOOR), dtype=self.alpha.data.dtype)
        self.initialized = True

    def calibrate(self, x: np.ndarray) -> None:
        mag = np.abs(x)
        value = np.max(mag) if self.role == "weight" else np.percentile(mag, 99.9)
        self.set_alpha(value if value > 0 else 1.0)

    def project(self) -> None:
        if self.alpha.data < ALPHA_FLOOR:
            self.alpha.data = np.asarray(ALPHA_FLOOR, dtype=self.alpha.data.dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        if not self.initialized:
            self.calibrate(x.data)
        alpha = self.alpha if is_grad_enabled() else Tensor(self.alpha.data)
        out = FakeQuant.apply(x, alpha, n=self.n, signed=self.signed)
        _record(self, out.data)
        return out


def fake_quant_weights(w: Tensor, p: QuantParams) -> Tensor:
    """alpha * q_{b-1}(clip(w / alpha, -1, 1)) with STE gradients."""
    if not p.signed:
        raise ValueError("weight quantizer must be signed")
    return p(w)


def fake_quant_activations(x: Tensor, p: QuantParams) -> Tensor:
    """alpha * q_b(clip(x / alpha, 0, 1)) with STE gradients."""
    if p.signed:
        raise ValueError("activation quantizer must be unsigned")
    return p(x)


def mse(x, x_b) -> float:
    """Mean squared elementwise difference."""
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
    b = np.asarray(x_b.data if isinstance(x_b, Tensor) else x_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes {a.shape} and {b.shape} differ")
    return float(np.mean((a - b) ** 2))


@dataclass
class QuantizedTensor:
    """Integer grid indices plus the scale that maps them back to reals."""

    values: np.ndarray
    alpha: float
    bits: int
    signed: bool

    def __post_init__(self):
        n = levels(self.bits, self.signed)
        lo = -n if self.signed else 0
        if self.values.size and (self.values.min() < lo or self.values.max() > n):
            raise ValueError(f"integer values outside [{lo}, {n}]")

    @property
    def n(self) -> int:
        return levels(self.bits, self.signed)


def to_integer(x, p: QuantParams | None = None, *, alpha: float | None = None,
               bits: int | None = None, signed: bool | None = None,
               label: str = "tensor") -> QuantizedTensor:
    """Exact integer representation of an on-grid tensor.

    Raises :class:`OffGridError` when any entry is farther than
    ``1e-9 * alpha`` from the grid, which signals a scale or bit mismatch.
    """
    if p is not None:
        alpha, bits, signed = float(p.alpha.data), p.bits, p.signed
    if alpha is None or bits is None or signed is None:
        raise ValueError("to_integer needs QuantParams or alpha/bits/signed")
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    n = levels(bits, signed)
    q = round_half_away(arr / alpha * n)
    err = np.abs(alpha * (q / n) - arr)
    if arr.size and err.max() > OFF_GRID_TOL * alpha:
        raise OffGridError(f"{label}: values are off the {bits}-bit grid (max distance {err.max():.3g})")
    lo = -n if signed else 0
    if arr.size and (q.min() < lo or q.max() > n):
        raise OffGridError(f"{label}: values exceed the clip range of alpha={alpha}")
    return QuantizedTensor(q.astype(np.int32), float(alpha), bits, signed)


def from_integer(q: QuantizedTensor) -> np.ndarray:
    return q.alpha * (q.values.astype(np.float64) / q.n)


# -- optional recording of every quantizer output, used by integer-path checks --

_recorders: list[list] = []


class record_quant_sites:
    """Context manager collecting ``(quantizer name, output)`` for each call."""

    def __enter__(self):
        self.sites: list[tuple[str, np.ndarray]] = []
        _recorders.append(self.sites)
        return self.sites

    def __exit__(self, *exc):
        _recorders.remove(self.sites)
        return False


def _record(p: QuantParams, out: np.ndarray) -> None:
    if _recorders and p.role == "act":
        for rec in _recorders:
            rec.append((p.name, out.copy()))
