"""Empirical checks of forward stability under activation quantization.

Paired traces run the same frozen weights with activation quantizers on
and off; the per-block per-entry MSE between the two runs is the
divergence profile. Spectral helpers check the step-size bound
h < 2 / (L ||K||^2) and the spectrum of the error-propagation matrix
I - h K^T Omega K.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from . import tensor as T
from .layers import AvgPool, ChannelChange, Network, SymMobile, SymRes, TVBlock, TraceEntry
from .tensor import Tensor, conv2d_raw, conv2d_transpose_raw
from .tv import max_principle_ok

ActivationTrace = list  # list[TraceEntry]


@dataclass
class DivergenceReport:
    """Per-block per-entry MSE between a quantized and a full-precision run."""

    per_block: list[float]
    kinds: list[str]
    metadata: dict = field(default_factory=dict)

    @property
    def final(self) -> float:
        return self.per_block[-1] if self.per_block else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "mse"])
        for i, v in enumerate(self.per_block, start=1):
            w.writerow([i, repr(v)])
        return buf.getvalue()


def comparison_csv(nonsym: DivergenceReport, sym: DivergenceReport,
                   names: tuple[str, str] = ("nonsym", "sym")) -> str:
    """Two-network layout ``layer,nonsym,sym``."""
    if len(nonsym.per_block) != len(sym.per_block):
        raise ValueError(f"layer counts differ: {names[0]} has {len(nonsym.per_block)}, "
                         f"{names[1]} has {len(sym.per_block)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "nonsym", "sym"])
    for i, (a, b) in enumerate(zip(nonsym.per_block, sym.per_block), start=1):
        w.writerow([i, repr(a), repr(b)])
    return buf.getvalue()


def read_report_csv(text: str) -> DivergenceReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or "mse" not in rows[0]:
        raise ValueError("expected a layer,mse report")
    return DivergenceReport([float(r["mse"]) for r in rows], ["?"] * len(rows))


def _block_signature(net: Network):
    return [(b.kind, b.spec.channels_in, b.spec.channels_out) for b in net.blocks]


def paired_trace(net: Network, inputs, bits_a: int | None = 4, net_fp: Network | None = None):
    """Trace one input batch with activation quantization on and off.

    Weights are frozen once and shared by both runs. ``bits_a=None`` (or
    >= 32) disables activation quantization on both sides. Returns
    ``(trace_quant, trace_fp)``.
    """
    other = net if net_fp is None else net_fp
    if _block_signature(net) != _block_signature(other):
        raise ValueError("paired_trace: networks have different block lists")
    was_frozen = [k._frozen is not None for _, k in net.kernels()]
    net.freeze()
    if other is not net:
        for (_, a), (_, b) in zip(net.kernels(), other.kernels()):
            b.freeze(a.effective())
    quantize = bits_a is not None and bits_a < 32
    saved = [(q, q.enabled, q.bits) for q in net.activation_quantizers() + other.activation_quantizers()]
    try:
        with T.no_grad():
            for q in net.activation_quantizers():
                q.enabled = quantize
                if quantize:
                    q.bits = bits_a
            trace_q: list[TraceEntry] = []
            net(inputs, trace=trace_q)
            for q in other.activation_quantizers():
                q.enabled = False
            trace_fp: list[TraceEntry] = []
            other(inputs, trace=trace_fp)
    finally:
        for q, enabled, bits in saved:
            q.enabled, q.bits = enabled, bits
        if not any(was_frozen):
            net.unfreeze()
            if other is not net:
                other.unfreeze()
    return trace_q, trace_fp


def divergence(trace_a, trace_b, metadata: dict | None = None) -> DivergenceReport:
    """Per-entry MSE for each pair of corresponding block outputs."""
    if len(trace_a) != len(trace_b):
        raise ValueError(f"trace lengths differ: {len(trace_a)} vs {len(trace_b)}")
    per_block, kinds = [], []
    for a, b in zip(trace_a, trace_b):
        if a.activation.shape != b.activation.shape:
            raise ValueError(f"block {a.index}: activation shapes differ")
        d = a.activation - b.activation
        per_block.append(float(np.mean(d * d)))
        kinds.append(a.kind)
    return DivergenceReport(per_block, kinds, dict(metadata or {}))


# -- operator norms -------------------------------------------------------------

def power_iteration(apply, adjoint, shape, seed: int = 0, tol: float = 1e-9,
                    max_iter: int = 10_000) -> float:
    """Largest singular value of a linear map via power iteration on A^T A."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    prev = None
    lam = 0.0
    for _ in range(max_iter):
        w = adjoint(apply(v))
        lam = float(np.vdot(v, w))
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        if prev is not None and abs(lam - prev) <= tol * max(abs(lam), 1e-300):
            break
        prev = lam
    return math.sqrt(max(lam, 0.0))


def operator_norm(K, input_shape=None, seed: int = 0, tol: float = 1e-9,
                  max_iter: int = 10_000) -> float:
    """Spectral norm of K as a linear operator.

    ``K`` may be a dense matrix, a conv kernel (with ``input_shape`` =
    (C, H, W); depthwise kernels have shape (C, 1, k, k)), or a pair of
    callables ``(apply, adjoint)`` together with ``input_shape``.
    """
    if isinstance(K, tuple):
        apply, adjoint = K
        return power_iteration(apply, adjoint, input_shape, seed, tol, max_iter)
    K = np.asarray(K, dtype=np.float64)
    if not np.any(K):
        return 0.0
    if K.ndim == 2:
        return power_iteration(lambda v: K @ v, lambda u: K.T @ u, (K.shape[1],), seed, tol, max_iter)
    if K.ndim == 4:
        if input_shape is None:
            raise ValueError("conv kernels need an input shape (C, H, W)")
        c, h, w = input_shape
        groups = c if (K.shape[1] == 1 and c != 1) else 1
        pad = K.shape[2] // 2
        return power_iteration(lambda v: conv2d_raw(v, K, 1, pad, groups),
                               lambda u: conv2d_transpose_raw(u, K, (h, w), 1, pad, groups),
                               (1, c, h, w), seed, tol, max_iter)
    raise ValueError(f"unsupported operator with shape {K.shape}")


def step_bound(norm: float, L: float = 1.0) -> float:
    """Largest admissible step: h must stay strictly below 2 / (L ||K||^2)."""
    if norm == 0 or L == 0:
        return math.inf
    return 2.0 / (L * norm * norm)


def _block_operator_norm(block, hw, seed, tol=1e-9):
    """Norm of the operator playing the role of K in the block's symmetric form."""
    if isinstance(block, ChannelChange):
        block = block.inner
    if isinstance(block, SymRes):
        K = block.K.effective()
        return operator_norm(K, (K.shape[1],) + hw, seed, tol)
    if isinstance(block, SymMobile):
        K1, K2 = block.K1.effective(), block.K2.effective()
        c, m = K1.shape[1], K1.shape[0]

        def fwd(v):
            return conv2d_raw(conv2d_raw(v, K1, 1, 0), K2, 1, K2.shape[2] // 2, m)

        def adj(u):
            t = conv2d_transpose_raw(u, K2, hw, 1, K2.shape[2] // 2, m)
            return conv2d_transpose_raw(t, K1, hw, 1, 0)

        return operator_norm((fwd, adj), (1, c) + hw, seed, tol)
    from .graph import GCNSym

    if isinstance(block, GCNSym):
        K = block.K.effective()
        op = block._op
        return operator_norm((lambda v: op.apply(v @ K.T), lambda u: op.adjoint(u) @ K),
                             (op.shape[1], K.shape[1]), seed, tol)
    return None


def check_step_bound(net: Network, L: float = 1.0, input_hw=(16, 16), seed: int = 0,
                     tol: float = 1e-9) -> list[dict]:
    """Flag every trunk block against h < 2 / (L ||K||^2).

    Only symmetric updates carry the non-expansiveness certificate; plain
    residual blocks are reported with ``ok=False``. Average pooling is
    always non-expansive.
    """
    rows = []
    hw = tuple(input_hw)
    for i, block in enumerate(net.blocks):
        row = {"block": i, "kind": block.kind, "h": block.h, "norm": math.nan,
               "bound": math.nan, "ok": False}
        if isinstance(block, AvgPool):
            row.update(norm=1.0, bound=math.inf, ok=True)
            hw = (hw[0] // 2, hw[1] // 2)
        elif isinstance(block, TVBlock):
            g2 = float(block.gamma.data) ** 2
            row.update(ok=max_principle_ok(g2, 1e-3))
        else:
            nrm = _block_operator_norm(block, hw if net.task == "image" else None, seed, tol)
            if nrm is not None:
                bound = step_bound(nrm, L)
                row.update(norm=nrm, bound=bound, ok=block.h < bound)
        rows.append(row)
    return rows


def project_step_bound(net: Network, L: float = 1.0, margin: float = 0.9, input_hw=(16, 16),
                       seed: int = 0, tol: float = 1e-6) -> int:
    """Rescale symmetric kernels whose step violates ``h <= margin * bound``.

    Returns the number of rescaled blocks.
    """
    count = 0
    for row, block in zip(check_step_bound(net, L, input_hw, seed, tol), net.blocks):
        if not math.isfinite(row["norm"]) or row["norm"] == 0:
            continue
        target = margin * row["bound"]
        if block.h > target:
            inner = block.inner if isinstance(block, ChannelChange) else block
            # the block operator is quadratic in the kernel scale for mobile (K2 K1): split evenly
            ks = inner.kernels()
            factor = math.sqrt(target / block.h) ** (1.0 / len(ks))
            for k in ks:
                k.rescale(factor)
            count += 1
    return count


# -- error propagation -----------------------------------------------------------

def jacobian_spectrum(K, h: float, omega, method: str = "auto") -> tuple[float, float]:
    """Smallest and largest eigenvalue of I - h K^T Omega K.

    ``omega`` is the diagonal of Omega (one entry per row of K), each in
    [0, 1]. Dense symmetric solve for small operators, Lanczos otherwise.
    """
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    omega = np.broadcast_to(np.asarray(omega, dtype=np.float64), (K.shape[0],))
    if np.any(omega < 0) or np.any(omega > 1):
        raise ValueError("Omega entries must lie in [0, 1]")
    n = K.shape[1]
    if method == "auto":
        method = "dense" if n <= 256 else "lanczos"
    if method == "dense" or n < 3:
        J = np.eye(n) - h * K.T @ (omega[:, None] * K)
        ev = np.linalg.eigvalsh(0.5 * (J + J.T))
        return float(ev[0]), float(ev[-1])
    if method != "lanczos":
        raise ValueError(f"unknown method {method!r}")
    op = LinearOperator((n, n), matvec=lambda v: v - h * (K.T @ (omega * (K @ v))), dtype=np.float64)
    v0 = np.ones(n) / math.sqrt(n)
    lo = eigsh(op, k=1, which="SA", tol=0, v0=v0, return_eigenvectors=False)[0]
    hi = eigsh(op, k=1, which="LA", tol=0, v0=v0, return_eigenvectors=False)[0]
    return float(lo), float(hi)


def spectral_radius(K, h: float, omega, method: str = "auto") -> float:
    lo, hi = jacobian_spectrum(K, h, omega, method)
    return max(abs(lo), abs(hi))


def symmetric_step(x, K, h):
    """Dense form of the symmetric block: x - h K^T relu(K x)."""
    return x - h * K.T @ np.maximum(K @ x, 0.0)


def plain_step(x, K1, K2, h):
    """Dense form of the plain block: x + h K1 relu(K2 x)."""
    return x + h * K1 @ np.maximum(K2 @ x, 0.0)


def perturbation_growth(net: Network, x0, eta0) -> np.ndarray:
    """||eta_j|| after each trunk block for trunk input x0 and x0 + eta0.

    Runs in full precision (activation quantizers off). Entry 0 is
    ||eta0||, entry j is the norm after block j.
    """
    x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    eta0 = np.asarray(eta0, dtype=np.float64)
    saved = [(q, q.enabled) for q in net.activation_quantizers()]
    norms = [float(np.linalg.norm(eta0))]
    try:
        for q, _ in saved:
            q.enabled = False
        with T.no_grad():
            a, b = Tensor(x0), Tensor(x0 + eta0)
            for block in net.blocks:
                a, b = block(a), block(b)
                norms.append(float(np.linalg.norm(b.data - a.data)))
    finally:
        for q, e in saved:
            q.enabled = e
    return np.asarray(norms)
