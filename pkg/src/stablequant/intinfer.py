"""Integer export and integer-arithmetic inference for quantized trunks.

Trunk kernels are stored as int32 grid indices. Convolutions and channel
mixing accumulate in int64 and are checked against the int32 range.
Between quantization sites values are rescaled in float64 with the stored
scales and snapped back to integer grid indices with the same rounding
rule as training. The opening layer and the classifier run in floating
point, as they are never quantized. Graph propagation by the normalized
incidence operator (irrational entries) is also applied in float64 before
requantization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import (CheckpointError, decode_text, encode_text, load_records, load_state,
                         read_checkpoint_specs, save_records)
from .layers import (AvgPool, ChannelChange, Network, PlainMobile, PlainRes, SymMobile, SymRes,
                     TVBlock, build_network)
from .quant import QuantParams, from_integer, grid_index, levels, to_integer
from .tensor import Tensor, conv2d_raw, conv2d_transpose_raw
from .tv import tv_smooth

INT32_MAX = 2 ** 31 - 1


class IntegerOverflowError(ArithmeticError):
    pass


@dataclass
class IntAct:
    """Integer activation: real value = q * scale."""

    q: np.ndarray
    scale: float

    @property
    def real(self) -> np.ndarray:
        return self.q * self.scale


def _check_range(acc: np.ndarray, where: str) -> np.ndarray:
    if acc.size and np.abs(acc).max() > INT32_MAX:
        raise IntegerOverflowError(f"{where}: accumulator exceeds the int32 range")
    return acc


def _requant(real: np.ndarray, q: QuantParams) -> IntAct:
    n = q.n
    alpha = float(q.alpha.data)
    return IntAct(grid_index(real, alpha, n, q.signed).astype(np.int64), alpha / n)


# -- export ----------------------------------------------------------------------

def export_records(ckpt: dict, bits: int | None = None) -> dict:
    """Integer model records from checkpoint records.

    Every trunk kernel must sit exactly on its weight grid at ``bits``
    (default: the bit width stored in the checkpoint); otherwise
    :class:`~stablequant.quant.OffGridError` names the offending layer.
    """
    specs, task = read_checkpoint_specs(ckpt)
    net = _skeleton(specs, task, ckpt)
    load_state(net, ckpt)
    for name, q in net.named_quantizers():
        if not q.enabled or not q.initialized:
            raise CheckpointError(f"quantizer {name!r} is disabled or uncalibrated; "
                                  "integer export needs a quantized checkpoint")
    out = {k: v for k, v in ckpt.items() if k.startswith("meta.") or k.startswith("graph.")}
    out["meta.kind"] = encode_text("int")
    kernel_names = {n for n, _ in net.kernels()}
    for name, p in net.named_parameters():
        if not any(name.startswith(k + ".") for k in kernel_names):
            out[name] = np.asarray(p.data, dtype=np.float64)
    for name, q in net.named_quantizers():
        out[f"{name}.bits"] = np.asarray(q.bits, dtype=np.int32)
        out[f"{name}.flags"] = ckpt[f"{name}.flags"]
    for name, k in net.kernels():
        b = k.quant.bits if bits is None else bits
        qt = to_integer(ckpt[f"{name}.wq"], alpha=float(k.quant.alpha.data), bits=b, signed=True,
                        label=name)
        out[f"{name}.qint"] = qt.values.astype(np.int32)
        out[f"{name}.quant.bits"] = np.asarray(b, dtype=np.int32)
        out[f"{name}.quant.alpha"] = np.asarray(float(k.quant.alpha.data))
    return out


def export_int(ckpt_path, out_path, bits: int | None = None) -> None:
    save_records(out_path, export_records(load_records(ckpt_path), bits))


def _skeleton(specs, task, rec) -> Network:
    graph = None
    if task == "graph":
        from .graph import Graph, GraphOperator

        if "graph.edges" not in rec:
            raise CheckpointError("graph checkpoint lacks its edge list")
        graph = GraphOperator(Graph(int(rec["graph.n"]), rec["graph.edges"].astype(np.int64)))
    return build_network(specs, task=task, graph=graph)


# -- inference -------------------------------------------------------------------

class IntModel:
    """Integer-path model loaded from an exported file (or records)."""

    def __init__(self, rec: dict):
        if decode_text(rec.get("meta.kind", np.zeros(0, np.int32))) != "int":
            raise CheckpointError("not an integer model file (run export-int first)")
        specs, task = read_checkpoint_specs(rec)
        self.net = _skeleton(specs, task, rec)
        self.task = task
        self.kernels = {}
        for name, k in self.net.kernels():
            qv = rec[f"{name}.qint"].astype(np.int64)
            b = int(rec[f"{name}.quant.bits"])
            alpha = float(rec[f"{name}.quant.alpha"])
            self.kernels[id(k)] = (qv, alpha / levels(b, True))
        kernel_names = {n for n, _ in self.net.kernels()}
        for name, p in self.net.named_parameters():
            if not any(name.startswith(k + ".") for k in kernel_names):
                p.data = np.array(rec[name], dtype=np.float64)
        for name, q in self.net.named_quantizers():
            if q.role == "act":
                q.bits = int(rec[f"{name}.bits"])
                q.alpha.data = np.array(rec[f"{name}.alpha"], dtype=np.float64)
                q.enabled = q.initialized = True
        self._sites: list | None = None

    @classmethod
    def load(cls, path) -> "IntModel":
        return cls(load_records(path))

    # per-site bookkeeping for bit-exactness checks
    def _site(self, q: QuantParams, act: IntAct) -> IntAct:
        if self._sites is not None:
            self._sites.append((q.name, act.q.copy(), float(q.alpha.data), q.n))
        return act

    def _rq(self, real, q: QuantParams) -> IntAct:
        return self._site(q, _requant(real, q))

    def _k(self, w):
        return self.kernels[id(w)]

    def _conv(self, x: IntAct, w, groups=1, where=""):
        qk, sk = self._k(w)
        pad = qk.shape[2] // 2
        acc = _check_range(conv2d_raw(x.q, qk, 1, pad, groups), where)
        return acc * (x.scale * sk)

    def _conv_t(self, z: IntAct, w, hw, groups=1, where=""):
        qk, sk = self._k(w)
        pad = qk.shape[2] // 2
        acc = _check_range(conv2d_transpose_raw(z.q, qk, hw, 1, pad, groups), where)
        return acc * (z.scale * sk)

    def _act(self, real, act_module):
        if act_module.tv:
            with T.no_grad():
                real = tv_smooth(Tensor(real), Tensor(act_module.gamma.data), act_module.eps,
                                 warn=False).data
        return np.maximum(real, 0.0)

    def _step(self, block, x: IntAct, where: str) -> np.ndarray:
        """Real-valued block update before the outer quantizer."""
        hw = x.q.shape[2:]
        if isinstance(block, SymRes):
            z = self._rq(self._act(self._conv(x, block.K, where=where), block.act), block.q_act)
            return x.real - self._conv_t(z, block.K, hw, where=where) * block.h
        if isinstance(block, PlainRes):
            z = self._rq(self._act(self._conv(x, block.K2, where=where), block.act), block.q_act)
            return x.real + self._conv(z, block.K1, where=where) * block.h
        if isinstance(block, PlainMobile):
            m = block.K2.shape[0]
            z = self._rq(np.maximum(self._conv(x, block.K1, where=where), 0.0), block.q_act1)
            z = self._rq(self._act(self._conv(z, block.K2, groups=m, where=where), block.act), block.q_act2)
            return x.real + self._conv(z, block.K3, where=where) * block.h
        if isinstance(block, SymMobile):
            m = block.K2.shape[0]
            qk1, sk1 = self._k(block.K1)
            qk2, sk2 = self._k(block.K2)
            a = _check_range(conv2d_raw(x.q, qk1, 1, 0), where)
            a = _check_range(conv2d_raw(a, qk2, 1, qk2.shape[2] // 2, m), where)
            z = self._rq(self._act(a * (x.scale * sk1 * sk2), block.act), block.q_act)
            b = _check_range(conv2d_transpose_raw(z.q, qk2, hw, 1, qk2.shape[2] // 2, m), where)
            b = _check_range(conv2d_transpose_raw(b, qk1, hw, 1, 0), where)
            return x.real - b * (z.scale * sk1 * sk2) * block.h
        if isinstance(block, ChannelChange):
            r = self._step(block.inner, x, where)
            extra = block.n_out - block.n_in
            return r if extra == 0 else np.concatenate([r, x.real[:, :extra]], axis=1)
        if isinstance(block, TVBlock):
            with T.no_grad():
                return tv_smooth(Tensor(x.real), Tensor(block.gamma.data), warn=False).data
        from .graph import GCNNonSym, GCNSym

        op = self.net.graph
        if isinstance(block, GCNSym):
            qk, sk = self._k(block.K)
            a = _check_range(x.q @ qk.T, where) * (x.scale * sk)
            z = self._rq(np.maximum(op.apply(a), 0.0), block.q_act)
            b = _check_range(z.q @ qk, where) * (z.scale * sk)
            return x.real - op.adjoint(b) * block.h
        if isinstance(block, GCNNonSym):
            qk1, s1 = self._k(block.K1)
            qk2, s2 = self._k(block.K2)
            a = _check_range(x.q @ qk1.T, where) * (x.scale * s1)
            z = self._rq(np.maximum(op.apply(a), 0.0), block.q_act)
            b = _check_range(z.q @ qk2.T, where) * (z.scale * s2)
            return x.real - op.adjoint(b) * block.h
        raise TypeError(f"no integer path for block kind {block.kind!r}")

    def features(self, y: np.ndarray) -> IntAct:
        net = self.net
        with T.no_grad():
            x0 = net.opening(Tensor(np.asarray(y, dtype=np.float64))).data
        x = self._rq(x0, net.entry_q)
        for i, block in enumerate(net.blocks):
            where = f"blocks.{i}"
            if isinstance(block, AvgPool):
                s = x.q.shape
                q = x.q.reshape(s[0], s[1], s[2] // 2, 2, s[3] // 2, 2).sum(axis=(3, 5))
                x = IntAct(q, x.scale / 4)
            else:
                x = self._rq(self._step(block, x, where), block.q_out)
        return x

    def __call__(self, y: np.ndarray) -> np.ndarray:
        x = self.features(y)
        with T.no_grad():
            return self.net.head(Tensor(x.real)).data

    def trace_sites(self, y) -> list:
        """Run once and return ``(quantizer name, int grid values, alpha, n)`` per site."""
        self._sites = []
        try:
            self(y)
            return self._sites
        finally:
            self._sites = None


def site_mismatches(float_sites: list, int_sites: list) -> int:
    """Count activation entries whose integer and fake-quant values differ."""
    if len(float_sites) != len(int_sites):
        raise ValueError(f"site counts differ: {len(float_sites)} vs {len(int_sites)}")
    bad = 0
    for (fname, fval), (iname, q, alpha, n) in zip(float_sites, int_sites):
        if fname != iname:
            raise ValueError(f"site order differs: {fname} vs {iname}")
        back = alpha * (q.astype(np.float64) / n)
        bad += int(np.count_nonzero(back != fval))
    return bad


__all__ = ["IntAct", "IntModel", "IntegerOverflowError", "export_int", "export_records",
           "from_integer", "site_mismatches"]
