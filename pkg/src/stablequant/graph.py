"""Diffusive graph convolution layers over a fixed edge-incidence operator."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import tensor as T
from .layers import Block, BlockSpec, Module, QWeight, _act_q
from .tensor import Tensor


@dataclass
class Graph:
    """Undirected simple graph with node features (and optional labels)."""

    n: int
    edges: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            if e.min() < 0 or e.max() >= self.n:
                raise ValueError("edge references a node outside [0, n)")
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("self-loops are not allowed")
        e = np.sort(e, axis=1)
        if len(np.unique(e, axis=0)) != len(e):
            raise ValueError("duplicate edges")
        self.edges = e

    @property
    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def components(self) -> int:
        adj = sp.coo_matrix((np.ones(len(self.edges)), (self.edges[:, 0], self.edges[:, 1])),
                            shape=(self.n, self.n))
        return int(connected_components(adj, directed=False)[0])


def read_edge_list(path, n: int | None = None) -> np.ndarray:
    rows = [tuple(map(int, line.split())) for line in Path(path).read_text().splitlines()
            if line.strip() and not line.lstrip().startswith("#")]
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def write_edge_list(path, edges: np.ndarray) -> None:
    Path(path).write_text("".join(f"{u} {v}\n" for u, v in np.asarray(edges)))


class GraphOperator:
    """Sparse incidence operator S (edges x nodes).

    Row (u, v) holds -c/sqrt(d(u)) at u and +c/sqrt(d(v)) at v, so that
    S^T S is the normalized graph Laplacian (norm <= 2 for c = 1).
    """

    def __init__(self, graph: Graph, normalize: bool = True, c: float = 1.0):
        self.graph = graph
        self.normalize = normalize
        self.c = c
        e = graph.edges
        m = len(e)
        if normalize:
            inv = np.zeros(graph.n)
            d = graph.degrees
            inv[d > 0] = 1.0 / np.sqrt(d[d > 0])
            wu, wv = -c * inv[e[:, 0]], c * inv[e[:, 1]]
        else:
            wu, wv = -c * np.ones(m), c * np.ones(m)
        rows = np.repeat(np.arange(m), 2)
        cols = e.ravel()
        vals = np.stack([wu, wv], axis=1).ravel()
        self.S = sp.csr_matrix((vals, (rows, cols)), shape=(m, graph.n))
        self.ST = self.S.T.tocsr()

    @property
    def shape(self):
        return self.S.shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.S @ x)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(self.ST @ y)

    def __call__(self, x: Tensor) -> Tensor:
        return T.spmm(self.S, x)

    def transpose_apply(self, y: Tensor) -> Tensor:
        return T.spmm(self.ST, y)


def _mix(z: Tensor, M: Tensor) -> Tensor:
    """Apply a 1x1 channel-mixing operator M to row features: z M^T."""
    return T.linear(z, M)


class GCNSym(Block):
    """x - h S^T K^T sigma(K S x)."""

    kind = "gcn_sym"

    def __init__(self, spec: BlockSpec, rng, graph: GraphOperator, outer=True):
        super().__init__(spec, outer)
        c = spec.channels_in
        self.K = QWeight((c, c), c, rng, spec.bits_w, spec.quant_weights)
        self.q_act = _act_q(spec)
        self._op = graph

    def step(self, x):
        K = self.K()
        z = self.q_act(T.relu(self._op(_mix(x, K))))
        return x - self._op.transpose_apply(_mix(z, K.T)) * self.h


class GCNNonSym(Block):
    """x - h S^T K2 sigma(K1 S x) with independent K1, K2."""

    kind = "gcn_nonsym"

    def __init__(self, spec: BlockSpec, rng, graph: GraphOperator, outer=True):
        super().__init__(spec, outer)
        c = spec.channels_in
        self.K1 = QWeight((c, c), c, rng, spec.bits_w, spec.quant_weights)
        self.K2 = QWeight((c, c), c, rng, spec.bits_w, spec.quant_weights)
        self.q_act = _act_q(spec)
        self._op = graph

    def step(self, x):
        z = self.q_act(T.relu(self._op(_mix(x, self.K1()))))
        return x - self._op.transpose_apply(_mix(z, self.K2())) * self.h


GCN_BLOCKS = {"gcn_sym": GCNSym, "gcn_nonsym": GCNNonSym}


class NodeOpening(Module):
    """sigma(x W^T + b) on node features; full precision."""

    def __init__(self, spec: BlockSpec, rng):
        f, c = spec.channels_in, spec.channels_out
        self.W = Tensor(rng.standard_normal((c, f)) * math.sqrt(2.0 / f), requires_grad=True)
        self.b = Tensor(np.zeros(c), requires_grad=True)

    def __call__(self, x):
        return T.relu(T.linear(x, self.W, self.b))


class NodeClassifier(Module):
    """Per-node affine map to class logits."""

    def __init__(self, spec: BlockSpec, rng):
        c, k = spec.channels_in, spec.channels_out
        self.W = Tensor(rng.standard_normal((k, c)) / math.sqrt(c), requires_grad=True)
        self.b = Tensor(np.zeros(k), requires_grad=True)

    def __call__(self, x):
        return T.linear(x, self.W, self.b)


def node_classifier_loss(logits: Tensor, labels, mask) -> Tensor:
    """Cross-entropy over labelled nodes only."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty label mask")
    return T.cross_entropy(logits, labels, mask=mask)


def gcn_specs(arch: str, depth: int, in_features: int, width: int, num_classes: int,
              h: float = 0.5, bits_w: int = 8, bits_a: int = 8, quantize: bool = True):
    if arch not in ("gcn_sym", "gcn_nonsym"):
        raise ValueError(f"unknown graph architecture {arch!r}")
    common = dict(h=h, bits_w=bits_w, bits_a=bits_a, quant_weights=quantize, quant_acts=quantize)
    return ([BlockSpec("opening", in_features, width, **common)]
            + [BlockSpec(arch, width, width, **common) for _ in range(depth)]
            + [BlockSpec("classifier", width, num_classes, **common)])
