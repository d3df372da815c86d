"""SGD training with gradual bit reduction, plus evaluation helpers."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import node_classifier_loss
from .layers import Network
from .quant import QuantParams
from .tensor import Tensor, cross_entropy
from .tv import tv_norm

LOG_HEADER = ("epoch", "bits", "lr", "train_loss", "train_acc", "val_acc")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    bits_start: int = 16
    bits_decrement: int = 1
    bits_period: int = 10
    bits_target: int = 4
    loss: str = "cross_entropy"
    tv_lambda: float = 0.0
    val_fraction: float = 0.1
    spectral_projection: bool = False

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.bits_target < 2:
            raise ValueError("target bits must be >= 2")
        if self.bits_period < 1:
            raise ValueError("bit schedule period must be >= 1")
        if self.bits_decrement < 0:
            raise ValueError("bit decrement must be >= 0")
        if self.bits_start < self.bits_target:
            raise ValueError("start bits must be >= target bits")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.tv_lambda < 0:
            raise ValueError("TV weight must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.loss != "cross_entropy":
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("validation fraction must be in [0, 1)")


def bit_schedule(epoch: int, cfg: TrainConfig) -> int:
    """Start bits, lowered by ``bits_decrement`` every ``bits_period`` epochs, floored at target."""
    return max(cfg.bits_target, cfg.bits_start - cfg.bits_decrement * (epoch // cfg.bits_period))


def cosine_lr(epoch: float, total: float, lr0: float) -> float:
    if total <= 0:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * epoch / total)) / 2.0


def tv_regularizer(maps, lam: float) -> Tensor:
    """lam * sum of anisotropic TV norms of the given feature maps."""
    if lam < 0:
        raise ValueError("TV weight must be >= 0")
    total = Tensor(0.0)
    for m in maps:
        total = total + tv_norm(m)
    return total * lam


def sgd_step(params, velocity: dict, lr: float, momentum: float, quantizers=()) -> None:
    """Heavy-ball update v <- mu v + g, p <- p - lr v; then keep clip scales positive."""
    for p in params:
        if p.grad is None:
            continue
        v = velocity.get(id(p))
        v = p.grad.copy() if v is None else momentum * v + p.grad
        velocity[id(p)] = v
        p.data = p.data - lr * v
    for q in quantizers:
        q.project()


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else math.nan


def predict(net: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(net(Tensor(x[i:i + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, net.specs[-1].channels_out))


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> dict:
    logits = predict(net, x, batch_size)
    with T.no_grad():
        loss = float(cross_entropy(Tensor(logits), y).data) if len(y) else math.nan
    return {"loss": loss, "acc": accuracy(logits, y)}


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None

    def to_csv(self) -> str:
        return log_to_csv(self.log)


def log_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r["epoch"], r["bits"], repr(r["lr"]), repr(r["train_loss"]),
                    repr(r["train_acc"]), repr(r["val_acc"])])
    return buf.getvalue()


def _quantizers(net: Network) -> list[QuantParams]:
    return [q for _, q in net.named_quantizers()]


def _end_of_epoch(net: Network, cfg: TrainConfig) -> None:
    # spectral projection is comparatively costly, so it runs once per epoch
    if cfg.spectral_projection:
        from .stability import project_step_bound

        project_step_bound(net, input_hw=getattr(net, "_input_hw", (16, 16)))


def train(net: Network, data, cfg: TrainConfig, log_fn=None) -> TrainResult:
    """Train ``net`` in place.

    ``data`` is an :class:`~stablequant.data.ImageData` (mini-batch SGD with
    a 10% holdout by default) or a :class:`~stablequant.data.GraphData`
    (full-batch, masked loss). Raises :class:`TrainingError` on a
    non-finite loss, naming the epoch.
    """
    cfg.validate()
    from .data import GraphData

    if isinstance(data, GraphData):
        return _train_graph(net, data, cfg, log_fn)
    return _train_images(net, data, cfg, log_fn)


def _set_epoch_bits(net, epoch, cfg):
    # both roles follow one schedule, each floored at the width its specs ask for
    bits = bit_schedule(epoch, cfg)
    net.set_bits(bits_w=max(bits, net.specs[0].bits_w), bits_a=max(bits, net.specs[0].bits_a))
    return bits


def _train_images(net, data, cfg, log_fn):
    from .data import split_holdout

    if len(data.x) == 0:
        raise ValueError("empty dataset")
    train_idx, val_idx = split_holdout(len(data.x), cfg.val_fraction, cfg.seed)
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(cfg.seed + 1)
    params = net.parameters()
    quantizers = _quantizers(net)
    velocity: dict = {}
    result = TrainResult(train_idx=train_idx, val_idx=val_idx)
    for epoch in range(cfg.epochs):
        bits = _set_epoch_bits(net, epoch, cfg)
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        order = train_idx[rng.permutation(len(train_idx))]
        tot_loss, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = Tensor(data.x[idx]), data.y[idx]
            feats = net.features(xb)
            logits = net.head(feats)
            loss = cross_entropy(logits, yb)
            if cfg.tv_lambda > 0:
                loss = loss + tv_regularizer([feats], cfg.tv_lambda / len(idx))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            net.zero_grad()
            loss.backward()
            sgd_step(params, velocity, lr, cfg.momentum, quantizers)
            net.project()
            tot_loss += value * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        _end_of_epoch(net, cfg)
        val_acc = evaluate(net, data.x[val_idx], data.y[val_idx])["acc"] if len(val_idx) else math.nan
        row = {"epoch": epoch, "bits": bits, "lr": lr, "train_loss": tot_loss / len(order),
               "train_acc": correct / len(order), "val_acc": val_acc}
        result.log.append(row)
        if log_fn:
            log_fn(row)
    return result


def _train_graph(net, data, cfg, log_fn):
    g = data.graph
    if g.n == 0 or not data.train_mask.any():
        raise ValueError("empty dataset")
    params = net.parameters()
    quantizers = _quantizers(net)
    velocity: dict = {}
    x = Tensor(g.features)
    result = TrainResult(train_idx=np.flatnonzero(data.train_mask), val_idx=np.flatnonzero(data.val_mask))
    for epoch in range(cfg.epochs):
        bits = _set_epoch_bits(net, epoch, cfg)
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        logits = net(x)
        loss = node_classifier_loss(logits, g.labels, data.train_mask)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        net.zero_grad()
        loss.backward()
        sgd_step(params, velocity, lr, cfg.momentum, quantizers)
        net.project()
        _end_of_epoch(net, cfg)
        with T.no_grad():
            out = net(x).data
        m = data.train_mask
        row = {"epoch": epoch, "bits": bits, "lr": lr, "train_loss": value,
               "train_acc": accuracy(out[m], g.labels[m]),
               "val_acc": accuracy(out[data.val_mask], g.labels[data.val_mask])}
        result.log.append(row)
        if log_fn:
            log_fn(row)
    return result


def graph_accuracy(net: Network, data, mask) -> float:
    with T.no_grad():
        out = net(Tensor(data.graph.features)).data
    return accuracy(out[mask], data.graph.labels[mask])
