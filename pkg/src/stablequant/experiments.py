"""Experiment drivers shared by the CLI, the scripts and the acceptance suite."""
from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import GraphData, ImageData, make_images, make_sbm
from .layers import Network, build_network
from .stability import DivergenceReport, divergence, paired_trace
from .training import TrainResult, evaluate, graph_accuracy, train

# desk-scale layouts used by the stability comparisons
IMAGE_STABILITY = ExperimentConfig(task="image", arch="sym_res", depth=6, base=8, bits_w=4, bits_a=4,
                                   epochs=30, lr=0.05, bits_period=2, spectral_projection=True,
                                   data_size=1024, test_size=256, num_classes=4, noise=0.5)
GRAPH_STABILITY = ExperimentConfig(task="graph", arch="gcn_sym", depth=8, base=32, bits_w=4, bits_a=4,
                                   epochs=150, lr=0.05, bits_period=10, spectral_projection=True,
                                   graph_nodes=200, graph_blocks=4, feature_noise=0.3,
                                   train_per_class=20)


def make_data(cfg: ExperimentConfig):
    """Training data plus a held-out evaluation set (image) or masks (graph)."""
    if cfg.task == "graph":
        return make_sbm(cfg.graph_nodes, cfg.graph_blocks, cfg.p_in, cfg.p_out, cfg.graph_features,
                        cfg.feature_noise, cfg.train_per_class, seed=cfg.data_seed)
    d = make_images(cfg.data_size + cfg.test_size, cfg.num_classes, cfg.channels, cfg.image_size,
                    cfg.noise, cfg.data_kind, seed=cfg.data_seed)
    n = cfg.data_size
    return (ImageData(d.x[:n], d.y[:n], d.num_classes),
            ImageData(d.x[n:], d.y[n:], d.num_classes))


def build_from_config(cfg: ExperimentConfig, data=None) -> Network:
    if cfg.task == "graph":
        from .graph import GraphOperator

        if data is None:
            data = make_data(cfg)
        return build_network(cfg.specs(), seed=cfg.seed, task="graph", graph=GraphOperator(data.graph))
    net = build_network(cfg.specs(), seed=cfg.seed)
    net._input_hw = (cfg.image_size, cfg.image_size)
    return net


def held_out(cfg: ExperimentConfig, data):
    """Inputs used for paired traces and the matching accuracy."""
    if cfg.task == "graph":
        return data.graph.features
    return data[1].x


def test_accuracy(net: Network, cfg: ExperimentConfig, data) -> float:
    if cfg.task == "graph":
        return graph_accuracy(net, data, data.test_mask)
    return evaluate(net, data[1].x, data[1].y)["acc"]


@dataclass
class RunResult:
    arch: str
    seed: int
    accuracy: float
    report: DivergenceReport
    log: TrainResult
    net: Network
    seconds: float


def train_and_trace(cfg: ExperimentConfig, bits_a: int = 4, data=None) -> RunResult:
    """Train one network, then compare its quantized and full-precision activations."""
    start = time.perf_counter()
    data = make_data(cfg) if data is None else data
    net = build_from_config(cfg, data)
    train_data = data if isinstance(data, GraphData) else data[0]
    log = train(net, train_data, cfg.train_config())
    acc = test_accuracy(net, cfg, data)
    tq, tf = paired_trace(net, held_out(cfg, data), bits_a)
    meta = {"arch": cfg.arch, "seed": cfg.seed, "bits_a": bits_a, "bits_w": cfg.bits_w}
    return RunResult(cfg.arch, cfg.seed, acc, divergence(tq, tf, meta), log, net,
                     time.perf_counter() - start)


def compare_architectures(base: ExperimentConfig, archs: tuple[str, str], seeds=(0, 1, 2),
                          bits_a: int = 4, progress=None) -> list[dict]:
    """Per seed: train both architectures on the same data and record final-block MSE."""
    rows = []
    for seed in seeds:
        cfg0 = dataclasses.replace(base, seed=seed, data_seed=seed)
        data = make_data(cfg0)
        pair = {}
        for arch in archs:
            pair[arch] = train_and_trace(dataclasses.replace(cfg0, arch=arch), bits_a, data)
            if progress:
                progress(pair[arch])
        rows.append(pair)
    return rows


def summarize(rows: list[dict], archs: tuple[str, str]) -> dict:
    """Median final-block MSE per architecture and how often the second is below the first."""
    a, b = archs
    finals = {k: [r[k].report.final for r in rows] for k in archs}
    return {"median_" + a: statistics.median(finals[a]),
            "median_" + b: statistics.median(finals[b]),
            "wins": sum(r[b].report.final < r[a].report.final for r in rows),
            "max_acc_gap": max(abs(r[a].accuracy - r[b].accuracy) for r in rows),
            "finals": finals}


def seeded_inputs(n: int, shape, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n,) + tuple(shape))
