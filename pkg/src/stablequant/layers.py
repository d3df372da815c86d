"""Residual blocks (plain and symmetric), TV activation, stable connectors,
MobileNet-style blocks, and network assembly from a list of BlockSpecs."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .quant import QuantParams, normalize_weights
from .tensor import Tensor
from .tv import GAMMA2_INIT, GAMMA2_MAX, TV_EPS, tv_smooth

IMAGE_KINDS = ("plain_res", "sym_res", "plain_mobile", "sym_mobile", "channel_change", "avg_pool", "tv")
GRAPH_KINDS = ("gcn_sym", "gcn_nonsym")
KINDS = ("opening", "classifier") + IMAGE_KINDS + GRAPH_KINDS
SYMMETRIC_KINDS = ("sym_res", "sym_mobile", "gcn_sym")
RESIDUAL_KINDS = ("plain_res", "sym_res", "plain_mobile", "sym_mobile")


class SpecError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"block spec {index}: {message}")
        self.index = index


@dataclass
class BlockSpec:
    """One network block.

    ``variant`` names the residual update used inside a ``channel_change``
    block; ``expand`` is the hidden width multiplier of mobile blocks.
    """

    kind: str
    channels_in: int
    channels_out: int
    kernel_size: int = 3
    h: float = 0.5
    quant_weights: bool = True
    quant_acts: bool = True
    bits_w: int = 8
    bits_a: int = 8
    tv: bool = False
    tv_gamma2: float = GAMMA2_INIT
    stride: int = 1
    variant: str = "sym_res"
    expand: int = 2

    def validate(self, index: int = 0) -> None:
        if self.kind not in KINDS:
            raise SpecError(index, f"unknown kind {self.kind!r}")
        if self.channels_in < 1 or self.channels_out < 1:
            raise SpecError(index, "channel counts must be positive")
        if not self.h > 0:
            raise SpecError(index, f"step size h must be positive, got {self.h}")
        if self.kernel_size % 2 == 0:
            raise SpecError(index, "kernel size must be odd")
        if self.kind == "channel_change":
            if not self.channels_in <= self.channels_out <= 2 * self.channels_in:
                raise SpecError(index, f"channel_change needs n_in <= n_out <= 2 n_in, "
                                       f"got {self.channels_in} -> {self.channels_out}")
            if self.variant not in RESIDUAL_KINDS:
                raise SpecError(index, f"channel_change variant {self.variant!r} is not a residual kind")
        elif self.kind not in ("opening", "classifier") and self.channels_in != self.channels_out:
            raise SpecError(index, f"{self.kind} keeps the channel count")
        if self.kind != "opening" and self.stride != 1:
            raise SpecError(index, "strides are only allowed in the opening layer")
        if self.bits_w < 2 or self.bits_a < 2:
            raise SpecError(index, "bit widths must be >= 2")


def fingerprint(specs) -> str:
    """Stable hash of the architecture (bit widths excluded, they follow the schedule)."""
    rows = []
    for s in specs:
        d = asdict(s)
        d.pop("bits_w")
        d.pop("bits_a")
        rows.append(d)
    return hashlib.sha256(json.dumps(rows, sort_keys=True).encode()).hexdigest()


class Module:
    """Minimal container: discovers parameters, quantizers and sub-modules by attribute."""

    def _children(self):
        for name, v in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    yield f"{name}.{i}", item
            else:
                yield name, v

    def named_parameters(self, prefix: str = ""):
        for name, v in self._children():
            full = prefix + name
            if isinstance(v, Tensor) and v.requires_grad:
                yield full, v
            elif isinstance(v, QuantParams):
                yield full + ".alpha", v.alpha
            elif isinstance(v, Module):
                yield from v.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_quantizers(self, prefix: str = ""):
        for name, v in self._children():
            full = prefix + name
            if isinstance(v, QuantParams):
                yield full, v
            elif isinstance(v, Module):
                yield from v.named_quantizers(full + ".")

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, v in self._children():
            if isinstance(v, Module):
                yield from v.named_modules(prefix + name + ".")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class QWeight(Module):
    """A learnable kernel: normalize, scale by a learnable gain, fake-quantize.

    Effective kernel = Q_alpha(exp(s) * normalize(w)), so it lies on the
    alpha grid of the weight quantizer. ``freeze`` snapshots the effective
    kernel so repeated forwards reuse identical values.
    """

    def __init__(self, shape, fan_in: int, rng: np.random.Generator, bits: int = 8,
                 quantize: bool = True):
        self.w = Tensor(rng.standard_normal(shape), requires_grad=True)
        # log-parameterised gain: a single scalar fed by every weight is badly
        # conditioned under plain SGD and would otherwise overshoot to zero
        self.log_gain = Tensor(-0.5 * math.log(fan_in), requires_grad=True)
        self.quant = QuantParams(bits=bits, signed=True, role="weight", enabled=quantize)
        self._frozen: np.ndarray | None = None

    @property
    def shape(self):
        return self.w.shape

    def __call__(self) -> Tensor:
        if self._frozen is not None:
            return Tensor(self._frozen)
        return self.quant(normalize_weights(self.w) * T.exp(self.log_gain))

    @property
    def gain(self) -> float:
        return float(np.exp(self.log_gain.data))

    def effective(self) -> np.ndarray:
        if self._frozen is not None:
            return self._frozen
        with T.no_grad():
            return self().data

    def freeze(self, values: np.ndarray | None = None) -> None:
        self._frozen = np.array(self.effective() if values is None else values, dtype=np.float64)

    def unfreeze(self) -> None:
        self._frozen = None

    def rescale(self, factor: float) -> None:
        """Multiply the effective kernel by ``factor`` (gain and grid together)."""
        self.log_gain.data = self.log_gain.data + math.log(factor)
        if self.quant.initialized:
            self.quant.set_alpha(float(self.quant.alpha.data) * factor)

    def project(self) -> None:
        self.quant.project()


class Activation(Module):
    """ReLU, optionally preceded by one TV smoothing step (sigma(S(x)))."""

    def __init__(self, tv: bool = False, gamma2: float = GAMMA2_INIT, eps: float = TV_EPS):
        self.tv = tv
        self.eps = eps
        if tv:
            self.gamma = Tensor(math.sqrt(gamma2), requires_grad=True)

    def __call__(self, z: Tensor) -> Tensor:
        if self.tv:
            z = tv_smooth(z, self.gamma, self.eps, warn=False)
        return T.relu(z)

    def project(self) -> None:
        if self.tv:
            g = abs(float(self.gamma.data))
            self.gamma.data = np.asarray(min(g, math.sqrt(GAMMA2_MAX)))


def _act_q(spec: BlockSpec) -> QuantParams:
    return QuantParams(bits=spec.bits_a, signed=False, enabled=spec.quant_acts)


def _out_q(spec: BlockSpec) -> QuantParams:
    return QuantParams(bits=spec.bits_a, signed=True, enabled=spec.quant_acts)


class Block(Module):
    kind = ""

    def __init__(self, spec: BlockSpec, outer: bool = True):
        self.spec = spec
        self.h = spec.h
        self.q_out = _out_q(spec) if outer else None

    def step(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        y = self.step(x)
        return self.q_out(y) if self.q_out is not None else y

    def kernels(self) -> list[QWeight]:
        return [v for _, v in self._children() if isinstance(v, QWeight)]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class PlainRes(Block):
    """x + h K1 sigma(K2 x)."""

    kind = "plain_res"

    def __init__(self, spec, rng, outer=True):
        super().__init__(spec, outer)
        c, k = spec.channels_in, spec.kernel_size
        self.K1 = QWeight((c, c, k, k), c * k * k, rng, spec.bits_w, spec.quant_weights)
        self.K2 = QWeight((c, c, k, k), c * k * k, rng, spec.bits_w, spec.quant_weights)
        self.act = Activation(spec.tv, spec.tv_gamma2)
        self.q_act = _act_q(spec)

    def step(self, x):
        z = self.q_act(self.act(T.conv2d(x, self.K2())))
        return x + T.conv2d(z, self.K1()) * self.h


class SymRes(Block):
    """x - h K^T sigma(K x) with a single shared kernel."""

    kind = "sym_res"

    def __init__(self, spec, rng, outer=True):
        super().__init__(spec, outer)
        c, k = spec.channels_in, spec.kernel_size
        self.K = QWeight((c, c, k, k), c * k * k, rng, spec.bits_w, spec.quant_weights)
        self.act = Activation(spec.tv, spec.tv_gamma2)
        self.q_act = _act_q(spec)

    def step(self, x):
        K = self.K()
        z = self.q_act(self.act(T.conv2d(x, K)))
        return x - T.conv2d_transpose(z, K) * self.h


class PlainMobile(Block):
    """x + h K3 sigma(K2 sigma(K1 x)); K1, K3 are 1x1, K2 depthwise."""

    kind = "plain_mobile"

    def __init__(self, spec, rng, outer=True):
        super().__init__(spec, outer)
        c, m, k = spec.channels_in, spec.channels_in * spec.expand, spec.kernel_size
        self.K1 = QWeight((m, c, 1, 1), c, rng, spec.bits_w, spec.quant_weights)
        self.K2 = QWeight((m, 1, k, k), k * k, rng, spec.bits_w, spec.quant_weights)
        self.K3 = QWeight((c, m, 1, 1), m, rng, spec.bits_w, spec.quant_weights)
        self.act = Activation(spec.tv, spec.tv_gamma2)
        self.q_act1 = _act_q(spec)
        self.q_act2 = _act_q(spec)

    def step(self, x):
        m = self.K2.shape[0]
        z = self.q_act1(T.relu(T.conv2d(x, self.K1())))
        z = self.q_act2(self.act(T.conv2d(z, self.K2(), groups=m)))
        return x + T.conv2d(z, self.K3()) * self.h


class SymMobile(Block):
    """x - h K1^T K2^T sigma(K2 K1 x); the depthwise K2 is applied twice."""

    kind = "sym_mobile"

    def __init__(self, spec, rng, outer=True):
        super().__init__(spec, outer)
        c, m, k = spec.channels_in, spec.channels_in * spec.expand, spec.kernel_size
        self.K1 = QWeight((m, c, 1, 1), c, rng, spec.bits_w, spec.quant_weights)
        self.K2 = QWeight((m, 1, k, k), k * k, rng, spec.bits_w, spec.quant_weights)
        self.act = Activation(spec.tv, spec.tv_gamma2)
        self.q_act = _act_q(spec)

    def step(self, x):
        K1, K2 = self.K1(), self.K2()
        m = K2.shape[0]
        z = self.q_act(self.act(T.conv2d(T.conv2d(x, K1), K2, groups=m)))
        back = T.conv2d_transpose(T.conv2d_transpose(z, K2, groups=m), K1)
        return x - back * self.h


RESIDUAL_BLOCKS = {cls.kind: cls for cls in (PlainRes, SymRes, PlainMobile, SymMobile)}


class ChannelChange(Block):
    """[x + h F(x); first (n_out - n_in) channels of x], no striding."""

    kind = "channel_change"

    def __init__(self, spec, rng, outer=True):
        super().__init__(spec, outer)
        inner = BlockSpec(**{**asdict(spec), "kind": spec.variant, "channels_out": spec.channels_in})
        self.inner = RESIDUAL_BLOCKS[spec.variant](inner, rng, outer=False)
        self.n_in, self.n_out = spec.channels_in, spec.channels_out

    def step(self, x):
        r = self.inner.step(x)
        extra = self.n_out - self.n_in
        if extra == 0:
            return r
        return T.concat([r, T.narrow(x, 1, 0, extra)], axis=1)

    def kernels(self):
        return self.inner.kernels()


class AvgPool(Block):
    """2x2 average pooling with stride 2; parameter free and never re-quantized."""

    kind = "avg_pool"

    def __init__(self, spec, rng=None, outer=False):
        super().__init__(spec, outer=False)

    def step(self, x):
        return T.avg_pool2d(x, 2)


class TVBlock(Block):
    """A standalone smoothing step S(x) on the residual stream."""

    kind = "tv"

    def __init__(self, spec, rng=None, outer=True):
        super().__init__(spec, outer)
        self.gamma = Tensor(math.sqrt(spec.tv_gamma2), requires_grad=True)

    def step(self, x):
        return tv_smooth(x, self.gamma, TV_EPS, warn=False)

    def project(self):
        g = abs(float(self.gamma.data))
        self.gamma.data = np.asarray(min(g, math.sqrt(GAMMA2_MAX)))


class Opening(Module):
    """sigma(K_open y); full precision, never quantized."""

    def __init__(self, spec: BlockSpec, rng):
        c, co, k = spec.channels_in, spec.channels_out, spec.kernel_size
        self.spec = spec
        self.K = Tensor(rng.standard_normal((co, c, k, k)) * math.sqrt(2.0 / (c * k * k)),
                        requires_grad=True)

    def __call__(self, y):
        return T.relu(T.conv2d(y, self.K, stride=self.spec.stride))


class Classifier(Module):
    """Global average pooling followed by an affine map to logits."""

    def __init__(self, spec: BlockSpec, rng):
        c, n = spec.channels_in, spec.channels_out
        self.W = Tensor(rng.standard_normal((n, c)) / math.sqrt(c), requires_grad=True)
        self.b = Tensor(np.zeros(n), requires_grad=True)

    def __call__(self, x):
        return T.linear(T.global_avg_pool(x), self.W, self.b)


BLOCK_TYPES = {**RESIDUAL_BLOCKS, "channel_change": ChannelChange, "avg_pool": AvgPool, "tv": TVBlock}


@dataclass
class TraceEntry:
    index: int
    kind: str
    activation: np.ndarray


class Network(Module):
    """Opening layer, quantized trunk, full-precision head.

    The trunk input is quantized by ``entry_q`` (unsigned, since the
    opening ends in a ReLU). ``forward(..., trace=list)`` appends one
    :class:`TraceEntry` per trunk block.
    """

    def __init__(self, specs, opening, blocks, head, task="image", graph=None):
        self.specs = list(specs)
        self.opening = opening
        self.entry_q = QuantParams(bits=specs[0].bits_a, signed=False, enabled=specs[0].quant_acts)
        self.blocks = list(blocks)
        self.head = head
        self.task = task
        self._graph = graph
        for name, q in self.named_quantizers():
            q.name = name

    @property
    def graph(self):
        return self._graph

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.specs)

    def features(self, y: Tensor, trace: list | None = None) -> Tensor:
        x = self.entry_q(self.opening(y))
        for i, block in enumerate(self.blocks):
            x = block(x)
            if trace is not None:
                trace.append(TraceEntry(i, block.kind, x.data.copy()))
        return x

    def __call__(self, y, trace: list | None = None) -> Tensor:
        if not isinstance(y, Tensor):
            y = Tensor(y)
        return self.head(self.features(y, trace))

    def trunk_parameters(self) -> int:
        return sum(b.param_count() for b in self.blocks)

    def kernels(self) -> list[tuple[str, QWeight]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, QWeight)]

    def activation_quantizers(self) -> list[QuantParams]:
        return [q for _, q in self.named_quantizers() if q.role == "act"]

    def set_activation_quant(self, enabled: bool) -> None:
        for q in self.activation_quantizers():
            q.enabled = enabled

    def set_bits(self, bits_w: int | None = None, bits_a: int | None = None) -> None:
        for _, q in self.named_quantizers():
            if q.role == "weight" and bits_w is not None:
                q.bits = bits_w
            elif q.role == "act" and bits_a is not None:
                q.bits = bits_a

    def freeze(self) -> None:
        for _, k in self.kernels():
            k.freeze()

    def unfreeze(self) -> None:
        for _, k in self.kernels():
            k.unfreeze()

    def project(self) -> None:
        """Keep scales positive and TV strengths inside their admissible range."""
        for _, m in self.named_modules():
            if isinstance(m, (QWeight, Activation, TVBlock)):
                m.project()
        for _, q in self.named_quantizers():
            q.project()


def _validate_specs(specs, task: str) -> None:
    if len(specs) < 2:
        raise SpecError(0, "a network needs at least an opening and a classifier")
    for i, s in enumerate(specs):
        s.validate(i)
    if specs[0].kind != "opening":
        raise SpecError(0, "first block must be the opening layer")
    if specs[-1].kind != "classifier":
        raise SpecError(len(specs) - 1, "last block must be the classifier")
    allowed = GRAPH_KINDS if task == "graph" else IMAGE_KINDS
    for i, s in enumerate(specs[1:-1], start=1):
        if s.kind not in allowed:
            raise SpecError(i, f"{s.kind} is not a {task} trunk block")
    for i in range(1, len(specs)):
        if specs[i].channels_in != specs[i - 1].channels_out:
            raise SpecError(i, f"expects {specs[i].channels_in} input channels but block {i - 1} "
                               f"produces {specs[i - 1].channels_out}")


def build_network(specs, seed: int = 0, task: str = "image", graph=None) -> Network:
    """Instantiate a network from specs; raises :class:`SpecError` naming the bad index."""
    specs = list(specs)
    if task not in ("image", "graph"):
        raise ValueError(f"unknown task {task!r}")
    _validate_specs(specs, task)
    rng = np.random.default_rng(seed)
    if task == "graph":
        from .graph import GCN_BLOCKS, NodeClassifier, NodeOpening

        if graph is None:
            raise ValueError("graph networks need a GraphOperator")
        opening = NodeOpening(specs[0], rng)
        blocks = [GCN_BLOCKS[s.kind](s, rng, graph) for s in specs[1:-1]]
        head = NodeClassifier(specs[-1], rng)
    else:
        opening = Opening(specs[0], rng)
        blocks = [BLOCK_TYPES[s.kind](s, rng) for s in specs[1:-1]]
        head = Classifier(specs[-1], rng)
    return Network(specs, opening, blocks, head, task=task, graph=graph)


def image_trunk_specs(arch: str, depth: int, in_channels: int, base: int, num_classes: int,
                      h: float = 0.5, bits_w: int = 8, bits_a: int = 8, tv: bool = False,
                      tv_gamma2: float = GAMMA2_INIT, quantize: bool = True,
                      expand: int = 2) -> list[BlockSpec]:
    """Standard desk layout: residual blocks at ``base`` width, one stable
    connector to ``2*base`` followed by average pooling, then residual
    blocks at the wider width. ``depth`` counts parameterised blocks."""
    if arch not in RESIDUAL_KINDS:
        raise ValueError(f"unknown image architecture {arch!r}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    common = dict(h=h, bits_w=bits_w, bits_a=bits_a, tv=tv, tv_gamma2=tv_gamma2,
                  quant_weights=quantize, quant_acts=quantize, expand=expand)
    specs = [BlockSpec("opening", in_channels, base, **common)]
    first = max(depth // 2 - 1, 0)
    width = base
    for _ in range(first):
        specs.append(BlockSpec(arch, width, width, **common))
    if depth > first:
        specs.append(BlockSpec("channel_change", width, 2 * width, variant=arch, **common))
        width *= 2
        specs.append(BlockSpec("avg_pool", width, width, **common))
        for _ in range(depth - first - 1):
            specs.append(BlockSpec(arch, width, width, **common))
    specs.append(BlockSpec("classifier", width, num_classes, **common))
    return specs
