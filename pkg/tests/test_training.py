import statistics

import numpy as np
import pytest

from stablequant import tensor as T
from stablequant.checkpoint import save_checkpoint
from stablequant.data import make_images, make_sbm
from stablequant.graph import GraphOperator, gcn_specs
from stablequant.layers import build_network, image_trunk_specs
from stablequant.quant import QuantParams
from stablequant.tensor import Tensor
from stablequant.training import (LOG_HEADER, TrainConfig, TrainingError, bit_schedule, cosine_lr,
                                  evaluate, sgd_step, train)


def tiny(arch="sym_res", seed=0, quantize=True, classes=2, **kw):
    return build_network(image_trunk_specs(arch, 2, 1, 4, classes, quantize=quantize, **kw), seed=seed)


# -- optimizer and schedules ------------------------------------------------------------

def _param(value, grad):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return p


def test_sgd_examples():
    p = _param(0.0, 1.0)
    sgd_step([p], {}, lr=0.1, momentum=0.0)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-16)
    p = _param(0.7, 0.0)
    sgd_step([p], {}, lr=0.1, momentum=0.9)
    assert p.data[0] == 0.7
    p, vel = _param(0.0, 1.0), {}
    sgd_step([p], vel, lr=1.0, momentum=0.9)
    sgd_step([p], vel, lr=1.0, momentum=0.9)
    assert p.data[0] == pytest.approx(-2.9, abs=1e-15)


def test_sgd_keeps_scales_positive():
    q = QuantParams(bits=4)
    q.set_alpha(0.01)
    q.alpha.grad = np.asarray(10.0)
    sgd_step([q.alpha], {}, lr=1.0, momentum=0.0, quantizers=[q])
    assert float(q.alpha.data) > 0


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 0.1) == 0.1
    assert cosine_lr(100, 100, 0.1) == 0.0
    assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05, abs=1e-17)


def test_bit_schedule_examples():
    cfg = TrainConfig()
    assert bit_schedule(0, cfg) == 16
    assert bit_schedule(9, cfg) == 16
    assert bit_schedule(10, cfg) == 15
    assert bit_schedule(1000, cfg) == 4


@pytest.mark.parametrize("field,value", [
    ("epochs", -1), ("bits_target", 1), ("bits_period", 0), ("bits_start", 3), ("batch_size", 0),
    ("tv_lambda", -0.1), ("momentum", 1.0), ("loss", "mse"), ("val_fraction", 1.0),
])
def test_config_validation(field, value):
    cfg = TrainConfig(**{field: value})
    with pytest.raises(ValueError):
        cfg.validate()


# -- training loop ------------------------------------------------------------------

def test_zero_epochs_leaves_network_untouched(tmp_path):
    data = make_images(32, classes=2, kind="blobs", seed=0)
    a, b = tiny(seed=3), tiny(seed=3)
    result = train(a, data, TrainConfig(epochs=0))
    assert result.log == []
    save_checkpoint(tmp_path / "a", a)
    save_checkpoint(tmp_path / "b", b)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_determinism(tmp_path):
    data = make_images(96, classes=2, kind="blobs", seed=1)
    cfg = TrainConfig(epochs=3, lr=0.05, bits_start=8, bits_period=1, seed=5)
    blobs = []
    for run in range(2):
        net = tiny(seed=2)
        result = train(net, data, cfg)
        save_checkpoint(tmp_path / f"c{run}", net)
        blobs.append((result.to_csv(), (tmp_path / f"c{run}").read_bytes()))
    assert blobs[0] == blobs[1]


def test_nan_loss_names_epoch():
    data = make_images(16, classes=2, kind="blobs", seed=0)
    data.x[3] = np.nan
    with pytest.raises(TrainingError, match="epoch 0"):
        train(tiny(), data, TrainConfig(epochs=2, val_fraction=0.0))


def test_log_layout_and_bits():
    data = make_images(40, classes=2, kind="blobs", seed=0)
    cfg = TrainConfig(epochs=4, bits_start=7, bits_period=2, bits_target=4, lr=0.01)
    result = train(tiny(bits_w=4, bits_a=4), data, cfg)
    assert [r["bits"] for r in result.log] == [7, 7, 6, 6]
    lines = result.to_csv().splitlines()
    assert lines[0] == ",".join(LOG_HEADER) and len(lines) == 5


def test_scales_positive_after_training():
    data = make_images(64, classes=2, kind="blobs", seed=0)
    net = tiny(bits_w=4, bits_a=4)
    train(net, data, TrainConfig(epochs=2, lr=0.5, bits_start=4))
    assert all(float(q.alpha.data) > 0 for _, q in net.named_quantizers())


def test_unquantized_loop_is_plain_sgd():
    data = make_images(24, classes=2, kind="blobs", seed=2)
    cfg = TrainConfig(epochs=1, lr=0.05, momentum=0.0, batch_size=1000, val_fraction=0.0)
    net, ref = tiny(seed=4, quantize=False), tiny(seed=4, quantize=False)
    train(net, data, cfg)
    loss = T.cross_entropy(ref(Tensor(data.x)), data.y)
    ref.zero_grad()
    loss.backward()
    for (name, p), (_, r) in zip(net.named_parameters(), ref.named_parameters()):
        expect = r.data if r.grad is None else r.data - cfg.lr * r.grad
        np.testing.assert_allclose(p.data, expect, rtol=1e-10, atol=1e-12, err_msg=name)


def test_separable_blobs_reach_high_train_accuracy():
    data = make_images(200, classes=2, kind="blobs", noise=0.1, seed=3)
    net = tiny("sym_res", seed=0, quantize=False)
    result = train(net, data, TrainConfig(epochs=50, lr=0.1, val_fraction=0.0, seed=0))
    best = max(r["train_acc"] for r in result.log)
    assert best >= 0.99
    assert evaluate(net, data.x, data.y)["acc"] >= 0.99


@pytest.mark.parametrize("arch", ["plain_res", "sym_res", "plain_mobile", "sym_mobile"])
def test_loss_decreases_first_epochs(arch):
    drops = []
    for seed in range(3):
        data = make_images(96, classes=2, kind="blobs", seed=seed)
        result = train(tiny(arch, seed=seed), data, TrainConfig(epochs=10, lr=0.05, seed=seed))
        drops.append(result.log[-1]["train_loss"] - result.log[0]["train_loss"])
    assert statistics.median(drops) < 0


def test_tv_regularizer_and_tv_layers_train():
    data = make_images(48, classes=2, kind="blobs", seed=0)
    net = tiny(tv=True)
    result = train(net, data, TrainConfig(epochs=2, lr=0.05, tv_lambda=0.01))
    assert np.isfinite(result.log[-1]["train_loss"])


def test_graph_training_reduces_loss():
    g = make_sbm(80, 3, 0.2, 0.02, features=6, seed=0)
    net = build_network(gcn_specs("gcn_sym", 2, 6, 8, 3), task="graph", graph=GraphOperator(g.graph))
    result = train(net, g, TrainConfig(epochs=20, lr=0.05, bits_start=8, bits_target=8))
    assert result.log[-1]["train_loss"] < result.log[0]["train_loss"]
