import numpy as np
import pytest

from stablequant import tensor as T
from stablequant.layers import (AvgPool, BlockSpec, ChannelChange, PlainMobile, PlainRes, SpecError,
                                SymMobile, SymRes, TVBlock, build_network, fingerprint,
                                image_trunk_specs)
from stablequant.quant import OffGridError, to_integer
from stablequant.tensor import Tensor

from conftest import numeric_grad

ONE = np.ones((1, 1, 1, 1))
ZERO = np.zeros((1, 1, 1, 1))


def scalar_block(cls, h=1.0, quant=False, **kw):
    spec = BlockSpec(cls.kind, 1, 1, kernel_size=1, h=h, quant_weights=quant, quant_acts=quant,
                     expand=1, **kw)
    return cls(spec, np.random.default_rng(0))


def run(block, x):
    with T.no_grad():
        return block(Tensor(np.asarray(x, dtype=float).reshape(1, 1, 1, -1))).data.ravel()


# -- scalar worked examples --------------------------------------------------------

def test_plain_res_scalar():
    b = scalar_block(PlainRes)
    b.K1.freeze(ONE)
    b.K2.freeze(ONE)
    assert run(b, 1.0)[0] == 2.0


def test_sym_res_scalar():
    b = scalar_block(SymRes, h=0.5)
    b.K.freeze(ONE)
    assert run(b, 1.0)[0] == 0.5


def test_plain_mobile_scalar():
    b = scalar_block(PlainMobile)
    for k in (b.K1, b.K2, b.K3):
        k.freeze(ONE)
    assert run(b, 1.0)[0] == 2.0
    assert run(b, -0.7)[0] == -0.7


def test_sym_mobile_scalar():
    b = scalar_block(SymMobile)
    b.K1.freeze(ONE)
    b.K2.freeze(ONE)
    assert run(b, 1.0)[0] == 0.0
    assert run(b, -2.0)[0] == -2.0


def test_zero_kernels_give_quantized_input():
    x = np.array([-1.3, -0.2, 0.4, 0.9, 2.5])
    for cls in (PlainRes, SymRes):
        b = scalar_block(cls, quant=True)
        for k in b.kernels():
            k.freeze(ZERO)
        b.q_act.set_alpha(1.0)
        b.q_out.set_alpha(1.0)
        with T.no_grad():
            expect = b.q_out(Tensor(x)).data
        np.testing.assert_array_equal(run(b, x), expect)


def test_zero_step_gives_quantized_input():
    x = np.array([-0.6, 0.1, 0.33])
    b = scalar_block(SymRes, quant=True)
    b.K.freeze(ONE)
    b.h = 0.0
    b.q_out.set_alpha(1.0)
    with T.no_grad():
        expect = b.q_out(Tensor(x)).data
    np.testing.assert_array_equal(run(b, x), expect)


def test_sym_dead_relu_is_identity_before_quantization():
    b = scalar_block(SymRes, quant=False)
    b.K.freeze(ONE)
    x = np.array([-3.0, -0.5, 0.0])
    np.testing.assert_array_equal(run(b, x), x)


def test_zero_mobile_kernels():
    for cls in (PlainMobile, SymMobile):
        b = scalar_block(cls)
        for k in b.kernels():
            k.freeze(ZERO)
        np.testing.assert_array_equal(run(b, [0.3, -1.0]), [0.3, -1.0])


# -- channel change / pooling ------------------------------------------------------

def _cc(n_in, n_out, variant="sym_res"):
    spec = BlockSpec("channel_change", n_in, n_out, variant=variant, quant_weights=False, quant_acts=False)
    return ChannelChange(spec, np.random.default_rng(1))


def test_channel_change_layout():
    b = _cc(4, 6)
    x = np.random.default_rng(2).standard_normal((2, 4, 5, 5))
    with T.no_grad():
        out = b(Tensor(x)).data
        resid = b.inner.step(Tensor(x)).data
    assert out.shape == (2, 6, 5, 5)
    np.testing.assert_array_equal(out[:, :4], resid)
    np.testing.assert_array_equal(out[:, 4:], x[:, :2])


def test_channel_change_degenerate_and_full():
    x = np.random.default_rng(3).standard_normal((1, 3, 4, 4))
    same = _cc(3, 3, "plain_res")
    plain = PlainRes(BlockSpec("plain_res", 3, 3, quant_weights=False, quant_acts=False),
                     np.random.default_rng(1))
    with T.no_grad():
        np.testing.assert_array_equal(same(Tensor(x)).data, plain(Tensor(x)).data)
        full = _cc(3, 6)(Tensor(x)).data
    np.testing.assert_array_equal(full[:, 3:], x)


def test_channel_change_too_wide_rejected():
    specs = [BlockSpec("opening", 1, 4), BlockSpec("channel_change", 4, 9), BlockSpec("classifier", 9, 2)]
    with pytest.raises(SpecError) as info:
        build_network(specs)
    assert info.value.index == 1


def test_avg_pool_halves_and_has_no_parameters():
    b = AvgPool(BlockSpec("avg_pool", 2, 2))
    x = np.arange(32.0).reshape(1, 2, 4, 4)
    with T.no_grad():
        out = b(Tensor(x)).data
    assert out.shape == (1, 2, 2, 2) and out[0, 0, 0, 0] == np.mean([0, 1, 4, 5])
    assert b.param_count() == 0


# -- opening / head / build --------------------------------------------------------

def test_opening_zero_input_and_gap_constant():
    net = build_network([BlockSpec("opening", 2, 3), BlockSpec("classifier", 3, 4)], seed=0)
    with T.no_grad():
        assert np.all(net.opening(Tensor(np.zeros((1, 2, 4, 4)))).data == 0)
        np.testing.assert_array_equal(T.global_avg_pool(Tensor(np.full((1, 3, 4, 4), 0.5))).data,
                                      np.full((1, 3), 0.5))


def test_empty_trunk_is_linear_model():
    net = build_network([BlockSpec("opening", 1, 4, quant_acts=False), BlockSpec("classifier", 4, 3)])
    assert net.blocks == [] and net.trunk_parameters() == 0
    with T.no_grad():
        assert net(np.ones((2, 1, 8, 8))).shape == (2, 3)


def test_mixed_trunk_records_kinds():
    specs = [BlockSpec("opening", 1, 4), BlockSpec("sym_res", 4, 4), BlockSpec("plain_res", 4, 4),
             BlockSpec("tv", 4, 4), BlockSpec("classifier", 4, 2)]
    net = build_network(specs)
    trace = []
    with T.no_grad():
        net(np.random.default_rng(0).standard_normal((1, 1, 8, 8)), trace=trace)
    assert [t.kind for t in trace] == ["sym_res", "plain_res", "tv"]


@pytest.mark.parametrize("specs,index", [
    ([BlockSpec("sym_res", 4, 4), BlockSpec("classifier", 4, 2)], 0),
    ([BlockSpec("opening", 1, 4), BlockSpec("sym_res", 4, 4), BlockSpec("classifier", 5, 2)], 2),
    ([BlockSpec("opening", 1, 4), BlockSpec("gcn_sym", 4, 4), BlockSpec("classifier", 4, 2)], 1),
    ([BlockSpec("opening", 1, 4), BlockSpec("sym_res", 4, 4, h=-1.0), BlockSpec("classifier", 4, 2)], 1),
    ([BlockSpec("opening", 1, 4), BlockSpec("bogus", 4, 4), BlockSpec("classifier", 4, 2)], 1),
])
def test_build_errors_name_index(specs, index):
    with pytest.raises(SpecError) as info:
        build_network(specs)
    assert info.value.index == index and f"block spec {index}" in str(info.value)


def test_fingerprint_tracks_specs():
    a = image_trunk_specs("sym_res", 4, 1, 8, 4)
    b = image_trunk_specs("plain_res", 4, 1, 8, 4)
    assert fingerprint(a) == fingerprint(image_trunk_specs("sym_res", 4, 1, 8, 4))
    assert fingerprint(a) != fingerprint(b)


# -- parameter accounting ------------------------------------------------------------

def test_kernel_counts_per_block():
    spec = BlockSpec("x", 4, 4)
    rng = np.random.default_rng(0)
    assert len(SymRes(spec, rng).kernels()) == 1
    assert len(PlainRes(spec, rng).kernels()) == 2
    assert len(SymMobile(spec, rng).kernels()) == 2
    assert len(PlainMobile(spec, rng).kernels()) == 3


def test_sym_trunk_stores_half_the_kernels():
    sym = build_network(image_trunk_specs("sym_res", 6, 1, 8, 4))
    plain = build_network(image_trunk_specs("plain_res", 6, 1, 8, 4))
    assert 0.45 <= sym.trunk_parameters() / plain.trunk_parameters() <= 0.55
    assert 2 * len(sym.kernels()) == len(plain.kernels())


def test_tv_adds_only_gamma():
    base = SymRes(BlockSpec("sym_res", 3, 3), np.random.default_rng(0)).param_count()
    tv = SymRes(BlockSpec("sym_res", 3, 3, tv=True), np.random.default_rng(0)).param_count()
    assert tv - base == 1
    names = [n for n, _ in TVBlock(BlockSpec("tv", 3, 3)).named_parameters()]
    assert [n for n in names if not n.endswith(".alpha")] == ["gamma"]


def test_tv_gamma_clipped_by_projection():
    net = build_network([BlockSpec("opening", 1, 2), BlockSpec("sym_res", 2, 2, tv=True),
                         BlockSpec("tv", 2, 2), BlockSpec("classifier", 2, 2)])
    net.blocks[0].act.gamma.data = np.asarray(5.0)
    net.blocks[1].gamma.data = np.asarray(-5.0)
    net.project()
    assert float(net.blocks[0].act.gamma.data) ** 2 == pytest.approx(0.1)
    assert float(net.blocks[1].gamma.data) ** 2 == pytest.approx(0.1)


def test_quantized_kernel_lies_on_grid():
    b = SymRes(BlockSpec("sym_res", 3, 3, bits_w=4), np.random.default_rng(5))
    k = b.K.effective()
    to_integer(k, b.K.quant)
    with pytest.raises(OffGridError):
        to_integer(k, alpha=float(b.K.quant.alpha.data), bits=8, signed=True)


def test_rescale_moves_kernel_and_grid_together():
    b = SymRes(BlockSpec("sym_res", 2, 2, bits_w=4), np.random.default_rng(6))
    k0 = b.K.effective()
    b.K.rescale(0.5)
    np.testing.assert_allclose(b.K.effective(), 0.5 * k0, rtol=1e-12, atol=1e-15)


# -- gradients through whole blocks ------------------------------------------------------

@pytest.mark.parametrize("kind", ["plain_res", "sym_res", "plain_mobile", "sym_mobile", "channel_change"])
def test_block_parameter_gradients(kind):
    spec = BlockSpec(kind, 2, 3 if kind == "channel_change" else 2, quant_weights=False,
                     quant_acts=False, tv=True, tv_gamma2=0.05)
    rng = np.random.default_rng(11)
    net = build_network([BlockSpec("opening", 1, 2, quant_acts=False), spec,
                         BlockSpec("classifier", spec.channels_out, 3)], seed=3)
    x = Tensor(rng.standard_normal((2, 1, 6, 6)))
    labels = np.array([0, 2])

    def loss():
        return T.cross_entropy(net(x), labels)

    net.zero_grad()
    loss().backward()
    for name, p in net.named_parameters():
        if p.grad is None:
            # scales of disabled quantizers take no part in the forward pass
            assert name.endswith("alpha")
            continue

        def f(v, p=p):
            old = p.data
            p.data = v
            with T.no_grad():
                out = float(loss().data)
            p.data = old
            return out

        num = numeric_grad(f, np.array(p.data, dtype=float))
        scale = max(np.abs(num).max(), 1e-12)
        rel = np.abs(p.grad - num) / np.maximum(np.abs(num), 1e-3 * scale)
        assert rel.max() <= 1e-5, name
