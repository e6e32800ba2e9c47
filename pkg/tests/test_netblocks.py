import itertools
from fractions import Fraction

import numpy as np
import pytest

from binmoire.binconv import ConvSpec
from binmoire.netblocks import (
    BlockConfig,
    CostReport,
    CostRow,
    FpConvConfig,
    NetworkConfig,
    block_forward,
    build_network,
    conv_cost,
    count_params_ops,
    load_config,
    network_forward,
    restore,
)
from binmoire.sgra import init_sgra
from binmoire.tensor_core import ConfigError


def block_params(lay, rng, zero_weights=False, slope=0.25):
    c = lay.conv
    n = lay.name
    p = {
        f"{n}.weight": np.zeros(c.weight_shape) if zero_weights else rng.normal(size=c.weight_shape),
        f"{n}.threshold": np.zeros(c.c_in),
        f"{n}.gamma": np.zeros(c.c_out),
        f"{n}.zeta": np.zeros(c.c_out),
        f"{n}.slope": np.full(c.c_out, slope),
        f"{n}.act_slope": np.ones(1),
        f"{n}.gate_weight": np.zeros(5),
        f"{n}.gate_bias": np.zeros(1),
    }
    if lay.shortcut == "sgra":
        p[f"{n}.sgra"] = init_sgra(c.c_in, c.c_out, c.stride, lay.upsample,
                                   random_state=0, dtype=np.float64).weights
    return p


def test_zero_weight_block_is_identity(rng):
    lay = BlockConfig("b", ConvSpec(4, 4, 3, 1, 1), False, "identity")
    x = rng.normal(size=(2, 4, 6, 6))
    out, _ = block_forward(x, lay, block_params(lay, rng, zero_weights=True, slope=1.0))
    np.testing.assert_array_equal(out, x)


def test_half_gate_halves_main_branch(rng):
    gated = BlockConfig("b", ConvSpec(3, 3, 3, 1, 1), True, "identity")
    plain = BlockConfig("b", ConvSpec(3, 3, 3, 1, 1), False, "identity")
    params = block_params(gated, rng, slope=1.0)
    x = rng.normal(size=(1, 3, 6, 6))
    out_g, cg = block_forward(x, gated, params)
    out_p, cp = block_forward(x, plain, params)
    np.testing.assert_array_equal(cg["beta"], 0.5)
    np.testing.assert_allclose(cg["y"], 0.5 * cp["y"], rtol=1e-12)
    # slope 1 and zero gamma/zeta make RPReLU the identity
    np.testing.assert_allclose(out_g - x, 0.5 * (out_p - x), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize(
    "c_in,c_out,stride",
    list(itertools.product([2, 4], [2, 4, 6], [1, 2])),
)
def test_block_output_shapes(rng, c_in, c_out, stride):
    same = c_in == c_out and stride == 1
    lay = BlockConfig("b", ConvSpec(c_in, c_out, 3, stride, 1), True, "identity" if same else "sgra")
    x = rng.normal(size=(2, c_in, 8, 8))
    out, _ = block_forward(x, lay, block_params(lay, rng))
    assert out.shape == (2, c_out, 8 // stride, 8 // stride)


def test_upsample_block_shape(rng):
    lay = BlockConfig("b", ConvSpec(4, 2, 3, 1, 1), True, "sgra", upsample=2)
    out, _ = block_forward(rng.normal(size=(1, 4, 4, 4)), lay, block_params(lay, rng))
    assert out.shape == (1, 2, 8, 8)


def test_same_seed_same_checksum():
    a, b = build_network(seed=3), build_network(seed=3)
    assert a.checksum() == b.checksum()
    assert build_network(seed=4).checksum() != a.checksum()


def test_minimal_graph():
    net = build_network(NetworkConfig(scales=1, blocks_per_scale=1))
    assert [lay.name for lay in net.layers] == ["head", "enc0.0", "tail"]


def test_default_binarization_flags():
    net = build_network()
    assert isinstance(net.layers[0], FpConvConfig) and isinstance(net.layers[-1], FpConvConfig)
    assert not net.layers[0].binarized and not net.layers[-1].binarized
    assert all(lay.binarized for lay in net.layers[1:-1])
    assert all(isinstance(lay, BlockConfig) for lay in net.layers[1:-1])


def test_shortcut_kinds():
    net = build_network()
    kinds = {lay.name: lay.shortcut for lay in net.layers[1:-1]}
    assert kinds["down0"] == "sgra" and kinds["up0"] == "sgra"
    assert kinds["enc0.0"] == "identity"
    no = build_network(NetworkConfig(use_sgra=False))
    assert no.layer("down0").shortcut == "none"
    assert not any(k.endswith(".sgra") for k in no.params)


def test_forward_shape_and_dtype(rng):
    net = build_network(NetworkConfig(base_channels=4, blocks_per_scale=1, scales=3))
    x = rng.uniform(size=(1, 3, 16, 12)).astype(np.float32)
    out = net.forward(x)
    assert out.shape == x.shape and out.dtype == np.float32
    with pytest.raises(ConfigError):
        net.forward(x[:, :, :14])
    assert restore(net, x[:, :, :13, :11]).shape == (1, 3, 13, 11)


def test_surrogate_mode_runs(rng):
    net = build_network(NetworkConfig(base_channels=2, blocks_per_scale=1), dtype=np.float64)
    x = rng.uniform(size=(1, 3, 8, 8))
    out, caches = network_forward(net, x, mode="surrogate")
    assert out.shape == x.shape and len(caches) > 0
    with pytest.raises(ValueError):
        network_forward(net, x, mode="bogus")


@pytest.mark.parametrize("bad", [
    {"scales": 0}, {"kernel": 4}, {"use_mabg": 1}, {"base_channels": True},
    {"in_channels": 1, "out_channels": 3},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        NetworkConfig(**bad)


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({"widht": 3})


def test_load_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[network]\nscales = 1\nuse_sgra = false\n[train]\nsteps = 5\n")
    cfg, train = load_config(p)
    assert cfg.scales == 1 and cfg.use_sgra is False and train == {"steps": 5}
    p.write_text("[network\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_worked_layer_costs():
    row = conv_cost(64, 64, 3, 64, 64, True)
    assert row.ops_f == 64 * 64 * 9 * 64 * 64 == 150_994_944
    assert row.ops_b == 2_359_296
    assert row.params_b == Fraction(64 * 64 * 9, 32)
    fp = conv_cost(10, 10, 1, 5, 5, False)
    assert fp.params_f == 100 and fp.params_b == 0


def test_sgra_cost_row():
    cfg = NetworkConfig(scales=2, base_channels=32, blocks_per_scale=1)
    rep = count_params_ops(build_network(cfg), 16)
    up = next(r for r in rep.rows if r.name == "up0.sgra")
    assert up.params_f == 64 * 32 // 32 == 64


def test_default_report_rule_holds_per_row():
    rep = count_params_ops(build_network(), 64)
    binrows = [r for r in rep.rows if r.binarized]
    assert len(binrows) == len(build_network().layers) - 2
    for r in binrows:
        assert r.params_b == r.params_f / 32 and r.ops_b == r.ops_f / 64
    assert rep.params == rep.params_b + rep.params_f
    assert "Params" in rep.table()


def test_binarizing_a_row_divides_its_cost():
    rep = count_params_ops(build_network(), 64)
    for i, r in enumerate(rep.rows):
        if r.binarized:
            flipped = CostReport(rep.rows[:i] + [CostRow(r.name, r.params_f, r.ops_f, False)] + rep.rows[i + 1:])
            assert flipped.params - rep.params == r.params_f - r.params_b
            assert r.params_f >= 32 * r.params_b and r.ops_f >= 64 * r.ops_b
            assert flipped.params > rep.params and flipped.ops > rep.ops


def test_report_totals_order_invariant(rng):
    rep = count_params_ops(build_network(), 32)
    rows = list(rep.rows)
    shuffled = CostReport([rows[i] for i in rng.permutation(len(rows))])
    assert (shuffled.params, shuffled.ops) == (rep.params, rep.ops)


def test_count_rejects_bad_hw():
    with pytest.raises(ValueError):
        count_params_ops(build_network(), 0)
