import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from energy_inpaint import tensor as tc
from energy_inpaint.energy_net import (
    EnergyNetConfig,
    EnergyNetParams,
    energy,
    init_params,
    input_path_forward,
    output_path_forward,
    param_shapes,
    parse_name,
    zeros_params,
)
from energy_inpaint.gradcheck import TINY, draw_energy_point
from energy_inpaint.tensor import Tensor, grad

from oracles import conv2d_naive, fc_naive, path_oracle

SMALL = EnergyNetConfig(num_conv_layers=2, feature_maps=3, kernel=3, stride=2, fc_dim=2, image_side=8)


def batch(rng, cfg, n=1, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, size=(n, cfg.input_channels, cfg.image_side, cfg.image_side))


def with_arrays(cfg, **overrides):
    arrays = zeros_params(cfg).arrays()
    arrays.update(overrides)
    return EnergyNetParams.from_arrays(cfg, arrays)


# --- config and shapes -------------------------------------------------------


def test_default_config():
    cfg = EnergyNetConfig()
    assert (cfg.num_conv_layers, cfg.feature_maps, cfg.kernel, cfg.strides, cfg.fc_dim) == (3, 32, 5, (2, 2, 2), 1)
    assert cfg.sides() == [64, 32, 16, 8]


@pytest.mark.parametrize(
    "kw",
    [
        dict(num_conv_layers=0),
        dict(feature_maps=0),
        dict(fc_dim=0),
        dict(kernel=4),
        dict(image_side=28),  # 28 is not divisible by 8
        dict(stride=(2, 2)),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        EnergyNetConfig(**kw)


def test_per_layer_strides_allow_mnist_side():
    cfg = EnergyNetConfig(image_side=28, stride=(2, 2, 1))
    assert cfg.sides() == [28, 14, 7, 7]


def test_config_dict_round_trip():
    for cfg in (EnergyNetConfig(), EnergyNetConfig(image_side=28, stride=[2, 2, 1])):
        assert EnergyNetConfig.from_dict(cfg.to_dict()) == cfg


def test_param_shapes_layout():
    shapes = param_shapes(EnergyNetConfig())
    assert shapes["input.conv0.weight"] == (32, 1, 5, 5)
    assert shapes["input.conv2.weight"] == (32, 32, 5, 5)
    assert shapes["input.fc.weight"] == (1, 32 * 8 * 8)
    assert shapes["output.conv0.weight_v"] == (32, 1, 5, 5)
    assert "output.conv0.weight_u" not in shapes and "output.conv0.weight_z" not in shapes
    assert shapes["output.conv1.weight_u"] == (32, 32, 5, 5)
    assert shapes["output.conv1.weight_z"] == (32, 1, 5, 5)
    assert shapes["output.fc.bias"] == (1,)
    assert len(shapes) == 3 * 2 + 2 + (2 + 4 * 2) + 2


@settings(max_examples=30, deadline=None)
@given(
    L=st.integers(1, 3),
    K=st.integers(1, 4),
    kernel=st.sampled_from([1, 3, 5]),
    fc=st.integers(1, 3),
    C=st.sampled_from([1, 3]),
    mult=st.integers(1, 3),
)
def test_shape_function_is_total(L, K, kernel, fc, C, mult):
    cfg = EnergyNetConfig(num_conv_layers=L, feature_maps=K, kernel=kernel, fc_dim=fc, input_channels=C, image_side=2**L * mult)
    params = init_params(cfg, 0)
    for name, shape in param_shapes(cfg).items():
        assert params[name].shape == shape
        path, layer, role = parse_name(name)
        assert path in ("input", "output") and role
    x = np.random.default_rng(0).uniform(size=(1, C, cfg.image_side, cfg.image_side))
    assert energy(Tensor(x), Tensor(x), params).shape == ()


# --- init -------------------------------------------------------------------


def test_init_is_deterministic_with_zero_biases():
    a, b = init_params(EnergyNetConfig(), 7), init_params(EnergyNetConfig(), 7)
    assert a.equals(b)
    assert not a.equals(init_params(EnergyNetConfig(), 8))
    for name, arr in a.arrays().items():
        if name.endswith("bias"):
            assert not arr.any()


def test_init_weight_variance():
    w = init_params(EnergyNetConfig(), 3)["input.conv0.weight"].data
    assert w.shape == (32, 1, 5, 5)
    expect = (6.0 / 25) / 3
    assert abs(w.var() - expect) / expect < 0.2


def test_float32_params():
    p = init_params(SMALL, 0, dtype=np.float32)
    assert p.dtype == np.float32
    assert all(t.dtype == np.float32 for t in p.tensors())


# --- input path --------------------------------------------------------------


def test_input_path_zero_params(rng):
    feats, fc = input_path_forward(Tensor(batch(rng, SMALL)), zeros_params(SMALL))
    assert all(not u.data.any() for u in feats)
    assert not fc.data.any()


def test_input_path_identity():
    cfg = EnergyNetConfig(num_conv_layers=1, feature_maps=1, kernel=1, stride=1, image_side=5)
    params = with_arrays(cfg, **{"input.conv0.weight": np.ones((1, 1, 1, 1))})
    x = np.random.default_rng(0).uniform(0, 1, size=(1, 1, 5, 5))
    (u1,), _ = input_path_forward(Tensor(x), params)
    np.testing.assert_array_equal(u1.data, x)


def test_input_path_matches_layer_oracle(rng):
    params = init_params(SMALL, 1)
    arr = params.arrays()
    x = batch(rng, SMALL)
    feats, fc = input_path_forward(Tensor(x), params)
    u = x
    for l in range(SMALL.num_conv_layers):
        u = np.maximum(conv2d_naive(u, arr[f"input.conv{l}.weight"], arr[f"input.conv{l}.bias"], 2, 1), 0)
        np.testing.assert_allclose(feats[l].data, u, rtol=0, atol=1e-12)
    np.testing.assert_allclose(fc.data[0], fc_naive(u, arr["input.fc.weight"], arr["input.fc.bias"]), atol=1e-12)


def test_input_path_shape_error():
    with pytest.raises(ValueError, match="expected shape"):
        input_path_forward(Tensor(np.zeros((1, 1, 4, 4))), zeros_params(SMALL))


# --- output path -------------------------------------------------------------


def test_output_path_zero_params(rng):
    params = init_params(SMALL, 2)
    theta_in_only = with_arrays(SMALL, **{k: v.data for k, v in params.theta_input.items()})
    feats, _ = input_path_forward(Tensor(batch(rng, SMALL)), theta_in_only)
    y = Tensor(batch(rng, SMALL), requires_grad=True)
    out = output_path_forward(y, feats, theta_in_only)
    assert not out.data.any()
    (g,) = grad(tc.sum_all(out), [y])
    assert not g.data.any()


def test_output_path_one_layer_by_hand():
    cfg = EnergyNetConfig(num_conv_layers=1, feature_maps=1, kernel=1, stride=1, image_side=2)
    params = with_arrays(
        cfg,
        **{
            "output.conv0.weight_v": np.array([[[[2.0]]]]),
            "output.conv0.bias": np.array([-1.0]),
            "output.fc.weight": np.array([[1.0, 2.0, 3.0, 4.0]]),
            "output.fc.bias": np.array([0.5]),
        },
    )
    y = np.array([[[[0.25, 1.0], [0.75, 0.0]]]])
    # relu(2y - 1) = [0, 1, 0.5, 0] -> 1*0 + 2*1 + 3*0.5 + 4*0 + 0.5 = 4.0
    out = output_path_forward(Tensor(y), [Tensor(np.zeros((1, 1, 2, 2)))], params)
    assert out.data.item() == 4.0


def test_output_path_feature_count_error(rng):
    with pytest.raises(ValueError, match="feature maps"):
        output_path_forward(Tensor(batch(rng, SMALL)), [], zeros_params(SMALL))


# --- energy ------------------------------------------------------------------


def test_energy_zero_params(rng):
    assert energy(Tensor(batch(rng, SMALL)), Tensor(batch(rng, SMALL)), zeros_params(SMALL)).item() == 0.0


def test_energy_only_biases(rng):
    cfg = EnergyNetConfig(num_conv_layers=2, feature_maps=2, kernel=3, stride=1, image_side=8)
    params = with_arrays(cfg, **{"input.fc.bias": np.array([1.25]), "output.fc.bias": np.array([-0.5])})
    assert energy(Tensor(batch(rng, cfg)), Tensor(batch(rng, cfg)), params).item() == 0.75


def test_energy_matches_path_oracle(rng):
    for seed in range(3):
        x, y_hat, params = draw_energy_point(seed)
        got = energy(Tensor(x), Tensor(y_hat), params).item()
        assert abs(got - path_oracle(x, y_hat, params.arrays(), TINY)) < 1e-12


def test_energy_matches_path_oracle_strided(rng):
    params = init_params(SMALL, 4)
    arrays = {k: (v if not k.endswith("bias") else rng.uniform(-0.3, 0.3, v.shape)) for k, v in params.arrays().items()}
    params = EnergyNetParams.from_arrays(SMALL, arrays)
    x, y = batch(rng, SMALL), batch(rng, SMALL)
    assert abs(energy(Tensor(x), Tensor(y), params).item() - path_oracle(x, y, arrays, SMALL)) < 1e-12


def test_energy_shape_mismatch(rng):
    with pytest.raises(ValueError, match="differ in shape"):
        energy(Tensor(batch(rng, SMALL)), Tensor(np.zeros((1, 1, 4, 4))), zeros_params(SMALL))


def test_energy_gradients_match_finite_differences():
    x, y_hat, params = draw_energy_point(11)
    xt = Tensor(x)
    assert tc.finite_difference_check(lambda t: energy(xt, t, params), Tensor(y_hat)) < 1e-5
    for name in params.names():
        def f(t, name=name):
            tensors = {k: (t if k == name else v) for k, v in params.items()}
            return energy(xt, Tensor(y_hat), EnergyNetParams(params.config, tensors))

        assert tc.finite_difference_check(f, Tensor(params[name].data)) < 1e-5, name


def test_energy_gradient_shape(rng):
    y = Tensor(batch(rng, SMALL), requires_grad=True)
    (g,) = grad(energy(Tensor(batch(rng, SMALL)), y, init_params(SMALL, 0)), [y])
    assert g.shape == y.shape


def test_cross_connections_only_make_energy_constant_in_y(rng):
    full = init_params(SMALL, 5).arrays()
    keep = {k: v for k, v in full.items() if k.startswith("input.") or "weight_u" in k or k.startswith("output.fc")}
    params = with_arrays(SMALL, **keep)
    x = batch(rng, SMALL)
    y = Tensor(batch(rng, SMALL), requires_grad=True)
    (g,) = grad(energy(Tensor(x), y, params), [y])
    assert not g.data.any()


def test_energy_is_bit_reproducible(rng):
    params = init_params(SMALL, 6)
    x, y = batch(rng, SMALL), batch(rng, SMALL)
    assert energy(Tensor(x), Tensor(y), params).item() == energy(Tensor(x), Tensor(y), params).item()


def test_batched_energy_is_sum_of_items(rng):
    params = init_params(SMALL, 9)
    x, y = batch(rng, SMALL, n=3), batch(rng, SMALL, n=3)
    whole = energy(Tensor(x), Tensor(y), params).item()
    parts = sum(energy(Tensor(x[i : i + 1]), Tensor(y[i : i + 1]), params).item() for i in range(3))
    assert abs(whole - parts) < 1e-10


def test_energy_is_linear_in_y_within_a_region():
    # piecewise linear: second derivative in y_hat vanishes away from kinks
    x, y_hat, params = draw_energy_point(3)
    y = Tensor(y_hat, requires_grad=True)
    (g,) = grad(energy(Tensor(x), y, params), [y], create_graph=True)
    (h,) = grad(tc.sum_all(tc.mul(g, g)), [y])
    assert not h.data.any()
