"""
Finite-difference suites for the autodiff engine, the energy and the
unrolled training gradient.

All checks run in float64 on a tiny network and redraw random inputs until
every ReLU pre-activation is at least ``KINK_MARGIN`` away from zero, so the
central differences never straddle a kink.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import tensor as tc
from .energy_net import EnergyNetConfig, EnergyNetParams, energy, init_params
from .inference import InferenceConfig, minimize_energy
from .tensor import Tensor, grad, no_grad, relu_margin
from .training import l1_loss

KINK_MARGIN = 1e-3
FIRST_ORDER_TOL = 1e-5
SECOND_ORDER_TOL = 1e-4
UNROLLED_TOL = 1e-3
EPS = 1e-6

TINY = EnergyNetConfig(num_conv_layers=2, feature_maps=2, kernel=3, stride=1, fc_dim=1, input_channels=1, image_side=8)


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def margin_of(fn: Callable[[], object]) -> float:
    with relu_margin() as m:
        fn()
    return m.value


def _uniform(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _guarded_check(f, x: np.ndarray, eps: float = EPS) -> float:
    if margin_of(lambda: f(Tensor(x))) < KINK_MARGIN:
        raise ValueError("point too close to a ReLU kink")
    return tc.finite_difference_check(f, Tensor(x), eps)


def _draw(rng, make, ok, tries=200):
    for _ in range(tries):
        val = make(rng)
        if ok(val):
            return val
    raise RuntimeError("could not draw a point away from ReLU kinks")


def op_checks(seed: int = 0) -> dict[str, float]:
    """Max relative FD error of every primitive op, each checked per argument."""
    rng = np.random.default_rng(seed)
    out = {}
    a = _uniform(rng, (2, 3, 4))
    b = Tensor(_uniform(rng, (2, 3, 4)))
    out["add"] = tc.finite_difference_check(lambda t: tc.sum_all(tc.mul(tc.add(t, b), t)), Tensor(a))
    out["sub"] = tc.finite_difference_check(lambda t: tc.sum_all(tc.mul(tc.sub(b, t), t)), Tensor(a))
    out["mul"] = tc.finite_difference_check(lambda t: tc.sum_all(tc.mul(tc.mul(t, b), t)), Tensor(a))
    out["neg"] = tc.finite_difference_check(lambda t: tc.sum_all(tc.mul(tc.neg(t), b)), Tensor(a))
    out["scale"] = tc.finite_difference_check(lambda t: tc.sum_all(tc.mul(tc.scale(t, -1.7), t)), Tensor(a))
    out["sum_all"] = tc.finite_difference_check(tc.sum_all, Tensor(a))

    r = _draw(rng, lambda g: _uniform(g, (3, 5)), lambda v: np.abs(v).min() >= KINK_MARGIN)
    w = Tensor(_uniform(rng, (3, 5)))
    out["relu"] = _guarded_check(lambda t: tc.sum_all(tc.mul(tc.relu(t), w)), r)

    x = _uniform(rng, (2, 2, 5, 5))
    k = _uniform(rng, (3, 2, 3, 3))
    bias = _uniform(rng, (3,))
    proj = Tensor(_uniform(rng, (2, 3, 3, 3)))
    conv = lambda xx, kk, bb: tc.sum_all(tc.mul(tc.conv2d(xx, kk, bb, stride=2, padding=1), proj))
    out["conv2d.input"] = tc.finite_difference_check(lambda t: conv(t, Tensor(k), Tensor(bias)), Tensor(x))
    out["conv2d.weight"] = tc.finite_difference_check(lambda t: conv(Tensor(x), t, Tensor(bias)), Tensor(k))
    out["conv2d.bias"] = tc.finite_difference_check(lambda t: conv(Tensor(x), Tensor(k), t), Tensor(bias))

    fx = _uniform(rng, (2, 6))
    fw = _uniform(rng, (3, 6))
    fb = _uniform(rng, (3,))
    fproj = Tensor(_uniform(rng, (2, 3)))
    fc = lambda xx, ww, bb: tc.sum_all(tc.mul(tc.fully_connected(xx, ww, bb), fproj))
    out["fully_connected.input"] = tc.finite_difference_check(lambda t: fc(t, Tensor(fw), Tensor(fb)), Tensor(fx))
    out["fully_connected.weight"] = tc.finite_difference_check(lambda t: fc(Tensor(fx), t, Tensor(fb)), Tensor(fw))
    out["fully_connected.bias"] = tc.finite_difference_check(lambda t: fc(Tensor(fx), Tensor(fw), t), Tensor(fb))

    pool_x = _uniform(rng, (1, 2, 4, 6))
    pool_w = Tensor(_uniform(rng, (1, 2, 2, 3)))
    out["avg_downsample"] = tc.finite_difference_check(
        lambda t: tc.sum_all(tc.mul(tc.avg_downsample(t, 2), pool_w)), Tensor(pool_x)
    )
    return out


def draw_energy_point(seed: int, config: EnergyNetConfig = TINY):
    """(x, y_hat, params) in float64 with every ReLU at least KINK_MARGIN from its kink."""
    rng = np.random.default_rng(seed)
    shape = (1, config.input_channels, config.image_side, config.image_side)
    for attempt in range(500):
        params = _random_params(config, rng)
        x = rng.uniform(0, 1, size=shape)
        y_hat = rng.uniform(0, 1, size=shape)
        with no_grad():
            m = margin_of(lambda: energy(Tensor(x), Tensor(y_hat), params))
        if m >= KINK_MARGIN:
            return x, y_hat, params
    raise RuntimeError("could not draw an energy point away from ReLU kinks")


def _random_params(config: EnergyNetConfig, rng) -> EnergyNetParams:
    base = init_params(config, int(rng.integers(2**31)))
    # nonzero biases so pre-activations are not all pinned near zero
    arrays = {k: (a if not k.endswith("bias") else rng.uniform(-0.5, 0.5, a.shape)) for k, a in base.arrays().items()}
    return EnergyNetParams.from_arrays(config, arrays)


def _replace(params: EnergyNetParams, name: str, arr: np.ndarray, requires_grad=True) -> EnergyNetParams:
    arrays = dict(params.arrays())
    arrays[name] = arr
    return EnergyNetParams.from_arrays(params.config, arrays, requires_grad=requires_grad)


def energy_checks(seed: int = 0) -> dict[str, float]:
    """FD error of dE/dy_hat and of dE/dtheta for every parameter tensor."""
    x, y_hat, params = draw_energy_point(seed)
    xt = Tensor(x)
    out = {"energy.y_hat": tc.finite_difference_check(lambda t: energy(xt, t, params), Tensor(y_hat))}
    for name in params.names():
        f = lambda t, name=name: energy(xt, Tensor(y_hat), _swap(params, name, t))
        out[f"energy.{name}"] = tc.finite_difference_check(f, Tensor(params[name].data))
    return out


def _swap(params: EnergyNetParams, name: str, t: Tensor) -> EnergyNetParams:
    tensors = {k: (t if k == name else v) for k, v in params.items()}
    return EnergyNetParams(params.config, tensors)


def first_order_suite(seed: int = 0) -> dict[str, float]:
    return {**op_checks(seed), **energy_checks(seed)}


def second_order_checks(seed: int = 0) -> dict[str, float]:
    """Gradient-of-gradient vs central differences of the analytic first gradient."""
    rng = np.random.default_rng(seed)
    out = {}

    def hvp_check(name, f, x, v):
        # d/dx <grad f(x), v>  vs  FD of the first gradient projected on v
        xt = Tensor(x, requires_grad=True)
        (g,) = grad(f(xt), [xt], create_graph=True)
        (h,) = grad(tc.sum_all(tc.mul(g, Tensor(v))), [xt])

        def first(xa):
            t = Tensor(xa, requires_grad=True)
            (gg,) = grad(f(t), [t])
            return float(np.sum(gg.data * v))

        worst = 0.0
        flat = x.reshape(-1)
        for i in range(flat.size):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += EPS
            xm[i] -= EPS
            num = (first(xp.reshape(x.shape)) - first(xm.reshape(x.shape))) / (2 * EPS)
            worst = max(worst, rel_error(h.data.reshape(-1)[i], num))
        out[name] = worst

    x = rng.uniform(-2, 2, size=(4,))
    hvp_check("cube", lambda t: tc.sum_all(tc.mul(tc.mul(t, t), t)), x, rng.uniform(-1, 1, size=4))

    xi = rng.uniform(-1, 1, size=(1, 2, 5, 5))
    w = Tensor(rng.uniform(-1, 1, size=(3, 2, 3, 3)))
    cube_conv = lambda t: tc.sum_all(tc.mul(tc.mul(tc.conv2d(t, w, stride=2, padding=1), tc.conv2d(t, w, stride=2, padding=1)), tc.conv2d(t, w, stride=2, padding=1)))
    hvp_check("conv2d.input", cube_conv, xi, rng.uniform(-1, 1, size=xi.shape))

    wi = rng.uniform(-1, 1, size=(3, 2, 3, 3))
    xc = Tensor(rng.uniform(-1, 1, size=(1, 2, 5, 5)))
    sq_conv = lambda t: tc.sum_all(tc.mul(tc.mul(tc.conv2d(xc, t, stride=2, padding=1), tc.conv2d(xc, t, stride=2, padding=1)), tc.conv2d(xc, t, stride=2, padding=1)))
    hvp_check("conv2d.weight", sq_conv, wi, rng.uniform(-1, 1, size=wi.shape))

    xe, ye, params = draw_energy_point(seed)
    xt = Tensor(xe)
    hvp_check("energy.y_hat", lambda t: energy(xt, t, params), ye, rng.uniform(-1, 1, size=ye.shape))
    return out


def unrolled_check(T: int, seed: int = 0, n_params: int = 20, inner: Optional[InferenceConfig] = None) -> float:
    """FD check of d l1(y_hat^(T), y) / d theta over ``n_params`` sampled scalars."""
    inner = inner or InferenceConfig(alpha=0.01, momentum=0.9, T=T, track_graph=True)
    rng = np.random.default_rng(seed + 1000 * T)
    shape = (1, TINY.input_channels, TINY.image_side, TINY.image_side)
    for attempt in range(500):
        x, init, params = draw_energy_point(int(rng.integers(2**31)))
        y = rng.uniform(0, 1, size=shape)
        with relu_margin() as m:
            trace = minimize_energy(x, params, init, inner)
            loss = l1_loss(trace.final, Tensor(y))
        if m.value >= KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw an unrolled point away from ReLU kinks")

    gs = dict(zip(params.names(), grad(loss, params.tensors())))
    flat_index = [(name, i) for name in params.names() for i in range(params[name].size)]
    picks = rng.choice(len(flat_index), size=min(n_params, len(flat_index)), replace=False)
    plain = InferenceConfig(alpha=inner.alpha, momentum=inner.momentum, T=inner.T)

    def loss_at(name, i, delta):
        arr = params[name].data.copy()
        arr.reshape(-1)[i] += delta
        p = _replace(params, name, arr, requires_grad=False)
        tr = minimize_energy(x, p, init, plain)
        return l1_loss(tr.final, Tensor(y)).item()

    worst = 0.0
    for k in picks:
        name, i = flat_index[k]
        num = (loss_at(name, i, EPS) - loss_at(name, i, -EPS)) / (2 * EPS)
        worst = max(worst, rel_error(gs[name].data.reshape(-1)[i], num))
    return worst
