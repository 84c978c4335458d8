"""
Two-path convolutional energy network.

The input path reads the occluded image x::

    u_0 = x,   u_{l+1} = relu(conv(u_l, W_l^u) + b_l^u)

The output path reads the candidate restoration y_hat and receives
cross-connections from the input path plus a rescaled copy of y_hat::

    v_0 = y_hat
    v_{l+1} = relu(conv(v_l, W_l^v) + conv(u_l, W_l^cross) + conv(z_l, W_l^z) + b_l^v)

where z_l is y_hat average-pooled to the spatial size of v_l. Layer 0 of the
output path has no cross or z weights at all. Each path ends in one fully
connected layer; the energy is the sum of both FC outputs.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .tensor import (
    Tensor,
    add,
    avg_downsample,
    bias_add,
    conv2d,
    fully_connected,
    relu,
    sum_all,
)


@dataclass(frozen=True)
class EnergyNetConfig:
    num_conv_layers: int = 3
    feature_maps: int = 32
    kernel: int = 5
    stride: Union[int, tuple] = 2
    fc_dim: int = 1
    input_channels: int = 1
    image_side: int = 64

    def __post_init__(self):
        if not isinstance(self.stride, int):
            object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        self.validate()

    def validate(self) -> None:
        if self.num_conv_layers < 1 or self.feature_maps < 1 or self.fc_dim < 1:
            raise ValueError("num_conv_layers, feature_maps and fc_dim must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd int, got {self.kernel}")
        if self.input_channels < 1 or self.image_side < 1:
            raise ValueError("input_channels and image_side must be >= 1")
        strides = self.strides
        if len(strides) != self.num_conv_layers or min(strides) < 1:
            raise ValueError(f"need {self.num_conv_layers} positive strides, got {self.stride!r}")
        total = 1
        for s in strides:
            total *= s
            if self.image_side % total:
                raise ValueError(
                    f"image_side {self.image_side} is not divisible by the cumulative stride {total}"
                )

    @property
    def strides(self) -> tuple:
        if isinstance(self.stride, int):
            return (self.stride,) * self.num_conv_layers
        return self.stride

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def sides(self) -> list[int]:
        """Spatial side of u_l / v_l for l = 0..L."""
        out = [self.image_side]
        for s in self.strides:
            out.append(out[-1] // s)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["stride"], tuple):
            d["stride"] = list(d["stride"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyNetConfig":
        d = dict(d)
        if isinstance(d.get("stride"), list):
            d["stride"] = tuple(d["stride"])
        return cls(**d)


def param_shapes(config: EnergyNetConfig) -> dict[str, tuple]:
    """Name -> shape for every trainable tensor, in canonical order."""
    K, k, C = config.feature_maps, config.kernel, config.input_channels
    L = config.num_conv_layers
    flat = K * config.sides()[-1] ** 2
    shapes: dict[str, tuple] = {}
    for l in range(L):
        cin = C if l == 0 else K
        shapes[f"input.conv{l}.weight"] = (K, cin, k, k)
        shapes[f"input.conv{l}.bias"] = (K,)
    shapes["input.fc.weight"] = (config.fc_dim, flat)
    shapes["input.fc.bias"] = (config.fc_dim,)
    for l in range(L):
        cin = C if l == 0 else K
        shapes[f"output.conv{l}.weight_v"] = (K, cin, k, k)
        if l > 0:
            shapes[f"output.conv{l}.weight_u"] = (K, K, k, k)
            shapes[f"output.conv{l}.weight_z"] = (K, C, k, k)
        shapes[f"output.conv{l}.bias"] = (K,)
    shapes["output.fc.weight"] = (config.fc_dim, flat)
    shapes["output.fc.bias"] = (config.fc_dim,)
    return shapes


_NAME = re.compile(r"^(input|output)\.(?:conv(\d+)|(fc))\.(\w+)$")


def parse_name(name: str) -> tuple[str, Optional[int], str]:
    """Split a parameter name into (path, layer, role); layer is None for FC."""
    m = _NAME.match(name)
    if m is None:
        raise ValueError(f"not a parameter name: {name!r}")
    path, layer, _, role = m.groups()
    return path, (None if layer is None else int(layer)), role


class EnergyNetParams:
    """The full parameter set of both paths, keyed by name.

    Treated as immutable: updates build a new instance.
    """

    def __init__(self, config: EnergyNetConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            if missing:
                raise ValueError(f"parameter names do not match config: {sorted(missing)}")
            tensors = {name: tensors[name] for name in expected}
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self._tensors = dict(tensors)

    @classmethod
    def from_arrays(cls, config: EnergyNetConfig, arrays: dict, requires_grad: bool = True, dtype=None):
        return cls(config, {k: Tensor(v, requires_grad=requires_grad, dtype=dtype) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    @property
    def theta_input(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._tensors.items() if k.startswith("input.")}

    @property
    def theta_output(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._tensors.items() if k.startswith("output.")}

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self._tensors.values())).dtype

    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def astype(self, dtype) -> "EnergyNetParams":
        return EnergyNetParams.from_arrays(self.config, {k: v.astype(dtype) for k, v in self.arrays().items()})

    def equals(self, other: "EnergyNetParams") -> bool:
        """Bit-identical comparison (same config, names, dtypes and values)."""
        if self.config != other.config or self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self.arrays().values(), other.arrays().values())
        )


def zeros_params(config: EnergyNetConfig, dtype=np.float64) -> EnergyNetParams:
    arrays = {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(config).items()}
    return EnergyNetParams.from_arrays(config, arrays)


def init_params(config: EnergyNetConfig, seed: int, dtype=np.float64) -> EnergyNetParams:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("bias"):
            arrays[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return EnergyNetParams.from_arrays(config, arrays)


def _as_batch(t: Tensor, config: EnergyNetConfig, what: str) -> Tensor:
    expect = (config.input_channels, config.image_side, config.image_side)
    if t.ndim != 4 or t.shape[1:] != expect:
        raise ValueError(f"{what}: expected shape N x {' x '.join(map(str, expect))}, got {t.shape}")
    return t


def input_path_forward(x: Tensor, params: EnergyNetParams) -> tuple[list[Tensor], Tensor]:
    """Run the input path on x; returns ([u_1..u_L], FC output of shape N x fc_dim)."""
    cfg = params.config
    u = _as_batch(x, cfg, "input_path_forward")
    feats = []
    for l, s in enumerate(cfg.strides):
        u = relu(conv2d(u, params[f"input.conv{l}.weight"], params[f"input.conv{l}.bias"], s, cfg.padding))
        feats.append(u)
    fc = fully_connected(u, params["input.fc.weight"], params["input.fc.bias"])
    return feats, fc


def cross_terms(u_list: Sequence[Tensor], params: EnergyNetParams) -> list[Optional[Tensor]]:
    """conv(u_l, W_l^cross) for each output-path layer (None for layer 0).

    These depend on x and the parameters but not on y_hat, so inference
    computes them once and reuses them at every descent step.
    """
    cfg = params.config
    out: list[Optional[Tensor]] = [None]
    for l in range(1, cfg.num_conv_layers):
        out.append(conv2d(u_list[l - 1], params[f"output.conv{l}.weight_u"], None, cfg.strides[l], cfg.padding))
    return out


def output_path_forward(
    y_hat: Tensor,
    u_list: Sequence[Tensor],
    params: EnergyNetParams,
    cross: Optional[Sequence[Optional[Tensor]]] = None,
) -> Tensor:
    """Run the output path on y_hat; returns the FC output (N x fc_dim)."""
    cfg = params.config
    _as_batch(y_hat, cfg, "output_path_forward")
    if len(u_list) != cfg.num_conv_layers:
        raise ValueError(f"expected {cfg.num_conv_layers} input-path feature maps, got {len(u_list)}")
    if cross is None:
        cross = cross_terms(u_list, params)
    sides = cfg.sides()
    v = y_hat
    for l, s in enumerate(cfg.strides):
        pre = conv2d(v, params[f"output.conv{l}.weight_v"], None, s, cfg.padding)
        if l > 0:
            z = avg_downsample(y_hat, cfg.image_side // sides[l])
            pre = add(pre, cross[l])
            pre = add(pre, conv2d(z, params[f"output.conv{l}.weight_z"], None, s, cfg.padding))
        v = relu(bias_add(pre, params[f"output.conv{l}.bias"]))
    return fully_connected(v, params["output.fc.weight"], params["output.fc.bias"])


def energy(x: Tensor, y_hat: Tensor, params: EnergyNetParams) -> Tensor:
    """Scalar energy E_x(y_hat); summed over the batch when N > 1."""
    if x.shape != y_hat.shape:
        raise ValueError(f"energy: x {x.shape} and y_hat {y_hat.shape} differ in shape")
    u_list, fc_in = input_path_forward(x, params)
    fc_out = output_path_forward(y_hat, u_list, params)
    return sum_all(add(fc_in, fc_out))
