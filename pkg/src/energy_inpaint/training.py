"""
Learning the energy parameters through the unrolled descent.

The loss ||y_hat^(T) - y||_1 depends on the parameters only through the T
descent steps, so the parameter gradient is taken through the whole recorded
trajectory (second derivatives of the energy included).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import ImagePair
from .energy_net import EnergyNetConfig, EnergyNetParams, init_params
from .inference import InferenceConfig, mean_image, minimize_energy
from .tensor import NonFiniteError, Tensor, add, grad, relu, scale, sub, sum_all

log = logging.getLogger(__name__)

CLIP_NORM = 10.0


@dataclass
class TrainConfig:
    M: int = 1000
    lambda_: float = 0.001
    inner: InferenceConfig = field(default_factory=lambda: InferenceConfig(track_graph=True))
    batch_size: int = 1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_grad: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        if not self.inner.track_graph:
            self.inner = InferenceConfig(**{**asdict(self.inner), "track_graph": True})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        d.pop("inner")
        return d


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: EnergyNetParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays().items()},
            v={k: np.zeros_like(a) for k, a in params.arrays().items()},
        )

    def equals(self, other: "AdamState") -> bool:
        if self.t != other.t or list(self.m) != list(other.m) or list(self.v) != list(other.v):
            return False
        same = lambda a, b: a.dtype == b.dtype and np.array_equal(a, b)
        return all(same(self.m[k], other.m[k]) and same(self.v[k], other.v[k]) for k in self.m)


@dataclass
class TrainReport:
    """One entry per outer step: batch-mean of the summed l1 loss, and per pixel."""

    loss_sum: list
    loss_per_pixel: list
    wall_time: float
    params: EnergyNetParams
    mean_image: np.ndarray
    adam: AdamState
    inference: InferenceConfig


def l1_loss(y_hat: Tensor, y: Tensor) -> Tensor:
    """sum |y_hat - y|, written with relu so the subgradient at a tie is 0."""
    if y_hat.shape != y.shape:
        raise ValueError(f"l1_loss: shape mismatch {y_hat.shape} vs {y.shape}")
    d = sub(y_hat, y)
    return sum_all(add(relu(d), relu(sub(y, y_hat))))


def adam_step(
    params: EnergyNetParams,
    grads: dict,
    state: AdamState,
    lam: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[EnergyNetParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_arrays, new_m, new_v = {}, {}, {}
    for name, p in params.arrays().items():
        g = np.asarray(grads[name])
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"adam_step: shape drift for {name}: param {p.shape}, grad {g.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        update = lam * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_arrays[name] = (p - update).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return EnergyNetParams.from_arrays(params.config, new_arrays), AdamState(new_m, new_v, t)


def unrolled_loss(
    pairs: Sequence[ImagePair], params: EnergyNetParams, init: np.ndarray, inner: InferenceConfig
) -> Tensor:
    """Mean over ``pairs`` of ||y_hat^(T) - y||_1 with the trajectory recorded."""
    total = None
    for i, pair in enumerate(pairs):
        try:
            trace = minimize_energy(pair.x, params, init, inner)
            loss = l1_loss(trace.final, Tensor(pair.y[None], dtype=params.dtype))
        except NonFiniteError as err:
            raise NonFiniteError(f"non-finite loss for batch sample {i}: {err}") from err
        total = loss if total is None else add(total, loss)
    return scale(total, 1.0 / len(pairs))


def clip_by_global_norm(grads: dict, max_norm: float = CLIP_NORM) -> dict:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    f = max_norm / norm
    return {k: (g * f).astype(g.dtype) for k, g in grads.items()}


def outer_step(
    batch: Sequence[ImagePair],
    params: EnergyNetParams,
    state: AdamState,
    cfg: TrainConfig,
    init: np.ndarray,
) -> tuple[EnergyNetParams, AdamState, float]:
    """Unrolled inference on each pair, then one Adam step on the mean l1 loss."""
    loss = unrolled_loss(batch, params, init, cfg.inner)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError("non-finite batch loss")
    gs = grad(loss, params.tensors())
    grads = {name: g.data for name, g in zip(params.names(), gs)}
    if cfg.clip_grad:
        grads = clip_by_global_norm(grads)
    params, state = adam_step(params, grads, state, cfg.lambda_, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return params, state, value


def train(
    pairs: Sequence[ImagePair],
    cfg: TrainConfig,
    net_config: EnergyNetConfig,
    params: Optional[EnergyNetParams] = None,
    callback: Optional[Callable[[int, float], None]] = None,
    log_every: int = 100,
) -> TrainReport:
    """Learn the energy parameters on ``pairs``.

    Each outer step draws ``batch_size`` pairs uniformly with replacement.
    Parameter initialisation and sampling are both derived from ``cfg.seed``.
    """
    if len(pairs) == 0:
        raise ValueError("train: empty dataset")
    dtype = np.dtype(cfg.dtype)
    init_seq, sample_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    init = mean_image([p.y for p in pairs]).astype(dtype)
    if params is None:
        params = init_params(net_config, int(init_seq.generate_state(1)[0]), dtype=dtype)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(sample_seq)
    npix = pairs[0].y.size

    losses, per_pixel = [], []
    start = time.perf_counter()
    for step in range(cfg.M):
        idx = rng.integers(0, len(pairs), size=cfg.batch_size)
        batch = [pairs[i] for i in idx]
        params, state, value = outer_step(batch, params, state, cfg, init)
        losses.append(value)
        per_pixel.append(value / npix)
        if callback is not None:
            callback(step, value)
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean(losses[-log_every:])
            log.info("step %d/%d  loss %.4f  (%.4f per pixel)", step + 1, cfg.M, recent, recent / npix)
    return TrainReport(
        loss_sum=losses,
        loss_per_pixel=per_pixel,
        wall_time=time.perf_counter() - start,
        params=params,
        mean_image=init,
        adam=state,
        inference=cfg.inner,
    )
