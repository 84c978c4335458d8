"""Restoring an image by gradient descent on the learned energy."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .energy_net import EnergyNetParams, cross_terms, input_path_forward, output_path_forward
from .tensor import NonFiniteError, Tensor, add, enable_grad, grad, no_grad, scale, sub, sum_all


@dataclass
class InferenceConfig:
    alpha: float = 0.01
    momentum: float = 0.9
    T: int = 10
    track_graph: bool = False
    # halve alpha until the step does not raise the energy; needs momentum == 0
    backtracking: bool = False
    max_halvings: int = 30

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.T < 0:
            raise ValueError(f"T must be >= 0, got {self.T}")
        if self.backtracking and (self.momentum != 0 or self.track_graph):
            raise ValueError("backtracking requires momentum == 0 and track_graph == False")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InferenceTrace:
    energies: list  # E^(0) .. E^(T) as floats
    final: Tensor  # y_hat^(T), attached to the graph when track_graph is set
    snapshots: Optional[list] = None


def mean_image(images: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise mean of equally shaped images."""
    if len(images) == 0:
        raise ValueError("mean_image of an empty list")
    first = np.asarray(images[0])
    total = np.zeros(first.shape, dtype=np.float64)
    for i, im in enumerate(images):
        im = np.asarray(im)
        if im.shape != first.shape:
            raise ValueError(f"image {i} has shape {im.shape}, expected {first.shape}")
        total += im
    return total / len(images)


def _batched(a, dtype) -> np.ndarray:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=dtype)
    return a[None] if a.ndim == 3 else a


class _EnergyAt:
    """E_x(.) with the y_hat-independent parts of the network evaluated once."""

    def __init__(self, x: Tensor, params: EnergyNetParams, track: bool):
        if track:
            self._prepare(x, params)
        else:
            with no_grad():
                self._prepare(x, params)
        self.params = params

    def _prepare(self, x, params):
        self.u_list, self.fc_in = input_path_forward(x, params)
        self.cross = cross_terms(self.u_list, params)

    def __call__(self, y_hat: Tensor) -> Tensor:
        fc_out = output_path_forward(y_hat, self.u_list, self.params, self.cross)
        return sum_all(add(self.fc_in, fc_out))


def minimize_energy(
    x,
    params: EnergyNetParams,
    init,
    cfg: InferenceConfig,
    keep_snapshots: bool = False,
) -> InferenceTrace:
    """Heavy-ball gradient descent on E_x(y_hat) starting at ``init``.

    m^(t+1) = momentum * m^(t) + dE/dy_hat(y_hat^(t))
    y_hat^(t+1) = y_hat^(t) - alpha * m^(t+1)

    ``x`` and ``init`` are C x H x W or N x C x H x W arrays/tensors; a batch
    is minimised jointly (the items do not interact). With ``cfg.track_graph``
    every update is recorded so ``trace.final`` can be differentiated w.r.t.
    the parameters.
    """
    with enable_grad():
        return _minimize(x, params, init, cfg, keep_snapshots)


def _minimize(x, params, init, cfg, keep_snapshots):
    dtype = params.dtype
    xb = _batched(x, dtype)
    y0 = _batched(init, dtype)
    if y0.shape != xb.shape:
        if y0.shape[0] == 1 and y0.shape[1:] == xb.shape[1:]:
            y0 = np.repeat(y0, xb.shape[0], axis=0)
        else:
            raise ValueError(f"init shape {y0.shape} does not match x shape {xb.shape}")

    track = cfg.track_graph
    x_t = Tensor(xb)
    E = _EnergyAt(x_t, params, track)
    y = Tensor(y0, requires_grad=True)
    m = None
    energies = []
    snapshots = [y0.copy()] if keep_snapshots else None

    def step_energy(t, yt, create):
        try:
            e = E(yt)
            (g,) = grad(e, [yt], create_graph=create)
        except NonFiniteError as err:
            raise NonFiniteError(f"non-finite energy at descent step {t}: {err}") from err
        return e, g

    for t in range(cfg.T):
        if not track:
            y = Tensor(y.data, requires_grad=True)
        e, g = step_energy(t, y, track)
        energies.append(e.item())
        if cfg.backtracking:
            y = _backtrack(E, y, g, e.item(), cfg)
            continue
        if track:
            m = g if m is None else add(scale(m, cfg.momentum), g)
            y = sub(y, scale(m, cfg.alpha))
        else:
            gd = g.data
            m = gd if m is None else cfg.momentum * m + gd
            y = Tensor(y.data - dtype.type(cfg.alpha) * m)
        if not np.isfinite(y.data).all():
            raise NonFiniteError(f"non-finite y_hat after descent step {t}")
        if keep_snapshots:
            snapshots.append(y.data.copy())

    with no_grad():
        try:
            energies.append(E(y).item())
        except NonFiniteError as err:
            raise NonFiniteError(f"non-finite energy at descent step {cfg.T}: {err}") from err
    return InferenceTrace(energies=energies, final=y, snapshots=snapshots)


def _backtrack(E, y: Tensor, g: Tensor, e0: float, cfg: InferenceConfig) -> Tensor:
    alpha = cfg.alpha
    with no_grad():
        for _ in range(cfg.max_halvings + 1):
            cand = Tensor(y.data - y.dtype.type(alpha) * g.data)
            if E(cand).item() <= e0:
                return cand
            alpha *= 0.5
    return Tensor(y.data)


def inpaint(x, params: EnergyNetParams, mean_init, cfg: Optional[InferenceConfig] = None) -> np.ndarray:
    """Blind restoration of ``x``: descend from the mean image, then clamp to [0, 1].

    Returns an array with the same shape as ``x``.
    """
    cfg = cfg or InferenceConfig()
    if cfg.track_graph:
        raise ValueError("inpaint runs without graph tracking")
    shape = np.shape(x.data if isinstance(x, Tensor) else x)
    trace = minimize_energy(x, params, mean_init, cfg)
    return np.clip(trace.final.data, 0.0, 1.0).reshape(shape)
