# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Can the model memorise eight images?
#
# Eight 16x16 MNIST centre crops with a centred 8x8 hole, the default
# network (three stride-2 conv layers, 32 maps, 5x5 kernels), ten descent
# steps per restoration and 2,000 Adam steps with batch size 1.
#
# Runs in roughly two to three minutes on one core.

# %%
import logging

import numpy as np
from mlxtend.data import mnist_data

from energy_inpaint import EnergyNetConfig, InferenceConfig, TrainConfig, apply_center_mask, init_params, inpaint, train
from energy_inpaint.grid import export_grid
from energy_inpaint.inference import mean_image, minimize_energy
from energy_inpaint.tensor import Tensor
from energy_inpaint.training import l1_loss

logging.basicConfig(level=logging.INFO, format="%(message)s")

X, _ = mnist_data()
picks = np.random.default_rng(0).choice(len(X), 8, replace=False)
pairs = [apply_center_mask((X[i].reshape(1, 28, 28) / 255.0)[:, 6:22, 6:22], 0.25) for i in picks]
net = EnergyNetConfig(image_side=16)
cfg = TrainConfig(M=2000, seed=0)

# %% [markdown]
# The starting point: the loss of every pair under the initial parameters
# that `train` will draw from the same seed.

# %%
init = mean_image([p.y for p in pairs])
seed = int(np.random.SeedSequence(cfg.seed).spawn(2)[0].generate_state(1)[0])
theta0 = init_params(net, seed)
start_losses = [l1_loss(minimize_energy(p.x, theta0, init, cfg.inner).final, Tensor(p.y[None])).item() for p in pairs]
print(np.round(start_losses, 2), np.mean(start_losses))

# %% [markdown]
# How much of that error sits outside the hole? The mean image is wrong on
# the known pixels too, and the energy has to learn to pull those towards x.

# %%
share = [np.abs(init - p.y)[:, ~p.mask].sum() / np.abs(init - p.y).sum() for p in pairs]
print(f"share of mean-image l1 error on known pixels: {np.mean(share):.2f}")

# %%
report = train(pairs, cfg, net, log_every=200)
curve = np.array(report.loss_sum)
print(f"first 100: {curve[:100].mean():.2f}   last 100: {curve[-100:].mean():.2f}")
print(f"ratio to the starting loss: {curve[-100:].mean() / np.mean(start_losses):.3f}")

# %%
for k in range(0, 2000, 200):
    print(f"steps {k:4d}-{k + 199:4d}: {curve[k:k + 200].mean():7.2f}")

# %% [markdown]
# Restorations of the training pairs, written as a ground truth | input |
# output grid.

# %%
outs = [inpaint(p.x, report.params, report.mean_image, InferenceConfig()) for p in pairs]
print([round(float(np.abs(o - p.y).sum()), 1) for o, p in zip(outs, pairs)])
export_grid([(p.y, p.x, o) for p, o in zip(pairs, outs)], "overfit_grid.png")

# %% [markdown]
# With alpha = 0.01 and momentum 0.9, ten steps move a pixel by about 0.41
# times the energy gradient at most, and the energy is piecewise linear in
# the image, so the gradient only changes when a ReLU flips. Memorising
# eight hidden centres through that channel is slow: the loss falls, but far
# from the 5x reduction one might hope for within 2,000 steps.
