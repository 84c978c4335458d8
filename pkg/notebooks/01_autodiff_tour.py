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
# # A tour of the autodiff engine
#
# Training the inpainting energy needs gradients of gradients: the restored
# image is itself produced by gradient steps, and the outer loss is
# differentiated through those steps. The `tensor` module is a small
# reverse-mode engine whose backward rules are built from the same ops as the
# forward pass, so `grad(..., create_graph=True)` returns something that can be
# differentiated again.

# %%
import numpy as np

from energy_inpaint import tensor as tc
from energy_inpaint.tensor import Tensor, grad

# %% [markdown]
# ## First and second derivatives of a cube

# %%
x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
f = tc.sum_all(tc.mul(tc.mul(x, x), x))
(g,) = grad(f, [x], create_graph=True)
(h,) = grad(tc.sum_all(g), [x])
print("f  =", f.item())
print("f' =", g.data)  # 3 x^2
print("f''=", h.data)  # 6 x

# %% [markdown]
# ## Convolutions
#
# `conv2d`, its input gradient and its weight gradient form a closed family:
# the backward of each one is expressed with the other two. The adjoint
# identity below is what makes that work.

# %%
rng = np.random.default_rng(0)
xa = rng.normal(size=(1, 2, 7, 7))
w = rng.normal(size=(3, 2, 3, 3))
y = tc.conv2d(Tensor(xa), Tensor(w), stride=2, padding=1)
gy = rng.normal(size=y.shape)
lhs = np.sum(y.data * gy)
rhs_x = np.sum(xa * tc.conv2d_input_grad(Tensor(gy), Tensor(w), xa.shape[2:], 2, 1).data)
rhs_w = np.sum(w * tc.conv2d_weight_grad(Tensor(xa), Tensor(gy), w.shape[2:], 2, 1).data)
print(lhs, rhs_x, rhs_w)

# %% [markdown]
# ## Finite-difference suites
#
# The same checks are behind `energy-inpaint gradcheck`. Points are redrawn
# until every ReLU pre-activation is at least 1e-3 from its kink.

# %%
from energy_inpaint import gradcheck as gc

first = gc.first_order_suite(seed=0)
print(f"{len(first)} first-order checks, worst {max(first.values()):.2e}")
second = gc.second_order_checks(seed=0)
for name, err in second.items():
    print(f"{name:>14}: {err:.2e}")
for T in (0, 1, 2):
    print(f"unrolled T={T}: {gc.unrolled_check(T):.2e}")

# %% [markdown]
# With `T=0` the restored image is the mean image, which does not depend on
# the parameters, so the unrolled gradient is exactly zero. This is why the
# descent steps have to stay on the graph during training.
