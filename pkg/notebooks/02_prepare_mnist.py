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
# # Preparing MNIST fixtures
#
# The loaders never download or resize anything. This script writes the
# 5,000-digit MNIST sample that ships with `mlxtend` to the formats the CLI
# reads:
#
# * `data/mnist_train.idx` / `data/mnist_test.idx` at native 28x28
# * `data/overfit16/` with eight 16x16 centre crops as PGM files

# %%
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from energy_inpaint.data import encode_pgm, load_idx, write_idx

out = Path("data")
out.mkdir(exist_ok=True)

X, labels = mnist_data()
print(X.shape, X.dtype, X.min(), X.max())

# %% [markdown]
# The sample is sorted by label, so draw a random subset: 1,000 images for
# training and 100 for testing.

# %%
rng = np.random.default_rng(0)
picks = rng.choice(len(X), 1100, replace=False)
images = [X[i].reshape(28, 28) / 255.0 for i in picks]
write_idx(out / "mnist_train.idx", images[:1000])
write_idx(out / "mnist_test.idx", images[1000:])
print(np.bincount(labels[picks[:1000]]))

# %% [markdown]
# IDX stores bytes, so writing and reading back is lossless for 8-bit data.

# %%
back = load_idx(out / "mnist_train.idx")
assert all(np.array_equal(b[0], im) for b, im in zip(back, images[:1000]))
print(len(back), back[0].shape)

# %% [markdown]
# Eight 16x16 crops around the digit centre, for the overfitting run.

# %%
crops = out / "overfit16"
crops.mkdir(exist_ok=True)
for k, i in enumerate(np.random.default_rng(0).choice(len(X), 8, replace=False)):
    (crops / f"{k:02d}.pgm").write_bytes(encode_pgm(X[i].reshape(28, 28)[6:22, 6:22] / 255.0))
print(sorted(p.name for p in crops.iterdir()))

# %% [markdown]
# From here the CLI takes over, for example
#
# ```
# energy-inpaint train --config mnist.json --data data/mnist_train.idx \
#     --mask center --fraction 0.25 --out mnist.ckpt --report loss.csv
# energy-inpaint eval --ckpt mnist.ckpt --data data/mnist_test.idx \
#     --mask center --fraction 0.25 --grid grid.png
# ```
#
# with `mnist.json` holding `{"image_side": 28, "stride": [2, 2, 1], "M": 5000}`.
