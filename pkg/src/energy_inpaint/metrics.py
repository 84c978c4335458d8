"""Image-quality metrics on the 255 scale, and test-set evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import ImagePair
from .inference import InferenceConfig, inpaint

PEAK = 255.0


def mse255(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of (255 * (a - b))**2 for images in [0, 1]."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse255: shape mismatch {a.shape} vs {b.shape}")
    d = PEAK * (a - b)
    return float(np.mean(d * d))


def psnr_from_mse(mse: float) -> float:
    """10 log10(255^2 / mse); +inf when mse == 0."""
    if mse < 0:
        raise ValueError("mse must be nonnegative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    return psnr_from_mse(mse255(a, b))


@dataclass
class EvalReport:
    mse: list
    psnr: list
    mean_psnr: float  # over finite values only
    mean_mse: float
    n_perfect: int  # images with mse == 0, left out of mean_psnr
    outputs: Optional[list] = field(default=None, repr=False)


def summarize(outputs: Sequence[np.ndarray], truths: Sequence[np.ndarray], keep_outputs: bool = True) -> EvalReport:
    mses = [mse255(o, t) for o, t in zip(outputs, truths)]
    psnrs = [psnr_from_mse(m) for m in mses]
    finite = [p for p in psnrs if math.isfinite(p)]
    return EvalReport(
        mse=mses,
        psnr=psnrs,
        mean_psnr=float(np.mean(finite)) if finite else math.inf,
        mean_mse=float(np.mean(mses)) if mses else math.nan,
        n_perfect=len(psnrs) - len(finite),
        outputs=list(outputs) if keep_outputs else None,
    )


def composite(pair: ImagePair, restored: np.ndarray) -> np.ndarray:
    """Paste the known (unmasked) pixels of x back into the restoration."""
    out = np.array(restored, dtype=np.float64)
    keep = ~pair.mask
    out[:, keep] = pair.x[:, keep]
    return out


def evaluate(
    checkpoint,
    testset: Sequence[ImagePair],
    cfg: Optional[InferenceConfig] = None,
    use_composite: bool = False,
    chunk: int = 64,
) -> EvalReport:
    """Inpaint every test pair from the checkpoint's mean image and score it.

    Metrics cover the full image. With ``use_composite`` the known pixels
    are pasted back before scoring.
    """
    cfg = cfg or checkpoint.inference
    if cfg.track_graph:
        cfg = InferenceConfig(alpha=cfg.alpha, momentum=cfg.momentum, T=cfg.T)
    params = checkpoint.params
    net = params.config
    want = (net.input_channels, net.image_side, net.image_side)
    for i, pair in enumerate(testset):
        if pair.x.shape != want:
            raise ValueError(f"test image {i} has shape {pair.x.shape}, checkpoint expects {want}")
    outputs = []
    for start in range(0, len(testset), chunk):
        block = testset[start : start + chunk]
        xs = np.stack([p.x for p in block])
        outputs.extend(inpaint(xs, params, checkpoint.mean_image, cfg))
    if use_composite:
        outputs = [composite(p, o) for p, o in zip(testset, outputs)]
    return summarize(outputs, [p.y for p in testset])


def mean_image_baseline(mean_img: np.ndarray, testset: Sequence[ImagePair]) -> EvalReport:
    """Score the mean image itself against every test ground truth."""
    return summarize([np.asarray(mean_img)] * len(testset), [p.y for p in testset], keep_outputs=False)
