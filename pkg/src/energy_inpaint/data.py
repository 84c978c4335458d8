"""
Image loading, occlusion masks and train/test splits.

Images are float arrays of shape C x H x W with pixels in [0, 1]. Masks are
boolean H x W arrays (True = occluded) kept for evaluation only; the network
never sees them.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .inference import mean_image

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
FILL_VALUE = 0.0
_MAX_IDX_ELEMENTS = 2**31 - 1


class DataFormatError(ValueError):
    pass


@dataclass
class ImagePair:
    x: np.ndarray  # occluded input
    y: np.ndarray  # ground truth
    mask: np.ndarray  # H x W, True where occluded

    def __post_init__(self):
        if self.x.shape != self.y.shape or self.mask.shape != self.y.shape[-2:]:
            raise ValueError(f"ImagePair shapes disagree: x {self.x.shape}, y {self.y.shape}, mask {self.mask.shape}")


@dataclass
class DatasetSplit:
    train: list
    test: list
    mean_image: np.ndarray
    train_indices: list = field(default_factory=list)
    test_indices: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# IDX


def parse_idx(buf: bytes) -> list[np.ndarray]:
    """Parse an IDX image file (magic 0x00000803) into C x H x W float images."""
    if len(buf) < 4:
        raise DataFormatError(f"truncated IDX file: {len(buf)} bytes, header needs 4")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != IDX_IMAGE_MAGIC:
        kind = " (label file)" if magic == IDX_LABEL_MAGIC else ""
        raise DataFormatError(f"unexpected IDX magic 0x{magic:08x}{kind}; image files use 0x{IDX_IMAGE_MAGIC:08x}")
    ndim = 3
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"truncated IDX file: {len(buf)} bytes, header needs {header}")
    n, rows, cols = struct.unpack(">III", buf[4:header])
    total = n * rows * cols
    if total > _MAX_IDX_ELEMENTS:
        raise DataFormatError(f"IDX dimensions {n}x{rows}x{cols} overflow the element limit")
    body = len(buf) - header
    if body < total:
        raise DataFormatError(f"truncated IDX file: expected {total} pixel bytes, found {body}")
    if body > total:
        raise DataFormatError(f"IDX file has {body - total} trailing bytes")
    if n == 0:
        return []
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(n, 1, rows, cols)
    scaled = pixels.astype(np.float64) / 255.0
    return list(scaled)


def load_idx(path) -> list[np.ndarray]:
    return parse_idx(Path(path).read_bytes())


def encode_idx(images: Sequence[np.ndarray], rows: Optional[int] = None, cols: Optional[int] = None) -> bytes:
    """Serialize grayscale [0, 1] images back to IDX bytes (round-trips exactly)."""
    arrs = [np.asarray(im).reshape(np.shape(im)[-2:]) for im in images]
    if arrs:
        rows, cols = arrs[0].shape
    if rows is None or cols is None:
        raise ValueError("rows/cols are required for an empty image list")
    out = [struct.pack(">IIII", IDX_IMAGE_MAGIC, len(arrs), rows, cols)]
    for a in arrs:
        if a.shape != (rows, cols):
            raise ValueError(f"image of shape {a.shape} in a {rows}x{cols} IDX file")
        out.append(np.rint(np.clip(a, 0, 1) * 255.0).astype(np.uint8).tobytes())
    return b"".join(out)


def write_idx(path, images: Sequence[np.ndarray], rows=None, cols=None) -> None:
    Path(path).write_bytes(encode_idx(images, rows, cols))


# ---------------------------------------------------------------------------
# PGM / PNG


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and (buf[i : i + 1].isspace() or buf[i : i + 1] == b"#"):
            if buf[i : i + 1] == b"#":
                while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                    i += 1
            else:
                i += 1
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise DataFormatError("truncated PGM header")
        tokens.append(buf[start:i])
    return tokens, i


def parse_pgm(buf: bytes) -> np.ndarray:
    """Binary P5 graymap with maxval 255 -> 1 x H x W float image."""
    tokens, i = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise DataFormatError(f"not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataFormatError(f"PGM maxval {maxval} unsupported (need 255)")
    i += 1  # single whitespace after maxval
    data = buf[i : i + width * height]
    if len(data) != width * height:
        raise DataFormatError(f"truncated PGM: expected {width * height} bytes, found {len(data)}")
    return (np.frombuffer(data, dtype=np.uint8).reshape(1, height, width) / 255.0).astype(np.float64)


def encode_pgm(image: np.ndarray) -> bytes:
    a = np.asarray(image)
    a = a.reshape(a.shape[-2:])
    h, w = a.shape
    pixels = np.rint(np.clip(a, 0, 1) * 255.0).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def to_bytes_image(image: np.ndarray) -> np.ndarray:
    """C x H x W [0, 1] floats -> H x W (or H x W x 3) uint8."""
    a = np.rint(np.clip(np.asarray(image), 0, 1) * 255.0).astype(np.uint8)
    return a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)


def save_image(path, image: np.ndarray) -> None:
    """Write a C x H x W image as PGM (by extension) or PNG."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        path.write_bytes(encode_pgm(image))
        return
    from PIL import Image

    Image.fromarray(to_bytes_image(image)).save(path)


def load_image(path, channels: int = 1) -> np.ndarray:
    """Load one PGM (P5) or 8-bit PNG as a C x H x W float image."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        img = parse_pgm(path.read_bytes())
    else:
        from PIL import Image

        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
        if mode == "L":
            img = arr[None].astype(np.float64) / 255.0
        elif mode == "RGB":
            img = arr.transpose(2, 0, 1).astype(np.float64) / 255.0
        else:
            raise DataFormatError(f"{path.name}: unsupported PNG mode {mode}")
    if img.shape[0] != channels:
        raise DataFormatError(f"{path.name}: has {img.shape[0]} channel(s), expected {channels}")
    return img


IMAGE_SUFFIXES = (".pgm", ".png")


def load_image_dir(path, channels: int = 1, side: Optional[int] = None) -> list[np.ndarray]:
    """Load every .pgm/.png in ``path`` (sorted by filename).

    Images must already be square and all of one size; no resizing is done.
    """
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images = []
    for f in files:
        img = load_image(f, channels)
        h, w = img.shape[1:]
        if h != w:
            raise DataFormatError(f"{f.name}: image is {h}x{w}, not square")
        want = side if side is not None else (images[0].shape[1] if images else h)
        if h != want:
            raise DataFormatError(f"{f.name}: side {h} differs from expected {want}")
        images.append(img)
    return images


def load_images(path, channels: int = 1) -> list[np.ndarray]:
    """Load an IDX file, a single image file, or a directory of images."""
    path = Path(path)
    if path.is_dir():
        return load_image_dir(path, channels)
    if path.suffix.lower() in IMAGE_SUFFIXES:
        return [load_image(path, channels)]
    return load_idx(path)


# ---------------------------------------------------------------------------
# masks


def _side(y: np.ndarray) -> int:
    h, w = y.shape[-2:]
    if h != w:
        raise ValueError(f"masks need square images, got {h}x{w}")
    return h


def _occlude(y: np.ndarray, mask: np.ndarray, fill: float) -> ImagePair:
    y = np.asarray(y, dtype=np.float64)
    x = y.copy()
    x[:, mask] = fill
    return ImagePair(x=x, y=y, mask=mask)


def center_block(side: int, fraction: float) -> tuple[int, int]:
    """(offset, block side) of the centred square covering ~``fraction`` of the image."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    # of the two block sides around side * sqrt(fraction), take the one whose
    # area is closer to the target (the smaller one on a tie)
    target = fraction * side * side
    lo = math.floor(side * math.sqrt(fraction))
    b = lo if target - lo * lo <= (lo + 1) ** 2 - target else lo + 1
    return (side - b) // 2, b


def apply_center_mask(y: np.ndarray, fraction: float = 0.25, fill: float = FILL_VALUE) -> ImagePair:
    s = _side(y)
    off, b = center_block(s, fraction)
    mask = np.zeros((s, s), dtype=bool)
    mask[off : off + b, off : off + b] = True
    return _occlude(y, mask, fill)


def apply_half_mask(y: np.ndarray, side: str = "left", fill: float = FILL_VALUE) -> ImagePair:
    if side != "left":
        raise ValueError(f"only the left-half mask is supported, got {side!r}")
    s = _side(y)
    mask = np.zeros((s, s), dtype=bool)
    mask[:, : s // 2] = True
    return _occlude(y, mask, fill)


def make_masker(kind: str, fraction: float = 0.25) -> Callable[[np.ndarray], ImagePair]:
    """'center' or 'half-left' -> function from ground truth to ImagePair."""
    if kind == "center":
        return lambda y: apply_center_mask(y, fraction)
    if kind == "half-left":
        return lambda y: apply_half_mask(y, "left")
    raise ValueError(f"unknown mask kind {kind!r}")


def make_split(images: Sequence[np.ndarray], n_test: int, seed: int, masker: Callable) -> DatasetSplit:
    """Seeded shuffle; the last ``n_test`` images become the test set."""
    n = len(images)
    if not 0 <= n_test < n:
        raise ValueError(f"n_test must be in [0, {n}), got {n_test}")
    order = np.random.default_rng(seed).permutation(n).tolist()
    train_idx, test_idx = order[: n - n_test], order[n - n_test :]
    train = [masker(images[i]) for i in train_idx]
    test = [masker(images[i]) for i in test_idx]
    return DatasetSplit(
        train=train,
        test=test,
        mean_image=mean_image([p.y for p in train]),
        train_indices=train_idx,
        test_indices=test_idx,
    )
