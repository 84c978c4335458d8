import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from energy_inpaint.data import (
    DataFormatError,
    apply_center_mask,
    apply_half_mask,
    encode_idx,
    encode_pgm,
    load_idx,
    load_image,
    load_image_dir,
    load_images,
    make_masker,
    make_split,
    parse_idx,
    parse_pgm,
    save_image,
)


def idx_bytes(n, rows, cols, body, magic=0x803):
    return struct.pack(">IIII", magic, n, rows, cols) + bytes(body)


# --- IDX ----------------------------------------------------------------------


def test_idx_fixture_two_images(tmp_path):
    path = tmp_path / "two.idx"
    path.write_bytes(idx_bytes(2, 2, 2, range(8)))
    imgs = load_idx(path)
    assert len(imgs) == 2
    np.testing.assert_array_equal(imgs[0], [[[0 / 255, 1 / 255], [2 / 255, 3 / 255]]])
    np.testing.assert_array_equal(imgs[1], [[[4 / 255, 5 / 255], [6 / 255, 7 / 255]]])


def test_idx_empty():
    assert parse_idx(idx_bytes(0, 28, 28, b"")) == []


def test_idx_rejects_label_magic():
    with pytest.raises(DataFormatError, match="0x00000801"):
        parse_idx(struct.pack(">II", 0x801, 3) + b"\x00\x01\x02")


@pytest.mark.parametrize(
    "buf, match",
    [
        (b"\x00\x00", "truncated"),
        (struct.pack(">II", 0x803, 1), "truncated"),
        (idx_bytes(2, 2, 2, range(7)), "truncated"),
        (idx_bytes(1, 2, 2, range(5)), "trailing"),
        (idx_bytes(2**20, 2**10, 2**10, b""), "overflow"),
    ],
)
def test_idx_malformed(buf, match):
    with pytest.raises(DataFormatError, match=match):
        parse_idx(buf)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(0, 4), rows=st.integers(1, 6), cols=st.integers(1, 6), data=st.data())
def test_idx_reencode_is_byte_identical(n, rows, cols, data):
    body = data.draw(st.binary(min_size=n * rows * cols, max_size=n * rows * cols))
    raw = idx_bytes(n, rows, cols, body)
    assert encode_idx(parse_idx(raw), rows, cols) == raw


# --- PGM / PNG / directories ----------------------------------------------------


def test_pgm_constant_fixture(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes([128] * 16))
    imgs = load_image_dir(tmp_path)
    assert len(imgs) == 1
    np.testing.assert_array_equal(imgs[0], np.full((1, 4, 4), 128 / 255))


def test_pgm_header_with_comment():
    img = parse_pgm(b"P5 # made by hand\n2 1 255\n\x00\xff")
    np.testing.assert_array_equal(img, [[[0.0, 1.0]]])


def test_pgm_errors():
    with pytest.raises(DataFormatError, match="not a binary PGM"):
        parse_pgm(b"P2\n1 1\n255\n0")
    with pytest.raises(DataFormatError, match="maxval"):
        parse_pgm(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(DataFormatError, match="truncated"):
        parse_pgm(b"P5\n2 2\n255\n\x00")


def test_pgm_round_trip(rng):
    pix = rng.integers(0, 256, size=(1, 5, 7)).astype(np.uint8)
    img = pix / 255.0
    raw = encode_pgm(img)
    np.testing.assert_array_equal(parse_pgm(raw), img)
    assert encode_pgm(parse_pgm(raw)) == raw


def test_empty_dir(tmp_path):
    assert load_image_dir(tmp_path) == []


def test_mixed_sizes_names_first_offender(tmp_path):
    (tmp_path / "a.pgm").write_bytes(encode_pgm(np.zeros((1, 4, 4))))
    (tmp_path / "b.pgm").write_bytes(encode_pgm(np.zeros((1, 6, 6))))
    (tmp_path / "c.pgm").write_bytes(encode_pgm(np.zeros((1, 8, 8))))
    with pytest.raises(DataFormatError, match="b.pgm"):
        load_image_dir(tmp_path)


def test_non_square_names_file(tmp_path):
    (tmp_path / "wide.pgm").write_bytes(encode_pgm(np.zeros((1, 4, 6))))
    with pytest.raises(DataFormatError, match="wide.pgm"):
        load_image_dir(tmp_path)


def test_png_gray_and_color(tmp_path, rng):
    gray = rng.integers(0, 256, size=(6, 6)).astype(np.uint8)
    rgb = rng.integers(0, 256, size=(6, 6, 3)).astype(np.uint8)
    Image.fromarray(gray).save(tmp_path / "g.png")
    Image.fromarray(rgb).save(tmp_path / "c.png")
    np.testing.assert_array_equal(load_image(tmp_path / "g.png", 1), gray[None] / 255.0)
    np.testing.assert_array_equal(load_image(tmp_path / "c.png", 3), rgb.transpose(2, 0, 1) / 255.0)
    with pytest.raises(DataFormatError, match="g.png"):
        load_image(tmp_path / "g.png", 3)


def test_save_and_reload(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 4, 4)) / 255.0
    save_image(tmp_path / "x.png", img)
    np.testing.assert_array_equal(load_image(tmp_path / "x.png", 3), img)
    save_image(tmp_path / "y.pgm", img[:1])
    np.testing.assert_array_equal(load_images(tmp_path / "y.pgm")[0], img[:1])


def test_load_images_dispatch(tmp_path):
    (tmp_path / "set.idx").write_bytes(idx_bytes(1, 2, 2, range(4)))
    assert len(load_images(tmp_path / "set.idx")) == 1
    d = tmp_path / "dir"
    d.mkdir()
    (d / "a.pgm").write_bytes(encode_pgm(np.zeros((1, 2, 2))))
    assert len(load_images(d)) == 1


# --- masks --------------------------------------------------------------------------


def test_center_mask_64():
    pair = apply_center_mask(np.ones((1, 64, 64)), 0.25)
    assert pair.mask.sum() == 1024
    rows, cols = np.nonzero(pair.mask)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (16, 47, 16, 47)


def test_center_mask_28():
    pair = apply_center_mask(np.ones((1, 28, 28)), 0.25)
    rows, cols = np.nonzero(pair.mask)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (7, 20, 7, 20)
    assert pair.mask.sum() == 14 * 14


def test_center_mask_zero_fraction(rng):
    y = rng.uniform(size=(1, 8, 8))
    pair = apply_center_mask(y, 0.0)
    np.testing.assert_array_equal(pair.x, y)
    assert not pair.mask.any()


def test_center_mask_fraction_range():
    with pytest.raises(ValueError):
        apply_center_mask(np.ones((1, 8, 8)), 1.0)


def test_half_mask_64():
    pair = apply_half_mask(np.ones((1, 64, 64)))
    assert pair.mask.mean() == 0.5
    assert pair.mask[:, :32].all() and not pair.mask[:, 32:].any()


def test_half_mask_on_black_image():
    pair = apply_half_mask(np.zeros((1, 8, 8)))
    np.testing.assert_array_equal(pair.x, pair.y)
    assert pair.mask[:, :4].all()


def test_half_mask_4x4_ramp():
    y = (np.arange(16, dtype=float) / 15).reshape(1, 4, 4)
    pair = apply_half_mask(y)
    masked = [(r, c) for r in range(4) for c in range(2)]
    assert sorted(zip(*np.nonzero(pair.mask))) == masked
    for r, c in masked:
        assert pair.x[0, r, c] == 0.0
    for r in range(4):
        for c in (2, 3):
            assert pair.x[0, r, c] == (4 * r + c) / 15


@settings(max_examples=40, deadline=None)
@given(side=st.integers(4, 40), fraction=st.floats(0, 0.95), seed=st.integers(0, 1000), kind=st.sampled_from(["center", "half-left"]))
def test_occlusion_invariant(side, fraction, seed, kind):
    y = np.random.default_rng(seed).uniform(size=(1, side, side))
    pair = make_masker(kind, fraction)(y)
    assert np.array_equal(pair.x[:, ~pair.mask], y[:, ~pair.mask])
    assert not pair.x[:, pair.mask].any()


def best_square_coverage_error(side, fraction):
    return min(abs((b / side) ** 2 - fraction) for b in range(side + 1))


@settings(max_examples=80, deadline=None)
@given(side=st.integers(8, 256))
def test_quarter_mask_coverage(side):
    err = abs(apply_center_mask(np.zeros((1, side, side)), 0.25).mask.mean() - 0.25)
    if best_square_coverage_error(side, 0.25) <= 0.02:
        assert err <= 0.02
    else:
        # no square block of any size gets within 2%; ours must still be the closest
        assert np.isclose(err, best_square_coverage_error(side, 0.25), rtol=0, atol=1e-15)


def test_small_odd_sides_cannot_reach_two_percent():
    assert [s for s in range(8, 64) if best_square_coverage_error(s, 0.25) > 0.02] == [9, 11, 13, 15, 17, 19, 21, 23]


@settings(max_examples=60, deadline=None)
@given(side=st.integers(1, 200), fraction=st.floats(0, 0.99))
def test_center_block_has_closest_area(side, fraction):
    pair = apply_center_mask(np.zeros((1, side, side)), fraction)
    b = int(np.sqrt(pair.mask.sum()))
    assert b * b == pair.mask.sum()
    assert abs(b * b - fraction * side * side) <= min(abs(k * k - fraction * side * side) for k in range(side + 1)) + 1e-9


def test_unknown_masker():
    with pytest.raises(ValueError):
        make_masker("ring")


# --- split -------------------------------------------------------------------------


def imgs(n, side=4, seed=0):
    r = np.random.default_rng(seed)
    return [r.uniform(size=(1, side, side)) for _ in range(n)]


def test_split_all_train():
    data = imgs(10)
    split = make_split(data, 0, 0, make_masker("center"))
    assert len(split.train) == 10 and split.test == []
    np.testing.assert_allclose(split.mean_image, np.mean(data, axis=0), rtol=0, atol=1e-15)


def test_split_olivetti_sizes_and_determinism():
    data = imgs(400)
    a = make_split(data, 50, 3, make_masker("center"))
    b = make_split(data, 50, 3, make_masker("center"))
    assert (len(a.train), len(a.test)) == (350, 50)
    assert a.test_indices == b.test_indices and a.train_indices == b.train_indices


def test_split_mean_uses_train_only():
    data = imgs(20)
    split = make_split(data, 5, 1, make_masker("half-left"))
    np.testing.assert_allclose(split.mean_image, np.mean([data[i] for i in split.train_indices], axis=0), atol=1e-15)


def test_split_too_many_test_images():
    with pytest.raises(ValueError):
        make_split(imgs(5), 5, 0, make_masker("center"))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 60), data=st.data())
def test_split_is_a_partition(n, data):
    n_test = data.draw(st.integers(0, n - 1))
    split = make_split(imgs(n, side=2), n_test, data.draw(st.integers(0, 99)), make_masker("center"))
    assert sorted(split.train_indices + split.test_indices) == list(range(n))
    assert not set(split.train_indices) & set(split.test_indices)
