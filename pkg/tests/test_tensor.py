import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from salpn.tensor import (
    fmap_from_bytes,
    fmap_to_bytes,
    load_image,
    load_labels,
    masked_average,
    read_fmap,
    resize,
    resize_nearest,
    save_image,
    save_labels,
    upsample4,
    write_fmap,
)


def bilinear_loop(t, out_h, out_w):
    """Per-pixel half-pixel bilinear, written independently of the vectorised path."""
    c, h, w = t.shape
    out = np.zeros((c, out_h, out_w))
    for j in range(out_h):
        y = min(max((j + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = math.floor(y)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for k in range(out_w):
            x = min(max((k + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = math.floor(x)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = t[:, y0, x0] * (1 - fx) + t[:, y0, x1] * fx
            bot = t[:, y1, x0] * (1 - fx) + t[:, y1, x1] * fx
            out[:, j, k] = top * (1 - fy) + bot * fy
    return out


class TestUpsample4:
    def test_full_scale_shape(self):
        t = np.zeros((2048, 32, 32), dtype=np.float32)
        assert upsample4(t).shape == (2048, 128, 128)

    def test_constant(self):
        t = np.full((3, 5, 7), 3.0, dtype=np.float32)
        out = upsample4(t)
        assert out.shape == (3, 20, 28)
        np.testing.assert_array_equal(out, 3.0)

    def test_ramp_rows_monotone(self):
        t = np.array([[[0.0, 1.0], [0.0, 1.0]]], dtype=np.float32)
        out = upsample4(t)
        assert out.shape == (1, 8, 8)
        assert np.all(np.diff(out[0], axis=1) >= 0)
        np.testing.assert_allclose(out, bilinear_loop(t, 8, 8), atol=1e-7)
        # pixel-center convention: the outer quarter clamps to the source values
        np.testing.assert_allclose(out[0, 0], [0, 0, 0.125, 0.375, 0.625, 0.875, 1, 1], atol=1e-7)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=(2, 3, 5)).astype(np.float32)
        np.testing.assert_allclose(upsample4(t), bilinear_loop(t, 12, 20), atol=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-1e3, 1e3, width=32)))
    def test_bracketing(self, t):
        out = upsample4(t)
        assert out.min() >= t.min() - 1e-6 * max(1.0, abs(t.min()))
        assert out.max() <= t.max() + 1e-6 * max(1.0, abs(t.max()))
        assert np.all(np.isfinite(out))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            upsample4(np.full((1, 2, 2), np.nan))


class TestMaskedAverage:
    def test_full_mask(self):
        rng = np.random.default_rng(1)
        t = rng.normal(size=(4, 6, 5))
        v, empty = masked_average(t, np.ones((6, 5)))
        assert not empty
        np.testing.assert_allclose(v, t.mean(axis=(1, 2)))

    def test_diagonal(self):
        t = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        v, empty = masked_average(t, np.array([[1, 0], [0, 1]]))
        assert not empty
        np.testing.assert_allclose(v, [2.5])

    def test_empty_falls_back(self):
        t = np.full((1, 3, 3), 7.0)
        v, empty = masked_average(t, np.zeros((3, 3)))
        assert empty
        np.testing.assert_allclose(v, [7.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            masked_average(np.zeros((1, 3, 3)), np.ones((2, 3)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_complementary_masks(self, seed):
        rng = np.random.default_rng(seed)
        c, h, w = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 9)
        t = rng.normal(size=(c, h, w)).astype(np.float32)
        m = rng.random((h, w)) < rng.random()
        a, ea = masked_average(t, m)
        b, eb = masked_average(t, ~m)
        full = t.mean(axis=(1, 2), dtype=np.float64)
        if ea or eb:
            return
        lhs = m.sum() * a + (~m).sum() * b
        np.testing.assert_allclose(lhs, h * w * full, rtol=1e-5, atol=1e-6)


class TestResize:
    def test_identity(self):
        rng = np.random.default_rng(2)
        img = rng.random((512, 512, 3)).astype(np.float32)
        out = resize(img, 512, 512)
        assert np.abs(out - img).max() <= 1 / 255

    def test_constant(self):
        img = np.full((9, 13, 3), 0.3, dtype=np.float32)
        np.testing.assert_allclose(resize(img, 4, 21), 0.3, atol=1e-7)

    def test_checkerboard_halves(self):
        board = (np.indices((4, 4)).sum(axis=0) % 2).astype(np.float32)
        img = np.repeat(board[..., None], 3, axis=2)
        out = resize(img, 2, 2)
        np.testing.assert_allclose(out, 0.5, atol=1 / 255)

    def test_range_preserved(self):
        rng = np.random.default_rng(3)
        out = resize(rng.random((31, 17, 3)), 50, 9)
        assert out.min() >= 0 and out.max() <= 1

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        img = rng.random((20, 20, 3)).astype(np.float32)
        once = resize(img, 20, 20)
        assert np.abs(resize(once, 20, 20) - once).max() <= 1 / 255

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            resize(np.full((2, 2, 3), 1.5), 2, 2)


def test_resize_nearest_integer_factor():
    lab = np.arange(16).reshape(4, 4)
    up = resize_nearest(lab, 8, 8)
    np.testing.assert_array_equal(up[::2, ::2], lab)
    np.testing.assert_array_equal(resize_nearest(up, 4, 4), lab)


class TestFmap:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        t = rng.normal(size=(3, 4, 5)).astype(np.float32)
        write_fmap(tmp_path / "a.fmap", t)
        raw = (tmp_path / "a.fmap").read_bytes()
        assert raw[:4] == b"FMAP"
        assert len(raw) == 16 + 4 * t.size
        assert int.from_bytes(raw[4:8], "little") == 3
        np.testing.assert_array_equal(read_fmap(tmp_path / "a.fmap"), t)

    def test_layout_is_channel_major(self):
        t = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
        buf = fmap_to_bytes(t)
        np.testing.assert_array_equal(np.frombuffer(buf[16:], "<f4"), np.arange(12))

    def test_bad_magic(self):
        buf = bytearray(fmap_to_bytes(np.zeros((1, 1, 1))))
        buf[:4] = b"XXXX"
        with pytest.raises(ValueError):
            fmap_from_bytes(bytes(buf))

    def test_truncated(self):
        with pytest.raises(ValueError):
            fmap_from_bytes(fmap_to_bytes(np.zeros((1, 2, 2)))[:-4])


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    img = rng.random((8, 6, 3)).astype(np.float32)
    save_image(tmp_path / "x.png", img)
    assert np.abs(load_image(tmp_path / "x.png") - img).max() <= 0.5 / 255 + 1e-7
    lab = rng.integers(0, 1200, (8, 6))
    save_labels(tmp_path / "l.png", lab)
    np.testing.assert_array_equal(load_labels(tmp_path / "l.png"), lab)
