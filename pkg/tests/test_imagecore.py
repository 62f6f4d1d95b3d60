"""Image model, luminance, bicubic resampling, and file IO tests."""

import numpy as np
import pytest

from defsr.imagecore import (
    CorruptImageError,
    DimensionMismatchError,
    UnsupportedFormatError,
    bicubic_resize,
    catmull_rom_kernel,
    load_image,
    resample_matrix,
    save_image,
    to_y_channel,
)


def _rand_image(rng, h, w, c=3):
    return rng.random((h, w, c))


# ---- luminance ----

def test_y_weights_on_pure_channels():
    img = np.zeros((1, 1, 3))
    img[0, 0, 0] = 1.0
    assert np.isclose(to_y_channel(img)[0, 0], 0.299, atol=1e-15)
    img = np.zeros((1, 1, 3))
    img[0, 0, 1] = 1.0
    assert np.isclose(to_y_channel(img)[0, 0], 0.587, atol=1e-15)
    img = np.zeros((1, 1, 3))
    img[0, 0, 2] = 1.0
    assert np.isclose(to_y_channel(img)[0, 0], 0.114, atol=1e-15)


def test_y_gray_is_exact():
    for c in (0.0, 0.125, 0.25, 0.3, 0.5, 0.7, 0.75, 1.0):
        img = np.full((3, 2, 3), c)
        y = to_y_channel(img)
        assert np.all(y == c), f"gray level {c} not reproduced exactly"


def test_y_known_mixture():
    img = np.array([[[0.5, 0.25, 0.125]]])
    expect = 0.299 * 0.5 + 0.587 * 0.25 + 0.114 * 0.125
    assert abs(to_y_channel(img)[0, 0] - expect) < 1e-12


def test_y_rejects_single_channel():
    with pytest.raises(ValueError):
        to_y_channel(np.zeros((4, 4, 1)))


# ---- bicubic resampling ----

def test_kernel_anchor_values():
    assert catmull_rom_kernel(0.0) == 1.0
    assert catmull_rom_kernel(1.0) == 0.0
    assert catmull_rom_kernel(2.0) == 0.0
    assert np.isclose(catmull_rom_kernel(0.5), 0.5625)
    assert np.isclose(catmull_rom_kernel(1.5), -0.0625)


def test_resample_rows_sum_to_one():
    for n_in, n_out in ((8, 4), (12, 3), (6, 12), (7, 5), (5, 7)):
        mat = resample_matrix(n_in, n_out)
        np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-12)


def test_decimation_stride4_interior_row():
    # interior row of a x4 decimation uses the four-tap phase-0.5 kernel
    mat = resample_matrix(16, 4)
    row = mat[1]
    assert np.count_nonzero(row) == 4
    np.testing.assert_allclose(row[4:8], [-0.0625, 0.5625, 0.5625, -0.0625], atol=1e-15)


def test_constant_preserved():
    rng = np.random.default_rng(0)
    img = np.full((8, 12, 3), 0.37)
    for shape in ((4, 6), (16, 24), (5, 9)):
        out = bicubic_resize(img, *shape)
        np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_identity_resize_is_bit_identical():
    rng = np.random.default_rng(1)
    img = _rand_image(rng, 6, 7)
    out = bicubic_resize(img, 6, 7)
    assert out.tobytes() == img.tobytes()


def test_ramp_downsample_8_to_4():
    # horizontal ramp x/7 on an 8x8 grid, decimated to 4x4.  Interior
    # output pixels sit exactly on the analytic ramp at the half-pixel
    # centers (2.5/7, 4.5/7); the border pixels fold the replicate edge
    # into the kernel, shifting them by -/+ 0.0625 grid units.  Expected
    # values frozen from a direct kernel-sum enumeration.
    img = np.tile((np.arange(8) / 7.0)[None, :, None], (8, 1, 1))
    out = bicubic_resize(img, 4, 4)
    np.testing.assert_allclose(out, np.tile(out[:1, :, :], (4, 1, 1)), atol=1e-12)
    np.testing.assert_allclose(out[0, 1, 0], 2.5 / 7.0, atol=1e-9)
    np.testing.assert_allclose(out[0, 2, 0], 4.5 / 7.0, atol=1e-9)
    frozen = [0.0625, 2.5 / 7.0, 4.5 / 7.0, 0.9375]
    np.testing.assert_allclose(out[0, :, 0], frozen, atol=1e-12)


def test_resize_linearity_within_range():
    rng = np.random.default_rng(2)
    a = 0.25 + 0.5 * _rand_image(rng, 8, 8)
    b = 0.25 + 0.5 * _rand_image(rng, 8, 8)
    lhs = bicubic_resize(0.5 * a + 0.5 * b, 12, 6)
    rhs = 0.5 * bicubic_resize(a, 12, 6) + 0.5 * bicubic_resize(b, 12, 6)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_resize_commutes_with_transpose():
    rng = np.random.default_rng(3)
    img = _rand_image(rng, 8, 10)
    out = bicubic_resize(img, 4, 5)
    out_t = bicubic_resize(img.transpose(1, 0, 2), 5, 4)
    np.testing.assert_allclose(out, out_t.transpose(1, 0, 2), atol=1e-12)


def test_resize_output_in_range():
    rng = np.random.default_rng(4)
    img = (rng.random((9, 9, 3)) > 0.5).astype(float)  # hard edges overshoot
    out = bicubic_resize(img, 27, 27)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_resize_rejects_bad_target():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((4, 4, 1)), 0, 4)


# ---- file IO ----

def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    img = _rand_image(rng, 9, 7)
    path = tmp_path / "x.png"
    save_image(path, img)
    back = load_image(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1.0 / 510.0 + 1e-12


def test_png_quantized_levels_survive(tmp_path):
    img = (np.arange(12).reshape(3, 4, 1) * 17 % 256) / 255.0
    path = tmp_path / "g.png"
    save_image(path, img)
    np.testing.assert_array_equal(load_image(path), img)


def test_pnm_round_trip_exact_after_first_save(tmp_path):
    rng = np.random.default_rng(6)
    img = _rand_image(rng, 5, 6)
    p1 = tmp_path / "a.ppm"
    save_image(p1, img)
    once = load_image(p1)
    p2 = tmp_path / "b.ppm"
    save_image(p2, once)
    np.testing.assert_array_equal(load_image(p2), once)

    gray = _rand_image(rng, 4, 4, c=1)
    pg = tmp_path / "c.pgm"
    save_image(pg, gray)
    assert load_image(pg).shape == (4, 4, 1)


def test_pnm_comments_ignored(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_text("P2 # comment\n# another\n2 1 255\n0 255\n")
    img = load_image(path)
    np.testing.assert_array_equal(img[:, :, 0], [[0.0, 1.0]])


def test_unknown_extension_rejected(tmp_path):
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / "x.tiff")
    with pytest.raises(UnsupportedFormatError):
        save_image(tmp_path / "x.bmp", np.zeros((2, 2, 1)))


def test_pnm_bad_magic_rejected(tmp_path):
    path = tmp_path / "x.ppm"
    path.write_text("P6\n2 2\n255\n")
    with pytest.raises(UnsupportedFormatError):
        load_image(path)


def test_pnm_truncated_payload_is_dimension_mismatch(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_text("P2\n3 2 255\n0 1 2 3\n")
    with pytest.raises(DimensionMismatchError):
        load_image(path)


def test_pnm_garbage_sample_rejected(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_text("P2\n2 1 255\n0 zebra\n")
    with pytest.raises(CorruptImageError):
        load_image(path)


def test_png_truncated_rejected(tmp_path):
    good = tmp_path / "ok.png"
    save_image(good, np.zeros((8, 8, 3)))
    bad = tmp_path / "bad.png"
    bad.write_bytes(good.read_bytes()[:20])
    with pytest.raises(CorruptImageError):
        load_image(bad)


def test_png_unsupported_mode_rejected(tmp_path):
    from PIL import Image as PILImage

    path = tmp_path / "rgba.png"
    PILImage.new("RGBA", (4, 4)).save(path)
    with pytest.raises(UnsupportedFormatError):
        load_image(path)


def test_channel_format_mismatch_on_save(tmp_path):
    with pytest.raises(ValueError):
        save_image(tmp_path / "x.pgm", np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        save_image(tmp_path / "x.ppm", np.zeros((2, 2, 1)))
