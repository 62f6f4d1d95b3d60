"""Degradation operator algebra tests: forward maps and pseudo-inverses."""

import numpy as np
import pytest

from defsr.imagecore import bicubic_resize
from defsr.linop import build_downsampler, decompose


def _mp_identities(A, rng, tol=1e-8):
    """Check the four Moore-Penrose conditions through operator actions."""
    x = rng.random(A.in_shape + (3,))
    y = rng.random(A.out_shape + (3,))
    ax = A.apply(x)
    assert np.max(np.abs(A.apply(A.pinv_apply(ax)) - ax)) < tol
    py = A.pinv_apply(y)
    assert np.max(np.abs(A.pinv_apply(A.apply(py)) - py)) < tol
    # symmetry of the projectors, factor by factor
    for f, fp in ((A.row_mat, A.row_pinv), (A.col_mat, A.col_pinv)):
        p_in = fp @ f
        p_out = f @ fp
        assert np.max(np.abs(p_in - p_in.T)) < tol
        assert np.max(np.abs(p_out - p_out.T)) < tol


@pytest.mark.parametrize("kind", ["average", "bicubic"])
@pytest.mark.parametrize("scale", [2, 4])
def test_moore_penrose_identities(kind, scale):
    rng = np.random.default_rng(100 + scale)
    A = build_downsampler(kind, scale, (4 * scale, 6 * scale))
    _mp_identities(A, rng)


def test_identity_operator():
    rng = np.random.default_rng(7)
    A = build_downsampler("identity", 1, (5, 4))
    x = rng.random((5, 4, 3))
    np.testing.assert_array_equal(A.apply(x), x)
    np.testing.assert_array_equal(A.pinv_apply(x), x)
    d = decompose(A, x)
    np.testing.assert_allclose(d.range_part, x, atol=1e-12)
    np.testing.assert_allclose(d.null_part, 0.0, atol=1e-12)


def test_average_pinv_is_scaled_transpose():
    for s in (2, 4):
        A = build_downsampler("average", s, (2 * s, 3 * s))
        np.testing.assert_array_equal(A.row_pinv, s * A.row_mat.T)
        np.testing.assert_array_equal(A.col_pinv, s * A.col_mat.T)


def test_average_exact_projection_on_output():
    # A A+ = identity on the observation space, exactly for pooling
    rng = np.random.default_rng(8)
    A = build_downsampler("average", 2, (6, 6))
    y = rng.random((3, 3, 1))
    np.testing.assert_allclose(A.apply(A.pinv_apply(y)), y, atol=1e-12)


def test_decompose_checker_example():
    # x = [[2,0],[0,2]] under 2x2 pooling: the range part is the block
    # mean replicated, the null part the zero-mean remainder
    A = build_downsampler("average", 2, (2, 2))
    x = np.array([[2.0, 0.0], [0.0, 2.0]])[:, :, None]
    d = decompose(A, x)
    np.testing.assert_allclose(d.range_part[:, :, 0], [[1.0, 1.0], [1.0, 1.0]], atol=1e-12)
    np.testing.assert_allclose(d.null_part[:, :, 0], [[1.0, -1.0], [-1.0, 1.0]], atol=1e-12)


def test_decompose_parts_are_orthogonal_and_sum():
    rng = np.random.default_rng(9)
    for kind in ("average", "bicubic"):
        A = build_downsampler(kind, 4, (16, 8))
        x = rng.random((16, 8, 3))
        d = decompose(A, x)
        np.testing.assert_allclose(d.range_part + d.null_part, x, atol=1e-12)
        # the null part carries no observable signal
        assert np.max(np.abs(A.apply(d.null_part))) < 1e-8
        dot = float(np.sum(d.range_part * d.null_part))
        assert abs(dot) < 1e-8


def test_bicubic_preserves_constants():
    A = build_downsampler("bicubic", 4, (16, 16))
    x = np.full((16, 16, 3), 0.6)
    np.testing.assert_allclose(A.apply(x), 0.6, atol=1e-12)


def test_bicubic_matches_resize_path():
    # the operator and the interpolating resizer share one kernel; away
    # from clipping they must agree to the last bit of the same formula
    rng = np.random.default_rng(10)
    img = 0.2 + 0.6 * rng.random((16, 12, 3))
    A = build_downsampler("bicubic", 4, (16, 12))
    np.testing.assert_allclose(A.apply(img), bicubic_resize(img, 4, 3), atol=1e-13)


def test_reject_policy_on_indivisible_shape():
    with pytest.raises(ValueError):
        build_downsampler("average", 4, (10, 8))


def test_reflect_policy_accepts_any_shape():
    rng = np.random.default_rng(11)
    A = build_downsampler("bicubic", 2, (5, 7), pad_policy="reflect")
    assert A.out_shape == (3, 4)
    _mp_identities(A, rng, tol=1e-7)


def test_reflect_policy_matches_manual_pad():
    rng = np.random.default_rng(12)
    x = rng.random((5, 7, 1))
    A = build_downsampler("average", 2, (5, 7), pad_policy="reflect")
    xp = np.pad(x, ((0, 1), (0, 1), (0, 0)), mode="symmetric")
    B = build_downsampler("average", 2, (6, 8))
    np.testing.assert_allclose(A.apply(x), B.apply(xp), atol=1e-12)


def test_operator_input_validation():
    A = build_downsampler("average", 2, (4, 4))
    with pytest.raises(ValueError):
        A.apply(np.zeros((6, 4, 1)))
    with pytest.raises(ValueError):
        A.pinv_apply(np.zeros((4, 4, 1)))
    with pytest.raises(ValueError):
        build_downsampler("gaussian", 2, (4, 4))
    with pytest.raises(ValueError):
        build_downsampler("identity", 2, (4, 4))
