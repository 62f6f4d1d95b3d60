"""Separable linear degradation operators and their pseudo-inverses.

Each operator acts per channel as Y = R X C^T with explicit row and
column factor matrices, so the Moore-Penrose pseudo-inverse is available
in closed form: the pseudo-inverse of the separable map is
X = R+ Y (C+)^T.  Average pooling admits the exact closed form
R+ = s R^T (hence A+ = s^2 A^T for the full operator); the bicubic
decimation factors go through an SVD with singular values below
1e-10 * sigma_max truncated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imagecore import require_image, resample_matrix

__all__ = ["LinearOperator", "Decomposition", "build_downsampler", "decompose"]

KINDS = ("average", "bicubic", "identity")

_SVD_RCOND = 1e-10


@dataclass(frozen=True)
class LinearOperator:
    """Separable per-channel linear map with a cached pseudo-inverse."""

    kind: str
    scale: int
    in_shape: tuple[int, int]
    out_shape: tuple[int, int]
    row_mat: np.ndarray
    col_mat: np.ndarray
    row_pinv: np.ndarray
    col_pinv: np.ndarray
    pad_policy: str = "reject"

    def apply(self, x) -> np.ndarray:
        """Apply the forward map to an (H, W, C) image array."""
        x = self._check_input(x)
        return _sep_apply(self.row_mat, self.col_mat, x)

    def pinv_apply(self, y) -> np.ndarray:
        """Apply the Moore-Penrose pseudo-inverse to an observation."""
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 3 or y.shape[:2] != self.out_shape:
            raise ValueError(
                f"pinv_apply: expected shape {self.out_shape} + channels, got {y.shape}"
            )
        return _sep_apply(self.row_pinv, self.col_pinv, y)

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ValueError(f"operator input must be (H, W, C), got shape {x.shape}")
        if x.shape[:2] != self.in_shape:
            raise ValueError(
                f"operator built for {self.in_shape}, got image {x.shape[:2]}"
            )
        return x


@dataclass(frozen=True)
class Decomposition:
    """Orthogonal split of an image into range and null components."""

    range_part: np.ndarray
    null_part: np.ndarray


def _sep_apply(rows: np.ndarray, cols: np.ndarray, x: np.ndarray) -> np.ndarray:
    tmp = np.einsum("oi,iwc->owc", rows, x)
    return np.einsum("pj,ojc->opc", cols, tmp)


def _average_factor(n: int, s: int) -> np.ndarray:
    mat = np.zeros((n // s, n), dtype=np.float64)
    for j in range(n // s):
        mat[j, j * s : (j + 1) * s] = 1.0 / s
    return mat


def _reflect_pad_matrix(n: int, pad: int) -> np.ndarray:
    # symmetric (edge-inclusive) padding of the far edge as a linear map
    mat = np.zeros((n + pad, n), dtype=np.float64)
    for i in range(n):
        mat[i, i] = 1.0
    for k in range(pad):
        mat[n + k, n - 1 - k] = 1.0
    return mat


def _svd_pinv(mat: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(mat, rcond=_SVD_RCOND)


def build_downsampler(
    kind: str,
    scale: int,
    in_shape: tuple[int, int],
    pad_policy: str = "reject",
) -> LinearOperator:
    """Construct an operator of the given kind for (H, W) inputs.

    kind        one of "average", "bicubic", "identity"
    scale       integer decimation factor >= 1 (identity requires 1)
    pad_policy  "reject" errors on sizes not divisible by scale;
                "reflect" folds a symmetric pad of the far edge into the
                factor matrices so any size is accepted
    """
    if kind not in KINDS:
        raise ValueError(f"unknown operator kind {kind!r}, expected one of {KINDS}")
    if pad_policy not in ("reject", "reflect"):
        raise ValueError(f"unknown pad policy {pad_policy!r}")
    h, w = int(in_shape[0]), int(in_shape[1])
    if h < 1 or w < 1:
        raise ValueError(f"operator input shape must be positive, got {in_shape}")
    scale = int(scale)
    if kind == "identity":
        if scale != 1:
            raise ValueError("identity operator requires scale 1")
        eye_h = np.eye(h)
        eye_w = np.eye(w)
        return LinearOperator(
            kind, 1, (h, w), (h, w), eye_h, eye_w, eye_h.copy(), eye_w.copy(), pad_policy
        )
    if scale < 2:
        raise ValueError(f"downsampling scale must be >= 2, got {scale}")
    if pad_policy == "reject" and (h % scale or w % scale):
        raise ValueError(
            f"input {h}x{w} not divisible by scale {scale} (pad_policy='reject')"
        )

    def factor(n: int) -> tuple[np.ndarray, np.ndarray]:
        pad = (-n) % scale
        m = n + pad
        if kind == "average":
            core = _average_factor(m, scale)
        else:
            core = resample_matrix(m, m // scale)
        if pad:
            core = core @ _reflect_pad_matrix(n, pad)
        if kind == "average" and pad == 0:
            # rows are orthogonal with norm 1/sqrt(s), so R+ = s R^T exactly
            return core, scale * core.T
        return core, _svd_pinv(core)

    row_mat, row_pinv = factor(h)
    col_mat, col_pinv = factor(w)
    return LinearOperator(
        kind,
        scale,
        (h, w),
        (row_mat.shape[0], col_mat.shape[0]),
        row_mat,
        col_mat,
        row_pinv,
        col_pinv,
        pad_policy,
    )


def decompose(A: LinearOperator, x) -> Decomposition:
    """Split x into its range component A+ A x and null component."""
    x = np.asarray(x, dtype=np.float64)
    range_part = A.pinv_apply(A.apply(x))
    return Decomposition(range_part=range_part, null_part=x - range_part)
