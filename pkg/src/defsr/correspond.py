"""Frozen feature pyramid extraction and cosine patch correspondence.

The extractor is a small random conv pyramid: per level a bias-free 3x3
convolution and tanh, with 2x average pooling between levels.  Weights
are drawn once from a seeded generator and never trained, so feature
geometry is stable across runs and checkpoints (the extractor id names
the exact weights).  Matching runs at the coarsest level; index maps
are rescaled to the finer levels for texture transfer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FeatureExtractor",
    "FeaturePyramid",
    "CorrespondenceMap",
    "build_extractor",
    "extract_pyramid",
    "extractor_forward_torch",
    "unfold",
    "match",
    "correspondence_fields",
    "build_correspondence",
    "SCALES",
]

SCALES = (1, 2, 4)

_ZERO_NORM = 1e-12
# absolute panel width for relevance scores; fixing the GEMM shape makes
# blocked and brute-force traversals bitwise identical
_PANEL = 256


@dataclass(frozen=True)
class FeatureExtractor:
    seed: int
    channels: tuple[int, int, int]
    params: dict[str, np.ndarray]
    extractor_id: str


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-scale feature maps (H/s, W/s, C_s) for scales (1, 2, 4)."""

    levels: tuple[np.ndarray, ...]
    scales: tuple[int, ...]
    extractor_id: str

    @property
    def coarsest(self) -> np.ndarray:
        return self.levels[-1]


@dataclass(frozen=True)
class CorrespondenceMap:
    """Best reference patch per query patch at the coarsest level."""

    index: np.ndarray       # (N_q,) linear indices into the ref patch grid
    confidence: np.ndarray  # (N_q,) cosine relevance at the chosen index
    query_grid: tuple[int, int]
    ref_grid: tuple[int, int]
    k: int
    stride: int


def build_extractor(seed: int, channels: tuple[int, int, int] = (16, 32, 64)) -> FeatureExtractor:
    """Draw and freeze the pyramid weights for ``seed``."""
    from .rng import make_rng

    if len(channels) != len(SCALES):
        raise ValueError(f"need {len(SCALES)} channel counts, got {channels}")
    rng = make_rng(seed)
    params: dict[str, np.ndarray] = {}
    c_prev = 3
    for lvl, c_out in enumerate(channels):
        fan_in = 9 * c_prev
        fan_out = 9 * c_out
        std = np.sqrt(2.0 / (fan_in + fan_out))
        params[f"conv{lvl}.w"] = rng.normal(0.0, std, size=(c_out, c_prev, 3, 3))
        c_prev = c_out
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(params[name].tobytes())
    return FeatureExtractor(
        seed=seed,
        channels=tuple(channels),
        params=params,
        extractor_id=digest.hexdigest()[:16],
    )


def extractor_forward_torch(ptensors, x):
    """Pyramid forward on a (B, 3, H, W) tensor; returns one tensor per scale."""
    import torch.nn.functional as F

    levels = []
    h = x
    for lvl in range(len(SCALES)):
        if lvl > 0:
            h = F.avg_pool2d(h, 2)
        h = F.conv2d(h, ptensors[f"conv{lvl}.w"], None, padding=1).tanh()
        levels.append(h)
    return levels


def extract_pyramid(img, extractor: FeatureExtractor, precision: str = "double") -> FeaturePyramid:
    """Run the frozen pyramid over a 3-channel image (H, W divisible by 4)."""
    import torch

    from ._torchutil import image_to_tensor, param_tensors, resolve_dtype, tensor_to_image
    from .imagecore import require_image

    img = require_image(img, channels=3, name="extract_pyramid input")
    h, w, _ = img.shape
    if h % 4 or w % 4:
        raise ValueError(f"image size {h}x{w} must be divisible by 4 for the pyramid")
    dtype = resolve_dtype(precision)
    ptensors = param_tensors(extractor.params, dtype)
    with torch.no_grad():
        levels = extractor_forward_torch(ptensors, image_to_tensor(img, dtype))
    return FeaturePyramid(
        levels=tuple(tensor_to_image(t) for t in levels),
        scales=SCALES,
        extractor_id=extractor.extractor_id,
    )


def unfold(fmap, k: int = 3, stride: int = 1) -> np.ndarray:
    """Flatten every k x k patch of an (H, W, C) map, row-major.

    Returns (N, k*k*C) with N = (floor((H-k)/stride)+1) * (same for W);
    each row is the patch in (row, col, channel) order.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C), got {fmap.shape}")
    h, w, c = fmap.shape
    if k < 1 or k > min(h, w):
        raise ValueError(f"patch size {k} out of range for {h}x{w} map")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    win = np.lib.stride_tricks.sliding_window_view(fmap, (k, k), axis=(0, 1))
    win = win[::stride, ::stride]                      # (gh, gw, C, k, k)
    win = np.transpose(win, (0, 1, 3, 4, 2))           # (gh, gw, k, k, C)
    gh, gw = win.shape[:2]
    return np.ascontiguousarray(win.reshape(gh * gw, k * k * c))


def _normalize_rows(p: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(p, axis=1, keepdims=True)
    out = np.zeros_like(p)
    keep = norms[:, 0] >= _ZERO_NORM
    out[keep] = p[keep] / norms[keep]
    return out


def _panel_scores(qn: np.ndarray, kn: np.ndarray, p0: int) -> np.ndarray:
    """Scores against the absolute panel [p0, p0 + _PANEL), zero padded."""
    panel = kn[p0 : p0 + _PANEL]
    if panel.shape[0] < _PANEL:
        pad = np.zeros((_PANEL - panel.shape[0], kn.shape[1]))
        panel = np.vstack([panel, pad])
    return qn @ panel.T


def match(query_patches, ref_patches, block: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cosine-best reference index and confidence for each query patch.

    Relevance r[i, j] is the cosine between patch vectors; rows with
    norm below 1e-12 score zero everywhere.  Ties resolve to the
    smallest j.  ``block`` bounds how many reference columns are held at
    once (rounded up to the internal panel width); blocked and full
    traversals produce bitwise-identical indices and confidences.
    """
    q = np.ascontiguousarray(np.asarray(query_patches, dtype=np.float64))
    k = np.ascontiguousarray(np.asarray(ref_patches, dtype=np.float64))
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ValueError(f"patch sets must share the vector dimension, got {q.shape} vs {k.shape}")
    n_k = k.shape[0]
    if n_k == 0 or q.shape[0] == 0:
        raise ValueError("patch sets must be non-empty")
    qn = _normalize_rows(q)
    kn = _normalize_rows(k)
    if block is None:
        panels_per_group = int(np.ceil(n_k / _PANEL))
    else:
        if block < 1:
            raise ValueError(f"block must be positive, got {block}")
        panels_per_group = max(1, int(np.ceil(block / _PANEL)))

    best = np.full(q.shape[0], -np.inf)
    best_idx = np.zeros(q.shape[0], dtype=np.int64)
    p0 = 0
    while p0 < n_k:
        group_cols = []
        group_start = p0
        for _ in range(panels_per_group):
            if p0 >= n_k:
                break
            real = min(_PANEL, n_k - p0)
            group_cols.append(_panel_scores(qn, kn, p0)[:, :real])
            p0 += real
        scores = np.concatenate(group_cols, axis=1)
        local = np.argmax(scores, axis=1)             # first max wins
        local_best = scores[np.arange(scores.shape[0]), local]
        take = local_best > best                      # strict: earlier group keeps ties
        best_idx[take] = group_start + local[take]
        best[take] = local_best[take]
    return best_idx, np.clip(best, -1.0, 1.0)


def build_correspondence(
    de_pyr: FeaturePyramid,
    ref_pyr: FeaturePyramid,
    k: int = 3,
    stride: int = 1,
    block: int | None = None,
) -> CorrespondenceMap:
    """Match the two pyramids at their coarsest level."""
    if de_pyr.extractor_id != ref_pyr.extractor_id:
        raise ValueError("pyramids come from different extractors")
    fq = de_pyr.coarsest
    fr = ref_pyr.coarsest
    idx, conf = match(unfold(fq, k, stride), unfold(fr, k, stride), block=block)

    def grid(shape):
        return ((shape[0] - k) // stride + 1, (shape[1] - k) // stride + 1)

    return CorrespondenceMap(
        index=idx,
        confidence=conf,
        query_grid=grid(fq.shape),
        ref_grid=grid(fr.shape),
        k=k,
        stride=stride,
    )


def correspondence_fields(
    cmap: CorrespondenceMap,
    query_shapes,
    ref_shapes,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-level matched positions and confidences for texture transfer.

    ``query_shapes``/``ref_shapes`` list the (H, W) of each pyramid
    level, ordered like SCALES.  For each query feature position the
    matched coarse patch center is rescaled by the level ratio and the
    query's sub-cell offset is preserved, so an identity match maps
    every position onto itself.  Returns [(positions (H, W, 2), conf
    (H, W)), ...] finest first.
    """
    gh, gw = cmap.query_grid
    rgw = cmap.ref_grid[1]
    off = cmap.k // 2
    conf_grid = cmap.confidence.reshape(gh, gw)
    py = (cmap.index // rgw).reshape(gh, gw)
    px = (cmap.index % rgw).reshape(gh, gw)
    out = []
    coarse = max(SCALES)
    for lvl, s in enumerate(SCALES):
        ratio = coarse // s
        h, w = query_shapes[lvl]
        rh, rw = ref_shapes[lvl]
        ys = np.arange(h)
        xs = np.arange(w)
        gy = np.clip(ys // ratio - off, 0, gh - 1)
        gx = np.clip(xs // ratio - off, 0, gw - 1)
        qy4 = (gy * cmap.stride + off) * ratio
        qx4 = (gx * cmap.stride + off) * ratio
        ry = (py[np.ix_(gy, gx)] * cmap.stride + off) * ratio + (ys[:, None] - qy4[:, None])
        rx = (px[np.ix_(gy, gx)] * cmap.stride + off) * ratio + (xs[None, :] - qx4[None, :])
        pos = np.stack(
            [np.clip(ry, 0, rh - 1), np.clip(rx, 0, rw - 1)], axis=-1
        ).astype(np.float64)
        out.append((pos, conf_grid[np.ix_(gy, gx)].astype(np.float64)))
    return out
