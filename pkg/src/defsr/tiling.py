"""Strip tiling for samplers with a fixed square input size.

Each axis is cut into half-tile-wide strips (the far edge is reflect
padded so the strip count is whole, pad < tile/2).  A window is a pair
of consecutive strips, so along one axis of n strips there are n - 1
tile-sized windows whose interiors overlap by half a tile.  Windows run
in row-major order and a later window's pixels replace an earlier one's
on the shared half, which resolves every strip to exactly one producer:
strip i keeps the window starting at strip min(i, n - 2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import Denoiser, SamplerConfig, sample
from .linop import build_downsampler
from .rng import derive_seed

__all__ = ["TileWindow", "TilePlan", "plan_tiles", "stitch", "write_count_map", "tiled_sample"]


@dataclass(frozen=True)
class TileWindow:
    """One tile-sized sampling window, anchored in padded pixel coords."""

    index: int
    row_strip: int
    col_strip: int
    y0: int
    x0: int
    tile: int

    @property
    def rect(self) -> tuple[int, int, int, int]:
        return (self.y0, self.x0, self.y0 + self.tile, self.x0 + self.tile)


@dataclass(frozen=True)
class TilePlan:
    tile: int
    h: int
    w: int
    pad_h: int
    pad_w: int
    row_strips: int
    col_strips: int
    turns: tuple[TileWindow, ...]

    @property
    def padded_h(self) -> int:
        return self.h + self.pad_h

    @property
    def padded_w(self) -> int:
        return self.w + self.pad_w


def _axis_strips(n: int, tile: int, axis: str) -> tuple[int, int]:
    half = tile // 2
    if n < half:
        raise ValueError(f"{axis} extent {n} is smaller than tile/2 = {half}")
    pad = (-n) % half
    strips = (n + pad) // half
    if strips < 2:
        raise ValueError(
            f"{axis} extent {n} cannot host a full window; need more than tile/2 = {half} pixels"
        )
    return pad, strips


def plan_tiles(h: int, w: int, tile: int) -> TilePlan:
    """Lay out the tile windows for an h x w canvas.

    An h = w = tile canvas yields a single window; the 128 x 256 canvas
    at tile 128 yields the classic four half-strips and three turns.
    """
    if tile < 2 or tile % 2:
        raise ValueError(f"tile must be an even integer >= 2, got {tile}")
    pad_h, nr = _axis_strips(int(h), tile, "height")
    pad_w, nc = _axis_strips(int(w), tile, "width")
    half = tile // 2
    turns = []
    for r in range(nr - 1):
        for c in range(nc - 1):
            turns.append(
                TileWindow(
                    index=len(turns),
                    row_strip=r,
                    col_strip=c,
                    y0=r * half,
                    x0=c * half,
                    tile=tile,
                )
            )
    return TilePlan(
        tile=tile,
        h=int(h),
        w=int(w),
        pad_h=pad_h,
        pad_w=pad_w,
        row_strips=nr,
        col_strips=nc,
        turns=tuple(turns),
    )


def stitch(outputs, plan: TilePlan) -> np.ndarray:
    """Paste per-turn tiles in order (later turns win) and crop the pad."""
    if len(outputs) != len(plan.turns):
        raise ValueError(f"expected {len(plan.turns)} tile outputs, got {len(outputs)}")
    tiles = [np.asarray(o, dtype=np.float64) for o in outputs]
    channels = tiles[0].shape[2] if tiles[0].ndim == 3 else None
    canvas = np.zeros((plan.padded_h, plan.padded_w, channels), dtype=np.float64)
    for win, out in zip(plan.turns, tiles):
        if out.shape != (plan.tile, plan.tile, channels):
            raise ValueError(
                f"turn {win.index}: tile shape {out.shape} != ({plan.tile}, {plan.tile}, {channels})"
            )
        y0, x0, y1, x1 = win.rect
        canvas[y0:y1, x0:x1] = out
    return canvas[: plan.h, : plan.w]


def write_count_map(plan: TilePlan) -> np.ndarray:
    """Pre-resolution write counts per padded pixel (2 on overlaps, 4 on corners)."""
    counts = np.zeros((plan.padded_h, plan.padded_w), dtype=np.int64)
    for win in plan.turns:
        y0, x0, y1, x1 = win.rect
        counts[y0:y1, x0:x1] += 1
    return counts


def tiled_sample(
    y,
    kind: str,
    scale: int,
    tile: int,
    make_denoiser,
    cfg: SamplerConfig,
) -> np.ndarray:
    """Guided sampling at `scale` through tile-sized windows.

    ``make_denoiser(window)`` supplies the per-window denoiser; window
    coordinates refer to the symmetric-padded high-resolution canvas.
    Each turn samples with an independent stream derived from
    (cfg.seed, turn index), so results do not depend on turn execution
    order.  Returns the unclamped stitched image at the target size.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3:
        raise ValueError(f"observation must be (h, w, c), got shape {y.shape}")
    if tile % (2 * scale):
        raise ValueError(f"tile {tile} must be divisible by 2 * scale = {2 * scale}")
    h, w = y.shape[0] * scale, y.shape[1] * scale
    plan = plan_tiles(h, w, tile)
    # pad divides by scale because tile/2 does, so the strip grid stays
    # aligned with the degradation blocks
    y_pad = np.pad(
        y, ((0, plan.pad_h // scale), (0, plan.pad_w // scale), (0, 0)), mode="symmetric"
    )
    A_win = build_downsampler(kind, scale, (tile, tile))
    lr_tile = tile // scale
    outputs = []
    for win in plan.turns:
        ly, lx = win.y0 // scale, win.x0 // scale
        y_win = y_pad[ly : ly + lr_tile, lx : lx + lr_tile]
        win_cfg = SamplerConfig(
            schedule=cfg.schedule,
            steps_used=cfg.steps_used,
            seed=derive_seed(cfg.seed, win.index),
        )
        outputs.append(sample(y_win, A_win, make_denoiser(win), win_cfg, clamp=False))
    return stitch(outputs, plan)
