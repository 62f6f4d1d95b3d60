"""Confidence-gated texture transfer and multi-scale aggregation.

Per pyramid level the reference feature map is warped to the query grid
by a center-pixel gather at the matched positions.  The deformable path
then resamples the reference at the matched position plus a 3x3 tap
neighborhood plus predicted fractional offsets, modulates each tap with
a predicted (0, 1) mask and per-channel kernel weights, and gates the
sum with the match confidence.  A plain 3x3 convolution over the warp
result replaces that mechanism when the deformable path is disabled.

Aggregation fuses transferred texture with the query features coarsest
level first, upsamples 2x with learned convolutions between levels, and
projects to a 3-channel residual added onto the enhanced input.

Parameters are plain dicts of float64 numpy arrays; torch supplies the
forward compute and gradients (float64 or float32 on request).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspond import SCALES, CorrespondenceMap, FeaturePyramid, correspondence_fields
from .counters import bump

__all__ = [
    "LevelInputs",
    "warp",
    "build_level_inputs",
    "init_transfer_params",
    "init_aggregator_params",
    "deform_sample",
    "forward_sr",
    "forward_sr_torch",
    "transfer_levels_torch",
    "aggregate_torch",
    "gradient_selfcheck",
    "TAP_OFFSETS",
]

# row-major 3x3 tap neighborhood around the matched position
TAP_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


@dataclass(frozen=True)
class LevelInputs:
    """Constant per-level transfer inputs (numpy, query geometry)."""

    f_de: np.ndarray   # (H, W, C) query features
    f_ref: np.ndarray  # (Hr, Wr, C) reference features
    pos: np.ndarray    # (H, W, 2) matched reference positions
    conf: np.ndarray   # (H, W) match confidence


def warp(f_ref, pos) -> np.ndarray:
    """Center-pixel gather of reference features at matched positions."""
    f_ref = np.asarray(f_ref, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    if f_ref.ndim != 3 or pos.ndim != 3 or pos.shape[2] != 2:
        raise ValueError(f"warp expects (Hr, Wr, C) and (H, W, 2), got {f_ref.shape}, {pos.shape}")
    hr, wr, _ = f_ref.shape
    iy = np.clip(np.rint(pos[:, :, 0]).astype(np.int64), 0, hr - 1)
    ix = np.clip(np.rint(pos[:, :, 1]).astype(np.int64), 0, wr - 1)
    return f_ref[iy, ix]


def build_level_inputs(
    de_pyr: FeaturePyramid, ref_pyr: FeaturePyramid, cmap: CorrespondenceMap
) -> list[LevelInputs]:
    """Assemble transfer inputs for every level, finest first."""
    q_shapes = [f.shape[:2] for f in de_pyr.levels]
    r_shapes = [f.shape[:2] for f in ref_pyr.levels]
    fields = correspondence_fields(cmap, q_shapes, r_shapes)
    return [
        LevelInputs(f_de=fd, f_ref=fr, pos=pos, conf=conf)
        for fd, fr, (pos, conf) in zip(de_pyr.levels, ref_pyr.levels, fields)
    ]


# ---- parameter initialization ----

def init_transfer_params(rng, mode: str, channels=(16, 32, 64)) -> dict[str, np.ndarray]:
    """Initial transfer parameters for the given mode.

    Deformable transfer starts as a near-identity warp: offsets at zero,
    mask logits biased so the squashed masks open near one, and the tap
    kernel at the centered delta plus small noise.  Starting from the
    plain warp instead of a random tap mix keeps early training focused
    on the offsets' alignment corrections.
    """
    if mode not in ("deform", "plain"):
        raise ValueError(f"transfer mode must be 'deform' or 'plain', got {mode!r}")
    params: dict[str, np.ndarray] = {}
    for s, c in zip(SCALES, channels):
        if mode == "deform":
            kernel = rng.normal(0.0, 0.05, size=(c, 9))
            kernel[:, 4] += 1.0
            params[f"s{s}.kernel"] = kernel
            params[f"s{s}.offset.w"] = np.zeros((18, 2 * c, 3, 3))
            params[f"s{s}.offset.b"] = np.zeros(18)
            params[f"s{s}.mask.w"] = np.zeros((9, 2 * c, 3, 3))
            params[f"s{s}.mask.b"] = np.full(9, 2.0)
        else:
            params[f"s{s}.conv.w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * c)), size=(c, c, 3, 3))
            params[f"s{s}.conv.b"] = np.zeros(c)
    return params


def init_aggregator_params(rng, channels=(16, 32, 64)) -> dict[str, np.ndarray]:
    """Initial aggregator parameters.

    The final projection starts at zero so an untrained model returns
    the enhanced input unchanged.
    """
    def he(c_out, c_in):
        return rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), size=(c_out, c_in, 3, 3))

    params: dict[str, np.ndarray] = {}
    for s, c in zip(SCALES, channels):
        params[f"s{s}.fuse.w"] = he(c, 2 * c)
        params[f"s{s}.fuse.b"] = np.zeros(c)
        for i in (1, 2):
            for j in (1, 2):
                params[f"s{s}.rb{i}.c{j}.w"] = he(c, c)
                params[f"s{s}.rb{i}.c{j}.b"] = np.zeros(c)
    params["up.s4s2.w"] = he(channels[1], channels[2])
    params["up.s4s2.b"] = np.zeros(channels[1])
    params["up.s2s1.w"] = he(channels[0], channels[1])
    params["up.s2s1.b"] = np.zeros(channels[0])
    params["proj.w"] = np.zeros((3, channels[0], 3, 3))
    params["proj.b"] = np.zeros(3)
    return params


# ---- torch forward ----

def _gather_centers(f_ref, pos):
    import torch

    b, c, hr, wr = f_ref.shape
    iy = pos[..., 0].round().long().clamp(0, hr - 1)
    ix = pos[..., 1].round().long().clamp(0, wr - 1)
    flat = f_ref.reshape(b, c, hr * wr)
    idx = (iy * wr + ix).reshape(b, 1, -1).expand(b, c, -1)
    return torch.gather(flat, 2, idx).reshape(b, c, pos.shape[1], pos.shape[2])


def deform_sample(f_ref, pos, offsets, masks, kernel, conf):
    """Masked, confidence-gated 9-tap bilinear resampling (torch tensors).

    f_ref    (B, C, Hr, Wr) reference features
    pos      (B, H, W, 2) matched positions on the reference grid
    offsets  (B, 9, 2, H, W) fractional tap offsets
    masks    (B, 9, H, W) per-tap modulation in (0, 1)
    kernel   (C, 9) per-channel tap weights
    conf     (B, H, W) match confidence

    Sampling positions are clamped to the reference extent (replicate
    border), so the map stays differentiable almost everywhere.
    """
    import torch

    b, c, hr, wr = f_ref.shape
    h, w = pos.shape[1], pos.shape[2]
    pc = torch.tensor(TAP_OFFSETS, dtype=f_ref.dtype, device=f_ref.device)  # (9, 2)
    pos_y = pos[..., 0].unsqueeze(1) + pc[:, 0].view(1, 9, 1, 1) + offsets[:, :, 0]
    pos_x = pos[..., 1].unsqueeze(1) + pc[:, 1].view(1, 9, 1, 1) + offsets[:, :, 1]
    pos_y = pos_y.clamp(0.0, float(hr - 1))
    pos_x = pos_x.clamp(0.0, float(wr - 1))

    y0 = pos_y.floor()
    x0 = pos_x.floor()
    fy = (pos_y - y0).unsqueeze(1)
    fx = (pos_x - x0).unsqueeze(1)
    y0l = y0.long().clamp(0, hr - 1)
    x0l = x0.long().clamp(0, wr - 1)
    y1l = (y0l + 1).clamp(max=hr - 1)
    x1l = (x0l + 1).clamp(max=wr - 1)

    flat = f_ref.reshape(b, c, hr * wr)

    def tap(yl, xl):
        idx = (yl * wr + xl).reshape(b, 1, -1).expand(b, c, -1)
        return torch.gather(flat, 2, idx).reshape(b, c, 9, h, w)

    val = (
        (1 - fy) * (1 - fx) * tap(y0l, x0l)
        + (1 - fy) * fx * tap(y0l, x1l)
        + fy * (1 - fx) * tap(y1l, x0l)
        + fy * fx * tap(y1l, x1l)
    )
    weighted = val * masks.unsqueeze(1) * kernel.reshape(1, c, 9, 1, 1)
    return conf.unsqueeze(1) * weighted.sum(dim=2)


def _deform_level(tp, s, f_de, f_ref, pos, conf):
    import torch
    import torch.nn.functional as F

    bump("transfer.deform")
    warp_t = _gather_centers(f_ref, pos)
    inp = torch.cat([warp_t, f_de], dim=1)
    off = F.conv2d(inp, tp[f"s{s}.offset.w"], tp[f"s{s}.offset.b"], padding=1)
    b, _, h, w = off.shape
    off = off.reshape(b, 9, 2, h, w)
    hr, wr = f_ref.shape[2], f_ref.shape[3]
    # runaway offsets are clamped to the level extent before sampling
    off = torch.stack(
        [off[:, :, 0].clamp(-float(hr), float(hr)), off[:, :, 1].clamp(-float(wr), float(wr))],
        dim=2,
    )
    masks = torch.sigmoid(F.conv2d(inp, tp[f"s{s}.mask.w"], tp[f"s{s}.mask.b"], padding=1))
    return deform_sample(f_ref, pos, off, masks, tp[f"s{s}.kernel"], conf)


def _plain_level(tp, s, f_ref, pos, conf):
    import torch.nn.functional as F

    warp_t = _gather_centers(f_ref, pos)
    out = F.conv2d(warp_t, tp[f"s{s}.conv.w"], tp[f"s{s}.conv.b"], padding=1)
    return conf.unsqueeze(1) * out


def transfer_levels_torch(tp, mode, levels):
    """Transferred texture per level; ``levels`` holds tensor dicts with
    keys f_de, f_ref, pos, conf (finest first)."""
    out = []
    for s, lvl in zip(SCALES, levels):
        if mode == "deform":
            out.append(_deform_level(tp, s, lvl["f_de"], lvl["f_ref"], lvl["pos"], lvl["conf"]))
        else:
            out.append(_plain_level(tp, s, lvl["f_ref"], lvl["pos"], lvl["conf"]))
    return out


def _up2(x):
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)


def aggregate_torch(ap, t_levels, f_de_levels, i_de, linear_mode: bool = False):
    """Fuse texture and query features into the residual output (pre-clamp).

    ``linear_mode`` swaps the activation for identity, making the map
    linear in its inputs when biases are zero (diagnostics only).
    """
    import torch
    import torch.nn.functional as F

    def act(x):
        return x if linear_mode else F.silu(x)

    def rb(x, s, i):
        y = F.conv2d(x, ap[f"s{s}.rb{i}.c1.w"], ap[f"s{s}.rb{i}.c1.b"], padding=1)
        y = F.conv2d(act(y), ap[f"s{s}.rb{i}.c2.w"], ap[f"s{s}.rb{i}.c2.b"], padding=1)
        return x + y

    carry = None
    for lvl in reversed(range(len(SCALES))):  # coarsest first
        s = SCALES[lvl]
        h = torch.cat([t_levels[lvl], f_de_levels[lvl]], dim=1)
        h = act(F.conv2d(h, ap[f"s{s}.fuse.w"], ap[f"s{s}.fuse.b"], padding=1))
        h = rb(rb(h, s, 1), s, 2)
        if carry is not None:
            h = h + carry
        if lvl > 0:
            key = "up.s4s2" if lvl == 2 else "up.s2s1"
            carry = F.conv2d(_up2(h), ap[f"{key}.w"], ap[f"{key}.b"], padding=1)
    res = F.conv2d(h, ap["proj.w"], ap["proj.b"], padding=1)
    return i_de + res


def forward_sr_torch(tp, ap, mode, levels, i_de, linear_mode: bool = False):
    """Full transfer + aggregation on torch tensors (pre-clamp output)."""
    t_levels = transfer_levels_torch(tp, mode, levels)
    f_de_levels = [lvl["f_de"] for lvl in levels]
    return aggregate_torch(ap, t_levels, f_de_levels, i_de, linear_mode=linear_mode)


# ---- numpy-facing inference ----

def _levels_to_tensors(level_inputs, dtype):
    from ._torchutil import image_to_tensor

    import torch

    out = []
    for lvl in level_inputs:
        out.append(
            {
                "f_de": image_to_tensor(lvl.f_de, dtype),
                "f_ref": image_to_tensor(lvl.f_ref, dtype),
                "pos": torch.from_numpy(np.ascontiguousarray(lvl.pos)).to(dtype).unsqueeze(0),
                "conf": torch.from_numpy(np.ascontiguousarray(lvl.conf)).to(dtype).unsqueeze(0),
            }
        )
    return out


def forward_sr(
    tparams,
    aparams,
    mode: str,
    level_inputs,
    i_de,
    precision: str = "double",
    clamp: bool = True,
) -> np.ndarray:
    """Run texture transfer and aggregation for one image (numpy API)."""
    import torch

    from ._torchutil import image_to_tensor, param_tensors, resolve_dtype, tensor_to_image

    dtype = resolve_dtype(precision)
    tp = param_tensors(tparams, dtype)
    ap = param_tensors(aparams, dtype)
    levels = _levels_to_tensors(level_inputs, dtype)
    with torch.no_grad():
        sr = forward_sr_torch(tp, ap, mode, levels, image_to_tensor(i_de, dtype))
    out = tensor_to_image(sr)
    return np.clip(out, 0.0, 1.0) if clamp else out


# ---- gradient verification ----

def _random_level_inputs(rng, channels, base_hw=6):
    levels = []
    for lvl, (s, c) in enumerate(zip(SCALES, channels)):
        h = base_hw * (4 // s)
        hr = h + (2 if lvl == 0 else 0)
        f_de = rng.standard_normal((h, h, c))
        f_ref = rng.standard_normal((hr, hr, c))
        pos = np.stack(
            [rng.uniform(1.0, hr - 2.0, size=(h, h)), rng.uniform(1.0, hr - 2.0, size=(h, h))],
            axis=-1,
        ).round()
        conf = rng.uniform(0.2, 1.0, size=(h, h))
        levels.append(LevelInputs(f_de=f_de, f_ref=f_ref, pos=pos, conf=conf))
    return levels


def gradient_selfcheck(
    mode: str = "deform",
    channels=(2, 3, 4),
    seed: int = 2024,
    projections: int = 2,
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients with central differences on tiny shapes.

    Returns the worst relative error over ``projections`` random
    directions for every learnable tensor.  Random parameters keep the
    sampling positions fractional, clear of the bilinear kink points.
    """
    import torch

    from ._torchutil import image_to_tensor, param_tensors

    from .rng import make_rng

    rng = make_rng(seed)
    tparams = {
        k: rng.normal(0.0, 0.2, size=v.shape)
        for k, v in init_transfer_params(rng, mode, channels).items()
    }
    aparams = {
        k: rng.normal(0.0, 0.2, size=v.shape)
        for k, v in init_aggregator_params(rng, channels).items()
    }
    level_inputs = _random_level_inputs(rng, channels)
    i_de = rng.standard_normal((level_inputs[0].f_de.shape[0],) * 2 + (3,))
    target = rng.standard_normal(i_de.shape)

    dtype = torch.float64
    levels_t = _levels_to_tensors(level_inputs, dtype)
    i_de_t = image_to_tensor(i_de, dtype)
    target_t = image_to_tensor(target, dtype)

    def loss_for(tp_arrays, ap_arrays, grad=False):
        tp = param_tensors(tp_arrays, dtype, requires_grad=grad)
        ap = param_tensors(ap_arrays, dtype, requires_grad=grad)
        sr = forward_sr_torch(tp, ap, mode, levels_t, i_de_t)
        loss = ((sr - target_t) ** 2).mean()
        return loss, tp, ap

    loss0, tp0, ap0 = loss_for(tparams, aparams, grad=True)
    loss0.backward()
    grads = {k: t.grad.detach().numpy().copy() for k, t in {**tp0, **ap0}.items()}

    worst = 0.0
    merged = {**tparams, **aparams}
    for name, arr in merged.items():
        for _ in range(projections):
            u = rng.standard_normal(arr.shape)
            u /= max(np.linalg.norm(u), 1e-12)
            analytic = float(np.sum(grads[name] * u))

            def shifted(delta):
                tp_s = dict(tparams)
                ap_s = dict(aparams)
                tgt = tp_s if name in tp_s else ap_s
                tgt[name] = arr + delta * u
                val, _, _ = loss_for(tp_s, ap_s)
                return float(val.detach())

            fd = (shifted(step) - shifted(-step)) / (2 * step)
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst
