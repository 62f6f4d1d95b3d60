"""numpy <-> torch bridging for the small learnable networks.

Parameter arrays are canonically float64 numpy; torch enters only as the
compute and autodiff engine.  Forward passes accept a dtype so that
correctness checks run in float64 while training-heavy paths may use
float32.
"""

from __future__ import annotations

import numpy as np
import torch

__all__ = [
    "DTYPES",
    "resolve_dtype",
    "image_to_tensor",
    "batch_to_tensor",
    "tensor_to_image",
    "param_tensors",
    "grad_arrays",
]

DTYPES = {"single": torch.float32, "double": torch.float64}

torch.set_num_threads(max(1, torch.get_num_threads()))


def resolve_dtype(precision: str) -> torch.dtype:
    if precision not in DTYPES:
        raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {precision!r}")
    return DTYPES[precision]


def image_to_tensor(img: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    """(H, W, C) numpy array to a (1, C, H, W) tensor."""
    arr = np.ascontiguousarray(np.transpose(np.asarray(img, dtype=np.float64), (2, 0, 1)))
    return torch.from_numpy(arr).to(dtype).unsqueeze(0)

def batch_to_tensor(imgs, dtype: torch.dtype) -> torch.Tensor:
    """List of (H, W, C) arrays to a (B, C, H, W) tensor."""
    arr = np.stack([np.transpose(np.asarray(i, dtype=np.float64), (2, 0, 1)) for i in imgs])
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor back to a float64 (H, W, C) array."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    return np.transpose(t.detach().to(torch.float64).cpu().numpy(), (1, 2, 0))


def param_tensors(
    params: dict[str, np.ndarray], dtype: torch.dtype, requires_grad: bool = False
) -> dict[str, torch.Tensor]:
    out = {}
    for name, arr in params.items():
        t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
        t.requires_grad_(requires_grad)
        out[name] = t
    return out


def grad_arrays(tensors: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    """Collect .grad from leaf tensors as float64 arrays (zeros if unused)."""
    out = {}
    for name, t in tensors.items():
        if t.grad is None:
            out[name] = np.zeros(tuple(t.shape), dtype=np.float64)
        else:
            out[name] = t.grad.detach().to(torch.float64).cpu().numpy().copy()
    return out
