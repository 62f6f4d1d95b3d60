"""Image model, color conversion, bicubic resampling, and file IO.

An image is a ``float64`` numpy array of shape (height, width, channels)
with channels in {1, 3} and nominal value range [0, 1].  All functions
here are pure: inputs are never mutated and every call with the same
arguments returns the same values.  Arithmetic is double precision
throughout; 8-bit quantization happens only at file boundaries.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "ImageIOError",
    "UnsupportedFormatError",
    "CorruptImageError",
    "DimensionMismatchError",
    "require_image",
    "to_y_channel",
    "catmull_rom_kernel",
    "resample_matrix",
    "bicubic_resize",
    "load_image",
    "save_image",
]

# BT.601 full-range luminance weights.
_Y_R = 0.299
_Y_G = 0.587
_Y_B = 0.114


class ImageIOError(Exception):
    """Base class for image file errors."""


class UnsupportedFormatError(ImageIOError):
    """File extension, magic, or pixel mode is not supported."""


class CorruptImageError(ImageIOError):
    """File contents cannot be decoded."""


class DimensionMismatchError(ImageIOError):
    """Header dimensions disagree with the pixel payload."""


def require_image(arr, channels=None, name: str = "image") -> np.ndarray:
    """Validate and return ``arr`` as a float64 (H, W, C) image array.

    Raises ValueError when the shape or channel count is unusable.
    """
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 3:
        raise ValueError(f"{name}: expected a (H, W, C) array, got shape {out.shape}")
    h, w, c = out.shape
    if h < 1 or w < 1:
        raise ValueError(f"{name}: empty image {out.shape}")
    if c not in (1, 3):
        raise ValueError(f"{name}: channel count must be 1 or 3, got {c}")
    if channels is not None and c != channels:
        raise ValueError(f"{name}: expected {channels} channels, got {c}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: non-finite pixel values")
    return out


def to_y_channel(img) -> np.ndarray:
    """Return the BT.601 full-range luminance plane of a 3-channel image.

    Y = 0.299 R + 0.587 G + 0.114 B, computed as B + 0.299 (R - B)
    + 0.587 (G - B) so that gray inputs (R = G = B) reproduce the
    channel value exactly in floating point.
    """
    img = require_image(img, channels=3, name="to_y_channel input")
    r = img[:, :, 0]
    g = img[:, :, 1]
    b = img[:, :, 2]
    return b + _Y_R * (r - b) + _Y_G * (g - b)


# ---- bicubic resampling ----

def catmull_rom_kernel(x) -> np.ndarray:
    """Catmull-Rom cubic kernel (a = -0.5), zero outside |x| >= 2."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    near = (1.5 * ax - 2.5) * ax * ax + 1.0
    far = ((-0.5 * ax + 2.5) * ax - 4.0) * ax + 2.0
    return np.where(ax < 1.0, near, np.where(ax < 2.0, far, 0.0))


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Return the (n_out, n_in) 1-D Catmull-Rom resampling matrix.

    Output sample j reads the continuous coordinate
    u = (j + 0.5) * n_in / n_out - 0.5 through the four-tap kernel.
    Taps falling outside [0, n_in) are folded onto the nearest edge
    sample (replicate border), so every row still sums to one.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resample_matrix: sizes must be positive, got {n_in}->{n_out}")
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    step = n_in / n_out
    for j in range(n_out):
        u = (j + 0.5) * step - 0.5
        base = int(np.floor(u))
        for i in range(base - 1, base + 3):
            w = float(catmull_rom_kernel(u - i))
            mat[j, min(max(i, 0), n_in - 1)] += w
    return mat


def bicubic_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Resize an image with the separable Catmull-Rom kernel.

    Works in both directions (upsampling and decimation), clamps the
    result to [0, 1], and returns the input unchanged (as a copy) when
    the target size equals the source size.
    """
    img = require_image(img, name="bicubic_resize input")
    h, w, _ = img.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bicubic_resize: target size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return img.copy()
    rows = resample_matrix(h, out_h)
    cols = resample_matrix(w, out_w)
    tmp = np.einsum("oi,iwc->owc", rows, img)
    out = np.einsum("pj,ojc->opc", cols, tmp)
    return np.clip(out, 0.0, 1.0)


# ---- file IO ----

def _quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Load a PNG, ASCII PPM, or ASCII PGM file as a float64 image.

    8-bit samples map to v / 255.  Unsupported formats, undecodable
    payloads, and header/payload size disagreements raise the distinct
    error types defined in this module.
    """
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        return _load_png(path)
    if ext in (".ppm", ".pgm"):
        return _load_pnm(path)
    raise UnsupportedFormatError(f"unsupported image extension: {ext!r}")


def save_image(path, img) -> None:
    """Save an image as 8-bit PNG, ASCII PPM, or ASCII PGM.

    Values are clamped to [0, 1] and quantized with round(v * 255).
    """
    img = require_image(img, name="save_image input")
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        _save_png(path, img)
    elif ext == ".ppm":
        if img.shape[2] != 3:
            raise ValueError("PPM output requires a 3-channel image")
        _save_pnm(path, img, magic="P3")
    elif ext == ".pgm":
        if img.shape[2] != 1:
            raise ValueError("PGM output requires a 1-channel image")
        _save_pnm(path, img, magic="P2")
    else:
        raise UnsupportedFormatError(f"unsupported image extension: {ext!r}")


def _load_png(path) -> np.ndarray:
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            if im.mode not in ("L", "RGB"):
                raise UnsupportedFormatError(
                    f"PNG mode {im.mode!r} not supported (need 8-bit L or RGB)"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except ImageIOError:
        raise
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CorruptImageError(f"cannot decode PNG {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def _save_png(path, img: np.ndarray) -> None:
    from PIL import Image as PILImage

    q = _quantize(img)
    if q.shape[2] == 1:
        PILImage.fromarray(q[:, :, 0], mode="L").save(path, format="PNG")
    else:
        PILImage.fromarray(q, mode="RGB").save(path, format="PNG")


def _load_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise CorruptImageError(f"{path}: not an ASCII PNM file") from exc
    # strip comment lines before tokenizing
    tokens = []
    for line in text.splitlines():
        body = line.split("#", 1)[0]
        tokens.extend(body.split())
    if not tokens:
        raise CorruptImageError(f"{path}: empty file")
    magic = tokens[0]
    if magic == "P2":
        channels = 1
    elif magic == "P3":
        channels = 3
    else:
        raise UnsupportedFormatError(f"{path}: unsupported PNM magic {magic!r}")
    if len(tokens) < 4:
        raise CorruptImageError(f"{path}: truncated header")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise CorruptImageError(f"{path}: non-integer header field") from exc
    if w < 1 or h < 1:
        raise DimensionMismatchError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    values = tokens[4:]
    expected = w * h * channels
    if len(values) != expected:
        raise DimensionMismatchError(
            f"{path}: header promises {expected} samples, found {len(values)}"
        )
    try:
        data = np.array([int(v) for v in values], dtype=np.int64)
    except ValueError as exc:
        raise CorruptImageError(f"{path}: non-integer sample") from exc
    if data.min() < 0 or data.max() > 255:
        raise CorruptImageError(f"{path}: sample outside [0, 255]")
    return data.reshape(h, w, channels).astype(np.float64) / 255.0


def _save_pnm(path, img: np.ndarray, magic: str) -> None:
    q = _quantize(img)
    h, w, c = q.shape
    lines = [magic, f"{w} {h}", "255"]
    flat = q.reshape(-1)
    # 12 samples per line keeps rows well under the 70-char PNM limit
    for start in range(0, flat.size, 12):
        lines.append(" ".join(str(int(v)) for v in flat[start : start + 12]))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
