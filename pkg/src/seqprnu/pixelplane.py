"""Image planes: decoding, denoising, noise residuals and saturation masks.

An image plane is a 2-D ``float64`` numpy array of intensities on the
[0, 255] scale (row-major, shape ``(height, width)``).  A pixel mask is a
boolean array of the same shape where ``True`` marks a usable pixel.
"""

from __future__ import annotations

from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, DegenerateInputError, ImageFormatError, ShapeError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
DEFAULT_WINDOW = 3
DEFAULT_SATURATION = 250.0

Denoiser = Callable[[np.ndarray], np.ndarray]


def as_plane(data) -> np.ndarray:
    """Validate and convert ``data`` to a finite 2-D float64 plane."""
    plane = np.asarray(data, dtype=np.float64)
    if plane.ndim != 2:
        raise ShapeError(f"image plane must be 2-D, got shape {plane.shape}")
    if not np.all(np.isfinite(plane)):
        raise DataError("image plane contains non-finite values")
    return plane


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _from_pil(im: Image.Image) -> np.ndarray:
    mode = im.mode
    if mode in ("I;16", "I;16L", "I;16B", "I;16N", "I"):
        arr = np.asarray(im, dtype=np.float64)
        return arr * (255.0 / 65535.0)
    if mode == "1":
        return np.asarray(im, dtype=np.float64) * 255.0
    if mode in ("L", "LA"):
        return np.asarray(im.getchannel(0), dtype=np.float64)
    if mode in ("P", "PA", "CMYK", "YCbCr", "RGBA", "RGBX", "RGB"):
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
        return rgb @ np.asarray(LUMA_WEIGHTS)
    raise ImageFormatError(f"unsupported pixel mode {mode!r}")


def _from_tiff(path: Path) -> np.ndarray:
    import tifffile

    arr = tifffile.imread(path)
    if arr.dtype == np.uint16:
        scale = 255.0 / 65535.0
    elif arr.dtype == np.uint8:
        scale = 1.0
    else:
        raise ImageFormatError(f"unsupported TIFF sample type {arr.dtype}")
    arr = arr.astype(np.float64) * scale
    if arr.ndim == 3 and arr.shape[-1] in (3, 4):
        arr = arr[..., :3] @ np.asarray(LUMA_WEIGHTS)
    if arr.ndim != 2:
        raise ImageFormatError(f"unsupported TIFF layout {arr.shape}")
    return arr


def load_grayscale(path) -> np.ndarray:
    """Decode a PNG, TIFF or PGM file into a luminance plane on [0, 255].

    RGB input is reduced with the Rec. 601 luma weights and 16-bit samples
    are rescaled so that 65535 maps to 255.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            plane = _from_pil(im)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"cannot decode {path}") from exc
    except (ImageFormatError, OSError, ValueError):
        # Pillow gives up on multi-channel 16-bit TIFFs
        if path.suffix.lower() not in (".tif", ".tiff"):
            raise
        plane = _from_tiff(path)
    return as_plane(plane)


def _box_sum(img: np.ndarray, window: int) -> np.ndarray:
    # Separable sum over a square window with zero padding; every output
    # pixel sees the same sequence of additions, so the result is exactly
    # shift-covariant away from the border.
    h, w = img.shape
    r = window // 2
    padded = np.zeros((h + 2 * r, w + 2 * r))
    padded[r:r + h, r:r + w] = img
    rows = padded[:, 0:w].copy()
    for dx in range(1, window):
        rows += padded[:, dx:dx + w]
    out = rows[0:h].copy()
    for dy in range(1, window):
        out += rows[dy:dy + h]
    return out


def _window_counts(shape, window: int) -> np.ndarray:
    h, w = shape
    r = window // 2
    rows = np.minimum(np.arange(h) + r, h - 1) - np.maximum(np.arange(h) - r, 0) + 1
    cols = np.minimum(np.arange(w) + r, w - 1) - np.maximum(np.arange(w) - r, 0) + 1
    return np.outer(rows, cols).astype(np.float64)


def local_moments(img: np.ndarray, window: int = DEFAULT_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Local mean and (population) variance over clipped square windows."""
    # Windows are clipped at the border: zero padding adds nothing to the
    # sums and the count only covers pixels inside the plane.
    count = _window_counts(img.shape, window)
    mean = _box_sum(img, window) / count
    s2 = _box_sum(img * img, window)
    var = np.maximum(s2 / count - mean * mean, 0.0)
    return mean, var


def denoise(img, window: int = DEFAULT_WINDOW, noise_var: float | None = None) -> np.ndarray:
    """Locally adaptive Wiener estimate of the noise-free scene.

    Each pixel is shrunk towards its local mean with gain
    ``max(0, s2 - noise_var) / max(s2, noise_var)``.  When ``noise_var`` is
    not given it is the median of the local variances over the plane, or
    their mean when more than half the windows are perfectly flat.
    """
    img = as_plane(img)
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if img.shape[0] < window or img.shape[1] < window:
        raise DegenerateInputError(f"image {img.shape} smaller than window {window}")
    mean, var = local_moments(img, window)
    if noise_var is None:
        noise_var = float(np.median(var))
        if noise_var == 0:
            noise_var = float(np.mean(var))
    denom = np.maximum(var, noise_var)
    gain = np.divide(np.maximum(var - noise_var, 0.0), denom,
                     out=np.zeros_like(var), where=denom > 0)
    return mean + gain * (img - mean)


def residual(img, denoised) -> np.ndarray:
    """Noise residual ``img - denoised``."""
    img = np.asarray(img, dtype=np.float64)
    denoised = np.asarray(denoised, dtype=np.float64)
    _check_same_shape(img, denoised)
    return img - denoised


def saturation_mask(img, threshold: float = DEFAULT_SATURATION) -> np.ndarray:
    """Usable-pixel mask: ``False`` where intensity reaches ``threshold``."""
    if not 0 < threshold <= 255:
        raise ValueError(f"threshold must lie in (0, 255], got {threshold}")
    return np.asarray(img) < threshold


def wiener_denoiser(window: int = DEFAULT_WINDOW) -> Denoiser:
    """Return the default denoiser bound to a window size."""
    return partial(denoise, window=window)
