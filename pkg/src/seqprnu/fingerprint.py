"""PRNU fingerprint estimation, postprocessing and the binary file format."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DataError, DegenerateInputError, InsufficientDataError, ShapeError

MAGIC = b"PRNUFP1\0"
_HEADER = struct.Struct("<IIIB")
SPECTRAL_WINDOWS = (3, 5, 7, 9)


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """Per-pixel PRNU estimate ``k`` (shape ``(height, width)``)."""

    k: np.ndarray
    L: int
    postprocessed: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        k = np.asarray(self.k, dtype=np.float64)
        if k.ndim != 2:
            raise ShapeError(f"fingerprint must be 2-D, got {k.shape}")
        if not np.all(np.isfinite(k)):
            raise DataError("fingerprint contains non-finite values")
        k.setflags(write=False)
        object.__setattr__(self, "k", k)

    def __eq__(self, other):
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return (self.L == other.L and self.postprocessed == other.postprocessed
                and np.array_equal(self.k, other.k))

    __hash__ = None

    @property
    def height(self) -> int:
        return self.k.shape[0]

    @property
    def width(self) -> int:
        return self.k.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.k.shape


class PrnuAccumulator:
    """Running numerator/denominator of the per-pixel PRNU estimate.

    ``num = sum (y - xhat) * xhat`` and ``den = sum xhat**2`` over the
    images added so far, with masked-out samples contributing nothing.
    """

    def __init__(self, shape):
        self.num = np.zeros(shape)
        self.den = np.zeros(shape)
        self.count = 0

    @staticmethod
    def contribution(y, xhat, mask=None):
        y = np.asarray(y, dtype=np.float64)
        xhat = np.asarray(xhat, dtype=np.float64)
        if y.shape != xhat.shape:
            raise ShapeError(f"shape mismatch: {y.shape} vs {xhat.shape}")
        num = (y - xhat) * xhat
        den = xhat * xhat
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != y.shape:
                raise ShapeError(f"mask shape {mask.shape} does not match {y.shape}")
            num = np.where(mask, num, 0.0)
            den = np.where(mask, den, 0.0)
        return num, den

    def add(self, y, xhat, mask=None):
        num, den = self.contribution(y, xhat, mask)
        if num.shape != self.num.shape:
            raise ShapeError(f"shape mismatch: {num.shape} vs {self.num.shape}")
        self.num += num
        self.den += den
        self.count += 1

    def estimate(self, exclude=None) -> np.ndarray:
        """Current ``k`` estimate; ``exclude`` removes one (num, den) contribution."""
        num, den = self.num, self.den
        if exclude is not None:
            num = num - exclude[0]
            den = den - exclude[1]
        return ratio_or_zero(num, den)


def ratio_or_zero(num, den):
    # Pixels never lit across training (den == 0) get k = 0.
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _digest(*arrays) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        if a is None:
            h.update(b"-")
        else:
            h.update(np.ascontiguousarray(a).tobytes())
    return h.digest()


def estimate(training: Sequence[tuple], masks: Sequence | None = None) -> Fingerprint:
    """Estimate the PRNU from ``(y, xhat)`` pairs of the same camera.

    Per pixel, ``k = <y - xhat, xhat> / ||xhat||^2`` over the training
    samples.  Samples are accumulated in a content-defined order so the
    result does not depend on the order of ``training``.
    """
    training = list(training)
    if len(training) < 2:
        raise InsufficientDataError(f"need at least 2 training images, got {len(training)}")
    if masks is None:
        masks = [None] * len(training)
    elif len(masks) != len(training):
        raise ShapeError("one mask per training image is required")
    items = []
    for (y, xhat), mask in zip(training, masks):
        y = np.asarray(y, dtype=np.float64)
        xhat = np.asarray(xhat, dtype=np.float64)
        items.append((_digest(y, xhat, mask), y, xhat, mask))
    items.sort(key=lambda item: item[0])
    acc = PrnuAccumulator(items[0][1].shape)
    for _, y, xhat, mask in items:
        acc.add(y, xhat, mask)
    return Fingerprint(acc.estimate(), L=len(items))


def estimate_mle_quadratic(xhat, y, sigma_n2: float, sigma_r2: float) -> float:
    """Shifted-PRNU estimate from the weighted-MSE quadratic for one pixel.

    Solves ``a k^2 + b k + c = 0`` with ``a = <xhat,y> sr2``,
    ``b = ||xhat||^2 sn2 - ||y||^2 sr2`` and ``c = -<xhat,y> sn2``, returning
    the root closest to ``<xhat,y>/||xhat||^2``.
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if xhat.shape != y.shape or xhat.ndim != 1:
        raise ShapeError("xhat and y must be equal-length vectors")
    if xhat.size < 2:
        raise InsufficientDataError("need at least 2 samples")
    if not sigma_n2 > 0 or sigma_r2 < 0:
        raise ValueError("require sigma_n2 > 0 and sigma_r2 >= 0")
    xy = float(xhat @ y)
    xx = float(xhat @ xhat)
    yy = float(y @ y)
    if xx == 0:
        raise DegenerateInputError("||xhat||^2 = 0: estimate undefined")
    ratio = xy / xx
    if sigma_r2 == 0:
        return ratio
    a = xy * sigma_r2
    b = xx * sigma_n2 - yy * sigma_r2
    c = -xy * sigma_n2
    if a == 0:
        if b == 0:
            raise DegenerateInputError("quadratic degenerates to 0 = 0")
        return -c / b
    disc = b * b - 4 * a * c
    if not disc >= 0:
        raise DegenerateInputError(f"no real root (discriminant {disc})")
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    roots = [q / a, c / q] if q != 0 else [-b / (2 * a)]
    return min(roots, key=lambda r: abs(r - ratio))


def zero_mean_rows_cols(k) -> np.ndarray:
    """Subtract each row's mean, then each column's mean."""
    k = np.asarray(k, dtype=np.float64)
    k = k - k.mean(axis=1, keepdims=True)
    return k - k.mean(axis=0, keepdims=True)


def wiener_dft(k, noise_var: float) -> np.ndarray:
    """Suppress spectral peaks of ``k`` with a Wiener gain in the DFT domain.

    The local energy of the normalized magnitude spectrum is averaged over
    several window sizes (circularly); the excess over ``noise_var`` (the
    smallest across windows) sets the gain ``noise_var / (excess + noise_var)``.
    A white spectrum is left almost untouched, periodic peaks are shrunk.
    """
    k = np.asarray(k, dtype=np.float64)
    if noise_var <= 0:
        return k.copy()
    h, w = k.shape
    half = np.fft.rfft2(k)
    half_energy = np.abs(half) ** 2 / k.size
    # Rebuild the full (Hermitian-symmetric) energy map for circular smoothing.
    energy = np.empty((h, w))
    nh = half.shape[1]
    energy[:, :nh] = half_energy
    if w > nh:
        cols = w - np.arange(nh, w)
        energy[:, nh:] = half_energy[(-np.arange(h)) % h][:, cols]
    excess = None
    for size in SPECTRAL_WINDOWS:
        e = np.maximum(uniform_filter(energy, size=size, mode="wrap") - noise_var, 0.0)
        excess = e if excess is None else np.minimum(excess, e)
    gain = noise_var / (excess[:, :nh] + noise_var)
    return np.fft.irfft2(half * gain, s=k.shape)


def postprocess(fp: Fingerprint, wiener_noise_floor: float | None = None) -> Fingerprint:
    """Row/column mean removal followed by DFT-domain Wiener filtering.

    The default noise floor is the variance of the mean-removed fingerprint.
    """
    if fp.postprocessed:
        raise ValueError("fingerprint is already postprocessed")
    if not np.all(np.isfinite(fp.k)):
        raise DataError("fingerprint contains non-finite values")
    k = zero_mean_rows_cols(fp.k)
    floor = float(np.var(k)) if wiener_noise_floor is None else float(wiener_noise_floor)
    k = wiener_dft(k, floor)
    # The DFT round trip leaves ~1e-17 drift; re-centering keeps the
    # zero-mean contract exact to rounding.
    k = zero_mean_rows_cols(k)
    return replace(fp, k=k, postprocessed=True)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save(fp: Fingerprint, path, meta: dict | None = None) -> Path:
    """Write ``fp`` in the PRNUFP1 binary format plus a JSON sidecar."""
    path = Path(path)
    header = MAGIC + _HEADER.pack(fp.width, fp.height, fp.L, int(fp.postprocessed))
    path.write_bytes(header + fp.k.astype("<f8").tobytes(order="C"))
    sidecar = dict(fp.meta)
    if meta:
        sidecar.update(meta)
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load(path) -> Fingerprint:
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path} is not a PRNUFP1 file")
    offset = len(MAGIC) + _HEADER.size
    width, height, L, flag = _HEADER.unpack(blob[len(MAGIC):offset])
    expected = offset + 8 * width * height
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(blob)}")
    k = np.frombuffer(blob, dtype="<f8", offset=offset).reshape(height, width)
    meta = {}
    side = sidecar_path(path)
    if side.is_file():
        meta = json.loads(side.read_text())
    return Fingerprint(k.astype(np.float64), L=L, postprocessed=bool(flag), meta=meta)
