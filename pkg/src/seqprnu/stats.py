"""Detection statistics, variance estimators and hypothesis log-densities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincinv, gammaln

from .errors import DegenerateInputError, DomainError, ShapeError
from .pixelplane import as_plane, denoise, residual, saturation_mask

DEFAULT_EXCLUSION_RADIUS = 2
DEFAULT_NUM_SHIFTS = 64
# Full-plane variance_shift gathers shifted residuals in blocks of this many
# pixels x shifts to bound memory.
_GATHER_BUDGET = 1 << 22


@dataclass(frozen=True)
class Observation:
    u_prime: float
    v: float
    subset_id: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.u_prime) and math.isfinite(self.v)):
            raise DomainError("observation statistics must be finite")
        if self.v < 0:
            raise DomainError(f"v must be non-negative, got {self.v}")


@dataclass(frozen=True)
class H0Model:
    """Zero-mean generalized Gaussian law of u' for images of other cameras."""

    alpha0: float
    c0: float

    def __post_init__(self):
        if not (self.alpha0 > 0 and self.c0 > 0):
            raise DomainError(f"GGD parameters must be positive: {self}")

    @property
    def log_scale_term(self) -> float:
        """``log(2 alpha0 Gamma(1/c0))``, the per-observation normalizer."""
        return math.log(2 * self.alpha0) + float(gammaln(1 / self.c0))

    def to_dict(self) -> dict:
        return {"alpha0": self.alpha0, "c0": self.c0}

    @classmethod
    def from_dict(cls, d: dict) -> "H0Model":
        return cls(float(d["alpha0"]), float(d["c0"]))


# Fixed H0 law for use when no cross-camera images are available.
REFERENCE_H0 = H0Model(alpha0=1.24, c0=1.78)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 1:
        raise ShapeError("empty sample vectors")
    return a, b


def statistic_u(residual, kx) -> float:
    """Correlation ``<residual, kx>`` where ``kx = k * xhat`` on the subset."""
    r, k = _pair(residual, kx)
    return float(np.dot(r.ravel(), k.ravel()))


def variance_fast(kx, residual) -> float:
    """Cheap variance estimate of u: ``||kx||^2 ||residual||^2 / M``."""
    k, r = _pair(kx, residual)
    return float(np.dot(k.ravel(), k.ravel()) * np.dot(r.ravel(), r.ravel()) / k.size)


def statistic_v(kx, sigma_u: float) -> float:
    """Fingerprint energy normalized by the std of u: ``||kx||^2 / sigma_u``."""
    if not sigma_u > 0:
        raise DomainError(f"sigma_u must be positive, got {sigma_u}")
    k = np.asarray(kx, dtype=np.float64).ravel()
    return float(np.dot(k, k) / sigma_u)


def _signed(q, n):
    return np.where(q > n // 2, q - n, q)


def is_excluded(q1, q2, shape, exclusion_radius: int):
    """True for circular shifts within ``exclusion_radius`` of the origin."""
    h, w = shape
    return np.maximum(np.abs(_signed(np.asarray(q1), h)),
                      np.abs(_signed(np.asarray(q2), w))) <= exclusion_radius


def admissible_count(shape, exclusion_radius: int) -> int:
    h, w = shape
    side = 2 * exclusion_radius + 1
    return h * w - min(side, h) * min(side, w)


def sample_shifts(shape, exclusion_radius: int, num_shifts: int, rng) -> np.ndarray:
    """Distinct admissible circular shifts as an ``(n, 2)`` array.

    All admissible shifts are returned (in raster order) when ``num_shifts``
    covers them; otherwise ``num_shifts`` are drawn uniformly without
    replacement.
    """
    if num_shifts < 1:
        raise ValueError("num_shifts must be >= 1")
    h, w = shape
    total = admissible_count(shape, exclusion_radius)
    if total <= 0:
        raise DegenerateInputError(
            f"plane {shape} admits no shift outside radius {exclusion_radius}")
    if num_shifts >= total:
        q1, q2 = np.divmod(np.arange(h * w), w)
        keep = ~is_excluded(q1, q2, shape, exclusion_radius)
        return np.stack([q1[keep], q2[keep]], axis=1)
    chosen: dict[int, None] = {}
    while len(chosen) < num_shifts:
        flat = rng.integers(0, h * w, size=2 * (num_shifts - len(chosen)))
        q1, q2 = np.divmod(flat, w)
        for f in flat[~is_excluded(q1, q2, shape, exclusion_radius)]:
            chosen.setdefault(int(f), None)
            if len(chosen) == num_shifts:
                break
    q1, q2 = np.divmod(np.fromiter(chosen, dtype=np.int64), w)
    return np.stack([q1, q2], axis=1)


def shifted_correlations(residual_plane, rows, cols, kx_values, shifts) -> np.ndarray:
    """``<shift_q(residual), kx>`` for each shift, with kx supported on (rows, cols).

    A right circular shift by ``(q1, q2)`` reads the residual at
    ``(i - q1, j - q2)`` modulo the plane size.
    """
    h, w = residual_plane.shape
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    kx_values = np.asarray(kx_values, dtype=np.float64)
    flat_res = residual_plane.ravel()
    out = np.empty(len(shifts))
    step = max(1, _GATHER_BUDGET // max(1, rows.size))
    for start in range(0, len(shifts), step):
        q = shifts[start:start + step]
        rr = (rows[None, :] - q[:, :1]) % h
        cc = (cols[None, :] - q[:, 1:]) % w
        out[start:start + step] = flat_res[rr * w + cc] @ kx_values
    return out


def variance_shift(residual_plane, kx_plane, exclusion_radius: int = DEFAULT_EXCLUSION_RADIUS,
                   num_shifts: int = DEFAULT_NUM_SHIFTS, seed=0) -> float:
    """Variance of u from circularly shifted residuals.

    Mean of ``<shift_q(residual), kx>^2`` over ``num_shifts`` admissible shifts
    (those farther than ``exclusion_radius`` from the origin), drawn with a
    seeded generator.
    """
    residual_plane = np.asarray(residual_plane, dtype=np.float64)
    kx_plane = np.asarray(kx_plane, dtype=np.float64)
    if residual_plane.shape != kx_plane.shape or residual_plane.ndim != 2:
        raise ShapeError(f"planes differ: {residual_plane.shape} vs {kx_plane.shape}")
    rng = np.random.default_rng(seed)
    shifts = sample_shifts(residual_plane.shape, exclusion_radius, num_shifts, rng)
    rows, cols = np.nonzero(kx_plane)
    if rows.size == 0:
        return 0.0
    corr = shifted_correlations(residual_plane, rows, cols, kx_plane[rows, cols], shifts)
    return float(np.mean(corr * corr))


def ggd_logpdf(x, model: H0Model):
    """Log-density of the zero-mean generalized Gaussian law."""
    a, c = model.alpha0, model.c0
    log_norm = math.log(c) - math.log(2 * a) - float(gammaln(1 / c))
    return log_norm - (np.abs(x) / a) ** c


def ggd_ppf(q, model: H0Model):
    """Quantile function of the zero-mean generalized Gaussian law."""
    q = np.asarray(q, dtype=np.float64)
    a, c = model.alpha0, model.c0
    p = np.abs(2 * q - 1)
    mag = a * gammaincinv(1 / c, p) ** (1 / c)
    return np.sign(q - 0.5) * mag


def ggd_sample(model: H0Model, size, rng) -> np.ndarray:
    """Draw samples via ``|x| = alpha * G**(1/c)``, ``G ~ Gamma(1/c)``."""
    g = rng.gamma(1 / model.c0, 1.0, size=size)
    sign = rng.choice(np.array([-1.0, 1.0]), size=size)
    return sign * model.alpha0 * g ** (1 / model.c0)


def increment_D(obs: Observation, h0: H0Model, mu: float, sigma2: float) -> float:
    """Per-observation log-likelihood-ratio increment without the GGD normalizer.

    ``(|u'|/a0)^c0 - (u' - mu)^2 / (2 s2) - log(c0 sqrt(2 pi s2))``; adding
    ``h0.log_scale_term`` gives the full log-likelihood ratio.
    """
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    u = obs.u_prime
    return ((abs(u) / h0.alpha0) ** h0.c0
            - (u - mu) ** 2 / (2 * sigma2)
            - math.log(h0.c0 * math.sqrt(2 * math.pi * sigma2)))


@dataclass(frozen=True)
class ObservationConfig:
    """How images are turned into (u', v) observations."""

    variance: str = "fast"
    exclusion_radius: int = DEFAULT_EXCLUSION_RADIUS
    num_shifts: int = DEFAULT_NUM_SHIFTS
    window: int = 3
    saturation: float = 250.0
    postprocess: bool = True

    def __post_init__(self):
        if self.variance not in ("fast", "shift"):
            raise ValueError(f"unknown variance estimator {self.variance!r}")

    def to_dict(self) -> dict:
        return {
            "variance": self.variance,
            "exclusion_radius": self.exclusion_radius,
            "num_shifts": self.num_shifts,
            "window": self.window,
            "saturation": self.saturation,
            "postprocess": self.postprocess,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class PreparedImage:
    """Per-image planes shared by every subset observation."""

    residual: np.ndarray
    kx: np.ndarray
    mask: np.ndarray

    @property
    def shape(self):
        return self.residual.shape


def prepare(y, k, config: ObservationConfig = ObservationConfig(), denoiser=None) -> PreparedImage:
    """Denoise ``y`` once and form the residual, ``k * xhat`` and usable mask."""
    y = as_plane(y)
    k = np.asarray(k, dtype=np.float64)
    if y.shape != k.shape:
        raise ShapeError(f"image {y.shape} does not match fingerprint {k.shape}")
    xhat = denoiser(y) if denoiser is not None else denoise(y, config.window)
    return PreparedImage(residual(y, xhat), k * xhat, saturation_mask(y, config.saturation))


@dataclass
class SubsetStats:
    """Vectorized per-subset statistics; ``valid`` is False where sigma_u = 0."""

    u: np.ndarray
    var_u: np.ndarray
    energy: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.var_u > 0

    @property
    def sigma_u(self) -> np.ndarray:
        return np.sqrt(self.var_u)

    @property
    def u_prime(self) -> np.ndarray:
        return np.divide(self.u, self.sigma_u, out=np.zeros_like(self.u), where=self.valid)

    @property
    def v(self) -> np.ndarray:
        return np.divide(self.energy, self.sigma_u, out=np.zeros_like(self.u), where=self.valid)


def observe_batch(img: PreparedImage, subsets, config: ObservationConfig = ObservationConfig(),
                  shifts=None) -> SubsetStats:
    """u, its variance estimate and ``||kx||^2`` for each row of ``subsets``.

    ``subsets`` holds flat pixel indices, one subset per row.  The shift
    estimator needs ``shifts`` (see :func:`sample_shifts`).
    """
    subsets = np.atleast_2d(np.asarray(subsets))
    r = img.residual.ravel()[subsets]
    kx = img.kx.ravel()[subsets]
    u = np.einsum("ij,ij->i", r, kx)
    energy = np.einsum("ij,ij->i", kx, kx)
    if config.variance == "fast":
        var_u = energy * np.einsum("ij,ij->i", r, r) / subsets.shape[1]
    else:
        if shifts is None:
            raise ValueError("shift variance estimator requires shifts")
        w = img.shape[1]
        var_u = np.empty(len(subsets))
        for j, idx in enumerate(subsets):
            corr = shifted_correlations(img.residual, idx // w, idx % w, kx[j], shifts)
            var_u[j] = np.mean(corr * corr)
    return SubsetStats(u, var_u, energy)
