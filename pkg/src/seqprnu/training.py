"""Learning the H1 laws mu(v), sigma2(v) and the H0 generalized Gaussian."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln

from . import fingerprint as fpmod
from .errors import FitError, InsufficientDataError
from .pixelplane import as_plane, denoise, saturation_mask
from .sprt import partition_subsets
from .stats import H0Model, ObservationConfig, PreparedImage, observe_batch, prepare, sample_shifts

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-6
DEFAULT_BINS = 20
DEFAULT_REPEATS = 5
SHAPE_BOUNDS = (0.1, 10.0)


@dataclass(frozen=True)
class H1Model:
    """Gaussian law of u' under H1, either binned over v or fixed."""

    kind: str
    M_tr: int
    bin_edges: tuple = ()
    mu: tuple = ()
    sigma2: tuple = ()
    fixed_mu: float = 0.0
    fixed_sigma2: float = 1.0

    def __post_init__(self):
        if self.kind == "binned":
            edges = np.asarray(self.bin_edges, dtype=np.float64)
            if len(self.mu) != len(edges) - 1 or len(self.sigma2) != len(self.mu):
                raise ValueError("binned model needs len(edges) - 1 == len(mu) == len(sigma2)")
            if len(self.mu) < 1 or np.any(np.diff(edges) <= 0):
                raise ValueError("bin edges must be strictly ascending")
            if min(self.sigma2) <= 0:
                raise ValueError("all sigma2 must be positive")
            for name in ("bin_edges", "mu", "sigma2"):
                object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        elif self.kind == "fixed":
            if not self.fixed_sigma2 > 0:
                raise ValueError("fixed_sigma2 must be positive")
        else:
            raise ValueError(f"unknown H1 model kind {self.kind!r}")
        if self.M_tr <= 0:
            raise ValueError("M_tr must be positive")

    @property
    def num_bins(self) -> int:
        return len(self.mu) if self.kind == "binned" else 1

    def lookup(self, v: float) -> tuple[float, float]:
        return lookup(self, v)

    def rescale(self, M_t: int) -> "H1Model":
        return rescale(self, M_t)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "bin_edges": list(self.bin_edges), "mu": list(self.mu),
             "sigma2": list(self.sigma2), "M_tr": self.M_tr}
        if self.kind == "fixed":
            d.update(fixed_mu=self.fixed_mu, fixed_sigma2=self.fixed_sigma2)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "H1Model":
        if d["kind"] == "fixed":
            return cls("fixed", int(d["M_tr"]), fixed_mu=float(d["fixed_mu"]),
                       fixed_sigma2=float(d["fixed_sigma2"]))
        return cls("binned", int(d["M_tr"]), tuple(d["bin_edges"]), tuple(d["mu"]),
                   tuple(d["sigma2"]))


def lookup(model: H1Model, v: float) -> tuple[float, float]:
    """(mu, sigma2) of the half-open bin holding ``v``; outer bins extend to infinity."""
    if model.kind == "fixed":
        return model.fixed_mu, model.fixed_sigma2
    interior = model.bin_edges[1:-1]
    # bisect_right on the interior edges: a value on an edge goes right.
    lo, hi = 0, len(interior)
    while lo < hi:
        mid = (lo + hi) // 2
        if v < interior[mid]:
            hi = mid
        else:
            lo = mid + 1
    return model.mu[lo], model.sigma2[lo]


def rescale(model: H1Model, M_t: int) -> H1Model:
    """Carry a model to subsets of ``M_t`` pixels: v, mu, sigma2 scale by sqrt(M_t/M_tr)."""
    if M_t <= 0:
        raise ValueError("M_t must be positive")
    s = math.sqrt(M_t / model.M_tr)
    if model.kind == "fixed":
        return H1Model("fixed", int(M_t), fixed_mu=model.fixed_mu * s,
                       fixed_sigma2=model.fixed_sigma2 * s)
    return H1Model("binned", int(M_t), tuple(s * e for e in model.bin_edges),
                   tuple(s * m for m in model.mu), tuple(s * q for q in model.sigma2))


def _as_pairs(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(arr)):
        raise ValueError("pairs must be finite")
    # Canonical order makes the fit independent of input order.
    return arr[np.lexsort((arr[:, 0], arr[:, 1]))]


def _sample_var(x: np.ndarray) -> float:
    var = float(np.var(x, ddof=1)) if x.size > 1 else 0.0
    return max(var, SIGMA2_FLOOR)


def fit_h1_fixed(pairs, M_tr: int) -> H1Model:
    """v-independent H1 law: overall mean and variance of u'."""
    arr = _as_pairs(pairs)
    if len(arr) < 1:
        raise InsufficientDataError("no (u', v) pairs")
    u = arr[:, 0]
    return H1Model("fixed", int(M_tr), fixed_mu=float(u.mean()), fixed_sigma2=_sample_var(u))


def fit_h1(pairs, num_bins: int = DEFAULT_BINS, M_tr: int = 1024) -> H1Model:
    """Bin v at its quantiles and take the mean and variance of u' per bin.

    Bins holding fewer than two pairs are merged into the neighbor whose
    values are closest.  If a single bin remains the fixed model is returned.
    """
    arr = _as_pairs(pairs)
    if len(arr) < 2:
        raise InsufficientDataError(f"need at least 2 pairs, got {len(arr)}")
    u, v = arr[:, 0], arr[:, 1]
    edges = np.unique(np.quantile(v, np.linspace(0, 1, num_bins + 1)))
    if len(edges) < 2:
        return fit_h1_fixed(arr, M_tr)
    edges = list(edges)
    while len(edges) > 2:
        idx = np.searchsorted(edges[1:-1], v, side="right")
        counts = np.bincount(idx, minlength=len(edges) - 1)
        small = np.flatnonzero(counts < 2)
        if small.size == 0:
            break
        b = int(small[0])
        if b == 0:
            drop = 1
        elif b == len(counts) - 1:
            drop = b
        else:
            center = v[idx == b].mean() if counts[b] else 0.5 * (edges[b] + edges[b + 1])
            left = v[idx == b - 1].mean() if counts[b - 1] else edges[b]
            right = v[idx == b + 1].mean() if counts[b + 1] else edges[b + 1]
            drop = b if center - left <= right - center else b + 1
        del edges[drop]
    if len(edges) == 2:
        return fit_h1_fixed(arr, M_tr)
    idx = np.searchsorted(edges[1:-1], v, side="right")
    mu = [float(u[idx == b].mean()) for b in range(len(edges) - 1)]
    sigma2 = [_sample_var(u[idx == b]) for b in range(len(edges) - 1)]
    return H1Model("binned", int(M_tr), tuple(edges), tuple(mu), tuple(sigma2))


def ggd_kurtosis(c):
    """Kurtosis E[x^4] / E[x^2]^2 of a generalized Gaussian with shape ``c``."""
    return np.exp(gammaln(5 / c) + gammaln(1 / c) - 2 * gammaln(3 / c))


def moment_shape(x) -> float:
    """Shape parameter matching the sample kurtosis (zero mean assumed)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    m2 = np.mean(x ** 2)
    kurt = np.mean(x ** 4) / (m2 * m2)
    lo, hi = SHAPE_BOUNDS
    if kurt >= ggd_kurtosis(lo):
        return lo
    if kurt <= ggd_kurtosis(hi):
        return hi
    for _ in range(100):
        mid = math.sqrt(lo * hi)
        if ggd_kurtosis(mid) > kurt:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def ggd_scale(x, c: float) -> float:
    """Maximum-likelihood scale for a given shape: ``(c mean|x|^c)^(1/c)``."""
    return float((c * np.mean(np.abs(x) ** c)) ** (1 / c))


def ggd_loglik(x, alpha: float, c: float) -> float:
    x = np.abs(np.asarray(x, dtype=np.float64))
    n = x.size
    return float(n * (math.log(c) - math.log(2 * alpha) - gammaln(1 / c))
                 - np.sum((x / alpha) ** c))


def _shape_score(c: float, ax: np.ndarray, logx: np.ndarray) -> float:
    # Derivative of the profile log-likelihood in c (times c / n).
    xc = ax ** c
    s0 = xc.mean()
    s1 = (xc * logx).mean()
    return 1 + digamma(1 / c) / c + math.log(c * s0) / c - s1 / s0


def fit_h0_ggd(samples, max_iter: int = 200, tol: float = 1e-10) -> H0Model:
    """Maximum-likelihood generalized Gaussian fit of u' samples under H0.

    Newton iterations on the shape score, started from the kurtosis match and
    safeguarded by a bisection bracket on [0.1, 10].
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 100:
        raise InsufficientDataError(f"need at least 100 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if np.ptp(x) == 0:
        raise FitError("all samples are equal; shape is not identifiable", last=None)
    rms = math.sqrt(float(np.mean(x * x)))
    ax = np.abs(x) / rms
    logx = np.log(np.where(ax > 0, ax, 1.0))
    lo, hi = SHAPE_BOUNDS
    g_lo, g_hi = _shape_score(lo, ax, logx), _shape_score(hi, ax, logx)
    c = moment_shape(ax)
    if g_lo <= 0:
        c = lo
    elif g_hi >= 0:
        c = hi
    else:
        for it in range(max_iter):
            g = _shape_score(c, ax, logx)
            if g > 0:
                lo = c
            else:
                hi = c
            h = 1e-6 * c
            dg = (_shape_score(c + h, ax, logx) - _shape_score(c - h, ax, logx)) / (2 * h)
            step = -g / dg if dg < 0 else None
            new = c + step if step is not None else None
            if new is None or not lo < new < hi:
                new = 0.5 * (lo + hi)
            if abs(new - c) <= tol * c or hi - lo <= tol * c:
                c = new
                break
            c = new
        else:
            raise FitError(f"shape fit did not converge in {max_iter} iterations",
                           last=(rms * ggd_scale(ax, c), c))
    return H0Model(alpha0=rms * ggd_scale(ax, c), c0=float(c))


def _seed_for(seed, *keys) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def _loo_observations(img: PreparedImage, T: int, seed, config: ObservationConfig) -> np.ndarray:
    subsets = partition_subsets(img.mask, T, None, seed)
    shifts = None
    if config.variance == "shift":
        rng = np.random.default_rng([seed, 1])
        shifts = sample_shifts(img.shape, config.exclusion_radius, config.num_shifts, rng)
    st = observe_batch(img, subsets, config, shifts)
    keep = st.valid
    return np.column_stack([st.u_prime[keep], st.v[keep]])


def collect_pairs(training_images: Sequence, subset_size: int, seed: int = 0, denoiser=None,
                  config: ObservationConfig = ObservationConfig()) -> np.ndarray:
    """Leave-one-out (u', v) pairs from the training images of one camera.

    For each image the fingerprint is re-estimated from the other L - 1
    images, the image is split into pseudorandom ``subset_size``-pixel subsets
    and one pair is produced per subset.  Returns an ``(n, 2)`` array.

    ``training_images`` only needs ``len`` and indexing; every image is read
    twice, so lazily generated sequences keep memory flat.
    """
    L = len(training_images)
    if L < 3:
        raise InsufficientDataError(f"need at least 3 training images, got {L}")

    def load(m):
        y = as_plane(training_images[m])
        xhat = denoiser(y) if denoiser is not None else denoise(y, config.window)
        return y, xhat, saturation_mask(y, config.saturation)

    first = as_plane(training_images[0])
    acc = fpmod.PrnuAccumulator(first.shape)
    for m in range(L):
        acc.add(*load(m))
    out = []
    for m in range(L):
        y, xhat, mask = load(m)
        k = acc.estimate(exclude=fpmod.PrnuAccumulator.contribution(y, xhat, mask))
        if config.postprocess:
            k = fpmod.postprocess(fpmod.Fingerprint(k, L - 1)).k
        img = PreparedImage(y - xhat, k * xhat, mask)
        try:
            out.append(_loo_observations(img, subset_size, _seed_for(seed, m), config))
        except InsufficientDataError:
            log.warning("training image %d has fewer than %d usable pixels; skipped", m, subset_size)
    if not out:
        raise InsufficientDataError("no training image had enough usable pixels")
    return np.concatenate(out)


def collect_h0_samples(images: Sequence, fp, subset_size: int, seed: int = 0, denoiser=None,
                       config: ObservationConfig = ObservationConfig(),
                       max_subsets: int | None = None) -> np.ndarray:
    """u' values of subsets of images that were not taken by the fingerprinted camera."""
    out = []
    for m in range(len(images)):
        img = prepare(images[m], fp.k, config, denoiser)
        try:
            subsets = partition_subsets(img.mask, subset_size, max_subsets, _seed_for(seed, m))
        except InsufficientDataError:
            continue
        shifts = None
        if config.variance == "shift":
            rng = np.random.default_rng([_seed_for(seed, m), 1])
            shifts = sample_shifts(img.shape, config.exclusion_radius, config.num_shifts, rng)
        st = observe_batch(img, subsets, config, shifts)
        out.append(st.u_prime[st.valid])
    if not out:
        raise InsufficientDataError("no usable H0 images")
    return np.concatenate(out)


@dataclass
class TrainingResult:
    h1: H1Model
    pairs: np.ndarray = field(repr=False)
    selections: list


def train_h1(images: Sequence, subset_size: int, seed: int = 0, repeats: int = DEFAULT_REPEATS,
             L: int | None = None, num_bins: int = DEFAULT_BINS, fixed: bool = False,
             denoiser=None, config: ObservationConfig = ObservationConfig()) -> TrainingResult:
    """Pool leave-one-out pairs over ``repeats`` random selections of ``L`` images."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    n = len(images)
    L = n if L is None else min(L, n)
    pooled, selections = [], []
    for r in range(repeats):
        if L < n:
            rng = np.random.default_rng(_seed_for(seed, r, 7))
            chosen = sorted(rng.choice(n, size=L, replace=False).tolist())
        else:
            chosen = list(range(n))
        selections.append(chosen)
        subset = _Subsequence(images, chosen)
        pooled.append(collect_pairs(subset, subset_size, _seed_for(seed, r), denoiser, config))
    pairs = np.concatenate(pooled)
    h1 = fit_h1_fixed(pairs, subset_size) if fixed else fit_h1(pairs, num_bins, subset_size)
    return TrainingResult(h1, pairs, selections)


class _Subsequence:
    def __init__(self, base, indices):
        self.base = base
        self.indices = list(indices)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return self.base[self.indices[i]]


def save_model(path, h1: H1Model, h0: H0Model, extra: dict | None = None) -> Path:
    """Write the detection model JSON (H1 law plus H0 parameters)."""
    d = h1.to_dict()
    d["h0"] = h0.to_dict()
    if extra:
        d["meta"] = extra
    path = Path(path)
    path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> tuple[H1Model, H0Model]:
    d = json.loads(Path(path).read_text())
    return H1Model.from_dict(d), H0Model.from_dict(d["h0"])
