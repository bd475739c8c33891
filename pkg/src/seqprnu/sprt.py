"""Wald's sequential probability ratio test over pseudorandom pixel subsets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import BoundViolationError, DomainError, InsufficientDataError, ShapeError
from .stats import (
    H0Model,
    Observation,
    ObservationConfig,
    PreparedImage,
    ggd_ppf,
    increment_D,
    observe_batch,
    prepare,
    sample_shifts,
)

ACCEPT_H1 = "accept_H1"
ACCEPT_H0 = "accept_H0"
UNDECIDED = "undecided"

PLAIN_PRESET = dict(pd=0.98, pf=0.3, p=0.0, beta=1.0, T=1024, N=256)
CONTAMINATED_PRESET = dict(pd=0.98, pf=0.3, p=0.0285, beta=0.65, T=1024, N=256)
PRESETS = {"paper-table2": PLAIN_PRESET, "paper-table3": CONTAMINATED_PRESET}


@dataclass(frozen=True)
class SprtPlan:
    target_PM: float
    target_PF: float
    contamination_p: float
    beta: float
    T: int
    N: int
    A: float
    B: float
    seed: int = 0
    target_PD: float | None = None

    @property
    def log_A(self) -> float:
        return math.log(self.A)

    @property
    def log_B(self) -> float:
        return math.log(self.B)

    def to_dict(self) -> dict:
        return {
            "target_PD": self.target_PD, "target_PM": self.target_PM,
            "target_PF": self.target_PF, "contamination_p": self.contamination_p,
            "beta": self.beta, "T": self.T, "N": self.N, "A": self.A, "B": self.B,
            "seed": self.seed,
        }


def max_detection_probability(pf: float, p: float) -> float:
    """Largest achievable P_D when a fraction ``p`` of H1 images lack the PRNU."""
    return 1 - p * (1 - pf)


def make_plan(pd: float, pf: float, p: float = 0.0, beta: float = 1.0,
              T: int = 1024, N: int = 256, seed: int = 0) -> SprtPlan:
    """Build thresholds ``A``, ``B`` for target detection/false-alarm rates.

    The misdetection target is corrected for contamination ``p`` before
    applying Wald's equalities; ``beta`` scales both thresholds.
    """
    if not (0 < pd < 1 and 0 < pf < 1):
        raise ValueError(f"targets must lie in (0, 1): pd={pd}, pf={pf}")
    if not 0 <= p < 1:
        raise ValueError(f"contamination must lie in [0, 1), got {p}")
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    if T < 1 or N < 1:
        raise ValueError("T and N must be >= 1")
    bound = max_detection_probability(pf, p)
    pm = ((1 - pd) - p * (1 - pf)) / (1 - p)
    if pd > bound or pm <= 0:
        raise BoundViolationError(
            f"P_D target {pd} exceeds the achievable bound {bound:.6g} for p={p}", bound)
    A = beta * (1 - pm) / pf
    B = beta * pm / (1 - pf)
    if not A > 1 > B > 0:
        raise ValueError(f"degenerate thresholds A={A}, B={B}; need A > 1 > B > 0")
    return SprtPlan(pm, pf, p, beta, int(T), int(N), A, B, seed, target_PD=pd)


def plan_from_preset(name: str, **overrides) -> SprtPlan:
    params = dict(PRESETS[name])
    params.update({k: v for k, v in overrides.items() if v is not None})
    return make_plan(**params)


def partition_subsets(mask, T: int, N: int | None, seed) -> np.ndarray:
    """Pseudorandom non-overlapping subsets of usable pixels.

    Returns an ``(n, T)`` array of flat pixel indices, ``n = min(usable // T, N)``.
    The first subsets do not depend on ``N``.
    """
    usable = np.flatnonzero(np.asarray(mask, dtype=bool))
    if usable.size < T:
        raise InsufficientDataError(f"{usable.size} usable pixels, need at least T={T}")
    n = usable.size // T
    if N is not None:
        n = min(n, N)
    perm = np.random.default_rng(seed).permutation(usable)
    return perm[: n * T].reshape(n, T)


@dataclass
class SprtDecision:
    outcome: str
    n_used: int
    llr_trace: np.ndarray
    pixels_used: int
    d_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    skipped: int = 0

    @property
    def llr_final(self) -> float:
        return float(self.llr_trace[-1]) if self.n_used else 0.0


def sequential_test(observations: Iterable[Observation | None], h1, h0: H0Model,
                    plan: SprtPlan) -> SprtDecision:
    """Accumulate the log-likelihood ratio until a threshold is crossed.

    ``None`` entries mark degenerate subsets: they cost ``T`` pixels but no
    observation.  The GGD normalizer is folded into every increment, so the
    thresholds are the constants ``log A`` and ``log B``.
    """
    log_a, log_b = plan.log_A, plan.log_B
    const = h0.log_scale_term
    llr = 0.0
    d_values, trace = [], []
    pixels = skipped = 0
    outcome = UNDECIDED
    for obs in observations:
        if len(trace) >= plan.N:
            break
        pixels += plan.T
        if obs is None:
            skipped += 1
            continue
        mu, sigma2 = h1.lookup(obs.v)
        d = increment_D(obs, h0, mu, sigma2)
        llr += d + const
        d_values.append(d)
        trace.append(llr)
        if llr >= log_a:
            outcome = ACCEPT_H1
            break
        if llr <= log_b:
            outcome = ACCEPT_H0
            break
    return SprtDecision(outcome, len(trace), np.asarray(trace), pixels,
                        np.asarray(d_values), skipped)


def image_observations(img: PreparedImage, subsets, config: ObservationConfig,
                       shifts=None) -> Iterator[Observation | None]:
    """Lazily turn each subset into an observation (``None`` if degenerate)."""
    for j, idx in enumerate(subsets):
        st = observe_batch(img, idx[None, :], config, shifts)
        if not st.valid[0]:
            yield None
        else:
            yield Observation(float(st.u_prime[0]), float(st.v[0]), j)


def _check_inputs(y_t, fp):
    shape = np.shape(y_t)
    if shape != fp.shape:
        raise ShapeError(f"image {shape} does not match fingerprint {fp.shape}")


def run(y_t, fp, h1, h0: H0Model, plan: SprtPlan, denoiser=None,
        config: ObservationConfig = ObservationConfig(), seed=None) -> SprtDecision:
    """Sequential camera test of image ``y_t`` against fingerprint ``fp``.

    ``h1`` must already be rescaled to the subset size ``plan.T``.
    ``seed`` overrides ``plan.seed`` for the subset draw.
    """
    _check_inputs(y_t, fp)
    return run_prepared(prepare(y_t, fp.k, config, denoiser), h1, h0, plan, config, seed)


def run_prepared(img: PreparedImage, h1, h0: H0Model, plan: SprtPlan,
                 config: ObservationConfig = ObservationConfig(), seed=None) -> SprtDecision:
    if h1.M_tr != plan.T:
        raise ValueError(f"H1 model is for {h1.M_tr}-pixel subsets, plan uses T={plan.T}")
    seed = plan.seed if seed is None else seed
    subsets = partition_subsets(img.mask, plan.T, None, seed)
    shifts = None
    if config.variance == "shift":
        rng = np.random.default_rng([_seed_int(seed), 1])
        shifts = sample_shifts(img.shape, config.exclusion_radius, config.num_shifts, rng)
    return sequential_test(image_observations(img, subsets, config, shifts), h1, h0, plan)


def _seed_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


@dataclass(frozen=True)
class ThresholdConfig:
    """Full-image detector settings.

    ``improved`` compares the improved statistic with ``eta3``; when ``eta3``
    is None the threshold is set so that the full log-likelihood ratio is at
    least ``log_lr``.  ``fixed`` compares u' with the (1 - pf) GGD quantile.
    """

    detector: str = "improved"
    pf: float = 0.01
    log_lr: float = 0.0
    eta3: float | None = None

    def __post_init__(self):
        if self.detector not in ("improved", "fixed"):
            raise ValueError(f"unknown detector {self.detector!r}")
        if not 0 < self.pf < 1:
            raise ValueError(f"pf must lie in (0, 1), got {self.pf}")


@dataclass(frozen=True)
class FullImageResult:
    positive: bool
    score: float
    threshold: float
    u_prime: float
    v: float
    pixels: int

    @property
    def label(self) -> str:
        return "positive" if self.positive else "negative"


def fixed_threshold(h0: H0Model, pf: float) -> float:
    """u' threshold with false-positive probability ``pf`` under the GGD law."""
    return float(ggd_ppf(1 - pf, h0))


def improved_statistic(u_prime: float, h0: H0Model, mu: float, sigma2: float) -> float:
    """``(|u'|/a0)^c0 - (u' - mu)^2 / (2 sigma2)``."""
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    return (abs(u_prime) / h0.alpha0) ** h0.c0 - (u_prime - mu) ** 2 / (2 * sigma2)


def improved_threshold(h0: H0Model, sigma2: float, log_lr: float = 0.0) -> float:
    """eta3 such that the statistic clears it iff the log-likelihood ratio >= log_lr."""
    return math.log(h0.c0 * math.sqrt(2 * math.pi * sigma2)) - h0.log_scale_term + log_lr


def decide_full(u_prime: float, v: float, h1, h0: H0Model, cfg: ThresholdConfig,
                pixels: int = 0) -> FullImageResult:
    """Non-sequential decision from whole-image statistics ``u'`` and ``v``."""
    if cfg.detector == "fixed":
        eta = fixed_threshold(h0, cfg.pf)
        return FullImageResult(u_prime > eta, u_prime, eta, u_prime, v, pixels)
    mu, sigma2 = h1.lookup(v)
    score = improved_statistic(u_prime, h0, mu, sigma2)
    eta = cfg.eta3 if cfg.eta3 is not None else improved_threshold(h0, sigma2, cfg.log_lr)
    return FullImageResult(score >= eta, score, eta, u_prime, v, pixels)


def full_image_test(y_t, fp, h1, h0: H0Model, threshold_config: ThresholdConfig = ThresholdConfig(),
                    denoiser=None, config: ObservationConfig = ObservationConfig(),
                    seed=0) -> FullImageResult:
    """Whole-image test used to retest SPRT positives and undecided images."""
    _check_inputs(y_t, fp)
    img = prepare(y_t, fp.k, config, denoiser)
    return full_image_prepared(img, h1, h0, threshold_config, config, seed)


def full_image_prepared(img: PreparedImage, h1, h0: H0Model,
                        threshold_config: ThresholdConfig = ThresholdConfig(),
                        config: ObservationConfig = ObservationConfig(), seed=0) -> FullImageResult:
    idx = np.flatnonzero(img.mask)
    if idx.size == 0:
        raise InsufficientDataError("image has no usable pixels")
    shifts = None
    if config.variance == "shift":
        rng = np.random.default_rng([_seed_int(seed), 2])
        shifts = sample_shifts(img.shape, config.exclusion_radius, config.num_shifts, rng)
    st = observe_batch(img, idx[None, :], config, shifts)
    if not st.valid[0]:
        return FullImageResult(False, float("nan"), float("nan"), 0.0, 0.0, int(idx.size))
    u_prime, v = float(st.u_prime[0]), float(st.v[0])
    h1_full = h1.rescale(idx.size) if threshold_config.detector == "improved" else h1
    return decide_full(u_prime, v, h1_full, h0, threshold_config, int(idx.size))


def cost_ratio(pd: float, pf: float, p_h1: float, n_bar: float, T: int, M: int) -> float:
    """Relative cost of sequential screening plus full retests versus full tests."""
    return pd * p_h1 + pf * (1 - p_h1) + n_bar * T / M
