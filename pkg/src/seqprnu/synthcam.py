"""Synthetic sensors following ``y = (1 + k) x + n`` for ground-truth experiments."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

SCENE_KINDS = ("flatfield", "gradient", "textured-noise", "dark", "near-saturated")
DEFAULT_SIGMA_K = 0.02
DEFAULT_SIGMA_N = 2.0


@dataclass(frozen=True)
class SynthCamera:
    width: int
    height: int
    sigma_k: float
    sigma_n: float
    seed: int
    k: np.ndarray = field(repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "sigma_k": self.sigma_k,
                "sigma_n": self.sigma_n, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthCamera":
        return make_camera(d["width"], d["height"], d["sigma_k"], d["sigma_n"], d["seed"])


def make_camera(width: int, height: int, sigma_k: float = DEFAULT_SIGMA_K,
                sigma_n: float = DEFAULT_SIGMA_N, seed: int = 0) -> SynthCamera:
    """Camera with i.i.d. Gaussian PRNU of standard deviation ``sigma_k``."""
    if sigma_k < 0 or sigma_n < 0:
        raise ValueError("sigma_k and sigma_n must be non-negative")
    rng = np.random.default_rng([int(seed), 0])
    k = rng.normal(0.0, sigma_k, size=(height, width)) if sigma_k > 0 else np.zeros((height, width))
    k.setflags(write=False)
    return SynthCamera(int(width), int(height), float(sigma_k), float(sigma_n), int(seed), k)


@dataclass(frozen=True)
class SceneConfig:
    """Noise-free scene generator.

    ``level`` is the mean intensity, ``low``/``high`` bound the gradient and
    textured scenes, ``smoothness`` is the Gaussian blur (pixels) of the
    texture field.
    """

    kind: str = "flatfield"
    level: float = 128.0
    low: float = 40.0
    high: float = 210.0
    smoothness: float = 4.0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        for name in ("level", "low", "high"):
            if not 0 <= getattr(self, name) <= 255:
                raise ValueError(f"{name} must lie in [0, 255]")
        if self.low > self.high:
            raise ValueError("low must not exceed high")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


DARK = SceneConfig("dark", level=0.0)
NEAR_SATURATED = SceneConfig("near-saturated", level=254.0)


def render_scene(scene: SceneConfig, height: int, width: int, rng) -> np.ndarray:
    if scene.kind in ("flatfield", "dark", "near-saturated"):
        return np.full((height, width), float(scene.level))
    if scene.kind == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:height, 0:width]
        t = np.cos(angle) * xx / max(width - 1, 1) + np.sin(angle) * yy / max(height - 1, 1)
        t = (t - t.min()) / (np.ptp(t) or 1.0)
        return scene.low + (scene.high - scene.low) * t
    field_ = gaussian_filter(rng.standard_normal((height, width)), scene.smoothness, mode="wrap")
    field_ = (field_ - field_.min()) / (np.ptp(field_) or 1.0)
    return scene.low + (scene.high - scene.low) * field_


def shoot(cam: SynthCamera, scene: SceneConfig, shot_seed: int, clip: bool = True) -> np.ndarray:
    """One exposure: ``clip((1 + k) x + n, 0, 255)`` with ``n ~ N(0, sigma_n^2)``.

    ``clip=False`` returns the unclipped sensor output.
    """
    rng = np.random.default_rng([cam.seed, 1, int(shot_seed)])
    x = render_scene(scene, cam.height, cam.width, rng)
    y = (1.0 + cam.k) * x
    if cam.sigma_n > 0:
        y = y + rng.normal(0.0, cam.sigma_n, size=y.shape)
    return np.clip(y, 0.0, 255.0) if clip else y


def clipped_fraction(cam: SynthCamera, scene: SceneConfig, shot_seed: int) -> float:
    raw = shoot(cam, scene, shot_seed, clip=False)
    return float(np.mean((raw < 0) | (raw > 255)))


class ShotSequence:
    """Lazily generated shots ``shoot(cam, scenes[i % len], seeds[i])``."""

    def __init__(self, cam: SynthCamera, scenes, shot_seeds):
        self.cam = cam
        self.scenes = [scenes] if isinstance(scenes, SceneConfig) else list(scenes)
        self.shot_seeds = list(shot_seeds)

    def __len__(self):
        return len(self.shot_seeds)

    def __getitem__(self, i):
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        return shoot(self.cam, self.scenes[i % len(self.scenes)], self.shot_seeds[i])

    def scene_of(self, i) -> SceneConfig:
        return self.scenes[i % len(self.scenes)]
