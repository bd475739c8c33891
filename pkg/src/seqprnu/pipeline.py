"""Batch orchestration: fingerprint extraction, model training and scanning.

Scanning follows the screening flow: every image first goes through the
sequential test; images it accepts as H1, or leaves undecided after ``N``
observations, are retested with the whole-image detector.  H0 decisions of
the sequential test are final.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import fingerprint as fpmod
from . import sprt, synthcam, training
from .errors import DataError, ImageFormatError, InsufficientDataError
from .pixelplane import denoise, load_grayscale, saturation_mask
from .stats import H0Model, ObservationConfig, prepare

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".pgm")
CSV_FIELDS = ("image_id", "true_label", "sprt_outcome", "n_used", "pixels_used",
              "retest", "final", "llr_final")


def list_images(paths) -> list[Path]:
    """Expand files and directories into a sorted list of raster files."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        else:
            out.append(p)
    return sorted(out, key=lambda q: (q.name, str(q)))


class ImageFiles:
    """Sequence of planes decoded on access from a list of paths."""

    def __init__(self, paths):
        self.paths = [Path(p) for p in paths]

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        return load_grayscale(self.paths[i])

    @property
    def ids(self) -> list[str]:
        return [p.name for p in self.paths]


def image_seed(seed: int, image_id: str) -> int:
    """Per-image seed from the global seed and the image id."""
    digest = hashlib.blake2b(image_id.encode(), digest_size=8).digest()
    return int(np.random.SeedSequence([int(seed), int.from_bytes(digest, "little")])
               .generate_state(1)[0])


def select_training(n: int, L: int, seed: int) -> list[int]:
    if n <= L:
        return list(range(n))
    rng = np.random.default_rng([int(seed), 11])
    return sorted(rng.choice(n, size=L, replace=False).tolist())


def extract_fingerprint(images: Sequence, ids: Sequence[str], L: int = 50, seed: int = 0,
                        config: ObservationConfig = ObservationConfig(),
                        denoiser=None) -> fpmod.Fingerprint:
    """Estimate (and optionally postprocess) a fingerprint from up to ``L`` images.

    Images are accumulated in image-id order so the result does not depend
    on the order in which they were supplied.
    """
    if len(images) < 2:
        raise InsufficientDataError(f"need at least 2 training images, got {len(images)}")
    chosen = select_training(len(images), L, seed)
    chosen.sort(key=lambda i: ids[i])
    acc = None
    for i in chosen:
        y = images[i]
        xhat = denoiser(y) if denoiser is not None else denoise(y, config.window)
        if acc is None:
            acc = fpmod.PrnuAccumulator(y.shape)
        acc.add(y, xhat, saturation_mask(y, config.saturation))
    fp = fpmod.Fingerprint(acc.estimate(), L=len(chosen))
    if config.postprocess:
        fp = fpmod.postprocess(fp)
    meta = {"sources": [ids[i] for i in chosen], "L": len(chosen), "seed": seed,
            "config": config.to_dict()}
    return fpmod.Fingerprint(fp.k, fp.L, fp.postprocessed, meta)


def synthetic_h0_images(shape, count: int = 10, seed: int = 0) -> synthcam.ShotSequence:
    """Shots of an unrelated synthetic camera, used when no H0 images are supplied."""
    h, w = shape
    cam = synthcam.make_camera(w, h, seed=int(np.random.SeedSequence([seed, 99]).generate_state(1)[0]))
    scenes = [synthcam.SceneConfig("textured-noise"), synthcam.SceneConfig("gradient"),
              synthcam.SceneConfig("flatfield")]
    return synthcam.ShotSequence(cam, scenes, range(count))


def train_models(images: Sequence, fp: fpmod.Fingerprint, T: int = 1024, seed: int = 0,
                 repeats: int = training.DEFAULT_REPEATS, L: int | None = 50,
                 num_bins: int = training.DEFAULT_BINS, h0_images: Sequence | None = None,
                 h0_fixed: H0Model | None = None, h0_max_subsets: int | None = 256,
                 config: ObservationConfig = ObservationConfig(), denoiser=None):
    """Train both H1 laws (binned and fixed) from one pool of pairs, plus H0.

    Returns ``(binned_h1, fixed_h1, h0, pairs)``.
    """
    result = training.train_h1(images, T, seed, repeats, L, num_bins, False, denoiser, config)
    fixed = training.fit_h1_fixed(result.pairs, T)
    if h0_fixed is not None:
        h0 = h0_fixed
    else:
        if h0_images is None:
            h0_images = synthetic_h0_images(fp.shape, seed=seed)
        samples = training.collect_h0_samples(h0_images, fp, T, seed, denoiser, config,
                                              max_subsets=h0_max_subsets)
        h0 = training.fit_h0_ggd(samples)
    return result.h1, fixed, h0, result.pairs


@dataclass
class ScanRecord:
    image_id: str
    true_label: str
    sprt_outcome: str
    n_used: int
    pixels_used: int
    retest: str
    final: str
    llr_final: float

    def to_row(self) -> dict:
        d = asdict(self)
        d["llr_final"] = repr(float(self.llr_final))
        return d

    @classmethod
    def from_row(cls, row: Mapping) -> "ScanRecord":
        return cls(row["image_id"], row["true_label"], row["sprt_outcome"], int(row["n_used"]),
                   int(row["pixels_used"]), row["retest"], row["final"], float(row["llr_final"]))


def _rate(values) -> float | None:
    values = list(values)
    return sum(values) / len(values) if values else None


def _mean(values) -> float | None:
    values = list(values)
    return math.fsum(values) / len(values) if values else None


def compute_aggregates(records: Sequence[ScanRecord], T: int, M: float, skipped: int = 0) -> dict:
    """Detection rates, mean observation counts and the cost ratio of a scan."""
    h1 = [r for r in records if r.true_label == "H1"]
    h0 = [r for r in records if r.true_label == "H0"]
    labelled = h1 + h0
    routed = [r.sprt_outcome != sprt.ACCEPT_H0 for r in records]
    agg = {
        "scanned": len(records),
        "skipped": skipped,
        "P_D": _rate(r.final == "positive" for r in h1),
        "P_F": _rate(r.final == "positive" for r in h0),
        "sprt_P_D": _rate(r.sprt_outcome != sprt.ACCEPT_H0 for r in h1),
        "sprt_P_F": _rate(r.sprt_outcome != sprt.ACCEPT_H0 for r in h0),
        "n_bar_H1": _mean(r.n_used for r in h1),
        "n_bar_H0": _mean(r.n_used for r in h0),
        "p_H1": len(h1) / len(labelled) if labelled else None,
        "undecided": sum(r.sprt_outcome == sprt.UNDECIDED for r in records),
    }
    if labelled:
        p1 = agg["p_H1"]
        agg["n_bar"] = (agg["n_bar_H0"] or 0.0) * (1 - p1) + (agg["n_bar_H1"] or 0.0) * p1
        agg["cost_ratio"] = sprt.cost_ratio(agg["sprt_P_D"] or 0.0, agg["sprt_P_F"] or 0.0,
                                            p1, agg["n_bar"], T, M) if M else None
    else:
        agg["n_bar"] = _mean(r.n_used for r in records)
        retest = _rate(routed)
        agg["cost_ratio"] = (retest + agg["n_bar"] * T / M) if (records and M) else None
    return agg


@dataclass
class ScanReport:
    records: list[ScanRecord]
    T: int
    M: float
    skipped: int = 0
    params: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        return compute_aggregates(self.records, self.T, self.M, self.skipped)

    def to_json(self) -> str:
        d = {"records": [asdict(r) for r in self.records], "T": self.T, "M": self.M,
             "skipped": self.skipped, "params": self.params, "aggregates": self.aggregates}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ScanReport":
        """Load a report and check its aggregates against the records."""
        d = json.loads(text)
        report = cls([ScanRecord(**r) for r in d["records"]], int(d["T"]), d["M"],
                     int(d["skipped"]), d.get("params", {}))
        stored = d.get("aggregates")
        if stored is not None and stored != report.aggregates:
            raise DataError("report aggregates do not match its records")
        return report

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow(r.to_row())
        return buf.getvalue()

    @staticmethod
    def records_from_csv(text: str) -> list[ScanRecord]:
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise DataError(f"unexpected CSV header {reader.fieldnames}")
        return [ScanRecord.from_row(row) for row in reader]

    def write(self, prefix) -> tuple[Path, Path]:
        prefix = Path(prefix)
        csv_path = prefix.with_name(prefix.name + ".csv")
        json_path = prefix.with_name(prefix.name + ".json")
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path


@dataclass
class ImageVerdict:
    decision: sprt.SprtDecision
    retest: sprt.FullImageResult | None

    @property
    def final(self) -> str:
        return self.retest.label if self.retest is not None else "negative"


def screen_image(y, fp, h1, h0, plan: sprt.SprtPlan, threshold: sprt.ThresholdConfig,
               config: ObservationConfig = ObservationConfig(), seed=None,
               denoiser=None) -> ImageVerdict:
    """Sequential test of one image followed by the whole-image retest when routed."""
    img = prepare(y, fp.k, config, denoiser)
    h1_t = h1 if h1.M_tr == plan.T else h1.rescale(plan.T)
    decision = sprt.run_prepared(img, h1_t, h0, plan, config, seed)
    retest = None
    if decision.outcome != sprt.ACCEPT_H0:
        retest = sprt.full_image_prepared(img, h1_t, h0, threshold, config,
                                          seed if seed is not None else plan.seed)
    return ImageVerdict(decision, retest)


def scan(images: Sequence, ids: Sequence[str], fp, h1, h0, plan: sprt.SprtPlan,
         threshold: sprt.ThresholdConfig = sprt.ThresholdConfig(),
         config: ObservationConfig = ObservationConfig(), labels: Mapping[str, str] | None = None,
         seed: int = 0, denoiser=None,
         progress: Callable[[int, int], None] | None = None) -> ScanReport:
    """Screen every image; unreadable or unusable images are logged and skipped."""
    records, skipped, pixels = [], 0, []
    labels = labels or {}
    for i, image_id in enumerate(ids):
        try:
            y = images[i]
            verdict = screen_image(y, fp, h1, h0, plan, threshold, config,
                                 image_seed(seed, image_id), denoiser)
        except (OSError, ImageFormatError, InsufficientDataError, DataError) as exc:
            log.warning("skipping %s: %s", image_id, exc)
            skipped += 1
            continue
        d = verdict.decision
        pixels.append(int(np.size(y)))
        records.append(ScanRecord(
            image_id=image_id, true_label=labels.get(image_id, ""), sprt_outcome=d.outcome,
            n_used=d.n_used, pixels_used=d.pixels_used,
            retest=verdict.retest.label if verdict.retest is not None else "",
            final=verdict.final, llr_final=d.llr_final))
        if progress is not None:
            progress(i + 1, len(ids))
    M = float(np.mean(pixels)) if pixels else 0.0
    params = {"plan": plan.to_dict(), "threshold": asdict(threshold),
              "config": config.to_dict(), "h0": h0.to_dict(), "seed": seed}
    return ScanReport(records, plan.T, M, skipped, params)
