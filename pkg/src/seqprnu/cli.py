"""Command-line interface: ``seqprnu {simulate,extract,train,scan,test,report}``."""

from __future__ import annotations

import argparse
import fnmatch
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import fingerprint as fpmod
from . import pipeline, sprt, synthcam, training
from .errors import (
    BoundViolationError,
    DataError,
    ImageFormatError,
    InsufficientDataError,
    PrnuError,
)
from .stats import REFERENCE_H0, ObservationConfig

EXIT_OK, EXIT_USAGE, EXIT_INSUFFICIENT, EXIT_BOUND, EXIT_IO = 0, 2, 3, 4, 5

log = logging.getLogger("seqprnu")


def _images(args) -> list[Path]:
    paths = pipeline.list_images(args.images)
    if getattr(args, "pattern", None):
        paths = [p for p in paths if fnmatch.fnmatch(p.name, args.pattern)]
    return paths


def _obs_config(args) -> ObservationConfig:
    return ObservationConfig(variance=args.variance, window=args.window,
                             postprocess=not getattr(args, "no_postprocess", False))


def _plan(args) -> sprt.SprtPlan:
    return sprt.plan_from_preset(args.preset, pd=args.pd, pf=args.pf, p=args.p, beta=args.beta,
                                 T=args.T, N=args.N, seed=args.seed)


def _threshold(args) -> sprt.ThresholdConfig:
    return sprt.ThresholdConfig(detector=args.detector, pf=args.retest_pf)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = [synthcam.SceneConfig(kind) for kind in args.scenes.split(",")]
    truth, cameras = {}, []
    for c in range(args.cameras):
        cam = synthcam.make_camera(args.width, args.height, args.sigma_k, args.sigma_n,
                                   seed=training._seed_for(args.seed, c))
        cameras.append({"id": f"cam{c}", **cam.to_dict()})
        shots = synthcam.ShotSequence(cam, scenes, range(args.shots))
        for i in range(args.shots):
            name = f"cam{c}_{i:04d}.png"
            # 16-bit PNG keeps the sub-integer noise that carries the PRNU.
            level = np.round(shots[i] * 257.0).astype(np.uint16)
            Image.fromarray(level).save(out / name)
            truth[name] = f"cam{c}"
    _write_json(out / "truth.json", {"cameras": cameras, "images": truth,
                                     "scenes": [s.to_dict() for s in scenes]})
    print(f"wrote {len(truth)} images to {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    paths = _images(args)
    files = pipeline.ImageFiles(paths)
    fp = pipeline.extract_fingerprint(files, files.ids, args.L, args.seed, _obs_config(args))
    fpmod.save(fp, args.out)
    print(f"fingerprint {fp.height}x{fp.width} from L={fp.L} images -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    fp = fpmod.load(args.fingerprint)
    files = pipeline.ImageFiles(_images(args))
    config = _obs_config(args)
    result = training.train_h1(files, args.T, args.seed, args.repeats, args.L, args.bins,
                               args.fixed, config=config)
    if args.h0 == "reference":
        h0 = REFERENCE_H0
    else:
        h0_images = None
        if args.h0_images:
            h0_images = pipeline.ImageFiles(pipeline.list_images(args.h0_images))
        else:
            h0_images = pipeline.synthetic_h0_images(fp.shape, seed=args.seed)
        samples = training.collect_h0_samples(h0_images, fp, args.T, args.seed, config=config,
                                              max_subsets=args.h0_subsets)
        h0 = training.fit_h0_ggd(samples)
    meta = {"seed": args.seed, "repeats": args.repeats, "L": args.L, "bins": args.bins,
            "pairs": int(len(result.pairs)), "h0_source": args.h0, "config": config.to_dict()}
    training.save_model(args.out, result.h1, h0, meta)
    print(f"{result.h1.kind} H1 model ({result.h1.num_bins} bins, M_tr={result.h1.M_tr}), "
          f"H0 alpha0={h0.alpha0:.4g} c0={h0.c0:.4g} -> {args.out}")
    return EXIT_OK


def _labels(truth_path, camera) -> dict:
    if not truth_path:
        return {}
    truth = json.loads(Path(truth_path).read_text())["images"]
    return {name: ("H1" if cam == camera else "H0") for name, cam in truth.items()}


def cmd_scan(args) -> int:
    fp = fpmod.load(args.fingerprint)
    h1, h0 = training.load_model(args.model)
    plan = _plan(args)
    paths = _images(args)
    files = pipeline.ImageFiles(paths)
    report = pipeline.scan(files, files.ids, fp, h1, h0, plan, _threshold(args),
                           _obs_config(args), _labels(args.truth, args.camera), args.seed)
    csv_path, json_path = report.write(args.out)
    agg = report.aggregates
    print(f"scanned {agg['scanned']} images, skipped {agg['skipped']} -> {csv_path}, {json_path}")
    return EXIT_OK


def cmd_test(args) -> int:
    fp = fpmod.load(args.fingerprint)
    h1, h0 = training.load_model(args.model)
    y = pipeline.load_grayscale(args.image)
    verdict = pipeline.screen_image(y, fp, h1, h0, _plan(args), _threshold(args), _obs_config(args),
                                    pipeline.image_seed(args.seed, Path(args.image).name))
    d = verdict.decision
    out = {"image": Path(args.image).name, "sprt_outcome": d.outcome, "n_used": d.n_used,
           "pixels_used": d.pixels_used, "llr_final": d.llr_final,
           "retest": verdict.retest.label if verdict.retest is not None else None,
           "final": verdict.final}
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    report = pipeline.ScanReport.from_json(Path(args.report).read_text())
    if args.csv:
        records = pipeline.ScanReport.records_from_csv(Path(args.csv).read_text())
        if records != report.records:
            raise DataError("CSV and JSON reports disagree")
    print(json.dumps(report.aggregates, indent=2, sort_keys=True))
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=None, help="pixels per observation (subset size)")
    p.add_argument("--N", type=int, default=None, help="maximum number of observations")
    p.add_argument("--pd", type=float, default=None, help="target detection probability")
    p.add_argument("--pf", type=float, default=None, help="target false-alarm probability")
    p.add_argument("--p", type=float, default=None, help="contamination probability")
    p.add_argument("--beta", type=float, default=None, help="threshold relaxation factor")
    p.add_argument("--preset", choices=sorted(sprt.PRESETS), default="paper-table3")
    p.add_argument("--variance", choices=("fast", "shift"), default="fast")
    p.add_argument("--detector", choices=("improved", "fixed"), default="improved")
    p.add_argument("--retest-pf", type=float, default=0.01,
                   help="false-positive rate of the fixed full-image detector")
    p.add_argument("--window", type=int, default=3, help="denoiser window size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqprnu", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--cameras", type=int, default=2)
    p.add_argument("--shots", type=int, default=20)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--sigma-k", type=float, default=synthcam.DEFAULT_SIGMA_K)
    p.add_argument("--sigma-n", type=float, default=synthcam.DEFAULT_SIGMA_N)
    p.add_argument("--scenes", default="flatfield,textured-noise,gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("extract", help="estimate a camera fingerprint")
    p.add_argument("images", nargs="+", help="image files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--pattern", help="only use file names matching this glob")
    p.add_argument("--L", type=int, default=50, help="number of training images")
    p.add_argument("--no-postprocess", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="learn the H1 and H0 laws of a camera")
    p.add_argument("images", nargs="+")
    p.add_argument("--fingerprint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pattern")
    p.add_argument("--L", type=int, default=50)
    p.add_argument("--repeats", type=int, default=training.DEFAULT_REPEATS)
    p.add_argument("--bins", type=int, default=training.DEFAULT_BINS)
    p.add_argument("--fixed", action="store_true", help="v-independent H1 law")
    p.add_argument("--h0", choices=("fit", "reference"), default="fit",
                   help="fit the H0 law or use the reference constants alpha0=1.24, c0=1.78")
    p.add_argument("--h0-images", nargs="*", help="images from other cameras")
    p.add_argument("--h0-subsets", type=int, default=256, help="max subsets per H0 image")
    p.add_argument("--no-postprocess", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("scan", help="screen a directory of images")
    p.add_argument("images", nargs="+")
    p.add_argument("--fingerprint", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output prefix for .csv and .json")
    p.add_argument("--pattern")
    p.add_argument("--truth", help="truth.json written by simulate")
    p.add_argument("--camera", help="camera id treated as H1 when --truth is given")
    p.add_argument("--no-postprocess", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("test", help="test a single image")
    p.add_argument("image")
    p.add_argument("--fingerprint", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--no-postprocess", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("report", help="audit a scan report and print its aggregates")
    p.add_argument("report", help="report .json")
    p.add_argument("--csv", help="matching .csv to cross-check")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except BoundViolationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BOUND
    except (OSError, ImageFormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, PrnuError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
