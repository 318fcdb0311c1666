"""Command-line driver: ``trafficdet <command> --config CONFIG ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .boosting import TrainingError
from .calibrate import CalibrationError
from .channels import InvalidInputError
from .config import ConfigError, load_config
from .dataset import DataError, load_csv_annotations, read_image
from .detect import DetectorBank, detect_all, read_detections
from .features import COMBINATIONS, compute_channels
from .subcat import ClusteringError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")

log = logging.getLogger("trafficdet")


def _classes(cfg, name):
    if name is None:
        return sorted(cfg.classes)
    if name not in cfg.classes:
        raise ConfigError(f"class {name!r} not in config (have {sorted(cfg.classes)})")
    return [name]


def image_list(items) -> list[str]:
    """Expand directories and ``.txt`` list files into a flat list of image paths."""
    out = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            out += sorted(str(f) for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        elif p.suffix == ".txt":
            base = p.parent
            for line in p.read_text().splitlines():
                line = line.strip()
                if line and not line.startswith("#"):
                    out.append(str(Path(line) if Path(line).is_absolute() else base / line))
        else:
            out.append(str(p))
    missing = [x for x in out if not Path(x).exists()]
    if missing:
        raise DataError(f"missing images: {missing[:5]}")
    return out


def run_cluster(args):
    cfg = load_config(args.config)
    classes = _classes(cfg, args.cls)
    samples = pipeline.load_annotations(cfg)
    for cls in classes:
        rep = pipeline.cmd_cluster(cfg, cls, samples)
        print(f"{cls}: K={rep['K']} sizes={[c['size'] for c in rep['clusters']]}")


def run_train(args):
    cfg = load_config(args.config)
    classes = _classes(cfg, args.cls)
    samples = pipeline.load_annotations(cfg)
    for cls in classes:
        rep = pipeline.cmd_train(cfg, cls, samples, threads=args.threads)
        print(f"{cls}: trained {len(rep)} subcategory models")


def run_detect(args):
    cfg = load_config(args.config)
    if args.models:
        cfg.paths.work_dir = str(Path(args.models).resolve())
    bank = pipeline.load_bank(cfg)
    images = image_list(args.images)
    rows = pipeline.cmd_detect(cfg, images, args.out, bank, threads=args.threads)
    print(f"{len(rows)} detections on {len(images)} images -> {args.out}")


def run_eval(args):
    cfg = load_config(args.config)
    dets = read_detections(args.detections)
    if args.annotations:
        samples = load_csv_annotations(args.annotations)
    else:
        samples = pipeline.load_annotations(cfg)
    report = pipeline.cmd_eval(cfg, dets, samples, args.out)
    for cls, r in report.items():
        print(f"{cls}: AP={r['AP']:.4f} AUC={r['AUC']:.4f} max_recall={r['max_recall']:.4f} n_gt={r['n_gt']}")


def bench(images, bank: DetectorBank | None = None, repeats: int = 1) -> list[dict]:
    """Per feature combination: seconds per image for channel extraction (and detection with ``bank``)."""
    loaded = [read_image(p) for p in images]
    rows = []
    for name, fams in COMBINATIONS.items():
        t0 = time.perf_counter()
        for _ in range(repeats):
            for img in loaded:
                compute_channels(img, fams)
        feat = (time.perf_counter() - t0) / (repeats * max(len(loaded), 1))
        rows.append({"features": name, "feature_seconds": feat})
    if bank is not None and bank.models:
        t0 = time.perf_counter()
        for img in loaded:
            detect_all(img, bank)
        rows.append({"features": "+".join(bank.families()) + " (trained bank, full detection)",
                     "feature_seconds": None,
                     "detect_seconds": (time.perf_counter() - t0) / max(len(loaded), 1)})
    return rows


def run_bench(args):
    cfg = load_config(args.config)
    images = image_list(args.images)
    bank = pipeline.load_bank(cfg) if not args.features_only else None
    rows = bench(images, bank, args.repeats)
    lines = [f"{'features':<48} {'s/image':>10}"]
    for r in rows:
        v = r["feature_seconds"] if r["feature_seconds"] is not None else r["detect_seconds"]
        lines.append(f"{r['features']:<48} {v:>10.4f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
        Path(args.out).with_suffix(".json").write_text(
            json.dumps({"images": len(images), "repeats": args.repeats, "rows": rows}, indent=1) + "\n")


def write_pgm(path, a: np.ndarray) -> None:
    lo, hi = float(a.min()), float(a.max())
    img = np.zeros(a.shape, np.uint8) if hi <= lo else np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def write_pfm(path, a: np.ndarray) -> None:
    """Greyscale PFM, little-endian, rows bottom to top."""
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{a.shape[1]} {a.shape[0]}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(a[::-1], dtype="<f4").tobytes())


def run_channels_dump(args):
    img = read_image(args.image)
    stack = compute_channels(img, COMBINATIONS[args.features])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in stack.names:
        a = stack.channel(name)
        write_pfm(out / f"{name}.pfm", a)
        write_pgm(out / f"{name}.pgm", a)
    print(f"{len(stack.names)} channels of {stack.height}x{stack.width} -> {out}")


def run_synth(args):
    from .synthetic import demo_config, render_dataset

    out = Path(args.out)
    render_dataset(out / "train", args.train, seed=args.seed)
    render_dataset(out / "test", args.test, seed=args.seed + 1)
    cfg = demo_config(work_dir="../work")
    (out / "train" / "config.json").write_text(json.dumps(cfg, indent=1) + "\n")
    cfg_test = demo_config(work_dir="../work")
    (out / "test" / "config.json").write_text(json.dumps(cfg_test, indent=1) + "\n")
    print(f"wrote {args.train} training and {args.test} test scenes under {out}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trafficdet", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help, config=True):
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("--config", required=True, help="JSON pipeline config")
        p.add_argument("--threads", type=int, default=1, help="cap on worker threads")
        p.set_defaults(fn=fn)
        return p

    p = cmd("cluster", run_cluster, "subcategorize training samples and write window layouts")
    p.add_argument("--class", dest="cls", help="one class (default: all)")
    p = cmd("train", run_train, "train and calibrate one detector per subcategory")
    p.add_argument("--class", dest="cls", help="one class (default: all)")
    p = cmd("detect", run_detect, "run every trained detector and write fused detections")
    p.add_argument("images", nargs="*", help="images, directories or .txt lists")
    p.add_argument("--models", help="work dir holding models/ (default from config)")
    p.add_argument("--out", required=True, help="detection text file")
    p = cmd("eval", run_eval, "score a detection file against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", help="CSV ground truth (default from config)")
    p.add_argument("--out", required=True, help="report directory")
    p = cmd("bench", run_bench, "time channel extraction per feature combination")
    p.add_argument("images", nargs="+")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--features-only", action="store_true", help="skip the trained-bank detection row")
    p.add_argument("--out", help="table file; a .json twin is written next to it")
    p = cmd("channels-dump", run_channels_dump, "write every channel of one image as PFM and PGM", config=False)
    p.add_argument("image")
    p.add_argument("--features", choices=sorted(COMBINATIONS), default="ACF")
    p.add_argument("--out", required=True)
    p = cmd("synth", run_synth, "render a synthetic three-shape dataset with a demo config", config=False)
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=400)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InvalidInputError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CalibrationError, TrainingError, ClusteringError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
