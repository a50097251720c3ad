"""Command-line interface: recognize / train / eval / dataset subcommands.

Exit codes are stable: 0 success, 2 user error (bad input, config, arguments),
3 internal or model error (corrupt checkpoint, diverged training).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError

from . import codec, datasets, detector, evaluation, imaging, reader, synth
from .config import (
    PRESETS,
    Config,
    ConfigError,
    apply_override,
    apply_overrides,
    effective_config_text,
    load_config,
)
from .geometry import Box, Detection
from .network import CheckpointError, build_network, load_checkpoint
from .trainer import Trainer, TrainingDiverged, describe_stages

EXIT_OK = 0
EXIT_USER = 2
EXIT_INTERNAL = 3

SWEEP_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="configuration file (INI sections per module)")
    parser.add_argument(
        "--preset", choices=sorted(PRESETS), help="configuration preset to start from"
    )
    parser.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one configuration value (repeatable; flags still win)",
    )
    parser.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    parser.add_argument("--jobs", type=int, help="worker threads; 1 = deterministic mode")


def _build_config(args: argparse.Namespace) -> Config:
    config = PRESETS[args.preset]() if args.preset else Config()
    if args.config:
        config = load_config(args.config, base=config)
    items = []
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        items.append((key.strip(), value.strip()))
    config = apply_overrides(config, items)
    if args.jobs is not None:
        config = apply_override(config, "cli.jobs", str(args.jobs))
    if args.seed < 0:
        raise ConfigError("--seed must be non-negative")
    return config


def _load_table(spec: str | None) -> dict[int, str] | None:
    if spec is None:
        return None
    if spec == "latin":
        return codec.latin_alphabet()
    return codec.load_alphabet(spec)


def _page_seed(seed: int, stream: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, stream, index]).generate_state(1)[0])


def _load_manifest_pages(manifest: str | Path, channels: int) -> list:
    pages = []
    for path in datasets.load_manifest(manifest):
        annotation = datasets.load_canonical(path)
        image_path = Path(annotation.image)
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        pages.append((annotation, imaging.read_image(image_path, channels=channels)))
    return pages


def _draw_overlay(image: np.ndarray, detections: list[Detection], path: str | Path) -> None:
    if image.ndim == 2:
        canvas = Image.fromarray(image).convert("RGB")
    else:
        canvas = Image.fromarray(image)
    draw = ImageDraw.Draw(canvas)
    for det in detections:
        box = det.box
        draw.rectangle([box.left, box.top, box.right, box.bottom], outline=(220, 30, 30))
        draw.text(
            (box.left, max(0.0, box.top - 10)),
            codec.decode(det.class_id).to_string(),
            fill=(30, 30, 220),
        )
    canvas.save(str(path), format="PNG")


# -- recognize ---------------------------------------------------------------


def cmd_recognize(args: argparse.Namespace) -> int:
    config = _build_config(args)
    torch.set_num_threads(config.jobs)
    net, _, _ = load_checkpoint(args.model)

    image = imaging.read_image(args.image)
    target_w = args.width if args.width is not None else config.width
    target_h = max(16, round(image.shape[0] * target_w / image.shape[1]))
    resized = imaging.resize(image, target_w, target_h)
    score = args.score_threshold
    detections = detector.detect_page(net, resized, score_threshold=score)

    fx = image.shape[1] / target_w
    fy = image.shape[0] / target_h
    rescaled = [
        Detection(
            Box(d.box.left * fx, d.box.top * fy, d.box.right * fx, d.box.bottom * fy),
            d.class_id,
            d.score,
        )
        for d in detections
    ]
    lines = reader.group_lines(rescaled)
    text = reader.render_text(lines, _load_table(args.table))

    if args.overlay:
        _draw_overlay(image, rescaled, args.overlay)
    if args.json:
        payload = {
            "image": str(args.image),
            "detections": [
                {
                    "left": d.box.left,
                    "top": d.box.top,
                    "right": d.box.right,
                    "bottom": d.box.bottom,
                    "dots": codec.decode(d.class_id).to_string(),
                    "score": d.score,
                }
                for d in rescaled
            ],
        }
        Path(args.json).write_text(json.dumps(payload, indent=1), encoding="utf-8")
    if args.output:
        Path(args.output).write_text(text + ("\n" if text else ""), encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


# -- train -------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train_pages = _load_manifest_pages(args.train_manifest, config.model.in_channels)
    test_pages = (
        _load_manifest_pages(args.test_manifest, config.model.in_channels)
        if args.test_manifest
        else []
    )

    effective = effective_config_text(config)
    (out / "config.ini").write_text(effective, encoding="utf-8")
    print(f"run directory: {out}")
    print(describe_stages(config.schedule))

    if args.resume:
        run = Trainer.resume(args.resume, train_pages, test_pages, jobs=config.jobs, out_dir=out)
    else:
        net = build_network(config.model, seed=args.seed)
        run = Trainer(
            net,
            config.schedule,
            config.policy,
            train_pages,
            test_pages,
            seed=args.seed,
            jobs=config.jobs,
            out_dir=out,
        )
    run.run(progress=print)

    if test_pages:
        report = run.evaluate()
        evaluation.write_report_csv(report, out / "eval.csv")
        print(evaluation.format_summary(report))
    return EXIT_OK


# -- eval ----------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    config = _build_config(args)
    torch.set_num_threads(config.jobs)
    net, _, _ = load_checkpoint(args.model)
    pages = _load_manifest_pages(args.manifest, net.config.in_channels)
    if not pages:
        raise ConfigError(f"manifest {args.manifest} lists no pages")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    outputs = []
    elapsed = 0.0
    for annotation, image in pages:
        start = time.perf_counter()
        outputs.append(detector.forward_page(net, image))
        elapsed += time.perf_counter() - start
    seconds_per_image = elapsed / len(pages)

    base_threshold = (
        args.score_threshold if args.score_threshold is not None else net.config.score_threshold
    )

    def report_at(threshold: float) -> evaluation.EvalReport:
        detections = {}
        for (annotation, _), (output, grid) in zip(pages, outputs):
            detections[annotation.image] = detector.decode_output(
                output, grid, threshold, net.config.nms_iou
            )
        return evaluation.evaluate_corpus(
            detections,
            [annotation for annotation, _ in pages],
            seconds_per_image=seconds_per_image,
        )

    main_report = report_at(base_threshold)
    sweep_rows = []
    for threshold in SWEEP_THRESHOLDS if args.sweep else ():
        report = report_at(threshold)
        char_p, char_r, char_f1 = report.char_prf
        dot_p, dot_r, dot_f1 = report.dot_prf
        sweep_rows.append(
            [f"{threshold:.2f}", f"{char_p:.6f}", f"{char_r:.6f}", f"{char_f1:.6f}",
             f"{dot_p:.6f}", f"{dot_r:.6f}", f"{dot_f1:.6f}"]
        )

    evaluation.write_report_csv(main_report, out / "eval.csv")
    if args.sweep:
        import csv as _csv

        with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            writer.writerow(
                ["score_threshold", "char_precision", "char_recall", "char_f1",
                 "dot_precision", "dot_recall", "dot_f1"]
            )
            writer.writerows(sweep_rows)
        for row in sweep_rows:
            print("threshold " + " ".join(row))
    print(evaluation.format_summary(main_report))
    return EXIT_OK


# -- dataset -----------------------------------------------------------------


def cmd_dataset_synth(args: argparse.Namespace) -> int:
    config = _build_config(args)
    render = config.render
    if args.rotation is not None:
        render = replace(render, max_rotation_deg=args.rotation)
    if args.noise is not None:
        render = replace(render, noise_sigma=args.noise)
    if args.perspective is not None:
        render = replace(render, perspective=args.perspective)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.text:
        all_rows = synth.rows_from_unicode(Path(args.text).read_text(encoding="utf-8"))
        chunks = [all_rows[i : i + args.rows] for i in range(0, len(all_rows), args.rows)]
        if args.pages:
            chunks = chunks[: args.pages]
    else:
        chunks = [
            synth.random_rows(args.rows, args.cols, seed=_page_seed(args.seed, 4, i))
            for i in range(args.pages)
        ]

    annotation_paths = []
    size = None
    for i, rows in enumerate(chunks):
        name = f"page{i:04d}"
        image, annotation = synth.render_synthetic_page(
            rows,
            geometry=config.page,
            options=render,
            seed=_page_seed(args.seed, 3, i),
            image_id=f"{name}.png",
        )
        size = (annotation.width, annotation.height)
        imaging.write_image(out / f"{name}.png", image)
        datasets.save_canonical(annotation, out / f"{name}.json")
        annotation_paths.append(out / f"{name}.json")

    for k in range(args.negatives):
        name = f"negative{k:04d}"
        width, height = size or (520, 540)
        image, annotation = synth.render_negative_page(
            width, height, options=render, seed=_page_seed(args.seed, 5, k), image_id=f"{name}.png"
        )
        imaging.write_image(out / f"{name}.png", image)
        datasets.save_canonical(annotation, out / f"{name}.json")
        annotation_paths.append(out / f"{name}.json")

    datasets.write_manifest(annotation_paths, out / "manifest.txt")
    print(f"wrote {len(annotation_paths)} pages to {out}")
    return EXIT_OK


def cmd_dataset_convert(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for grid_path in args.grids:
        grid = datasets.load_grid(grid_path)
        annotation = datasets.grid_to_boxes(grid, args.char_width, args.char_height)
        target = out / (Path(grid_path).stem + ".json")
        datasets.save_canonical(annotation, target)
        print(f"{grid_path} -> {target} ({len(annotation.chars)} characters)")
    return EXIT_OK


def cmd_dataset_validate(args: argparse.Namespace) -> int:
    failures = 0
    for path in args.files:
        try:
            annotation = datasets.load_canonical(path, check=False)
        except datasets.AnnotationError as exc:
            print(f"{path}: SYNTAX: {exc}")
            failures += 1
            continue
        problems = datasets.validate(annotation)
        if problems:
            failures += 1
            for problem in problems:
                print(f"{path}: {problem}")
        else:
            print(f"{path}: OK")
    return EXIT_USER if failures else EXIT_OK


def cmd_dataset_split(args: argparse.Namespace) -> int:
    paths = datasets.load_manifest(args.manifest)
    books: dict[str, list[Path]] = {}
    for path in paths:
        books.setdefault(path.parent.name, []).append(path)
    split = datasets.split_by_fraction(books, args.fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets.write_manifest(split.train, out / "train.txt")
    datasets.write_manifest(split.test, out / "test.txt")
    print(f"{len(split.train)} train / {len(split.test)} test pages "
          f"across {len(books)} books")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brailleocr",
        description="Optical Braille recognition: detect whole characters and read them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("recognize", help="read Braille text from a page photo")
    p.add_argument("image", help="input image (PNG and other common formats)")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--width", type=int, help="inference width (default from config: 864)")
    p.add_argument("--score-threshold", type=float, help="detection score threshold")
    p.add_argument("--table", help="'latin' or path to an alphabet table file")
    p.add_argument("--overlay", help="write a PNG with detection boxes drawn")
    p.add_argument("--json", help="write detections as JSON")
    p.add_argument("--output", help="write text here instead of stdout")
    _add_config_flags(p)
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="continue from a training checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on an annotated corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=".", help="directory for eval.csv (and sweep.csv)")
    p.add_argument("--score-threshold", type=float)
    p.add_argument("--sweep", action="store_true", help="report thresholds 0.1..0.9")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dataset", help="synthesize, convert, validate, split datasets")
    dsub = p.add_subparsers(dest="dataset_command", required=True)

    d = dsub.add_parser("synth", help="render synthetic annotated pages")
    d.add_argument("--out", required=True)
    d.add_argument("--pages", type=int, default=10)
    d.add_argument("--rows", type=int, default=12)
    d.add_argument("--cols", type=int, default=18)
    d.add_argument("--negatives", type=int, default=0)
    d.add_argument("--text", help="Braille-pattern text file to typeset instead of random text")
    d.add_argument("--rotation", type=float, help="max page rotation in degrees")
    d.add_argument("--noise", type=float, help="additive noise sigma")
    d.add_argument("--perspective", type=float, help="perspective jitter fraction")
    _add_config_flags(d)
    d.set_defaults(func=cmd_dataset_synth)

    d = dsub.add_parser("convert", help="convert grid annotations to canonical boxes")
    d.add_argument("grids", nargs="+")
    d.add_argument("--out", required=True)
    d.add_argument("--char-width", type=float, default=20.0)
    d.add_argument("--char-height", type=float, default=32.0)
    d.set_defaults(func=cmd_dataset_convert)

    d = dsub.add_parser("validate", help="check canonical annotation files")
    d.add_argument("files", nargs="+")
    d.set_defaults(func=cmd_dataset_validate)

    d = dsub.add_parser("split", help="per-book train/test split of a manifest")
    d.add_argument("--manifest", required=True)
    d.add_argument("--fraction", type=float, default=0.74)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dataset_split)

    return parser


def main(argv: list[str] | None = None) -> int:
    if hasattr(sys.stdout, "reconfigure"):
        sys.stdout.reconfigure(encoding="utf-8", errors="replace")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, datasets.AnnotationError, UnidentifiedImageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (CheckpointError, TrainingDiverged) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
