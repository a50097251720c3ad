"""Annotation formats, importers and dataset splitting.

The canonical on-disk annotation is one UTF-8 JSON object per page::

    {"image": "...", "width": W, "height": H, "negative": false,
     "chars": [{"left": .., "top": .., "right": .., "bottom": .., "dots": "124"}, ...]}

``dots`` is the ascending digit string of the character's raised dots.  A
dataset manifest is a plain text file listing annotation paths (one per
line, ``#`` comments allowed), resolved relative to the manifest.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, TypeVar

import numpy as np

from . import codec
from .geometry import Box, iou_matrix

log = logging.getLogger(__name__)

MAX_TRUTH_IOU = 0.02


class AnnotationError(ValueError):
    """Base error for malformed or invalid annotations."""


class AnnotationSyntaxError(AnnotationError):
    """File is not syntactically a canonical annotation."""


class ClassRangeError(AnnotationError):
    """A character's class label is outside [1, 63]."""


class BoxBoundsError(AnnotationError):
    """A character box extends past the image bounds."""


class BoxOverlapError(AnnotationError):
    """Two ground-truth boxes overlap more than allowed."""


@dataclass
class PageAnnotation:
    image: str
    width: int
    height: int
    chars: list[tuple[Box, int]] = field(default_factory=list)
    negative: bool = False

    def boxes(self) -> list[Box]:
        return [box for box, _ in self.chars]

    def class_ids(self) -> list[int]:
        return [cid for _, cid in self.chars]


def validate(annotation: PageAnnotation) -> list[str]:
    """All invariant violations of a page annotation; empty means valid."""
    problems: list[str] = []
    if annotation.width < 1 or annotation.height < 1:
        problems.append(f"invalid image size {annotation.width}x{annotation.height}")
    if annotation.negative and annotation.chars:
        problems.append("negative page lists characters")
    for i, (box, class_id) in enumerate(annotation.chars):
        if not 1 <= class_id <= codec.CLASS_COUNT:
            problems.append(f"chars[{i}]: class {class_id} out of range [1, 63]")
        if box.left < 0 or box.top < 0 or box.right > annotation.width or box.bottom > annotation.height:
            problems.append(
                f"chars[{i}]: box {box.as_tuple()} outside image "
                f"{annotation.width}x{annotation.height}"
            )
    if len(annotation.chars) > 1:
        arr = np.array([box.as_tuple() for box, _ in annotation.chars])
        overlaps = iou_matrix(arr, arr)
        np.fill_diagonal(overlaps, 0.0)
        for i, j in zip(*np.nonzero(overlaps > MAX_TRUTH_IOU)):
            if i < j:
                problems.append(
                    f"chars[{i}] and chars[{j}] overlap with IOU {overlaps[i, j]:.3f} > {MAX_TRUTH_IOU}"
                )
    return problems


def _validate_or_raise(annotation: PageAnnotation, path: str | Path) -> None:
    for problem in validate(annotation):
        if "class" in problem and "out of range" in problem:
            raise ClassRangeError(f"{path}: {problem}")
        if "outside image" in problem:
            raise BoxBoundsError(f"{path}: {problem}")
        if "overlap" in problem:
            raise BoxOverlapError(f"{path}: {problem}")
        raise AnnotationError(f"{path}: {problem}")


def save_canonical(annotation: PageAnnotation, path: str | Path) -> None:
    chars = [
        {
            "left": box.left,
            "top": box.top,
            "right": box.right,
            "bottom": box.bottom,
            "dots": codec.decode(class_id).to_string(),
        }
        for box, class_id in annotation.chars
    ]
    payload = {
        "image": annotation.image,
        "width": annotation.width,
        "height": annotation.height,
        "negative": annotation.negative,
        "chars": chars,
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_canonical(path: str | Path, check: bool = True) -> PageAnnotation:
    """Load a canonical annotation file; with ``check`` every invariant is
    validated and the first violation raises its specific error."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationSyntaxError(f"{path}:{exc.lineno}: {exc.msg}") from None

    if not isinstance(payload, dict):
        raise AnnotationSyntaxError(f"{path}: top level must be an object")
    required = {"image", "width", "height", "negative", "chars"}
    missing = required - payload.keys()
    if missing:
        raise AnnotationSyntaxError(f"{path}: missing keys {sorted(missing)}")

    chars: list[tuple[Box, int]] = []
    raw_chars = payload["chars"]
    if not isinstance(raw_chars, list):
        raise AnnotationSyntaxError(f"{path}: 'chars' must be an array")
    for i, entry in enumerate(raw_chars):
        if not isinstance(entry, dict):
            raise AnnotationSyntaxError(f"{path}: chars[{i}] must be an object")
        try:
            box = Box(
                float(entry["left"]), float(entry["top"]),
                float(entry["right"]), float(entry["bottom"]),
            )
            pattern = codec.DotPattern.from_string(str(entry["dots"]))
            class_id = codec.encode(pattern)
        except KeyError as exc:
            raise AnnotationSyntaxError(f"{path}: chars[{i}] missing field {exc}") from None
        except ValueError as exc:
            raise AnnotationSyntaxError(f"{path}: chars[{i}]: {exc}") from None
        chars.append((box, class_id))

    try:
        annotation = PageAnnotation(
            image=str(payload["image"]),
            width=int(payload["width"]),
            height=int(payload["height"]),
            chars=chars,
            negative=bool(payload["negative"]),
        )
    except (TypeError, ValueError) as exc:
        raise AnnotationSyntaxError(f"{path}: {exc}") from None
    if check:
        _validate_or_raise(annotation, path)
    return annotation


@dataclass
class GridAnnotation:
    """Grid-anchored corpus annotation: rotation + grid lines + cell contents.

    Character column c owns vertical lines xs[2c] and xs[2c+1] (its two dot
    columns); text row r owns horizontal lines ys[3r..3r+2] (its three dot
    rows).  ``cells`` entries are (col, row, DotPattern) in the de-skewed
    frame; converting back to image coordinates rotates by -rotation_deg
    about the image centre.
    """

    image: str
    width: int
    height: int
    rotation_deg: float
    xs: list[float]
    ys: list[float]
    cells: list[tuple[int, int, codec.DotPattern]]

    def __post_init__(self) -> None:
        for name, lines in (("xs", self.xs), ("ys", self.ys)):
            if any(b <= a for a, b in zip(lines, lines[1:])):
                raise ValueError(f"grid lines {name} must be strictly increasing")


def grid_to_boxes(
    grid: GridAnnotation,
    char_width: float = 20.0,
    char_height: float = 32.0,
) -> PageAnnotation:
    """Place char-sized boxes on grid cell centres and undo the de-skew rotation."""
    theta = math.radians(-grid.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx0, cy0 = grid.width / 2.0, grid.height / 2.0
    chars: list[tuple[Box, int]] = []
    for col, row, pattern in grid.cells:
        if not 0 <= 2 * col + 1 < len(grid.xs):
            raise ValueError(f"column index {col} outside grid ({len(grid.xs)} x-lines)")
        if not 0 <= 3 * row + 2 < len(grid.ys):
            raise ValueError(f"row index {row} outside grid ({len(grid.ys)} y-lines)")
        centre_x = (grid.xs[2 * col] + grid.xs[2 * col + 1]) / 2.0
        centre_y = (grid.ys[3 * row] + grid.ys[3 * row + 2]) / 2.0
        corners = np.array(
            [
                [centre_x - char_width / 2.0, centre_y - char_height / 2.0],
                [centre_x + char_width / 2.0, centre_y - char_height / 2.0],
                [centre_x + char_width / 2.0, centre_y + char_height / 2.0],
                [centre_x - char_width / 2.0, centre_y + char_height / 2.0],
            ]
        )
        centred = corners - (cx0, cy0)
        rotated = centred @ np.array([[cos_t, sin_t], [-sin_t, cos_t]]) + (cx0, cy0)
        lo = rotated.min(axis=0)
        hi = rotated.max(axis=0)
        chars.append((Box(lo[0], lo[1], hi[0], hi[1]), codec.encode(pattern)))
    return PageAnnotation(grid.image, grid.width, grid.height, chars, negative=not chars)


def load_grid(path: str | Path) -> GridAnnotation:
    """Adapter for grid annotations stored as JSON (see README for the schema)."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationSyntaxError(f"{path}:{exc.lineno}: {exc.msg}") from None
    try:
        cells = [
            (int(col), int(row), codec.DotPattern.from_string(str(dots)))
            for col, row, dots in payload["cells"]
        ]
        return GridAnnotation(
            image=str(payload["image"]),
            width=int(payload["width"]),
            height=int(payload["height"]),
            rotation_deg=float(payload["rotation"]),
            xs=[float(x) for x in payload["xs"]],
            ys=[float(y) for y in payload["ys"]],
            cells=cells,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationSyntaxError(f"{path}: {exc}") from None


def save_grid(grid: GridAnnotation, path: str | Path) -> None:
    payload = {
        "image": grid.image,
        "width": grid.width,
        "height": grid.height,
        "rotation": grid.rotation_deg,
        "xs": grid.xs,
        "ys": grid.ys,
        "cells": [[col, row, pattern.to_string()] for col, row, pattern in grid.cells],
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


T = TypeVar("T")


@dataclass
class DatasetSplit:
    train: list
    test: list


def split_by_fraction(books: Mapping[str, Sequence[T]], train_fraction: float) -> DatasetSplit:
    """Per book: the first ceil(fraction * n) pages to train, the rest to test."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must be in (0, 1): {train_fraction}")
    train: list[T] = []
    test: list[T] = []
    for book, pages in books.items():
        if not pages:
            log.warning("book %r has no pages; skipped", book)
            continue
        cut = math.ceil(train_fraction * len(pages))
        train.extend(pages[:cut])
        test.extend(pages[cut:])
    return DatasetSplit(train=train, test=test)


def load_manifest(path: str | Path) -> list[Path]:
    """Annotation paths listed in a manifest, resolved relative to it."""
    manifest = Path(path)
    base = manifest.parent
    paths: list[Path] = []
    for raw in manifest.read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        entry = Path(line)
        paths.append(entry if entry.is_absolute() else base / entry)
    return paths


def write_manifest(paths: Sequence[str | Path], target: str | Path) -> None:
    target = Path(target)
    lines = []
    for p in paths:
        p = Path(p)
        try:
            lines.append(str(p.relative_to(target.parent)))
        except ValueError:
            lines.append(str(p))
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
