"""Axis-aligned boxes, the single-level anchor grid, box deltas and NMS.

Boxes use (left, top, right, bottom) pixel coordinates, x growing right and
y growing down.  The detector places exactly one anchor per 16x16 feature
cell, centred on the cell, so a WxH input yields ceil(W/16) x ceil(H/16)
anchors in row-major (y outer, x inner) order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

CELL_SIZE = 16

DEFAULT_ANCHOR_W = 20.0
DEFAULT_ANCHOR_H = 32.0

DEFAULT_NMS_IOU = 0.02


@dataclass(frozen=True)
class Box:
    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self) -> None:
        if not (self.left < self.right and self.top < self.bottom):
            raise ValueError(
                f"degenerate box: ({self.left}, {self.top}, {self.right}, {self.bottom})"
            )

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def area(self) -> float:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return (self.left + self.right) / 2.0, (self.top + self.bottom) / 2.0

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.left + dx, self.top + dy, self.right + dx, self.bottom + dy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.right, self.bottom)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if not 1 <= self.class_id <= 63:
            raise ValueError(f"detection class out of range: {self.class_id}")


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*row) for row in np.asarray(arr, dtype=np.float64)]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU of (N, 4) vs (M, 4) box arrays, shape (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / union, 0.0)


@dataclass(frozen=True)
class AnchorGrid:
    """One anchor per 16x16 cell, centred at (16*ix + 8, 16*iy + 8)."""

    image_width: int
    image_height: int
    anchor_width: float = DEFAULT_ANCHOR_W
    anchor_height: float = DEFAULT_ANCHOR_H
    cell: int = CELL_SIZE

    def __post_init__(self) -> None:
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def grid_width(self) -> int:
        return math.ceil(self.image_width / self.cell)

    @property
    def grid_height(self) -> int:
        return math.ceil(self.image_height / self.cell)

    @property
    def count(self) -> int:
        return self.grid_width * self.grid_height

    def anchor_box(self, ix: int, iy: int) -> Box:
        cx = self.cell * ix + self.cell / 2.0
        cy = self.cell * iy + self.cell / 2.0
        return Box(
            cx - self.anchor_width / 2.0,
            cy - self.anchor_height / 2.0,
            cx + self.anchor_width / 2.0,
            cy + self.anchor_height / 2.0,
        )

    def boxes(self) -> np.ndarray:
        """(count, 4) anchor boxes in row-major cell order."""
        xs = self.cell * np.arange(self.grid_width) + self.cell / 2.0
        ys = self.cell * np.arange(self.grid_height) + self.cell / 2.0
        cx, cy = np.meshgrid(xs, ys)
        half_w = self.anchor_width / 2.0
        half_h = self.anchor_height / 2.0
        return np.stack(
            [
                (cx - half_w).ravel(),
                (cy - half_h).ravel(),
                (cx + half_w).ravel(),
                (cy + half_h).ravel(),
            ],
            axis=1,
        )


def make_anchors(
    image_width: int,
    image_height: int,
    anchor_width: float = DEFAULT_ANCHOR_W,
    anchor_height: float = DEFAULT_ANCHOR_H,
) -> AnchorGrid:
    return AnchorGrid(image_width, image_height, anchor_width, anchor_height)


def encode_delta(anchor: Box, target: Box) -> BoxDelta:
    """Regression target moving the anchor onto the target box."""
    if target.width <= 0.0 or target.height <= 0.0:
        raise ValueError("target box must have positive extent")
    acx, acy = anchor.center()
    tcx, tcy = target.center()
    return BoxDelta(
        tx=(tcx - acx) / anchor.width,
        ty=(tcy - acy) / anchor.height,
        tw=math.log(target.width / anchor.width),
        th=math.log(target.height / anchor.height),
    )


def decode_delta(anchor: Box, delta: BoxDelta) -> Box:
    """Inverse of :func:`encode_delta`."""
    acx, acy = anchor.center()
    cx = acx + delta.tx * anchor.width
    cy = acy + delta.ty * anchor.height
    w = anchor.width * math.exp(delta.tw)
    h = anchor.height * math.exp(delta.th)
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode_delta` over matching (N, 4) arrays."""
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    if np.any(tw <= 0.0) or np.any(th <= 0.0):
        raise ValueError("target boxes must have positive extent")
    acx = (anchors[:, 0] + anchors[:, 2]) / 2.0
    acy = (anchors[:, 1] + anchors[:, 3]) / 2.0
    tcx = (targets[:, 0] + targets[:, 2]) / 2.0
    tcy = (targets[:, 1] + targets[:, 3]) / 2.0
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=1
    )


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized :func:`decode_delta` over matching (N, 4) arrays."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2.0
    acy = (anchors[:, 1] + anchors[:, 3]) / 2.0
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


def nms(detections: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Class-agnostic greedy NMS.

    Detections are visited by descending score (ties: smaller top, then smaller
    left coordinate first); one is kept iff its IOU with every already-kept
    detection is <= the threshold.  The result is sorted by descending score.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou threshold out of range: {iou_threshold}")
    if not detections:
        return []
    boxes = boxes_to_array(d.box for d in detections)
    scores = np.array([d.score for d in detections], dtype=np.float64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    # np.lexsort sorts by the last key first.
    order = np.lexsort((boxes[:, 0], boxes[:, 1], -scores))
    kept: list[int] = []
    while order.size:
        idx = int(order[0])
        kept.append(idx)
        rest = order[1:]
        iw = np.minimum(boxes[idx, 2], boxes[rest, 2]) - np.maximum(boxes[idx, 0], boxes[rest, 0])
        ih = np.minimum(boxes[idx, 3], boxes[rest, 3]) - np.maximum(boxes[idx, 1], boxes[rest, 1])
        inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
        overlap = inter / (areas[idx] + areas[rest] - inter)
        order = rest[overlap <= iou_threshold]
    return [detections[i] for i in kept]
