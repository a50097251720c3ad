"""Raster images, Eq.-style normalization, affine warps and crops.

Images are numpy uint8 arrays, shape (H, W) for grayscale or (H, W, 3) for
RGB.  Continuous coordinates put pixel (row i, col j) at centre
(x = j + 0.5, y = i + 0.5), so a WxH image spans the box [0, 0, W, H]; all
box math in :mod:`brailleocr.geometry` uses the same convention.

Resampling is bilinear everywhere, computed in float and rounded half-up back
to uint8.  Samples falling outside the source blend with the per-channel
image mean, so normalization statistics are unaffected by padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .geometry import Box

STD_FLOOR = 0.1 * 255.0


def _require_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] in (1, 3):
        return image
    raise ValueError(f"expected (H, W) or (H, W, 1|3) image, got shape {image.shape}")


def _as_3d(image: np.ndarray) -> tuple[np.ndarray, bool]:
    """View as (H, W, C); second value tells whether input had no channel axis."""
    image = _require_image(image)
    if image.ndim == 2:
        return image[:, :, None], True
    return image, False


def _restore(image: np.ndarray, squeeze: bool) -> np.ndarray:
    return image[:, :, 0] if squeeze else image


def round_to_u8(values: np.ndarray) -> np.ndarray:
    """Round half-up and clip to the uint8 range."""
    return np.clip(np.floor(values + 0.5), 0.0, 255.0).astype(np.uint8)


def channel_means(image: np.ndarray) -> np.ndarray:
    arr, _ = _as_3d(image)
    return arr.mean(axis=(0, 1), dtype=np.float64)


def normalize(image: np.ndarray) -> np.ndarray:
    """Zero-mean scaling of each channel: (I - mean) / (3 * max(std, 25.5)).

    The std floor (10% of the intensity range) removes the constant-image
    singularity; whenever std >= 25.5 the output std is exactly 1/3.
    """
    arr, squeeze = _as_3d(image)
    values = arr.astype(np.float64)
    mean = values.mean(axis=(0, 1))
    std = values.std(axis=(0, 1))
    denom = 3.0 * np.maximum(std, STD_FLOOR)
    out = ((values - mean) / denom).astype(np.float32)
    return _restore(out, squeeze)


def resize(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize to width x height (edge-clamped sampling)."""
    import torch
    import torch.nn.functional as F

    if width < 1 or height < 1:
        raise ValueError("resize dimensions must be >= 1")
    arr, squeeze = _as_3d(image)
    source = torch.from_numpy(
        np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32)
    ).unsqueeze(0)
    out = F.interpolate(source, size=(height, width), mode="bilinear", align_corners=False)
    return _restore(round_to_u8(out[0].permute(1, 2, 0).numpy()), squeeze)


@dataclass(frozen=True)
class AffineMap:
    """Explicit affine source->output map with a fixed output canvas."""

    coeffs: tuple[float, float, float, float, float, float]
    width: int
    height: int

    def matrix(self, src_w: int, src_h: int) -> np.ndarray:
        return np.array(self.coeffs, dtype=np.float64).reshape(2, 3)

    def output_size(self, src_w: int, src_h: int) -> tuple[int, int]:
        return self.width, self.height


@dataclass(frozen=True)
class GeometricTransform:
    """Scale, rotate about the output centre, then optionally mirror in x."""

    scale_x: float = 1.0
    scale_y: float = 1.0
    rotation_deg: float = 0.0
    mirror: bool = False

    def __post_init__(self) -> None:
        if self.scale_x <= 0.0 or self.scale_y <= 0.0:
            raise ValueError("scales must be positive")

    def output_size(self, src_w: int, src_h: int) -> tuple[int, int]:
        return max(1, round(src_w * self.scale_x)), max(1, round(src_h * self.scale_y))

    def matrix(self, src_w: int, src_h: int) -> np.ndarray:
        out_w, out_h = self.output_size(src_w, src_h)
        theta = math.radians(self.rotation_deg)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        m = np.array(
            [[self.scale_x, 0.0, 0.0], [0.0, self.scale_y, 0.0], [0.0, 0.0, 1.0]]
        )
        cx, cy = out_w / 2.0, out_h / 2.0
        rot = np.array(
            [
                [cos_t, -sin_t, cx - cos_t * cx + sin_t * cy],
                [sin_t, cos_t, cy - sin_t * cx - cos_t * cy],
                [0.0, 0.0, 1.0],
            ]
        )
        m = rot @ m
        if self.mirror:
            m = np.array([[-1.0, 0.0, float(out_w)], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ m
        return m[:2]

    def inverse(self, src_w: int, src_h: int) -> AffineMap:
        """Affine map that undoes this transform on the same source dims."""
        m = np.vstack([self.matrix(src_w, src_h), [0.0, 0.0, 1.0]])
        inv = np.linalg.inv(m)[:2]
        return AffineMap(tuple(inv.ravel().tolist()), src_w, src_h)


def warp_affine(
    image: np.ndarray,
    matrix: np.ndarray,
    out_width: int,
    out_height: int,
    fill: Sequence[float] | None = None,
) -> np.ndarray:
    """Warp with a source->output affine matrix; outside samples blend to fill.

    The heavy lifting runs through torch's bilinear sampler (an order of
    magnitude faster than a numpy gather at training-crop sizes); sampling the
    mean-shifted image with a zero border makes every outside sample blend
    into the fill colour.
    """
    import torch
    import torch.nn.functional as F

    arr, squeeze = _as_3d(image)
    src_h, src_w = arr.shape[:2]
    matrix = np.asarray(matrix, dtype=np.float64).reshape(2, 3)
    full = np.vstack([matrix, [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(full)
    fill_values = channel_means(arr) if fill is None else np.asarray(fill, dtype=np.float64)
    fill_values = np.broadcast_to(np.atleast_1d(fill_values), (arr.shape[2],))

    # Destination->source map in the normalized coordinates of affine_grid
    # (align_corners=False: pixel centre (i + 0.5) <-> (2i + 1)/size - 1).
    a, b = inv[:2, :2], inv[:2, 2]
    theta = np.array(
        [
            [a[0, 0] * out_width / src_w, a[0, 1] * out_height / src_w,
             (a[0, 0] * out_width + a[0, 1] * out_height + 2.0 * b[0] - src_w) / src_w],
            [a[1, 0] * out_width / src_h, a[1, 1] * out_height / src_h,
             (a[1, 0] * out_width + a[1, 1] * out_height + 2.0 * b[1] - src_h) / src_h],
        ],
        dtype=np.float32,
    )
    source = torch.from_numpy(
        np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32)
    ).unsqueeze(0)
    means = torch.from_numpy(fill_values.astype(np.float32).copy()).view(1, -1, 1, 1)
    grid = F.affine_grid(
        torch.from_numpy(theta).unsqueeze(0),
        (1, arr.shape[2], out_height, out_width),
        align_corners=False,
    )
    warped = F.grid_sample(
        source - means, grid, mode="bilinear", padding_mode="zeros", align_corners=False
    ) + means
    out = warped[0].permute(1, 2, 0).numpy()
    return _restore(round_to_u8(out), squeeze)


def transform_boxes(boxes: Sequence[Box], matrix: np.ndarray) -> list[Box]:
    """Axis-aligned hulls of boxes pushed through an affine matrix."""
    if not boxes:
        return []
    matrix = np.asarray(matrix, dtype=np.float64).reshape(2, 3)
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    corners = np.stack(
        [
            arr[:, [0, 1]],
            arr[:, [2, 1]],
            arr[:, [2, 3]],
            arr[:, [0, 3]],
        ],
        axis=1,
    )  # (N, 4, 2)
    mapped = corners @ matrix[:, :2].T + matrix[:, 2]
    lo = mapped.min(axis=1)
    hi = mapped.max(axis=1)
    return [Box(l, t, r, b) for (l, t), (r, b) in zip(lo, hi)]


def apply_transform(
    image: np.ndarray,
    transform: GeometricTransform | AffineMap,
    boxes: Sequence[Box] = (),
) -> tuple[np.ndarray, list[Box]]:
    """Warp an image and map boxes to the axis-aligned hulls of their images."""
    arr, _ = _as_3d(image)
    src_h, src_w = arr.shape[:2]
    out_w, out_h = transform.output_size(src_w, src_h)
    matrix = transform.matrix(src_w, src_h)
    frame = transform_boxes([Box(0.0, 0.0, float(src_w), float(src_h))], matrix)[0]
    if frame.right <= 0 or frame.bottom <= 0 or frame.left >= out_w or frame.top >= out_h:
        raise ValueError("transform maps the image entirely out of frame")
    warped = warp_affine(image, matrix, out_w, out_h)
    return warped, transform_boxes(boxes, matrix)


def _clip_boxes_to_window(
    boxes: Sequence[Box], window: Box, min_retained: float = 0.5
) -> tuple[list[Box], list[int]]:
    """Clip boxes to a window, dropping those keeping < min_retained of area."""
    kept: list[Box] = []
    indices: list[int] = []
    for i, box in enumerate(boxes):
        left = max(box.left, window.left)
        top = max(box.top, window.top)
        right = min(box.right, window.right)
        bottom = min(box.bottom, window.bottom)
        if right <= left or bottom <= top:
            continue
        if (right - left) * (bottom - top) < min_retained * box.area:
            continue
        kept.append(Box(left - window.left, top - window.top, right - window.left, bottom - window.top))
        indices.append(i)
    return kept, indices


def crop(
    image: np.ndarray,
    origin: tuple[int, int],
    width: int = 416,
    height: int = 416,
    boxes: Sequence[Box] = (),
) -> tuple[np.ndarray, list[Box]]:
    """Cut a window (mean-padded past the borders); clip boxes, dropping those
    that retain less than half of their area."""
    arr, squeeze = _as_3d(image)
    src_h, src_w = arr.shape[:2]
    ox, oy = int(origin[0]), int(origin[1])
    if ox + width <= 0 or oy + height <= 0 or ox >= src_w or oy >= src_h:
        raise ValueError("crop window does not intersect the image")
    fill = round_to_u8(channel_means(arr))
    out = np.empty((height, width, arr.shape[2]), dtype=np.uint8)
    out[:, :] = fill
    sx0, sy0 = max(ox, 0), max(oy, 0)
    sx1, sy1 = min(ox + width, src_w), min(oy + height, src_h)
    out[sy0 - oy : sy1 - oy, sx0 - ox : sx1 - ox] = arr[sy0:sy1, sx0:sx1]
    window = Box(float(ox), float(oy), float(ox + width), float(oy + height))
    clipped, _ = _clip_boxes_to_window(boxes, window)
    return _restore(out, squeeze), clipped


def transform_and_crop(
    image: np.ndarray,
    transform: GeometricTransform,
    origin: tuple[int, int],
    width: int,
    height: int,
    boxes: Sequence[Box] = (),
) -> tuple[np.ndarray, list[Box], list[int]]:
    """Fused apply_transform + crop that renders only the crop window.

    Also returns the indices of the surviving boxes so per-box labels can be
    carried along.
    """
    arr, _ = _as_3d(image)
    src_h, src_w = arr.shape[:2]
    matrix = transform.matrix(src_w, src_h).copy()
    matrix[0, 2] -= origin[0]
    matrix[1, 2] -= origin[1]
    warped = warp_affine(image, matrix, width, height)
    mapped = transform_boxes(boxes, matrix)
    window = Box(0.0, 0.0, float(width), float(height))
    clipped, indices = _clip_boxes_to_window(mapped, window)
    return warped, clipped, indices


def pad_to_multiple(image: np.ndarray, multiple: int = 16) -> np.ndarray:
    """Pad right/bottom with the channel mean so dims are multiples of `multiple`."""
    arr, squeeze = _as_3d(image)
    src_h, src_w = arr.shape[:2]
    out_w = math.ceil(src_w / multiple) * multiple
    out_h = math.ceil(src_h / multiple) * multiple
    if (out_w, out_h) == (src_w, src_h):
        return image
    fill = round_to_u8(channel_means(arr))
    out = np.empty((out_h, out_w, arr.shape[2]), dtype=np.uint8)
    out[:, :] = fill
    out[:src_h, :src_w] = arr
    return _restore(out, squeeze)


def read_image(path: str | Path, channels: int | None = None) -> np.ndarray:
    """Load an image file as uint8 grayscale (H, W) or RGB (H, W, 3)."""
    with Image.open(path) as img:
        if channels == 1:
            img = img.convert("L")
        elif channels == 3:
            img = img.convert("RGB")
        elif img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return np.asarray(img, dtype=np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write a uint8 image as PNG (lossless round-trip)."""
    arr = _require_image(np.ascontiguousarray(image, dtype=np.uint8))
    Image.fromarray(arr).save(str(path), format="PNG")


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma conversion; grayscale input passes through."""
    arr, _ = _as_3d(image)
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    luma = arr.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return round_to_u8(luma)
