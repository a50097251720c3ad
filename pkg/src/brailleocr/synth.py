"""Synthetic Braille page rendering with exact ground-truth annotations.

Pages follow desk-scan geometry at ~100 dpi: dot pitch 10 px inside the 2x3
cell, character pitch 25 px, line pitch 40 px, so a character occupies a
20x32 px box.  Dots are drawn as embossing relief lit from the top — a bright
crescent above the dot centre and a dark one below — on a textured paper
background.  An optional small rotation/perspective warp and additive noise
make pages camera-like; the returned boxes are exact axis-aligned hulls of
the warped character cells.

Everything is a deterministic function of (inputs, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import CLASS_COUNT, decode
from .datasets import PageAnnotation
from .geometry import Box
from .imaging import resize, round_to_u8

# Dot centre offsets inside a cell, indexed by dot number 1..6
# (left column top-to-bottom, then right column top-to-bottom).
_DOT_COLUMN = {1: -1, 2: -1, 3: -1, 4: 1, 5: 1, 6: 1}
_DOT_ROW = {1: -1, 2: 0, 3: 1, 4: -1, 5: 0, 6: 1}


@dataclass(frozen=True)
class PageGeometry:
    dot_pitch: float = 10.0
    char_pitch: float = 25.0
    line_pitch: float = 40.0
    dot_radius: float = 4.0
    box_width: float = 20.0
    box_height: float = 32.0
    margin_x: float = 32.0
    margin_y: float = 32.0
    page_width: int | None = None
    page_height: int | None = None

    def __post_init__(self) -> None:
        for name in ("dot_pitch", "char_pitch", "line_pitch", "dot_radius", "box_width", "box_height"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class RenderOptions:
    max_rotation_deg: float = 0.0
    perspective: float = 0.0
    noise_sigma: float = 0.0
    background: float = 218.0
    texture: float = 5.0
    illumination: float = 6.0
    dot_amplitude: tuple[float, float] = (70.0, 100.0)
    dot_jitter: float = 0.3


def _page_size(geometry: PageGeometry, n_rows: int, n_cols: int) -> tuple[int, int]:
    content_w = geometry.box_width + geometry.char_pitch * max(0, n_cols - 1)
    content_h = geometry.box_height + geometry.line_pitch * max(0, n_rows - 1)
    width = geometry.page_width or math.ceil(content_w + 2 * geometry.margin_x)
    height = geometry.page_height or math.ceil(content_h + 2 * geometry.margin_y)
    return int(width), int(height)


def _paper_background(
    width: int, height: int, options: RenderOptions, rng: np.random.Generator
) -> np.ndarray:
    canvas = np.full((height, width), options.background, dtype=np.float64)
    if options.texture > 0.0:
        # Low-frequency fibre texture: coarse noise upsampled bilinearly.
        gw = max(2, width // 48)
        gh = max(2, height // 48)
        coarse = rng.uniform(-options.texture, options.texture, size=(gh, gw))
        coarse_u8 = round_to_u8(coarse + 128.0)
        canvas += resize(coarse_u8, width, height).astype(np.float64) - 128.0
    if options.illumination > 0.0:
        # Light falls from the top of the page.
        grad = np.linspace(1.0, -1.0, height)[:, None]
        canvas += options.illumination * grad
    return canvas


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map sending 4 source points to 4 destination points."""
    a = np.zeros((8, 8), dtype=np.float64)
    b = np.zeros(8, dtype=np.float64)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        b[2 * i] = u
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.array(
        [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]], dtype=np.float64
    )


def _page_warp(
    width: int, height: int, options: RenderOptions, rng: np.random.Generator
) -> np.ndarray:
    theta = math.radians(rng.uniform(-options.max_rotation_deg, options.max_rotation_deg))
    cx, cy = width / 2.0, height / 2.0
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    corners = np.array(
        [[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]], dtype=np.float64
    )
    centred = corners - (cx, cy)
    rotated = centred @ np.array([[cos_t, sin_t], [-sin_t, cos_t]]) + (cx, cy)
    if options.perspective > 0.0:
        amp = options.perspective * min(width, height)
        rotated = rotated + rng.uniform(-amp, amp, size=(4, 2))
    return _homography(corners, rotated)


def _apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.hstack([points, np.ones((len(points), 1))]) @ h.T
    return pts[:, :2] / pts[:, 2:3]


def _draw_dot(
    canvas: np.ndarray, cx: float, cy: float, radius: float, amplitude: float
) -> None:
    height, width = canvas.shape
    x0 = max(int(math.floor(cx - radius - 1.0)), 0)
    x1 = min(int(math.ceil(cx + radius + 1.0)) + 1, width)
    y0 = max(int(math.floor(cy - radius - 1.0)), 0)
    y1 = min(int(math.ceil(cy + radius + 1.0)) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1, dtype=np.float64) + 0.5 - cx
    ys = np.arange(y0, y1, dtype=np.float64) + 0.5 - cy
    dx = xs[None, :] / radius
    dy = ys[:, None] / radius
    falloff = np.clip(1.0 - (dx * dx + dy * dy), 0.0, 1.0)
    shade = np.clip(-dy, -1.0, 1.0)
    canvas[y0:y1, x0:x1] += amplitude * falloff * np.broadcast_to(shade, falloff.shape)


def render_synthetic_page(
    rows: Sequence[Sequence[int]],
    geometry: PageGeometry | None = None,
    options: RenderOptions | None = None,
    seed: int = 0,
    image_id: str = "synthetic",
) -> tuple[np.ndarray, PageAnnotation]:
    """Render rows of class labels (0 = blank cell) into a grayscale page.

    Returns the image and a :class:`PageAnnotation` whose boxes are the exact
    hulls of the warped character cells, one per nonzero label.
    """
    geometry = geometry or PageGeometry()
    options = options or RenderOptions()
    rng = np.random.default_rng(seed)

    n_rows = len(rows)
    n_cols = max((len(r) for r in rows), default=0)
    for row in rows:
        for value in row:
            if value != 0 and not 1 <= value <= CLASS_COUNT:
                raise ValueError(f"class label out of range: {value}")
    width, height = _page_size(geometry, n_rows, n_cols)

    canvas = _paper_background(width, height, options, rng)
    warp = _page_warp(width, height, options, rng)

    chars: list[tuple[Box, int]] = []
    half_w = geometry.box_width / 2.0
    half_h = geometry.box_height / 2.0
    for r, row in enumerate(rows):
        cy = geometry.margin_y + half_h + r * geometry.line_pitch
        for c, class_id in enumerate(row):
            if class_id == 0:
                continue
            cx = geometry.margin_x + half_w + c * geometry.char_pitch
            corners = np.array(
                [
                    [cx - half_w, cy - half_h],
                    [cx + half_w, cy - half_h],
                    [cx + half_w, cy + half_h],
                    [cx - half_w, cy + half_h],
                ]
            )
            mapped = _apply_homography(warp, corners)
            lo = mapped.min(axis=0)
            hi = mapped.max(axis=0)
            if lo[0] < 0.0 or lo[1] < 0.0 or hi[0] > width or hi[1] > height:
                raise ValueError(
                    f"text exceeds page bounds at row {r}, col {c}: "
                    f"box [{lo[0]:.1f}, {lo[1]:.1f}, {hi[0]:.1f}, {hi[1]:.1f}] "
                    f"outside {width}x{height}"
                )
            chars.append((Box(lo[0], lo[1], hi[0], hi[1]), class_id))

            centres = np.array(
                [
                    [
                        cx + _DOT_COLUMN[d] * geometry.dot_pitch / 2.0,
                        cy + _DOT_ROW[d] * geometry.dot_pitch,
                    ]
                    for d in sorted(decode(class_id).dots)
                ]
            )
            centres = _apply_homography(warp, centres)
            for dot_x, dot_y in centres:
                if options.dot_jitter > 0.0:
                    dot_x += float(np.clip(rng.normal(0.0, options.dot_jitter), -0.9, 0.9))
                    dot_y += float(np.clip(rng.normal(0.0, options.dot_jitter), -0.9, 0.9))
                radius = geometry.dot_radius * rng.uniform(0.92, 1.08)
                amplitude = rng.uniform(*options.dot_amplitude)
                _draw_dot(canvas, dot_x, dot_y, radius, amplitude)

    if options.noise_sigma > 0.0:
        canvas += rng.normal(0.0, options.noise_sigma, size=canvas.shape)

    image = round_to_u8(canvas)
    annotation = PageAnnotation(
        image=image_id,
        width=width,
        height=height,
        chars=chars,
        negative=not chars,
    )
    return image, annotation


def render_negative_page(
    width: int,
    height: int,
    options: RenderOptions | None = None,
    seed: int = 0,
    image_id: str = "negative",
) -> tuple[np.ndarray, PageAnnotation]:
    """A Braille-free page (print-like strokes on paper) for negative training."""
    options = options or RenderOptions()
    rng = np.random.default_rng(seed)
    canvas = _paper_background(width, height, options, rng)

    # Rows of dark dashes, mimicking printed text lines.
    y = rng.uniform(10.0, 30.0)
    while y < height - 12.0:
        x = rng.uniform(8.0, 24.0)
        while x < width - 16.0:
            dash_w = rng.uniform(6.0, 22.0)
            dash_h = rng.uniform(2.0, 5.0)
            x1 = min(int(x + dash_w), width)
            y1 = min(int(y + dash_h), height)
            canvas[int(y) : y1, int(x) : x1] -= rng.uniform(60.0, 110.0)
            x += dash_w + rng.uniform(3.0, 12.0)
        y += rng.uniform(14.0, 26.0)

    if options.noise_sigma > 0.0:
        canvas += rng.normal(0.0, options.noise_sigma, size=canvas.shape)
    image = round_to_u8(canvas)
    annotation = PageAnnotation(image=image_id, width=width, height=height, chars=[], negative=True)
    return image, annotation


def random_rows(
    n_rows: int,
    n_cols: int,
    seed: int = 0,
    space_prob: float = 0.12,
) -> list[list[int]]:
    """Rows of uniformly random class labels with blank cells sprinkled in.

    Blanks never lead a row or repeat, mirroring single-space text; this also
    makes the text->page->reader round trip exact.
    """
    rng = np.random.default_rng(seed)
    rows: list[list[int]] = []
    for _ in range(n_rows):
        labels = rng.integers(1, CLASS_COUNT + 1, size=n_cols)
        blanks = rng.random(n_cols) < space_prob
        row: list[int] = []
        for i, (value, blank) in enumerate(zip(labels, blanks)):
            lead = i == 0 or (row and row[-1] == 0)
            row.append(0 if blank and not lead else int(value))
        rows.append(row)
    return rows


def rows_from_unicode(text: str) -> list[list[int]]:
    """Parse Braille-pattern text (one page line per text line) into class rows."""
    rows: list[list[int]] = []
    for line in text.splitlines():
        row: list[int] = []
        for ch in line:
            if ch == " ":
                row.append(0)
                continue
            value = ord(ch) - 0x2800
            if not 0 <= value <= CLASS_COUNT:
                raise ValueError(f"not a 6-dot Braille character: {ch!r}")
            row.append(value)
        rows.append(row)
    return rows


def rows_to_unicode(rows: Sequence[Sequence[int]]) -> str:
    """Inverse of :func:`rows_from_unicode`; blank cells become spaces."""
    lines = []
    for row in rows:
        lines.append("".join(" " if v == 0 else chr(0x2800 + v) for v in row).rstrip())
    return "\n".join(lines)
