"""Assemble detections into lines of text.

Lines are found by single-linkage clustering of detection y-centres with a
link threshold of half the median detection height; within a line characters
run left to right.  Braille encodes spaces as empty cells, which produce no
detections, so spaces are reconstructed from x-gaps: a gap wider than 1.5x
the line's median character pitch becomes one space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import codec
from .geometry import Detection

LINE_LINK_FACTOR = 0.5
SPACE_GAP_FACTOR = 1.5


@dataclass
class TextLine:
    baseline_y: float
    detections: list[Detection] = field(default_factory=list)
    text: str = ""


def group_lines(detections: Sequence[Detection]) -> list[TextLine]:
    """Cluster detections into text lines ordered top to bottom."""
    if not detections:
        return []
    heights = np.array([d.box.height for d in detections])
    threshold = LINE_LINK_FACTOR * float(np.median(heights))
    by_y = sorted(detections, key=lambda d: d.box.center()[1])

    lines: list[list[Detection]] = [[by_y[0]]]
    last_y = by_y[0].box.center()[1]
    for det in by_y[1:]:
        y = det.box.center()[1]
        if y - last_y > threshold:
            lines.append([])
        lines[-1].append(det)
        last_y = y

    result = []
    for members in lines:
        members.sort(key=lambda d: d.box.center()[0])
        baseline = float(np.mean([d.box.center()[1] for d in members]))
        result.append(TextLine(baseline_y=baseline, detections=members))
    return result


def render_text(lines: Sequence[TextLine], table: Mapping[int, str] | None = None) -> str:
    """Lines -> text; unmapped classes render as Unicode Braille patterns."""
    rendered = []
    for line in lines:
        centers = [d.box.center()[0] for d in line.detections]
        gaps = np.diff(centers)
        pitch = float(np.median(gaps)) if len(gaps) else 0.0
        pieces = []
        for i, det in enumerate(line.detections):
            if i > 0 and pitch > 0.0 and gaps[i - 1] > SPACE_GAP_FACTOR * pitch:
                pieces.append(" ")
            pieces.append(codec.to_text(det.class_id, table))
        line.text = "".join(pieces)
        rendered.append(line.text)
    return "\n".join(rendered)
