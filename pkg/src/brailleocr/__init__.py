"""Optical Braille recognition by whole-character detection.

The pipeline finds each Braille character as one object (box + 63-way class
equal to the cell's dot mask), filters overlaps with a tiny-IOU NMS, and
assembles the surviving detections into lines of text.  Submodules:

- codec: dot patterns <-> class labels <-> text
- geometry: boxes, the single-level anchor grid, IOU, NMS
- imaging: normalization, resizing, affine warps, crops
- synth: synthetic annotated page rendering
- datasets: annotation formats, validation, splits
- network / detector: the stride-16 CNN, target assignment, loss, decoding
- trainer: staged training loop with reduce-on-plateau
- evaluation: character- and dot-level precision/recall/F1
- reader: detections -> lines of text
- cli / config: command-line front end and run configuration
"""

__version__ = "0.1.0"

from .geometry import Box, Detection  # noqa: F401
