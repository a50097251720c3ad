"""Braille cell codec: dot patterns, class labels, mirroring, text output.

A Braille cell is a 2x3 grid of dot positions numbered 1-2-3 down the left
column and 4-5-6 down the right column.  A cell with at least one raised dot
gets the class label ``sum(2**(i-1) for each raised dot i)``, so labels run
1..63 and the label doubles as the bit mask of the cell.  The empty cell is a
space, never a detection class.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

CLASS_COUNT = 63

DOT_NUMBERS = (1, 2, 3, 4, 5, 6)

# Unicode Braille Patterns block; the 6-dot mask is the code point offset.
_BRAILLE_BASE = 0x2800


@dataclass(frozen=True)
class DotPattern:
    """Set of raised dots of one cell, numbered 1..6."""

    dots: frozenset[int]

    def __post_init__(self) -> None:
        if not self.dots <= set(DOT_NUMBERS):
            bad = sorted(set(self.dots) - set(DOT_NUMBERS))
            raise ValueError(f"invalid dot numbers: {bad}")

    @classmethod
    def from_dots(cls, dots: Iterable[int]) -> "DotPattern":
        return cls(frozenset(int(d) for d in dots))

    @classmethod
    def from_string(cls, text: str) -> "DotPattern":
        """Parse an ascending digit string such as ``"124"`` (``""`` = empty)."""
        if not all(ch in "123456" for ch in text):
            raise ValueError(f"invalid dot string: {text!r}")
        if list(text) != sorted(set(text)):
            raise ValueError(f"dot string must be ascending and unique: {text!r}")
        return cls(frozenset(int(ch) for ch in text))

    def to_string(self) -> str:
        return "".join(str(d) for d in sorted(self.dots))

    def __bool__(self) -> bool:
        return bool(self.dots)


def encode(pattern: DotPattern) -> int:
    """Class label of a nonempty dot pattern (1..63)."""
    if not pattern.dots:
        raise ValueError("empty cell encodes no character")
    return sum(1 << (d - 1) for d in pattern.dots)


def decode(class_id: int) -> DotPattern:
    """Dot pattern of a class label; inverse of :func:`encode`."""
    _check_class(class_id)
    return DotPattern(frozenset(d for d in DOT_NUMBERS if class_id >> (d - 1) & 1))


def mirror(class_id: int) -> int:
    """Class label after reflecting the cell left-right (dots 1<->4, 2<->5, 3<->6)."""
    _check_class(class_id)
    return (class_id & 0b000111) << 3 | (class_id & 0b111000) >> 3


def to_unicode(class_id: int) -> str:
    """The Braille Patterns character whose dot mask equals the class label."""
    _check_class(class_id)
    return chr(_BRAILLE_BASE + class_id)


def to_text(class_id: int, table: Mapping[int, str] | None = None) -> str:
    """Text for a class via an alphabet table; unmapped classes render as Braille."""
    _check_class(class_id)
    if table is not None:
        mapped = table.get(class_id)
        if mapped is not None:
            return mapped
    return to_unicode(class_id)


def load_alphabet(path: str | Path) -> dict[int, str]:
    """Load an alphabet table file: one ``<dots>\\t<string>`` mapping per line.

    The dot list is an ascending digit string ("124").  Blank lines and lines
    starting with ``#`` are skipped.
    """
    table: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected <dots>\\t<string>")
            dots, text = line.split("\t", 1)
            try:
                class_id = encode(DotPattern.from_string(dots.strip()))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if class_id in table:
                raise ValueError(f"{path}:{lineno}: duplicate mapping for dots {dots!r}")
            table[class_id] = text
    return table


def latin_alphabet() -> dict[int, str]:
    """The packaged Latin (Grade-1) letter table."""
    ref = resources.files("brailleocr").joinpath("data/latin.tsv")
    with resources.as_file(ref) as path:
        return load_alphabet(path)


def _check_class(class_id: int) -> None:
    if not 1 <= class_id <= CLASS_COUNT:
        raise ValueError(f"class label out of range [1, {CLASS_COUNT}]: {class_id}")
