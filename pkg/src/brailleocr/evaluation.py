"""Character- and dot-level detection metrics.

A detection is a character-level true positive iff it overlaps a ground-truth
character with IOU >= 0.5 and carries the correct class; any other detection
is a false positive, and truths with no true-positive match are false
negatives.  Matching is greedy one-to-one by descending score, correct-class
pairs first, so a truth claimed by a higher-score wrong-class detection can
still be won by a lower-score correct-class one.

Dot-level counts are derived from the character matching: true-positive
characters contribute all their dots as TP; unmatched truths/detections
contribute all dots as FN/FP; position-matched pairs with mismatched classes
are compared dot-by-dot over the 6 positions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datasets import PageAnnotation
from .geometry import Box, Detection, boxes_to_array, iou_matrix

MATCH_IOU = 0.5


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def compute_prf(counts: Counts) -> tuple[float, float, float]:
    """Precision, recall, F1.  All-zero counts score 1.0 (nothing to find,
    nothing found); otherwise an empty denominator scores 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class CharMatch:
    tp_pairs: list[tuple[int, int]]
    class_mismatch_pairs: list[tuple[int, int]]
    unmatched_detections: list[int]
    unmatched_truths: list[int]
    counts: Counts


def match_characters(
    detections: Sequence[Detection],
    truths: Sequence[tuple[Box, int]],
    iou_threshold: float = MATCH_IOU,
) -> CharMatch:
    """Greedy one-to-one matching of detections to ground-truth characters."""
    n_det, n_truth = len(detections), len(truths)
    if n_det and n_truth:
        det_arr = boxes_to_array(d.box for d in detections)
        truth_arr = boxes_to_array(box for box, _ in truths)
        ious = iou_matrix(det_arr, truth_arr)
    else:
        ious = np.zeros((n_det, n_truth))

    order = sorted(
        range(n_det),
        key=lambda i: (-detections[i].score, detections[i].box.top, detections[i].box.left),
    )
    candidates = [np.nonzero(ious[i] >= iou_threshold)[0] for i in range(n_det)]
    truth_free = [True] * n_truth
    det_free = [True] * n_det
    tp_pairs: list[tuple[int, int]] = []
    mismatch_pairs: list[tuple[int, int]] = []

    for require_class, sink in ((True, tp_pairs), (False, mismatch_pairs)):
        for i in order:
            if not det_free[i]:
                continue
            best_j = -1
            for j in candidates[i]:
                if not truth_free[j]:
                    continue
                if require_class and truths[j][1] != detections[i].class_id:
                    continue
                if best_j < 0 or ious[i, j] > ious[i, best_j]:
                    best_j = int(j)
            if best_j >= 0:
                det_free[i] = False
                truth_free[best_j] = False
                sink.append((i, best_j))

    tp = len(tp_pairs)
    return CharMatch(
        tp_pairs=tp_pairs,
        class_mismatch_pairs=mismatch_pairs,
        unmatched_detections=[i for i in order if det_free[i]],
        unmatched_truths=[j for j in range(n_truth) if truth_free[j]],
        counts=Counts(tp=tp, fp=n_det - tp, fn=n_truth - tp),
    )


def dot_level_counts(
    detections: Sequence[Detection],
    truths: Sequence[tuple[Box, int]],
    match: CharMatch,
) -> Counts:
    """Per-dot TP/FP/FN derived from the character matching."""
    counts = Counts()
    for _, j in match.tp_pairs:
        counts.tp += truths[j][1].bit_count()
    for i, j in match.class_mismatch_pairs:
        det_mask = detections[i].class_id
        truth_mask = truths[j][1]
        counts.tp += (det_mask & truth_mask).bit_count()
        counts.fp += (det_mask & ~truth_mask & 0b111111).bit_count()
        counts.fn += (truth_mask & ~det_mask & 0b111111).bit_count()
    for i in match.unmatched_detections:
        counts.fp += detections[i].class_id.bit_count()
    for j in match.unmatched_truths:
        counts.fn += truths[j][1].bit_count()
    return counts


@dataclass
class PageEval:
    page: str
    char: Counts
    dot: Counts


@dataclass
class EvalReport:
    char_counts: Counts = field(default_factory=Counts)
    dot_counts: Counts = field(default_factory=Counts)
    pages: list[PageEval] = field(default_factory=list)
    seconds_per_image: float | None = None

    @property
    def char_prf(self) -> tuple[float, float, float]:
        return compute_prf(self.char_counts)

    @property
    def dot_prf(self) -> tuple[float, float, float]:
        return compute_prf(self.dot_counts)


def evaluate_page(
    detections: Sequence[Detection],
    annotation: PageAnnotation,
    iou_threshold: float = MATCH_IOU,
) -> PageEval:
    match = match_characters(detections, annotation.chars, iou_threshold)
    dots = dot_level_counts(detections, annotation.chars, match)
    # Both sides are fully accounted for by construction.
    total_truth_dots = sum(cid.bit_count() for _, cid in annotation.chars)
    total_det_dots = sum(d.class_id.bit_count() for d in detections)
    assert dots.tp + dots.fn == total_truth_dots
    assert dots.tp + dots.fp == total_det_dots
    return PageEval(page=annotation.image, char=match.counts, dot=dots)


def evaluate_corpus(
    detections_by_page: Mapping[str, Sequence[Detection]],
    truths: Sequence[PageAnnotation],
    iou_threshold: float = MATCH_IOU,
    seconds_per_image: float | None = None,
) -> EvalReport:
    """Micro-averaged corpus metrics: pool counts over pages, then apply the
    precision/recall/F1 formulas once."""
    truth_ids = [t.image for t in truths]
    if len(set(truth_ids)) != len(truth_ids):
        raise ValueError("duplicate page ids in ground truth")
    if set(detections_by_page) != set(truth_ids):
        missing = set(truth_ids) ^ set(detections_by_page)
        raise ValueError(f"detection and truth page sets differ: {sorted(missing)}")
    report = EvalReport(seconds_per_image=seconds_per_image)
    for annotation in truths:
        page = evaluate_page(detections_by_page[annotation.image], annotation, iou_threshold)
        report.pages.append(page)
        report.char_counts += page.char
        report.dot_counts += page.dot
    return report


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """Per-page counts plus a summary row shaped like the usual results table
    (dot P/R/F1, char P/R/F1, seconds/image)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["page", "char_tp", "char_fp", "char_fn", "dot_tp", "dot_fp", "dot_fn"])
        for page in report.pages:
            writer.writerow(
                [page.page, page.char.tp, page.char.fp, page.char.fn,
                 page.dot.tp, page.dot.fp, page.dot.fn]
            )
        writer.writerow([])
        writer.writerow(
            ["summary", "dot_precision", "dot_recall", "dot_f1",
             "char_precision", "char_recall", "char_f1", "seconds_per_image"]
        )
        dot_p, dot_r, dot_f1 = report.dot_prf
        char_p, char_r, char_f1 = report.char_prf
        spi = "" if report.seconds_per_image is None else f"{report.seconds_per_image:.4f}"
        writer.writerow(
            ["summary", f"{dot_p:.6f}", f"{dot_r:.6f}", f"{dot_f1:.6f}",
             f"{char_p:.6f}", f"{char_r:.6f}", f"{char_f1:.6f}", spi]
        )


def format_summary(report: EvalReport) -> str:
    dot_p, dot_r, dot_f1 = report.dot_prf
    char_p, char_r, char_f1 = report.char_prf
    lines = [
        f"characters: P={char_p:.4f} R={char_r:.4f} F1={char_f1:.4f} "
        f"(TP={report.char_counts.tp} FP={report.char_counts.fp} FN={report.char_counts.fn})",
        f"dots:       P={dot_p:.4f} R={dot_r:.4f} F1={dot_f1:.4f} "
        f"(TP={report.dot_counts.tp} FP={report.dot_counts.fp} FN={report.dot_counts.fn})",
    ]
    if report.seconds_per_image is not None:
        lines.append(f"time:       {report.seconds_per_image:.4f} s/image")
    return "\n".join(lines)
