"""Training-target assignment, the combined detection loss, and decoding.

Anchors are matched to ground truth by IOU: >= 0.5 positive, < 0.4 negative,
in-between ignored; additionally every truth box forces its best-IOU anchor
positive so no character goes unassigned.  The loss is
``loc + lambda_cls * cls`` with smooth-L1 over positive-anchor deltas and a
per-class sigmoid focal term over non-ignored anchors, both normalized by
the positive count (floor 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .codec import CLASS_COUNT
from .geometry import (
    AnchorGrid,
    Box,
    Detection,
    boxes_to_array,
    decode_deltas,
    encode_deltas,
    iou_matrix,
    nms,
)
from .imaging import normalize, pad_to_multiple, to_grayscale
from .network import BrailleNet, OUT_CHANNELS

POS_IOU = 0.5
NEG_IOU = 0.4

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


@dataclass
class TargetAssignment:
    """Per-anchor training state: positive (with class + delta), negative, ignore."""

    states: np.ndarray  # (N,) int8
    class_ids: np.ndarray  # (N,) int32, valid where positive
    deltas: np.ndarray  # (N, 4) float32, valid where positive

    @property
    def positive_count(self) -> int:
        return int((self.states == POSITIVE).sum())

    @classmethod
    def concat(cls, items: Sequence["TargetAssignment"]) -> "TargetAssignment":
        return cls(
            states=np.concatenate([a.states for a in items]),
            class_ids=np.concatenate([a.class_ids for a in items]),
            deltas=np.concatenate([a.deltas for a in items]),
        )


def assign_targets(
    grid: AnchorGrid,
    boxes: Sequence[Box],
    class_ids: Sequence[int],
    pos_iou: float = POS_IOU,
    neg_iou: float = NEG_IOU,
) -> TargetAssignment:
    """Match anchors to ground truth; empty truth yields all-negative anchors."""
    if len(boxes) != len(class_ids):
        raise ValueError("boxes and class_ids must have equal length")
    n = grid.count
    states = np.full(n, NEGATIVE, dtype=np.int8)
    out_classes = np.zeros(n, dtype=np.int32)
    out_deltas = np.zeros((n, 4), dtype=np.float32)
    if not boxes:
        return TargetAssignment(states, out_classes, out_deltas)

    anchor_arr = grid.boxes()
    truth_arr = boxes_to_array(boxes)
    ious = iou_matrix(anchor_arr, truth_arr)
    best_truth = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_truth]

    states[best_iou >= pos_iou] = POSITIVE
    states[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORE

    # Force each truth's best anchor positive; on contested anchors the truth
    # with the higher IOU wins (ties: lower truth index).
    forced: dict[int, int] = {}
    for t in range(truth_arr.shape[0]):
        a = int(ious[:, t].argmax())
        if a not in forced or ious[a, t] > ious[a, forced[a]]:
            forced[a] = t
    for a, t in forced.items():
        states[a] = POSITIVE
        best_truth[a] = t

    pos = np.nonzero(states == POSITIVE)[0]
    assigned = best_truth[pos]
    out_classes[pos] = np.asarray(class_ids, dtype=np.int32)[assigned]
    out_deltas[pos] = encode_deltas(anchor_arr[pos], truth_arr[assigned]).astype(np.float32)
    return TargetAssignment(states, out_classes, out_deltas)


@dataclass
class LossValue:
    total: torch.Tensor
    loc_component: torch.Tensor
    cls_component: torch.Tensor
    lambda_cls: float


def focal_loss(
    class_logits: torch.Tensor,
    assignment: TargetAssignment,
    gamma: float = 2.0,
    alpha: float | None = 0.25,
) -> torch.Tensor:
    """Sigmoid focal loss summed over non-ignored anchors and all classes,
    normalized by the positive-anchor count (floor 1).

    ``alpha=None`` disables the balance weight entirely, so gamma=0 reduces
    to plain sigmoid cross-entropy.
    """
    if class_logits.ndim != 2:
        raise ValueError(f"expected (anchors, classes) logits, got {tuple(class_logits.shape)}")
    n, n_classes = class_logits.shape
    if len(assignment.states) != n:
        raise ValueError(f"assignment covers {len(assignment.states)} anchors, logits {n}")

    states = torch.from_numpy(assignment.states.astype(np.int64))
    targets = torch.zeros_like(class_logits)
    pos = np.nonzero(assignment.states == POSITIVE)[0]
    if len(pos):
        cols = assignment.class_ids[pos] - 1
        if cols.min() < 0 or cols.max() >= n_classes:
            raise ValueError("positive class id outside the logit range")
        targets[torch.from_numpy(pos), torch.from_numpy(cols)] = 1.0

    bce = F.binary_cross_entropy_with_logits(class_logits, targets, reduction="none")
    p = torch.sigmoid(class_logits)
    pt = p * targets + (1.0 - p) * (1.0 - targets)
    loss = bce * (1.0 - pt) ** gamma
    if alpha is not None:
        loss = loss * (alpha * targets + (1.0 - alpha) * (1.0 - targets))
    valid = (states != IGNORE).unsqueeze(1).to(loss.dtype)
    normalizer = max(1, assignment.positive_count)
    return (loss * valid).sum() / normalizer


def loc_loss(delta_predictions: torch.Tensor, assignment: TargetAssignment) -> torch.Tensor:
    """Smooth-L1 between predicted and target deltas over positive anchors,
    normalized by the positive count (floor 1)."""
    if delta_predictions.ndim != 2 or delta_predictions.shape[1] != 4:
        raise ValueError(f"expected (anchors, 4) deltas, got {tuple(delta_predictions.shape)}")
    if len(assignment.states) != delta_predictions.shape[0]:
        raise ValueError("assignment and delta predictions disagree on anchor count")
    pos = np.nonzero(assignment.states == POSITIVE)[0]
    if not len(pos):
        return delta_predictions.sum() * 0.0
    pred = delta_predictions[torch.from_numpy(pos)]
    target = torch.from_numpy(assignment.deltas[pos]).to(pred.dtype)
    diff = (pred - target).abs()
    per_coord = torch.where(diff < 1.0, 0.5 * diff * diff, diff - 0.5)
    return per_coord.sum() / max(1, len(pos))


def flatten_output(output: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(B, 67, H, W) or (67, H, W) -> ((B*H*W, 4) deltas, (B*H*W, 63) logits)
    in row-major anchor order matching AnchorGrid.boxes()."""
    if output.ndim == 3:
        output = output.unsqueeze(0)
    if output.ndim != 4 or output.shape[1] != OUT_CHANNELS:
        raise ValueError(f"expected ({OUT_CHANNELS}, H, W) output, got {tuple(output.shape)}")
    flat = output.permute(0, 2, 3, 1).reshape(-1, OUT_CHANNELS)
    return flat[:, :4], flat[:, 4:]


def total_loss(
    output: torch.Tensor,
    assignment: TargetAssignment,
    lambda_cls: float,
    gamma: float = 2.0,
    alpha: float | None = 0.25,
) -> LossValue:
    """Combined loss ``loc + lambda_cls * cls`` over a (possibly batched) output."""
    deltas, logits = flatten_output(output)
    if deltas.shape[0] != len(assignment.states):
        raise ValueError(
            f"output covers {deltas.shape[0]} anchors, assignment {len(assignment.states)}"
        )
    loc = loc_loss(deltas, assignment)
    cls = focal_loss(logits, assignment, gamma=gamma, alpha=alpha)
    return LossValue(
        total=loc + lambda_cls * cls,
        loc_component=loc,
        cls_component=cls,
        lambda_cls=lambda_cls,
    )


def decode_output(
    output: torch.Tensor | np.ndarray,
    grid: AnchorGrid,
    score_threshold: float = 0.5,
    nms_iou: float = 0.02,
) -> list[Detection]:
    """Raw output map -> thresholded, NMS-filtered detections.

    Per anchor the class is the argmax of the 63 sigmoid scores and the score
    is that max.
    """
    if isinstance(output, torch.Tensor):
        arr = output.detach().cpu().numpy()
    else:
        arr = np.asarray(output)
    if arr.ndim != 3 or arr.shape[0] != OUT_CHANNELS:
        raise ValueError(f"expected ({OUT_CHANNELS}, H, W) output, got {arr.shape}")
    if arr.shape[1] != grid.grid_height or arr.shape[2] != grid.grid_width:
        raise ValueError(
            f"output grid {arr.shape[1:]} does not match anchor grid "
            f"({grid.grid_height}, {grid.grid_width})"
        )
    flat = arr.reshape(OUT_CHANNELS, -1).T  # (N, 67) row-major anchors
    logits = flat[:, 4:]
    best = logits.argmax(axis=1)
    best_logit = logits[np.arange(len(logits)), best]
    scores = 1.0 / (1.0 + np.exp(-best_logit.astype(np.float64)))
    keep = scores >= score_threshold
    if not keep.any():
        return []
    anchor_arr = grid.boxes()[keep]
    box_arr = decode_deltas(anchor_arr, flat[keep, :4])
    detections = [
        Detection(Box(*row), int(cls) + 1, float(score))
        for row, cls, score in zip(box_arr, best[keep], scores[keep])
    ]
    return nms(detections, nms_iou)


def image_to_tensor(normalized: np.ndarray) -> torch.Tensor:
    """Normalized (H, W) or (H, W, C) image -> (1, C, H, W) float32 tensor."""
    arr = np.asarray(normalized, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)[None]
    else:
        raise ValueError(f"expected 2D or 3D image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr))


def forward_page(net: BrailleNet, image: np.ndarray) -> tuple[np.ndarray, AnchorGrid]:
    """Pad to /16, normalize and forward one page; returns the raw output map
    and the matching anchor grid (boxes stay in input coordinates)."""
    config = net.config
    if config.in_channels == 1:
        image = to_grayscale(image)
    elif image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    padded = pad_to_multiple(image, 16)
    tensor = image_to_tensor(normalize(padded))
    was_training = net.training
    net.eval()
    with torch.no_grad():
        output = net(tensor)[0].numpy()
    if was_training:
        net.train()
    grid = AnchorGrid(
        padded.shape[1], padded.shape[0], config.anchor_width, config.anchor_height
    )
    return output, grid


def detect_page(
    net: BrailleNet,
    image: np.ndarray,
    score_threshold: float | None = None,
    nms_iou: float | None = None,
) -> list[Detection]:
    """Full-page inference at native resolution: pad to /16, normalize,
    forward, decode.  Returned boxes are in the input image's coordinates."""
    config = net.config
    output, grid = forward_page(net, image)
    return decode_output(
        output,
        grid,
        score_threshold if score_threshold is not None else config.score_threshold,
        nms_iou if nms_iou is not None else config.nms_iou,
    )
