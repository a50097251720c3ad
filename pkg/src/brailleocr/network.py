"""The fully-convolutional detection network and its checkpoint container.

The network maps a normalized image whose sides are multiples of 16 to a
(4 + 63)-channel map with 1/16 the spatial resolution: channels 0..3 are the
anchor box deltas (tx, ty, tw, th), channels 4..66 the per-class logits.

The reference backbone is four stride-2 3x3 convolutions plus a 3x3 head.
Activations are SiLU (smooth, so finite-difference gradient checks stay
clean) and there are no normalization layers (spatial statistics would break
exact 16 px translation equivariance).  Any module with the same shape law
can be dropped in.

Checkpoints are a single file: an 8-byte magic, a little-endian uint64 header
length, a JSON header ``{"config", "tensors", "meta"}`` and the raw tensor
data as little-endian float32 in header order.  Loading rebuilds the network
from the stored config and validates every tensor shape.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .codec import CLASS_COUNT
from .geometry import CELL_SIZE, DEFAULT_ANCHOR_H, DEFAULT_ANCHOR_W, DEFAULT_NMS_IOU

OUT_CHANNELS = 4 + CLASS_COUNT

# Initial positive-class probability at every anchor; biases the class logits
# so the hugely class-imbalanced early training does not diverge.
CLASS_PRIOR = 0.01

_MAGIC = b"BRLCKPT1"


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, corrupt, or inconsistent with its config."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 128)
    neck: tuple[int, ...] = ()  # extra stride-1 blocks at cell resolution
    anchor_width: float = DEFAULT_ANCHOR_W
    anchor_height: float = DEFAULT_ANCHOR_H
    focal_gamma: float = 2.0
    focal_alpha: float | None = 0.25
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    score_threshold: float = 0.5
    nms_iou: float = DEFAULT_NMS_IOU

    def __post_init__(self) -> None:
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3: {self.in_channels}")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be four positive ints: {self.widths}")
        if any(w < 1 for w in self.neck):
            raise ValueError(f"neck widths must be positive: {self.neck}")
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise ValueError(
                f"need 0 <= neg_iou <= pos_iou <= 1: {self.neg_iou}, {self.pos_iou}"
            )
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError(f"score_threshold out of range: {self.score_threshold}")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou out of range: {self.nms_iou}")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["widths"] = list(self.widths)
        data["neck"] = list(self.neck)
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        kwargs = dict(data)
        kwargs["widths"] = tuple(int(w) for w in kwargs["widths"])
        kwargs["neck"] = tuple(int(w) for w in kwargs.get("neck", ()))
        if kwargs.get("focal_alpha") is not None:
            kwargs["focal_alpha"] = float(kwargs["focal_alpha"])
        return cls(**kwargs)


class BrailleNet(nn.Module):
    """Stride-16 backbone + one combined box/class head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        channels = config.in_channels
        for width in config.widths:
            layers += [nn.Conv2d(channels, width, 3, stride=2, padding=1), nn.SiLU()]
            channels = width
        for width in config.neck:
            layers += [nn.Conv2d(channels, width, 3, stride=1, padding=1), nn.SiLU()]
            channels = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(channels, OUT_CHANNELS, 3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}")
        if x.shape[2] % CELL_SIZE or x.shape[3] % CELL_SIZE:
            raise ValueError(f"input dims must be multiples of {CELL_SIZE}: {tuple(x.shape[2:])}")
        return self.head(self.body(x))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_parameters(net: BrailleNet, seed: int) -> None:
    """Deterministic init: He-normal body, N(0, 0.01) head, prior class bias."""
    rng = np.random.default_rng(seed)

    def fill_conv(conv: nn.Conv2d, std: float) -> None:
        shape = tuple(conv.weight.shape)
        values = rng.standard_normal(shape) * std
        with torch.no_grad():
            conv.weight.copy_(torch.from_numpy(values.astype(np.float32)))
            conv.bias.zero_()

    for module in net.body:
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            fill_conv(module, (2.0 / fan_in) ** 0.5)
    fill_conv(net.head, 0.01)
    with torch.no_grad():
        prior_bias = -float(np.log((1.0 - CLASS_PRIOR) / CLASS_PRIOR))
        net.head.bias[4:].fill_(prior_bias)


def build_network(config: ModelConfig, seed: int = 0) -> BrailleNet:
    net = BrailleNet(config)
    init_parameters(net, seed)
    return net


def build_reference_network(seed: int = 0, config: ModelConfig | None = None) -> BrailleNet:
    """The default small detector; deterministic in the seed."""
    return build_network(config or ModelConfig(), seed)


def save_checkpoint(
    path: str | Path,
    net: BrailleNet,
    extra_tensors: Mapping[str, np.ndarray] | None = None,
    meta: Mapping | None = None,
) -> None:
    """Write config + named float32 tensors (+ optional extras such as
    optimizer moments under distinct names)."""
    tensors: list[tuple[str, np.ndarray]] = [
        (name, param.detach().cpu().numpy()) for name, param in net.state_dict().items()
    ]
    for name, arr in (extra_tensors or {}).items():
        tensors.append((name, np.asarray(arr)))

    header = {
        "config": net.config.to_dict(),
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors],
        "meta": dict(meta or {}),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[BrailleNet, dict[str, np.ndarray], dict]:
    """Rebuild the network from a checkpoint, validating every tensor shape.

    Returns (network, extra tensors, meta).
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not blob.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    offset = len(_MAGIC)
    if len(blob) < offset + 8:
        raise CheckpointError(f"{path}: truncated header")
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        entries = [(e["name"], tuple(int(s) for s in e["shape"])) for e in header["tensors"]]
        meta = dict(header.get("meta", {}))
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    offset += header_len

    expected = sum(int(np.prod(shape, dtype=np.int64)) if shape else 1 for _, shape in entries)
    if len(blob) - offset != expected * 4:
        raise CheckpointError(
            f"{path}: data size {len(blob) - offset} does not match header ({expected * 4} bytes)"
        )

    tensors: dict[str, np.ndarray] = {}
    for name, shape in entries:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float32)
        offset += count * 4

    net = BrailleNet(config)
    state = net.state_dict()
    missing = [name for name in state if name not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing parameter tensors {missing}")
    loaded = {}
    for name, param in state.items():
        arr = tensors.pop(name)
        if tuple(arr.shape) != tuple(param.shape):
            raise CheckpointError(
                f"{path}: tensor {name} has shape {arr.shape}, expected {tuple(param.shape)}"
            )
        loaded[name] = torch.from_numpy(arr.copy())
    net.load_state_dict(loaded)
    return net, tensors, meta
