"""The training loop: augmentation sampling, loss staging, plateau schedule.

Training runs in three stages with a fixed loss weight per stage (default
1 -> 100 -> 1000); during the last stage the learning rate follows a
reduce-on-plateau rule driven by held-out character-level F1 (divide by 10
after `plateau_patience` evaluations without improvement).

Every random choice is a pure function of (seed, counter): augmentation
draws from stream (seed, 1, sample_index) and epoch shuffling from
(seed, 2, epoch), so runs are reproducible bit-for-bit in single-threaded
mode and checkpoint resume continues the identical run.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import codec
from .datasets import PageAnnotation
from .detector import TargetAssignment, assign_targets, detect_page, image_to_tensor, total_loss
from .evaluation import EvalReport, evaluate_corpus
from .geometry import AnchorGrid, Box
from .imaging import GeometricTransform, normalize, to_grayscale, transform_and_crop
from .network import BrailleNet, save_checkpoint, load_checkpoint

IMPROVE_EPS = 1e-5

Page = tuple[PageAnnotation, np.ndarray]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message carries the offending batch and parts."""


@dataclass(frozen=True)
class AugmentationPolicy:
    """Per-sample augmentation ranges; samples always stay inside them."""

    width_range: tuple[float, float] = (550.0, 1150.0)
    vertical_stretch: float = 0.10
    max_rotation_deg: float = 5.0
    mirror_prob: float = 0.5
    crop_size: int = 416

    def __post_init__(self) -> None:
        lo, hi = self.width_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad width range: {self.width_range}")
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ValueError(f"mirror probability out of range: {self.mirror_prob}")
        if self.crop_size % 16:
            raise ValueError(f"crop size must be a multiple of 16: {self.crop_size}")

    @classmethod
    def desk(cls) -> "AugmentationPolicy":
        return cls(width_range=(460.0, 580.0))


@dataclass(frozen=True)
class TrainSchedule:
    """Optimizer settings and the staged loss-weight plan."""

    learning_rate: float = 1e-4
    batch_size: int = 24
    stage_lambdas: tuple[float, ...] = (1.0, 100.0, 1000.0)
    stage_epochs: tuple[int, ...] = (500, 500, 500)
    plateau_patience: int = 500
    plateau_factor: float = 10.0
    crops_per_image: int = 1
    eval_every: int = 1
    checkpoint_every: int = 0  # 0: only best + final

    def __post_init__(self) -> None:
        if len(self.stage_lambdas) != len(self.stage_epochs):
            raise ValueError("stage_lambdas and stage_epochs must have equal length")
        if any(e < 1 for e in self.stage_epochs):
            raise ValueError("stage lengths must be positive")
        if self.plateau_factor <= 1.0:
            raise ValueError("plateau factor must exceed 1")

    @property
    def total_epochs(self) -> int:
        return sum(self.stage_epochs)

    def stage_for_epoch(self, epoch: int) -> int:
        bound = 0
        for i, length in enumerate(self.stage_epochs):
            bound += length
            if epoch < bound:
                return i
        return len(self.stage_epochs) - 1

    def lambda_for_epoch(self, epoch: int) -> float:
        return self.stage_lambdas[self.stage_for_epoch(epoch)]

    @classmethod
    def desk(cls) -> "TrainSchedule":
        # Short first stage: box regression converges within ~15 epochs at desk
        # scale, so most of the budget goes to the classification-heavy stages.
        return cls(
            learning_rate=1e-3,
            batch_size=8,
            stage_epochs=(20, 50, 50),
            plateau_patience=6,
            plateau_factor=10.0,
            crops_per_image=2,
            eval_every=2,
            checkpoint_every=0,
        )


def describe_stages(schedule: TrainSchedule) -> str:
    parts = []
    for i, (lam, epochs) in enumerate(zip(schedule.stage_lambdas, schedule.stage_epochs), 1):
        line = f"stage {i}: lambda_cls={lam:g} for {epochs} epochs"
        if i == len(schedule.stage_lambdas):
            line += (
                f" (reduce-on-plateau: lr/{schedule.plateau_factor:g} after "
                f"{schedule.plateau_patience} evaluations without F1 improvement)"
            )
        parts.append(line)
    return "\n".join(parts)


@dataclass
class TrainState:
    epoch: int = 0
    best_f1: float = float("-inf")
    epochs_since_improve: int = 0
    learning_rate: float = 1e-4
    lambda_cls: float = 1.0
    sample_counter: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainState":
        return cls(**data)


def plateau_step(state: TrainState, current_f1: float, schedule: TrainSchedule) -> TrainState:
    """Reduce-on-plateau bookkeeping: reset patience on improvement, divide the
    learning rate by the plateau factor once patience is exhausted."""
    if not 0.0 <= current_f1 <= 1.0:
        raise ValueError(f"F1 out of range: {current_f1}")
    if current_f1 >= state.best_f1 + IMPROVE_EPS:
        state.best_f1 = current_f1
        state.epochs_since_improve = 0
    else:
        state.epochs_since_improve += 1
        if state.epochs_since_improve >= schedule.plateau_patience:
            state.learning_rate /= schedule.plateau_factor
            state.epochs_since_improve = 0
    return state


def sample_augmentation(
    policy: AugmentationPolicy,
    image_width: int,
    image_height: int,
    seed: int,
    step: int,
) -> tuple[GeometricTransform, tuple[int, int]]:
    """Deterministic augmentation draw for one sample: a transform (carrying
    the mirror flag) and the crop origin in transformed coordinates."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, step]))
    width = rng.uniform(*policy.width_range)
    scale_x = width / image_width
    scale_y = scale_x * (1.0 + rng.uniform(-policy.vertical_stretch, policy.vertical_stretch))
    rotation = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg)
    mirrored = bool(rng.random() < policy.mirror_prob)
    transform = GeometricTransform(scale_x, scale_y, rotation, mirrored)
    out_w, out_h = transform.output_size(image_width, image_height)
    ox = int(rng.integers(0, max(1, out_w - policy.crop_size + 1)))
    oy = int(rng.integers(0, max(1, out_h - policy.crop_size + 1)))
    return transform, (ox, oy)


def augment_example(
    image: np.ndarray,
    annotation: PageAnnotation,
    policy: AugmentationPolicy,
    seed: int,
    step: int,
) -> tuple[np.ndarray, list[Box], list[int]]:
    """One augmented training crop with its surviving boxes and (possibly
    mirrored) class labels."""
    transform, origin = sample_augmentation(
        policy, annotation.width, annotation.height, seed, step
    )
    crop_img, boxes, indices = transform_and_crop(
        image, transform, origin, policy.crop_size, policy.crop_size, annotation.boxes()
    )
    all_classes = annotation.class_ids()
    classes = [all_classes[i] for i in indices]
    if transform.mirror:
        classes = [codec.mirror(c) for c in classes]
    return crop_img, boxes, classes


@dataclass
class EpochStats:
    epoch: int
    loss: float
    loc: float
    cls: float
    lambda_cls: float
    learning_rate: float
    batches: int


class Trainer:
    """Owns the network, optimizer and schedule for one training run."""

    def __init__(
        self,
        net: BrailleNet,
        schedule: TrainSchedule,
        policy: AugmentationPolicy,
        train_pages: Sequence[Page],
        test_pages: Sequence[Page] = (),
        seed: int = 0,
        jobs: int = 1,
        out_dir: str | Path | None = None,
    ):
        if not train_pages:
            raise ValueError("training set is empty")
        if seed < 0:
            raise ValueError("seed must be non-negative")
        if jobs == 1:
            torch.set_num_threads(1)
        self.net = net
        self.schedule = schedule
        self.policy = policy
        self.seed = seed
        self.train_pages = [self._prepare(page) for page in train_pages]
        self.test_pages = [self._prepare(page) for page in test_pages]
        self.state = TrainState(
            learning_rate=schedule.learning_rate, lambda_cls=schedule.stage_lambdas[0]
        )
        self.optimizer = torch.optim.Adam(net.parameters(), lr=schedule.learning_rate)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self._metrics_path = self.out_dir / "metrics.csv" if self.out_dir else None

    def _prepare(self, page: Page) -> Page:
        annotation, image = page
        if self.net.config.in_channels == 1:
            image = to_grayscale(image)
        return annotation, image

    # -- single epoch ------------------------------------------------------

    def train_epoch(self) -> EpochStats:
        """One pass over shuffled augmented crops with the stage's loss weight."""
        schedule = self.schedule
        state = self.state
        state.lambda_cls = schedule.lambda_for_epoch(state.epoch)
        config = self.net.config
        crop = self.policy.crop_size
        grid = AnchorGrid(crop, crop, config.anchor_width, config.anchor_height)

        samples = [
            page_index
            for page_index in range(len(self.train_pages))
            for _ in range(schedule.crops_per_image)
        ]
        shuffle_rng = np.random.default_rng(np.random.SeedSequence([self.seed, 2, state.epoch]))
        order = shuffle_rng.permutation(len(samples))

        self.net.train()
        total = loc = cls = 0.0
        batches = 0
        for start in range(0, len(order), schedule.batch_size):
            batch_ids = order[start : start + schedule.batch_size]
            crops = []
            assignments = []
            for sample_pos in batch_ids:
                annotation, image = self.train_pages[samples[sample_pos]]
                crop_img, boxes, classes = augment_example(
                    image, annotation, self.policy, self.seed, state.sample_counter
                )
                state.sample_counter += 1
                crops.append(normalize(crop_img))
                assignments.append(
                    assign_targets(grid, boxes, classes, config.pos_iou, config.neg_iou)
                )
            batch = torch.cat([image_to_tensor(c) for c in crops], dim=0)
            assignment = TargetAssignment.concat(assignments)

            output = self.net(batch)
            loss = total_loss(
                output,
                assignment,
                state.lambda_cls,
                gamma=config.focal_gamma,
                alpha=config.focal_alpha,
            )
            if not torch.isfinite(loss.total):
                raise TrainingDiverged(
                    f"epoch {state.epoch}, batch {batches}: non-finite loss "
                    f"(total={loss.total.item()}, loc={loss.loc_component.item()}, "
                    f"cls={loss.cls_component.item()}, lambda={state.lambda_cls})"
                )
            self.optimizer.zero_grad()
            loss.total.backward()
            self.optimizer.step()

            total += loss.total.item()
            loc += loss.loc_component.item()
            cls += loss.cls_component.item()
            batches += 1

        state.epoch += 1
        return EpochStats(
            epoch=state.epoch - 1,
            loss=total / max(1, batches),
            loc=loc / max(1, batches),
            cls=cls / max(1, batches),
            lambda_cls=state.lambda_cls,
            learning_rate=self.state.learning_rate,
            batches=batches,
        )

    # -- evaluation --------------------------------------------------------

    def evaluate(self, pages: Sequence[Page] | None = None) -> EvalReport:
        pages = self.test_pages if pages is None else pages
        detections = {}
        elapsed = 0.0
        for annotation, image in pages:
            start = time.perf_counter()
            detections[annotation.image] = detect_page(self.net, image)
            elapsed += time.perf_counter() - start
        truths = [annotation for annotation, _ in pages]
        spi = elapsed / len(pages) if pages else None
        return evaluate_corpus(detections, truths, seconds_per_image=spi)

    # -- checkpointing -----------------------------------------------------

    def save(self, path: str | Path) -> None:
        extras: dict[str, np.ndarray] = {}
        adam_step = 0
        for name, param in self.net.named_parameters():
            opt_state = self.optimizer.state.get(param)
            if not opt_state:
                continue
            extras[f"opt.{name}.exp_avg"] = opt_state["exp_avg"].detach().numpy()
            extras[f"opt.{name}.exp_avg_sq"] = opt_state["exp_avg_sq"].detach().numpy()
            adam_step = int(opt_state["step"])
        meta = {
            "train_state": self.state.to_dict(),
            "schedule": dataclasses.asdict(self.schedule),
            "policy": dataclasses.asdict(self.policy),
            "seed": self.seed,
            "adam_step": adam_step,
        }
        save_checkpoint(path, self.net, extra_tensors=extras, meta=meta)

    @classmethod
    def resume(
        cls,
        path: str | Path,
        train_pages: Sequence[Page],
        test_pages: Sequence[Page] = (),
        jobs: int = 1,
        out_dir: str | Path | None = None,
    ) -> "Trainer":
        """Rebuild a trainer from a training checkpoint; continuing reproduces
        the uninterrupted run exactly."""
        net, extras, meta = load_checkpoint(path)
        schedule = TrainSchedule(**_tuplify(meta["schedule"], ("stage_lambdas", "stage_epochs")))
        policy = AugmentationPolicy(**_tuplify(meta["policy"], ("width_range",)))
        trainer = cls(
            net,
            schedule,
            policy,
            train_pages,
            test_pages,
            seed=int(meta["seed"]),
            jobs=jobs,
            out_dir=out_dir,
        )
        trainer.state = TrainState.from_dict(meta["train_state"])
        for group in trainer.optimizer.param_groups:
            group["lr"] = trainer.state.learning_rate
        adam_step = int(meta.get("adam_step", 0))
        if adam_step:
            for name, param in trainer.net.named_parameters():
                m = extras.get(f"opt.{name}.exp_avg")
                v = extras.get(f"opt.{name}.exp_avg_sq")
                if m is None or v is None:
                    continue
                trainer.optimizer.state[param] = {
                    "step": torch.tensor(float(adam_step)),
                    "exp_avg": torch.from_numpy(m.copy()),
                    "exp_avg_sq": torch.from_numpy(v.copy()),
                }
        return trainer

    # -- full loop ---------------------------------------------------------

    def run(self, progress: Callable[[str], None] | None = None) -> TrainState:
        """Train to the end of the stage plan with logging and checkpoints."""
        schedule = self.schedule
        final_stage = len(schedule.stage_epochs) - 1
        say = progress or (lambda msg: None)
        while self.state.epoch < schedule.total_epochs:
            stats = self.train_epoch()
            epoch = stats.epoch
            f1: float | None = None
            last_epoch = self.state.epoch >= schedule.total_epochs
            if self.test_pages and (
                (epoch + 1) % schedule.eval_every == 0 or last_epoch
            ):
                report = self.evaluate()
                f1 = report.char_prf[2]
                improved = f1 >= self.state.best_f1 + IMPROVE_EPS
                if schedule.stage_for_epoch(epoch) == final_stage:
                    plateau_step(self.state, f1, schedule)
                    for group in self.optimizer.param_groups:
                        group["lr"] = self.state.learning_rate
                elif improved:
                    self.state.best_f1 = f1
                    self.state.epochs_since_improve = 0
                if improved and self.out_dir is not None:
                    self.save(self.out_dir / "best.ckpt")
            self._log_epoch(stats, f1)
            say(
                f"epoch {epoch}: loss={stats.loss:.4f} loc={stats.loc:.4f} "
                f"cls={stats.cls:.4f} lambda={stats.lambda_cls:g} lr={self.state.learning_rate:g}"
                + (f" test_f1={f1:.4f}" if f1 is not None else "")
            )
            if (
                self.out_dir is not None
                and schedule.checkpoint_every
                and (epoch + 1) % schedule.checkpoint_every == 0
            ):
                self.save(self.out_dir / f"epoch{epoch + 1:05d}.ckpt")
        if self.out_dir is not None:
            self.save(self.out_dir / "final.ckpt")
        return self.state

    def _log_epoch(self, stats: EpochStats, f1: float | None) -> None:
        if self._metrics_path is None:
            return
        new_file = not self._metrics_path.exists()
        with open(self._metrics_path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if new_file:
                writer.writerow(["epoch", "loss", "loc", "cls", "lambda", "lr", "test_f1"])
            writer.writerow(
                [
                    stats.epoch,
                    f"{stats.loss:.6f}",
                    f"{stats.loc:.6f}",
                    f"{stats.cls:.6f}",
                    f"{stats.lambda_cls:g}",
                    f"{self.state.learning_rate:g}",
                    "" if f1 is None else f"{f1:.6f}",
                ]
            )


def _tuplify(data: dict, keys: Sequence[str]) -> dict:
    out = dict(data)
    for key in keys:
        if key in out:
            out[key] = tuple(out[key])
    return out


def load_pages(
    annotations: Sequence[PageAnnotation], image_root: str | Path, in_channels: int = 1
) -> list[Page]:
    """Pair annotations with their images loaded from disk."""
    from .imaging import read_image

    root = Path(image_root)
    pages = []
    for annotation in annotations:
        path = Path(annotation.image)
        if not path.is_absolute():
            path = root / path
        pages.append((annotation, read_image(path, channels=in_channels)))
    return pages
