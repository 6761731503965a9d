"""End-to-end training of the hierarchical network."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import ops
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .errors import ConfigError, ImageDecodeError, NumericError
from .imageio import IMAGE_SUFFIXES, ImageBuffer, decode_image, image_size, to_tensor
from .lossnet import Criterion, LossNetwork, LossWeights, StyleTargets, load_weights, precompute_style_targets
from .network import MTNetwork, NetworkWidths, ScalePlan, mt_forward, subnet_inputs
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "lr", "ls1", "ls2", "ls3", "lh")


# ---------------------------------------------------------------------------
# data


class Dataset(Protocol):
    def __len__(self) -> int: ...

    def sample(self, iteration: int) -> Tensor: ...


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class DatasetIndex:
    """Images admitted by the size filter, in sorted path order.

    ``sample(i)`` walks a fresh seeded permutation every epoch.
    """

    paths: list[Path]
    size: int
    seed: int = 0
    crop: str = "center"

    def __len__(self) -> int:
        return len(self.paths)

    def order(self, epoch: int = 0) -> list[Path]:
        return [self.paths[i] for i in epoch_order(len(self.paths), self.seed, epoch)]

    def path_at(self, iteration: int) -> Path:
        n = len(self.paths)
        epoch, pos = divmod(iteration, n)
        return self.paths[epoch_order(n, self.seed, epoch)[pos]]

    def sample(self, iteration: int) -> Tensor:
        rng = np.random.default_rng([self.seed, iteration, 1]) if self.crop == "random" else None
        return prepare_sample(decode_image(self.path_at(iteration)), self.size, self.crop, rng)


@dataclass
class FixedImages:
    """In-memory dataset cycling over already prepared tensors."""

    images: list[Tensor]

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, iteration: int) -> Tensor:
        return self.images[iteration % len(self.images)]


def ingest_dataset(root, min_dim: int = 480, size: int = 512, seed: int = 0, crop: str = "center") -> DatasetIndex:
    """Recursively index images whose width and height are both >= ``min_dim``."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"content directory not found: {root}")
    admitted, rejected = [], 0
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            w, h = image_size(path)
        except ImageDecodeError as exc:
            log.warning("skipping %s: %s", path, exc)
            rejected += 1
            continue
        if w >= min_dim and h >= min_dim:
            admitted.append(path)
        else:
            rejected += 1
    log.info("dataset %s: %d images admitted, %d rejected (min_dim=%d)", root, len(admitted), rejected, min_dim)
    if not admitted:
        raise ConfigError(f"no images of at least {min_dim}x{min_dim} under {root}")
    return DatasetIndex(admitted, size, seed, crop)


def prepare_sample(image: ImageBuffer, size: int, crop: str = "center", rng: np.random.Generator | None = None) -> Tensor:
    """Square crop (centred unless ``crop='random'``) then bilinear resize to ``size``."""
    h, w = image.height, image.width
    side = min(h, w)
    if crop == "random":
        rng = rng or np.random.default_rng()
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
    else:
        top, left = (h - side) // 2, (w - side) // 2
    square = ImageBuffer(image.pixels[top : top + side, left : left + side])
    t = to_tensor(square)
    if side != size:
        t = ops.bilinear_resize(t, size, size)
    return t


# ---------------------------------------------------------------------------
# optimization


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Step decay ``lr * decay ** (iteration // step)``, evaluated in decimal
    so the configured decimal values come out as their nearest doubles."""
    n = iteration // config.lr_step
    return float(Decimal(repr(config.lr)) * Decimal(repr(config.lr_decay)) ** n)


class Adam:
    """Bias-corrected Adam with per-parameter moment arrays."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad_or_zeros()
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self, names: Sequence[str]) -> dict[str, np.ndarray]:
        out = {}
        for name, m in zip(names, self.m):
            out[f"m:{name}"] = m
        for name, v in zip(names, self.v):
            out[f"v:{name}"] = v
        return out

    def load_state(self, names: Sequence[str], step: int, moments: dict[str, np.ndarray]) -> None:
        try:
            self.m = [np.array(moments[f"m:{n}"], dtype=p.dtype) for n, p in zip(names, self.params)]
            self.v = [np.array(moments[f"v:{n}"], dtype=p.dtype) for n, p in zip(names, self.params)]
        except KeyError as exc:
            raise ConfigError(f"optimizer state is missing {exc.args[0]}") from None
        for p, m in zip(self.params, self.m):
            if m.shape != p.shape:
                raise ConfigError(f"optimizer moment shape {m.shape} does not match parameter {p.shape}")
        self.step_count = step


# ---------------------------------------------------------------------------
# one iteration


def content_targets_for(x: Tensor, outputs: Sequence[Tensor], plan: ScalePlan, mode: str = "input") -> list[Tensor]:
    """Detached content targets per level.

    ``mode='input'``: the literal input of each subnet. ``mode='original'``:
    the network input rescaled to each level's size.
    """
    if mode == "input":
        return subnet_inputs(x, outputs, plan)
    if mode == "original":
        return [ops.bilinear_resize(x.detach(), s, s) if x.shape[2:] != (s, s) else x.detach() for s in plan.sizes[: len(outputs)]]
    raise ConfigError(f"unknown content target mode {mode!r}")


@dataclass
class StepResult:
    iteration: int
    lr: float
    level_losses: list[float]
    total: float


def hierarchical_objective(
    net: MTNetwork, x: Tensor, criterion: Criterion, targets: StyleTargets, config: TrainConfig
) -> tuple[Tensor, list[float]]:
    """Forward on the training plan and build L_H (averaged over the batch)."""
    plan = ScalePlan.train(config.train_scales)
    n = x.shape[0]
    total, levels = None, np.zeros(len(targets.levels))
    for i in range(n):
        xi = x if n == 1 else Tensor(x.data[i : i + 1], dtype=x.dtype)
        outputs = mt_forward(net, xi, plan)
        yc = content_targets_for(xi, outputs, plan, config.content_target)
        lh, ls = criterion.hierarchical_loss(outputs, yc, targets)
        levels += np.asarray(ls) / n
        lh = lh if n == 1 else ops.scalar_mul(lh, 1.0 / n)
        total = lh if total is None else ops.add(total, lh)
    return total, [float(v) for v in levels]


def training_step(
    net: MTNetwork,
    x: Tensor,
    criterion: Criterion,
    targets: StyleTargets,
    config: TrainConfig,
    adam: Adam,
    iteration: int,
) -> StepResult:
    """Forward, hierarchical loss, backward, one Adam step; gradients cleared after."""
    lh, levels = hierarchical_objective(net, x, criterion, targets, config)
    value = lh.item()
    if not np.isfinite(value) or not all(np.isfinite(levels)):
        raise NumericError(f"non-finite loss at iteration {iteration}: L_H={value}, per-level L_S={levels}")
    backward(lh)
    lr = lr_at(iteration, config)
    adam.step(lr)
    adam.zero_grad()
    return StepResult(iteration, lr, levels, value)


# ---------------------------------------------------------------------------
# the loop


def build_loss_network(config: TrainConfig) -> LossNetwork:
    layers = [config.content_layer, *config.texture_layers]
    if config.loss_weights:
        lossnet = load_weights(config.loss_weights, "vgg19", pooling=config.pooling)
    else:
        lossnet = LossNetwork.tiny(config.loss_seed, pooling=config.pooling)
    return lossnet.truncated(layers)


def build_criterion(config: TrainConfig, lossnet: LossNetwork | None = None) -> Criterion:
    lossnet = lossnet or build_loss_network(config)
    weights = LossWeights(config.alpha, config.beta, tuple(config.lambdas))
    return Criterion(lossnet, config.content_layer, config.texture_layers, weights)


class Trainer:
    """Runs :func:`training_step` over a dataset with logging and checkpoints."""

    def __init__(
        self,
        config: TrainConfig,
        dataset: Dataset,
        styles: Sequence[Tensor],
        lossnet: LossNetwork | None = None,
        resume: Checkpoint | None = None,
    ):
        self.config = config
        self.dataset = dataset
        self.criterion = build_criterion(config, lossnet)
        self.targets = precompute_style_targets(
            self.criterion.lossnet,
            list(styles),
            config.style_scales,
            config.texture_layers,
            config.style_assignment or None,
        )
        widths = NetworkWidths(divisor=config.width_divisor)
        self.net = MTNetwork(widths, seed=config.seed)
        self.names = [n for n, _ in self.net.named_parameters()]
        self.adam = Adam(self.net.parameters())
        self.iteration = 0
        if resume is not None:
            if resume.widths != widths:
                raise ConfigError(f"checkpoint widths {resume.widths} do not match config widths {widths}")
            self.net.load_state_dict(resume.params)
            self.net.requires_grad_(True)
            self.adam = Adam(self.net.parameters())
            if resume.adam_moments is not None:
                self.adam.load_state(self.names, resume.adam_step or 0, resume.adam_moments)
            self.iteration = resume.iteration

    def checkpoint(self, with_optimizer: bool = True) -> Checkpoint:
        return Checkpoint(
            self.net.widths,
            self.config,
            self.iteration,
            {n: p.data for n, p in zip(self.names, self.net.parameters())},
            self.adam.step_count if with_optimizer else None,
            self.adam.state(self.names) if with_optimizer else None,
        )

    def step(self) -> StepResult:
        x = self.dataset.sample(self.iteration)
        result = training_step(self.net, x, self.criterion, self.targets, self.config, self.adam, self.iteration)
        self.iteration += 1
        return result

    def run(
        self,
        until: int | None = None,
        checkpoint_path=None,
        log_path=None,
        on_step: Callable[[StepResult], None] | None = None,
    ) -> list[StepResult]:
        """Train up to iteration ``until`` (default: ``config.iterations``)."""
        until = self.config.iterations if until is None else until
        history: list[StepResult] = []
        writer, fh = None, None
        if log_path is not None:
            log_path = Path(log_path)
            fresh = self.iteration == 0 or not log_path.exists()
            fh = open(log_path, "w" if fresh else "a", newline="")
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(LOG_HEADER)
        try:
            while self.iteration < until:
                res = self.step()
                history.append(res)
                if writer is not None:
                    writer.writerow([res.iteration, repr(res.lr), *(repr(float(v)) for v in res.level_losses), repr(res.total)])
                if checkpoint_path is not None and (self.iteration % self.config.checkpoint_every == 0 or self.iteration == until):
                    save_checkpoint(checkpoint_path, self.checkpoint())
                if on_step is not None:
                    on_step(res)
        finally:
            if fh is not None:
                fh.close()
        return history


def train(
    config: TrainConfig,
    dataset: Dataset,
    styles: Sequence[Tensor],
    checkpoint_path=None,
    log_path=None,
    resume: Checkpoint | None = None,
) -> Trainer:
    trainer = Trainer(config, dataset, styles, resume=resume)
    trainer.run(checkpoint_path=checkpoint_path, log_path=log_path)
    return trainer


__all__ = [
    "Adam",
    "DatasetIndex",
    "FixedImages",
    "StepResult",
    "Trainer",
    "content_targets_for",
    "hierarchical_objective",
    "ingest_dataset",
    "lr_at",
    "prepare_sample",
    "train",
    "training_step",
]
