"""Desk-scale supervised training: SGD with classical momentum, a
warmup-then-decay learning-rate schedule, pad-crop/flip augmentation, and
per-pixel feature standardisation.

Training is deterministic given the config seed: data order, augmentation
draws, and every update follow a single seeded generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import backprop
from .datasets import Dataset, StandardizationStats
from .errors import ShapeMismatchError, TrainingDivergedError
from .graph import ModelGraph
from .ops import DTYPE

BN_RUNNING_MOMENTUM = 0.1
STD_FLOOR = 1e-6


@dataclass
class TrainConfig:
    momentum: float = 0.9
    warmup_lr: float = 0.01
    main_lr: float = 0.1
    warmup_epochs: int = 3
    decay_epochs: tuple = (20, 25)
    decay_factor: float = 10.0
    total_epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    augment: bool = True
    augment_pad: int = 4
    flip_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.warmup_lr <= 0 or self.main_lr <= 0:
            raise ValueError("learning rates must be positive")
        de = tuple(self.decay_epochs)
        if any(b <= a for a, b in zip(de, de[1:])) or any(d >= self.total_epochs for d in de):
            raise ValueError("decay_epochs must be strictly increasing and < total_epochs")
        self.decay_epochs = de


# The paper-scale recipe: warm up at 0.01 for 3 epochs, run at 0.1, divide by
# 10 after epochs 83 and 93, stop at 113.
FULL_SCHEDULE = dict(
    warmup_lr=0.01, main_lr=0.1, warmup_epochs=3,
    decay_epochs=(83, 93), decay_factor=10.0, total_epochs=113,
)


@dataclass
class OptimizerState:
    velocities: dict = field(default_factory=dict)
    epoch: int = 0
    lr: float = 0.0


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState,
                      lr: float, momentum: float) -> OptimizerState:
    """Classical (heavy-ball) momentum: v <- m*v - lr*g; p <- p + v.

    `params` and `grads` map keys to arrays; parameters are updated in place.
    """
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeMismatchError("param", p.shape, g.shape, f"sgd step {key}")
        v = state.velocities.get(key)
        if v is None:
            v = np.zeros_like(p)
        v = (momentum * v - lr * g).astype(p.dtype)
        state.velocities[key] = v
        p += v
    state.lr = lr
    return state


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Warmup rate during warmup; afterwards main_lr divided by decay_factor
    once per decay epoch already passed."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_lr
    passed = sum(1 for d in cfg.decay_epochs if epoch > d)
    return cfg.main_lr / cfg.decay_factor ** passed


def augment(image: np.ndarray, rng, pad: int = 4, flip_prob: float = 0.5) -> np.ndarray:
    """Pad `pad` pixels on each side, crop a random window of the original
    size (uniform over the (2*pad+1)^2 offsets), flip horizontally with
    probability `flip_prob`."""
    c, h, w = image.shape
    if h != w:
        raise ShapeMismatchError("spatial", "square image", (h, w), "augment")
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    oy = int(rng.integers(0, 2 * pad + 1))
    ox = int(rng.integers(0, 2 * pad + 1))
    out = padded[:, oy:oy + h, ox:ox + w]
    if rng.random() < flip_prob:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out, dtype=DTYPE)


def standardize(dataset: Dataset) -> tuple[Dataset, StandardizationStats]:
    """Per-pixel-per-channel zero mean / unit std over the dataset, with an
    epsilon floor guarding constant features. Returns the transformed dataset
    and the statistics (tagged with the dataset's split) for reuse on
    held-out data."""
    if len(dataset) == 0:
        raise ValueError("cannot standardize an empty dataset")
    mean = dataset.images.mean(axis=0, dtype=np.float64)
    std = dataset.images.std(axis=0, dtype=np.float64)
    std = np.maximum(std, STD_FLOOR)
    stats = StandardizationStats(
        mean=mean.astype(DTYPE), std=std.astype(DTYPE), source_split=dataset.split
    )
    return apply_standardization(dataset, stats), stats


def apply_standardization(dataset: Dataset, stats: StandardizationStats) -> Dataset:
    images = ((dataset.images - stats.mean) / stats.std).astype(DTYPE)
    return replace(dataset, images=images, stats=stats)


def evaluate_ann(g: ModelGraph, dataset: Dataset, batch_size: int = 256) -> float:
    """Classification accuracy with inference-mode (running-stats) batch norm."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start:start + batch_size]
        logits = g.forward(xb)
        correct += int((logits.argmax(axis=1) == dataset.labels[start:start + batch_size]).sum())
    return correct / len(dataset)


def _trainable_params(g: ModelGraph) -> dict:
    params = {}
    for nid, node in g.nodes.items():
        if not node.trainable:
            continue
        for pname, arr in node.params.items():
            if node.kind.value == "batchnorm" and pname in ("mean", "var"):
                continue
            params[(nid, pname)] = arr
    return params


def train(g: ModelGraph, dataset: Dataset, cfg: TrainConfig,
          val_dataset: Dataset | None = None, log=None):
    """Train a copy of `g`; returns (trained graph, per-epoch history).

    History rows carry epoch, lr, train_loss, train_acc, val_acc. Raises
    TrainingDivergedError naming the epoch/batch if the loss goes non-finite.
    """
    g = g.copy()
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    history = []
    n = len(dataset)
    for epoch in range(cfg.total_epochs):
        lr = lr_at_epoch(cfg, epoch)
        perm = rng.permutation(n)
        losses = []
        correct = 0
        for batch_idx, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            if cfg.augment:
                xb = np.stack(
                    [augment(im, rng, cfg.augment_pad, cfg.flip_prob) for im in xb]
                )
            loss, logits, grads, bn_stats = backprop.loss_and_grads(g, xb, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, batch_idx, loss)
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == yb).sum())
            for nid, (bmean, bvar) in bn_stats.items():
                node = g.nodes[nid]
                m = BN_RUNNING_MOMENTUM
                node.params["mean"] = ((1 - m) * node.params["mean"] + m * bmean).astype(DTYPE)
                node.params["var"] = ((1 - m) * node.params["var"] + m * bvar).astype(DTYPE)
            flat_grads = {
                (nid, pname): arr
                for nid, pgrads in grads.items()
                for pname, arr in pgrads.items()
            }
            params = {k: v for k, v in _trainable_params(g).items() if k in flat_grads}
            sgd_momentum_step(params, {k: flat_grads[k] for k in params}, state,
                              lr, cfg.momentum)
        state.epoch = epoch
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "train_acc": correct / n if n else float("nan"),
            "val_acc": evaluate_ann(g, val_dataset) if val_dataset is not None else None,
        }
        history.append(row)
        if log is not None:
            log(row)
    return g, history
