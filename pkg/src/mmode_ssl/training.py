"""Self-supervised pretraining and downstream (linear probe / fine-tune) training loops."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugmentationConfig, RngStream, augment_downstream
from .errors import ConfigError, DataError, NumericalError
from .mmode import BModeVideo, extract_ranked
from .model import (
    ModelParameters,
    classifier_logits,
    forward_features,
    forward_projector,
    leaves,
    to_input,
)
from .objectives import SslLossConfig, ssl_loss
from .pairs import PretrainSet, assemble_batch, epoch_batches

log = logging.getLogger(__name__)

MODES = ("pretrain", "linear", "finetune")
_DOWNSTREAM_SHUFFLE_KEY = 3
_SUBSET_KEY = 4


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "finetune"
    epochs: int = 40
    batch_size: int = 128
    lr0: float = 1e-4
    decay: float = 0.03
    decay_after: int = 15
    pretrain_lr: float = 1e-3
    seed: int = 0
    ssl: SslLossConfig = SslLossConfig()
    augmentation: AugmentationConfig = AugmentationConfig()
    label_fraction: float = 1.0
    max_rank: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (self.lr0 > 0 and self.pretrain_lr > 0):
            raise ConfigError("learning rates must be positive")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("label_fraction must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: ModelParameters
    epoch: int
    val_loss: float | None
    fingerprint: str
    history: list[dict] = field(default_factory=list)

    @property
    def best_val_loss(self) -> float | None:
        return self.val_loss


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ModelParameters, grads: dict[str, np.ndarray], lr: float) -> None:
        """Replace (never mutate) the arrays named in ``grads``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(name, 0.0) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params.arrays[name] = params.arrays[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def lr_schedule(epoch: int, lr0: float = 1e-4, decay: float = 0.03, decay_after: int = 15) -> float:
    """Constant through ``decay_after``, then multiplied by ``1 - decay`` every epoch (epochs are 1-based)."""
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    return lr0 * (1.0 - decay) ** max(0, epoch - decay_after)


def _gradients(weights: dict[str, ad.Tensor], names: Sequence[str]) -> dict[str, np.ndarray]:
    return {n: weights[n].grad if weights[n].grad is not None else np.zeros(weights[n].shape) for n in names}


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def ssl_step_loss(params: ModelParameters, view_a: np.ndarray, view_b: np.ndarray, ssl: SslLossConfig, trainable=()):
    """Loss of one pair batch; returns (loss tensor, weight leaves)."""
    weights = leaves(params, trainable)
    x = np.concatenate([view_a, view_b], axis=0)
    feats, _ = forward_features(x, weights, params.encoder)
    z = forward_projector(feats, weights)
    n = view_a.shape[0]
    return ssl_loss(z[:n], z[n:], ssl), weights


def pretrain(config: TrainConfig, dataset: PretrainSet, params: ModelParameters) -> Checkpoint:
    """Joint-embedding pretraining of extractor + projector; returns the final parameters."""
    if len(dataset) < config.batch_size:
        raise DataError(f"pretraining needs at least {config.batch_size} clips, got {len(dataset)}")
    if not params.names("projector"):
        raise ConfigError("pretraining needs projector parameters")
    params = params.copy()
    trainable = params.extractor_names() + params.names("projector")
    opt = Adam()
    history = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        for step, indices in enumerate(epoch_batches(len(dataset), config.batch_size, config.seed, epoch)):
            batch = assemble_batch(dataset, indices, config.seed, epoch, config.augmentation)
            try:
                loss, weights = ssl_step_loss(params, batch.view_a, batch.view_b, config.ssl, trainable)
                loss.backward()
            except NumericalError as exc:
                raise NumericalError(f"pretraining diverged at epoch {epoch}, step {step}: {exc}") from None
            opt.step(params, _gradients(weights, trainable), config.pretrain_lr)
            losses.append(float(loss.data))
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": None, "lr": config.pretrain_lr})
        log.info("pretrain epoch %d loss %.5f", epoch, history[-1]["train_loss"])
    return Checkpoint(params, config.epochs, None, config.fingerprint(), history)


# ---------------------------------------------------------------------------
# downstream classification
# ---------------------------------------------------------------------------


@dataclass
class LabeledSet:
    """Brightness-ranked M-modes per labelled clip (rank 1 first)."""

    video_ids: list[str]
    labels: np.ndarray
    images: list[np.ndarray]  # each (k_i, H, W) float32, k_i = min(max_rank, candidate columns)

    def __len__(self) -> int:
        return len(self.video_ids)

    @classmethod
    def from_videos(cls, videos: Sequence[BModeVideo], max_rank: int = 4) -> "LabeledSet":
        ids, labels, stacks = [], [], []
        for v in videos:
            if v.label not in (0, 1):
                raise DataError(f"clip {v.video_id!r} has no binary label")
            ids.append(v.video_id)
            labels.append(v.label)
            stacks.append(np.stack([m.pixels for m in extract_ranked(v, max_rank)]).astype(np.float32))
        return cls(ids, np.array(labels, dtype=int), stacks)

    def primary_images(self) -> np.ndarray:
        """The brightest M-mode of every clip, (N, H, W) float64."""
        return np.stack([s[0] for s in self.images]).astype(np.float64)

    def subset(self, indices: Sequence[int]) -> "LabeledSet":
        indices = list(indices)
        return LabeledSet([self.video_ids[i] for i in indices], self.labels[indices], [self.images[i] for i in indices])


def oversample_minority(data: LabeledSet, max_rank: int = 4) -> list[tuple[int, int]]:
    """(clip index, rank index) training samples.

    Present-sliding clips contribute their brightest M-mode only; absent
    clips contribute the brightest ``max_rank`` (fewer if unavailable).
    """
    samples = []
    for i, label in enumerate(data.labels):
        count = min(max_rank, len(data.images[i])) if label == 1 else 1
        samples.extend((i, r) for r in range(count))
    return samples


def subset_by_fraction(data: LabeledSet, fraction: float, seed: int) -> LabeledSet:
    """Class-stratified, clip-level subset keeping ``fraction`` of each class (at least one clip)."""
    if not 0 < fraction <= 1:
        raise ConfigError("label fraction must lie in (0, 1]")
    if fraction == 1:
        return data
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SUBSET_KEY, 0, 0)))
    keep = []
    for label in (0, 1):
        members = np.flatnonzero(data.labels == label)
        count = max(1, int(round(fraction * len(members))))
        keep.extend(members[rng.permutation(len(members))[:count]].tolist())
    return data.subset(sorted(keep))


def _trainable_names(params: ModelParameters, mode: str) -> list[str]:
    if mode == "linear":
        return params.names("head")
    if mode == "finetune":
        return [n for n in params.names() if not n.startswith("block1.") and not n.startswith("projector.")]
    raise ConfigError(f"mode {mode!r} is not a downstream mode")


def classification_loss(params: ModelParameters, images: np.ndarray, labels: np.ndarray, batch_size: int = 128) -> float:
    """Mean BCE over (N, H, W) raw images, no augmentation."""
    weights = leaves(params)
    total = 0.0
    for lo in range(0, len(images), batch_size):
        feats, _ = forward_features(to_input(images[lo : lo + batch_size]), weights, params.encoder)
        logits = classifier_logits(feats, weights)
        total += float(ad.bce_with_logits(logits, labels[lo : lo + batch_size]).data) * len(logits.data)
    return total / len(images)


def train_downstream(
    config: TrainConfig,
    params: ModelParameters,
    train: LabeledSet,
    val: LabeledSet,
) -> Checkpoint:
    """Train the head (linear) or everything past block 1 (finetune); keep the lowest-val-loss weights."""
    if "head.w" not in params:
        raise ConfigError("attach a classifier head before downstream training")
    train = subset_by_fraction(train, config.label_fraction, config.seed)
    if len(set(train.labels.tolist())) < 2:
        raise DataError("downstream training set contains a single class")
    if len(val) == 0:
        raise DataError("validation set is empty")
    params = params.copy()
    trainable = _trainable_names(params, config.mode)
    samples = oversample_minority(train, config.max_rank)
    val_images, val_labels = val.primary_images(), val.labels.astype(np.float64)
    aug = config.augmentation
    opt = Adam()

    best = Checkpoint(params.copy(), 0, math.inf, config.fingerprint())
    history = []
    n = len(samples)
    for epoch in range(1, config.epochs + 1):
        lr = lr_schedule(epoch, config.lr0, config.decay, config.decay_after)
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(_DOWNSTREAM_SHUFFLE_KEY, epoch, 0)))
        order = rng.permutation(n)
        losses, counts = [], []
        for lo in range(0, n, config.batch_size):
            chosen = order[lo : lo + config.batch_size]
            images = np.stack(
                [
                    augment_downstream(train.images[samples[k][0]][samples[k][1]], RngStream(config.seed, epoch * n + int(k)), aug)
                    for k in chosen
                ]
            )
            y = train.labels[[samples[k][0] for k in chosen]].astype(np.float64)
            weights = leaves(params, trainable)
            try:
                feats, _ = forward_features(to_input(images), weights, params.encoder)
                loss = ad.bce_with_logits(classifier_logits(feats, weights), y)
                loss.backward()
            except NumericalError as exc:
                raise NumericalError(f"downstream training diverged at epoch {epoch}: {exc}") from None
            opt.step(params, _gradients(weights, trainable), lr)
            losses.append(float(loss.data))
            counts.append(len(chosen))
        val_loss = classification_loss(params, val_images, val_labels)
        train_loss = float(np.average(losses, weights=counts))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        log.info("%s epoch %d train %.5f val %.5f lr %.3g", config.mode, epoch, train_loss, val_loss, lr)
        if val_loss < best.val_loss:
            best = Checkpoint(params.copy(), epoch, val_loss, config.fingerprint())
    best.history = history
    return best
