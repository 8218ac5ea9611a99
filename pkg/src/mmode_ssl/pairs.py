"""Positive-pair batches under the same-video relationship.

Two M-modes drawn from the same clip form a positive pair. A batch holds one
pair per clip and never two pairs from the same clip, so no slot can act as
a false negative for another under a contrastive objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .augment import AugmentationConfig, RngStream, augment
from .errors import DataError
from .mmode import BModeVideo, select_for_pretraining

# first spawn-key element for each consumer of the run seed
_PAIR_KEY = 1
_SHUFFLE_KEY = 2


@dataclass
class PretrainSet:
    """Retained (resized) M-modes per clip. Labels are deliberately absent."""

    video_ids: list[str]
    images: list[np.ndarray]  # each (k_i, H, W), float32 pixels

    def __len__(self) -> int:
        return len(self.video_ids)

    @classmethod
    def from_videos(cls, videos: Sequence[BModeVideo]) -> "PretrainSet":
        ids, stacks = [], []
        for v in videos:
            retained = select_for_pretraining(v)
            ids.append(v.video_id)
            stacks.append(np.stack([m.pixels for m in retained]).astype(np.float32))
        return cls(ids, stacks)

    def concat(self, other: "PretrainSet") -> "PretrainSet":
        return PretrainSet(self.video_ids + other.video_ids, self.images + other.images)


@dataclass
class PairBatch:
    view_a: np.ndarray  # (N, 1, H, W), scaled to [0, 1]
    view_b: np.ndarray
    video_ids: list[str]

    def __len__(self) -> int:
        return len(self.video_ids)


def sample_pair(images: Sequence, rng: np.random.Generator):
    """Two distinct retained M-modes, uniformly; a lone image is paired with itself."""
    if len(images) == 0:
        raise DataError("cannot sample a pair from a clip with no retained M-modes")
    if len(images) == 1:
        return images[0], images[0]
    i, j = rng.choice(len(images), size=2, replace=False)
    return images[i], images[j]


def _pair_rng(seed: int, epoch: int, video_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_PAIR_KEY, epoch, video_index)))


def assemble_batch(
    dataset: PretrainSet,
    indices: Sequence[int],
    seed: int,
    epoch: int,
    aug: AugmentationConfig,
) -> PairBatch:
    """Pair and augment the clips at ``indices`` (which must be distinct)."""
    if len(set(int(i) for i in indices)) != len(indices):
        raise DataError("a batch may contain each clip at most once")
    view_a, view_b = [], []
    n = len(dataset)
    for idx in indices:
        idx = int(idx)
        first, second = sample_pair(dataset.images[idx], _pair_rng(seed, epoch, idx))
        sample = (epoch * n + idx) * 2
        view_a.append(augment(first, RngStream(seed, sample), aug, branch="a"))
        view_b.append(augment(second, RngStream(seed, sample + 1), aug, branch="b"))
    return PairBatch(
        (np.stack(view_a) / 255.0)[:, None],
        (np.stack(view_b) / 255.0)[:, None],
        [dataset.video_ids[int(i)] for i in indices],
    )


def epoch_batches(n_videos: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled clip indices cut into full batches; the incomplete tail is dropped."""
    if batch_size < 2:
        raise DataError("pretraining batches need at least 2 clips")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SHUFFLE_KEY, epoch, 0)))
    order = rng.permutation(n_videos)
    count = n_videos // batch_size
    return [order[k * batch_size : (k + 1) * batch_size] for k in range(count)]


def make_batch(
    dataset: PretrainSet,
    batch_size: int = 128,
    seed: int = 0,
    epoch: int = 0,
    aug: AugmentationConfig = AugmentationConfig(),
) -> PairBatch:
    """A single batch of ``batch_size`` distinct clips."""
    if len(dataset) < batch_size:
        raise DataError(f"need {batch_size} clips for a batch, only {len(dataset)} available")
    return assemble_batch(dataset, epoch_batches(len(dataset), batch_size, seed, epoch)[0], seed, epoch, aug)
