"""M-mode extraction from grayscale B-mode clips.

An M-mode image is one B-mode column traced through time: rows are depth,
columns are frames. Candidate columns are restricted to the horizontal
extent of the pleural line and ranked by total brightness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError

IMAGE_SIZE = (128, 128)


@dataclass
class BModeVideo:
    frames: np.ndarray  # (T, H, W), values in [0, 255]
    fps: float
    pleural_bounds: tuple[int, int]  # inclusive column range
    video_id: str = ""
    label: int = -1  # 1 = absent sliding, 0 = present, -1 = unlabelled

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise DataError(f"video {self.video_id!r}: frames must be (T>=1, H, W), got {self.frames.shape}")
        if not self.fps > 0:
            raise DataError(f"video {self.video_id!r}: fps must be positive")
        lo, hi = (int(b) for b in self.pleural_bounds)
        if not 0 <= lo <= hi < self.frames.shape[2]:
            raise DataError(
                f"video {self.video_id!r}: pleural bounds {lo}..{hi} outside 0..{self.frames.shape[2] - 1}"
            )
        self.pleural_bounds = (lo, hi)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def candidate_columns(self) -> range:
        lo, hi = self.pleural_bounds
        return range(lo, hi + 1)


@dataclass
class MModeImage:
    pixels: np.ndarray  # (depth, time)
    source_video_id: str = ""
    column_index: int = 0
    brightness_rank: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def segment_video(video: BModeVideo, seconds: float = 3.0) -> list[BModeVideo]:
    """Split into consecutive clips of ``floor(seconds * fps)`` frames; the remainder is dropped."""
    length = int(math.floor(seconds * video.fps))
    if length <= 0:
        raise DataError(f"segment of {seconds}s at {video.fps} fps has no frames")
    count = video.n_frames // length
    return [
        replace(video, frames=video.frames[k * length : (k + 1) * length], video_id=f"{video.video_id}#{k}")
        for k in range(count)
    ]


def extract_mmode(video: BModeVideo, column: int) -> MModeImage:
    lo, hi = video.pleural_bounds
    if not lo <= column <= hi:
        raise DataError(f"column {column} outside pleural bounds {lo}..{hi}")
    pixels = np.ascontiguousarray(video.frames[:, :, column].T)
    return MModeImage(pixels, video.video_id, column, brightness_rank=1)


def rank_columns(video: BModeVideo) -> list[tuple[int, float]]:
    """Candidate columns by descending total intensity; ties go to the lower column index."""
    lo, hi = video.pleural_bounds
    totals = video.frames[:, :, lo : hi + 1].sum(axis=(0, 1))
    order = sorted(range(hi - lo + 1), key=lambda k: (-totals[k], k))
    return [(lo + k, float(totals[k])) for k in order]


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    left = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - left
    rows = np.arange(n_out)
    m[rows, left] = 1.0 - frac
    m[rows, left + 1] += frac
    return m


def interpolate(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear (align-corners) resize of a 2-d array without clamping."""
    values = np.asarray(values, dtype=np.float64)
    return _interp_matrix(shape[0], values.shape[0]) @ values @ _interp_matrix(shape[1], values.shape[1]).T


def resize_array(pixels: np.ndarray, shape: tuple[int, int] = IMAGE_SIZE) -> np.ndarray:
    """Bilinear (align-corners) resize of a 2-d array, clamped to [0, 255]."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape == tuple(shape):
        return np.clip(pixels, 0.0, 255.0)
    if pixels.ndim != 2 or min(pixels.shape) < 1:
        raise DataError(f"cannot resize array of shape {pixels.shape}")
    ry = _interp_matrix(shape[0], pixels.shape[0])
    rx = _interp_matrix(shape[1], pixels.shape[1])
    return np.clip(ry @ pixels @ rx.T, 0.0, 255.0)


def resize_bilinear(img: MModeImage, shape: tuple[int, int] = IMAGE_SIZE) -> MModeImage:
    return replace(img, pixels=resize_array(img.pixels, shape))


def extract_ranked(video: BModeVideo, count: int, shape: tuple[int, int] = IMAGE_SIZE) -> list[MModeImage]:
    """The ``count`` brightest candidate M-modes, resized, with ranks 1..count."""
    out = []
    for rank, (column, _) in enumerate(rank_columns(video)[:count], start=1):
        img = extract_mmode(video, column)
        img.brightness_rank = rank
        out.append(resize_bilinear(img, shape))
    return out


def n_retained(n_columns: int) -> int:
    """Top half of the candidate columns, rounding up."""
    return max(1, math.ceil(n_columns / 2))


def select_for_pretraining(video: BModeVideo, shape: tuple[int, int] = IMAGE_SIZE) -> list[MModeImage]:
    return extract_ranked(video, n_retained(len(video.candidate_columns)), shape)


def select_for_classification(video: BModeVideo, shape: tuple[int, int] = IMAGE_SIZE) -> MModeImage:
    """The single brightest candidate column, as used for labelled train/val/test images."""
    return extract_ranked(video, 1, shape)[0]
