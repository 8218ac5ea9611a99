"""Ranked M-mode images extracted from a manifest, stored as an MMSL file plus a TSV index.

One row of the index per 3 s segment: ``video_id  label  n_candidates  first  count``.
Images are kept in brightness order, enough of them for both the
pretraining selection (top half) and minority oversampling (top four).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .fileio import ManifestEntry, load_videos, read_arrays, write_arrays
from .mmode import BModeVideo, extract_ranked, n_retained, segment_video
from .pairs import PretrainSet
from .training import LabeledSet

OVERSAMPLE_RANKS = 4
_INDEX_HEADER = "video_id\tlabel\tn_candidates\tfirst\tcount\n"


@dataclass
class ExtractedSet:
    video_ids: list[str]
    labels: np.ndarray  # -1 for unlabelled segments
    n_candidates: np.ndarray
    images: list[np.ndarray]  # (count_i, H, W) float32, brightest first
    columns: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.video_ids)

    def pretrain_set(self) -> PretrainSet:
        return PretrainSet(
            list(self.video_ids), [imgs[: n_retained(int(n))] for imgs, n in zip(self.images, self.n_candidates)]
        )

    def labeled_set(self, max_rank: int = OVERSAMPLE_RANKS) -> LabeledSet:
        if np.any(self.labels < 0):
            raise DataError("labelled set requested from segments without labels")
        return LabeledSet(list(self.video_ids), self.labels.astype(int), [imgs[:max_rank] for imgs in self.images])


def _keep_count(n_columns: int) -> int:
    return max(n_retained(n_columns), min(OVERSAMPLE_RANKS, n_columns))


def extract_videos(videos: Sequence[BModeVideo], seconds: float = 3.0) -> ExtractedSet:
    ids, labels, counts, images, columns = [], [], [], [], []
    for video in videos:
        for segment in segment_video(video, seconds):
            n = len(segment.candidate_columns)
            ranked = extract_ranked(segment, _keep_count(n))
            ids.append(segment.video_id)
            labels.append(segment.label)
            counts.append(n)
            images.append(np.stack([m.pixels for m in ranked]).astype(np.float32))
            columns.append(np.array([m.column_index for m in ranked], dtype=np.int64))
    if not ids:
        raise DataError("no segment of at least 3 s in the input videos")
    return ExtractedSet(ids, np.array(labels, dtype=np.int64), np.array(counts, dtype=np.int64), images, columns)


def extract_manifest(entries: Sequence[ManifestEntry], seconds: float = 3.0) -> ExtractedSet:
    return extract_videos(load_videos(entries), seconds)


def write_extracted(stem, data: ExtractedSet) -> tuple[Path, Path]:
    """``stem``.mmsl (images f4, columns i8) and ``stem``.tsv (index)."""
    stem = Path(stem)
    array_path, index_path = stem.with_suffix(".mmsl"), stem.with_suffix(".tsv")
    write_arrays(
        array_path,
        {
            "images": np.concatenate(data.images).astype("<f4"),
            "columns": np.concatenate(data.columns).astype("<i8"),
        },
    )
    lines, first = [_INDEX_HEADER], 0
    for vid, label, n, imgs in zip(data.video_ids, data.labels, data.n_candidates, data.images):
        lines.append(f"{vid}\t{int(label)}\t{int(n)}\t{first}\t{len(imgs)}\n")
        first += len(imgs)
    index_path.write_text("".join(lines))
    return array_path, index_path


def read_extracted(stem) -> ExtractedSet:
    stem = Path(stem)
    array_path, index_path = stem.with_suffix(".mmsl"), stem.with_suffix(".tsv")
    for p in (array_path, index_path):
        if not p.exists():
            raise DataError(f"extracted data file {p} not found; run `extract` first")
    arrays = read_arrays(array_path)
    if "images" not in arrays or "columns" not in arrays:
        raise DataError(f"{array_path}: missing images/columns arrays")
    rows = index_path.read_text().splitlines()
    if not rows or rows[0] + "\n" != _INDEX_HEADER:
        raise DataError(f"{index_path}: unexpected header")
    ids, labels, counts, images, columns = [], [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            vid, label, n, first, count = row.split("\t")
            label, n, first, count = int(label), int(n), int(first), int(count)
        except ValueError:
            raise DataError(f"{index_path}:{lineno}: malformed index row") from None
        if first + count > len(arrays["images"]) or count < 1:
            raise DataError(f"{index_path}:{lineno}: image range out of bounds")
        ids.append(vid)
        labels.append(label)
        counts.append(n)
        images.append(arrays["images"][first : first + count])
        columns.append(arrays["columns"][first : first + count])
    return ExtractedSet(ids, np.array(labels, dtype=np.int64), np.array(counts, dtype=np.int64), images, columns)
