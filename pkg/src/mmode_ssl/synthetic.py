"""Synthetic B-mode clips with seashore-sign or barcode-sign M-modes.

Every clip has a static near field, a bright pleural band and a far field
made of static reverberation lines plus speckle. The class lives only in
the far field's temporal behaviour:

* lung sliding present (label 0): far-field speckle is redrawn every frame,
  so each M-mode shows a granular "sandy" texture below the pleura;
* lung sliding absent (label 1): far-field speckle is frozen in time, so
  each M-mode shows unbroken horizontal lines (barcode).

The near field is produced by the same draws for both classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .fileio import ManifestEntry, write_bmv, write_manifest
from .mmode import BModeVideo


@dataclass(frozen=True)
class SynthConfig:
    n_labeled: int = 400
    n_unlabeled: int = 800
    absent_fraction: float = 0.2  # 4:1 present:absent
    frames: int = 48
    height: int = 64
    width: int = 24
    fps: float = 16.0
    pleural_row_min: int = 14
    pleural_row_max: int = 24
    pleural_width_min: int = 8
    pleural_width_max: int = 12
    speckle_scale: float = 45.0
    aline_amplitude: float = 25.0
    noise: float = 4.0
    videos_per_patient: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.pleural_row_min <= self.pleural_row_max < self.height / 2:
            raise ConfigError("pleural rows must satisfy 0 < min <= max < height/2")
        if self.frames < self.fps * 3:
            raise ConfigError("clips need at least 3 seconds of frames")
        if not 1 <= self.pleural_width_min <= self.pleural_width_max <= self.width - 2:
            raise ConfigError("pleural width range does not fit the frame")
        if not 0 < self.absent_fraction < 1:
            raise ConfigError("absent_fraction must be in (0, 1)")
        if self.videos_per_patient < 1:
            raise ConfigError("videos_per_patient must be >= 1")


@dataclass
class SyntheticVideo:
    video: BModeVideo
    label: int  # true class, even for clips released unlabelled
    pleural_row: int
    patient_id: str


def _video_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_video(index: int, label: int, cfg: SynthConfig, video_id: str, patient_id: str) -> SyntheticVideo:
    rng = _video_rng(cfg.seed, index)
    t, h, w = cfg.frames, cfg.height, cfg.width

    # shared structure: identical draws for both classes
    row = int(rng.integers(cfg.pleural_row_min, cfg.pleural_row_max + 1))
    bound_width = int(rng.integers(cfg.pleural_width_min, cfg.pleural_width_max + 1))
    lo = int(rng.integers(1, w - bound_width))
    hi = lo + bound_width - 1
    tissue_rows = rng.uniform(25.0, 55.0, size=(row, 1))
    tissue = tissue_rows + rng.normal(0.0, 6.0, size=(row, w))

    frame = np.zeros((h, w))
    frame[:row] = tissue
    band = np.full(w, 70.0)
    band[lo : hi + 1] = 200.0 + rng.uniform(-15.0, 15.0, size=bound_width)
    frame[row : row + 2] = band

    far_rows = h - row - 2
    depth = np.arange(row + 2, h)
    alines = np.zeros(far_rows)
    for k in (2, 3):
        alines[depth == k * (row + 1)] = cfg.aline_amplitude / (k - 1)
    frames = np.broadcast_to(frame, (t, h, w)).copy()
    if label == 1:
        speckle = rng.rayleigh(cfg.speckle_scale, size=(1, far_rows, w))
    else:
        speckle = rng.rayleigh(cfg.speckle_scale, size=(t, far_rows, w))
    frames[:, row + 2 :] = alines[None, :, None] + speckle
    frames += rng.normal(0.0, cfg.noise, size=frames.shape)
    np.clip(frames, 0.0, 255.0, out=frames)

    video = BModeVideo(frames, cfg.fps, (lo, hi), video_id, label)
    return SyntheticVideo(video, label, row, patient_id)


def _labels(n: int, absent_fraction: float, per_patient: int, rng: np.random.Generator) -> np.ndarray:
    """Per-clip labels, constant within each pseudo-patient, with an exact class count."""
    n_patients = -(-n // per_patient)
    n_absent = int(round(absent_fraction * n_patients))
    patient_labels = np.zeros(n_patients, dtype=int)
    patient_labels[rng.choice(n_patients, size=n_absent, replace=False)] = 1
    return np.repeat(patient_labels, per_patient)[:n]


def generate(cfg: SynthConfig) -> tuple[list[SyntheticVideo], list[SyntheticVideo]]:
    """Labelled and unlabelled clips (the unlabelled ones carry label -1 on the video)."""
    label_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(10**9,)))
    labeled_y = _labels(cfg.n_labeled, cfg.absent_fraction, cfg.videos_per_patient, label_rng)
    unlabeled_y = _labels(cfg.n_unlabeled, cfg.absent_fraction, cfg.videos_per_patient, label_rng)
    labeled = [
        generate_video(i, int(y), cfg, f"lab{i:05d}", f"p{i // cfg.videos_per_patient:05d}")
        for i, y in enumerate(labeled_y)
    ]
    unlabeled = []
    for j, y in enumerate(unlabeled_y):
        index = cfg.n_labeled + j
        sv = generate_video(index, int(y), cfg, f"unl{j:05d}", f"u{j // cfg.videos_per_patient:05d}")
        sv.video.label = -1
        unlabeled.append(sv)
    return labeled, unlabeled


def _apportion(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder integer split of ``n``."""
    raw = [f * n for f in fractions]
    base = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - base[k]), k))
    for k in order[: n - sum(base)]:
        base[k] += 1
    return base


def split(
    videos: Sequence[SyntheticVideo],
    fractions: Sequence[float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> tuple[list[SyntheticVideo], list[SyntheticVideo], list[SyntheticVideo]]:
    """Patient-grouped, class-stratified train/val/test split."""
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ConfigError("split needs three fractions summing to 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2 * 10**9,)))
    parts: list[list[SyntheticVideo]] = [[], [], []]
    for label in (0, 1):
        patients: dict[str, list[SyntheticVideo]] = {}
        for v in videos:
            if v.label == label:
                patients.setdefault(v.patient_id, []).append(v)
        if len(patients) < 3:
            raise DataError(f"class {label} has {len(patients)} patients; need at least 3 to split")
        n_class = sum(len(g) for g in patients.values())
        deficit = _apportion(n_class, fractions)
        if min(deficit) < 1:
            raise DataError(f"class {label} too small for a {fractions} split")
        keys = sorted(patients)
        filled = [False, False, False]
        for key in (keys[i] for i in rng.permutation(len(keys))):
            group = patients[key]
            # every split first receives one patient of the class, then the largest deficit wins
            target = max(range(3), key=lambda k: (not filled[k], deficit[k], -k))
            filled[target] = True
            parts[target].extend(group)
            deficit[target] -= len(group)
        for part in parts:
            if not any(v.label == label for v in part):
                raise DataError(f"class {label} missing from a split")
    for part in parts:
        part.sort(key=lambda v: v.video.video_id)
    return parts[0], parts[1], parts[2]


def temporal_autocorrelation(mmode: np.ndarray, start_row: int) -> float:
    """Lag-1 correlation along time of the rows below ``start_row`` (pooled over rows)."""
    region = np.asarray(mmode, dtype=np.float64)[start_row:]
    a, b = region[:, :-1].ravel(), region[:, 1:].ravel()
    a, b = a - a.mean(), b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 1.0


def write_dataset(out_dir, cfg: SynthConfig) -> dict[str, Path]:
    """Write BMV1 clips plus manifests (all/train/val/test/unlabeled) and a truth table."""
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    labeled, unlabeled = generate(cfg)
    train, val, test = split(labeled, seed=cfg.seed)

    def entries(vs, hide_labels=False):
        return [
            ManifestEntry(str(out_dir / "videos" / f"{v.video.video_id}.bmv"), v.video.video_id, -1 if hide_labels else v.label)
            for v in vs
        ]

    for v in labeled + unlabeled:
        write_bmv(out_dir / "videos" / f"{v.video.video_id}.bmv", v.video)
    paths = {}
    for name, vs, hide in (
        ("all", labeled, False),
        ("train", train, False),
        ("val", val, False),
        ("test", test, False),
        ("unlabeled", unlabeled, True),
    ):
        paths[name] = out_dir / f"{name}.tsv"
        write_manifest(paths[name], entries(vs, hide))
    truth = ["video_id\tclass\tpleural_row\tpatient_id\n"]
    truth += [f"{v.video.video_id}\t{v.label}\t{v.pleural_row}\t{v.patient_id}\n" for v in labeled + unlabeled]
    paths["truth"] = out_dir / "truth.tsv"
    paths["truth"].write_text("".join(truth))
    paths["config"] = out_dir / "synth_config.txt"
    paths["config"].write_text("".join(f"{k}={v}\n" for k, v in asdict(cfg).items()))
    return paths
