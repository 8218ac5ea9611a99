"""Classification metrics, aggregation across datasets, and Grad-CAM saliency."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .autodiff import Tensor
from .errors import DataError
from .fileio import write_csv, write_pgm
from .mmode import IMAGE_SIZE, interpolate
from .model import ModelParameters, classifier_logits, forward_features, leaves, predict_proba, to_input

METRIC_NAMES = ("auc", "sensitivity", "specificity", "accuracy")


def _binary_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be a 1-d array of 0/1")
    return labels.astype(int)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary_labels(labels)
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    sensitivity: float
    specificity: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    dataset_id: str = ""
    n_samples: int = 0
    threshold: float = 0.5


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def confusion_metrics(scores, labels, threshold: float = 0.5, dataset_id: str = "") -> MetricsReport:
    """Counts at ``score >= threshold`` (absent sliding = positive); AUC is NaN for one-class labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary_labels(labels)
    if len(labels) == 0:
        raise DataError("cannot score an empty prediction set")
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    area = auc(scores, labels) if 0 < labels.sum() < len(labels) else float("nan")
    return MetricsReport(
        auc=area,
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        accuracy=(tp + tn) / len(labels),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        dataset_id=dataset_id,
        n_samples=len(labels),
        threshold=threshold,
    )


def aggregate_external(reports: Sequence[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Unweighted mean and population std of each metric across datasets."""
    if not reports:
        raise DataError("nothing to aggregate")
    out = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = (float(values.mean()), float(values.std(ddof=0)))
    return out


def evaluate(params: ModelParameters, images: np.ndarray, labels, dataset_id: str = "", threshold: float = 0.5):
    """Scores (N,) and the MetricsReport for raw (N, H, W) images."""
    scores = predict_proba(params, images)
    return scores, confusion_metrics(scores, labels, threshold, dataset_id)


# ---------------------------------------------------------------- saliency


@dataclass
class SaliencyMap:
    heat: np.ndarray  # (128, 128) in [0, 1]
    image_id: str
    probability: float


def cam_from_activations(activation: np.ndarray, grad: np.ndarray, shape: tuple[int, int] = IMAGE_SIZE) -> np.ndarray:
    """Grad-CAM combination for one (C, h, w) activation map and its logit gradient."""
    alpha = grad.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, activation, axes=1), 0.0)
    heat = interpolate(cam, shape)
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 0:
        return np.zeros(shape)
    return (heat - lo) / (hi - lo)


def grad_cam(params: ModelParameters, image: np.ndarray, image_id: str = "") -> SaliencyMap:
    """Heat map of the last conv block's post-ReLU activations for one raw (H, W) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DataError(f"grad_cam expects a single 2-d image, got {image.shape}")
    weights = leaves(params)
    # a grad-requiring input keeps the whole graph recorded, so the activation's grad survives backward()
    x = Tensor(to_input(image[None]), requires_grad=True)
    feats, activation = forward_features(x, weights, params.encoder)
    logit = classifier_logits(feats, weights)
    logit.backward()
    heat = cam_from_activations(activation.data[0], activation.grad[0], image.shape)
    prob = float(1.0 / (1.0 + np.exp(-logit.data[0])))
    return SaliencyMap(heat, image_id, prob)


def region_means(heat: np.ndarray, boundary_row: int) -> tuple[float, float]:
    """Mean heat above and below ``boundary_row`` (rows >= boundary count as below)."""
    return float(heat[:boundary_row].mean()), float(heat[boundary_row:].mean())


# ---------------------------------------------------------------- reports


def write_report_csv(path, reports: Sequence[MetricsReport]) -> None:
    header = [f.name for f in fields(MetricsReport)]
    write_csv(path, header, [[asdict(r)[h] for h in header] for r in reports])


def write_predictions_csv(path, video_ids: Sequence[str], scores, labels) -> None:
    write_csv(path, ["video_id", "score", "label"], zip(video_ids, [float(s) for s in scores], [int(y) for y in labels]))


def format_summary(reports: Sequence[MetricsReport]) -> str:
    lines = []
    for r in reports:
        lines.append(
            f"{r.dataset_id or 'dataset'}: n={r.n_samples} auc={r.auc:.4f} sensitivity={r.sensitivity:.4f} "
            f"specificity={r.specificity:.4f} accuracy={r.accuracy:.4f} (TP={r.tp} FP={r.fp} TN={r.tn} FN={r.fn})"
        )
    if len(reports) > 1:
        for name, (mean, std) in aggregate_external(reports).items():
            lines.append(f"{name}: mean={mean:.4f} std={std:.4f}")
    return "\n".join(lines) + "\n"


def write_summary(path, reports: Sequence[MetricsReport]) -> None:
    Path(path).write_text(format_summary(reports))


def overlay(image: np.ndarray, heat: np.ndarray, weight: float = 0.5) -> np.ndarray:
    """Grayscale blend of a 0-255 image with heat scaled to 0-255."""
    return (1.0 - weight) * np.asarray(image, dtype=np.float64) + weight * 255.0 * heat


def write_saliency(out_dir, saliency: SaliencyMap, image: np.ndarray, stem: str) -> tuple[Path, Path]:
    """``stem``_heat.pgm plus ``stem``_composite.pgm (original | overlay)."""
    out_dir = Path(out_dir)
    heat_path = out_dir / f"{stem}_heat.pgm"
    composite_path = out_dir / f"{stem}_composite.pgm"
    write_pgm(heat_path, saliency.heat, max_value=1.0)
    write_pgm(composite_path, np.hstack([np.asarray(image, dtype=np.float64), overlay(image, saliency.heat)]))
    return heat_path, composite_path
