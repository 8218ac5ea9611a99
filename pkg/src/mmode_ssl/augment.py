"""Stochastic image transforms for M-mode images.

Three pipelines are provided:

* ``mmode``: the M-mode pretraining recipe (upper-half crop, flip,
  horizontal blur, additive and multiplicative noise, brightness and
  contrast in random order).
* ``byol``: the BYOL recipe adapted to single-channel images (no hue;
  saturation and grayscale conversion are no-ops), with asymmetric blur and
  solarization per branch.
* ``downstream``: the light augmentation used while training classifiers.

Each pipeline is split into a *plan* (which steps fire, with which drawn
parameters) and a deterministic *apply*. Randomness comes from
:class:`RngStream`, a counter-style generator keyed by
``(master_seed, sample_index, step_index)``, so results do not depend on
the order in which samples are processed.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError
from .mmode import resize_array

PIPELINES = ("mmode", "byol", "downstream")


@dataclass(frozen=True)
class AugmentationConfig:
    pipeline: str = "mmode"
    seed: int = 0

    # M-mode pretraining pipeline
    crop_p: float = 0.8
    crop_area_min: float = 0.08
    crop_area_max: float = 1.0
    crop_ratio_min: float = 3 / 4
    crop_ratio_max: float = 4 / 3
    flip_p: float = 0.5
    blur_p: float = 0.5
    blur_width: int = 10
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    noise_p: float = 0.5
    noise_mean_min: float = -10.0
    noise_mean_max: float = 10.0
    noise_std_min: float = 0.0
    noise_std_max: float = 25.0
    speckle_p: float = 0.5
    speckle_std_min: float = 0.0
    speckle_std_max: float = 0.1
    brightness_p: float = 0.8
    brightness_min: float = -0.4
    brightness_max: float = 0.4
    contrast_p: float = 0.8
    contrast_min: float = -0.4
    contrast_max: float = 0.4
    contrast_first_p: float = 0.5

    # BYOL pipeline (branch a / branch b where asymmetric)
    byol_crop_p: float = 1.0
    byol_flip_p: float = 0.5
    byol_jitter_p: float = 0.8
    byol_brightness: float = 0.4
    byol_contrast: float = 0.4
    byol_saturation: float = 0.2
    byol_grayscale_p: float = 0.2
    byol_blur_width: int = 13
    byol_blur_p_a: float = 1.0
    byol_blur_p_b: float = 0.1
    byol_solarize_p_a: float = 0.0
    byol_solarize_p_b: float = 0.2
    byol_solarize_threshold: float = 128.0

    # downstream (classifier training) pipeline
    down_contrast_min: float = 0.0
    down_contrast_max: float = 0.3
    down_brightness_min: float = -0.1
    down_brightness_max: float = 0.1
    down_noise_std: float = 5.0
    down_flip_p: float = 0.5

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown augmentation pipeline {self.pipeline!r}")
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name.endswith("_p") or "_p_" in f.name:
                if not 0.0 <= value <= 1.0:
                    raise ConfigError(f"{f.name}={value} is not a probability")
            if f.name.endswith("_min"):
                upper = getattr(self, f.name[:-4] + "_max")
                if value > upper:
                    raise ConfigError(f"{f.name}={value} exceeds {f.name[:-4]}_max={upper}")
        if self.crop_area_min <= 0 or self.crop_area_max > 1:
            raise ConfigError("crop area fractions must lie in (0, 1]")
        if self.blur_width < 1 or self.byol_blur_width < 1:
            raise ConfigError("blur widths must be positive")
        if self.down_noise_std < 0 or self.noise_std_min < 0 or self.speckle_std_min < 0:
            raise ConfigError("noise standard deviations must be non-negative")

    def replace(self, **changes) -> "AugmentationConfig":
        return dataclasses.replace(self, **changes)


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(field_type: Any, key: str, raw: str):
    try:
        if field_type in (int, "int"):
            return int(raw)
        if field_type in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {field_type}") from None


def augmentation_config_from_mapping(values: dict[str, str], base: AugmentationConfig | None = None):
    base = base or AugmentationConfig()
    types = {f.name: f.type for f in dataclasses.fields(AugmentationConfig)}
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"unknown augmentation keys: {', '.join(unknown)}")
    return base.replace(**{k: _coerce(types[k], k, v) for k, v in values.items()})


def load_augmentation_config(path) -> AugmentationConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"augmentation config {path} not found")
    return augmentation_config_from_mapping(parse_key_values(path.read_text(), str(path)))


def dump_augmentation_config(config: AugmentationConfig) -> str:
    return "".join(f"{f.name}={getattr(config, f.name)!r}\n".replace("'", "") for f in dataclasses.fields(config))


class RngStream:
    """Per-sample random source; ``step(i)`` is a fresh generator for transform step ``i``."""

    def __init__(self, master_seed: int, sample_index: int):
        self.master_seed = int(master_seed)
        self.sample_index = int(sample_index)

    def step(self, step_index: int) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.sample_index, int(step_index)))
        return np.random.Generator(np.random.Philox(seq))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.master_seed}, sample={self.sample_index})"


@dataclass
class Step:
    name: str
    params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# elementary transforms (all return new arrays clamped to [0, 255])
# ---------------------------------------------------------------------------


def _clamp(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 255.0)


def gaussian_kernel_offsets(width: int) -> np.ndarray:
    """Tap offsets for a width-``width`` kernel; even widths extend one tap further right."""
    return np.arange(-(width // 2) + 1, width // 2 + 1) if width % 2 == 0 else np.arange(-(width // 2), width // 2 + 1)


def blur_axis(x: np.ndarray, sigma: float, width: int, axis: int) -> np.ndarray:
    """1-d Gaussian blur along ``axis``; taps falling off the image are dropped and weights renormalized."""
    offsets = gaussian_kernel_offsets(width)
    weights = np.exp(-(offsets**2) / (2.0 * sigma**2))
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    n = x.shape[-1]
    acc = np.zeros_like(x)
    norm = np.zeros(n)
    for d, wgt in zip(offsets, weights):
        lo, hi = max(0, -d), min(n, n - d)
        if lo >= hi:
            continue
        acc[..., lo:hi] += wgt * x[..., lo + d : hi + d]
        norm[lo:hi] += wgt
    return np.moveaxis(acc / norm, -1, axis)


def crop_resize(x: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    return resize_array(x[top : top + height, left : left + width], x.shape)


def hflip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[:, ::-1])


def shift_brightness(x: np.ndarray, c: float) -> np.ndarray:
    return _clamp(x + c * 255.0)


def scale_contrast(x: np.ndarray, factor: float) -> np.ndarray:
    m = x.mean()
    return _clamp(m + (x - m) * factor)


def solarize(x: np.ndarray, threshold: float = 128.0) -> np.ndarray:
    return np.where(x >= threshold, 255.0 - x, x)


def _sample_crop(
    rng: np.random.Generator, shape: tuple[int, int], cfg: AugmentationConfig, upper_half: bool
) -> dict:
    h_img, w_img = shape
    area = h_img * w_img
    fraction = rng.uniform(cfg.crop_area_min, cfg.crop_area_max)
    log_ratio = rng.uniform(math.log(cfg.crop_ratio_min), math.log(cfg.crop_ratio_max))
    ratio = math.exp(log_ratio)  # width / height
    h = int(round(math.sqrt(fraction * area / ratio)))
    w = int(round(math.sqrt(fraction * area * ratio)))
    h = min(max(h, 1), h_img)
    w = min(max(w, 1), w_img)
    top_max = h_img - h
    if upper_half:
        top_max = min(top_max, h_img // 2)
    top = int(rng.integers(0, top_max + 1))
    left = int(rng.integers(0, w_img - w + 1))
    return {"area": fraction, "top": top, "left": left, "height": h, "width": w}


def _apply(x: np.ndarray, step: Step) -> np.ndarray:
    p = step.params
    name = step.name
    if name == "crop":
        return crop_resize(x, p["top"], p["left"], p["height"], p["width"])
    if name == "flip":
        return hflip(x)
    if name == "blur":
        return _clamp(blur_axis(x, p["sigma"], p["width"], axis=1))
    if name == "blur2d":
        return _clamp(blur_axis(blur_axis(x, p["sigma"], p["width"], 0), p["sigma"], p["width"], 1))
    if name in ("noise", "speckle"):
        return _clamp(x * p["field"] if name == "speckle" else x + p["field"])
    if name == "brightness":
        return shift_brightness(x, p["c"])
    if name == "contrast":
        return scale_contrast(x, 1.0 + p["c"])
    if name == "brightness_scale":
        return _clamp(x * p["factor"])
    if name == "contrast_blend":
        return scale_contrast(x, p["factor"])
    if name in ("saturation", "grayscale"):
        return x
    if name == "solarize":
        return solarize(x, p["threshold"])
    raise ValueError(f"unknown augmentation step {name!r}")


def apply_plan(pixels: np.ndarray, plan: list[Step]) -> np.ndarray:
    x = _clamp(np.asarray(pixels, dtype=np.float64))
    for step in plan:
        x = _apply(x, step)
    return x


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def plan_mmode(rng: RngStream, shape: tuple[int, int], cfg: AugmentationConfig) -> list[Step]:
    plan: list[Step] = []
    g = rng.step(1)
    if g.random() < cfg.crop_p:
        plan.append(Step("crop", _sample_crop(g, shape, cfg, upper_half=True)))
    g = rng.step(2)
    if g.random() < cfg.flip_p:
        plan.append(Step("flip"))
    g = rng.step(3)
    if g.random() < cfg.blur_p:
        plan.append(Step("blur", {"sigma": g.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max), "width": cfg.blur_width}))
    g = rng.step(4)
    if g.random() < cfg.noise_p:
        mu = g.uniform(cfg.noise_mean_min, cfg.noise_mean_max)
        sigma = g.uniform(cfg.noise_std_min, cfg.noise_std_max)
        plan.append(Step("noise", {"mean": mu, "std": sigma, "field": g.normal(mu, sigma, size=shape)}))
    g = rng.step(5)
    if g.random() < cfg.speckle_p:
        sigma = g.uniform(cfg.speckle_std_min, cfg.speckle_std_max)
        plan.append(Step("speckle", {"std": sigma, "field": g.normal(1.0, sigma, size=shape)}))
    tone: list[Step] = []
    g = rng.step(6)
    if g.random() < cfg.brightness_p:
        tone.append(Step("brightness", {"c": g.uniform(cfg.brightness_min, cfg.brightness_max)}))
    g = rng.step(7)
    if g.random() < cfg.contrast_p:
        tone.append(Step("contrast", {"c": g.uniform(cfg.contrast_min, cfg.contrast_max)}))
    if rng.step(8).random() < cfg.contrast_first_p:
        tone.reverse()
    return plan + tone


def plan_byol(rng: RngStream, shape: tuple[int, int], cfg: AugmentationConfig, branch: str = "a") -> list[Step]:
    if branch not in ("a", "b"):
        raise ValueError("branch must be 'a' or 'b'")
    blur_p = cfg.byol_blur_p_a if branch == "a" else cfg.byol_blur_p_b
    solarize_p = cfg.byol_solarize_p_a if branch == "a" else cfg.byol_solarize_p_b
    plan: list[Step] = []
    g = rng.step(1)
    if g.random() < cfg.byol_crop_p:
        plan.append(Step("crop", _sample_crop(g, shape, cfg, upper_half=False)))
    g = rng.step(2)
    if g.random() < cfg.byol_flip_p:
        plan.append(Step("flip"))
    g = rng.step(3)
    if g.random() < cfg.byol_jitter_p:
        jitter = [
            Step("brightness_scale", {"factor": g.uniform(1 - cfg.byol_brightness, 1 + cfg.byol_brightness)}),
            Step("contrast_blend", {"factor": g.uniform(1 - cfg.byol_contrast, 1 + cfg.byol_contrast)}),
            Step("saturation", {"factor": g.uniform(1 - cfg.byol_saturation, 1 + cfg.byol_saturation)}),
        ]
        plan.extend(jitter[i] for i in g.permutation(3))
    g = rng.step(4)
    if g.random() < cfg.byol_grayscale_p:
        plan.append(Step("grayscale"))
    g = rng.step(5)
    if g.random() < blur_p:
        plan.append(
            Step("blur2d", {"sigma": g.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max), "width": cfg.byol_blur_width})
        )
    g = rng.step(6)
    if g.random() < solarize_p:
        plan.append(Step("solarize", {"threshold": cfg.byol_solarize_threshold}))
    return plan


def plan_downstream(rng: RngStream, shape: tuple[int, int], cfg: AugmentationConfig) -> list[Step]:
    plan = [
        Step("contrast", {"c": -rng.step(1).uniform(cfg.down_contrast_min, cfg.down_contrast_max)}),
        Step("brightness", {"c": rng.step(2).uniform(cfg.down_brightness_min, cfg.down_brightness_max)}),
        Step("noise", {"mean": 0.0, "std": cfg.down_noise_std, "field": rng.step(3).normal(0.0, cfg.down_noise_std, shape)}),
    ]
    if rng.step(4).random() < cfg.down_flip_p:
        plan.append(Step("flip"))
    return plan


def augment_mmode(pixels: np.ndarray, rng: RngStream, cfg: AugmentationConfig = AugmentationConfig()) -> np.ndarray:
    return apply_plan(pixels, plan_mmode(rng, np.shape(pixels), cfg))


def augment_byol(
    pixels: np.ndarray, rng: RngStream, cfg: AugmentationConfig = AugmentationConfig(), branch: str = "a"
) -> np.ndarray:
    return apply_plan(pixels, plan_byol(rng, np.shape(pixels), cfg, branch))


def augment_downstream(
    pixels: np.ndarray, rng: RngStream, cfg: AugmentationConfig = AugmentationConfig()
) -> np.ndarray:
    return apply_plan(pixels, plan_downstream(rng, np.shape(pixels), cfg))


def augment(
    pixels: np.ndarray, rng: RngStream, cfg: AugmentationConfig, branch: str = "a", pipeline: str | None = None
) -> np.ndarray:
    """Run the pipeline named by ``pipeline`` (default ``cfg.pipeline``)."""
    kind = pipeline or cfg.pipeline
    if kind == "mmode":
        return augment_mmode(pixels, rng, cfg)
    if kind == "byol":
        return augment_byol(pixels, rng, cfg, branch)
    if kind == "downstream":
        return augment_downstream(pixels, rng, cfg)
    raise ConfigError(f"unknown augmentation pipeline {kind!r}")
