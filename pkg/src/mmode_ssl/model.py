"""Small CNN feature extractor, MLP projector and single-logit classifier head.

Parameters live in a flat, ordered name -> array mapping. Names are prefixed
by their group (``block1.``, ``block2.``, ..., ``projector.``, ``head.``),
which is what the training loop uses to freeze or update parts of the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SPEC_KEY = "meta.encoder_spec"
INIT_SCHEMES = ("random", "pseudo_pretrained")


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class EncoderSpec:
    blocks: tuple[ConvBlock, ...] = (ConvBlock(16), ConvBlock(32), ConvBlock(64), ConvBlock(128))
    in_channels: int = 1

    def __post_init__(self):
        if len(self.blocks) < 2:
            raise ValueError("encoder needs at least two conv blocks")

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1].out_channels

    @classmethod
    def from_channels(cls, channels: Iterable[int], kernel: int = 3, first_stride: int = 1) -> "EncoderSpec":
        channels = list(channels)
        return cls(tuple(ConvBlock(c, kernel, first_stride if i == 0 else 1) for i, c in enumerate(channels)))

    def as_array(self) -> np.ndarray:
        return np.array([[b.out_channels, b.kernel, b.stride] for b in self.blocks], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "EncoderSpec":
        return cls(tuple(ConvBlock(int(c), int(k), int(s)) for c, k, s in np.asarray(arr)))


# Desk-scale preset: ~10x cheaper than the default, used by tests and the CLI default config.
DESK_ENCODER = EncoderSpec.from_channels((8, 16, 32, 64), first_stride=2)


@dataclass(frozen=True)
class ProjectorSpec:
    width: int = 128
    layers: int = 3


@dataclass
class ModelParameters:
    """Ordered named arrays plus the encoder layout they were built for."""

    encoder: EncoderSpec
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self.arrays)
        return [n for n in self.arrays if n.split(".", 1)[0] == group]

    def groups(self) -> list[str]:
        seen: dict[str, None] = {}
        for name in self.arrays:
            seen.setdefault(name.split(".", 1)[0], None)
        return list(seen)

    def extractor_names(self) -> list[str]:
        return [n for n in self.arrays if n.startswith("block")]

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.encoder, {k: v.copy() for k, v in self.arrays.items()})

    def without(self, group: str) -> "ModelParameters":
        return ModelParameters(self.encoder, {k: v for k, v in self.arrays.items() if not k.startswith(group + ".")})

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def to_arrays(self) -> dict[str, np.ndarray]:
        """Flat mapping suitable for the weights file, including the encoder layout."""
        return {SPEC_KEY: self.encoder.as_array(), **self.arrays}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ModelParameters":
        arrays = dict(arrays)
        spec = EncoderSpec.from_array(arrays.pop(SPEC_KEY))
        return cls(spec, {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _scheme_rng(seed: int, scheme: str, part: int) -> np.random.Generator:
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    family = INIT_SCHEMES.index(scheme)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(family, part)))


def initialize(
    seed: int,
    scheme: str = "random",
    encoder: EncoderSpec = EncoderSpec(),
    projector: ProjectorSpec | None = ProjectorSpec(),
    head: bool = False,
) -> ModelParameters:
    """He-initialized weights, zero biases.

    ``pseudo_pretrained`` draws from a separate seed family; it stands in for
    an externally pretrained initialization, which has no analogue here.
    """
    rng = _scheme_rng(seed, scheme, 0)
    arrays: dict[str, np.ndarray] = {}
    c_in = encoder.in_channels
    for i, block in enumerate(encoder.blocks, start=1):
        fan_in = c_in * block.kernel * block.kernel
        arrays[f"block{i}.conv.w"] = _he(rng, (block.out_channels, c_in, block.kernel, block.kernel), fan_in)
        arrays[f"block{i}.conv.b"] = np.zeros(block.out_channels)
        c_in = block.out_channels
    params = ModelParameters(encoder, arrays)
    if projector is not None:
        add_projector(params, seed, scheme, projector)
    if head:
        params = attach_head(params, seed, scheme)
    return params


def add_projector(params: ModelParameters, seed: int, scheme: str = "random", spec: ProjectorSpec = ProjectorSpec()):
    rng = _scheme_rng(seed, scheme, 1)
    fan_in = params.encoder.feature_dim
    for i in range(1, spec.layers + 1):
        params.arrays[f"projector.fc{i}.w"] = _he(rng, (fan_in, spec.width), fan_in)
        params.arrays[f"projector.fc{i}.b"] = np.zeros(spec.width)
        fan_in = spec.width
    return params


def attach_head(params: ModelParameters, seed: int, scheme: str = "random") -> ModelParameters:
    """Drop any projector and append a fresh single-node head; extractor arrays are untouched."""
    out = params.without("projector").without("head")
    rng = _scheme_rng(seed, scheme, 2)
    f = params.encoder.feature_dim
    out.arrays["head.w"] = _he(rng, (f, 1), f)
    out.arrays["head.b"] = np.zeros(1)
    return out


def leaves(params: ModelParameters, trainable: Iterable[str] = ()) -> dict[str, Tensor]:
    trainable = set(trainable)
    return {name: Tensor(arr, requires_grad=name in trainable) for name, arr in params.arrays.items()}


def forward_features(x, weights: Mapping[str, Tensor], encoder: EncoderSpec) -> tuple[Tensor, Tensor]:
    """Run the conv blocks on (N, 1, H, W) input scaled to [0, 1].

    Returns the pooled feature vectors (N, F) and the last block's post-ReLU
    activation map, which Grad-CAM taps.
    """
    h = ad.as_tensor(x)
    if h.ndim != 4 or h.shape[1] != encoder.in_channels:
        raise ValueError(f"expected (N, {encoder.in_channels}, H, W) input, got {h.shape}")
    activation = h
    for i, block in enumerate(encoder.blocks, start=1):
        conv = ad.conv2d(
            h,
            weights[f"block{i}.conv.w"],
            weights[f"block{i}.conv.b"],
            stride=block.stride,
            pad=block.kernel // 2,
        )
        activation = ad.relu(conv)
        h = ad.max_pool2d(activation, 2)
    return ad.global_avg_pool(h), activation


def forward_projector(f, weights: Mapping[str, Tensor]) -> Tensor:
    h = ad.as_tensor(f)
    names = sorted({n.rsplit(".", 1)[0] for n in weights if n.startswith("projector.")})
    for i, layer in enumerate(names):
        w, b = weights[layer + ".w"], weights[layer + ".b"]
        if h.ndim != 2 or h.shape[1] != w.shape[0]:
            raise ValueError(f"{layer}: input {h.shape} does not match weight {w.shape}")
        h = h @ w + b
        if i < len(names) - 1:
            h = ad.relu(h)
    return h


def classifier_logits(f, weights: Mapping[str, Tensor]) -> Tensor:
    f = ad.as_tensor(f)
    w, b = weights["head.w"], weights["head.b"]
    if f.ndim != 2 or f.shape[1] != w.shape[0]:
        raise ValueError(f"head: features {f.shape} do not match weight {w.shape}")
    return ad.reshape(f @ w + b, (f.shape[0],))


def forward_classifier(f, weights: Mapping[str, Tensor]) -> Tensor:
    """Probability of the positive (absent sliding) class, shape (N,)."""
    return ad.sigmoid(classifier_logits(f, weights))


def predict_proba(params: ModelParameters, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference helper on raw 0-255 images of shape (N, H, W)."""
    weights = leaves(params)
    out = []
    for lo in range(0, len(images), batch_size):
        x = to_input(images[lo : lo + batch_size])
        feats, _ = forward_features(x, weights, params.encoder)
        out.append(forward_classifier(feats, weights).data)
    return np.concatenate(out) if out else np.zeros(0)


def to_input(images: np.ndarray) -> np.ndarray:
    """(N, H, W) pixels in [0, 255] -> (N, 1, H, W) float64 in [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    return (images / 255.0)[:, None, :, :]
