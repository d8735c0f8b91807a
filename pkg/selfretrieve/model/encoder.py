from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from selfretrieve.exceptions import ConfigurationError, NormalizationError
from selfretrieve.image.image import Image
from selfretrieve.model.tensor import (
    NORM_EPS,
    Tensor,
    conv2d,
    global_avg_pool,
    l2_normalize,
    linear,
    max_pool2d,
    no_grad,
    relu,
)

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator

log = logging.getLogger(__name__)
log.setLevel(os.getenv("SELFRETRIEVE_LOG_ENCODER", "NOTSET"))

# CroW spatial weighting exponents and the guard on the channel sparsity ratio
CROW_A = 2
CROW_B = 2
CROW_EPS = 1e-12

CONV_RE = re.compile(r"^conv(\d+)\.weight$")


@dataclass
class EncoderConfig:
    """Architecture of the convolutional encoder and its projection head.

    A 2x2 max-pool follows every convolution except the last one.
    """

    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    projection_dim: int = 32
    input_side: int = 32
    seed: int | None = None

    def __post_init__(self) -> None:
        self.channels = tuple(self.channels)
        if self.in_channels < 1 or not self.channels or min(self.channels) < 1:
            raise ConfigurationError("channel counts must be positive", "encoder.channels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel size must be a positive odd integer", "encoder.kernel_size")
        if self.projection_dim < 1:
            raise ConfigurationError("projection dimension must be positive", "encoder.projection_dim")
        if self.input_side < 2 ** (len(self.channels) - 1):
            raise ConfigurationError("input side too small for the pooling stack", "encoder.input_side")


class EncoderParams:
    """Named trainable tensors of the encoder.

    Tensor names follow ``conv{i}.weight`` / ``conv{i}.bias`` for the convolution stack, ``head1`` and
    ``head2`` for the projection head and ``boost`` for the fully connected layer appended by self-boosting.
    The architecture is fully determined by the tensor shapes.
    """

    VERSION = 1

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = {
            name: Tensor(np.asarray(value), requires_grad=True, name=name) for name, value in tensors.items()
        }
        self.validate()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    @classmethod
    def initialize(cls, config: EncoderConfig, rng: np.random.Generator, dtype: type = np.float32) -> EncoderParams:
        """Create parameters with uniform He-style fan-in scaling and zero biases."""
        tensors = {}
        in_channels = config.in_channels
        k = config.kernel_size
        for index, out_channels in enumerate(config.channels, start=1):
            bound = np.sqrt(6.0 / (in_channels * k * k))
            tensors[f"conv{index}.weight"] = rng.uniform(-bound, bound, (out_channels, in_channels, k, k))
            tensors[f"conv{index}.bias"] = np.zeros(out_channels)
            in_channels = out_channels

        dim = config.channels[-1]
        for name, (fan_in, fan_out) in (("head1", (dim, dim)), ("head2", (dim, config.projection_dim))):
            bound = np.sqrt(6.0 / fan_in)
            tensors[f"{name}.weight"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            tensors[f"{name}.bias"] = np.zeros(fan_out)

        return cls({name: value.astype(dtype) for name, value in tensors.items()})

    def validate(self) -> None:
        if not self.conv_layers:
            raise ConfigurationError("encoder has no convolution layers")

        in_channels = self.in_channels
        for weight, bias in self.conv_layers:
            shape = self.tensors[weight].shape
            if len(shape) != 4 or shape[1] != in_channels or shape[2] != shape[3]:
                raise ConfigurationError(f"inconsistent shape {shape}", weight)
            if self.tensors[bias].shape != (shape[0],):
                raise ConfigurationError(f"inconsistent shape {self.tensors[bias].shape}", bias)
            in_channels = shape[0]

        fan_in = self.feature_dim
        for layer in ("head1", "head2"):
            fan_in = self._check_affine(layer, fan_in)
        if self.has_boost:
            self._check_affine("boost", self.feature_dim, self.feature_dim)

        for name, tensor in self.tensors.items():
            if not np.isfinite(tensor.data).all():
                raise ConfigurationError("non-finite values", name)

    def _check_affine(self, layer: str, fan_in: int, fan_out: int | None = None) -> int:
        weight, bias = f"{layer}.weight", f"{layer}.bias"
        if weight not in self.tensors or bias not in self.tensors:
            raise ConfigurationError("missing layer", layer)

        shape = self.tensors[weight].shape
        if len(shape) != 2 or shape[0] != fan_in or (fan_out is not None and shape[1] != fan_out):
            raise ConfigurationError(f"inconsistent shape {shape}", weight)
        if self.tensors[bias].shape != (shape[1],):
            raise ConfigurationError(f"inconsistent shape {self.tensors[bias].shape}", bias)
        return shape[1]

    @property
    def conv_layers(self) -> list[tuple[str, str]]:
        indices = sorted(int(m.group(1)) for name in self.tensors if (m := CONV_RE.match(name)))
        return [(f"conv{i}.weight", f"conv{i}.bias") for i in indices]

    @property
    def in_channels(self) -> int:
        return self.tensors[self.conv_layers[0][0]].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.tensors[self.conv_layers[-1][0]].shape[0]

    @property
    def projection_dim(self) -> int:
        return self.tensors["head2.weight"].shape[1]

    @property
    def has_boost(self) -> bool:
        return "boost.weight" in self.tensors

    def state(self) -> dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.tensors.items()}

    def copy(self) -> EncoderParams:
        return EncoderParams({name: value.copy() for name, value in self.state().items()})

    def astype(self, dtype: type) -> EncoderParams:
        return EncoderParams({name: value.astype(dtype) for name, value in self.state().items()})

    def named_parameters(self, prefixes: Iterable[str] | None = None) -> dict[str, Tensor]:
        if prefixes is None:
            return dict(self.tensors)
        prefixes = tuple(prefixes)
        return {name: tensor for name, tensor in self.tensors.items() if name.startswith(prefixes)}

    def with_boost_layer(self) -> EncoderParams:
        """Return a copy with an identity-initialized fully connected layer appended to the pooling."""
        state = {name: value.copy() for name, value in self.state().items()}
        dtype = state["conv1.weight"].dtype if "conv1.weight" in state else np.float32
        state["boost.weight"] = np.eye(self.feature_dim, dtype=dtype)
        state["boost.bias"] = np.zeros(self.feature_dim, dtype=dtype)
        return EncoderParams(state)

    def equals(self, other: EncoderParams) -> bool:
        """Bit-exact comparison of names, shapes, dtypes and values."""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.state().values(), other.state().values())
        )


class CrowPooled(NamedTuple):
    vector: np.ndarray
    degenerate: bool


def image_to_array(image: Image, dtype: type = np.float32) -> np.ndarray:
    """Convert an image to a ``(3, H, W)`` array in [0, 1]; grayscale is replicated to three channels."""
    data = image.as_float(np.dtype(dtype).type)
    if image.channels == 1:
        data = np.repeat(data, 3, axis=2)
    return np.ascontiguousarray(data.transpose(2, 0, 1))


def forward_features(params: EncoderParams, images: Tensor | np.ndarray | Image) -> Tensor:
    """Run the convolution stack, returning ``(N, C, H', W')`` feature maps.

    A single :class:`Image` or a ``(C, H, W)`` array is treated as a batch of one.
    """
    if isinstance(images, Image):
        images = image_to_array(images, params[params.conv_layers[0][0]].dtype)
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim == 3:
        x = Tensor(x.data[None])

    if x.shape[1] != params.in_channels:
        raise ConfigurationError(f"input has {x.shape[1]} channels, encoder expects {params.in_channels}")

    layers = params.conv_layers
    for index, (weight, bias) in enumerate(layers):
        w = params[weight]
        x = relu(conv2d(x, w, params[bias], padding=w.shape[-1] // 2))
        if index < len(layers) - 1:
            x = max_pool2d(x)
    return x


def crow_pool(fmap: np.ndarray) -> CrowPooled:
    """Cross-dimensional weighted sum pooling of a non-negative ``(C, H, W)`` feature map.

    Spatial weights are the channel-summed map normalized by its ``CROW_A``-norm and raised to
    ``1 / CROW_B``. Channel weights are ``log(sum(Q) / Q_c)`` where ``Q_c`` is the fraction of non-zero
    responses of channel ``c``. A map whose only active channel gets weight zero is degenerate, like an all
    zero map.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValueError(f"Expected a (C, H, W) feature map, got shape {fmap.shape}")

    spatial = fmap.sum(axis=0)
    norm = np.power((spatial**CROW_A).sum(), 1.0 / CROW_A)
    if norm <= 0:
        log.warning("Degenerate pooling: feature map is all zero")
        return CrowPooled(np.zeros(fmap.shape[0]), True)

    alpha = np.power(spatial / norm, 1.0 / CROW_B)

    nonzero = (fmap > 0).reshape(fmap.shape[0], -1).mean(axis=1)
    # A channel holding every response gets a weight of exactly zero, never below
    beta = np.maximum(np.log((nonzero.sum() + CROW_EPS) / (nonzero + CROW_EPS)), 0.0)

    vector = beta * (fmap * alpha).sum(axis=(1, 2))
    if not vector.any():
        log.warning("Degenerate pooling: a single channel carries all responses")
        return CrowPooled(np.zeros(fmap.shape[0]), True)
    return CrowPooled(vector, False)


def crow_pool_batch(fmaps: np.ndarray) -> np.ndarray:
    """Apply :func:`crow_pool` to every map of a ``(N, C, H, W)`` batch; degenerate rows stay zero."""
    return np.stack([crow_pool(fmap).vector for fmap in fmaps])


def projection_logits(params: EncoderParams, pooled: Tensor) -> Tensor:
    """Affine, ReLU and affine map of ``(N, D)`` pooled features, before normalization."""
    hidden = relu(linear(pooled, params["head1.weight"], params["head1.bias"]))
    return linear(hidden, params["head2.weight"], params["head2.bias"])


def projection_head(params: EncoderParams, pooled: Tensor) -> Tensor:
    """Row-wise l2 normalization of :func:`projection_logits`."""
    return l2_normalize(projection_logits(params, pooled))


def project(params: EncoderParams, pooled: np.ndarray) -> np.ndarray:
    """Project a single pooled vector of length ``D`` to a unit embedding of length ``P``.

    Raises:
        NormalizationError: If the projected vector is zero; callers skip such samples.
    """
    pooled = np.asarray(pooled)
    if pooled.shape != (params.feature_dim,):
        raise ConfigurationError(f"pooled vector has shape {pooled.shape}, expected ({params.feature_dim},)")

    with no_grad():
        return projection_head(params, Tensor(pooled[None].astype(params["head1.weight"].dtype))).data[0]


def embed_regions(params: EncoderParams, views: Tensor | np.ndarray) -> Tensor:
    """Unit embeddings of a batch of region views as used inside the contrastive loss."""
    return projection_head(params, global_avg_pool(forward_features(params, views)))


def embed_regions_raw(params: EncoderParams, views: Tensor | np.ndarray) -> Tensor:
    """Embeddings of a batch of region views before normalization; zero rows are left to the caller."""
    return projection_logits(params, global_avg_pool(forward_features(params, views)))


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if (norms < NORM_EPS).any():
        raise NormalizationError("Cannot normalize zero vector")
    return vectors / norms


def crow_descriptors(params: EncoderParams, images: Iterable[Image]) -> np.ndarray:
    """Raw CroW vectors of whole images, which may differ in size."""
    rows = []
    for image in images:
        with no_grad():
            fmap = forward_features(params, image).data[0]
        rows.append(crow_pool(fmap).vector)
    return np.stack(rows)


def finalize_descriptors(params: EncoderParams, pooled: np.ndarray, variant: str = "initial") -> np.ndarray:
    """Turn raw CroW vectors into unit retrieval descriptors.

    The initial descriptor is the l2-normalized CroW vector. The boosted descriptor passes the CroW vector
    through the appended fully connected layer before normalization.
    """
    if variant not in ("initial", "boosted"):
        raise ValueError(f"Unknown descriptor variant: {variant}")
    if variant == "boosted" and not params.has_boost:
        raise ConfigurationError("boosted descriptors requested but the encoder has no boost layer")

    pooled = np.array(pooled, dtype=np.float64)
    if variant == "boosted":
        pooled = pooled @ params["boost.weight"].data.astype(np.float64) + params["boost.bias"].data

    degenerate = np.linalg.norm(pooled, axis=1) < NORM_EPS
    if degenerate.any():
        log.warning("Replacing %d degenerate descriptors with the uniform unit vector", int(degenerate.sum()))
        pooled[degenerate] = 1.0
    return normalize_rows(pooled).astype(np.float32)


def describe(
    params: EncoderParams, images: np.ndarray | Image | Iterable[Image], variant: str = "initial"
) -> np.ndarray:
    """Retrieval descriptors for whole images, one row per image.

    ``images`` is a ``(N, C, H, W)`` batch, a single image or an iterable of images of any size.
    """
    if isinstance(images, np.ndarray):
        with no_grad():
            pooled = crow_pool_batch(forward_features(params, images).data)
    else:
        pooled = crow_descriptors(params, [images] if isinstance(images, Image) else images)
    return finalize_descriptors(params, pooled, variant)
