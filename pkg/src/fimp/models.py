"""Encoders, fusion classifier and the feature imputation networks."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .rng import stream
from .tensor import Tensor

ModelState = OrderedDict[str, np.ndarray]


class Module:
    """Attribute-registered parameters in definition order."""

    def named_parameters(self, prefix: str = "") -> OrderedDict[str, Tensor]:
        out: OrderedDict[str, Tensor] = OrderedDict()
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    out.update(sub.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.named_parameters().values())

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        if list(params) != list(state):
            missing = set(params) ^ set(state)
            raise DimensionError(f"state keys do not match module parameters: {sorted(missing)[:4]}")
        for k, p in params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{k}: state shape {value.shape} vs parameter shape {p.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x W + b`` with ``W`` stored as (in, out)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int) -> None:
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (128,)
    output_dim: int = 256


class MLPEncoder(Module):
    """MLP with gelu between layers; rows of the output are unit-norm."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        self.input_dim = cfg.input_dim
        dims = [cfg.input_dim, *cfg.hidden_dims, cfg.output_dim]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"encoder expects (B, {self.input_dim}) input, got {x.shape}")
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = T.gelu(h)
        return T.l2_normalize(h)


def _single_key_mix(values: Tensor, heads: int, query: Linear, key: Linear) -> Tensor:
    # One token attends only to itself: every head's softmax runs over a single
    # score and equals 1 exactly, so the mix is the value vector and the
    # query/key projections receive exactly zero gradient.
    if values.shape[-1] % heads:
        raise DimensionError(f"width {values.shape[-1]} not divisible by {heads} heads")
    qk = (query.weight, query.bias, key.weight, key.bias)

    def backward(g):
        return (g, *(np.zeros(p.shape) for p in qk))

    return T.make_op(values.data, (values, *qk), backward)


class SingleTokenAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator) -> None:
        self.heads = heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(_single_key_mix(self.value(x), self.heads, self.query, self.key))


class ImputerBlock(Module):
    """Pre-norm residual pair: attention then feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator) -> None:
        self.norm1 = LayerNorm(dim)
        self.attn = SingleTokenAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn_in = Linear(dim, ffn_dim, rng)
        self.ffn_out = Linear(ffn_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn_out(T.gelu(self.ffn_in(self.norm2(x))))


@dataclass(frozen=True)
class ImputerConfig:
    feature_dim: int = 256
    depth: int = 6
    heads: int = 4
    ffn_dim: int = 1024

    def __post_init__(self) -> None:
        if self.feature_dim % self.heads:
            raise DimensionError(f"feature_dim {self.feature_dim} must be divisible by heads {self.heads}")


class FeatureImputer(Module):
    """Maps one modality's bottleneck feature onto the other's unit sphere."""

    def __init__(self, cfg: ImputerConfig, rng: np.random.Generator) -> None:
        self.feature_dim = cfg.feature_dim
        self.blocks = [ImputerBlock(cfg.feature_dim, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.depth)]

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.feature_dim:
            raise DimensionError(f"imputer expects (B, {self.feature_dim}) features, got {z.shape}")
        for block in self.blocks:
            z = block(z)
        return T.l2_normalize(z)


def fin_parameter_formula(feature_dim: int, depth: int, ffn_dim: int) -> int:
    d, f = feature_dim, ffn_dim
    return depth * (4 * d * d + 4 * d + 2 * d * f + d + f + 2 * (2 * d))


@dataclass(frozen=True)
class ModelConfig:
    image_dim: int = 32
    text_dim: int = 32
    n_labels: int = 5
    bottleneck: int = 256
    encoder_hidden: tuple[int, ...] = (128,)
    imputer: ImputerConfig = field(default_factory=ImputerConfig)

    def __post_init__(self) -> None:
        if self.imputer.feature_dim != self.bottleneck:
            raise DimensionError(
                f"imputer feature_dim {self.imputer.feature_dim} must equal bottleneck {self.bottleneck}"
            )


MAIN_PARTS = ("image_encoder", "text_encoder", "classifier")
IMPUTER_PARTS = ("imputer_text", "imputer_image")


class GlobalModel(Module):
    """Image/text encoders, concat-fusion linear head, and the two imputers.

    ``imputer_text`` predicts text features from image features and
    ``imputer_image`` the reverse.  Imputers may be omitted when an experiment
    does not use them.
    """

    def __init__(self, cfg: ModelConfig, seed: int, with_imputers: bool = True) -> None:
        self.config = cfg
        d = cfg.bottleneck
        self.image_encoder = MLPEncoder(EncoderConfig(cfg.image_dim, cfg.encoder_hidden, d), stream(seed, "init", "image_encoder"))
        self.text_encoder = MLPEncoder(EncoderConfig(cfg.text_dim, cfg.encoder_hidden, d), stream(seed, "init", "text_encoder"))
        self.classifier = Linear(2 * d, cfg.n_labels, stream(seed, "init", "classifier"))
        self.imputer_text: FeatureImputer | None = None
        self.imputer_image: FeatureImputer | None = None
        if with_imputers:
            self.imputer_text = FeatureImputer(cfg.imputer, stream(seed, "init", "imputer_text"))
            self.imputer_image = FeatureImputer(cfg.imputer, stream(seed, "init", "imputer_image"))

    @property
    def has_imputers(self) -> bool:
        return self.imputer_text is not None

    def main_parameters(self) -> OrderedDict[str, Tensor]:
        out: OrderedDict[str, Tensor] = OrderedDict()
        for part in MAIN_PARTS:
            out.update(getattr(self, part).named_parameters(part + "."))
        return out

    def main_state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, p.data.copy()) for k, p in self.main_parameters().items())

    def load_main_state(self, state) -> None:
        params = self.main_parameters()
        if list(params) != list(state):
            raise DimensionError("main-model state keys do not match")
        for k, p in params.items():
            p.data = np.array(state[k], dtype=np.float64, copy=True)


def encode_image(model: GlobalModel, x_image) -> Tensor:
    return model.image_encoder(T.as_tensor(x_image))


def encode_text(model: GlobalModel, x_text) -> Tensor:
    return model.text_encoder(T.as_tensor(x_text))


def fuse_and_classify(model: GlobalModel, z_image: Tensor, z_text: Tensor) -> Tensor:
    """Concatenate (image block first, text block second) and apply the linear head."""
    z_image, z_text = T.as_tensor(z_image), T.as_tensor(z_text)
    d = model.config.bottleneck
    if z_image.shape != z_text.shape or z_image.ndim != 2 or z_image.shape[1] != d:
        raise DimensionError(f"fusion needs two (B, {d}) blocks, got {z_image.shape} and {z_text.shape}")
    return model.classifier(T.concat([z_image, z_text], axis=-1))


def impute(imputer: FeatureImputer, z_source) -> Tensor:
    return imputer(T.as_tensor(z_source))


def count_parameters(part: Module) -> int:
    return int(sum(p.data.size for p in part.parameters()))
