"""Strategies for filling the feature block of a missing modality."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .models import FeatureImputer, GlobalModel, impute
from .tensor import Tensor, no_grad


class Strategy(str, enum.Enum):
    ZERO = "zero"
    UNIFORM = "uniform"
    FIN = "fin"

    @classmethod
    def parse(cls, value: str | Strategy) -> Strategy:
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ConfigurationError(f"unknown imputation strategy {value!r} (expected one of {choices})") from None


class Modality(str, enum.Enum):
    IMAGE = "image"
    TEXT = "text"


@dataclass(frozen=True)
class ImputationStrategy:
    kind: Strategy
    imputer_text: FeatureImputer | None = None
    imputer_image: FeatureImputer | None = None

    @classmethod
    def for_model(cls, kind: Strategy | str, model: GlobalModel) -> ImputationStrategy:
        kind = Strategy.parse(kind)
        if kind is Strategy.FIN:
            return cls(kind, model.imputer_text, model.imputer_image)
        return cls(kind)


def fill_missing(
    strategy: ImputationStrategy,
    available: Tensor,
    missing: Modality | str,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Return a stand-in block for the ``missing`` modality.

    The result never carries gradient: zero and uniform blocks are constants,
    and imputer outputs are computed in inference mode so neither the imputer
    nor the available-modality encoder is trained through this branch.
    """
    missing = Modality(missing)
    if available.ndim != 2 or available.shape[0] < 1:
        raise DimensionError(f"available feature block must be (B>=1, d), got {available.shape}")
    shape = available.shape
    if strategy.kind is Strategy.ZERO:
        return Tensor(np.zeros(shape))
    if strategy.kind is Strategy.UNIFORM:
        if rng is None:
            raise ConfigurationError("uniform filling needs an RNG stream")
        return Tensor(rng.random(shape))
    imputer = strategy.imputer_text if missing is Modality.TEXT else strategy.imputer_image
    if imputer is None:
        raise ConfigurationError(f"feature imputation requested but no {missing.value} imputer is available")
    with no_grad():
        out = impute(imputer, Tensor(available.data))
    return Tensor(out.data)
