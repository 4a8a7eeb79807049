from __future__ import annotations

import numpy as np
import pytest

from fimp.config import ExperimentConfig
from fimp.models import GlobalModel, ImputerConfig, ModelConfig

FD_STEP = 1e-6
FD_RTOL = 1e-4

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def tiny_model_config(**changes) -> ModelConfig:
    base = dict(image_dim=4, text_dim=5, n_labels=3, bottleneck=8, encoder_hidden=(6,),
                imputer=ImputerConfig(feature_dim=8, depth=2, heads=2, ffn_dim=12))
    base.update(changes)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model() -> GlobalModel:
    return GlobalModel(tiny_model_config(), seed=7)


def small_experiment(**changes) -> ExperimentConfig:
    """A seconds-scale federated run with the full protocol structure."""
    base = dict(partition="2:1:2", rounds=2, local_epochs=1, imputer_epochs=1, per_client_n=24, seeds=(0,),
                d_image=6, d_text=6, latent_dim=4, n_labels=3, bottleneck=16, encoder_hidden=(12,),
                imputer_depth=2, imputer_heads=2, imputer_ffn=24, batch_size=8, imputer_batch_size=8, lr=1e-3)
    base.update(changes)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def identity_imputer():
    """Default-architecture imputer fitted to the identity on 256 unit vectors (500 full-batch Adam steps)."""
    from fimp import tensor as T
    from fimp.models import FeatureImputer, impute
    from fimp.optim import Adam
    from fimp.rng import stream

    rng = stream(0, "identity-fit")
    z = rng.normal(size=(256, 256))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    imputer = FeatureImputer(ImputerConfig(), stream(0, "identity-init"))
    opt = Adam(imputer.named_parameters(), lr=1e-3)
    for _ in range(500):
        opt.zero_grad()
        T.mse(impute(imputer, z), z).backward()
        opt.step()
    imputer.zero_grad()
    return imputer, z


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
