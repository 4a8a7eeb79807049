"""Federated multimodal learning with learned feature imputation for missing modalities."""

from .config import ExperimentConfig, load_config
from .federation import run_experiment
from .imputation import Strategy
from .metrics import macro_auc, roc_auc
from .models import GlobalModel, ModelConfig

__all__ = ["ExperimentConfig", "GlobalModel", "ModelConfig", "Strategy", "load_config", "macro_auc",
           "roc_auc", "run_experiment"]
__version__ = "0.1.0"
