"""Ranking metrics, seed aggregation and feature dumps for external plotting."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import IMAGE_BIT, TEXT_BIT, FeatureSet, save_feature_file
from .errors import ConfigurationError, DimensionError, EvaluationError, UndefinedAUCError
from .imputation import ImputationStrategy, Modality, Strategy, fill_missing
from .models import GlobalModel, encode_image, encode_text, fuse_and_classify
from .rng import stream
from .tensor import Tensor, no_grad


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    return (upper - (counts - 1) / 2.0)[inverse]


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("ROC AUC needs at least one positive and one negative label")
    u = midranks(scores)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MacroAUC:
    value: float
    per_label: list[float | None]
    skipped: list[int]


def macro_auc(scores, labels) -> MacroAUC:
    """Unweighted mean of per-column AUCs; single-class columns are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2 or len(scores) < 1:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    per_label: list[float | None] = []
    skipped: list[int] = []
    for j in range(scores.shape[1]):
        try:
            per_label.append(roc_auc(scores[:, j], labels[:, j]))
        except UndefinedAUCError:
            per_label.append(None)
            skipped.append(j)
    defined = [a for a in per_label if a is not None]
    if not defined:
        raise EvaluationError("every label column is single-class; macro AUC undefined")
    return MacroAUC(float(np.mean(defined)), per_label, skipped)


def seed_mean(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and sample standard deviation."""
    if len(values) < 2:
        raise ValueError("seed_mean needs at least two runs")
    return statistics.fmean(values), statistics.stdev(values)


def predict_logits(model: GlobalModel, fs: FeatureSet) -> np.ndarray:
    """Full multimodal path; every sample must carry both modalities."""
    if not (fs.has_image.all() and fs.has_text.all()):
        raise ConfigurationError("evaluation split must be fully multimodal")
    with no_grad():
        return fuse_and_classify(model, encode_image(model, fs.image), encode_text(model, fs.text)).data


def evaluate(model: GlobalModel, fs: FeatureSet) -> MacroAUC:
    return macro_auc(predict_logits(model, fs), fs.labels)


# -- feature dumps --------------------------------------------------------------------
SOURCES = ("real_image", "real_text", "fin", "zero", "uniform")


def feature_rows(model: GlobalModel, fs: FeatureSet, source: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Bottleneck-space rows for one source; fills stand in for the text block."""
    if source not in SOURCES:
        raise ConfigurationError(f"unknown feature source {source!r}; expected one of {SOURCES}")
    needs_text = source == "real_text"
    present = fs.has_text if needs_text else fs.has_image
    if not present.all():
        raise ConfigurationError(f"source {source!r} needs the {'text' if needs_text else 'image'} modality on every sample")
    with no_grad():
        if source == "real_text":
            return encode_text(model, fs.text).data
        z_image = encode_image(model, fs.image)
        if source == "real_image":
            return z_image.data
        kind = {"fin": Strategy.FIN, "zero": Strategy.ZERO, "uniform": Strategy.UNIFORM}[source]
        strategy = ImputationStrategy.for_model(kind, model)
        return fill_missing(strategy, Tensor(z_image.data), Modality.TEXT, rng).data


def dump_features(
    model: GlobalModel,
    fs: FeatureSet,
    sources: str | Sequence[str],
    path: str | Path,
    seed: int = 0,
) -> Path:
    """Write one feature file holding every requested source, plus an index CSV.

    ``real_image`` rows sit in the image slot, all other sources in the text
    slot; labels are copied from the originating sample.  The index file
    ``<path>.index.csv`` maps each row to ``(sample_id, source)``.
    """
    if isinstance(sources, str):
        sources = [sources]
    path = Path(path)
    d = model.config.bottleneck
    blocks, index = [], []
    for source in sources:
        rows = feature_rows(model, fs, source, stream(seed, "dump", source))
        blocks.append((source, rows))
        index.extend((i, source) for i in range(len(fs)))
    n = sum(len(rows) for _, rows in blocks)
    image, text = np.zeros((n, d)), np.zeros((n, d))
    mask = np.zeros(n, dtype=np.uint8)
    labels = np.concatenate([fs.labels for _ in blocks]) if blocks else np.zeros((0, fs.n_labels), np.uint8)
    start = 0
    for source, rows in blocks:
        stop = start + len(rows)
        if source == "real_image":
            image[start:stop], mask[start:stop] = rows, IMAGE_BIT
        else:
            text[start:stop], mask[start:stop] = rows, TEXT_BIT
        start = stop
    save_feature_file(path, FeatureSet(image, text, labels, mask))
    index_path = path.with_name(path.name + ".index.csv")
    with index_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "sample_id", "source"])
        for row, (sample_id, source) in enumerate(index):
            writer.writerow([row, sample_id, source])
    return index_path
