import csv
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fimp.data import GeneratorConfig, generate_samples, load_feature_file
from fimp.errors import EvaluationError, UndefinedAUCError
from fimp.metrics import SOURCES, dump_features, macro_auc, midranks, roc_auc, seed_mean
from fimp.models import GlobalModel

from conftest import tiny_model_config


def brute_force_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def random_instance(rng):
    n = int(rng.integers(2, 21))
    labels = rng.integers(0, 2, size=n)
    labels[rng.choice(n, 2, replace=False)] = [0, 1]
    scores = rng.integers(0, 5, size=n).astype(float)  # coarse grid forces ties
    return scores, labels


def test_examples():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.9, 0.1], [0, 1]) == 0.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(UndefinedAUCError):
        roc_auc([0.1, 0.2], [1, 1])


def test_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        scores, labels = random_instance(rng)
        assert roc_auc(scores, labels) == brute_force_auc(scores, labels)


def test_midranks_of_ties():
    assert midranks(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_invariant_under_increasing_transforms(seed):
    rng = np.random.default_rng(seed)
    scores, labels = random_instance(rng)
    scores = scores + rng.normal(size=len(scores)) * 0.1
    base = roc_auc(scores, labels)
    assert roc_auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-15)
    assert roc_auc(3 * scores + 7, labels) == pytest.approx(base, abs=1e-15)
    # tie-free complement
    assert base + roc_auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


def test_macro_examples_and_skipping():
    labels = np.array([[0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]])
    scores = np.array([[0.1, 0.5, 0.3], [0.9, 0.5, 0.2], [0.2, 0.5, 0.9], [0.8, 0.5, 0.1]])
    result = macro_auc(scores, labels)
    assert result.value == 0.75
    assert result.per_label[:2] == [1.0, 0.5]
    assert result.skipped == [2] and result.per_label[2] is None
    perfect = macro_auc(labels[:, :2].astype(float), labels[:, :2])
    assert perfect.value == 1.0
    with pytest.raises(EvaluationError):
        macro_auc(np.zeros((2, 1)), np.ones((2, 1)))


def test_macro_auc_null_distribution():
    rng = np.random.default_rng(1)
    result = macro_auc(rng.random((10_000, 5)), rng.integers(0, 2, (10_000, 5)))
    assert abs(result.value - 0.5) <= 0.02


def test_macro_auc_column_permutation_invariant():
    rng = np.random.default_rng(2)
    s, y = rng.random((200, 5)), rng.integers(0, 2, (200, 5))
    perm = rng.permutation(5)
    assert macro_auc(s[:, perm], y[:, perm]).value == pytest.approx(macro_auc(s, y).value, abs=1e-15)


def test_seed_mean():
    assert seed_mean([1, 2, 3]) == (2.0, 1.0)
    assert seed_mean([0.7, 0.7, 0.7])[1] == 0.0
    rng = np.random.default_rng(3)
    for _ in range(3):
        x = rng.random(3).tolist()
        m = (x[0] + x[1] + x[2]) / 3
        sd = (sum((v - m) ** 2 for v in x) / 2) ** 0.5
        assert seed_mean(x) == pytest.approx((m, sd), abs=1e-15)
    with pytest.raises(ValueError):
        seed_mean([1.0])


def test_dump_features(tmp_path):
    model = GlobalModel(tiny_model_config(image_dim=6, text_dim=6), seed=1)
    fs = generate_samples(GeneratorConfig(d_image=6, d_text=6, n_labels=3), 12)
    index = dump_features(model, fs, SOURCES, tmp_path / "dump.bin")
    out = load_feature_file(tmp_path / "dump.bin")
    with index.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(out) == len(rows) == 5 * len(fs)
    by_source = {s: np.array([int(r["row"]) for r in rows if r["source"] == s]) for s in SOURCES}
    assert all(len(v) == len(fs) for v in by_source.values())
    assert not out.text[by_source["zero"]].any()
    assert np.allclose(np.linalg.norm(out.text[by_source["real_text"]], axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(out.image[by_source["real_image"]], axis=1), 1.0, atol=1e-9)
    assert not np.allclose(np.linalg.norm(out.text[by_source["uniform"]], axis=1), 1.0, atol=1e-3)
    assert np.array_equal(out.labels[by_source["fin"]], fs.labels)
    assert statistics.fmean(out.text[by_source["uniform"]].ravel()) > 0.3
