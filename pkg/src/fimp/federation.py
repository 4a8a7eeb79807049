"""Round-based federated training with selective imputer aggregation.

One round: the server dispatches a copy of the global state to every client;
each client trains locally (multimodal clients additionally fit both
imputers on their pool of paired bottleneck features); the server averages
main-model parameters over all clients and imputer parameters over
multimodal clients only, weighting by local sample counts.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .data import (
    ClientSpec,
    FeatureSet,
    Profile,
    Splits,
    client_data,
    generate_samples,
    load_feature_file,
    partition_clients,
    split_dataset,
)
from .errors import ConfigurationError, InconsistentStateError
from .imputation import ImputationStrategy, Modality, Strategy, fill_missing
from .metrics import MacroAUC, evaluate
from .models import GlobalModel, ModelState, encode_image, encode_text, fuse_and_classify, impute
from .optim import Adam
from .rng import stream
from .state import save_checkpoint, serialized_size

log = logging.getLogger(__name__)


class NonFiniteError(RuntimeError):
    """A parameter became NaN or infinite during local training."""


@dataclass(frozen=True)
class TrainSchedule:
    local_epochs: int = 3
    imputer_epochs: int = 3
    lr: float = 1e-4
    batch_size: int = 32
    imputer_batch_size: int = 64

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> TrainSchedule:
        return cls(cfg.local_epochs, cfg.imputer_epochs, cfg.lr, cfg.batch_size, cfg.imputer_batch_size)


@dataclass
class ClientUpdate:
    client_id: int
    profile: Profile
    main: ModelState
    n_samples: int
    loss: float
    loss_trace: list[float] = field(default_factory=list)
    imputer_text: ModelState | None = None
    imputer_image: ModelState | None = None
    imputer_mse: float | None = None

    @property
    def has_imputers(self) -> bool:
        return self.imputer_text is not None

    def upload_bytes(self) -> int:
        size = serialized_size(self.main)
        if self.has_imputers:
            size += serialized_size(self.imputer_text) + serialized_size(self.imputer_image)
        return size


@dataclass
class RoundReport:
    round: int
    client_losses: dict[int, float]
    val: MacroAUC
    test: MacroAUC
    imputer_mse: float | None
    bytes_up: int
    bytes_down: int

    @property
    def mean_client_loss(self) -> float:
        return float(np.mean(list(self.client_losses.values()))) if self.client_losses else math.nan


@dataclass
class ServerState:
    model: GlobalModel
    clients: list[ClientSpec]
    strategy: Strategy
    round_index: int = 0

    @property
    def weights(self) -> dict[int, float]:
        total = sum(c.n_samples for c in self.clients)
        return {c.id: c.n_samples / total for c in self.clients}


# -- dispatch ---------------------------------------------------------------------------
def dispatch(server: ServerState) -> list[GlobalModel]:
    """One independent deep copy of the full global state per client."""
    return [copy.deepcopy(server.model) for _ in server.clients]


def download_bytes(server: ServerState) -> int:
    """Bytes one client receives per round."""
    size = serialized_size(server.model.main_state())
    if server.strategy is Strategy.FIN:
        size += serialized_size(server.model.imputer_text.state_dict())
        size += serialized_size(server.model.imputer_image.state_dict())
    return size


# -- local training -----------------------------------------------------------------------
def _batches(rng: np.random.Generator, n: int, size: int):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start : start + size]


def _check_finite(model: GlobalModel, client_id: int, round_index: int) -> None:
    for name, p in model.named_parameters().items():
        if not np.isfinite(p.data).all():
            raise NonFiniteError(f"non-finite values in {name} at client {client_id}, round {round_index}")


def multimodal_loss(model: GlobalModel, x_image, x_text, labels) -> T.Tensor:
    logits = fuse_and_classify(model, encode_image(model, x_image), encode_text(model, x_text))
    return T.bce_with_logits(logits, labels.astype(np.float64))


def unimodal_loss(
    model: GlobalModel,
    profile: Profile,
    x,
    labels,
    strategy: ImputationStrategy,
    rng: np.random.Generator | None,
) -> T.Tensor:
    if profile is Profile.IMAGE_ONLY:
        z = encode_image(model, x)
        logits = fuse_and_classify(model, z, fill_missing(strategy, z, Modality.TEXT, rng))
    elif profile is Profile.TEXT_ONLY:
        z = encode_text(model, x)
        logits = fuse_and_classify(model, fill_missing(strategy, z, Modality.IMAGE, rng), z)
    else:
        raise ConfigurationError(f"unimodal training called for a {profile.value} client")
    return T.bce_with_logits(logits, labels.astype(np.float64))


def _train_imputer(imputer, source: np.ndarray, target: np.ndarray, schedule: TrainSchedule, rng) -> float:
    opt = Adam(imputer.named_parameters(), lr=schedule.lr)
    for _ in range(schedule.imputer_epochs):
        for idx in _batches(rng, len(source), schedule.imputer_batch_size):
            opt.zero_grad()
            T.mse(impute(imputer, source[idx]), target[idx]).backward()
            opt.step()
    imputer.zero_grad()
    with T.no_grad():
        return T.mse(impute(imputer, source), target).item()


def local_train_multimodal(
    client: ClientSpec,
    data: FeatureSet,
    model: GlobalModel,
    schedule: TrainSchedule,
    strategy: Strategy,
    seed: int,
    round_index: int,
) -> ClientUpdate:
    """Phase 1 trains encoders and head; phase 2 (FIN only) fits both imputers on frozen features."""
    if client.profile is not Profile.MULTIMODAL:
        raise ConfigurationError(f"client {client.id} is {client.profile.value}, not multimodal")
    n = len(data)
    if n == 0:
        raise ConfigurationError(f"client {client.id} has an empty partition")

    opt = Adam(model.main_parameters(), lr=schedule.lr)
    rng = stream(seed, "phase1", client.id, round_index)
    trace = []
    for _ in range(schedule.local_epochs):
        total = 0.0
        for idx in _batches(rng, n, schedule.batch_size):
            opt.zero_grad()
            loss = multimodal_loss(model, data.image[idx], data.text[idx], data.labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        trace.append(total / n)
    model.zero_grad()
    with T.no_grad():
        end_loss = multimodal_loss(model, data.image, data.text, data.labels).item()

    update = ClientUpdate(client.id, client.profile, model.main_state(), n, end_loss, trace)
    if strategy is Strategy.FIN:
        with T.no_grad():
            pool_image = encode_image(model, data.image).data
            pool_text = encode_text(model, data.text).data
        mse_text = _train_imputer(model.imputer_text, pool_image, pool_text, schedule,
                                  stream(seed, "phase2", "text", client.id, round_index))
        mse_image = _train_imputer(model.imputer_image, pool_text, pool_image, schedule,
                                   stream(seed, "phase2", "image", client.id, round_index))
        update.imputer_text = model.imputer_text.state_dict()
        update.imputer_image = model.imputer_image.state_dict()
        update.imputer_mse = 0.5 * (mse_text + mse_image)
    return update


def local_train_unimodal(
    client: ClientSpec,
    data: FeatureSet,
    model: GlobalModel,
    schedule: TrainSchedule,
    strategy: Strategy,
    seed: int,
    round_index: int,
) -> ClientUpdate:
    """Train the present encoder and the head; the missing block comes from ``strategy``."""
    if client.profile is Profile.MULTIMODAL:
        raise ConfigurationError(f"client {client.id} is multimodal; use local_train_multimodal")
    if strategy is Strategy.FIN and not model.has_imputers:
        raise ConfigurationError("feature imputation requested but the model carries no imputers")
    n = len(data)
    if n == 0:
        raise ConfigurationError(f"client {client.id} has an empty partition")
    image_side = client.profile is Profile.IMAGE_ONLY
    encoder_name = "image_encoder" if image_side else "text_encoder"
    x = data.image if image_side else data.text
    fill = ImputationStrategy.for_model(strategy, model)

    params = OrderedDict()
    params.update(getattr(model, encoder_name).named_parameters(encoder_name + "."))
    params.update(model.classifier.named_parameters("classifier."))
    opt = Adam(params, lr=schedule.lr)
    rng = stream(seed, "phase1", client.id, round_index)
    fill_rng = stream(seed, "fill", client.id, round_index)
    trace = []
    for _ in range(schedule.local_epochs):
        total = 0.0
        for idx in _batches(rng, n, schedule.batch_size):
            opt.zero_grad()
            loss = unimodal_loss(model, client.profile, x[idx], data.labels[idx], fill, fill_rng)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        trace.append(total / n)
    model.zero_grad()
    with T.no_grad():
        end_loss = unimodal_loss(model, client.profile, x, data.labels, fill,
                                 stream(seed, "fill-eval", client.id, round_index)).item()
    return ClientUpdate(client.id, client.profile, model.main_state(), n, end_loss, trace)


def local_train(client, data, model, schedule, strategy, seed, round_index) -> ClientUpdate:
    fn = local_train_multimodal if client.profile is Profile.MULTIMODAL else local_train_unimodal
    update = fn(client, data, model, schedule, strategy, seed, round_index)
    _check_finite(model, client.id, round_index)
    return update


# -- aggregation ------------------------------------------------------------------------
def _tree_sum(arrays: list[np.ndarray]) -> np.ndarray:
    while len(arrays) > 1:
        paired = [arrays[i] + arrays[i + 1] for i in range(0, len(arrays) - 1, 2)]
        if len(arrays) % 2:
            paired.append(arrays[-1])
        arrays = paired
    return arrays[0]


def weighted_average(states: Sequence[Mapping[str, np.ndarray]], counts: Sequence[int]) -> ModelState:
    """Sample-count weighted mean, written as ``first + sum_c w_c (state_c - first)``.

    The offset form keeps identical inputs bitwise identical; callers fix the
    order of ``states`` so the pairwise summation tree never changes.
    """
    if not states:
        raise InconsistentStateError("nothing to aggregate")
    total = float(sum(counts))
    weights = [c / total for c in counts]
    ref = states[0]
    out: ModelState = OrderedDict()
    for key, base in ref.items():
        for s in states[1:]:
            if s[key].shape != base.shape:
                raise InconsistentStateError(f"{key}: shapes {s[key].shape} and {base.shape} differ across clients")
        out[key] = base + _tree_sum([w * (s[key] - base) for w, s in zip(weights, states)])
    return out


def fedavg_aggregate(server: ServerState, updates: Sequence[ClientUpdate]) -> ServerState:
    """Main model over every client, imputers over multimodal clients only."""
    if not updates:
        raise InconsistentStateError("fedavg_aggregate needs at least one update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    for u in ordered:
        if u.has_imputers != (u.profile is Profile.MULTIMODAL and server.strategy is Strategy.FIN):
            raise InconsistentStateError(f"client {u.client_id}: imputer upload does not match its profile")
    server.model.load_main_state(weighted_average([u.main for u in ordered], [u.n_samples for u in ordered]))
    carriers = [u for u in ordered if u.has_imputers]
    if carriers:
        counts = [u.n_samples for u in carriers]
        server.model.imputer_text.load_state_dict(weighted_average([u.imputer_text for u in carriers], counts))
        server.model.imputer_image.load_state_dict(weighted_average([u.imputer_image for u in carriers], counts))
    server.round_index += 1
    return server


# -- experiment driver --------------------------------------------------------------------
def build_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    n_clients = sum(cfg.counts)
    need = n_clients * cfg.per_client_n * (2 if cfg.heterogeneous else 1)
    if cfg.features:
        fs = load_feature_file(cfg.features)
        if not (fs.has_image.all() and fs.has_text.all()):
            raise ConfigurationError(f"{cfg.features}: ingested features must carry both modalities on every sample")
        if (fs.d_image, fs.d_text, fs.n_labels) != (cfg.d_image, cfg.d_text, cfg.n_labels):
            raise ConfigurationError(
                f"{cfg.features}: dimensions {(fs.d_image, fs.d_text, fs.n_labels)} disagree with config "
                f"{(cfg.d_image, cfg.d_text, cfg.n_labels)}"
            )
    else:
        fs = generate_samples(cfg.generator_config(seed), math.ceil(need / 0.7) + 2)
    return split_dataset(fs, seed)


def init_server(cfg: ExperimentConfig, seed: int, splits: Splits) -> ServerState:
    strategy = cfg.strategy
    if strategy is Strategy.FIN and cfg.counts[2] == 0:
        raise ConfigurationError(f"feature imputation needs at least one multimodal client, partition is {cfg.partition}")
    clients = partition_clients(splits.train, cfg.partition, cfg.per_client_n, cfg.heterogeneous, seed, cfg.dirichlet_alpha)
    model = GlobalModel(cfg.model_config(), seed, with_imputers=strategy is Strategy.FIN)
    return ServerState(model, clients, strategy)


def checkpoint_sections(model: GlobalModel) -> dict[str, ModelState]:
    sections: dict[str, ModelState] = {"main": model.main_state()}
    if model.has_imputers:
        sections["imputer_text"] = model.imputer_text.state_dict()
        sections["imputer_image"] = model.imputer_image.state_dict()
        sections["meta"] = OrderedDict(imputer_heads=np.array([float(model.config.imputer.heads)]))
    return sections


@dataclass
class ExperimentResult:
    seed: int
    reports: list[RoundReport]
    server: ServerState

    @property
    def best(self) -> RoundReport:
        """Round with the highest validation macro AUC (earliest on ties)."""
        return max(self.reports, key=lambda r: (r.val.value, -r.round))


def run_experiment(
    cfg: ExperimentConfig,
    seed: int,
    workers: int = 1,
    checkpoint_path: str | Path | None = None,
    on_round: Callable[[RoundReport, ServerState], None] | None = None,
) -> ExperimentResult:
    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")
    splits = build_splits(cfg, seed)
    server = init_server(cfg, seed, splits)
    schedule = TrainSchedule.from_config(cfg)
    shards = {c.id: client_data(splits.train, c) for c in server.clients}
    reports: list[RoundReport] = []

    if cfg.rounds == 0:
        reports.append(RoundReport(0, {}, evaluate(server.model, splits.val), evaluate(server.model, splits.test), None, 0, 0))

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(1, cfg.rounds + 1):
            def work(client: ClientSpec) -> ClientUpdate:
                model = copy.deepcopy(server.model)
                return local_train(client, shards[client.id], model, schedule, server.strategy, seed, r)

            updates = list(pool.map(work, server.clients)) if pool else [work(c) for c in server.clients]
            down = download_bytes(server) * len(server.clients)
            up = sum(u.upload_bytes() for u in updates)
            fedavg_aggregate(server, updates)
            mses = [u.imputer_mse for u in updates if u.imputer_mse is not None]
            report = RoundReport(
                r,
                {u.client_id: u.loss for u in updates},
                evaluate(server.model, splits.val),
                evaluate(server.model, splits.test),
                float(np.mean(mses)) if mses else None,
                up,
                down,
            )
            reports.append(report)
            log.info("seed %d round %d: val %.4f test %.4f", seed, r, report.val.value, report.test.value)
            if on_round:
                on_round(report, server)
    finally:
        if pool:
            pool.shutdown()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, checkpoint_sections(server.model))
    return ExperimentResult(seed, reports, server)


# -- report files ----------------------------------------------------------------------------
ROUND_HEADER = ["round", "val_macro_auc", "test_macro_auc", "mean_client_loss", "imputer_mse",
                "bytes_up", "bytes_down", "client_losses"]
METRIC_HEADER = ["round", "split", "macro_auc", "per_label_auc", "skipped_labels"]


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def rounds_csv(reports: Sequence[RoundReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUND_HEADER)
    for r in reports:
        losses = ";".join(f"{cid}={_fmt(v)}" for cid, v in sorted(r.client_losses.items()))
        writer.writerow([r.round, _fmt(r.val.value), _fmt(r.test.value), _fmt(r.mean_client_loss if r.client_losses else None),
                         _fmt(r.imputer_mse), r.bytes_up, r.bytes_down, losses])
    return buf.getvalue()


def metrics_csv(reports: Sequence[RoundReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_HEADER)
    for r in reports:
        for split, m in (("val", r.val), ("test", r.test)):
            per_label = ";".join("" if a is None else repr(a) for a in m.per_label)
            writer.writerow([r.round, split, _fmt(m.value), per_label, ";".join(map(str, m.skipped))])
    return buf.getvalue()
