"""Federated prompt/adapter averaging and the baseline training paradigms.

One round: select ``m = max(floor(C*K), 1)`` clients, broadcast the global
trainable tensors, let every selected client run a few epochs of AdamW on
its shard against the shared frozen backbone, then replace the global
tensors by the dataset-size-weighted average of the returned ones.
"""

from __future__ import annotations

import logging
import math
import os
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from fedpeft import costmodel
from fedpeft import rng as _rng
from fedpeft.data import (ClientShard, Dataset, languages_of, partition, split_by_language,
                          subsample_language)
from fedpeft.errors import ConfigError, InputError, ProtocolError
from fedpeft.model import (ModelConfig, OptimizerState, ParameterSet, TokenBatch, adamw_step,
                           encode, evaluate, init_model, loss_and_grad)

log = logging.getLogger(__name__)

PARADIGMS = ("monolingual", "centralized", "fed_iid", "fed_noniid")
THREADS_ENV = "FEDPEFT_THREADS"

Tensors = dict[str, np.ndarray]


@dataclass(frozen=True)
class FederationConfig:
    K: int = 5
    C: float = 1.0
    rounds: int = 10
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    alpha: float = 1.0
    early_stop_patience: int = 5
    max_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        def int_at_least(name, lo):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < lo:
                raise ConfigError(name, f"must be an integer >= {lo}, got {value!r}")
        int_at_least("K", 1)
        int_at_least("rounds", 1)
        int_at_least("local_epochs", 0)
        int_at_least("batch_size", 1)
        int_at_least("early_stop_patience", 0)
        int_at_least("max_epochs", 1)
        int_at_least("seed", 0)
        check_fraction(self.C)
        for name in ("lr", "alpha"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0 \
                    or not math.isfinite(value):
                raise ConfigError(name, f"must be a positive real, got {value!r}")
        if isinstance(self.weight_decay, bool) or not isinstance(self.weight_decay, (int, float)) \
                or self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be a non-negative real, got {self.weight_decay!r}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "FederationConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown key")
        return cls(**data)


def check_fraction(C) -> None:
    if isinstance(C, bool) or not isinstance(C, (int, float)) or not 0 < C <= 1:
        raise ConfigError("C", f"must lie in (0, 1], got {C!r}")


@dataclass
class ServerState:
    h_g: Tensors
    round: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    h_k: Tensors
    dataset_size: int
    losses: tuple[float, ...] = ()


@dataclass(frozen=True)
class Client:
    """A shard plus its pre-encoded token matrix."""

    shard: ClientShard
    batch: TokenBatch

    @classmethod
    def from_shard(cls, shard: ClientShard) -> "Client":
        return cls(shard, encode(list(shard.examples)))

    @property
    def client_id(self) -> int:
        return self.shard.client_id


def client_key(round_index: int, client_id: int) -> tuple:
    return ("client", round_index, client_id)


def select_clients(K: int, C: float, seed: int, round_index: int = 0) -> list[int]:
    """Sorted ids of ``max(floor(C*K), 1)`` distinct clients."""
    check_fraction(C)
    if K < 1:
        raise ConfigError("K", f"must be >= 1, got {K}")
    m = max(math.floor(C * K), 1)
    chosen = _rng.stream(seed, "select", round_index).choice(K, size=m, replace=False)
    return sorted(int(c) for c in chosen)


def run_epoch(params: ParameterSet, opt: OptimizerState, batch: TokenBatch, batch_size: int,
              seed: int, key: tuple, epoch: int) -> tuple[ParameterSet, OptimizerState, float]:
    order = _rng.stream(seed, *key, "order", epoch).permutation(len(batch))
    dropout = _rng.stream(seed, *key, "dropout", epoch)
    total = 0.0
    for start in range(0, len(batch), batch_size):
        idx = order[start:start + batch_size]
        loss, grads = loss_and_grad(params, batch.take(idx), rng=dropout)
        params, opt = adamw_step(params, grads, opt)
        total += loss * len(idx)
    return params, opt, total / len(batch)


def train_epochs(params: ParameterSet, batch: TokenBatch, epochs: int, config: FederationConfig,
                 key: tuple) -> tuple[ParameterSet, list[float]]:
    """Plain AdamW training from fresh optimizer moments for ``epochs`` epochs."""
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    losses = []
    for epoch in range(epochs):
        params, opt, loss = run_epoch(params, opt, batch, config.batch_size, config.seed, key, epoch)
        losses.append(loss)
    return params, losses


def train_early_stopping(params: ParameterSet, train: TokenBatch, val: TokenBatch | None,
                         config: FederationConfig, key: tuple, tag: dict | None = None
                         ) -> tuple[ParameterSet, list[dict]]:
    """Train until validation accuracy stalls for ``early_stop_patience`` epochs.

    Returns the best-validation parameters.  With patience 0 or no
    validation data it trains exactly ``max_epochs`` epochs and returns the
    final parameters.
    """
    stopping = config.early_stop_patience > 0 and val is not None and len(val) > 0
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    best, best_acc, stale, records = params, -1.0, 0, []
    for epoch in range(config.max_epochs):
        params, opt, loss = run_epoch(params, opt, train, config.batch_size, config.seed, key, epoch)
        rec = {**(tag or {}), "epoch": epoch + 1, "train_loss": loss}
        if stopping:
            acc = evaluate(params, val).overall
            rec["val_accuracy"] = acc
            if acc > best_acc:
                best, best_acc, stale = params, acc, 0
            else:
                stale += 1
        records.append(rec)
        if stopping and stale >= config.early_stop_patience:
            break
    return (best if stopping else params), records


def _check_schema(reference: Mapping[str, np.ndarray], other: Mapping[str, np.ndarray], who: str):
    if set(reference) != set(other):
        raise ProtocolError(f"{who}: tensor names {sorted(other)} != {sorted(reference)}")
    for name, ref in reference.items():
        if np.shape(other[name]) != ref.shape:
            raise ProtocolError(f"{who}: tensor {name} has shape {np.shape(other[name])}, expected {ref.shape}")


def local_update(h_g: Mapping[str, np.ndarray], client: Client | ClientShard, base: ParameterSet,
                 config: FederationConfig, round_index: int = 0) -> ClientUpdate:
    """Install ``h_g`` over the shared frozen backbone, train locally, return the new trainable tensors."""
    if isinstance(client, ClientShard):
        client = Client.from_shard(client)
    if client.shard.size == 0:
        raise InputError(f"client {client.client_id} has an empty shard")
    _check_schema(base.trainable_tensors(), h_g, f"client {client.client_id}")
    params = base.with_tensors(h_g)
    params, losses = train_epochs(params, client.batch, config.local_epochs, config,
                                  client_key(round_index, client.client_id))
    return ClientUpdate(client.client_id, params.trainable_tensors(), client.shard.size, tuple(losses))


def aggregate(updates: Sequence[ClientUpdate]) -> Tensors:
    """Dataset-size-weighted average over the participating clients.

    Summation runs in ascending client id, so the result does not depend on
    the order updates arrive in.
    """
    if not updates:
        raise ProtocolError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in updates: {ids}")
    reference = ordered[0].h_k
    for u in ordered[1:]:
        _check_schema(reference, u.h_k, f"client {u.client_id}")
    total = sum(u.dataset_size for u in ordered)
    if total <= 0:
        raise InputError("participating clients hold zero examples in total")
    if len(ordered) == 1:
        return {k: v.copy() for k, v in reference.items()}
    weights = [u.dataset_size / total for u in ordered]
    out = {}
    for name in reference:
        acc = np.zeros_like(reference[name], dtype=np.float64)
        for w, u in zip(weights, ordered):
            acc += w * u.h_k[name]
        out[name] = acc
    return out


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(THREADS_ENV, "must be >= 0")
    return n or (os.cpu_count() or 1)


def run_round(server: ServerState, clients: Sequence[Client], base: ParameterSet,
              config: FederationConfig, test: TokenBatch | None = None) -> ServerState:
    """Select, broadcast, train locally (possibly concurrently), aggregate, evaluate."""
    t = server.round
    selected = [clients[i] for i in select_clients(len(clients), config.C, config.seed, t)]
    # read-only snapshot handed to every worker
    h_g = {k: v.copy() for k, v in server.h_g.items()}
    for v in h_g.values():
        v.setflags(write=False)

    def work(client):
        return local_update(h_g, client, base, config, t)

    workers = min(worker_count(), len(selected))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(work, selected))
    else:
        updates = [work(c) for c in selected]

    new_h = aggregate(updates)
    n_trainable = sum(v.size for v in new_h.values())
    record = {"round": t + 1, "clients": [c.client_id for c in selected]}
    if test is not None and len(test):
        result = evaluate(base.with_tensors(new_h), test)
        record.update(accuracy=result.per_language, mean_accuracy=result.mean,
                      overall_accuracy=result.overall)
    final_losses = [u.losses[-1] for u in updates if u.losses]
    record["mean_local_loss"] = float(np.mean(final_losses)) if final_losses else None
    record["bytes"] = costmodel.round_bytes(n_trainable, len(selected))
    return ServerState(new_h, t + 1, [*server.history, record])


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    subsample: Mapping[str, int] = field(default_factory=dict)


@dataclass
class ExperimentReport:
    paradigm: str
    strategy: str
    per_language: dict[str, float]
    history: list[dict]
    params: ParameterSet | dict[str, ParameterSet]
    initial: ParameterSet

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_language.values())))

    def summary_row(self) -> dict:
        return {"paradigm": self.paradigm, "strategy": self.strategy,
                **self.per_language, "Avg": self.average}


def prepare_splits(dataset: Sequence, config: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Per-language split, then subsampling of the training portion only."""
    seed = config.federation.seed
    train, val, test = split_by_language(dataset, config.test_fraction, config.val_fraction, seed)
    for lang in sorted(config.subsample):
        train = subsample_language(train, lang, config.subsample[lang], seed)
    return train, val, test


def run_federated(train: Dataset, test: Dataset, mode: str, base: ParameterSet,
                  config: FederationConfig) -> tuple[ServerState, list[Client]]:
    parts = partition(train, config.K, mode, config.alpha if mode == "noniid" else None, config.seed)
    clients = []
    for shard in parts.shards:
        if shard.size == 0:
            log.warning("client %d received no data and is dropped from the federation", shard.client_id)
            continue
        clients.append(Client.from_shard(shard))
    server = ServerState(base.trainable_tensors())
    test_batch = encode(test) if test else None
    for _ in range(config.rounds):
        server = run_round(server, clients, base, config, test_batch)
    return server, clients


def run_experiment(paradigm: str, dataset: Sequence, config: ExperimentConfig) -> ExperimentReport:
    if paradigm not in PARADIGMS:
        raise ConfigError("paradigm", f"must be one of {PARADIGMS}, got {paradigm!r}")
    fed = config.federation
    base = init_model(config.model)
    train, val, test = prepare_splits(dataset, config)
    langs = languages_of(dataset)
    test_batch = encode(test)
    tag = {"paradigm": paradigm}

    if paradigm == "monolingual":
        models, history, per_language = {}, [], {}
        for lang in langs:
            tr = encode([ex for ex in train if ex.language == lang])
            va = encode([ex for ex in val if ex.language == lang])
            te = [ex for ex in test if ex.language == lang]
            if len(tr) == 0:
                raise InputError(f"language {lang!r} has no training examples")
            params, recs = train_early_stopping(base, tr, va, fed, ("mono", lang), {**tag, "language": lang})
            models[lang] = params
            history.extend(recs)
            per_language[lang] = evaluate(params, te).overall if te else float("nan")
        return ExperimentReport(paradigm, config.model.strategy, per_language, history, models, base)

    if paradigm == "centralized":
        params, history = train_early_stopping(base, encode(train), encode(val), fed, client_key(0, 0), tag)
        result = evaluate(params, test_batch)
        return ExperimentReport(paradigm, config.model.strategy, dict(result.per_language), history,
                                params, base)

    server, _ = run_federated(train, test, "iid" if paradigm == "fed_iid" else "noniid", base, fed)
    params = base.with_tensors(server.h_g)
    result = evaluate(params, test_batch)
    history = [{**tag, **rec} for rec in server.history]
    return ExperimentReport(paradigm, config.model.strategy, dict(result.per_language), history, params, base)
