"""Federated averaging of the task model and the three comparison baselines.

Every trainer produces a :class:`TaskModel` (one binary model per disease)
and a per-round history. Federated trainers move parameters between the
central analyzer and silos only as serialized parameter files, so a
:class:`~confedlearn.silos.MessageLog` can check every exchange.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .cohort import DATA_TYPES, stack_dense
from .exceptions import DegenerateLabelError, RejectedInputError
from .imputation import build_imputed_view
from .nn import (
    BCE,
    ModelParams,
    deserialize_params,
    init_params,
    mlp_arch,
    serialize_params,
    train_step,
)
from .nn.fit import EarlyStopping, eval_bce, predict_in_chunks, run_epoch
from .silos import CENTRAL, ParamMessage, silo_batches

AGGREGATE_MODES = ("weighted", "paper-literal")


@dataclass(frozen=True)
class TrainConfig:
    """Task-model training settings shared by every method.

    A round is one federated cycle, or one epoch for the pooled baselines.
    """

    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.1
    patience: int = 3
    max_rounds: int = 200
    seed: int = 0
    hidden: tuple = (32,)
    batch_norm: bool = False
    dropout: float = 0.0
    aggregate: str = "weighted"

    def __post_init__(self):
        if self.patience < 1:
            raise RejectedInputError("patience must be >= 1")
        if self.local_epochs < 1:
            raise RejectedInputError("local_epochs must be >= 1")
        if self.max_rounds < 1 or self.batch_size < 1:
            raise RejectedInputError("max_rounds and batch_size must be >= 1")
        if self.lr < 0:
            raise RejectedInputError("lr must be >= 0")
        if self.aggregate not in AGGREGATE_MODES:
            raise RejectedInputError(f"aggregate must be one of {AGGREGATE_MODES}")

    def arch(self, n_inputs):
        return mlp_arch(n_inputs, tuple(self.hidden), 1, batch_norm=self.batch_norm,
                        dropout=self.dropout)


@dataclass(frozen=True)
class TaskModel:
    """Disease classifier over the concatenation of ``types`` (in that order)."""

    model: ModelParams
    disease: int
    types: tuple = DATA_TYPES

    def predict_scores(self, x):
        """Eval-mode probabilities; ``x`` maps data type to an (n, vocab) matrix."""
        missing = [t for t in self.types if t not in x]
        if missing:
            raise RejectedInputError(f"inputs lack data types {missing}")
        m = np.hstack([np.asarray(x[t]) for t in self.types])
        if m.shape[1] != self.model.arch.n_inputs:
            raise RejectedInputError(
                f"model expects {self.model.arch.n_inputs} input columns, got {m.shape[1]}")
        return predict_in_chunks(self.model, m)[:, 0]


@dataclass
class RoundState:
    t: int
    theta: ModelParams
    silo_thetas: list = field(default_factory=list)
    validation_loss_history: list = field(default_factory=list)


def history_to_jsonl(history, timings=True):
    """History rows as JSON lines; ``timings=False`` drops wall-clock fields."""
    rows = history if timings else [{k: v for k, v in h.items() if k != "wall_time_ms"}
                                    for h in history]
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


# ---------------------------------------------------------------------------
# federated primitives

def local_train(theta, view, config, seed, disease=0, rows=None, types=DATA_TYPES,
                silo=None):
    """``config.local_epochs`` of mini-batch SGD on one silo, from ``theta``.

    Returns ``(theta_s, n_s)``; an empty silo returns ``theta`` with weight 0.
    ``silo`` is only used to check that ``view`` belongs to it.
    """
    idx = np.arange(view.n) if rows is None else np.asarray(rows, dtype=int)
    if idx.size == 0:
        return theta, 0
    rng = np.random.default_rng(seed)
    params = theta
    for _ in range(config.local_epochs):
        batches = silo_batches(silo or _AlignedSilo(view), view, config.batch_size,
                               int(rng.integers(2**63)), disease=disease, rows=idx,
                               types=types)
        for batch in batches:
            params, _ = train_step(params, batch.inputs, batch.targets, BCE, config.lr,
                                   int(rng.integers(2**63)))
    return params, int(idx.size)


class _AlignedSilo:
    """Stand-in exposing a view's own ids when no silo object is at hand."""

    def __init__(self, view):
        self.local_ids = tuple(view.local_ids)
        self.n = len(self.local_ids)


def fedavg_aggregate(thetas, counts, mode="weighted"):
    """Weighted mean of silo parameters with weights ``n_s / sum(n_s)``.

    Batch-norm running statistics are averaged with the same weights.
    ``mode="paper-literal"`` additionally divides by the number of silos.
    """
    thetas = list(thetas)
    counts = np.asarray(counts, dtype=np.float64)
    if not thetas or len(thetas) != counts.shape[0]:
        raise RejectedInputError("need one count per parameter set")
    if (counts < 0).any() or counts.sum() == 0:
        raise RejectedInputError("counts must be nonnegative and not all zero")
    if mode not in AGGREGATE_MODES:
        raise RejectedInputError(f"unknown aggregation mode {mode!r}")
    arch = thetas[0].arch
    if any(t.arch != arch for t in thetas):
        raise RejectedInputError("cannot average parameters of different architectures")
    weights = counts / counts.sum()
    if mode == "paper-literal":
        weights = weights / len(thetas)
    # average deviations from the first set so identical inputs come back exactly
    anchor = thetas[0].values
    delta = np.zeros_like(anchor)
    for w, t in zip(weights, thetas):
        if w:
            delta += w * (t.values - anchor)
    if mode == "paper-literal":
        return thetas[0].replace(weights.sum() * anchor + delta)
    return thetas[0].replace(anchor + delta)


@dataclass(frozen=True)
class _Site:
    """One federated participant: a view plus the record rows it trains on."""

    silo: object
    view: object
    rows: np.ndarray


def _federate(sites, val_x, val_y, n_inputs, disease, types, config, log=None):
    """The shared round loop: broadcast, local training, aggregation, validation."""
    rng = np.random.default_rng(config.seed)
    theta = init_params(config.arch(n_inputs), int(rng.integers(2**63)))
    stopper = EarlyStopping(config.patience)
    state = RoundState(0, theta)
    history = []
    for t in range(1, config.max_rounds + 1):
        start = time.perf_counter()
        broadcast = ParamMessage(t, serialize_params(theta), CENTRAL)
        if log is not None:
            log.post(broadcast)
        thetas, counts = [], []
        for site in sites:
            received = deserialize_params(broadcast.payload)
            theta_s, n_s = local_train(received, site.view, config, int(rng.integers(2**63)),
                                       disease, site.rows, types, site.silo)
            reply = ParamMessage(t, serialize_params(theta_s), site.silo.silo_id,
                                 site.silo.kind)
            if log is not None:
                log.post(reply)
            thetas.append(deserialize_params(reply.payload))
            counts.append(n_s)
        if sum(counts) == 0:
            raise RejectedInputError("every participating silo is empty")
        theta = fedavg_aggregate(thetas, counts, config.aggregate)
        loss = eval_bce(theta, val_x, val_y)
        state = RoundState(t, theta, thetas, state.validation_loss_history + [loss])
        history.append({"round": t, "silo_count": sum(c > 0 for c in counts),
                        "validation_loss": loss,
                        "wall_time_ms": round(1000 * (time.perf_counter() - start), 3)})
        if stopper.update(loss, theta):
            break
    return TaskModel(stopper.best_state, disease, tuple(types)), history


def _central_matrix(records, types, vocab_sizes):
    return np.hstack([stack_dense([r.vector(t) for r in records], vocab_sizes[t])
                      for t in types])


def _check_labels(y, what):
    if y.size == 0:
        raise RejectedInputError(f"{what}: no training records")
    if y.min() == y.max():
        raise DegenerateLabelError(f"{what}: all {y.size} labels equal {y[0]}")


def _central_validation(network, split, types):
    records = [r for r in network.central.records
               if r.person_id in split.central_validation_ids and r.fully_paired]
    if not records:
        raise RejectedInputError("central validation split holds no fully paired record")
    return records, _central_matrix(records, types, network.vocab_sizes)


def build_views(network, step_one, label_mode="clinic-true", seed=0, n_draws=1):
    """Step 2 in every silo; returns views in silo order."""
    rng = np.random.default_rng(seed)
    return [build_imputed_view(s, step_one.cgans, step_one.classifiers, label_mode,
                               int(rng.integers(2**63)), n_draws)
            for s in network.silos]


def run_confederated(network, views, disease, config, split, log=None):
    """Step 3: FedAvg of the task model over every silo's imputed view.

    ``views`` comes from :func:`build_views` (step 2 runs once and is shared
    by all diseases).
    """
    if len(views) != network.S:
        raise RejectedInputError(f"{len(views)} views for {network.S} silos")
    sites = [_Site(s, v, split.silo_train_rows(s)) for s, v in zip(network.silos, views)]
    records, val_x = _central_validation(network, split, DATA_TYPES)
    val_y = np.array([r.labels[disease] for r in records])
    n_inputs = sum(network.vocab_sizes[t] for t in DATA_TYPES)
    return _federate(sites, val_x, val_y, n_inputs, disease, DATA_TYPES, config, log)


def run_single_type_federated(network, views, data_type, disease, config, split, log=None):
    """FedAvg over the silos holding ``data_type``, using that type alone."""
    chosen = [(s, v) for s, v in zip(network.silos, views) if s.data_type == data_type]
    if not chosen:
        raise RejectedInputError(f"no {data_type} silos in the network")
    sites = [_Site(s, v, split.silo_train_rows(s)) for s, v in chosen]
    records, val_x = _central_validation(network, split, (data_type,))
    val_y = np.array([r.labels[disease] for r in records])
    return _federate(sites, val_x, val_y, network.vocab_sizes[data_type], disease,
                     (data_type,), config, log)


def _train_pooled(x, y, val_x, val_y, disease, config):
    rng = np.random.default_rng(config.seed)
    params = init_params(config.arch(x.shape[1]), int(rng.integers(2**63)))
    stopper = EarlyStopping(config.patience)
    history = []
    for t in range(1, config.max_rounds + 1):
        start = time.perf_counter()
        for _ in range(config.local_epochs):
            params, _ = run_epoch(params, x, y, BCE, config.lr, config.batch_size,
                                  int(rng.integers(2**63)))
        loss = eval_bce(params, val_x, val_y)
        history.append({"round": t, "silo_count": 1, "validation_loss": loss,
                        "wall_time_ms": round(1000 * (time.perf_counter() - start), 3)})
        if stopper.update(loss, params):
            break
    return TaskModel(stopper.best_state, disease, DATA_TYPES), history


def run_centralized(cohort, disease, config, split):
    """Upper bound: pooled, fully paired, ID-matched data from every region.

    Early stopping uses a held-out share of the pooled training people of
    the same size fraction as the central validation split.
    """
    vocab = {t: cohort.config.vocab(t) for t in DATA_TYPES}
    pool = [r for r in cohort if r.person_id in split.train_ids
            or r.person_id in split.central_validation_ids]
    pool = [r for r in pool if r.fully_paired]
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(pool))
    n_val = max(1, int(round(0.2 * len(pool)))) if len(pool) >= 5 else 0
    val = [pool[i] for i in np.sort(perm[:n_val])]
    train = [pool[i] for i in np.sort(perm[n_val:])]
    y = np.array([r.labels[disease] for r in train], dtype=np.uint8)
    _check_labels(y, "centralized")
    x = _central_matrix(train, DATA_TYPES, vocab)
    val_x = _central_matrix(val, DATA_TYPES, vocab) if val else x
    val_y = np.array([r.labels[disease] for r in val]) if val else y
    return _train_pooled(x, y, val_x, val_y, disease, config)


def run_central_only(network, disease, config, split):
    """Train on the central analyzer's own fully paired records only."""
    train = [r for r in network.central.records
             if r.person_id not in split.central_validation_ids and r.fully_paired]
    y = np.array([r.labels[disease] for r in train], dtype=np.uint8)
    _check_labels(y, "central_only")
    x = _central_matrix(train, DATA_TYPES, network.vocab_sizes)
    records, val_x = _central_validation(network, split, DATA_TYPES)
    val_y = np.array([r.labels[disease] for r in records])
    return _train_pooled(x, y, val_x, val_y, disease, config)


__all__ = [
    "TrainConfig", "TaskModel", "RoundState", "AGGREGATE_MODES", "local_train",
    "fedavg_aggregate", "build_views", "run_confederated", "run_single_type_federated",
    "run_centralized", "run_central_only", "history_to_jsonl",
]
