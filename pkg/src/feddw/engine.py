"""Federated round protocol: participant sampling, local training under a
strategy, server-side aggregation of models and SL matrices, round metrics.

Clients within a round are pure functions of the broadcast state, their
shard, and a per-client RNG derived from (seed, round, client id), so they
may run on any number of worker threads without perturbing results.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Union

import numpy as np

from . import nn
from .consistency import (
    SLMatrix,
    aggregate_sl,
    local_sl_matrix,
    reg_grad,
    reg_grad_linearized,
    reg_loss,
    sl_cr_distance,
)
from .data import Dataset, Partition, dirichlet_partition
from .errors import InvalidInputError, RoundFailureError, TrainingDivergedError
from .numerics import Rng

if TYPE_CHECKING:  # pragma: no cover
    from .config import RunConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegularizerConfig:
    """Consistency-regularizer knobs for the FedDW strategy."""

    mu: float = 0.1
    mode: str = "exact"  # or "linearized"
    linearization_refresh: int = 50

    def __post_init__(self):
        if self.mu < 0:
            raise InvalidInputError(f"mu must be >= 0, got {self.mu}")
        if self.mode not in ("exact", "linearized"):
            raise InvalidInputError(f"unknown regularizer mode {self.mode!r}")
        if self.linearization_refresh < 1:
            raise InvalidInputError("linearization_refresh must be >= 1")


@dataclass(frozen=True)
class FedAvg:
    pass


@dataclass(frozen=True)
class FedProx:
    prox_mu: float = 0.01

    def __post_init__(self):
        if self.prox_mu < 0:
            raise InvalidInputError(f"prox_mu must be >= 0, got {self.prox_mu}")


@dataclass(frozen=True)
class FedDW:
    reg: RegularizerConfig = RegularizerConfig()


@dataclass(frozen=True)
class LocalOnly:
    pass


Strategy = Union[FedAvg, FedProx, FedDW, LocalOnly]


@dataclass
class ClientReport:
    """One client's per-round upload (plus simulator telemetry)."""

    client_id: int
    params: np.ndarray | None  # flat trained parameters, None when failed
    sl: SLMatrix | None
    counts: np.ndarray  # per-class sample counts
    sample_count: int
    cla_loss: float
    reg_loss: float
    failed: bool = False


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    participants: tuple[int, ...]
    accuracy: float
    test_loss: float
    cla_loss: float
    reg_loss: float
    sl_cr_distance: float
    millis: float


def sample_participants(clients: int, participation_rate: float, rng: Rng) -> tuple[int, ...]:
    """Uniform sample without replacement of max(1, round(rate * N)) ids."""
    if not 0.0 < participation_rate <= 1.0:
        raise InvalidInputError(f"participation rate must be in (0, 1], got {participation_rate}")
    size = max(1, round(participation_rate * clients))
    chosen = rng.generator.choice(clients, size=size, replace=False)
    return tuple(int(i) for i in np.sort(chosen))


def client_train(
    global_model: nn.Model,
    global_sl: SLMatrix,
    features: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    strategy: Strategy,
    config: "RunConfig",
    rng: Rng,
    client_id: int = 0,
) -> ClientReport:
    """Local training for one client under the given strategy.

    Runs ``local_epochs`` of shuffled mini-batch Adam. Per step the data
    gradient comes from backprop on the batch; FedDW injects the weighted
    consistency gradient once into the classification-layer weights, and
    FedProx adds ``prox_mu * (theta - theta_global)`` to every parameter
    gradient. A client whose loss or gradients go non-finite is reported
    as failed instead of raising.
    """
    if labels.size == 0:
        raise InvalidInputError("client shard is empty")
    model = nn.clone_model(global_model)
    counts = np.bincount(labels, minlength=class_count)

    feddw = isinstance(strategy, FedDW) and strategy.reg.mu > 0
    fedprox = isinstance(strategy, FedProx) and strategy.prox_mu > 0
    if feddw and model.classification_layer.bias is not None:
        raise InvalidInputError("FedDW requires a bias-free classification layer")
    global_params = [p.copy() for p in nn.param_arrays(global_model)] if fedprox else None

    state = nn.init_adam(model, config.learning_rate)
    gen = rng.generator
    n = labels.size
    failed = False
    step = 0
    reference = None
    for _ in range(config.local_epochs):
        perm = gen.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            logits, cache = nn.forward(model, features[idx])
            loss = nn.cross_entropy_loss(logits, labels[idx])
            if not math.isfinite(loss):
                failed = True
                break
            extra = None
            if feddw:
                w = model.classifier_weights
                if strategy.reg.mode == "exact":
                    extra = strategy.reg.mu * reg_grad(global_sl, w)
                else:
                    if step % strategy.reg.linearization_refresh == 0:
                        reference = w.copy()
                    extra = strategy.reg.mu * reg_grad_linearized(global_sl, w, reference)
            grads = nn.backward(model, cache, logits, labels[idx], extra)
            if fedprox:
                for g, p, p0 in zip(grads, nn.param_arrays(model), global_params):
                    g += strategy.prox_mu * (p - p0)
            try:
                nn.adam_step(model, state, grads)
            except TrainingDivergedError:
                failed = True
                break
            step += 1
        if failed:
            break

    if failed:
        return ClientReport(
            client_id=client_id,
            params=None,
            sl=None,
            counts=counts,
            sample_count=int(n),
            cla_loss=float("nan"),
            reg_loss=float("nan"),
            failed=True,
        )

    cla, _ = nn.evaluate(model, features, labels)
    reg = reg_loss(global_sl, model.classifier_weights) if feddw else 0.0
    return ClientReport(
        client_id=client_id,
        params=nn.flatten_params(model),
        sl=local_sl_matrix(model, features, labels, class_count),
        counts=counts,
        sample_count=int(n),
        cla_loss=cla,
        reg_loss=reg,
    )


def aggregate_models(reports: list[ClientReport]) -> np.ndarray:
    """Sample-count weighted mean of successful clients' flat parameters."""
    ok = [r for r in reports if not r.failed]
    if not ok:
        raise RoundFailureError("no successful client reports to aggregate")
    shapes = {r.params.shape for r in ok}
    if len(shapes) != 1:
        raise InvalidInputError(f"inconsistent parameter shapes: {shapes}")
    weights = np.array([r.sample_count for r in ok], dtype=np.float64)
    weights /= weights.sum()
    merged = np.zeros_like(ok[0].params)
    for weight, report in zip(weights, ok):
        merged += weight * report.params
    return merged


def upload_bytes_per_client(params: int, class_count: int, strategy: Strategy) -> int:
    """Per-round protocol upload in bytes (8-byte scalars).

    FedDW additionally uploads the local SL matrix (C^2 scalars) and the
    per-class sample counts (C scalars). LocalOnly never communicates.
    """
    if isinstance(strategy, LocalOnly):
        return 0
    extra = class_count * class_count + class_count if isinstance(strategy, FedDW) else 0
    return 8 * (params + extra)


def download_bytes_per_client(params: int, class_count: int, strategy: Strategy) -> int:
    """Per-round broadcast size in bytes; FedDW adds the global SL matrix."""
    if isinstance(strategy, LocalOnly):
        return 0
    extra = class_count * class_count if isinstance(strategy, FedDW) else 0
    return 8 * (params + extra)


def build_partition(dataset: Dataset, config: "RunConfig", rng: Rng) -> Partition:
    if config.clients == 1:
        return Partition(
            shards=(np.arange(len(dataset), dtype=np.int64),),
            beta=config.beta,
            seed=rng.seed,
        )
    return dirichlet_partition(dataset, config.clients, config.beta, rng)


@dataclass
class RunResult:
    records: list[RoundRecord]
    model: nn.Model
    global_sl: SLMatrix | None  # None for LocalOnly (nothing is aggregated)

    def __iter__(self):
        # allows ``records, model = run(...)``
        return iter((self.records, self.model))


def run(
    config: "RunConfig",
    train_set: Dataset,
    test_set: Dataset,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> RunResult:
    """Execute the full communication protocol for ``config.rounds`` rounds.

    Per round: sample participants, train them (possibly on worker threads),
    aggregate parameters and SL matrices, evaluate the global model on the
    test set. LocalOnly skips aggregation and reports the mean accuracy of
    every client's own model. Failed (diverged) clients are dropped from the
    round's aggregation with their weight renormalized away; a round with no
    survivors raises :class:`RoundFailureError` carrying the records so far.

    Two executions with the same config produce bit-identical records
    regardless of ``config.workers``.
    """
    strategy = config.strategy
    class_count = train_set.class_count
    root = Rng(config.seed)
    partition = build_partition(train_set, config, root.child("partition"))
    model = nn.init_model(config.model_spec(train_set.features.shape[1], class_count),
                          root.child("init"))
    local = isinstance(strategy, LocalOnly)
    client_models = [nn.clone_model(model) for _ in range(config.clients)] if local else None
    global_sl = SLMatrix.uniform(class_count)
    shards = [
        (train_set.features[s], train_set.labels[s]) for s in partition.shards
    ]

    records: list[RoundRecord] = []
    for t in range(1, config.rounds + 1):
        started = time.perf_counter()
        participants = sample_participants(
            config.clients, config.participation, root.child("participation", t)
        )

        def train_one(cid: int) -> ClientReport:
            base = client_models[cid] if local else model
            x, y = shards[cid]
            return client_train(
                base, global_sl, x, y, class_count, strategy, config,
                root.child("client", t, cid), client_id=cid,
            )

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                reports = list(pool.map(train_one, participants))
        else:
            reports = [train_one(cid) for cid in participants]

        for r in reports:
            if r.failed:
                log.warning("round %d: client %d diverged, excluded from aggregation",
                            t, r.client_id)
        ok = [r for r in reports if not r.failed]
        if not ok:
            raise RoundFailureError(f"round {t}: every participant diverged", records=records)

        if local:
            for r in ok:
                nn.set_flat_params(client_models[r.client_id], r.params)
            evals = [nn.evaluate(m, test_set.features, test_set.labels) for m in client_models]
            test_loss = float(np.mean([e[0] for e in evals]))
            accuracy = float(np.mean([e[1] for e in evals]))
            distance = float("nan")
        else:
            nn.set_flat_params(model, aggregate_models(ok))
            global_sl = aggregate_sl([(r.sl, r.counts) for r in ok], global_sl)
            test_loss, accuracy = nn.evaluate(model, test_set.features, test_set.labels)
            distance = sl_cr_distance(global_sl, model.classifier_weights)

        record = RoundRecord(
            round_index=t,
            participants=participants,
            accuracy=accuracy,
            test_loss=test_loss,
            cla_loss=float(np.mean([r.cla_loss for r in ok])),
            reg_loss=float(np.mean([r.reg_loss for r in ok])),
            sl_cr_distance=distance,
            millis=(time.perf_counter() - started) * 1000.0,
        )
        records.append(record)
        if on_round is not None:
            on_round(record)

    return RunResult(records, model, None if local else global_sl)
