"""Classifier-averaging federation: round loop, client sampling, local updates, aggregation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import models as M
from .datasets import AugmentationConfig, LabeledDataset, PartitionPlan, matching_test_shards
from .losses import LossBreakdown, LossConfig, local_objective
from .metrics import CommModel, RoundReport, evaluate, mean_breakdown, parameter_bytes, summarize
from .models import ArchSpec, ClassifierWeights, ClientModel
from .ndgrad import backward, kernels

log = logging.getLogger(__name__)

AGGREGATE_MODES = ("classifier_only", "full_weights")

# stream tags for derived seeds
_INIT, _SAMPLING, _SHUFFLE, _AUGMENT, _TEST = range(5)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class FederationConfig:
    K: int = 20
    T: int = 100
    E: int = 1
    sampling_rate: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    loss: LossConfig = field(default_factory=LossConfig)
    aggregate_mode: str = "classifier_only"
    aggregate: bool = True  # False: pure local training, nothing exchanged
    arch_assignment: tuple[ArchSpec, ...] = (
        ArchSpec("mlp_small"),
        ArchSpec("mlp_wide"),
        ArchSpec("mlp_deep"),
        ArchSpec("linear"),
    )
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0
    weigh_over_all_clients: bool = False
    comm: CommModel = field(default_factory=CommModel)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.E < 1:
            raise ValueError(f"E must be >= 1, got {self.E}")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError(f"sampling_rate must be in (0, 1], got {self.sampling_rate}")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.aggregate_mode not in AGGREGATE_MODES:
            raise ValueError(f"aggregate_mode must be one of {AGGREGATE_MODES}, got {self.aggregate_mode!r}")
        if not self.arch_assignment:
            raise ValueError("arch_assignment is empty")
        dims = {a.feature_dim for a in self.arch_assignment}
        if len(dims) != 1:
            raise ValueError(f"all architectures must share one feature_dim, got {sorted(dims)}")
        if self.aggregate_mode == "full_weights" and len(set(self.arch_assignment)) != 1:
            raise ValueError("full_weights mode needs one architecture for every client")

    @property
    def feature_dim(self) -> int:
        return self.arch_assignment[0].feature_dim

    def arch_for(self, client_id: int) -> ArchSpec:
        return self.arch_assignment[client_id % len(self.arch_assignment)]


@dataclass
class ClientState:
    id: int
    model: ClientModel
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def n_k(self) -> int:
        return len(self.train_idx)


@dataclass
class ServerState:
    global_classifier: ClassifierWeights
    round: int = 0
    global_full_weights: list[np.ndarray] | None = None


@dataclass
class ClientResult:
    client_id: int
    classifier: ClassifierWeights
    n_k: int
    losses: LossBreakdown
    full_weights: list[np.ndarray] | None = None


# ---------------------------------------------------------------------------
# protocol pieces
# ---------------------------------------------------------------------------


def num_sampled(K: int, rate: float) -> int:
    return max(1, min(K, int(math.floor(rate * K + 0.5))))


def sample_clients(K: int, rate: float, round_rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement; the count depends only on (K, rate)."""
    m = num_sampled(K, rate)
    return sorted(int(i) for i in round_rng.choice(K, size=m, replace=False))


def round_rng(seed: int, round_: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _SAMPLING, int(round_)])


def aggregation_weights(sizes: Sequence[int], total: int | None = None) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    denom = float(sizes.sum()) if total is None else float(total)
    return sizes / denom


def _weighted_mean(tensors_per_client: list[list[np.ndarray]], weights: np.ndarray) -> list[np.ndarray]:
    out = []
    for pos in range(len(tensors_per_client[0])):
        shape = tensors_per_client[0][pos].shape
        stacked = np.stack([np.asarray(t[pos], dtype=np.float32).reshape(-1) for t in tensors_per_client])
        out.append(kernels.weighted_sum(stacked, weights).astype(np.float32).reshape(shape))
    return out


def aggregate_classifiers(updates: Sequence[tuple[ClassifierWeights, int]], total: int | None = None) -> ClassifierWeights:
    """Weighted mean of client heads with weights ``n_k / sum(n)``.

    Accumulation runs in float64, in the given order, then rounds to float32.
    ``total`` overrides the denominator (weighting over all clients).
    """
    if not updates:
        raise ValueError("aggregate_classifiers: no updates")
    shape = (updates[0][0].weight.shape, updates[0][0].bias.shape)
    for c, _ in updates:
        if (c.weight.shape, c.bias.shape) != shape:
            raise ValueError(f"aggregate_classifiers: shape mismatch {shape} vs {(c.weight.shape, c.bias.shape)}")
    weights = aggregation_weights([n for _, n in updates], total)
    w, b = _weighted_mean([c.arrays() for c, _ in updates], weights)
    return ClassifierWeights.from_arrays(w, b)


def aggregate_full(updates: Sequence[tuple[Sequence[np.ndarray], int]], total: int | None = None) -> list[np.ndarray]:
    """Per-tensor weighted mean of whole models (homogeneous architectures only)."""
    if not updates:
        raise ValueError("aggregate_full: no updates")
    shapes = [np.shape(a) for a in updates[0][0]]
    for arrays, _ in updates:
        if [np.shape(a) for a in arrays] != shapes:
            raise ValueError("aggregate_full: heterogeneous architectures cannot be averaged")
    weights = aggregation_weights([n for _, n in updates], total)
    return _weighted_mean([list(a) for a, _ in updates], weights)


def sgd_step(params, lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data -= p.dtype.type(lr) * p.grad
        p.grad = None


def local_train(
    c: ClientState,
    global_c: ClassifierWeights | None,
    cfg: FederationConfig,
    round_: int,
    train: LabeledDataset,
) -> LossBreakdown:
    """E epochs of mini-batch SGD on the client's shard; returns mean loss parts."""
    anchor = global_c if global_c is not None else c.model.classifier.copy()
    rng = np.random.default_rng([cfg.seed, _SHUFFLE, c.id, round_])
    params = c.model.parameters()
    parts: list[LossBreakdown] = []
    for epoch in range(cfg.E):
        order = c.train_idx[rng.permutation(c.n_k)]
        for step, start in enumerate(range(0, c.n_k, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            nonce = derive_seed(cfg.seed, _AUGMENT, c.id, round_, epoch, step)
            loss, parts_ = local_objective(
                c.model, (train.features[idx], train.labels[idx]), anchor, cfg.aug, cfg.loss, nonce
            )
            c.model.zero_grad()
            backward(loss)
            sgd_step(params, cfg.lr)
            parts.append(parts_)
    return mean_breakdown(parts)


def client_update(
    c: ClientState,
    global_c: ClassifierWeights | None,
    cfg: FederationConfig,
    round_: int,
    train: LabeledDataset,
    global_full: list[np.ndarray] | None = None,
) -> ClientResult:
    """Receive the broadcast, train locally, return the updated head (and all weights in full mode).

    ``global_c=None`` means no broadcast: plain local training.
    """
    if global_full is not None:
        M.set_weights(c.model, global_full)
    if global_c is not None:
        M.set_classifier(c.model, global_c)
    losses = local_train(c, global_c, cfg, round_, train)
    full = M.get_weights(c.model) if cfg.aggregate_mode == "full_weights" else None
    return ClientResult(c.id, M.get_classifier(c.model), c.n_k, losses, full)


# ---------------------------------------------------------------------------
# the simulation
# ---------------------------------------------------------------------------


class Federation:
    """Server plus K in-process clients."""

    def __init__(
        self,
        cfg: FederationConfig,
        plan: PartitionPlan,
        train: LabeledDataset,
        test: LabeledDataset,
        threads: int = 1,
    ):
        if plan.num_clients != cfg.K:
            raise ValueError(f"partition has {plan.num_clients} clients but K={cfg.K}")
        if any(n == 0 for n in plan.sizes):
            raise ValueError(f"empty client shard in partition sizes {plan.sizes}")
        if len(train) and plan.client_indices and max(int(ix.max()) for ix in plan.client_indices) >= len(train):
            raise ValueError("partition indexes past the end of the training set")
        self.cfg = cfg
        self.plan = plan
        self.train = train
        self.test = test
        self.threads = max(1, int(threads))
        C = train.num_classes
        test_shards = matching_test_shards(plan, train, test, seed=derive_seed(cfg.seed, _TEST))
        # one build seed for everyone: same-arch clients start identical and
        # every initial head equals the round-0 global head
        build_seed = derive_seed(cfg.seed, _INIT)
        self.clients = [
            ClientState(
                k,
                M.build_model(cfg.arch_for(k), train.input_dim, C, seed=build_seed),
                plan.client_indices[k],
                test_shards[k],
            )
            for k in range(cfg.K)
        ]
        full = None
        if cfg.aggregate_mode == "full_weights":
            full = M.get_weights(self.clients[0].model)
        head = M.init_classifier(cfg.feature_dim, C, seed=build_seed)
        self.server = ServerState(head, 0, full)
        self.total_train = int(sum(plan.sizes))
        self.bytes_up = 0
        self.bytes_down = 0
        self.reports: list[RoundReport] = []

    # -- accounting --------------------------------------------------------
    def payload_bytes(self) -> int:
        if not self.cfg.aggregate:
            return 0
        if self.cfg.aggregate_mode == "full_weights":
            return parameter_bytes(sum(a.size for a in self.server.global_full_weights), self.cfg.comm)
        return parameter_bytes(self.server.global_classifier.num_parameters, self.cfg.comm)

    # -- one round ---------------------------------------------------------
    def _update(self, k: int, round_: int) -> ClientResult:
        cfg = self.cfg
        if not cfg.aggregate:
            return client_update(self.clients[k], None, cfg, round_, self.train)
        return client_update(
            self.clients[k],
            self.server.global_classifier,
            cfg,
            round_,
            self.train,
            self.server.global_full_weights,
        )

    def run_round(self) -> RoundReport:
        cfg = self.cfg
        round_ = self.server.round + 1
        participants = sample_clients(cfg.K, cfg.sampling_rate, round_rng(cfg.seed, round_))
        if self.threads > 1 and len(participants) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(lambda k: self._update(k, round_), participants))
        else:
            results = [self._update(k, round_) for k in participants]
        # reduce strictly in client-id order
        results.sort(key=lambda r: r.client_id)

        if cfg.aggregate:
            total = self.total_train if cfg.weigh_over_all_clients else None
            if cfg.aggregate_mode == "full_weights":
                full = aggregate_full([(r.full_weights, r.n_k) for r in results], total)
                self.server.global_full_weights = full
                self.server.global_classifier = ClassifierWeights.from_arrays(full[-2], full[-1])
            else:
                self.server.global_classifier = aggregate_classifiers(
                    [(r.classifier, r.n_k) for r in results], total
                )
            payload = self.payload_bytes()
            self.bytes_up += payload * len(results)
            self.bytes_down += payload * len(results)

        accs = [self.evaluate_client(c) for c in self.clients]
        mean, std = summarize(accs)
        self.server.round = round_
        report = RoundReport(
            round=round_,
            per_client_accuracy=accs,
            mean_acc=mean,
            std_acc=std,
            loss_breakdown_means=mean_breakdown([r.losses for r in results]),
            cumulative_bytes_up=self.bytes_up,
            cumulative_bytes_down=self.bytes_down,
            participants=participants,
            local_epochs=round_ * cfg.E,
        )
        self.reports.append(report)
        log.debug("round %d mean_acc=%.4f std=%.4f", round_, mean, std)
        return report

    def evaluate_client(self, c: ClientState) -> float:
        return evaluate(c.model, self.test.features[c.test_idx], self.test.labels[c.test_idx])

    def run(self, on_round: Callable[["Federation", RoundReport], None] | None = None) -> list[RoundReport]:
        while self.server.round < self.cfg.T:
            report = self.run_round()
            if on_round is not None:
                on_round(self, report)
        return self.reports


def run_federation(
    cfg: FederationConfig,
    plan: PartitionPlan,
    train: LabeledDataset,
    test: LabeledDataset,
    threads: int = 1,
) -> list[RoundReport]:
    return Federation(cfg, plan, train, test, threads=threads).run()
