"""Round-based orchestration of the three comparison arms.

``full``
    personalized clients (FiLM, gated prototypes, pull loss) with the
    transformer aggregator.
``ablation_attention_only``
    transformer aggregator, personalization branch removed.
``uniform_average``
    the same non-personalized clients with plain per-class averaging of the
    uploaded prototypes.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .client import (
    ClientConfig,
    ClientState,
    GlobalPrototypes,
    LocalReport,
    download_bytes,
    evaluate,
    local_update,
)
from .data import (
    Dataset,
    apply_style_shift,
    dirichlet_partition,
    generate_gaussian_mixture,
    random_style_specs,
    stratified_split,
)
from .errors import ConfigError, NumericError, StyleFLError
from .server import AggregatorState, PrototypeTensor, aggregate, assemble, train_aggregator

log = logging.getLogger(__name__)

METHODS = ("full", "ablation_attention_only", "uniform_average")


@dataclass(frozen=True)
class ScenarioConfig:
    """Synthetic style-shifted Gaussian-mixture scenario."""

    classes: int = 8
    input_dim: int = 16
    per_class: int = 150
    separation: float = 4.0
    scale_spread: float = 0.5
    offset_std: float = 2.0
    style_noise: float = 0.1
    test_fraction: float = 0.2


@dataclass(frozen=True)
class FederationConfig:
    clients: int = 20
    fraction: float = 0.3
    rounds: int = 40
    local_epochs: int = 5
    lambda_shared: float = 1.0
    lambda_pull: float = 0.7
    lr: float = 0.005
    batch_size: int | None = None
    alpha: float = 0.1
    noise_var: float = 0.05
    seed: int = 0
    method: str = "full"
    feature_dim: int = 32
    hidden: tuple[int, ...] = (64, 64)
    heads: int = 4
    server_lr: float = 1e-3
    server_steps: int = 10
    max_clients: int | None = None
    eval_interval: int = 5
    threads: int = 1
    shared_init: bool = True
    # diagnostics: pin the client gate, or make the aggregator an identity
    # map with zero embeddings (reduces attention pooling to a plain mean)
    force_gate: float | None = None
    identity_aggregator: bool = False
    timing: bool = False

    def validate(self) -> None:
        checks = [
            (self.clients >= 1, "clients", "must be >= 1"),
            (0 < self.fraction <= 1, "fraction", "must lie in (0, 1]"),
            (self.rounds >= 1, "rounds", "must be >= 1"),
            (self.local_epochs >= 1, "local_epochs", "must be >= 1"),
            (self.lambda_shared >= 0, "lambda_shared", "must be >= 0"),
            (self.lambda_pull >= 0, "lambda_pull", "must be >= 0"),
            (self.lr >= 0, "lr", "must be >= 0"),
            (self.batch_size is None or self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.alpha > 0, "alpha", "must be > 0"),
            (self.noise_var >= 0, "noise_var", "must be >= 0"),
            (self.method in METHODS, "method", f"must be one of {', '.join(METHODS)}"),
            (self.feature_dim >= 2, "feature_dim", "must be >= 2"),
            (self.heads >= 1 and self.feature_dim % self.heads == 0, "heads", "must divide feature_dim"),
            (self.server_steps >= 1, "server_steps", "must be >= 1"),
            (self.server_lr >= 0, "server_lr", "must be >= 0"),
            (self.eval_interval >= 1, "eval_interval", "must be >= 1"),
            (self.threads >= 1, "threads", "must be >= 1"),
            (self.max_clients is None or self.max_clients >= self.clients, "max_clients", "must be >= clients"),
            (self.force_gate is None or 0 <= self.force_gate <= 1, "force_gate", "must lie in [0, 1]"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(f"{name} {msg}", field=name)

    @property
    def sampled_per_round(self) -> int:
        return math.ceil(round(self.fraction * self.clients, 9))

    def client_config(self) -> ClientConfig:
        personalize = self.method == "full"
        return ClientConfig(
            lambda_pull=self.lambda_pull if personalize else 0.0,
            lambda_shared=self.lambda_shared,
            lr=self.lr,
            batch_size=self.batch_size,
            personalize=personalize,
            force_gate=self.force_gate,
        )


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    evaluated: bool
    mean_acc: float = float("nan")
    std_acc: float = float("nan")
    mean_f1: float = float("nan")
    std_f1: float = float("nan")
    brier: float = float("nan")
    std_brier: float = float("nan")
    client_metrics: list[dict] = field(default_factory=list)
    loss_ce: float = 0.0
    loss_pull: float = 0.0
    loss_shared: float = 0.0
    loss_server: float = 0.0
    bytes_up: int = 0
    bytes_down: int = 0
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class RoundFailure(StyleFLError, RuntimeError):
    def __init__(self, round_index: int, cause: Exception) -> None:
        super().__init__(f"round {round_index}: {cause}")
        self.round_index = round_index
        self.cause = cause


@dataclass
class RunResult:
    config: FederationConfig
    records: list[RoundRecord]
    clients: list[ClientState]
    globals: GlobalPrototypes
    aggregator: AggregatorState | None

    @property
    def evaluations(self) -> list[RoundRecord]:
        return [r for r in self.records if r.evaluated]

    def final_client_accuracies(self) -> np.ndarray:
        last = self.evaluations[-1]
        return np.array([m["accuracy"] for m in last.client_metrics])


# ---------------------------------------------------------------------------


def uniform_average(cp: PrototypeTensor) -> np.ndarray:
    """Per-class arithmetic mean over the clients that uploaded that class;
    rows of classes nobody uploaded are zero."""
    w = cp.mask.astype(np.float64)
    totals = (cp.values * w[:, :, None]).sum(axis=0)
    counts = w.sum(axis=0)
    return np.divide(totals, counts[:, None], out=np.zeros_like(totals), where=counts[:, None] > 0)


def convergence_round(records, threshold: float = 0.95) -> int:
    """First evaluated round whose mean accuracy reaches ``threshold`` times the best.

    ``records`` are :class:`RoundRecord` objects or ``(round, accuracy)`` pairs.
    """
    points = []
    for r in records:
        if isinstance(r, RoundRecord):
            if r.evaluated:
                points.append((r.round, r.mean_acc))
        else:
            points.append((int(r[0]), float(r[1])))
    if not points:
        raise ValueError("convergence_round needs at least one evaluation")
    best = max(acc for _, acc in points)
    return next(rnd for rnd, acc in points if acc >= threshold * best)


def build_shards(
    scenario: ScenarioConfig, clients: int, alpha: float, noise_var: float, seed: int
) -> list[tuple[Dataset, Dataset | None]]:
    """Generate, partition, style-shift and split the synthetic data."""
    data = generate_gaussian_mixture(
        scenario.classes, scenario.input_dim, scenario.per_class, scenario.separation, seed
    )
    plan = dirichlet_partition(data, clients, alpha, noise_var, seed + 1)
    styles = random_style_specs(
        clients,
        scenario.input_dim,
        seed + 2,
        scale_spread=scenario.scale_spread,
        offset_std=scenario.offset_std,
        noise_std=scenario.style_noise,
    )
    shards = apply_style_shift(data, styles, plan, seed + 3)
    out = []
    for k, shard in enumerate(shards):
        rng = np.random.default_rng([seed, 4, k])
        out.append(stratified_split(shard, scenario.test_fraction, rng))
    return out


def build_clients(
    config: FederationConfig, shards: list[tuple[Dataset, Dataset | None]]
) -> list[ClientState]:
    ccfg = config.client_config()
    clients = []
    for k, (train, test) in enumerate(shards):
        enc_seed = [config.seed, 10] if config.shared_init else [config.seed, 10, k]
        clients.append(
            ClientState.create(
                k,
                train,
                test,
                config.feature_dim,
                tuple(config.hidden),
                ccfg,
                encoder_rng=np.random.default_rng(enc_seed),
                head_rng=np.random.default_rng([config.seed, 11, k]),
            )
        )
    return clients


def _population(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def evaluate_population(clients: list[ClientState], globals_: GlobalPrototypes) -> list[dict]:
    out = []
    for state in clients:
        if state.test is None or len(state.test) == 0:
            continue
        result, _ = evaluate(state, globals_)
        out.append(
            {
                "client": state.client_id,
                "accuracy": result.accuracy,
                "macro_f1": result.macro_f1,
                "brier": result.brier,
                "n": result.n,
            }
        )
    return out


def run(
    config: FederationConfig,
    scenario: ScenarioConfig | None = None,
    shards: list[tuple[Dataset, Dataset | None]] | None = None,
    on_round=None,
) -> RunResult:
    """Execute all rounds; ``on_round(record, aggregate_result, cp)`` is
    called after each server phase."""
    config.validate()
    if shards is None:
        shards = build_shards(scenario or ScenarioConfig(), config.clients, config.alpha, config.noise_var, config.seed)
    if len(shards) != config.clients:
        raise ConfigError(f"{len(shards)} shards for {config.clients} clients", field="clients")
    class_count = shards[0][0].class_count
    d = config.feature_dim
    clients = build_clients(config, shards)
    globals_ = GlobalPrototypes.empty(class_count, d)
    agg = None
    if config.method != "uniform_average":
        agg = AggregatorState.init(
            config.max_clients or config.clients,
            class_count,
            d,
            config.heads,
            np.random.default_rng([config.seed, 20]),
        )
        if config.identity_aggregator:
            agg.set_identity()
            agg.zero_embeddings()
    records: list[RoundRecord] = []
    m = config.sampled_per_round
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        for t in range(1, config.rounds + 1):
            started = time.perf_counter()
            try:
                record, result, cp, globals_ = _run_round(config, t, m, clients, globals_, agg, pool)
            except (NumericError, FloatingPointError) as exc:
                raise RoundFailure(t, exc) from exc
            if t % config.eval_interval == 0 or t == config.rounds:
                metrics = evaluate_population(clients, globals_)
                record.evaluated = bool(metrics)
                record.client_metrics = metrics
                if metrics:
                    record.mean_acc, record.std_acc = _population([x["accuracy"] for x in metrics])
                    record.mean_f1, record.std_f1 = _population([x["macro_f1"] for x in metrics])
                    record.brier, record.std_brier = _population([x["brier"] for x in metrics])
            if config.timing:
                record.wall_ms = (time.perf_counter() - started) * 1000.0
            records.append(record)
            if on_round is not None:
                on_round(record, result, cp)
    return RunResult(config, records, clients, globals_, agg)


def _run_round(config, t, m, clients, globals_, agg, pool):
    rng = np.random.default_rng([config.seed, 1, t])
    sampled = sorted(int(k) for k in rng.choice(config.clients, size=m, replace=False))

    def work(k: int) -> LocalReport:
        return local_update(
            clients[k], globals_, config.local_epochs, np.random.default_rng([config.seed, 2, k, t])
        )

    reports = list(pool.map(work, sampled))
    uploads = [r.upload for r in reports if r.upload is not None]
    record = RoundRecord(round=t, participants=sampled, evaluated=False)
    record.bytes_down = len(sampled) * download_bytes(config.feature_dim, globals_.values.shape[0])
    record.bytes_up = sum(u.wire_bytes() for u in uploads)
    active = [r for r in reports if r.upload is not None]
    if active:
        record.loss_ce = float(np.mean([r.loss_ce for r in active]))
        record.loss_pull = float(np.mean([r.loss_pull for r in active]))
        record.loss_shared = float(np.mean([r.loss_shared for r in active]))
    if not uploads:
        return record, None, None, globals_
    cp = assemble(uploads, globals_.values.shape[0])
    present = cp.mask.any(axis=0)
    result = None
    if config.method == "uniform_average":
        new = uniform_average(cp)
    else:
        result = aggregate(agg, cp)
        new = result.global_protos
        report = train_aggregator(agg, cp, config.server_steps, config.server_lr)
        if report.aborted:
            raise NumericError("aggregator loss is not finite")
        record.loss_server = report.final_loss
    if not np.all(np.isfinite(new[present])):
        raise NumericError("non-finite global prototype")
    values = globals_.values.copy()
    values[present] = new[present]
    globals_ = GlobalPrototypes(values, globals_.available | present)
    return record, result, cp, globals_


def ablation_arm(config: FederationConfig, **kwargs) -> RunResult:
    """Run with the personalization branch removed, attention aggregation kept."""
    return run(replace(config, method="ablation_attention_only"), **kwargs)
