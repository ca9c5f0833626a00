"""Client-side learning: prototype alignment, content/style decomposition of
the personal vectors, FiLM personalization, gated prototype reconstruction
and the local SGD update.

Only class-mean features leave the client (:class:`ClientUpload`); personal
vectors, style vectors and all network weights stay local.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import Dataset
from .encoder import MLP, FiLMParams, encode, film_modulate, init_encoder
from .errors import NumericError, ShapeError
from .metrics import EvalResult, evaluate_probabilities
from .numerics import EPS, Tensor

log = logging.getLogger(__name__)

# relative size below which a style residual is treated as zero
STYLE_VANISH = 1e-6


@dataclass(frozen=True)
class ClientConfig:
    lambda_pull: float = 0.7
    lambda_shared: float = 1.0
    lr: float = 0.005
    batch_size: int | None = None  # None: whole shard per step
    personalize: bool = True
    # fixes the gate value instead of learning it (1.0 = pure global prototypes)
    force_gate: float | None = None
    eps: float = EPS


@dataclass(frozen=True)
class GlobalPrototypes:
    """Broadcast from the server; ``available[c]`` is false until class c has
    been aggregated at least once."""

    values: np.ndarray
    available: np.ndarray

    @classmethod
    def empty(cls, class_count: int, dim: int) -> "GlobalPrototypes":
        return cls(np.zeros((class_count, dim)), np.zeros(class_count, dtype=bool))


@dataclass(frozen=True)
class ClientUpload:
    client_id: int
    means: dict[int, np.ndarray]
    counts: dict[int, int]
    class_count: int

    def __post_init__(self) -> None:
        if set(self.means) != set(self.counts):
            raise ShapeError("means and counts must cover the same classes")
        if any(n < 1 for n in self.counts.values()):
            raise ShapeError("uploaded classes need a positive count")

    @property
    def mask(self) -> np.ndarray:
        out = np.zeros(self.class_count, dtype=bool)
        out[list(self.means)] = True
        return out

    @property
    def dim(self) -> int:
        return next(iter(self.means.values())).shape[0] if self.means else 0

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "means": {str(c): self.means[c].tolist() for c in sorted(self.means)},
            "counts": {str(c): int(self.counts[c]) for c in sorted(self.counts)},
            "mask": self.mask.tolist(),
        }

    def wire_bytes(self) -> int:
        return upload_bytes(self.dim, len(self.means), self.class_count)


def upload_bytes(dim: int, present: int, class_count: int) -> int:
    """Wire size of one upload: float64 means plus bookkeeping.

    Bookkeeping is a u32 client id, a u32 count per present class and one
    presence bit per class.
    """
    return 8 * dim * present + 4 * present + 4 + math.ceil(class_count / 8)


def download_bytes(dim: int, class_count: int) -> int:
    """Wire size of one broadcast: all float64 global prototypes plus availability bits."""
    return 8 * dim * class_count + math.ceil(class_count / 8)


@dataclass
class ClientState:
    client_id: int
    encoder: MLP
    film: FiLMParams
    gate: MLP
    personal: Tensor  # (C, d); rows of unseen classes stay zero and unused
    train: Dataset
    test: Dataset | None
    config: ClientConfig = field(default_factory=ClientConfig)
    styles: np.ndarray | None = None
    shared_means: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        client_id: int,
        train: Dataset,
        test: Dataset | None,
        feature_dim: int,
        hidden: tuple[int, ...] = (64, 64),
        config: ClientConfig | None = None,
        encoder_rng: np.random.Generator | None = None,
        head_rng: np.random.Generator | None = None,
    ) -> "ClientState":
        encoder_rng = encoder_rng if encoder_rng is not None else np.random.default_rng(0)
        head_rng = head_rng if head_rng is not None else np.random.default_rng(1)
        d = feature_dim
        return cls(
            client_id=client_id,
            encoder=init_encoder(train.dim, d, hidden, encoder_rng),
            film=FiLMParams.init(d, head_rng),
            gate=MLP.init([4 * d, d, 1], head_rng, zero_last=True),
            personal=nx.param(np.zeros((train.class_count, d))),
            train=train,
            test=test,
            config=config or ClientConfig(),
        )

    @property
    def class_count(self) -> int:
        return self.train.class_count

    @property
    def dim(self) -> int:
        return self.encoder.out_dim

    @property
    def seen(self) -> np.ndarray:
        return self.train.class_counts() > 0

    def personal_vectors(self) -> dict[int, np.ndarray]:
        return {int(c): self.personal.value[c].copy() for c in np.flatnonzero(self.seen)}

    def parameters(self) -> list[Tensor]:
        params = list(self.encoder.parameters())
        if self.config.personalize:
            params += self.film.parameters() + [self.personal]
            if self.config.force_gate is None:
                params += self.gate.parameters()
        return params


# ---------------------------------------------------------------------------
# building blocks


def compute_shared_means(state: ClientState, data: Dataset | None = None) -> dict[int, np.ndarray]:
    """Per-class mean raw feature over the shard; absent classes omitted."""
    data = data if data is not None else state.train
    h = encode(state.encoder, data.features).value
    out = {}
    for c in np.unique(data.labels):
        out[int(c)] = h[data.labels == c].mean(axis=0)
    return out


def decompose(u, p_global, eps: float = EPS) -> tuple[Tensor, Tensor]:
    """Split ``u`` into its projection on ``p_global`` and a unit style direction.

    Works row-wise on (..., d) inputs.
    """
    u, p_global = nx.as_tensor(u), nx.as_tensor(p_global)
    if u.shape[-1] != p_global.shape[-1]:
        raise ShapeError(f"decompose: u {u.shape} vs prototype {p_global.shape}")
    coef = (u * p_global).sum(axis=-1, keepdims=True) / ((p_global * p_global).sum(axis=-1, keepdims=True) + eps)
    content = coef * p_global
    raw = u - content
    raw_norm = nx.norm(raw, axis=-1, keepdims=True)
    # a residual at round-off scale relative to u counts as vanished: zero style
    live = raw_norm.value > STYLE_VANISH * nx.norm(u, axis=-1, keepdims=True).value + eps
    style = nx.where(live, raw / nx.maximum(raw_norm, eps), 0.0)
    return content, style


def gate_value(gate: MLP, p_global, u) -> Tensor:
    p_global, u = nx.as_tensor(p_global), nx.as_tensor(u)
    feats = nx.concat([p_global, u, nx.absolute(p_global - u), p_global * u], axis=-1)
    return nx.sigmoid(gate(feats))


def fuse(alpha, p_global, u) -> Tensor:
    return alpha * p_global + (1.0 - alpha) * u


def reconstruct_personal(state: ClientState, p_global_c, u_c) -> tuple[float, np.ndarray]:
    """Gate value in (0, 1) and the fused personalized prototype for one class."""
    p_global_c = np.asarray(p_global_c, dtype=np.float64)
    u_c = np.asarray(u_c, dtype=np.float64)
    if p_global_c.shape != (state.dim,) or u_c.shape != (state.dim,):
        raise ShapeError(f"reconstruct_personal expects ({state.dim},) vectors")
    if state.config.force_gate is not None:
        alpha = nx.Tensor(np.array([state.config.force_gate]))
    else:
        alpha = gate_value(state.gate, p_global_c, u_c)
    return float(alpha.value[0]), fuse(alpha, p_global_c, u_c).value


def effective_globals(state: ClientState, globals_: GlobalPrototypes, means: dict[int, np.ndarray]) -> np.ndarray:
    """Global prototypes with the client's own shared means standing in for
    locally present classes the server has not produced yet."""
    out = globals_.values.copy()
    for c, m in means.items():
        if not globals_.available[c]:
            out[c] = m
    return out


@dataclass
class Forward:
    total: Tensor
    loss_ce: Tensor
    loss_pull: Tensor
    loss_shared: Tensor
    h: Tensor
    h_pers: Tensor
    prototypes: Tensor


def personalized_prototypes(state: ClientState, protos: np.ndarray) -> tuple[Tensor, Tensor]:
    """(styles, personalized prototypes) for all classes; unseen classes fall
    back to the global prototype and a zero style."""
    cfg = state.config
    seen = state.seen[:, None]
    _, styles = decompose(state.personal, protos, cfg.eps)
    styles = nx.where(seen, styles, 0.0)
    if cfg.force_gate is not None:
        alpha = nx.Tensor(np.full((state.class_count, 1), cfg.force_gate))
    else:
        alpha = gate_value(state.gate, protos, state.personal)
    fused = fuse(alpha, protos, state.personal)
    return styles, nx.where(seen, fused, protos)


def film_terms(state: ClientState, styles: Tensor) -> tuple[Tensor, Tensor]:
    """Per-class FiLM scale and shift, zeroed for classes without a style."""
    seen = state.seen[:, None]
    gamma = nx.where(seen, state.film.gamma_net(styles), 0.0)
    beta = nx.where(seen, state.film.beta_net(styles), 0.0)
    return gamma, beta


def conditioned_logits(h: Tensor, gamma: Tensor, beta: Tensor, prototypes: Tensor) -> Tensor:
    """(n, C) logits where class c scores ``-|h * (1 + gamma_c) + beta_c - p_c|^2``.

    Each class hypothesis is judged on the features modulated by that
    class's own style, so no label is needed to pick the style.
    """
    n, d = h.shape
    C = prototypes.shape[0]
    mod = h.reshape(n, 1, d) * (1.0 + gamma).reshape(1, C, d) + (beta - prototypes).reshape(1, C, d)
    return -(mod * mod).sum(axis=-1)


def client_objective(state: ClientState, x: np.ndarray, y: np.ndarray, protos: np.ndarray) -> Forward:
    """Task cross-entropy + weighted pull and shared-alignment terms on one batch.

    ``protos`` are the (C, d) global prototypes, held constant.
    """
    cfg = state.config
    h = encode(state.encoder, x)
    loss_shared = nx.cross_entropy(nx.proto_logits(h, protos), y)
    if cfg.personalize:
        styles, personal = personalized_prototypes(state, protos)
        gamma, beta = film_terms(state, styles)
        # identical to film_modulate(film, h, styles[y]) for seen labels
        h_pers = h * (1.0 + gamma[y]) + beta[y]
        logits = conditioned_logits(h, gamma, beta, personal)
    else:
        personal = nx.Tensor(protos)
        h_pers = h
        logits = nx.proto_logits(h, personal)
    loss_ce = nx.cross_entropy(logits, y)
    if cfg.personalize and cfg.lambda_pull > 0:
        loss_pull = (1.0 - nx.cosine_sim(h_pers, personal[y], cfg.eps)).mean()
        total = loss_ce + cfg.lambda_pull * loss_pull + cfg.lambda_shared * loss_shared
    else:
        loss_pull = nx.Tensor(0.0)
        total = loss_ce + cfg.lambda_shared * loss_shared
    return Forward(total, loss_ce, loss_pull, loss_shared, h, h_pers, personal)


def _sgd_step(params: list[Tensor], lr: float) -> None:
    for p in params:
        p.value = p.value - lr * p.grad
        p.zero_grad()


@dataclass
class LocalReport:
    upload: ClientUpload | None
    loss_ce: float = 0.0
    loss_pull: float = 0.0
    loss_shared: float = 0.0
    loss_total: float = 0.0
    steps: int = 0


def local_update(
    state: ClientState,
    globals_: GlobalPrototypes,
    epochs: int,
    rng: np.random.Generator | None = None,
) -> LocalReport:
    """Train the client in place for ``epochs`` passes and produce its upload.

    Reported losses are averages over the last epoch.
    """
    if len(state.train) == 0:
        log.warning("client %d has an empty shard; skipping", state.client_id)
        return LocalReport(upload=None)
    rng = rng if rng is not None else np.random.default_rng(state.client_id)
    cfg = state.config
    protos = effective_globals(state, globals_, compute_shared_means(state))
    params = state.parameters()
    for p in params:
        p.zero_grad()
    n = len(state.train)
    batch = cfg.batch_size or n
    report = LocalReport(upload=None)
    for _ in range(epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            fwd = client_objective(state, state.train.features[idx], state.train.labels[idx], protos)
            total = fwd.total.item()
            if not math.isfinite(total):
                raise NumericError(f"client {state.client_id}: non-finite local loss")
            fwd.total.backward()
            _sgd_step(params, cfg.lr)
            sums += [fwd.loss_ce.item(), fwd.loss_pull.item(), fwd.loss_shared.item(), total]
            batches += 1
            report.steps += 1
        report.loss_ce, report.loss_pull, report.loss_shared, report.loss_total = (sums / batches).tolist()
    if cfg.personalize:
        _, styles = decompose(state.personal.value, protos, cfg.eps)
        state.styles = np.where(state.seen[:, None], styles.value, 0.0)
    state.shared_means = compute_shared_means(state)
    counts = state.train.class_counts()
    report.upload = ClientUpload(
        client_id=state.client_id,
        means=state.shared_means,
        counts={c: int(counts[c]) for c in state.shared_means},
        class_count=state.class_count,
    )
    return report


# ---------------------------------------------------------------------------
# evaluation


def class_logits(state: ClientState, x: np.ndarray, globals_: GlobalPrototypes) -> np.ndarray:
    """(n, C) prediction scores; the same hypothesis-conditioned logits the
    task loss trains (plain prototype logits without personalization)."""
    protos = effective_globals(state, globals_, state.shared_means or compute_shared_means(state))
    h = encode(state.encoder, x)
    if not state.config.personalize:
        return nx.proto_logits(h, protos).value
    styles, personal = personalized_prototypes(state, protos)
    gamma, beta = film_terms(state, styles)
    return conditioned_logits(h, gamma, beta, personal).value


def predict_proba(state: ClientState, x: np.ndarray, globals_: GlobalPrototypes) -> np.ndarray:
    return nx.masked_softmax(nx.Tensor(class_logits(state, x, globals_)), axis=1).value


def evaluate(
    state: ClientState, globals_: GlobalPrototypes, data: Dataset | None = None
) -> tuple[EvalResult, np.ndarray]:
    data = data if data is not None else state.test
    if data is None or len(data) == 0:
        raise ShapeError(f"client {state.client_id} has no evaluation data")
    probs = predict_proba(state, data.features, globals_)
    return evaluate_probabilities(probs, data.labels, state.class_count), probs


def personalized_features(state: ClientState, data: Dataset, globals_: GlobalPrototypes) -> np.ndarray:
    """Features modulated with each sample's own class style (raw features
    for classes the client never trained on)."""
    protos = effective_globals(state, globals_, state.shared_means or compute_shared_means(state))
    h = encode(state.encoder, data.features)
    if not state.config.personalize:
        return h.value
    styles, _ = personalized_prototypes(state, protos)
    gamma, beta = film_terms(state, styles)
    y = data.labels
    return (h * (1.0 + gamma[y]) + beta[y]).value
