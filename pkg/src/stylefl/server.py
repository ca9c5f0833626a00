"""Server-side prototype aggregation with a one-layer transformer encoder.

Every uploaded (client, class) prototype becomes one token. Tokens get
client and class embeddings added and are layer-normalized, then refined by
a pre-norm transformer block with masked multi-head self-attention over the
whole token sequence. A second, per-class attention pass scores each
client's refined prototype against the class embedding and pools them into
the global prototype.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .client import ClientUpload
from .errors import EmptyRoundError, ProtocolError, ShapeError
from .numerics import EPS, Tensor

log = logging.getLogger(__name__)

# std of the initial weights and embeddings (the usual small-transformer choice)
INIT_STD = 0.02


@dataclass(frozen=True)
class PrototypeTensor:
    values: np.ndarray  # (M, C, d); zero where masked
    mask: np.ndarray  # (M, C) bool
    client_ids: np.ndarray  # (M,)
    counts: np.ndarray  # (M, C) sample counts, zero where masked

    @property
    def clients(self) -> int:
        return self.values.shape[0]

    @property
    def class_count(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def permuted(self, order: Sequence[int]) -> "PrototypeTensor":
        order = np.asarray(order)
        return PrototypeTensor(
            self.values[order], self.mask[order], self.client_ids[order], self.counts[order]
        )


def assemble(uploads: Sequence[ClientUpload], class_count: int) -> PrototypeTensor:
    """Stack uploads in arrival order into the round's prototype tensor."""
    if not uploads:
        raise EmptyRoundError("no uploads to assemble")
    ids = [u.client_id for u in uploads]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client id in round: {ids}")
    dims = {u.dim for u in uploads if u.means}
    if len(dims) > 1:
        raise ShapeError(f"uploads disagree on prototype dim: {sorted(dims)}")
    d = dims.pop() if dims else 0
    M = len(uploads)
    values = np.zeros((M, class_count, d))
    mask = np.zeros((M, class_count), dtype=bool)
    counts = np.zeros((M, class_count), dtype=np.int64)
    for k, up in enumerate(uploads):
        if up.class_count != class_count:
            raise ProtocolError(f"client {up.client_id} reports {up.class_count} classes, expected {class_count}")
        for c, m in up.means.items():
            values[k, c] = m
            mask[k, c] = True
            counts[k, c] = up.counts[c]
    return PrototypeTensor(values, mask, np.asarray(ids, dtype=np.int64), counts)


def split(cp: PrototypeTensor) -> list[ClientUpload]:
    """Inverse of :func:`assemble`."""
    out = []
    for k in range(cp.clients):
        present = np.flatnonzero(cp.mask[k])
        out.append(
            ClientUpload(
                client_id=int(cp.client_ids[k]),
                means={int(c): cp.values[k, c].copy() for c in present},
                counts={int(c): int(cp.counts[k, c]) for c in present},
                class_count=cp.class_count,
            )
        )
    return out


@dataclass
class AggregatorState:
    dim: int
    heads: int
    client_emb: Tensor  # (K_max, d)
    class_emb: Tensor  # (C, d)
    params: dict[str, Tensor]
    input_norm: bool = True
    eps: float = EPS

    @classmethod
    def init(
        cls,
        max_clients: int,
        class_count: int,
        dim: int,
        heads: int = 4,
        rng: np.random.Generator | None = None,
        init_std: float = INIT_STD,
    ) -> "AggregatorState":
        """Small-normal initialization: projections and embeddings draw from
        N(0, init_std), the two residual output projections from
        N(0, init_std / sqrt(2)), biases and norm shifts start at zero."""
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        ff = 4 * dim
        residual_std = init_std / math.sqrt(2)

        def dense(fan_in, fan_out, std=init_std):
            return nx.param(rng.normal(0.0, std, size=(fan_in, fan_out)))

        params = {
            "in_gain": nx.param(np.ones(dim)),
            "in_bias": nx.param(np.zeros(dim)),
            "ln1_gain": nx.param(np.ones(dim)),
            "ln1_bias": nx.param(np.zeros(dim)),
            "wq": dense(dim, dim),
            "bq": nx.param(np.zeros(dim)),
            "wk": dense(dim, dim),
            "bk": nx.param(np.zeros(dim)),
            "wv": dense(dim, dim),
            "bv": nx.param(np.zeros(dim)),
            "wo": dense(dim, dim, residual_std),
            "bo": nx.param(np.zeros(dim)),
            "ln2_gain": nx.param(np.ones(dim)),
            "ln2_bias": nx.param(np.zeros(dim)),
            "w1": dense(dim, ff),
            "b1": nx.param(np.zeros(ff)),
            "w2": dense(ff, dim, residual_std),
            "b2": nx.param(np.zeros(dim)),
        }
        return cls(
            dim=dim,
            heads=heads,
            client_emb=nx.param(rng.normal(0.0, init_std, size=(max_clients, dim))),
            class_emb=nx.param(rng.normal(0.0, init_std, size=(class_count, dim))),
            params=params,
        )

    @property
    def class_count(self) -> int:
        return self.class_emb.shape[0]

    @property
    def max_clients(self) -> int:
        return self.client_emb.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.client_emb, self.class_emb, *self.params.values()]

    def snapshot(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.parameters()]

    def restore(self, values: list[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values):
            p.value = v.copy()
            p.zero_grad()

    def set_identity(self) -> None:
        """Make the token pipeline the identity: no input normalization and a
        transformer block whose residual branches output zero."""
        self.input_norm = False
        for name in ("wo", "bo", "w2", "b2"):
            self.params[name].value = np.zeros_like(self.params[name].value)

    def zero_embeddings(self) -> None:
        self.client_emb.value = np.zeros_like(self.client_emb.value)
        self.class_emb.value = np.zeros_like(self.class_emb.value)


@dataclass
class AggregateResult:
    global_protos: np.ndarray  # (C, d); zero rows for stale classes
    attention: np.ndarray  # (M, C)
    Z: np.ndarray  # (M, C, d)
    present: np.ndarray  # (C,) classes with at least one upload


def _check_cp(agg: AggregatorState, cp: PrototypeTensor) -> None:
    if cp.class_count != agg.class_count or cp.dim != agg.dim:
        raise ShapeError(
            f"prototype tensor (C={cp.class_count}, d={cp.dim}) does not match "
            f"aggregator (C={agg.class_count}, d={agg.dim})"
        )
    if cp.client_ids.size and (cp.client_ids.min() < 0 or cp.client_ids.max() >= agg.max_clients):
        raise ShapeError(f"client id outside embedding table of size {agg.max_clients}")
    if not cp.mask.any():
        raise EmptyRoundError("prototype tensor has no present entries")


def _self_attention(agg: AggregatorState, x: Tensor, key_mask: np.ndarray) -> Tensor:
    p = agg.params
    n, d = x.shape
    H = agg.heads
    dh = d // H

    def heads(t: Tensor) -> Tensor:
        return nx.transpose(t.reshape(n, H, dh), (1, 0, 2))

    q = heads(x @ p["wq"] + p["bq"])
    k = heads(x @ p["wk"] + p["bk"])
    v = heads(x @ p["wv"] + p["bv"])
    scores = (q @ nx.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    weights = nx.masked_softmax(scores, key_mask[None, None, :], axis=-1)
    out = nx.transpose(weights @ v, (1, 0, 2)).reshape(n, d)
    return out @ p["wo"] + p["bo"]


def encode_tokens(agg: AggregatorState, cp: PrototypeTensor) -> Tensor:
    """Embed, normalize and refine all tokens; returns Z of shape (M, C, d),
    exactly zero at masked entries."""
    _check_cp(agg, cp)
    p = agg.params
    M, C, d = cp.values.shape
    emb = agg.client_emb[cp.client_ids].reshape(M, 1, d) + agg.class_emb.reshape(1, C, d)
    x = nx.Tensor(cp.values) + emb
    if agg.input_norm:
        x = nx.layer_norm(x, p["in_gain"], p["in_bias"], agg.eps)
    tokens = x.reshape(M * C, d)
    key_mask = cp.mask.reshape(-1)
    h = tokens + _self_attention(agg, nx.layer_norm(tokens, p["ln1_gain"], p["ln1_bias"], agg.eps), key_mask)
    ff = nx.layer_norm(h, p["ln2_gain"], p["ln2_bias"], agg.eps) @ p["w1"] + p["b1"]
    h = h + nx.gelu(ff) @ p["w2"] + p["b2"]
    h = nx.where(key_mask[:, None], h, 0.0)
    return h.reshape(M, C, d)


def class_attention(agg: AggregatorState, Z: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-class softmax over clients of ``Z[k, c] . e_class[c] / sqrt(d)`` and
    the resulting weighted prototype sum."""
    M, C, d = Z.shape
    scores = (Z * agg.class_emb.reshape(1, C, d)).sum(axis=-1)
    alpha = nx.softmax_scaled(scores, math.sqrt(d), mask=mask, axis=0)
    pooled = (alpha.reshape(M, C, 1) * Z).sum(axis=0)
    return alpha, pooled


def aggregate(agg: AggregatorState, cp: PrototypeTensor) -> AggregateResult:
    Z = encode_tokens(agg, cp)
    alpha, pooled = class_attention(agg, Z, cp.mask)
    return AggregateResult(
        global_protos=pooled.value,
        attention=alpha.value,
        Z=Z.value,
        present=cp.mask.any(axis=0),
    )


def server_consistency_loss(Z, cp: PrototypeTensor, eps: float = EPS) -> Tensor:
    """Mean over present (client, class) pairs of 1 - cos(mean_k Z[:, c], CP[k, c])."""
    Z = nx.as_tensor(Z)
    if Z.shape != cp.values.shape:
        raise ShapeError(f"Z {Z.shape} vs prototype tensor {cp.values.shape}")
    present = cp.mask.sum()
    if present == 0:
        raise EmptyRoundError("consistency loss undefined without present pairs")
    M, C, d = Z.shape
    w = cp.mask.astype(np.float64)
    per_class = np.maximum(w.sum(axis=0), 1.0)
    zbar = (Z * w[:, :, None]).sum(axis=0) / per_class[:, None]  # (C, d)
    cos = nx.cosine_sim(zbar.reshape(1, C, d), nx.Tensor(cp.values), eps)  # (M, C)
    return ((1.0 - cos) * w).sum() * (1.0 / present)


def aggregator_loss(agg: AggregatorState, cp: PrototypeTensor) -> Tensor:
    return server_consistency_loss(encode_tokens(agg, cp), cp, agg.eps)


@dataclass
class TrainReport:
    initial_loss: float
    final_loss: float
    steps_taken: int
    rejected: bool = False
    aborted: bool = False


def train_aggregator(agg: AggregatorState, cp: PrototypeTensor, steps: int, lr: float) -> TrainReport:
    """SGD on the consistency loss, in place.

    A step that raises the loss is undone and training stops, so the final
    loss never exceeds the initial one. A non-finite loss restores the
    state from before the call.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    start = agg.snapshot()
    params = agg.parameters()
    for p in params:
        p.zero_grad()
    loss = aggregator_loss(agg, cp)
    initial = loss.item()
    if not math.isfinite(initial):
        agg.restore(start)
        return TrainReport(initial, initial, 0, aborted=True)
    report = TrainReport(initial, initial, 0)
    if lr == 0:
        return report
    current = initial
    for _ in range(steps):
        loss.backward()
        before = agg.snapshot()
        for p in params:
            p.value = p.value - lr * p.grad
            p.zero_grad()
        loss = aggregator_loss(agg, cp)
        value = loss.item()
        if not math.isfinite(value):
            log.warning("aggregator loss became non-finite; keeping previous state")
            agg.restore(start)
            report.final_loss, report.aborted = initial, True
            return report
        if value > current:
            agg.restore(before)
            report.rejected = True
            break
        current = value
        report.steps_taken += 1
    report.final_loss = current
    for p in params:
        p.zero_grad()
    return report


def dump_round(path: str | Path, round_index: int, result: AggregateResult, cp: PrototypeTensor) -> None:
    """Write Z and attention weights of one round as JSON."""
    payload = {
        "round": round_index,
        "client_ids": cp.client_ids.tolist(),
        "mask": cp.mask.tolist(),
        "attention": result.attention.tolist(),
        "Z": result.Z.tolist(),
        "global_prototypes": result.global_protos.tolist(),
    }
    Path(path).write_text(json.dumps(payload))
