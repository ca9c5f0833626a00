"""Per-client feature encoder and style-conditioned FiLM modulation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .numerics import Tensor, as_tensor, param, tanh


@dataclass
class MLP:
    """Stack of affine layers with ``tanh`` between them (never after the last)."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        zero_last: bool = False,
    ) -> "MLP":
        if len(widths) < 2:
            raise ShapeError("an MLP needs at least input and output widths")
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            weights.append(param(w))
            biases.append(param(np.zeros(fan_out)))
        return cls(weights, biases)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        single = x.ndim == 1
        if single:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"MLP expects (*, {self.in_dim}) input, got {x.shape}")
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < n_layers - 1:
                x = tanh(x)
        return x.reshape(-1) if single else x

    def copy(self) -> "MLP":
        return MLP([param(w.value) for w in self.weights], [param(b.value) for b in self.biases])


# The encoder is a plain MLP; the alias documents its role.
EncoderParams = MLP


def init_encoder(
    in_dim: int,
    feature_dim: int = 32,
    hidden: Sequence[int] = (64, 64),
    rng: np.random.Generator | None = None,
) -> EncoderParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    return MLP.init([in_dim, *hidden, feature_dim], rng)


def encode(params: EncoderParams, x) -> Tensor:
    """Raw client features for one sample (d_in,) or a batch (n, d_in)."""
    return params(x)


@dataclass
class FiLMParams:
    gamma_net: MLP
    beta_net: MLP

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "FiLMParams":
        # zero final layers: modulation starts as the identity map
        return cls(
            gamma_net=MLP.init([dim, dim, dim], rng, zero_last=True),
            beta_net=MLP.init([dim, dim, dim], rng, zero_last=True),
        )

    @property
    def dim(self) -> int:
        return self.gamma_net.out_dim

    def parameters(self) -> list[Tensor]:
        return self.gamma_net.parameters() + self.beta_net.parameters()

    def copy(self) -> "FiLMParams":
        return FiLMParams(self.gamma_net.copy(), self.beta_net.copy())


def film_modulate(film: FiLMParams, h, style) -> Tensor:
    """``h * (1 + gamma(style)) + beta(style)``; ``style`` is per-sample or shared."""
    h, style = as_tensor(h), as_tensor(style)
    if h.shape[-1] != film.dim or style.shape[-1] != film.dim:
        raise ShapeError(f"film_modulate: h {h.shape}, style {style.shape}, dim {film.dim}")
    return h * (1.0 + film.gamma_net(style)) + film.beta_net(style)
