"""Building blocks: linear, layer norm, dropout, multi-head attention, pooling.

All layers accept an optional leading batch axis. Attention masks are
boolean arrays where True marks a position that may be attended to.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateRowError, DimensionError, EmptyReductionError
from .tensor import Tensor

POOL_MODES = ("self_attention", "average", "max")


@dataclass
class Linear:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, name: str = "linear") -> "Linear":
        bound = 1.0 / math.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        return cls(Tensor.param(w, f"{name}.weight"), Tensor.param(np.zeros(n_out), f"{name}.bias"))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError("linear", x.shape, self.weight.shape, "last extent must equal in_features")
        return T.affine(x, self.weight, self.bias)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


@dataclass
class LayerNorm:
    gain: Tensor
    shift: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, dim: int, eps: float = 1e-5, name: str = "ln") -> "LayerNorm":
        if eps <= 0:
            raise ConfigError("layer norm epsilon must be positive")
        return cls(Tensor.param(np.ones(dim), f"{name}.gain"), Tensor.param(np.zeros(dim), f"{name}.shift"), eps)

    def parameters(self) -> list[Tensor]:
        return [self.gain, self.shift]

    def __call__(self, x: Tensor) -> Tensor:
        # d == 1 is allowed; every row then normalizes to exactly 0 before the affine part.
        return T.layer_norm(x, self.gain, self.shift, self.eps)


def layernorm_forward(ln: LayerNorm, x: Tensor) -> Tensor:
    return ln(x)


@dataclass
class Dropout:
    rate: float = 0.1
    training: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None, training: bool | None = None) -> Tensor:
        training = self.training if training is None else training
        if not training or self.rate == 0.0:
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs a seeded generator")
        keep = rng.random(x.shape) >= self.rate
        return T.dropout_mask(x, keep, self.rate)


def dropout_forward(d: Dropout, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
    return d(x, rng)


@dataclass
class MultiHeadAttention:
    num_heads: int
    w_q: Linear
    w_k: Linear
    w_v: Linear
    w_o: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, num_heads: int, name: str = "mha") -> "MultiHeadAttention":
        if num_heads <= 0 or dim % num_heads:
            raise ConfigError(f"model dim {dim} is not divisible by num_heads {num_heads}")
        return cls(
            num_heads,
            Linear.init(rng, dim, dim, f"{name}.w_q"),
            Linear.init(rng, dim, dim, f"{name}.w_k"),
            Linear.init(rng, dim, dim, f"{name}.w_v"),
            Linear.init(rng, dim, dim, f"{name}.w_o"),
        )

    @property
    def dim(self) -> int:
        return self.w_q.in_features

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def parameters(self) -> list[Tensor]:
        return [p for lin in (self.w_q, self.w_k, self.w_v, self.w_o) for p in lin.parameters()]

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.transpose(T.reshape(x, (b, n, self.num_heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, context: Tensor, mask=None, return_weights: bool = False):
        unbatched = query.ndim == 2
        if unbatched:
            query = T.reshape(query, (1,) + query.shape)
            context = T.reshape(context, (1,) + context.shape)
            if mask is not None:
                mask = np.asarray(mask, dtype=bool)[None]
        if query.shape[-1] != self.dim or context.shape[-1] != self.dim:
            raise DimensionError("mha", query.shape, context.shape, f"model dim is {self.dim}")
        if query.shape[0] != context.shape[0]:
            raise DimensionError("mha", query.shape, context.shape, "batch extents differ")
        b, lq, _ = query.shape
        lk = context.shape[1]
        if mask is None:
            mask = np.ones((b, lq, lk), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (b, lq, lk):
            raise DimensionError("mha mask", (b, lq, lk), mask.shape)

        q = self._split(self.w_q(query))  # (B, H, Lq, hd)
        k = T.transpose(T.reshape(self.w_k(context), (b, lk, self.num_heads, self.head_dim)), (0, 2, 3, 1))
        v = self._split(self.w_v(context))  # (B, H, Lk, hd)
        scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(self.head_dim))
        weights = T.masked_softmax(scores, mask[:, None, :, :])
        heads = T.matmul(weights, v)
        merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, lq, self.dim))
        out = self.w_o(merged)
        if unbatched:
            out = T.reshape(out, (lq, self.dim))
            if return_weights:
                return out, weights.data[0]
        if return_weights:
            return out, weights.data
        return out


def mha_forward(mha: MultiHeadAttention, query_seq: Tensor, context_seq: Tensor, mask=None) -> Tensor:
    return mha(query_seq, context_seq, mask)


def pool(seq: Tensor, mask, mode: str, attention: MultiHeadAttention | None = None) -> Tensor:
    """Reduce a (B, L, D) or (L, D) sequence to (B, D) or (D,) over valid rows.

    ``self_attention`` runs full self-attention (keys restricted to valid
    rows) and then takes the masked mean of the outputs.
    """
    if mode not in POOL_MODES:
        raise ConfigError(f"unknown pool mode {mode!r}; expected one of {POOL_MODES}")
    unbatched = seq.ndim == 2
    if mask is None:
        mask = np.ones(seq.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if unbatched:
        seq = T.reshape(seq, (1,) + seq.shape)
        mask = mask[None]
    if mask.shape != seq.shape[:2]:
        raise DimensionError("pool mask", seq.shape, mask.shape)
    if seq.shape[1] == 0 or not mask.any(axis=1).all():
        raise EmptyReductionError("pool: empty sequence")

    if mode == "average":
        out = T.mean(seq, axis=1, mask=mask)
    elif mode == "max":
        out = T.max_reduce(seq, axis=1, mask=mask)
    else:
        if attention is None:
            raise ConfigError("self_attention pooling needs an attention block")
        b, n, _ = seq.shape
        key_mask = np.broadcast_to(mask[:, None, :], (b, n, n))
        try:
            attended = attention(seq, seq, key_mask)
        except DegenerateRowError as e:  # pragma: no cover - guarded above
            raise EmptyReductionError(str(e)) from e
        out = T.mean(attended, axis=1, mask=mask)
    return T.reshape(out, (out.shape[-1],)) if unbatched else out


@dataclass
class Projection:
    """Linear -> LayerNorm -> Dropout into the shared latent space."""

    linear: Linear
    norm: LayerNorm
    dropout: Dropout = field(default_factory=Dropout)

    def parameters(self) -> list[Tensor]:
        return self.linear.parameters() + self.norm.parameters()

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
        return self.dropout(self.norm(self.linear(x)), rng, training)
