"""Text-only encoder-decoder transformer (post-norm, sinusoidal positions)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, LengthError, VocabularyError
from .tensor import MASK_VALUE, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 200
    max_positions: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_positions"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


class DropoutState:
    """Shared by every layer of one model: rate, RNG and train/eval flag."""

    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng
        self.training = False

    def __call__(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.rate, self.rng, self.training)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


def normal_param(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


def sinusoidal_table(n_positions: int, d: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    rates = np.power(10000.0, -np.arange(0, d, 2) / d)
    table = np.zeros((n_positions, d))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: d // 2])
    return table


def key_padding_bias(mask: np.ndarray) -> np.ndarray:
    """(B, M) bool mask -> (B, 1, 1, M) additive logit bias."""
    return np.where(mask, 0.0, MASK_VALUE)[:, None, None, :]


def causal_bias(mask: np.ndarray) -> np.ndarray:
    """Key padding plus no-lookahead: (B, T) -> (B, 1, T, T)."""
    t = mask.shape[1]
    allowed = np.tril(np.ones((t, t), dtype=bool))[None] & mask[:, None, :]
    return np.where(allowed, 0.0, MASK_VALUE)[:, None, :, :]


def split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    return T.swapaxes(x.reshape(*lead, n, h, d // h), -3, -2)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    return T.swapaxes(x, -3, -2).reshape(*lead, n, h * dk)


def attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None, scale: float) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over already head-split inputs."""
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * scale
    if bias is not None:
        scores = scores + bias
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


class MultiHeadAttention(Module):
    """Bias-free projections W_q, W_k, W_v, W_o; keys may come from another width."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, d_kv: int | None = None):
        d_kv = d_kv or d_model
        self.n_heads = n_heads
        self.w_q = normal_param(rng, (d_model, d_model))
        self.w_k = normal_param(rng, (d_kv, d_model))
        self.w_v = normal_param(rng, (d_kv, d_model))
        self.w_o = normal_param(rng, (d_model, d_model))
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, kv: Tensor, bias: np.ndarray | None) -> Tensor:
        h = self.n_heads
        q = split_heads(x @ self.w_q, h)
        k = split_heads(kv @ self.w_k, h)
        v = split_heads(kv @ self.w_v, h)
        out, weights = attention(q, k, v, bias, 1.0 / math.sqrt(q.shape[-1]))
        self.last_weights = weights.data
        return merge_heads(out) @ self.w_o


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, drop: DropoutState):
        self.w_1 = normal_param(rng, (d_model, d_ff))
        self.w_2 = normal_param(rng, (d_ff, d_model))
        self.drop = drop

    def __call__(self, z: Tensor) -> Tensor:
        hidden = self.drop(T.gelu(z @ self.w_1))
        return self.drop(hidden @ self.w_2)


# A hook slot for the add-on sub-layer: Z -> Z'.
SubLayer = Callable[[Tensor], Tensor]


class EncoderLayer(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator, drop: DropoutState):
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln_attn = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng, drop)
        self.ln_ffn = LayerNorm(d_model)

    def __call__(self, z: Tensor, bias: np.ndarray, extra: SubLayer | None = None) -> Tensor:
        z = self.ln_attn(self.attn(z, z, bias) + z)
        z = self.ln_ffn(self.ffn(z) + z)
        if extra is not None:
            z = extra(z)
        return z


class DecoderLayer(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator, drop: DropoutState):
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln_self = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln_cross = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng, drop)
        self.ln_ffn = LayerNorm(d_model)

    def __call__(
        self,
        y: Tensor,
        memory: Tensor,
        self_bias: np.ndarray,
        cross_bias: np.ndarray,
        extra: SubLayer | None = None,
    ) -> Tensor:
        y = self.ln_self(self.self_attn(y, y, self_bias) + y)
        y = self.ln_cross(self.cross_attn(y, memory, cross_bias) + y)
        if extra is not None:
            y = extra(y)
        return self.ln_ffn(self.ffn(y) + y)


class TransformerEncoder(Module):
    """Positional encoding + stack of encoder layers; also used for visual features."""

    def __init__(self, n_layers, d_model, n_heads, d_ff, max_positions, rng, drop):
        if d_model % n_heads:
            raise ConfigError(f"width {d_model} not divisible by {n_heads} heads")
        self.layers = [EncoderLayer(d_model, n_heads, d_ff, rng, drop) for _ in range(n_layers)]
        self.pe = sinusoidal_table(max_positions, d_model)

    def __call__(self, x: Tensor, mask: np.ndarray, extras: list | None = None) -> Tensor:
        z = x + self.pe[: x.shape[-2]]
        bias = key_padding_bias(mask)
        for i, layer in enumerate(self.layers):
            z = layer(z, bias, extras[i] if extras else None)
        return z


class Seq2SeqBackbone(Module):
    """Token embedding (tied with the output head), encoder and decoder stacks."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, drop: DropoutState):
        self.cfg = cfg
        # embeddings double as the output head, so scale them like logits-producing weights
        self.embed = normal_param(rng, (cfg.vocab_size, cfg.d_model), std=cfg.d_model**-0.5)
        self.pe = sinusoidal_table(cfg.max_positions, cfg.d_model)
        self.encoder = [EncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, rng, drop) for _ in range(cfg.n_layers)]
        self.decoder = [DecoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, rng, drop) for _ in range(cfg.n_layers)]

    def embed_and_position(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[-1]
        if n > self.cfg.max_positions:
            raise LengthError(f"sequence length {n} exceeds max_positions={self.cfg.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise VocabularyError(f"token id outside [0, {self.cfg.vocab_size})")
        return T.embedding(self.embed, ids) + self.pe[:n]

    def encode(self, ids: np.ndarray, mask: np.ndarray, extras: list | None = None) -> Tensor:
        z = self.embed_and_position(ids)
        bias = key_padding_bias(mask)
        for i, layer in enumerate(self.encoder):
            z = layer(z, bias, extras[i] if extras else None)
        return z

    def decode(
        self,
        tgt_ids: np.ndarray,
        tgt_mask: np.ndarray,
        memory: Tensor,
        memory_mask: np.ndarray,
        extras: list | None = None,
    ) -> Tensor:
        """Return vocabulary logits (B, T, V)."""
        y = self.embed_and_position(tgt_ids)
        self_bias = causal_bias(tgt_mask)
        cross_bias = key_padding_bias(memory_mask)
        for i, layer in enumerate(self.decoder):
            y = layer(y, memory, self_bias, cross_bias, extras[i] if extras else None)
        return y @ T.transpose(self.embed)
