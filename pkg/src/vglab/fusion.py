"""Text-vision fusion: cross-modal dot-product and multi-head attention,
forget gate, visual transformer encoder and the residual-LN add-on sub-layer.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, ShapeError
from .tensor import MASK_VALUE, Tensor
from .transformer import (
    DropoutState,
    LayerNorm,
    Module,
    TransformerEncoder,
    merge_heads,
    normal_param,
    split_heads,
)

MECHANISMS = ("dot_product", "dot_product_variant", "multi_head")


@dataclass(frozen=True)
class FusionConfig:
    """Where and how visual features enter the backbone.

    ``d_c`` and ``fusion_heads`` default to the backbone width and head
    count; ``encoder_locations=None`` means every encoder layer and
    ``decoder_locations=None`` means no decoder layer.
    """

    mechanism: str = "multi_head"
    d_c: int | None = None
    fusion_heads: int | None = None
    use_forget_gate: bool = False
    use_vtf: bool = False
    vtf_layers: int = 4
    vtf_heads: int = 8
    vtf_ff: int = 2048
    encoder_locations: tuple[bool, ...] | None = None
    decoder_locations: tuple[bool, ...] | None = None

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown fusion mechanism {self.mechanism!r}; pick one of {MECHANISMS}")
        for name in ("encoder_locations", "decoder_locations"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(bool(v) for v in value))

    def resolve(self, n_layers: int, d_model: int, n_heads: int) -> "FusionConfig":
        enc = self.encoder_locations if self.encoder_locations is not None else (True,) * n_layers
        dec = self.decoder_locations if self.decoder_locations is not None else (False,) * n_layers
        if len(enc) != n_layers or len(dec) != n_layers:
            raise ConfigError(f"location patterns must have length {n_layers}, got {len(enc)} and {len(dec)}")
        d_c = self.d_c or d_model
        heads = self.fusion_heads or n_heads
        if d_c % heads:
            raise ConfigError(f"d_c={d_c} not divisible by fusion_heads={heads}")
        return FusionConfig(
            self.mechanism, d_c, heads, self.use_forget_gate, self.use_vtf,
            self.vtf_layers, self.vtf_heads, self.vtf_ff, enc, dec,
        )

    @property
    def active(self) -> bool:
        return any(self.encoder_locations or ()) or any(self.decoder_locations or ())


@dataclass
class VisualFeatures:
    features: Tensor  # (B, M, d_v)
    mask: np.ndarray  # (B, M) bool, True = real frame

    @property
    def empty_rows(self) -> np.ndarray:
        return ~self.mask.any(axis=-1)


def _visual_bias(mask: np.ndarray | None, extra_dims: int = 0) -> np.ndarray | None:
    if mask is None:
        return None
    if (~mask.any(axis=-1)).any():
        raise DegenerateInputError("visual sequence has no unmasked positions")
    bias = np.where(mask, 0.0, MASK_VALUE)[..., None, :]
    for _ in range(extra_dims):
        bias = np.expand_dims(bias, -3)
    return bias


def forget_gate(o: Tensor, z_t: Tensor, w_f: Tensor) -> tuple[Tensor, Tensor]:
    """F = sigmoid(Concat(O, Z_t) W_f); returns (F * O, F)."""
    if w_f.shape != (o.shape[-1] + z_t.shape[-1], o.shape[-1]):
        raise ShapeError(f"forget gate weight {w_f.shape} does not fit O {o.shape} and Z_t {z_t.shape}")
    gate = T.sigmoid(T.concat([o, z_t], axis=-1) @ w_f)
    return gate * o, gate


def dot_product_fusion(
    z_t: Tensor,
    z_v: Tensor,
    w_1: Tensor,
    w_2: Tensor,
    variant: bool = False,
    visual_mask: np.ndarray | None = None,
    w_f: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """Single-softmax fusion. Returns (output, attention scores A, gate or None).

    Z_v' = Z_v W_1; A = softmax(Z_t Z_v'^T); output = Concat(Z_t, A Z_v) W_2,
    or Concat(Z_t, A Z_v') W_2 for the variant.
    """
    z_v_proj = z_v @ w_1
    scores = T.matmul(z_t, T.swapaxes(z_v_proj, -1, -2))
    bias = _visual_bias(visual_mask)
    if bias is not None:
        scores = scores + bias
    a = T.softmax(scores, axis=-1)
    attended = T.matmul(a, z_v_proj if variant else z_v)
    gate = None
    if w_f is not None:
        attended, gate = forget_gate(attended, z_t, w_f)
    return T.concat([z_t, attended], axis=-1) @ w_2, a, gate


def multi_head_fusion(
    z_t: Tensor,
    z_v: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_3: Tensor,
    heads: int,
    visual_mask: np.ndarray | None = None,
    w_f: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """Cross-modal multi-head attention fusion. Returns (output, per-head weights, gate or None)."""
    d_c = w_q.shape[-1]
    if d_c % heads:
        raise ConfigError(f"d_c={d_c} not divisible by {heads} heads")
    q = split_heads(z_t @ w_q, heads)
    k = split_heads(z_v @ w_k, heads)
    v = split_heads(z_v @ w_v, heads)
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d_c // heads))
    bias = _visual_bias(visual_mask, extra_dims=1)
    if bias is not None:
        scores = scores + bias
    weights = T.softmax(scores, axis=-1)
    o = merge_heads(T.matmul(weights, v))
    gate = None
    if w_f is not None:
        o, gate = forget_gate(o, z_t, w_f)
    return T.concat([z_t, o], axis=-1) @ w_3, weights, gate


class DotProductFusion(Module):
    def __init__(self, d_t: int, d_v: int, rng: np.random.Generator, variant: bool, use_gate: bool):
        self.variant = variant
        attended = d_t if variant else d_v
        self.w_1 = normal_param(rng, (d_v, d_t))
        self.w_2 = normal_param(rng, (d_t + attended, d_t))
        # gating the dot-product path is an extension; the gate is defined on CMA output
        self.w_f = normal_param(rng, (attended + d_t, attended)) if use_gate else None

    @property
    def output_projection(self) -> Tensor:
        return self.w_2

    def __call__(self, z_t, z_v, visual_mask):
        return dot_product_fusion(z_t, z_v, self.w_1, self.w_2, self.variant, visual_mask, self.w_f)


class MultiHeadFusion(Module):
    def __init__(self, d_t: int, d_v: int, d_c: int, heads: int, rng: np.random.Generator, use_gate: bool):
        self.heads = heads
        self.w_q = normal_param(rng, (d_t, d_c))
        self.w_k = normal_param(rng, (d_v, d_c))
        self.w_v = normal_param(rng, (d_v, d_c))
        self.w_3 = normal_param(rng, (d_t + d_c, d_t))
        self.w_f = normal_param(rng, (d_c + d_t, d_c)) if use_gate else None

    @property
    def output_projection(self) -> Tensor:
        return self.w_3

    def __call__(self, z_t, z_v, visual_mask):
        return multi_head_fusion(
            z_t, z_v, self.w_q, self.w_k, self.w_v, self.w_3, self.heads, visual_mask, self.w_f
        )


class FusionSublayer(Module):
    """LN(fusion(Z, Z_v) + Z). Samples without any visual frame get LN(Z)."""

    def __init__(self, cfg: FusionConfig, d_t: int, d_v: int, rng: np.random.Generator):
        if cfg.mechanism == "multi_head":
            self.mech = MultiHeadFusion(d_t, d_v, cfg.d_c or d_t, cfg.fusion_heads or 1, rng, cfg.use_forget_gate)
        else:
            self.mech = DotProductFusion(d_t, d_v, rng, cfg.mechanism == "dot_product_variant", cfg.use_forget_gate)
        self.ln = LayerNorm(d_t)
        self.last_attention: np.ndarray | None = None
        self.last_gate_scores: np.ndarray | None = None

    def __call__(self, z: Tensor, visual: VisualFeatures, text_mask: np.ndarray | None = None) -> Tensor:
        empty = visual.empty_rows
        mask = visual.mask
        if empty.any():
            warnings.warn(
                f"{int(empty.sum())} sample(s) without visual frames; fusion reduces to LN(Z) for them",
                stacklevel=2,
            )
            if empty.all():
                self.last_attention, self.last_gate_scores = None, None
                return self.ln(z)
            # give empty rows a dummy visible frame, then zero their fusion output
            mask = mask.copy()
            mask[empty, 0] = True
        fused, weights, gate = self.mech(z, visual.features, mask)
        if empty.any():
            keep = (~empty).astype(np.float64).reshape((-1,) + (1,) * (fused.ndim - 1))
            fused = fused * keep
        self.last_attention = weights.data
        self.last_gate_scores = None if gate is None else _mean_gate(gate.data, text_mask)
        return self.ln(fused + z)


def _mean_gate(gate: np.ndarray, text_mask: np.ndarray | None) -> np.ndarray:
    """Average gate value per sample over real text positions (all positions if none)."""
    per_pos = gate.mean(axis=-1)  # (B, N)
    if text_mask is None:
        return per_pos.mean(axis=-1)
    w = text_mask.astype(np.float64)
    counts = w.sum(axis=-1)
    fallback = per_pos.mean(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        masked = (per_pos * w).sum(axis=-1) / counts
    return np.where(counts > 0, masked, fallback)


class VisualEncoder(Module):
    """VTF: transformer encoder with positional encodings over the visual sequence."""

    def __init__(self, cfg: FusionConfig, d_v: int, max_positions: int, rng: np.random.Generator, drop: DropoutState):
        if d_v % cfg.vtf_heads:
            raise ConfigError(f"visual width d_v={d_v} not divisible by vtf_heads={cfg.vtf_heads}")
        self.stack = TransformerEncoder(cfg.vtf_layers, d_v, cfg.vtf_heads, cfg.vtf_ff, max_positions, rng, drop)

    def __call__(self, visual: VisualFeatures) -> VisualFeatures:
        return VisualFeatures(self.stack(visual.features, visual.mask), visual.mask)
