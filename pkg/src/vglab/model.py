"""Vision-guided seq2seq model: backbone + fusion sub-layers, scoring and decoding."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, MAX_VISUAL, MultimodalBatch, Sample, collate
from .errors import ConfigError, InputError, ParseError
from .fusion import FusionConfig, FusionSublayer, VisualEncoder, VisualFeatures
from .tensor import Tensor, no_grad
from .transformer import BackboneConfig, DropoutState, Module, Seq2SeqBackbone

MAX_DECODE_LEN = 64
DEFAULT_BEAM = 5
CONFIG_SCHEMA_VERSION = 1
CHECKPOINT_MAGIC = b"VGCK"


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig | None = None
    d_v: int = 64
    seed: int = 0
    max_visual_positions: int = MAX_VISUAL

    def __post_init__(self):
        if self.fusion is not None:
            b = self.backbone
            object.__setattr__(self, "fusion", self.fusion.resolve(b.n_layers, b.d_model, b.n_heads))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schema_version"] = CONFIG_SCHEMA_VERSION
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        version = raw.pop("schema_version", None)
        if version != CONFIG_SCHEMA_VERSION:
            raise ParseError(f"model config schema version {version!r}, expected {CONFIG_SCHEMA_VERSION}")
        expected = {"backbone", "fusion", "d_v", "seed", "max_visual_positions"}
        if set(raw) != expected:
            raise ParseError(f"model config keys {sorted(raw)} do not match {sorted(expected)}")
        fusion = raw.pop("fusion")
        if fusion is not None:
            for key in ("encoder_locations", "decoder_locations"):
                if fusion.get(key) is not None:
                    fusion[key] = tuple(fusion[key])
            fusion = FusionConfig(**fusion)
        return cls(backbone=BackboneConfig(**raw.pop("backbone")), fusion=fusion, **raw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class EncoderOutput:
    memory: Tensor
    memory_mask: np.ndarray
    visual: VisualFeatures | None

    def take(self, rows: np.ndarray) -> "EncoderOutput":
        vis = None
        if self.visual is not None:
            vis = VisualFeatures(Tensor(self.visual.features.data[rows]), self.visual.mask[rows])
        return EncoderOutput(Tensor(self.memory.data[rows]), self.memory_mask[rows], vis)


class VGModel(Module):
    """Backbone plus optional fusion sub-layers at the configured layers.

    Backbone, fusion and dropout draw from separate seeded streams, so a
    model whose fusion is switched off is the text-only model bit for bit.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        b = cfg.backbone
        self.drop = DropoutState(b.dropout, np.random.default_rng([cfg.seed, 2]))
        self.backbone = Seq2SeqBackbone(b, np.random.default_rng([cfg.seed, 0]), self.drop)
        self.vtf = None
        self.enc_fusion: list = [None] * b.n_layers
        self.dec_fusion: list = [None] * b.n_layers
        f = cfg.fusion
        if f is not None:
            rng = np.random.default_rng([cfg.seed, 1])
            if f.use_vtf:
                self.vtf = VisualEncoder(f, cfg.d_v, cfg.max_visual_positions, rng, self.drop)
            self.enc_fusion = [FusionSublayer(f, b.d_model, cfg.d_v, rng) if on else None for on in f.encoder_locations]
            self.dec_fusion = [FusionSublayer(f, b.d_model, cfg.d_v, rng) if on else None for on in f.decoder_locations]

    # -- bookkeeping

    @property
    def fusion_active(self) -> bool:
        return self.cfg.fusion is not None and self.cfg.fusion.active

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        groups: dict[str, dict[str, Tensor]] = {"backbone": {}, "fusion": {}}
        for name, p in self.named_parameters():
            groups["backbone" if name.startswith("backbone.") else "fusion"][name] = p
        return groups

    def train(self) -> "VGModel":
        self.drop.training = True
        return self

    def eval(self) -> "VGModel":
        self.drop.training = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(state):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise ParseError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ParseError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def gate_scores(self) -> np.ndarray | None:
        """Per-sample mean forget-gate value from the last forward, averaged over locations."""
        scores = [m.last_gate_scores for m in self.enc_fusion + self.dec_fusion
                  if m is not None and m.last_gate_scores is not None]
        return np.mean(scores, axis=0) if scores else None

    # -- forward

    def _visual(self, batch: MultimodalBatch) -> VisualFeatures | None:
        if not self.fusion_active:
            return None
        if batch.visual is None or batch.visual_mask is None:
            raise InputError("fusion is configured but the batch carries no visual features")
        if batch.visual.shape[-1] != self.cfg.d_v:
            raise InputError(f"visual width {batch.visual.shape[-1]} != configured d_v={self.cfg.d_v}")
        if batch.visual.shape[1] > self.cfg.max_visual_positions:
            raise InputError(f"{batch.visual.shape[1]} visual positions exceed cap {self.cfg.max_visual_positions}")
        vis = VisualFeatures(Tensor(batch.visual), batch.visual_mask)
        return self.vtf(vis) if self.vtf is not None else vis

    @staticmethod
    def _hooks(sublayers, visual, text_mask) -> list | None:
        if visual is None or all(s is None for s in sublayers):
            return None
        return [None if s is None else (lambda z, s=s: s(z, visual, text_mask)) for s in sublayers]

    def encode(self, batch: MultimodalBatch) -> EncoderOutput:
        visual = self._visual(batch)
        hooks = self._hooks(self.enc_fusion, visual, batch.src_mask)
        memory = self.backbone.encode(batch.src_ids, batch.src_mask, hooks)
        return EncoderOutput(memory, batch.src_mask, visual)

    def decode(self, enc: EncoderOutput, tgt_in: np.ndarray, tgt_mask: np.ndarray) -> Tensor:
        hooks = self._hooks(self.dec_fusion, enc.visual, tgt_mask)
        return self.backbone.decode(tgt_in, tgt_mask, enc.memory, enc.memory_mask, hooks)

    def forward(self, batch: MultimodalBatch) -> Tensor:
        """Teacher-forced logits (B, T, V)."""
        return self.decode(self.encode(batch), batch.tgt_in, batch.tgt_mask)

    __call__ = forward

    # -- decoding

    def _step_fn(self, enc: EncoderOutput) -> Callable[[np.ndarray], np.ndarray]:
        def step(prefixes: np.ndarray) -> np.ndarray:
            k = prefixes.shape[0]
            tgt = np.concatenate([np.full((k, 1), BOS, dtype=np.int64), prefixes.astype(np.int64)], axis=1)
            logits = self.decode(enc.take(np.zeros(k, dtype=np.int64)), tgt, np.ones_like(tgt, dtype=bool))
            return T.log_softmax(Tensor(logits.data[:, -1])).data

        return step

    def _length_cap(self, max_len: int) -> int:
        # the decoder input is BOS plus the prefix, so it needs max_len positions
        return min(max_len, self.cfg.backbone.max_positions)

    def beam_decode(self, sample: Sample | MultimodalBatch, beam: int = DEFAULT_BEAM, max_len: int = MAX_DECODE_LEN) -> Hypothesis:
        if beam < 1:
            raise ConfigError(f"beam size must be >= 1, got {beam}")
        max_len = self._length_cap(max_len)
        batch = sample if isinstance(sample, MultimodalBatch) else collate([sample], with_visual=self.fusion_active)
        if len(batch) != 1:
            raise InputError("beam_decode works on a single source")
        self.eval()
        with no_grad():
            enc = self.encode(batch)
            return beam_search(self._step_fn(enc), beam, max_len, eos=EOS, pad=PAD)

    def greedy_decode(self, samples: Sequence[Sample], max_len: int = MAX_DECODE_LEN, batch_size: int = 64) -> list[tuple[int, ...]]:
        """Batched argmax rollout; each output stops at (and includes) EOS."""
        max_len = self._length_cap(max_len)
        self.eval()
        out: list[tuple[int, ...]] = []
        with no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                enc = self.encode(collate(chunk, with_visual=self.fusion_active))
                b = len(chunk)
                seqs = np.full((b, 1), BOS, dtype=np.int64)
                done = np.zeros(b, dtype=bool)
                for _ in range(max_len):
                    logits = self.decode(enc, seqs, np.ones_like(seqs, dtype=bool)).data[:, -1]
                    logits[:, PAD] = -np.inf
                    nxt = np.where(done, PAD, logits.argmax(axis=-1))
                    seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                    done |= nxt == EOS
                    if done.all():
                        break
                for row in seqs[:, 1:]:
                    toks = []
                    for t in row:
                        toks.append(int(t))
                        if t == EOS:
                            break
                    out.append(tuple(toks))
        return out

    # -- checkpoints

    def save(self, path) -> None:
        blob = json.dumps(self.cfg.to_dict(), sort_keys=True).encode()
        params = self.state_dict()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CONFIG_SCHEMA_VERSION, len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(params)))
            for name, arr in params.items():
                raw = name.encode()
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                T.write_tensor(fh, arr)

    @classmethod
    def load(cls, path) -> "VGModel":
        with open(path, "rb") as fh:
            if fh.read(4) != CHECKPOINT_MAGIC:
                raise ParseError(f"{path}: not a model checkpoint")
            version, size = struct.unpack("<II", fh.read(8))
            if version != CONFIG_SCHEMA_VERSION:
                raise ParseError(f"{path}: checkpoint version {version} unsupported")
            cfg = ModelConfig.from_dict(json.loads(fh.read(size)))
            (count,) = struct.unpack("<I", fh.read(4))
            state = {}
            for _ in range(count):
                (n,) = struct.unpack("<I", fh.read(4))
                name = fh.read(n).decode()
                state[name] = T.read_tensor(fh).data
        model = cls(cfg)
        model.load_state_dict(state)
        return model


def beam_search(
    step_fn: Callable[[np.ndarray], np.ndarray],
    beam: int,
    max_len: int,
    eos: int,
    pad: int | None = None,
) -> Hypothesis:
    """Length-capped beam search without length normalisation.

    ``step_fn`` maps a (k, t) array of equal-length prefixes to (k, V)
    next-token log-probabilities. A hypothesis finishes when it emits
    ``eos`` or reaches ``max_len`` tokens. The best finished hypothesis is
    returned; ties go to the shorter, then the lexicographically smaller one.
    """
    if beam < 1:
        raise ConfigError(f"beam size must be >= 1, got {beam}")
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[Hypothesis] = []

    def rank(h: Hypothesis):
        return (-h.logprob, len(h.tokens), h.tokens)

    for step in range(max_len):
        prefixes = np.array([toks for toks, _ in alive], dtype=np.int64).reshape(len(alive), step)
        logp = np.array(step_fn(prefixes), dtype=np.float64)
        if pad is not None:
            logp[:, pad] = -np.inf
        total = np.array([s for _, s in alive])[:, None] + logp
        vocab = total.shape[1]
        # lexicographic rank of each parent prefix, for tie-breaking
        order_of = {toks: r for r, (toks, _) in enumerate(sorted(alive, key=lambda a: a[0]))}
        parent_rank = np.array([order_of[toks] for toks, _ in alive])
        flat = total.reshape(-1)
        parents = np.repeat(parent_rank, vocab)
        tokens = np.tile(np.arange(vocab), len(alive))
        order = np.lexsort((tokens, parents, -flat))[:beam]
        new_alive = []
        for idx in order:
            score = float(flat[idx])
            if score == -np.inf:
                continue
            toks = alive[idx // vocab][0] + (int(idx % vocab),)
            if toks[-1] == eos or len(toks) == max_len:
                finished.append(Hypothesis(toks, score))
            else:
                new_alive.append((toks, score))
        alive = new_alive
        if not alive:
            break
        best_done = min(finished, key=rank) if finished else None
        # log-probs only decrease, so nothing alive can overtake a better finished one
        if best_done is not None and best_done.logprob >= max(s for _, s in alive):
            break
    if not finished:
        raise ConfigError("beam search produced no hypothesis")
    return min(finished, key=rank)
