"""Flat key-value settings for the CLI and experiment scripts.

A config file holds ``key = value`` lines (``#`` starts a comment). Values
are coerced to the type of the matching :class:`Settings` field; location
patterns are written as ``1,0,1`` or ``all``/``none``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .errors import ConfigError
from .fusion import FusionConfig
from .model import ModelConfig
from .training import TrainSchedule
from .transformer import BackboneConfig


@dataclass
class Settings:
    # backbone (desk-scale defaults)
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    dropout: float = 0.1
    # fusion
    fusion: bool = True
    mechanism: str = "multi_head"
    d_c: int = 0  # 0 = d_model
    fusion_heads: int = 0  # 0 = n_heads
    forget_gate: bool = False
    vtf: bool = False
    vtf_layers: int = 1
    vtf_heads: int = 4
    vtf_ff: int = 128
    encoder_locations: str = "all"
    decoder_locations: str = "none"
    # data
    n_samples: int = 2000
    n_topics: int = 4
    d_v: int = 64
    noise_scale: float = 1.0
    vocab_size: int = 200
    noise_features: bool = False
    split: str = "0.9,0.05,0.05"
    # training
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    lr_backbone: float = 6e-4
    lr_fusion: float = 1.5e-4
    weight_decay: float = 1e-5
    max_steps: int = 0  # 0 = unlimited
    grad_clip: float = 0.0  # 0 = off
    val_beam: int = 1
    # decoding / harness
    beam: int = 5
    seed: int = 0
    repetitions: int = 1

    def override(self, pairs: dict[str, str]) -> "Settings":
        known = {f.name: f for f in fields(self)}
        changes = {}
        for key, raw in pairs.items():
            if key not in known:
                raise ConfigError(f"unknown setting {key!r}")
            changes[key] = _coerce(raw, known[key].type, key)
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_sources(cls, path: str | Path | None = None, overrides: Iterable[str] = ()) -> "Settings":
        pairs = read_kv(path) if path else {}
        pairs.update(parse_overrides(overrides))
        return cls().override(pairs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        lines = [f"{k} = {v}" for k, v in self.to_dict().items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    # -- builders

    def backbone(self, vocab_size: int | None = None) -> BackboneConfig:
        return BackboneConfig(
            self.n_layers, self.d_model, self.n_heads, self.d_ff,
            vocab_size or self.vocab_size, dropout=self.dropout,
        )

    def fusion_config(self) -> FusionConfig | None:
        if not self.fusion:
            return None
        return FusionConfig(
            mechanism=self.mechanism,
            d_c=self.d_c or None,
            fusion_heads=self.fusion_heads or None,
            use_forget_gate=self.forget_gate,
            use_vtf=self.vtf,
            vtf_layers=self.vtf_layers,
            vtf_heads=self.vtf_heads,
            vtf_ff=self.vtf_ff,
            encoder_locations=parse_pattern(self.encoder_locations, self.n_layers),
            decoder_locations=parse_pattern(self.decoder_locations, self.n_layers),
        )

    def model_config(self, vocab_size: int | None = None, seed: int | None = None) -> ModelConfig:
        return ModelConfig(self.backbone(vocab_size), self.fusion_config(), self.d_v, self.seed if seed is None else seed)

    def schedule(self, seed: int | None = None) -> TrainSchedule:
        return TrainSchedule(
            lr_backbone=self.lr_backbone,
            lr_fusion=self.lr_fusion,
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            max_steps=self.max_steps or None,
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip or None,
            val_beam=self.val_beam,
            seed=self.seed if seed is None else seed,
        )

    def split_ratios(self) -> tuple[float, float, float]:
        parts = tuple(float(x) for x in self.split.split(","))
        if len(parts) != 3 or abs(sum(parts) - 1.0) > 1e-9:
            raise ConfigError(f"split must be three ratios summing to 1, got {self.split!r}")
        return parts


def parse_pattern(text: str, n_layers: int) -> tuple[bool, ...]:
    text = text.strip().lower()
    if text == "all":
        return (True,) * n_layers
    if text == "none":
        return (False,) * n_layers
    bits = tuple(tok.strip() in ("1", "true", "x", "y") for tok in text.split(","))
    if len(bits) != n_layers:
        raise ConfigError(f"location pattern {text!r} has {len(bits)} entries, expected {n_layers}")
    return bits


def format_pattern(bits: Iterable[bool]) -> str:
    return ",".join("1" if b else "0" for b in bits)


def _coerce(raw, typ, key):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"setting {key!r}: cannot read {raw!r} as {typ}") from None
    return raw.strip()


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def snapshot(settings: Settings, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    settings.dump(directory / "config.txt")
    (directory / "config.json").write_text(json.dumps(settings.to_dict(), indent=2), encoding="utf-8")
