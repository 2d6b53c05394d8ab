"""Fine-tuning recipe: masked cross-entropy, grouped Adam, step decay, early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import EOS, PAD, Sample, iter_batches
from .errors import ContractError, DegenerateInputError, NumericError, TrainingError
from .metrics import rouge_n
from .tensor import Tensor

log = logging.getLogger(__name__)

# Backbone fine-tuning rates used for the two pretrained backbones, and the
# rate for newly added fusion layers.
BACKBONE_LR_PRESETS = {"t5": 6e-4, "bart": 3e-5}
FUSION_LR = 1.5e-4


def cross_entropy_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ContractError(f"logits {logits.shape} / targets {targets.shape} / mask {mask.shape} disagree")
    count = int(mask.sum())
    if count == 0:
        raise DegenerateInputError("every target position is masked")
    vocab = logits.shape[-1]
    if targets[mask].size and (targets[mask].min() < 0 or targets[mask].max() >= vocab):
        raise ContractError("target id outside vocabulary")
    picked = T.gather_last(T.log_softmax(logits, axis=-1), np.where(mask, targets, 0))
    return -(picked * mask.astype(np.float64)).sum() / count


def lr_at(epoch: int, base: float, factor: float = 0.95, every: int = 10) -> float:
    """Step decay: ``base * factor ** (epoch // every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * factor ** (epoch // every)


@dataclass
class OptimizerState:
    groups: dict[str, str]  # parameter name -> group name
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_groups(cls, groups: Mapping[str, Mapping[str, Tensor]]) -> "OptimizerState":
        assign = {name: g for g, params in groups.items() for name in params}
        state = cls(assign)
        for params in groups.values():
            for name, p in params.items():
                state.m[name] = np.zeros_like(p.data)
                state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr_per_group: Mapping[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 1e-5,
    eps: float = 1e-8,
) -> None:
    """Classic Adam with L2 weight decay folded into the gradient. Updates in place."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        g = g + weight_decay * p.data
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        lr = lr_per_group[state.groups.get(name, "backbone")]
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to beat the best metric."""

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, metric: float, epoch: int) -> bool:
        """Record one validation score; return True when training should stop."""
        if metric > self.best:
            self.best, self.best_epoch, self.bad_epochs = metric, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainSchedule:
    lr_backbone: float = BACKBONE_LR_PRESETS["t5"]
    lr_fusion: float = FUSION_LR
    decay_factor: float = 0.95
    decay_every: int = 10
    max_epochs: int = 60
    patience: int = 5
    batch_size: int = 8
    max_steps: int | None = None
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float | None = None
    val_beam: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")

    def lrs(self, epoch: int) -> dict[str, float]:
        return {
            "backbone": lr_at(epoch, self.lr_backbone, self.decay_factor, self.decay_every),
            "fusion": lr_at(epoch, self.lr_fusion, self.decay_factor, self.decay_every),
        }


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_metric: float = -math.inf
    best_epoch: int = -1
    best_state: dict[str, np.ndarray] | None = None
    steps: int = 0
    stopped_early: bool = False
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"] if self.history else math.nan


def strip_special(tokens: Sequence[int]) -> list[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        if t != PAD:
            out.append(int(t))
    return out


def validation_rouge2(model, samples: Sequence[Sample], beam: int = 1) -> float:
    if beam == 1:
        hyps = model.greedy_decode(samples)
    else:
        hyps = [model.beam_decode(s, beam=beam).tokens for s in samples]
    scores = [rouge_n(strip_special(h), list(s.summary), 2)[2] for h, s in zip(hyps, samples)]
    return float(np.mean(scores)) if scores else 0.0


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if norm > max_norm:
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * (max_norm / norm)


def train(
    model,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    schedule: TrainSchedule,
    evaluate: Callable[[object, int], float] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train, validate every epoch, keep the best weights and restore them at the end.

    ``evaluate(model, epoch)`` overrides the validation metric (ROUGE-2 of
    beam decoding on ``val_samples`` by default). Training stops after
    ``patience`` non-improving epochs, ``max_epochs`` epochs or
    ``max_steps`` optimizer steps.
    """
    if {s.id for s in train_samples} & {s.id for s in val_samples}:
        raise ValueError("train and validation splits overlap")
    groups = model.param_groups()
    params = {k: p for g in groups.values() for k, p in g.items()}
    state = OptimizerState.for_groups(groups)
    stopper = EarlyStopping(schedule.patience)
    rng = np.random.default_rng([schedule.seed, 3])
    result = TrainResult()
    t0 = time.perf_counter()
    for epoch in range(schedule.max_epochs):
        lrs = schedule.lrs(epoch)
        model.train()
        losses = []
        for batch in iter_batches(train_samples, schedule.batch_size, rng):
            for p in params.values():
                p.grad = None
            where = f"epoch {epoch}, step {result.steps}, batch {batch.ids[:4]}"
            try:
                loss = cross_entropy_loss(model.forward(batch), batch.tgt_out, batch.tgt_mask)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at {where}")
                loss.backward()
            except NumericError as exc:
                raise TrainingError(f"numeric failure at {where}: {exc}") from exc
            grads = {k: p.grad for k, p in params.items()}
            if schedule.grad_clip is not None:
                _clip(grads, schedule.grad_clip)
            adam_step(params, grads, state, lrs, schedule.beta1, schedule.beta2, schedule.weight_decay)
            losses.append(value)
            result.steps += 1
            if schedule.max_steps is not None and result.steps >= schedule.max_steps:
                break
        model.eval()
        metric = evaluate(model, epoch) if evaluate else validation_rouge2(model, val_samples, schedule.val_beam)
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else math.nan,
            "rouge2": float(metric),
            "lr_backbone": lrs["backbone"],
            "lr_fusion": lrs["fusion"],
        }
        result.history.append(row)
        log.info("epoch %d loss %.4f rouge2 %.4f", epoch, row["loss"], row["rouge2"])
        if on_epoch:
            on_epoch(row)
        stop = stopper.update(metric, epoch)
        if stopper.best_epoch == epoch:
            result.best_state = model.state_dict()
        if stop:
            result.stopped_early = True
            break
        if schedule.max_steps is not None and result.steps >= schedule.max_steps:
            break
    result.best_metric, result.best_epoch = stopper.best, stopper.best_epoch
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    result.seconds = time.perf_counter() - t0
    return result


HISTORY_FIELDS = ("epoch", "loss", "rouge2", "lr_backbone", "lr_fusion")


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(history)
