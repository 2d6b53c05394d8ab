"""Ablation harness: train/decode/score named runs and render result tables."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Settings, format_pattern
from .data import Corpus, Sample, collate, generate_synthetic_corpus, noise_replace, split_corpus
from .errors import ConfigError
from .metrics import MetricReport, evaluate, load_stopwords
from .model import VGModel
from .tensor import no_grad
from .training import strip_special, train, write_history

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("rouge1", "rouge2", "rougeL", "bleu1", "bleu2", "bleu3", "bleu4", "cider", "content_f1")
SHORT_NAMES = {
    "rouge1": "R-1", "rouge2": "R-2", "rougeL": "R-L",
    "bleu1": "B-1", "bleu2": "B-2", "bleu3": "B-3", "bleu4": "B-4",
    "cider": "C", "content_f1": "CF", "topic_acc": "Topic",
}


@dataclass
class RunSpec:
    name: str
    settings: Settings

    @property
    def repetitions(self) -> int:
        return self.settings.repetitions


@dataclass
class ExperimentSpec:
    name: str
    runs: list[RunSpec]

    def validate(self) -> None:
        if not self.runs:
            raise ConfigError("experiment has no runs")
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate run names in {names}")
        for r in self.runs:
            if r.repetitions < 1:
                raise ConfigError(f"run {r.name!r}: repetitions must be >= 1")
            r.settings.fusion_config()  # raises on malformed patterns


@dataclass
class RunRow:
    run: str
    repetition: int
    seed: int
    config_hash: str
    status: str = "ok"
    metrics: dict[str, float] = field(default_factory=dict)
    topic_acc: float = math.nan
    epochs: int = 0
    train_seconds: float = 0.0
    wall_seconds: float = 0.0


@dataclass
class ExperimentReport:
    name: str
    rows: list[RunRow]
    run_order: list[str]
    labels: dict[str, dict] = field(default_factory=dict)

    def by_run(self, name: str) -> list[RunRow]:
        return [r for r in self.rows if r.run == name and r.status == "ok"]

    def summary(self) -> list[dict]:
        out = []
        for name in self.run_order:
            rows = self.by_run(name)
            entry = {"run": name, "n": len(rows), **self.labels.get(name, {})}
            entry["config_hash"] = next((r.config_hash for r in self.rows if r.run == name), "")
            for col in METRIC_COLUMNS + ("topic_acc",):
                vals = [r.topic_acc if col == "topic_acc" else r.metrics.get(col, math.nan) for r in rows]
                entry[col] = float(np.mean(vals)) if vals else math.nan
                entry[f"{col}_std"] = float(np.std(vals)) if len(vals) > 1 else 0.0
            out.append(entry)
        return out


# ---------------------------------------------------------------- single run

def topic_accuracy(hyps: Sequence[Sequence[int]], samples: Sequence[Sample], topic_ids: Sequence[int]) -> float:
    """Share of samples whose first decoded topic word is the reference topic word."""
    topics = set(topic_ids)
    hits = 0
    for h, s in zip(hyps, samples):
        gold = next((int(t) for t in s.summary if t in topics), None)
        guess = next((int(t) for t in h if t in topics), None)
        hits += gold is not None and guess == gold
    return hits / len(samples) if samples else math.nan


def build_corpus(settings: Settings, seed: int) -> Corpus:
    corpus = generate_synthetic_corpus(
        settings.n_samples, settings.n_topics, settings.d_v, settings.noise_scale, seed=seed,
        vocab_size=settings.vocab_size,
    )
    return noise_replace(corpus, seed=seed) if settings.noise_features else corpus


def score_model(model: VGModel, corpus: Corpus, samples: Sequence[Sample], beam: int) -> tuple[MetricReport, float, list]:
    if beam == 1:
        hyps = model.greedy_decode(samples)
    else:
        hyps = [model.beam_decode(s, beam=beam).tokens for s in samples]
    hyp_words = [corpus.vocab.decode(strip_special(h)).split() for h in hyps]
    ref_words = [corpus.vocab.decode(s.summary).split() for s in samples]
    report = evaluate(hyp_words, ref_words, load_stopwords())
    acc = topic_accuracy(hyps, samples, corpus.topic_ids()) if corpus.topic_words else math.nan
    return report, acc, hyps


def execute_run(run: RunSpec, repetition: int, out_dir: str | None = None) -> RunRow:
    s = run.settings
    seed = s.seed + repetition
    t0 = time.perf_counter()
    row = RunRow(run.name, repetition, seed, "")
    try:
        cfg = s.model_config(s.vocab_size, seed)
        row.config_hash = cfg.digest()
        corpus = build_corpus(s, seed)
        train_c, val_c, test_c = split_corpus(corpus, s.split_ratios(), seed=seed)
        model = VGModel(cfg)
        result = train(model, train_c.samples, val_c.samples, s.schedule(seed))
        report, acc, _ = score_model(model, corpus, test_c.samples, s.beam)
        row.metrics, row.topic_acc = report.as_dict(), acc
        row.epochs, row.train_seconds = len(result.history), result.seconds
        if out_dir:
            d = Path(out_dir) / f"{run.name}-r{repetition}"
            d.mkdir(parents=True, exist_ok=True)
            write_history(d / "history.csv", result.history)
    except Exception as exc:  # noqa: BLE001 - one failed run must not sink the sweep
        row.status = f"failed: {type(exc).__name__}: {exc}"
        log.error("run %s rep %d failed\n%s", run.name, repetition, traceback.format_exc())
    row.wall_seconds = time.perf_counter() - t0
    return row


def run(spec: ExperimentSpec, out_dir=None, workers: int = 1, labels: dict | None = None) -> ExperimentReport:
    """Execute every run x repetition, then write CSV and Markdown tables."""
    spec.validate()
    jobs = [(r, k) for r in spec.runs for k in range(r.repetitions)]
    out = str(out_dir) if out_dir else None
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(execute_run, *zip(*jobs), [out] * len(jobs)))
    else:
        rows = []
        for r, k in jobs:
            rows.append(execute_run(r, k, out))
            log.info("%s rep %d: %s", r.name, k, rows[-1].status)
    report = ExperimentReport(spec.name, rows, [r.name for r in spec.runs], labels or {})
    if out_dir:
        write_report(report, out_dir)
    return report


# ---------------------------------------------------------------- presets

def _variant(base: Settings, **changes) -> Settings:
    return dataclasses.replace(base, **changes)


def table1_spec(base: Settings) -> ExperimentSpec:
    """Text-only vs the two fusion mechanisms."""
    return ExperimentSpec("fusion_mechanisms", [
        RunSpec("text-only", _variant(base, fusion=False)),
        RunSpec("vg-dot-product", _variant(base, fusion=True, mechanism="dot_product")),
        RunSpec("vg-multi-head", _variant(base, fusion=True, mechanism="multi_head")),
    ])


def variant_spec(base: Settings) -> ExperimentSpec:
    return ExperimentSpec("dot_product_variant", [
        RunSpec("vg-dot-product", _variant(base, fusion=True, mechanism="dot_product")),
        RunSpec("vg-dot-product-variant", _variant(base, fusion=True, mechanism="dot_product_variant")),
    ])


def fg_vtf_spec(base: Settings) -> ExperimentSpec:
    mh = _variant(base, fusion=True, mechanism="multi_head")
    return ExperimentSpec("forget_gate_vtf", [
        RunSpec("vg-multi-head", _variant(mh, forget_gate=False, vtf=False)),
        RunSpec("w/ FG", _variant(mh, forget_gate=True, vtf=False)),
        RunSpec("w/ VTF", _variant(mh, forget_gate=False, vtf=True)),
        RunSpec("w/ FG+VTF", _variant(mh, forget_gate=True, vtf=True)),
    ])


def noise_spec(base: Settings) -> ExperimentSpec:
    runs = [RunSpec("text-only", _variant(base, fusion=False))]
    for mech in ("dot_product", "multi_head"):
        tag = mech.replace("_", "-")
        runs.append(RunSpec(f"noise vg-{tag}", _variant(base, fusion=True, mechanism=mech, noise_features=True)))
        runs.append(RunSpec(f"video vg-{tag}", _variant(base, fusion=True, mechanism=mech)))
    return ExperimentSpec("noise_control", runs)


PRESETS = {"table1": table1_spec, "variant": variant_spec, "fg_vtf": fg_vtf_spec, "noise": noise_spec}


def location_patterns(n_layers: int, singles: bool = True, suffixes: bool = False) -> list[tuple[bool, ...]]:
    """Single-layer patterns, then suffix patterns (all layers, 2..L, ..., L-1..L)."""
    pats = []
    if singles:
        pats += [tuple(i == j for j in range(n_layers)) for i in range(n_layers)]
    if suffixes:
        pats += [tuple(j >= start for j in range(n_layers)) for start in range(n_layers - 1)]
    return pats


def location_grid(
    base: Settings,
    stack: str,
    patterns: Sequence[Sequence[bool]] | None = None,
    suffixes: bool = False,
    include_baseline: bool = True,
) -> tuple[ExperimentSpec, dict]:
    """One run per injection pattern in the encoder or decoder stack, plus the text-only row."""
    if stack not in ("encoder", "decoder"):
        raise ConfigError(f"stack must be 'encoder' or 'decoder', got {stack!r}")
    n = base.n_layers
    if patterns is None:
        patterns = location_patterns(n, singles=True, suffixes=suffixes)
    runs, labels = [], {}
    if include_baseline:
        runs.append(RunSpec("no fusion", _variant(base, fusion=False)))
        labels["no fusion"] = {"pattern": format_pattern([False] * n)}
    for pat in patterns:
        if len(pat) != n:
            raise ConfigError(f"pattern {tuple(pat)} has length {len(pat)}, expected {n}")
        layers = [str(i + 1) for i, b in enumerate(pat) if b]
        name = f"{stack} {'+'.join(layers) if layers else 'none'}"
        key = "encoder_locations" if stack == "encoder" else "decoder_locations"
        other = "decoder_locations" if stack == "encoder" else "encoder_locations"
        settings = _variant(base, fusion=True, **{key: format_pattern(pat), other: "none"})
        runs.append(RunSpec(name, settings))
        labels[name] = {"pattern": format_pattern(pat)}
    return ExperimentSpec(f"{stack}_locations", runs), labels


# ---------------------------------------------------------------- forget-gate analysis

def gate_scores(model: VGModel, samples: Sequence[Sample], batch_size: int = 64) -> np.ndarray:
    """Per-sample forget-gate score averaged over the sequence (teacher-forced pass)."""
    fcfg = model.cfg.fusion
    if fcfg is None or not fcfg.use_forget_gate or not fcfg.active:
        raise ConfigError("model has no active forget gate")
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            model.forward(collate(samples[start : start + batch_size]))
            out.append(model.gate_scores())
    return np.concatenate(out)


def fg_histogram(model: VGModel, samples: Sequence[Sample], bins: int = 20, out_dir=None) -> dict:
    scores = gate_scores(model, samples)
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 5e-3, hi + 5e-3
    counts, edges = np.histogram(scores, bins=bins, range=(lo, hi))
    result = {"ids": [s.id for s in samples], "scores": scores, "counts": counts, "edges": edges}
    if out_dir:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "gate_scores.csv", "a", newline="") as fh:
            w = csv.writer(fh)
            if fh.tell() == 0:
                w.writerow(["sample_id", "mean_score"])
            w.writerows((s.id, f"{v:.8f}") for s, v in zip(samples, scores))
        with open(d / "gate_histogram.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            w.writerows((f"{a:.6f}", f"{b:.6f}", int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts))
        (d / "gate_histogram.txt").write_text(render_histogram(counts, edges), encoding="utf-8")
    return result


def render_histogram(counts: np.ndarray, edges: np.ndarray, width: int = 50) -> str:
    peak = max(int(counts.max()), 1)
    lines = []
    for a, b, c in zip(edges[:-1], edges[1:], counts):
        bar = "#" * int(round(width * c / peak))
        lines.append(f"[{a:.4f}, {b:.4f}) {int(c):6d} {bar}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- reporting

def _fmt(v: float, col: str) -> str:
    if math.isnan(v):
        return "-"
    return f"{v:.2f}" if col == "cider" else f"{100 * v:.1f}"


def markdown_table(report: ExperimentReport) -> str:
    summary = report.summary()
    multi = any(e["n"] > 1 for e in summary)
    patterns = all("pattern" in e for e in summary) and summary
    cols = list(METRIC_COLUMNS) + ["topic_acc"]
    if patterns:
        n_layers = len(summary[0]["pattern"].split(","))
        head = [str(i + 1) for i in range(n_layers)] + [SHORT_NAMES[c] for c in ("rouge1", "rouge2", "rougeL")]
        cols = ["rouge1", "rouge2", "rougeL", "topic_acc"]
        head.append(SHORT_NAMES["topic_acc"])
    else:
        head = ["Method"] + [SHORT_NAMES[c] for c in cols]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for e in summary:
        if patterns:
            cells = ["x" if b == "1" else "-" for b in e["pattern"].split(",")]
        else:
            cells = [e["run"]]
        for c in cols:
            cell = _fmt(e[c], c)
            if multi and not math.isnan(e[c]):
                cell += f" ± {_fmt(e[c + '_std'], c)}"
            cells.append(cell)
        lines.append("| " + " | ".join(cells) + " |")
    failed = [r for r in report.rows if r.status != "ok"]
    if failed:
        lines.append("")
        lines += [f"* {r.run} (rep {r.repetition}): {r.status}" for r in failed]
    return "\n".join(lines) + "\n"


def write_report(report: ExperimentReport, out_dir) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "repetition", "seed", "config_hash", "status", *METRIC_COLUMNS,
                    "topic_acc", "epochs", "train_seconds", "wall_seconds"])
        for r in report.rows:
            w.writerow([r.run, r.repetition, r.seed, r.config_hash, r.status,
                        *[r.metrics.get(c, "") for c in METRIC_COLUMNS],
                        r.topic_acc, r.epochs, f"{r.train_seconds:.2f}", f"{r.wall_seconds:.2f}"])
    summary = report.summary()
    keys = list(summary[0].keys()) if summary else []
    with open(d / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(summary)
    (d / "summary.md").write_text(f"## {report.name}\n\n" + markdown_table(report), encoding="utf-8")
