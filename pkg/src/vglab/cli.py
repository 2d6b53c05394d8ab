"""Command-line entry point: ``vglab <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as E
from .config import Settings, snapshot
from .data import generate_synthetic_corpus, load_dataset, noise_replace, split_corpus, write_corpus
from .metrics import METRIC_GROUPS, evaluate, load_stopwords, tokenize
from .model import VGModel
from .training import strip_special, train, write_history

log = logging.getLogger("vglab")


def _settings(args) -> Settings:
    return Settings.from_sources(getattr(args, "config", None), getattr(args, "set", None) or [])


def _load_corpus(data_dir):
    d = Path(data_dir)
    return load_dataset(d / "corpus.jsonl", d / "features.bin")


def cmd_gen_data(args) -> int:
    s = _settings(args)
    corpus = generate_synthetic_corpus(s.n_samples, s.n_topics, s.d_v, s.noise_scale, seed=s.seed, vocab_size=s.vocab_size)
    if s.noise_features:
        corpus = noise_replace(corpus, seed=s.seed)
    write_corpus(corpus, args.out)
    snapshot(s, args.out)
    print(f"wrote {len(corpus)} samples to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    corpus = _load_corpus(args.data)
    n_text = [len(s.transcript) for s in corpus.samples]
    n_vis = [len(s.visual) for s in corpus.samples]
    info = {
        "samples": len(corpus),
        "vocab_size": len(corpus.vocab),
        "d_v": corpus.d_v,
        "topics": list(corpus.topic_words),
        "transcript_len": [int(np.min(n_text)), float(np.mean(n_text)), int(np.max(n_text))],
        "visual_len": [int(np.min(n_vis)), float(np.mean(n_vis)), int(np.max(n_vis))],
    }
    print(json.dumps(info, indent=2))
    return 0


def cmd_train(args) -> int:
    s = _settings(args)
    corpus = _load_corpus(args.data)
    tr, va, _ = split_corpus(corpus, s.split_ratios(), seed=s.seed)
    model = VGModel(s.model_config(len(corpus.vocab)))
    out = Path(args.out)
    snapshot(s, out)
    result = train(model, tr.samples, va.samples, s.schedule(),
                   on_epoch=lambda row: print(json.dumps(row), flush=True))
    model.save(out / "model.ckpt")
    write_history(out / "history.csv", result.history)
    print(f"best rouge2 {result.best_metric:.4f} at epoch {result.best_epoch}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_decode(args) -> int:
    model = VGModel.load(args.model)
    corpus = _load_corpus(args.data)
    seed = model.cfg.seed if args.seed is None else args.seed
    parts = dict(zip(("train", "val", "test"), split_corpus(corpus, tuple(args.split_ratios), seed=seed)))
    samples = corpus.samples if args.split == "all" else parts[args.split].samples
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as hf, open(out.with_suffix(".ref"), "w", encoding="utf-8") as rf:
        for s in samples:
            hyp = model.beam_decode(s, beam=args.beam, max_len=args.max_len)
            hf.write(corpus.vocab.decode(strip_special(hyp.tokens)) + "\n")
            rf.write(corpus.vocab.decode(s.summary) + "\n")
    print(f"decoded {len(samples)} samples to {out} (references in {out.with_suffix('.ref')})")
    return 0


def cmd_score(args) -> int:
    hyps = [tokenize(line) for line in Path(args.hyp).read_text(encoding="utf-8").splitlines()]
    refs = [tokenize(line) for line in Path(args.ref).read_text(encoding="utf-8").splitlines()]
    stop = load_stopwords(args.stopwords) if args.stopwords else load_stopwords()
    report = evaluate(hyps, refs, stop, metrics=args.metric)
    fields = report.as_dict() if args.metric == "all" else {k: report.as_dict()[k] for k in METRIC_GROUPS[args.metric]}
    print(json.dumps(fields))
    return 0


def _emit(report, out) -> None:
    print(E.markdown_table(report))
    print(f"tables written to {out}")


def cmd_ablate(args) -> int:
    s = _settings(args)
    spec = E.PRESETS[args.preset](s)
    snapshot(s, args.out)
    report = E.run(spec, args.out, workers=args.workers)
    _emit(report, args.out)
    return 0 if all(r.status == "ok" for r in report.rows) else 1


def cmd_locations(args) -> int:
    s = _settings(args)
    spec, labels = E.location_grid(s, args.stack, suffixes=args.suffix)
    snapshot(s, args.out)
    report = E.run(spec, args.out, workers=args.workers, labels=labels)
    _emit(report, args.out)
    return 0 if all(r.status == "ok" for r in report.rows) else 1


def cmd_fg_hist(args) -> int:
    model = VGModel.load(args.model)
    corpus = _load_corpus(args.data)
    res = E.fg_histogram(model, corpus.samples, bins=args.bins, out_dir=args.out)
    print(E.render_histogram(res["counts"], res["edges"]))
    print(f"mean gate score {float(np.mean(res['scores'])):.4f}; files in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vglab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="write a synthetic vision-keyed corpus"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("inspect", help="summarise a corpus directory")
    sp.add_argument("data")
    sp.set_defaults(func=cmd_inspect)

    sp = with_config(sub.add_parser("train", help="train one model on a corpus directory"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="run directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("decode", help="beam-decode a split with a checkpoint")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="hypothesis file; references go to <out>.ref")
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    sp.add_argument("--split-ratios", type=float, nargs=3, default=(0.9, 0.05, 0.05))
    sp.add_argument("--seed", type=int, default=None, help="split seed (defaults to the model seed)")
    sp.add_argument("--beam", type=int, default=5)
    sp.add_argument("--max-len", type=int, default=64)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("score", help="score hypothesis lines against reference lines")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--metric", choices=("all", *METRIC_GROUPS), default="all")
    sp.add_argument("--stopwords", help="stop-word list (one per line)")
    sp.set_defaults(func=cmd_score)

    sp = with_config(sub.add_parser("ablate", help="run a preset ablation table"))
    sp.add_argument("--preset", choices=sorted(E.PRESETS), default="table1")
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)

    sp = with_config(sub.add_parser("locations", help="fusion-location grid over one stack"))
    sp.add_argument("--stack", choices=("encoder", "decoder"), default="encoder")
    sp.add_argument("--suffix", action="store_true", help="add the multi-layer suffix patterns")
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_locations)

    sp = sub.add_parser("fg-hist", help="per-sample forget-gate score histogram")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bins", type=int, default=20)
    sp.set_defaults(func=cmd_fg_hist)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
