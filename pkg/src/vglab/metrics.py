"""Corpus summarization metrics: ROUGE-1/2/L, BLEU-1..4, CIDEr, Content F1.

Inputs are token sequences (any hashable tokens). Use :func:`tokenize` for
raw text. All scores are fractions in [0, 1] except CIDEr, which is in [0, 10].
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Hashable, Iterable, Sequence

Tokens = Sequence[Hashable]

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def load_stopwords(path=None) -> frozenset[str]:
    if path is None:
        text = resources.files("vglab.resources").joinpath("stopwords.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip() and not w.startswith("#"))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(hyp: Tokens, ref: Tokens, n: int) -> tuple[float, float, float]:
    if n < 1:
        raise ValueError("n must be >= 1")
    h, r = ngrams(hyp, n), ngrams(ref, n)
    h_total, r_total = sum(h.values()), sum(r.values())
    if h_total == 0 or r_total == 0:
        return 0.0, 0.0, 0.0
    overlap = sum((h & r).values())
    p, rec = overlap / h_total, overlap / r_total
    return p, rec, _f1(p, rec)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Tokens, ref: Tokens) -> tuple[float, float, float]:
    if not hyp or not ref:
        return 0.0, 0.0, 0.0
    lcs = lcs_length(hyp, ref)
    p, r = lcs / len(hyp), lcs / len(ref)
    return p, r, _f1(p, r)


def bleu(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4, smooth: bool = False) -> list[float]:
    """Corpus BLEU-1..max_n (cumulative geometric means, shared brevity penalty).

    ``smooth`` adds one to numerator and denominator of orders n > 1.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"corpus length mismatch: {len(hyps)} hypotheses vs {len(refs)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = ngrams(h, n), ngrams(r, n)
            matches[n - 1] += sum((hc & rc).values())
            totals[n - 1] += sum(hc.values())
    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    scores = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            # once an order is zero every higher cumulative score is zero
            scores.extend([0.0] * (max_n - n + 1))
            break
        log_sum += math.log(m / t)
        scores.append(bp * math.exp(log_sum / n))
    return scores


def _tfidf(counts: Counter, df: Counter, n_docs: int) -> dict:
    total = sum(counts.values())
    return {g: (c / total) * math.log(n_docs / (1.0 + df[g])) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b[g] for g, v in a.items() if g in b) / (na * nb)


def cider_scores(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4) -> list[float]:
    """Per-sample CIDEr: mean over n of TF-IDF cosine, times 10.

    Document frequencies come from the references; idf = log(N / (1 + df)).
    """
    if not hyps or len(hyps) != len(refs):
        raise ValueError("CIDEr needs a non-empty corpus of equal-length hyp/ref lists")
    n_docs = len(refs)
    per_n_df = []
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for r in refs:
            df.update(set(ngrams(r, n)))
        per_n_df.append(df)
    out = []
    for h, r in zip(hyps, refs):
        sims = []
        for n in range(1, max_n + 1):
            df = per_n_df[n - 1]
            hc, rc = ngrams(h, n), ngrams(r, n)
            sims.append(_cosine(_tfidf(hc, df, n_docs), _tfidf(rc, df, n_docs)) if hc and rc else 0.0)
        out.append(10.0 * sum(sims) / max_n)
    return out


def cider(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4) -> float:
    scores = cider_scores(hyps, refs, max_n)
    return sum(scores) / len(scores)


_SUFFIXES = ("ing", "edly", "ed", "es", "ly", "s")


def simple_stem(word) -> str:
    w = str(word).lower()
    for suf in _SUFFIXES:
        if w.endswith(suf) and len(w) - len(suf) >= 3:
            return w[: -len(suf)]
    return w


def content_alignment(hyp: Tokens, ref: Tokens, stopwords: Iterable[str]) -> tuple[int, int, int]:
    """(aligned pairs, hyp content words, ref content words).

    Stop words are dropped, then words align one-to-one by exact match and
    then by :func:`simple_stem` among the leftovers.
    """
    stop = {str(s).lower() for s in stopwords}
    h = [str(w) for w in hyp if str(w).lower() not in stop]
    r = [str(w) for w in ref if str(w).lower() not in stop]
    exact = Counter(h) & Counter(r)
    h_left = Counter(h) - exact
    r_left = Counter(r) - exact
    h_stems = Counter()
    r_stems = Counter()
    for w, c in h_left.items():
        h_stems[simple_stem(w)] += c
    for w, c in r_left.items():
        r_stems[simple_stem(w)] += c
    aligned = sum(exact.values()) + sum((h_stems & r_stems).values())
    return aligned, len(h), len(r)


def content_f1_pair(hyp: Tokens, ref: Tokens, stopwords: Iterable[str]) -> float:
    aligned, nh, nr = content_alignment(hyp, ref, stopwords)
    if nh == 0 or nr == 0:
        return 0.0
    return _f1(aligned / nh, aligned / nr)


def content_f1(hyps: Sequence[Tokens], refs: Sequence[Tokens], stopwords: Iterable[str]) -> float:
    if len(hyps) != len(refs):
        raise ValueError("corpus length mismatch")
    if not hyps:
        return 0.0
    stop = frozenset(stopwords)
    return sum(content_f1_pair(h, r, stop) for h, r in zip(hyps, refs)) / len(hyps)


@dataclass
class MetricReport:
    rouge1: float = 0.0
    rouge2: float = 0.0
    rougeL: float = 0.0
    bleu1: float = 0.0
    bleu2: float = 0.0
    bleu3: float = 0.0
    bleu4: float = 0.0
    cider: float = 0.0
    content_f1: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def check_ranges(self) -> None:
        for k, v in self.as_dict().items():
            hi = 10.0 if k == "cider" else 1.0
            if not 0.0 <= v <= hi + 1e-12:
                raise ValueError(f"{k}={v} outside [0, {hi}]")


METRIC_GROUPS = {
    "rouge": ("rouge1", "rouge2", "rougeL"),
    "bleu": ("bleu1", "bleu2", "bleu3", "bleu4"),
    "cider": ("cider",),
    "contentf1": ("content_f1",),
}


def evaluate(
    hyps: Sequence[Tokens],
    refs: Sequence[Tokens],
    stopwords: Iterable[str] | None = None,
    metrics: str = "all",
) -> MetricReport:
    """Corpus-level report; ROUGE and Content F1 are per-sample F1 means."""
    if len(hyps) != len(refs):
        raise ValueError(f"corpus length mismatch: {len(hyps)} vs {len(refs)}")
    if not hyps:
        raise ValueError("empty corpus")
    wanted = set(METRIC_GROUPS) if metrics == "all" else {metrics}
    if not wanted <= set(METRIC_GROUPS):
        raise ValueError(f"unknown metric {metrics!r}")
    rep = MetricReport()
    n = len(hyps)
    if "rouge" in wanted:
        rep.rouge1 = sum(rouge_n(h, r, 1)[2] for h, r in zip(hyps, refs)) / n
        rep.rouge2 = sum(rouge_n(h, r, 2)[2] for h, r in zip(hyps, refs)) / n
        rep.rougeL = sum(rouge_l(h, r)[2] for h, r in zip(hyps, refs)) / n
    if "bleu" in wanted:
        rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4 = bleu(hyps, refs)
    if "cider" in wanted:
        rep.cider = cider(hyps, refs)
    if "contentf1" in wanted:
        rep.content_f1 = content_f1(hyps, refs, load_stopwords() if stopwords is None else stopwords)
    return rep
