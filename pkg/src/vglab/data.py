"""Synthetic vision-keyed corpora, dataset ingestion and batching.

Corpus on disk is three files in one directory:

* ``corpus.jsonl`` -- one ``{"id", "transcript", "summary"}`` object per line
  (an optional ``"topic"`` key is carried through),
* ``features.bin`` -- visual feature sequences, see :func:`write_features`,
* ``vocab.txt`` -- one token per line, line number = id.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, IngestionError, ParseError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")

MAX_TRANSCRIPT = 512
MAX_VISUAL = 256
MAX_SUMMARY = 63  # + EOS = 64 decoder targets

FEATURE_MAGIC = b"VGFT"
FEATURE_VERSION = 1

TOPIC_WORDS = (
    "cooking", "yoga", "music", "painting", "fishing", "soccer", "guitar", "gardening",
    "dance", "knitting", "swimming", "baking", "tennis", "camping", "pottery", "chess",
    "cycling", "golf", "sewing", "skiing", "drawing", "boxing",
)


class Vocab:
    """Closed token vocabulary with reserved PAD/BOS/EOS/UNK ids 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, UNK) for tok in text.split()]

    def decode(self, ids: Iterable[int], strip: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIAL_TOKENS[UNK])
        return " ".join(out)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != SPECIAL_TOKENS:
            raise ParseError(f"{path}: vocabulary must start with {SPECIAL_TOKENS}")
        return cls(lines[4:])


@dataclass
class Sample:
    id: str
    transcript: np.ndarray  # int ids, length <= 512
    visual: np.ndarray  # (M, d_v) float64, M <= 256
    summary: np.ndarray  # int ids
    topic: int | None = None


@dataclass
class Corpus:
    samples: list[Sample]
    vocab: Vocab
    topic_words: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def d_v(self) -> int:
        return self.samples[0].visual.shape[-1] if self.samples else 0

    def topic_ids(self) -> list[int]:
        return [self.vocab.stoi[w] for w in self.topic_words]

    def subset(self, samples: list[Sample]) -> "Corpus":
        return replace(self, samples=samples)


# ---------------------------------------------------------------- synthetic corpus

def _topic_names(k: int) -> tuple[str, ...]:
    if k <= len(TOPIC_WORDS):
        return TOPIC_WORDS[:k]
    return TOPIC_WORDS + tuple(f"topic{i}" for i in range(len(TOPIC_WORDS), k))


def generate_synthetic_corpus(
    n_samples: int,
    n_topics: int = 4,
    d_v: int = 64,
    noise_scale: float = 1.0,
    seed: int = 0,
    vocab_size: int = 200,
    transcript_len: tuple[int, int] = (6, 14),
    visual_len: tuple[int, int] = (8, 32),
    summary_copy: int = 5,
    orthogonal: bool = False,
) -> Corpus:
    """Build the vision-keyed task.

    The topic of each sample is visible only in its visual frames
    (prototype + Gaussian noise). The transcript is topic-independent random
    content tokens, and the summary is ``[topic word] + transcript[:summary_copy]``,
    so a text-only model can at best guess the topic (accuracy 1/K).
    """
    if n_topics < 2:
        raise ConfigError("need at least two topics")
    n_content = vocab_size - len(SPECIAL_TOKENS) - n_topics
    if n_content < 2:
        raise ConfigError(f"vocab_size={vocab_size} leaves no room for {n_topics} topics plus content words")
    if orthogonal and n_topics > d_v:
        raise ConfigError("orthogonal prototypes need n_topics <= d_v")
    rng = np.random.default_rng(seed)
    topics = _topic_names(n_topics)
    content = [f"w{i}" for i in range(n_content)]
    vocab = Vocab(list(topics) + content)
    if orthogonal:
        q, _ = np.linalg.qr(rng.normal(size=(d_v, d_v)))
        prototypes = q[:n_topics] * np.sqrt(d_v)
    else:
        prototypes = rng.normal(size=(n_topics, d_v))
    samples = []
    for i in range(n_samples):
        topic = int(rng.integers(n_topics))
        m = int(rng.integers(visual_len[0], visual_len[1] + 1))
        frames = prototypes[topic] + noise_scale * rng.normal(size=(m, d_v))
        # float32-representable so the on-disk format round-trips exactly
        frames = frames.astype(np.float32).astype(np.float64)
        n = int(rng.integers(transcript_len[0], transcript_len[1] + 1))
        words = rng.choice(n_content, size=n) + len(SPECIAL_TOKENS) + n_topics
        summary = np.concatenate([[vocab.stoi[topics[topic]]], words[:summary_copy]])
        samples.append(Sample(f"s{i:06d}", words.astype(np.int64), frames, summary.astype(np.int64), topic))
    meta = {"n_topics": n_topics, "d_v": d_v, "noise_scale": noise_scale, "seed": seed}
    return Corpus(samples, vocab, topics, meta)


def noise_replace(corpus: Corpus, seed: int = 0, low: float = 0.0, high: float = 3.0) -> Corpus:
    """Swap every visual sequence for i.i.d. U[low, high) noise of the same shape."""
    rng = np.random.default_rng(seed)
    samples = [replace(s, visual=rng.uniform(low, high, size=s.visual.shape)) for s in corpus.samples]
    meta = dict(corpus.meta, noise_replaced=True, noise_seed=seed)
    return replace(corpus, samples=samples, meta=meta)


def split_corpus(
    corpus: Corpus, ratios: tuple[float, float, float] = (0.9, 0.05, 0.05), seed: int = 0
) -> tuple[Corpus, Corpus, Corpus]:
    """Disjoint train/validation/test split by a seeded permutation."""
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple(corpus.subset([corpus.samples[i] for i in sorted(p)]) for p in parts)


# ---------------------------------------------------------------- on-disk format

def write_features(path, records: Sequence[tuple[str, np.ndarray]]) -> None:
    """Little-endian float32 records behind a ``magic, version, count`` header.

    Each record is ``<I id_len``, id bytes, ``<I M``, ``<I d_v``, then ``M*d_v`` floats.
    """
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", FEATURE_VERSION, len(records)))
        for sid, feats in records:
            raw = sid.encode("utf-8")
            feats = np.asarray(feats)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *feats.shape))
            fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURE_MAGIC:
            raise ParseError(f"{path}: not a feature file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != FEATURE_VERSION:
            raise ParseError(f"{path}: unsupported feature file version {version}")
        for _ in range(count):
            (id_len,) = struct.unpack("<I", fh.read(4))
            sid = fh.read(id_len).decode("utf-8")
            m, d = struct.unpack("<II", fh.read(8))
            buf = fh.read(4 * m * d)
            if len(buf) != 4 * m * d:
                raise ParseError(f"{path}: truncated record {sid!r}")
            out[sid] = np.frombuffer(buf, dtype="<f4").reshape(m, d).astype(np.float64)
    return out


def write_corpus(corpus: Corpus, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for s in corpus.samples:
            row = {
                "id": s.id,
                "transcript": corpus.vocab.decode(s.transcript, strip=False),
                "summary": corpus.vocab.decode(s.summary, strip=False),
            }
            if s.topic is not None:
                row["topic"] = s.topic
            fh.write(json.dumps(row) + "\n")
    write_features(directory / "features.bin", [(s.id, s.visual) for s in corpus.samples])
    corpus.vocab.save(directory / "vocab.txt")
    meta = dict(corpus.meta, topic_words=list(corpus.topic_words))
    (directory / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return directory


def _build_vocab(rows: list[dict]) -> Vocab:
    tokens = set()
    for row in rows:
        tokens.update(row["transcript"].split())
        tokens.update(row["summary"].split())
    return Vocab(sorted(tokens - set(SPECIAL_TOKENS)))


def load_dataset(jsonl_path, features_path, vocab: Vocab | str | Path | None = None) -> Corpus:
    """Parse, tokenize and cap (512 transcript tokens, 256 frames) a JSONL corpus.

    ``vocab`` defaults to ``vocab.txt`` beside the JSONL file, or is built
    from the data when that is missing.
    """
    jsonl_path = Path(jsonl_path)
    rows = []
    with open(jsonl_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{jsonl_path}: malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(row, dict) or not all(isinstance(row.get(k), str) for k in ("id", "transcript", "summary")):
                raise ParseError(f"{jsonl_path}: expected string fields id/transcript/summary", lineno)
            rows.append(row)
    if vocab is None:
        sidecar = jsonl_path.with_name("vocab.txt")
        vocab = Vocab.load(sidecar) if sidecar.exists() else _build_vocab(rows)
    elif not isinstance(vocab, Vocab):
        vocab = Vocab.load(vocab)
    meta_path = jsonl_path.with_name("meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    feats = read_features(features_path)
    samples = []
    for row in rows:
        if row["id"] not in feats:
            raise IngestionError(f"no feature record for sample id {row['id']!r}")
        samples.append(
            Sample(
                id=row["id"],
                transcript=np.asarray(vocab.encode(row["transcript"])[:MAX_TRANSCRIPT], dtype=np.int64),
                visual=feats[row["id"]][:MAX_VISUAL],
                summary=np.asarray(vocab.encode(row["summary"])[:MAX_SUMMARY], dtype=np.int64),
                topic=row.get("topic"),
            )
        )
    return Corpus(samples, vocab, tuple(meta.pop("topic_words", ())), meta)


# ---------------------------------------------------------------- batching

@dataclass
class MultimodalBatch:
    ids: list[str]
    src_ids: np.ndarray  # (B, N) int
    src_mask: np.ndarray  # (B, N) bool
    visual: np.ndarray | None  # (B, M, d_v)
    visual_mask: np.ndarray | None  # (B, M) bool
    tgt_in: np.ndarray  # (B, T) BOS + summary
    tgt_out: np.ndarray  # (B, T) summary + EOS
    tgt_mask: np.ndarray  # (B, T) bool

    def __len__(self) -> int:
        return len(self.ids)


def _pad(seqs: Sequence[np.ndarray], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    width = max([min_len] + [len(s) for s in seqs])
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def collate(samples: Sequence[Sample], with_visual: bool = True) -> MultimodalBatch:
    src_ids, src_mask = _pad([s.transcript for s in samples])
    tgt_in, tgt_mask = _pad([np.concatenate([[BOS], s.summary]) for s in samples])
    tgt_out, _ = _pad([np.concatenate([s.summary, [EOS]]) for s in samples])
    visual = visual_mask = None
    if with_visual and samples:
        d_v = samples[0].visual.shape[-1]
        m = max([1] + [len(s.visual) for s in samples])
        visual = np.zeros((len(samples), m, d_v))
        visual_mask = np.zeros((len(samples), m), dtype=bool)
        for i, s in enumerate(samples):
            visual[i, : len(s.visual)] = s.visual
            visual_mask[i, : len(s.visual)] = True
    return MultimodalBatch([s.id for s in samples], src_ids, src_mask, visual, visual_mask, tgt_in, tgt_out, tgt_mask)


def iter_batches(
    samples: Sequence[Sample], batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[MultimodalBatch]:
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield collate([samples[i] for i in order[start : start + batch_size]])
