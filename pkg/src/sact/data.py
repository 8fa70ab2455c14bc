"""Corpus ingestion, vocabularies, padded batches, and synthetic tasks.

Tokenization is whitespace splitting over one-sentence-per-line UTF-8 text,
with optional case folding. Sentences longer than ``MAX_SENTENCE_LEN`` tokens
are dropped at ingestion (and counted).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .rng import derive_rng

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = [PAD, UNK, BOS, EOS]

MAX_SENTENCE_LEN = 100
DEFAULT_VOCAB_SIZE = 30000


@dataclass
class Vocabulary:
    """Bidirectional token<->id map; ids 0-3 are PAD/UNK/BOS/EOS."""

    tokens: list[str]
    index: dict[str, int] = field(init=False)
    coverage: float = 1.0

    def __post_init__(self):
        if self.tokens[:4] != RESERVED:
            self.tokens = RESERVED + list(self.tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        assert len(self.index) == len(self.tokens), "duplicate token in vocabulary"

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(UNK if i == UNK_ID else self.tokens[i])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tokens[:4] != RESERVED:
            raise ValueError(f"{path} does not start with the reserved tokens")
        return cls(tokens[4:])


def build_vocab(corpus, max_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Keep the ``max_size`` most frequent tokens; ties break lexicographically.

    ``corpus`` is an iterable of token sequences. The returned vocabulary's
    ``coverage`` is the fraction of corpus token occurrences it retains.
    """
    counts: Counter[str] = Counter()
    total = 0
    for sent in corpus:
        counts.update(sent)
        total += len(sent)
    if total == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    kept = sum(c for _, c in ranked)
    vocab = Vocabulary([tok for tok, _ in ranked])
    vocab.coverage = kept / total
    return vocab


def tokenize_line(line: str, lowercase: bool = False) -> list[str]:
    if lowercase:
        line = line.lower()
    return line.split()


def read_parallel(src_path, tgt_path, lowercase: bool = False,
                  max_len: int = MAX_SENTENCE_LEN):
    """Load aligned sentence pairs; returns (pairs, n_dropped_overlength)."""
    with open(src_path, encoding="utf-8") as fs, \
            open(tgt_path, encoding="utf-8") as ft:
        src_lines = fs.read().splitlines()
        tgt_lines = ft.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"{src_path} has {len(src_lines)} lines but "
                         f"{tgt_path} has {len(tgt_lines)}")
    pairs, dropped = [], 0
    for s, t in zip(src_lines, tgt_lines):
        src = tokenize_line(s, lowercase)
        tgt = tokenize_line(t, lowercase)
        if not src or not tgt:
            continue
        if len(src) > max_len or len(tgt) > max_len:
            dropped += 1
            continue
        pairs.append((src, tgt))
    return pairs, dropped


def write_parallel(pairs, src_path, tgt_path) -> None:
    with open(src_path, "w", encoding="utf-8") as fs, \
            open(tgt_path, "w", encoding="utf-8") as ft:
        for src, tgt in pairs:
            fs.write(" ".join(src) + "\n")
            ft.write(" ".join(tgt) + "\n")


@dataclass
class Batch:
    src: np.ndarray       # (B, n_max) ids, PAD in unused cells
    tgt: np.ndarray       # (B, m_max) ids, BOS ... EOS then PAD
    src_mask: np.ndarray  # (B, n_max) 0/1
    tgt_mask: np.ndarray  # (B, m_max) 0/1, covers BOS through EOS
    src_lens: np.ndarray
    tgt_lens: np.ndarray  # true lengths excluding BOS/EOS

    def __len__(self) -> int:
        return self.src.shape[0]


def make_batch(id_pairs) -> Batch:
    """Pad a list of (src_ids, tgt_ids) into one batch."""
    n_max = max(len(s) for s, _ in id_pairs)
    m_max = max(len(t) for _, t in id_pairs) + 2  # room for BOS/EOS
    b = len(id_pairs)
    src = np.full((b, n_max), PAD_ID, dtype=np.int64)
    tgt = np.full((b, m_max), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((b, n_max))
    tgt_mask = np.zeros((b, m_max))
    src_lens = np.zeros(b, dtype=np.int64)
    tgt_lens = np.zeros(b, dtype=np.int64)
    for i, (s, t) in enumerate(id_pairs):
        src[i, :len(s)] = s
        src_mask[i, :len(s)] = 1.0
        row = [BOS_ID, *t, EOS_ID]
        tgt[i, :len(row)] = row
        tgt_mask[i, :len(row)] = 1.0
        src_lens[i], tgt_lens[i] = len(s), len(t)
    return Batch(src, tgt, src_mask, tgt_mask, src_lens, tgt_lens)


def make_batches(id_pairs, batch_size: int, seed: int,
                 bucket_batches: int = 64) -> list[Batch]:
    """Deterministic shuffled batches, length-bucketed to limit padding.

    Pairs are shuffled, grouped into buckets of ``bucket_batches * batch_size``,
    length-sorted inside each bucket, cut into batches, and the batch order is
    shuffled again. Every pair appears exactly once.
    """
    if not id_pairs:
        raise ValueError("make_batches needs at least one pair")
    rng = derive_rng(seed, "batch-order")
    order = rng.permutation(len(id_pairs))
    bucket_span = max(1, bucket_batches * batch_size)
    chunks = []
    for start in range(0, len(id_pairs), bucket_span):
        bucket = [id_pairs[i] for i in order[start:start + bucket_span]]
        bucket.sort(key=lambda p: (len(p[0]), len(p[1])))
        for j in range(0, len(bucket), batch_size):
            chunks.append(make_batch(bucket[j:j + batch_size]))
    return [chunks[i] for i in rng.permutation(len(chunks))]


def encode_pairs(pairs, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    return [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in pairs]


# ---------------------------------------------------------------------------
# Synthetic desk-scale tasks
# ---------------------------------------------------------------------------

FUNC_TOKEN_KINDS = 7  # distinct function tokens in the funcword grammar


def content_token(i: int) -> str:
    return f"w{i:02d}"


def function_token(src_tokens: list[str], position: int,
                   n_kinds: int = FUNC_TOKEN_KINDS) -> str:
    """The function token following source position ``position`` (0-based).

    Its kind is the sum of the content indices in the three-token window
    around the position (clamped at the sentence edges), modulo ``n_kinds``.
    Predicting it rewards attention spread over the window, whereas copying
    the content token rewards attention peaked on one position.
    """
    k = len(src_tokens)
    window = [src_tokens[max(0, position - 1)], src_tokens[position],
              src_tokens[min(k - 1, position + 1)]]
    total = sum(int(tok[1:]) for tok in window)
    return f"f{total % n_kinds}"


def synth_task(kind: str, size: int, len_range: tuple[int, int],
               vocab_size: int, seed: int):
    """Generate a parallel corpus for one of the toy tasks.

    copy: target equals source. reverse: target is the source reversed.
    funcword: target interleaves each copied content token with the
    deterministic function token of its source window (see
    :func:`function_token`).
    """
    lo, hi = len_range
    if min(size, lo, hi, vocab_size) < 1 or hi < lo:
        raise ValueError(f"bad synth parameters size={size}, "
                         f"len_range={len_range}, vocab_size={vocab_size}")
    rng = derive_rng(seed, "synth", kind)
    alphabet = [content_token(i) for i in range(vocab_size)]
    pairs = []
    for _ in range(size):
        n = int(rng.integers(lo, hi + 1))
        src = [alphabet[int(i)] for i in rng.integers(0, vocab_size, n)]
        if kind == "copy":
            tgt = list(src)
        elif kind == "reverse":
            tgt = src[::-1]
        elif kind == "funcword":
            tgt = []
            for i in range(n):
                tgt.append(src[i])
                tgt.append(function_token(src, i))
        else:
            raise ValueError(f"unknown synthetic task {kind!r}")
        pairs.append((src, tgt))
    return pairs
