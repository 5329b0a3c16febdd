"""Toy corpora: vocabulary, BERT-style packing, synthetic generators."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import DataError

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIAL = len(SPECIAL_TOKENS)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the reserved tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def build_vocab(paths: Sequence[str | Path], cap: int) -> Vocab:
    """Most frequent ``cap - 5`` tokens, ties broken lexicographically."""
    if cap <= NUM_SPECIAL:
        raise DataError(f"vocab cap must exceed {NUM_SPECIAL}")
    if not paths:
        raise DataError("no corpus files given")
    counts: Counter = Counter()
    for p in paths:
        try:
            text = Path(p).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read corpus file {p}: {exc}") from None
        counts.update(tokenize(text))
    if not counts:
        raise DataError("corpus contains no tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(SPECIAL_TOKENS) + [t for t, _ in ranked[: cap - NUM_SPECIAL]])


def _truncate_pair(a: list[int], b: list[int], budget: int) -> None:
    while len(a) + len(b) > budget:
        (a if len(a) >= len(b) else b).pop()


def encode(first, second, vocab: Vocab | None, max_len: int):
    """Pack ``[CLS] A [SEP] (B [SEP])`` and pad to ``max_len``.

    Segments may be text (tokenized with ``vocab``) or lists of ids.
    Returns (token_ids, segment_ids, input_mask) as int arrays.
    """
    if max_len < 3:
        raise DataError("max_len must be at least 3")

    def to_ids(seg):
        if seg is None or (isinstance(seg, str) and not seg.strip()):
            return []
        if isinstance(seg, str):
            return vocab.ids(tokenize(seg))
        return list(seg)

    a, b = to_ids(first), to_ids(second)
    if b:
        _truncate_pair(a, b, max_len - 3)
        ids = [CLS, *a, SEP, *b, SEP]
        seg = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    else:
        del a[max_len - 2:]
        ids = [CLS, *a, SEP]
        seg = [0] * len(ids)
    n = len(ids)
    pad = max_len - n
    return (
        np.array(ids + [PAD] * pad, dtype=np.int64),
        np.array(seg + [0] * pad, dtype=np.int64),
        np.array([1] * n + [0] * pad, dtype=np.int64),
    )


def decode(token_ids, vocab: Vocab) -> list[str]:
    """Content tokens of a packed sequence (special tokens dropped)."""
    return [vocab.itos[i] for i in token_ids if i >= NUM_SPECIAL or i == UNK]


def segment_ids_for(seq: Sequence[int]) -> list[int]:
    out, seg = [], 0
    for t in seq:
        out.append(seg)
        if t == SEP:
            seg = 1
    return out


@dataclass
class Corpus:
    sequences: list[list[int]]  # packed, unpadded: [CLS] ... [SEP] ...
    vocab_size: int
    train: list[int]
    dev: list[int]
    source_hash: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.train) & set(self.dev):
            raise DataError("train and dev splits overlap")
        for s in self.sequences:
            if any(t < 0 or t >= self.vocab_size for t in s):
                raise DataError("corpus contains an id outside the vocabulary")

    @property
    def max_len(self) -> int:
        return max(len(s) for s in self.sequences)

    def split(self, name: str) -> list[list[int]]:
        return [self.sequences[i] for i in getattr(self, name)]


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None):
    """Stack sequences into (token_ids, segment_ids, input_mask) arrays."""
    length = length or max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    seg = np.zeros((len(seqs), length), dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=np.int64)
    for r, s in enumerate(seqs):
        if len(s) > length:
            raise DataError(f"sequence of length {len(s)} exceeds {length}")
        ids[r, : len(s)] = s
        seg[r, : len(s)] = segment_ids_for(s)
        mask[r, : len(s)] = 1
    return ids, seg, mask


def _split(n: int, dev_fraction: float, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    order = rng.permutation(n)
    n_dev = int(round(n * dev_fraction))
    return sorted(order[n_dev:].tolist()), sorted(order[:n_dev].tolist())


def _hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode())
    return h.hexdigest()


def text_corpus(paths: Sequence[str | Path], vocab: Vocab, max_len: int, *, dev_fraction: float = 0.1,
                seed: int = 0) -> Corpus:
    """One example per non-empty line; a tab separates the two segments."""
    seqs, h = [], hashlib.sha256()
    for p in paths:
        text = Path(p).read_text(encoding="utf-8")
        h.update(text.encode())
        for line in text.splitlines():
            if not line.strip():
                continue
            first, _, second = line.partition("\t")
            ids, _, mask = encode(first, second, vocab, max_len)
            seqs.append(ids[: int(mask.sum())].tolist())
    if not seqs:
        raise DataError("corpus contains no sentences")
    train, dev = _split(len(seqs), dev_fraction, np.random.default_rng(seed))
    return Corpus(seqs, len(vocab), train, dev, h.hexdigest(), {"kind": "text"})


def bigram_matrix(vocab_size: int, seed: int, fanout: int = 3) -> np.ndarray:
    """Sparse random Markov chain over content tokens (rows sum to 1)."""
    n = vocab_size - NUM_SPECIAL
    rng = np.random.default_rng(seed)
    m = np.zeros((n, n))
    k = min(fanout, n)
    for i in range(n):
        succ = rng.choice(n, size=k, replace=False)
        m[i, succ] = rng.dirichlet(np.full(k, 2.0))
    return m


def synth_corpus(kind: str, size: int, seed: int, vocab_size: int, *, seq_len: int = 8,
                 dev_fraction: float = 0.1) -> Corpus:
    """Synthetic corpora for desk-scale MLM.

    ``copy``: ``[CLS] w_1..w_n [SEP] w_1..w_n [SEP]`` with uniform content
    tokens, so a masked token can be read off its twin.  ``bigram``:
    ``[CLS] w_1..w_n [SEP]`` sampled from a fixed sparse Markov chain
    (``meta["transition"]``), so masked tokens follow from neighbours.
    ``seq_len`` counts content tokens (per half for ``copy``).
    """
    if vocab_size <= NUM_SPECIAL:
        raise DataError(f"vocab_size must exceed {NUM_SPECIAL}")
    n_content = vocab_size - NUM_SPECIAL
    rng = np.random.default_rng(seed)
    meta: dict = {"kind": kind, "seq_len": seq_len}
    if kind == "copy":
        body = rng.integers(0, n_content, size=(size, seq_len)) + NUM_SPECIAL
        seqs = [[CLS, *row, SEP, *row, SEP] for row in body.tolist()]
    elif kind == "bigram":
        trans = bigram_matrix(vocab_size, seed)
        cum = np.cumsum(trans, axis=1)
        cum[:, -1] = 1.0
        tokens = np.empty((size, seq_len), dtype=np.int64)
        tokens[:, 0] = rng.integers(0, n_content, size=size)
        for j in range(1, seq_len):
            u = rng.random(size)
            rows = cum[tokens[:, j - 1]]
            tokens[:, j] = (rows < u[:, None]).sum(axis=1)
        seqs = [[CLS, *row, SEP] for row in (tokens + NUM_SPECIAL).tolist()]
        meta["transition"] = trans
    else:
        raise DataError(f"unknown synthetic corpus kind {kind!r}")
    train, dev = _split(size, dev_fraction, rng)
    return Corpus(seqs, vocab_size, train, dev, _hash(kind, size, seed, vocab_size, seq_len), meta)
