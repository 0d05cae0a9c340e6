"""Corpus ingestion, vocabulary, and masked-language-model batch generation.

Word-level tokenization (words and punctuation marks, lowercased), a
frequency-ranked vocabulary with five reserved ids, and a cycling batch
stream that corrupts a fraction of positions per the usual 80/10/10
mask/random/keep split. A deterministic synthetic-corpus generator is
included so the training demos and tests need no external text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import IGNORE_LABEL

PAD, UNK, MASK, CLS, SEP = 0, 1, 2, 3, 4
RESERVED = {"<pad>": PAD, "<unk>": UNK, "<mask>": MASK, "<cls>": CLS, "<sep>": SEP}
N_RESERVED = len(RESERVED)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: list[str]) -> np.ndarray:
        t2i = self.token_to_id
        return np.fromiter((t2i.get(t, UNK) for t in tokens), dtype=np.int32, count=len(tokens))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.id_to_token):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        id_to_token = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok, idx = line.rstrip("\n").split("\t")
                if int(idx) != len(id_to_token):
                    raise InputError(f"{path}: non-contiguous vocab ids")
                id_to_token.append(tok)
        return cls({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def build_vocab(corpus_path, cap: int) -> Vocab:
    """Frequency-ranked vocabulary (lexicographic tie-break), capped at
    `cap` tokens beyond the reserved ids. Deterministic given corpus + cap."""
    text = Path(corpus_path).read_text(encoding="utf-8")
    tokens = tokenize(text)
    if not tokens:
        raise InputError(f"{corpus_path}: corpus contains no tokens")
    counts: dict[str, int] = {}
    for t in tokens:
        counts[t] = counts.get(t, 0) + 1
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[:cap]
    id_to_token = list(RESERVED) + ranked
    return Vocab({t: i for i, t in enumerate(id_to_token)}, id_to_token)


@dataclass
class MlmBatch:
    token_ids: np.ndarray  # (b, n) int32
    labels: np.ndarray     # (b, n) int32; original id at corrupted positions, IGNORE_LABEL elsewhere
    pad_mask: np.ndarray   # (b, n) int8; 1 = real token


class BatchStream:
    """Cycling stream of MLM batches with per-epoch reshuffle.

    The corpus is chunked into sequences of n-1 tokens, each prefixed with
    CLS; a trailing partial chunk is kept (padded) if it has at least two
    tokens, shorter remainders are skipped.
    """

    def __init__(self, ids: np.ndarray, vocab_size: int, n: int, b: int,
                 mask_rate: float, rng: np.random.Generator):
        if n < 2:
            raise InputError(f"sequence length must be >= 2, got {n}")
        if not (0.0 < mask_rate <= 1.0):
            raise InputError(f"mask_rate must be in (0, 1], got {mask_rate}")
        body = n - 1
        chunks = [ids[i:i + body] for i in range(0, len(ids), body)]
        if chunks and len(chunks[-1]) < 2:
            chunks = chunks[:-1]
        if not chunks:
            raise InputError("corpus too short for even one sequence")
        self.seqs = np.full((len(chunks), n), PAD, dtype=np.int32)
        self.seqs[:, 0] = CLS
        for i, c in enumerate(chunks):
            self.seqs[i, 1:1 + len(c)] = c
        self.pad = (self.seqs != PAD).astype(np.int8)
        self.pad[:, 0] = 1
        self.vocab_size = vocab_size
        self.b = b
        self.mask_rate = mask_rate
        self.rng = rng
        self._order = rng.permutation(len(chunks))
        self._cursor = 0

    def _next_indices(self) -> np.ndarray:
        out = []
        while len(out) < self.b:
            if self._cursor >= len(self._order):
                self._order = self.rng.permutation(len(self._order))
                self._cursor = 0
            take = min(self.b - len(out), len(self._order) - self._cursor)
            out.extend(self._order[self._cursor:self._cursor + take])
            self._cursor += take
        return np.asarray(out)

    def next_batch(self) -> MlmBatch:
        idx = self._next_indices()
        token_ids = self.seqs[idx].copy()
        pad_mask = self.pad[idx].copy()
        labels = np.full_like(token_ids, IGNORE_LABEL)
        # candidates: real tokens, excluding the leading CLS
        cand = (pad_mask > 0)
        cand[:, 0] = False
        corrupt = cand & (self.rng.random(token_ids.shape) < self.mask_rate)
        if not corrupt.any():
            # force one learnable position so the loss is always defined
            rows, cols = np.nonzero(cand)
            pick = self.rng.integers(len(rows))
            corrupt[rows[pick], cols[pick]] = True
        labels[corrupt] = token_ids[corrupt]
        roll = self.rng.random(token_ids.shape)
        to_mask = corrupt & (roll < 0.8)
        to_rand = corrupt & (roll >= 0.8) & (roll < 0.9)
        token_ids[to_mask] = MASK
        if to_rand.any():
            token_ids[to_rand] = self.rng.integers(N_RESERVED, self.vocab_size,
                                                   size=int(to_rand.sum()), dtype=np.int32)
        return MlmBatch(token_ids, labels, pad_mask)


def make_batches(corpus_path, vocab: Vocab, n: int, b: int, mask_rate: float,
                 rng: np.random.Generator) -> BatchStream:
    text = Path(corpus_path).read_text(encoding="utf-8")
    tokens = tokenize(text)
    if not tokens:
        raise InputError(f"{corpus_path}: corpus contains no tokens")
    return BatchStream(vocab.encode(tokens), vocab.size, n, b, mask_rate, rng)


def generate_corpus(path, min_bytes: int = 1 << 20, seed: int = 0,
                    n_words: int = 1500) -> Path:
    """Write a deterministic synthetic corpus of at least `min_bytes`.

    Text is drawn from a seeded first-order Markov chain over an invented
    word list with peaky successor distributions, so masked positions are
    genuinely predictable from their neighbors. Successor words are sampled
    with a Zipf bias, giving the corpus a realistically skewed unigram
    distribution (a handful of very common words, a long rare tail) on top
    of the bigram structure.
    """
    rng = np.random.default_rng(seed)
    syllables = ["ba", "do", "ka", "lu", "mi", "no", "pe", "ra", "su", "ti",
                 "ve", "wo", "za", "che", "fli", "gro"]
    words = []
    seen = set()
    while len(words) < n_words:
        w = "".join(rng.choice(syllables) for _ in range(rng.integers(2, 5)))
        if w not in seen:
            seen.add(w)
            words.append(w)
    # Zipf-ish start-of-sentence distribution
    start_p = 1.0 / np.arange(1, n_words + 1)
    start_p /= start_p.sum()
    n_succ = 5
    zipf_p = 1.0 / np.arange(1, n_words + 1) ** 1.3
    zipf_p /= zipf_p.sum()
    succ = rng.choice(n_words, size=(n_words, n_succ), p=zipf_p)
    succ_p = np.array([0.5, 0.2, 0.15, 0.1, 0.05])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        written = 0
        while written < min_bytes:
            line_words = []
            for _ in range(3):  # a few sentences per line
                w = rng.choice(n_words, p=start_p)
                sent = [words[w]]
                for _ in range(int(rng.integers(7, 19))):
                    w = succ[w, rng.choice(n_succ, p=succ_p)]
                    sent.append(words[w])
                line_words.append(" ".join(sent) + " .")
            line = " ".join(line_words) + "\n"
            fh.write(line)
            written += len(line)
    return path
