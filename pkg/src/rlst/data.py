"""Vocabularies, parallel corpora, batching and synthetic transduction tasks."""

from __future__ import annotations

import logging
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, NULL, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<null>", "<eos>", "<unk>")
TASKS = ("copy", "reverse", "double", "dedup-runs")


class Vocabulary:
    """Bidirectional token/id map with the four reserved ids first."""

    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: k for k, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi and self.stoi[tok] >= len(RESERVED)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def tokens(self):
        """Non-reserved tokens in id order."""
        return self.itos[len(RESERVED):]

    def encode(self, sentence: str) -> list[int]:
        ids = [self.stoi.get(tok, UNK) for tok in sentence.split()]
        ids = [UNK if k < len(RESERVED) else k for k in ids]
        return ids + [EOS]

    def decode(self, ids) -> str:
        words = []
        for k in ids:
            k = int(k)
            if not 0 <= k < len(self.itos):
                raise IndexError(f"token id {k} outside vocabulary of size {len(self.itos)}")
            if k in (PAD, EOS):
                continue
            words.append(self.itos[k])
        return " ".join(words)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for k, tok in enumerate(self.itos):
                f.write(f"{tok}\t{k}\n")

    @classmethod
    def load(cls, path):
        tokens = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f):
                tok, _, k = line.rstrip("\n").rpartition("\t")
                if int(k) != lineno:
                    raise ValueError(f"{path}:{lineno + 1}: expected id {lineno}, found {k}")
                if lineno < len(RESERVED):
                    if tok != RESERVED[lineno]:
                        raise ValueError(f"{path}: reserved entry {lineno} is {tok!r}")
                    continue
                tokens.append(tok)
        return cls(tokens)


def build_vocab(sentences, min_freq: int = 3) -> Vocabulary:
    """Tokens seen at least ``min_freq`` times, most frequent first.

    Ties are broken lexicographically so the ids are a pure function of the
    corpus.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter(tok for s in sentences for tok in s.split())
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass(frozen=True)
class ParallelCorpus:
    pairs: tuple

    def __len__(self):
        return len(self.pairs)

    @property
    def sources(self):
        return [s for s, _ in self.pairs]

    @property
    def targets(self):
        return [t for _, t in self.pairs]

    def split(self, fractions=(0.8, 0.1, 0.1)):
        """Split by order into consecutive chunks."""
        n = len(self.pairs)
        bounds = np.floor(np.cumsum((0.0,) + tuple(fractions)) * n + 1e-9).astype(int)
        bounds[-1] = n
        return [ParallelCorpus(self.pairs[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for s, t in self.pairs:
                f.write(f"{s}\t{t}\n")


def load_parallel_corpus(path) -> tuple[ParallelCorpus, int]:
    """Read ``source<TAB>target`` lines, keeping the first pair per source.

    Returns the corpus and the number of malformed lines skipped.
    """
    pairs, seen, skipped = [], set(), 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            src, tab, trg = line.partition("\t")
            src, trg = " ".join(src.split()), " ".join(trg.split())
            if not tab or not src or not trg:
                skipped += 1
                continue
            if src in seen:
                continue
            seen.add(src)
            pairs.append((src, trg))
    if skipped:
        log.warning("%s: skipped %d malformed line(s)", path, skipped)
    return ParallelCorpus(tuple(pairs)), skipped


def make_batches(pairs, batch_size: int, rng) -> list[list]:
    """Shuffle, then group items of similar source length into batches.

    Items are ordered by source length after shuffling (the shuffle decides
    order within equal lengths), cut into consecutive batches, and the full
    batches are visited in random order; a short remainder batch comes last.
    ``pairs`` holds (source_ids, target_ids) sequences or raw string pairs.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pairs = list(pairs)
    order = rng.permutation(len(pairs))

    def src_len(k):
        s = pairs[k][0]
        return len(s.split()) if isinstance(s, str) else len(s)

    order = sorted(order, key=src_len)
    chunks = [order[a:a + batch_size] for a in range(0, len(order), batch_size)]
    tail = [chunks.pop()] if chunks and len(chunks[-1]) < batch_size else []
    chunks = [chunks[k] for k in rng.permutation(len(chunks))] + tail
    return [[pairs[k] for k in chunk] for chunk in chunks]


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "copy"
    alphabet_size: int = 16
    min_len: int = 2
    max_len: int = 12
    num_samples: int = 25000
    seed: int = 0
    repeat_prob: float = 0.5


def alphabet(size: int) -> list[str]:
    letters = list(string.ascii_lowercase)
    return letters[:size] if size <= 26 else letters + [f"s{k}" for k in range(26, size)]


def apply_task(task: str, tokens: list) -> list:
    if task == "copy":
        return list(tokens)
    if task == "reverse":
        return list(reversed(tokens))
    if task == "double":
        return [t for t in tokens for _ in range(2)]
    if task == "dedup-runs":
        return [t for k, t in enumerate(tokens) if k == 0 or tokens[k - 1] != t]
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def synth_generate(spec: SyntheticTaskSpec) -> ParallelCorpus:
    """Deterministic (source, target) pairs for a synthetic task."""
    if spec.task not in TASKS:
        raise ValueError(f"unknown task {spec.task!r}; expected one of {TASKS}")
    if spec.alphabet_size < 2:
        raise ValueError("alphabet_size must be >= 2")
    if not 1 <= spec.min_len <= spec.max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    rng = np.random.default_rng(spec.seed)
    symbols = alphabet(spec.alphabet_size)
    pairs = []
    for _ in range(spec.num_samples):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        if spec.task == "dedup-runs":
            ids = [int(rng.integers(spec.alphabet_size))]
            for _ in range(n - 1):
                if rng.random() < spec.repeat_prob:
                    ids.append(ids[-1])
                else:
                    ids.append(int(rng.integers(spec.alphabet_size)))
        else:
            ids = rng.integers(spec.alphabet_size, size=n).tolist()
        src = [symbols[k] for k in ids]
        pairs.append((" ".join(src), " ".join(apply_task(spec.task, src))))
    return ParallelCorpus(tuple(pairs))


def encode_pairs(corpus: ParallelCorpus, src_vocab: Vocabulary, trg_vocab: Vocabulary):
    return [(src_vocab.encode(s), trg_vocab.encode(t)) for s, t in corpus.pairs]


def read_corpus_file(path: Path):
    corpus, _ = load_parallel_corpus(path)
    if not len(corpus):
        raise ValueError(f"{path}: no usable sentence pairs")
    return corpus
