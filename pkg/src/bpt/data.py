"""Corpora for character language modeling and sequence classification.

Vocabularies are built from the training split only and ordered by first
occurrence; the first three ids are reserved for PAD, UNK and EOS.
The test split is sealed unless the corpus is loaded for evaluation.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from bpt.errors import DataError, SplitAccessError
from bpt.model import EOS_ID, PAD_ID, UNK_ID

SPECIALS = ("<pad>", "<unk>", "<eos>")


def build_vocab(symbols) -> dict[str, int]:
    vocab = {s: i for i, s in enumerate(SPECIALS)}
    for s in symbols:
        if s not in vocab:
            vocab[s] = len(vocab)
    return vocab


def _split_points(n: int, fractions=(0.9, 0.05)) -> tuple[int, int]:
    a = int(n * fractions[0])
    b = a + int(n * fractions[1])
    if not 0 < a < b < n:
        raise DataError(f"corpus of {n} items is too small to split into train/valid/test")
    return a, b


class _Sealed:
    def __init__(self, allow_test: bool):
        self._allow_test = allow_test

    def _test_split(self, value):
        if not self._allow_test:
            raise SplitAccessError("test split is only readable by evaluation commands")
        return value


class LMCorpus(_Sealed):
    def __init__(self, text: str, allow_test: bool = False, fractions=(0.9, 0.05)):
        super().__init__(allow_test)
        a, b = _split_points(len(text), fractions)
        self.vocab = build_vocab(text[:a])
        self.train = self.encode(text[:a])
        self.valid = self.encode(text[a:b])
        self._test = self.encode(text[b:])

    @property
    def test(self) -> np.ndarray:
        return self._test_split(self._test)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.vocab.get(c, UNK_ID) for c in text], dtype=np.int64)


def lm_chunks(ids: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Non-overlapping windows of ``n`` symbols with next-symbol targets.

    Returns ``(tokens, targets, mask)``; the final partial window is PAD-extended
    and the symbol after the end of the stream is EOS.
    """
    n_chunks = -(-len(ids) // n)
    if n_chunks == 0:
        raise DataError("empty split")
    tokens = np.full(n_chunks * n, PAD_ID, dtype=np.int64)
    tokens[: len(ids)] = ids
    targets = np.full(n_chunks * n, EOS_ID, dtype=np.int64)
    targets[: len(ids) - 1] = ids[1:]
    mask = np.zeros(n_chunks * n, dtype=bool)
    mask[: len(ids)] = True
    return tokens.reshape(n_chunks, n), targets.reshape(n_chunks, n), mask.reshape(n_chunks, n)


class ClsCorpus(_Sealed):
    def __init__(self, lines: list[str], allow_test: bool = False, fractions=(0.8, 0.1)):
        super().__init__(allow_test)
        rows = []
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"line {lineno}: expected 'label<TAB>text'")
            label, text = line.rstrip("\n").split("\t", 1)
            rows.append((label.strip(), text.split()))
        a, b = _split_points(len(rows), fractions)
        train = rows[:a]
        self.labels: dict[str, int] = {}
        for label, _ in train:
            self.labels.setdefault(label, len(self.labels))
        if len(self.labels) == 1:
            warnings.warn("training split has a single class; accuracy is trivially 1.0", stacklevel=2)
        self.vocab = build_vocab(w for _, words in train for w in words)
        self.train = self._encode(train)
        self.valid = self._encode(rows[a:b])
        self._test = self._encode(rows[b:])

    @property
    def test(self):
        return self._test_split(self._test)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def _encode(self, rows):
        seqs, labels = [], []
        for label, words in rows:
            if label not in self.labels:
                raise DataError(f"label {label!r} is not in the training label set")
            seqs.append(np.array([self.vocab.get(w, UNK_ID) for w in words], dtype=np.int64))
            labels.append(self.labels[label])
        return seqs, np.array(labels, dtype=np.int64)


def pack_sequences(seqs: list[np.ndarray], n: int, shift: int = 0) -> np.ndarray:
    """Stack sequences into an ``(len(seqs), n)`` PAD matrix, optionally after ``shift`` placeholders."""
    out = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for row, seq in enumerate(seqs):
        if len(seq) + shift > n:
            raise DataError(f"sequence of {len(seq)} tokens plus shift {shift} exceeds n_max={n}")
        if len(seq) == 0:
            raise DataError("empty sequence")
        out[row, shift : shift + len(seq)] = seq
    return out


def load_lm_corpus(path: str | Path, allow_test: bool = False) -> LMCorpus:
    return LMCorpus(Path(path).read_text(encoding="utf-8"), allow_test)


def load_cls_corpus(path: str | Path, allow_test: bool = False) -> ClsCorpus:
    return ClsCorpus(Path(path).read_text(encoding="utf-8").splitlines(), allow_test)


def repetitive_text(n_chars: int = 10_000, period: int = 100, seed: int = 0) -> str:
    """A random ``period``-character pattern repeated to ``n_chars`` characters."""
    rng = np.random.default_rng(seed)
    alphabet = "abcdefghijklmnopqrstuvwxyz ,."
    pattern = "".join(rng.choice(list(alphabet), size=period))
    return (pattern * (n_chars // period + 1))[:n_chars]


def marker_task_lines(n_samples: int = 500, seed: int = 0, marker: str = "MARK", max_len: int = 24) -> list[str]:
    """Binary task: label 1 iff the marker word occurs in the sentence."""
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(40)]
    lines = []
    for _ in range(n_samples):
        length = int(rng.integers(4, max_len + 1))
        sent = list(rng.choice(words, size=length))
        label = int(rng.integers(0, 2))
        if label:
            sent[int(rng.integers(0, length))] = marker
        lines.append(f"{label}\t{' '.join(sent)}")
    return lines
