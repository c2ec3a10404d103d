"""Byte-level toy corpus and batch sampling.

The corpus is text from a seeded word-level Markov chain over a small
invented lexicon: spelling inside a word is deterministic, word transitions
are sparse, so a small model gets well below the uniform ln(256) baseline.
A generated copy ships with the package; ``MATQUANT_DATA_DIR`` points the
loader at a directory holding a replacement ``corpus.txt``.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

CORPUS_NAME = "corpus.txt"
PACKAGED = Path(__file__).with_name("corpus") / CORPUS_NAME
EVAL_FRACTION = 0.1

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th", "tr", "pl"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "n", "r", "s", "m", "l", "st", "nd"]


def generate_corpus(n_words: int = 60_000, lexicon_size: int = 80, fanout: int = 4, seed: int = 1234) -> str:
    """Deterministically generate the toy text."""
    rng = np.random.default_rng(seed)
    words: list[str] = []
    while len(words) < lexicon_size:
        n_syll = int(rng.integers(1, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(n_syll)
        )
        if w not in words:
            words.append(w)
    successors = np.stack([rng.choice(lexicon_size, size=fanout, replace=False) for _ in range(lexicon_size)])
    weights = rng.dirichlet(np.ones(fanout), size=lexicon_size)

    out: list[str] = []
    state = int(rng.integers(lexicon_size))
    sentence_len = 0
    start = True
    for _ in range(n_words):
        word = words[state]
        out.append(word.capitalize() if start else word)
        start = False
        sentence_len += 1
        if sentence_len >= 4 and rng.random() < 0.15:
            out.append(". " if rng.random() < 0.8 else "? ")
            start = True
            sentence_len = 0
        else:
            out.append(", " if rng.random() < 0.05 else " ")
        state = int(successors[state, rng.choice(fanout, p=weights[state])])
    return "".join(out)


def corpus_path() -> Path:
    env = os.environ.get("MATQUANT_DATA_DIR")
    if env:
        return Path(env) / CORPUS_NAME
    return PACKAGED


def load_corpus(path: str | os.PathLike | None = None) -> np.ndarray:
    """Corpus bytes as a uint8 array."""
    p = Path(path) if path is not None else corpus_path()
    return np.frombuffer(p.read_bytes(), dtype=np.uint8).copy()


def split(data: np.ndarray, eval_fraction: float = EVAL_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(data) * (1.0 - eval_fraction))
    return data[:cut], data[cut:]


def sample_batch(data: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator):
    """Random windows; targets are the inputs shifted by one byte."""
    starts = rng.integers(0, len(data) - seq_len - 1, size=batch_size)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    window = data[idx].astype(np.int64)
    return window[:, :-1], window[:, 1:]


def eval_batches(data: np.ndarray, batch_size: int, seq_len: int, n_batches: int):
    """Fixed, evenly spaced held-out windows so every evaluation sees the same bytes."""
    total = batch_size * n_batches
    starts = np.linspace(0, len(data) - seq_len - 2, total).astype(np.int64)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    window = data[idx].astype(np.int64)
    for i in range(n_batches):
        chunk = window[i * batch_size : (i + 1) * batch_size]
        yield chunk[:, :-1], chunk[:, 1:]


if __name__ == "__main__":
    PACKAGED.parent.mkdir(parents=True, exist_ok=True)
    PACKAGED.write_text(generate_corpus())
    print(f"wrote {PACKAGED} ({PACKAGED.stat().st_size} bytes)")
