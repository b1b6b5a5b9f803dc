"""Synthetic seeded corpora: order-2 Markov text, arithmetic progressions
and repeated motifs, all avoiding the end-of-sequence token.

The Markov component draws each pair's successor candidates from a keyed
hash of (seed, a, b), so the rule is a fixed learnable lookup without
materializing a |V|^3 table.
"""

from __future__ import annotations

import numpy as np

_MARKOV_ALPHABET = 63  # tokens 1..63
_MIX = 0x9E3779B97F4A7C15
_U64 = (1 << 64) - 1


def _hash3(seed: int, a: int, b: int, salt: int) -> int:
    x = seed ^ (a * _MIX & _U64) ^ (b * 0xC2B2AE3D27D4EB4F & _U64)
    x ^= salt * 0x165667B19E3779F9 & _U64
    x = (x ^ (x >> 33)) * _MIX & _U64
    return x ^ (x >> 29)


def _markov_candidates(seed: int, a: int, b: int) -> list[int]:
    return [1 + _hash3(seed, a, b, s) % _MARKOV_ALPHABET for s in (1, 2, 3)]


_MARKOV_PROBS = np.array([0.62, 0.28, 0.10])


def _markov_sequence(rng: np.random.Generator, seed: int, length: int, alphabet: int) -> np.ndarray:
    seq = np.empty(length, dtype=np.int64)
    seq[0] = rng.integers(1, alphabet + 1)
    seq[1] = rng.integers(1, alphabet + 1)
    for t in range(2, length):
        cands = _markov_candidates(seed, int(seq[t - 2]), int(seq[t - 1]))
        seq[t] = 1 + (cands[rng.choice(3, p=_MARKOV_PROBS)] - 1) % alphabet
    return seq


def _arith_sequence(rng: np.random.Generator, vocab: int, length: int) -> np.ndarray:
    start = int(rng.integers(1, vocab - 1))
    step = int(rng.choice([1, 2, 3, 5, 7]))
    t = np.arange(length, dtype=np.int64)
    return (start - 1 + t * step) % (vocab - 1) + 1


def _motif_sequence(rng: np.random.Generator, length: int, alphabet: int) -> np.ndarray:
    mlen = int(rng.integers(3, 9))
    motif = rng.integers(1, alphabet + 1, size=mlen)
    reps = length // mlen + 1
    return np.tile(motif, reps)[:length]


def make_corpus(
    vocab_size: int, n_sequences: int, seq_len: int, seed: int, process_seed: int = 0
) -> list[np.ndarray]:
    """Mixed corpus; every token lies in [1, vocab_size).

    ``process_seed`` keys the Markov transition rule, ``seed`` only the
    sampling — held-out splits share the first and vary the second.
    """
    rng = np.random.default_rng(seed)
    alphabet = min(_MARKOV_ALPHABET, vocab_size - 1)
    out = []
    for _ in range(n_sequences):
        kind = rng.random()
        if kind < 0.4:
            seq = _markov_sequence(rng, process_seed, seq_len, alphabet)
        elif kind < 0.7:
            seq = _arith_sequence(rng, vocab_size, seq_len)
        else:
            seq = _motif_sequence(rng, seq_len, alphabet)
        out.append(seq)
    return out


def make_prompts(
    vocab_size: int, n: int, prompt_len: int, seed: int, process_seed: int = 0
) -> list[np.ndarray]:
    """Held-out prompts; disjoint from training corpora by seed namespace."""
    seqs = make_corpus(vocab_size, n, prompt_len, seed ^ 0x5EED_0FF5, process_seed)
    return [s[:prompt_len] for s in seqs]
