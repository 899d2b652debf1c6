"""MinHash near-duplicate removal plus heuristic quality filters.

Signatures hash token shingles through a bank of universal hash
functions; two examples whose estimated Jaccard similarity reaches the
threshold collapse to the first occurrence. Filters only ever remove
examples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TrainingExample

# largest 32-bit prime: keeps (a*x + b) products exactly inside uint64
_PRIME = np.uint64(4294967291)
_SHINGLE_BASE = np.uint64(1_000_003)


@dataclass(frozen=True)
class FilterRules:
    shingle_width: int = 3
    num_hashes: int = 64
    hash_seed: int = 977
    min_response_len: int = 4
    max_response_len: int | None = None
    ngram_width: int = 4
    max_ngram_ratio: float = 0.2
    min_ngram_total: int = 8
    drop_truncated: bool = False


def _shingle_values(tokens, width: int) -> np.ndarray:
    """Polynomial hashes of overlapping token windows (whole sequence if shorter)."""
    if len(tokens) < width:
        windows = [tuple(tokens)]
    else:
        windows = [tuple(tokens[i:i + width]) for i in range(len(tokens) - width + 1)]
    values = set()
    base, prime = int(_SHINGLE_BASE), int(_PRIME)
    for w in windows:
        h = 0
        for t in w:
            h = (h * base + int(t) + 1) % prime
        values.add(h)
    return np.fromiter(values, dtype=np.uint64, count=len(values))


def minhash_signature(tokens, rules: FilterRules) -> np.ndarray:
    """One min-hash per hash function over the example's shingle set."""
    rng = np.random.default_rng(rules.hash_seed)
    a = rng.integers(1, int(_PRIME), size=rules.num_hashes, dtype=np.uint64)
    b = rng.integers(0, int(_PRIME), size=rules.num_hashes, dtype=np.uint64)
    values = _shingle_values(tokens, rules.shingle_width)
    hashed = (a[:, None] * values[None, :] + b[:, None]) % _PRIME
    return hashed.min(axis=1)


def estimated_jaccard(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
    return float(np.mean(sig_a == sig_b))


def repetition_ratio(tokens, width: int) -> float:
    """Frequency share of the most common width-gram."""
    if len(tokens) < width:
        return 0.0
    grams: dict[tuple, int] = {}
    for i in range(len(tokens) - width + 1):
        g = tuple(tokens[i:i + width])
        grams[g] = grams.get(g, 0) + 1
    total = len(tokens) - width + 1
    return max(grams.values()) / total


def passes_filters(ex: TrainingExample, rules: FilterRules) -> bool:
    n = len(ex.response)
    if n < rules.min_response_len:
        return False
    if rules.max_response_len is not None and n > rules.max_response_len:
        return False
    if rules.drop_truncated and ex.truncated:
        return False
    if n - rules.ngram_width + 1 >= rules.min_ngram_total:
        if repetition_ratio(ex.response, rules.ngram_width) > rules.max_ngram_ratio:
            return False
    return True


def dedup_and_filter(dataset, jaccard_threshold: float,
                     rules: FilterRules = FilterRules()) -> list[TrainingExample]:
    """Collapse near-duplicates (first occurrence wins), then apply filters."""
    if not (0.0 < jaccard_threshold <= 1.0):
        raise ValueError("jaccard_threshold must lie in (0, 1]")
    kept: list[TrainingExample] = []
    kept_sigs: list[np.ndarray] = []
    for ex in dataset:
        sig = minhash_signature(ex.tokens, rules)
        if kept_sigs:
            sims = np.mean(np.stack(kept_sigs) == sig, axis=1)
            if float(sims.max()) >= jaccard_threshold:
                continue
        kept.append(ex)
        kept_sigs.append(sig)
    return [ex for ex in kept if passes_filters(ex, rules)]


def mix_back(original, kept, langs, rules: FilterRules = FilterRules()):
    """Post-dedup mixing: restore language slices the global pass collapsed.

    A degenerate corpus slice (the period-4 cycle: every example shares
    one shingle set) survives global dedup as a single example, starving
    that language during training. Mixing restores the slice at its
    distilled proportion: every example of the named languages that is
    not already among the survivors comes back, repeats included, so the
    training mixture keeps its balance.
    """
    survivors = list(kept)
    restored = [ex for ex in original
                if ex.lang in langs and ex not in survivors
                and passes_filters(ex, rules)]
    return survivors + restored
