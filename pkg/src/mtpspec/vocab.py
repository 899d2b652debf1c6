"""Frequency-ranked, language-aware vocabulary compression for drafting.

Per-language token counts rank the vocabulary; the top slice (plus
force-included specials) forms a compressed output space. Draft logits
are computed against the matching row subset of the shared output head,
so the per-step multiply cost scales with the kept size. Verification is
untouched and always sees the full vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import FALLBACK_LANG, SPECIAL_TOKENS, is_high_byte
from .errors import ConfigError, ConsistencyError, EmptyCorpusError
from .model import MainModel

CJK_RATIO_THRESHOLD = 0.3
DETECT_WINDOW = 128


@dataclass
class FrequencyTable:
    lang: str
    counts: np.ndarray  # int64, one slot per vocabulary id
    total: int

    def __add__(self, other: "FrequencyTable") -> "FrequencyTable":
        if self.counts.shape != other.counts.shape:
            raise ConfigError("frequency tables cover different vocabularies")
        return FrequencyTable(self.lang, self.counts + other.counts,
                              self.total + other.total)

    def coverage(self, keep) -> float:
        """Fraction of corpus occurrences covered by the kept ids."""
        return float(self.counts[np.asarray(keep)].sum() / self.total)

    def to_json(self) -> dict:
        order = np.lexsort((np.arange(self.counts.size), -self.counts))
        pairs = [[int(i), int(self.counts[i])] for i in order if self.counts[i] > 0]
        return {"lang": self.lang, "total": int(self.total), "pairs": pairs}

    @classmethod
    def from_json(cls, obj: dict, vocab_size: int) -> "FrequencyTable":
        counts = np.zeros(vocab_size, dtype=np.int64)
        for token_id, count in obj["pairs"]:
            counts[token_id] = count
        return cls(lang=obj["lang"], counts=counts, total=int(obj["total"]))


def build_frequency_table(corpus, lang: str, vocab_size: int) -> FrequencyTable:
    """Exact token counts over an iterable of token sequences."""
    counts = np.zeros(vocab_size, dtype=np.int64)
    total = 0
    for seq in corpus:
        arr = np.asarray(seq, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
            raise IndexError(f"token id outside vocabulary of size {vocab_size}")
        counts += np.bincount(arr, minlength=vocab_size)
        total += arr.size
    if total == 0:
        raise EmptyCorpusError(f"no tokens in corpus for lang {lang!r}")
    return FrequencyTable(lang=lang, counts=counts, total=total)


@dataclass
class CompressedVocab:
    """A high-frequency token subset plus index maps and the head-row view."""

    lang: str
    keep: np.ndarray                      # sorted ascending full-vocab ids
    full_to_comp: np.ndarray              # full id -> compressed index, -1 if absent
    w_view: np.ndarray | None = None      # rows of the shared output head, keep order
    _w_source: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return int(self.keep.size)

    def bind(self, main: MainModel) -> "CompressedVocab":
        """Extract the output-head row subset this vocabulary drafts against."""
        w = main.output_w.data
        self.w_view = w[self.keep]
        self._w_source = w
        return self

    def check_bound(self, w: np.ndarray | None = None) -> None:
        if self.w_view is None:
            raise ConsistencyError("compressed vocabulary is not bound to an output head")
        if w is not None and self._w_source is not w:
            raise ConsistencyError("compressed head view is stale: output head changed")

    def to_json(self) -> dict:
        return {"lang": self.lang, "size": self.size,
                "keep": [int(i) for i in self.keep]}

    @classmethod
    def from_json(cls, obj: dict, vocab_size: int) -> "CompressedVocab":
        keep = np.asarray(sorted(obj["keep"]), dtype=np.int64)
        return cls(lang=obj["lang"], keep=keep,
                   full_to_comp=_inverse_map(keep, vocab_size))


def _inverse_map(keep: np.ndarray, vocab_size: int) -> np.ndarray:
    inv = np.full(vocab_size, -1, dtype=np.int64)
    inv[keep] = np.arange(keep.size)
    return inv


def compress_vocab(table: FrequencyTable, size: int,
                   specials=SPECIAL_TOKENS,
                   main: MainModel | None = None) -> CompressedVocab:
    """Top-`size` tokens by count (ties to the lower id), specials forced in.

    Specials displace the lowest-ranked non-special members when they
    would not otherwise make the cut. Pass `main` to bind the head-row
    view immediately.
    """
    vocab_size = table.counts.size
    specials = list(dict.fromkeys(specials))
    if not (1 <= size <= vocab_size):
        raise ConfigError(f"size {size} outside [1, {vocab_size}]")
    if size < len(specials):
        raise ConfigError(f"size {size} cannot hold {len(specials)} special tokens")

    order = np.lexsort((np.arange(vocab_size), -table.counts))
    selected = list(order[:size])
    chosen = set(selected)
    for special in specials:
        if special in chosen:
            continue
        for i in range(len(selected) - 1, -1, -1):
            if selected[i] not in specials:
                chosen.discard(selected[i])
                selected[i] = special
                chosen.add(special)
                break
    keep = np.asarray(sorted(selected), dtype=np.int64)
    cv = CompressedVocab(lang=table.lang, keep=keep,
                         full_to_comp=_inverse_map(keep, vocab_size))
    if main is not None:
        cv.bind(main)
    return cv


def identity_vocab(main: MainModel, lang: str = FALLBACK_LANG) -> CompressedVocab:
    """The full vocabulary expressed as a (bound) compression; the fallback entry."""
    v = main.config.vocab_size
    keep = np.arange(v, dtype=np.int64)
    cv = CompressedVocab(lang=lang, keep=keep, full_to_comp=keep.copy())
    cv.w_view = main.output_w.data
    cv._w_source = main.output_w.data
    return cv


def size_for_coverage(table: FrequencyTable, coverage: float,
                      specials=SPECIAL_TOKENS) -> int:
    """Smallest keep-size whose kept mass reaches `coverage`.

    Accounts for forced specials displacing counted members: the
    returned size guarantees the final keep set covers the target.
    """
    specials = tuple(specials)
    order = np.lexsort((np.arange(table.counts.size), -table.counts))
    cum = np.cumsum(table.counts[order]) / table.total
    base = int(np.searchsorted(cum, coverage)) + 1
    for size in range(max(base, len(specials), 1), table.counts.size + 1):
        if table.coverage(compress_vocab(table, size, specials).keep) >= coverage:
            return size
    return table.counts.size


class MultiplyCounter:
    """Tracks multiply counts of draft-side logit projections."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n

    def reset(self) -> None:
        self.count = 0


def draft_logits_compressed(pre_logit_state: np.ndarray, cv: CompressedVocab,
                            counter: MultiplyCounter | None = None):
    """Logits over the kept subset only; argmax maps back to a full-vocab id.

    Cost is |keep| * d multiplies, counted on `counter` when given.
    """
    cv.check_bound()
    logits = cv.w_view @ pre_logit_state
    if counter is not None:
        counter.add(cv.w_view.shape[0] * cv.w_view.shape[1])
    comp_idx = int(np.argmax(logits))
    return logits, int(cv.keep[comp_idx])


class VocabBank:
    """Per-language compressed vocabularies with a full-vocab fallback."""

    def __init__(self, main: MainModel, vocabs=()):
        self.main = main
        self.fallback = identity_vocab(main)
        self.by_lang: dict[str, CompressedVocab] = {}
        for cv in vocabs:
            self.add(cv)

    def add(self, cv: CompressedVocab) -> None:
        if cv.w_view is None:
            cv.bind(self.main)
        cv.check_bound(self.main.output_w.data)
        self.by_lang[cv.lang] = cv

    def get(self, lang: str) -> CompressedVocab:
        return self.by_lang.get(lang, self.fallback)


def detect_language(context, bank: VocabBank | None = None,
                    window: int = DETECT_WINDOW,
                    threshold: float = CJK_RATIO_THRESHOLD) -> str:
    """Classify the trailing context by its high-byte (CJK) token ratio.

    Empty context falls back to the full vocabulary tag. Synthetic
    corpora use explicit tags and never rely on this heuristic.
    """
    context = list(context)[-window:]
    if not context:
        return FALLBACK_LANG
    ratio = sum(1 for t in context if is_high_byte(t)) / len(context)
    return "zh" if ratio >= threshold else "en"


# ---------------------------------------------------------------------------
# file formats


def save_frequency_table(path, table: FrequencyTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table.to_json(), fh)


def load_frequency_table(path, vocab_size: int) -> FrequencyTable:
    with open(path, encoding="utf-8") as fh:
        return FrequencyTable.from_json(json.load(fh), vocab_size)


def save_compressed_vocab(path, cv: CompressedVocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cv.to_json(), fh)


def load_compressed_vocab(path, vocab_size: int) -> CompressedVocab:
    with open(path, encoding="utf-8") as fh:
        return CompressedVocab.from_json(json.load(fh), vocab_size)
