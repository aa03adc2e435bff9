"""Byte-pair-encoding sub-words with ``@@`` continuation markers.

Merges are learned greedily over a word-frequency table.  At every step the
most frequent adjacent symbol pair is replaced by its concatenation; ties go
to the lexicographically smallest ``(left, right)`` pair so the result does
not depend on corpus order.  Applying a table splits a word into code points
and replays the merges, then marks every non-final unit with ``@@``::

    >>> table = learn_merges({"low": 5, "lower": 2}, 2)
    >>> table.merges
    (('l', 'o'), ('lo', 'w'))
    >>> apply_bpe("lowest", table)
    ['low@@', 'e@@', 's@@', 't']
"""

from __future__ import annotations

import heapq
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DataError

MARKER = "@@"
EOW = "</w>"

_HEADER_RE = re.compile(r"^#bpe-v1 alpha=(\d+)(?: eow=([01]))?$")

Pair = tuple[str, str]


@dataclass(frozen=True)
class MergeTable:
    """Ordered merge rules and the symbol inventory they induce.

    ``alphabet`` holds the initial single-character symbols seen during
    learning.  Tables read back from a merge file only know the characters
    that take part in some merge.
    """

    merges: tuple[Pair, ...]
    num_merges: int
    alphabet: tuple[str, ...] = ()
    end_of_word: bool = False
    _ranks: dict[Pair, int] = field(init=False, repr=False, compare=False)
    _cache: dict[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.merges) > self.num_merges:
            raise ValueError("more merges than the merge budget")
        ranks = {pair: i for i, pair in enumerate(self.merges)}
        if len(ranks) != len(self.merges):
            raise ValueError("duplicate merge")
        object.__setattr__(self, "_ranks", ranks)
        object.__setattr__(self, "_cache", {})

    def inventory(self) -> list[str]:
        """Initial symbols followed by merge outputs, duplicates dropped."""
        seen: dict[str, None] = dict.fromkeys(self.alphabet)
        for left, right in self.merges:
            if not self.alphabet:
                seen.setdefault(left)
                seen.setdefault(right)
            seen.setdefault(left + right)
        return list(seen)

    def rank(self, pair: Pair) -> int | None:
        return self._ranks.get(pair)


def _check_word(word: str) -> None:
    if not word:
        raise DataError("empty word")
    if any(ch.isspace() for ch in word):
        raise DataError(f"whitespace inside word {word!r}")
    if MARKER in word or EOW in word:
        raise DataError("reserved marker in input")


def _initial_symbols(word: str, end_of_word: bool) -> list[str]:
    symbols = list(word)
    if end_of_word:
        symbols[-1] += EOW
    return symbols


def _pairs(symbols: list[str]) -> Counter[Pair]:
    return Counter(zip(symbols, symbols[1:]))


def _merge_pair(symbols: list[str], pair: Pair) -> list[str]:
    left, right = pair
    out: list[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def count_words(lines: Iterable[str]) -> Counter[str]:
    """Whitespace-split word frequencies of a text."""
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(line.split())
    return counts


def learn_merges(
    counts: Mapping[str, int], alpha: int, *, end_of_word: bool = False
) -> MergeTable:
    """Learn up to ``alpha`` merges from word frequencies.

    Learning stops early once no pair occurs at least twice.  With
    ``end_of_word`` the last character of every word is a distinct symbol
    (``x</w>``), so word-final and word-internal n-grams never share a merge.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not counts:
        raise DataError("empty corpus")
    for word, freq in counts.items():
        _check_word(word)
        if freq < 1:
            raise DataError(f"non-positive count for {word!r}")

    words = sorted(counts)
    segs = [_initial_symbols(w, end_of_word) for w in words]
    freqs = [counts[w] for w in words]
    alphabet = tuple(sorted({s for seg in segs for s in seg}))

    pair_counts: Counter[Pair] = Counter()
    where: dict[Pair, set[int]] = {}
    for idx, seg in enumerate(segs):
        for pair, n in _pairs(seg).items():
            pair_counts[pair] += n * freqs[idx]
            where.setdefault(pair, set()).add(idx)

    # Max-heap on count, min on pair; stale entries are skipped on pop.
    heap = [(-n, pair) for pair, n in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[Pair] = []
    while len(merges) < alpha and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg:
            continue
        if -neg < 2:
            break
        merges.append(pair)
        touched: set[Pair] = set()
        for idx in sorted(where.pop(pair, ())):
            seg = segs[idx]
            before = _pairs(seg)
            after_seg = _merge_pair(seg, pair)
            after = _pairs(after_seg)
            segs[idx] = after_seg
            for p, n in before.items():
                pair_counts[p] -= n * freqs[idx]
                touched.add(p)
                if p not in after and p in where:
                    where[p].discard(idx)
            for p, n in after.items():
                pair_counts[p] += n * freqs[idx]
                touched.add(p)
                where.setdefault(p, set()).add(idx)
        for p in touched:
            n = pair_counts[p]
            if n <= 0:
                del pair_counts[p]
                where.pop(p, None)
            else:
                heapq.heappush(heap, (-n, p))

    return MergeTable(tuple(merges), alpha, alphabet, end_of_word)


def segment(word: str, table: MergeTable) -> tuple[str, ...]:
    """Raw symbols of ``word`` after replaying the merges (no markers)."""
    cached = table._cache.get(word)
    if cached is not None:
        return cached
    symbols = _initial_symbols(word, table.end_of_word)
    while len(symbols) > 1:
        best = None
        best_rank = len(table.merges)
        for pair in zip(symbols, symbols[1:]):
            r = table.rank(pair)
            if r is not None and r < best_rank:
                best, best_rank = pair, r
        if best is None:
            break
        symbols = _merge_pair(symbols, best)
    result = tuple(symbols)
    table._cache[word] = result
    return result


def apply_bpe(word: str, table: MergeTable) -> list[str]:
    """Split one word into sub-word units carrying ``@@`` on non-final units.

    Replaying merges lowest-rank-first is equivalent to replaying them in
    learned order: a merge can only create pairs whose rank is higher.
    Characters unseen in training come out as single-character units.
    """
    _check_word(word)
    symbols = list(segment(word, table))
    if table.end_of_word:
        symbols[-1] = symbols[-1][: -len(EOW)]
    return [s + MARKER for s in symbols[:-1]] + [symbols[-1]]


def encode_text(sentence: str, table: MergeTable) -> list[str]:
    units: list[str] = []
    for word in sentence.split():
        units.extend(apply_bpe(word, table))
    return units


def decode_units(units: Iterable[str], *, strict: bool = True) -> str:
    """Join sub-word units back into a space-separated sentence.

    With ``strict=False`` a dangling ``@@`` on the final unit is dropped
    instead of raising, which is what scoring model output needs.
    """
    words: list[str] = []
    current = ""
    units = list(units)
    for unit in units:
        if unit.endswith(MARKER):
            current += unit[: -len(MARKER)]
        else:
            words.append(current + unit)
            current = ""
    if current or (units and units[-1].endswith(MARKER)):
        if strict:
            raise DataError("dangling continuation")
        if current:
            words.append(current)
    return " ".join(words)


def save_merges(table: MergeTable, path: str | Path) -> None:
    header = f"#bpe-v1 alpha={table.num_merges}"
    if table.end_of_word:
        header += " eow=1"
    lines = [header] + [f"{left} {right}" for left, right in table.merges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_merges(path: str | Path) -> MergeTable:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty merge file")
    m = _HEADER_RE.match(lines[0])
    if m is None:
        raise DataError(f"{path}:1: bad merge header {lines[0]!r}")
    merges = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) != 2 or not all(parts):
            raise DataError(f"{path}:{lineno}: expected 'left right'")
        merges.append((parts[0], parts[1]))
    try:
        return MergeTable(tuple(merges), int(m.group(1)), end_of_word=m.group(2) == "1")
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
