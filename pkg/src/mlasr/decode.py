"""Beam-search decoding and WER/CER scoring."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .bpe import decode_units
from .errors import DataError
from .lexicon import BOS_ID, EOS_ID, PAD_ID, Scheme, SymbolVocab, strip_tags
from .model import ASRTransformer

MAX_LEN_CAP = 512

# Never targets, but label smoothing leaves them some probability mass.
NEVER_EMITTED = (PAD_ID, BOS_ID)

# Languages scored per character; everything else is scored per word.
DEFAULT_CHAR_LANGUAGES = ("MA", "JA")


@dataclass
class Hypothesis:
    ids: list[int]
    log_prob: float
    predicted_language: str | None = None
    units: list[str] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return bool(self.ids) and self.ids[-1] == EOS_ID

    def text(self) -> str:
        return decode_units(self.units, strict=False)


def start_token(vocab: SymbolVocab, scheme: Scheme | str, forced_language: str | None) -> int:
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.B2:
        if forced_language is None:
            raise DataError("scheme b2 needs a forced language")
        return vocab.lang_id(forced_language)
    if forced_language is not None:
        raise DataError("a forced language is only meaningful under scheme b2")
    return BOS_ID


def default_max_len(num_frames: int) -> int:
    return min(2 + num_frames, MAX_LEN_CAP)


def _as_batch(features) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(features, dtype=np.float32))
    return x.unsqueeze(0) if x.dim() == 2 else x


def _next_log_probs(logits: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits.double(), dim=-1)
    logp[..., list(NEVER_EMITTED)] = -math.inf
    return logp


def _finish(ids: list[int], score: float, scheme: Scheme, vocab: SymbolVocab) -> Hypothesis:
    units, lang = strip_tags(ids, scheme, vocab)
    return Hypothesis(ids, score, lang, units)


@torch.no_grad()
def beam_search(
    model: ASRTransformer,
    features,
    vocab: SymbolVocab,
    scheme: Scheme | str,
    beam: int = 8,
    max_len: int | None = None,
    forced_language: str | None = None,
    length_penalty: float = 0.0,
) -> list[Hypothesis]:
    """Length-synchronous beam search over summed token log-probabilities.

    The decoder starts from ``<S_Lang>`` under scheme b2 and from ``<S>``
    otherwise.  Hypotheses close at the end token; those still open at
    ``max_len`` tokens are closed as they are.  Returns up to ``beam``
    hypotheses, best first.  ``length_penalty`` (off by default) divides the
    ranking score by ``len ** length_penalty``.
    """
    scheme = Scheme.parse(scheme)
    if beam < 1:
        raise ValueError("beam must be >= 1")
    start = start_token(vocab, scheme, forced_language)
    model.eval()
    feats = _as_batch(features)
    memory, keys = model.encode(feats)
    max_len = max_len or default_max_len(feats.shape[1])

    def rank(h: tuple[list[int], float]) -> tuple:
        ids, score = h
        norm = len(ids) ** length_penalty if length_penalty else 1.0
        return (-score / norm, ids)

    live: list[tuple[list[int], float]] = [([start], 0.0)]
    finished: list[tuple[list[int], float]] = []
    while live:
        prefix = torch.tensor([ids for ids, _ in live], dtype=torch.long)
        n = len(live)
        logits = model.decode(memory.expand(n, -1, -1), keys.expand(n, -1), prefix)[:, -1]
        logp = _next_log_probs(logits)
        k = min(beam, logp.shape[-1] - len(NEVER_EMITTED))
        top_lp, top_ids = logp.topk(k, dim=-1)
        candidates = []
        for (ids, score), lps, toks in zip(live, top_lp.tolist(), top_ids.tolist()):
            for lp, tok in zip(lps, toks):
                candidates.append((ids + [tok], score + lp))
        candidates.sort(key=rank)
        live = []
        for cand in candidates[:beam]:
            if cand[0][-1] == EOS_ID or len(cand[0]) >= max_len:
                finished.append(cand)
            else:
                live.append(cand)
        finished.sort(key=rank)
        finished = finished[:beam]
        # Scores only decrease as tokens append (exact when ranking is unnormalised).
        if len(finished) >= beam and not length_penalty and live and live[0][1] < finished[-1][1]:
            break
    finished.sort(key=rank)
    return [_finish(ids, score, scheme, vocab) for ids, score in finished[:beam]]


@torch.no_grad()
def greedy_decode(
    model: ASRTransformer,
    features,
    vocab: SymbolVocab,
    scheme: Scheme | str,
    max_len: int | None = None,
    forced_language: str | None = None,
) -> Hypothesis:
    scheme = Scheme.parse(scheme)
    model.eval()
    feats = _as_batch(features)
    memory, keys = model.encode(feats)
    max_len = max_len or default_max_len(feats.shape[1])
    ids = [start_token(vocab, scheme, forced_language)]
    score = 0.0
    while len(ids) < max_len:
        logits = model.decode(memory, keys, torch.tensor([ids]))[0, -1]
        logp = _next_log_probs(logits)
        tok = int(torch.argmax(logp))
        score += float(logp[tok])
        ids.append(tok)
        if tok == EOS_ID:
            break
    return _finish(ids, score, scheme, vocab)


# Scoring --------------------------------------------------------------------------


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum-edit alignment.

    Among alignments with the fewest edits the one with the most
    substitutions wins; that fixes the split completely since
    ``I - D == len(hyp) - len(ref)``.
    """
    n, m = len(ref), len(hyp)
    # cost[i][j] = (edits, -subs, ins) for ref[:i] vs hyp[:j]
    prev = [(j, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0)]
        for j in range(1, m + 1):
            e, s, ins = prev[j - 1]
            mismatch = ref[i - 1] != hyp[j - 1]
            diag = (e + mismatch, s - mismatch, ins)
            e, s, ins = prev[j]
            dele = (e + 1, s, ins)
            e, s, ins = cur[j - 1]
            inse = (e + 1, s, ins + 1)
            cur.append(min(diag, dele, inse, key=lambda c: (c[0], c[1])))
        prev = cur
    edits, neg_subs, ins = prev[m]
    subs = -neg_subs
    return subs, ins, edits - subs - ins


def tokenize(text: str, unit: str) -> list[str]:
    if unit == "char":
        return [ch for ch in text if not ch.isspace()]
    if unit == "word":
        return text.split()
    raise DataError(f"unknown scoring unit {unit!r}")


def error_rate(ref: str, hyp: str, unit: str = "word") -> float:
    r = tokenize(ref, unit)
    s, i, d = edit_distance(r, tokenize(hyp, unit))
    return (s + i + d) / max(len(r), 1)


@dataclass
class LanguageScore:
    language: str
    unit: str
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0
    utterances: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / self.ref_len if self.ref_len else 0.0


@dataclass
class ScoreReport:
    per_language: dict[str, LanguageScore]

    @property
    def average(self) -> float:
        """Unweighted mean of per-language error rates."""
        if not self.per_language:
            return 0.0
        return sum(s.rate for s in self.per_language.values()) / len(self.per_language)

    @property
    def pooled(self) -> float:
        """Total errors over total reference units, across languages."""
        ref = sum(s.ref_len for s in self.per_language.values())
        return sum(s.errors for s in self.per_language.values()) / ref if ref else 0.0

    def to_dict(self) -> dict:
        return {
            "per_language": {
                lang: {
                    "unit": s.unit,
                    "rate": s.rate,
                    "S": s.substitutions,
                    "I": s.insertions,
                    "D": s.deletions,
                    "ref_len": s.ref_len,
                    "utterances": s.utterances,
                }
                for lang, s in sorted(self.per_language.items())
            },
            "average": self.average,
            "pooled": self.pooled,
        }


def default_unit(language: str, units: Mapping[str, str] | None = None) -> str:
    if units is not None:
        for key, value in units.items():
            if key.upper() == language.upper():
                return value
        return "word"
    return "char" if language.upper() in DEFAULT_CHAR_LANGUAGES else "word"


def score_corpus(
    refs: Mapping[str, tuple[str, str]],
    hyps: Mapping[str, str],
    per_language_unit: Mapping[str, str] | None = None,
) -> ScoreReport:
    """Aggregate edit counts per language.

    ``refs`` maps utt_id to ``(language, transcript)`` and ``hyps`` maps
    utt_id to hypothesis text; the id sets must match.
    """
    if set(refs) != set(hyps):
        missing = sorted(set(refs) ^ set(hyps))[:5]
        raise DataError(f"reference and hypothesis ids differ, e.g. {missing}")
    scores: dict[str, LanguageScore] = {}
    for utt in sorted(refs):
        lang, ref_text = refs[utt]
        unit = default_unit(lang, per_language_unit)
        entry = scores.setdefault(lang, LanguageScore(lang, unit))
        r = tokenize(ref_text, unit)
        s, i, d = edit_distance(r, tokenize(hyps[utt], unit))
        entry.substitutions += s
        entry.insertions += i
        entry.deletions += d
        entry.ref_len += len(r)
        entry.utterances += 1
    return ScoreReport(scores)


def parse_units(spec: str | None) -> dict[str, str] | None:
    """``"ma=char,ja=char"`` -> ``{"MA": "char", "JA": "char"}``."""
    if not spec:
        return None
    out = {}
    for item in spec.split(","):
        lang, _, unit = item.partition("=")
        if unit not in ("char", "word"):
            raise DataError(f"bad unit spec {item!r}")
        out[lang.strip().upper()] = unit
    return out


def write_hypotheses(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_hypotheses(path: str | Path) -> dict[str, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out[row["utt_id"]] = row
            except (json.JSONDecodeError, KeyError):
                raise DataError(f"{path}:{lineno}: malformed hypothesis line") from None
    return out
