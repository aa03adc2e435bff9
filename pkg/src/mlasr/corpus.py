"""Manifests and the synthetic tone-language corpus.

A manifest is JSON lines, one utterance per line::

    {"utt_id": "EN-0001", "speaker_id": "EN-s0", "language": "EN",
     "audio_path": "wav/EN-0001.wav", "transcript": "abd caf", "split": "train"}

Relative ``audio_path``/``feature_ref`` values resolve against the manifest's
directory.  ``feature_ref`` has the form ``<archive>#<utt_id>``.

The toy corpus stands in for real multilingual speech.  Every language has
its own symbol inventory, disjoint from the others, and inventories are
position-parallel: symbol ``k`` of every language is realised as "phone" ``k``,
a tone whose frequency is shifted by a small language-specific factor.  So
each symbol has a distinct sound, languages are identifiable from audio, and
the same phone written in two scripts is a transliteration pair.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .frontend import Waveform, load_waveform, write_wav

_REQUIRED = ("utt_id", "speaker_id", "language", "transcript")


@dataclass
class Record:
    utt_id: str
    speaker_id: str
    language: str
    transcript: str
    audio_path: str | None = None
    feature_ref: str | None = None
    split: str | None = None

    def to_json(self) -> str:
        data = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(data, ensure_ascii=False, sort_keys=True)


@dataclass
class Manifest:
    records: list[Record]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def languages(self) -> list[str]:
        return sorted({r.language for r in self.records})

    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(r.language for r in self.records).items()))

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name], self.root)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def waveform(self, rec: Record) -> Waveform:
        if rec.audio_path is None:
            raise DataError(f"{rec.utt_id}: no audio_path")
        return load_waveform(self.resolve(rec.audio_path), rec.utt_id, rec.speaker_id, rec.language)

    def by_id(self) -> dict[str, Record]:
        return {r.utt_id: r for r in self.records}


def load_manifest(
    path: str | Path,
    languages: Iterable[str] | None = None,
    require_transcripts: bool = False,
) -> Manifest:
    """Read and validate a JSON-lines manifest.

    Raises ``DataError`` naming the offending line for malformed JSON,
    missing fields, duplicate ids, undeclared languages, or (when
    ``require_transcripts`` or the record is in the train split) an empty
    transcript.
    """
    path = Path(path)
    allowed = set(languages) if languages is not None else None
    records: list[Record] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(data, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in _REQUIRED if k not in data]
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {missing}")
            unknown = set(data) - set(Record.__dataclass_fields__)
            if unknown:
                raise DataError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            rec = Record(**data)
            if rec.utt_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate utt_id {rec.utt_id!r}")
            if allowed is not None and rec.language not in allowed:
                raise DataError(f"{path}:{lineno}: unknown language {rec.language!r}")
            if (require_transcripts or rec.split == "train") and not rec.transcript.strip():
                raise DataError(f"{path}:{lineno}: empty transcript for {rec.utt_id!r}")
            seen.add(rec.utt_id)
            records.append(rec)
    if not records:
        raise DataError(f"{path}: empty manifest")
    return Manifest(records, path.parent)


def write_manifest(path: str | Path, records: Iterable[Record]) -> None:
    lines = [r.to_json() for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def summary_table(manifest: Manifest) -> str:
    """Per-language utterance counts by split, as a markdown table."""
    splits = sorted({r.split or "-" for r in manifest})
    counts = Counter((r.language, r.split or "-") for r in manifest)
    rows = ["| Language | " + " | ".join(f"# {s} utts." for s in splits) + " |"]
    rows.append("|---" * (len(splits) + 1) + "|")
    for lang in manifest.languages:
        rows.append(f"| {lang} | " + " | ".join(str(counts[lang, s]) for s in splits) + " |")
    totals = [sum(counts[lang, s] for lang in manifest.languages) for s in splits]
    rows.append("| Total | " + " | ".join(map(str, totals)) + " |")
    return "\n".join(rows)


# Toy corpus -----------------------------------------------------------------

DEFAULT_INVENTORIES = {
    "EN": "abcdefgh",
    "GE": "αβγδεζηθ",
    "MA": "абвгдежз",
    "JA": "あいうえおかきく",
}


@dataclass(frozen=True)
class ToySpec:
    languages: tuple[str, ...] = ("EN", "GE")
    inventories: dict[str, str] | None = None
    words_per_language: int = 24
    word_length: tuple[int, int] = (2, 4)
    words_per_utt: tuple[int, int] = (1, 3)
    train_utts: int = 200
    test_utts: int = 50
    speakers_per_language: int = 4
    sample_rate: int = 8000
    segment_ms: float = 90.0
    symbol_gap_ms: float = 30.0
    gap_ms: float = 60.0
    phone_fmin: float = 300.0
    phone_fmax: float = 3000.0
    language_shift: float = 0.08
    noise: float = 0.003
    shared_lexicon: bool = True
    seed: int = 0

    def inventory(self, lang: str) -> str:
        table = self.inventories or DEFAULT_INVENTORIES
        try:
            return table[lang]
        except KeyError:
            raise DataError(f"no symbol inventory for {lang!r}") from None

    @property
    def num_phones(self) -> int:
        return max(len(self.inventory(lang)) for lang in self.languages)

    def phone_freq(self, phone: int, lang: str) -> float:
        ratio = (self.phone_fmax / self.phone_fmin) ** (1 / max(self.num_phones - 1, 1))
        shift = 1.0 + self.language_shift * self.languages.index(lang)
        return self.phone_fmin * ratio**phone * shift

    def seg_samples(self) -> int:
        return int(round(self.sample_rate * self.segment_ms / 1000))

    def gap_samples(self) -> int:
        return int(round(self.sample_rate * self.gap_ms / 1000))

    def symbol_gap_samples(self) -> int:
        return int(round(self.sample_rate * self.symbol_gap_ms / 1000))


def check_disjoint(spec: ToySpec) -> None:
    seen: dict[str, str] = {}
    for lang in spec.languages:
        inv = spec.inventory(lang)
        if len(set(inv)) != len(inv):
            raise DataError(f"repeated symbol in the {lang} inventory")
        for ch in inv:
            if ch in seen:
                raise DataError(f"inventories overlap: {ch!r} in {seen[ch]} and {lang}")
            seen[ch] = lang


def symbol_tone(spec: ToySpec, lang: str, symbol: str) -> np.ndarray:
    """Clean waveform of one symbol: a tone with raised-cosine edges."""
    phone = spec.inventory(lang).index(symbol)
    n = spec.seg_samples()
    t = np.arange(n) / spec.sample_rate
    ramp = min(n // 4, int(spec.sample_rate * 0.01))
    env = np.ones(n)
    edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[:ramp], env[n - ramp:] = edge, edge[::-1]
    return 0.3 * env * np.sin(2 * np.pi * spec.phone_freq(phone, lang) * t)


def symbol_spans(spec: ToySpec, transcript: str) -> list[tuple[str, int, int]]:
    """(symbol, start, end) sample spans in the synthesized utterance."""
    seg, gap, inner = spec.seg_samples(), spec.gap_samples(), spec.symbol_gap_samples()
    spans, pos = [], gap
    for word in transcript.split():
        for k, ch in enumerate(word):
            if k:
                pos += inner
            spans.append((ch, pos, pos + seg))
            pos += seg
        pos += gap
    return spans


def synthesize(spec: ToySpec, lang: str, transcript: str, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    spans = symbol_spans(spec, transcript)
    total = (spans[-1][2] if spans else 0) + spec.gap_samples()
    audio = np.zeros(total)
    for ch, start, end in spans:
        audio[start:end] += symbol_tone(spec, lang, ch)
    audio *= gain
    audio += spec.noise * rng.standard_normal(total)
    return audio


def _phone_words(spec: ToySpec, rng: np.random.Generator, n_phones: int) -> list[tuple[int, ...]]:
    lo, hi = spec.word_length
    words: list[tuple[int, ...]] = []
    while len(words) < spec.words_per_language:
        w = tuple(int(p) for p in rng.integers(0, n_phones, size=int(rng.integers(lo, hi + 1))))
        if w not in words:
            words.append(w)
    return words


def toy_lexicon(spec: ToySpec) -> dict[str, list[str]]:
    """Word list per language.

    With ``shared_lexicon`` every language spells the same phone strings in
    its own script (cognates); otherwise each draws its own words.
    """
    n_phones = min(len(spec.inventory(lang)) for lang in spec.languages)
    shared = _phone_words(spec, np.random.default_rng([spec.seed, 1000]), n_phones)
    out = {}
    for li, lang in enumerate(spec.languages):
        inv = spec.inventory(lang)
        if spec.shared_lexicon:
            phones = shared
        else:
            phones = _phone_words(spec, np.random.default_rng([spec.seed, 1000 + li + 1]), len(inv))
        out[lang] = ["".join(inv[p] for p in w) for w in phones]
    return out


def generate_toy_corpus(spec: ToySpec, out_dir: str | Path) -> Manifest:
    """Write WAVs, ``train.jsonl``, ``test.jsonl`` and ``manifest.jsonl``.

    Output is a deterministic function of ``spec``.
    """
    check_disjoint(spec)
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    records: list[Record] = []
    lexicon = toy_lexicon(spec)
    for li, lang in enumerate(spec.languages):
        rng = np.random.default_rng([spec.seed, li])
        words = lexicon[lang]
        gains = rng.uniform(0.6, 1.2, size=spec.speakers_per_language)
        n_total = spec.train_utts + spec.test_utts
        for i in range(n_total):
            lo, hi = spec.words_per_utt
            n_words = int(rng.integers(lo, hi + 1))
            transcript = " ".join(rng.choice(words, size=n_words))
            spk = i % spec.speakers_per_language
            split = "train" if i < spec.train_utts else "test"
            utt = f"{lang}-{split}-{i:04d}"
            audio = synthesize(spec, lang, transcript, rng, gains[spk])
            rel = f"wav/{utt}.wav"
            write_wav(out / rel, audio, spec.sample_rate)
            records.append(Record(utt, f"{lang}-s{spk}", lang, transcript, audio_path=rel, split=split))
    write_manifest(out / "manifest.jsonl", records)
    write_manifest(out / "train.jsonl", [r for r in records if r.split == "train"])
    write_manifest(out / "test.jsonl", [r for r in records if r.split == "test"])
    return Manifest(records, out)


def transliterate(text: str, spec: ToySpec, src: str, dst: str) -> str:
    """Map symbols of ``src`` onto the same phones in ``dst``'s inventory."""
    a, b = spec.inventory(src), spec.inventory(dst)
    table = {ch: b[i] for i, ch in enumerate(a) if i < len(b)}
    return "".join(table.get(ch, ch) for ch in text)


def language_of_text(text: str, spec: ToySpec) -> Sequence[str | None]:
    """Per-character source language (None for separators or foreign symbols)."""
    owner = {ch: lang for lang in spec.languages for ch in spec.inventory(lang)}
    return [owner.get(ch) for ch in text if not ch.isspace()]
