"""Symbol vocabulary and language-symbol tagging schemes.

Four target layouts are supported for a sub-word sequence ``u...`` of
language ``L``::

    plain   <S> u... <\\S>
    b       <S> <S_L> u... <\\S>
    e       <S> u... <S_L> <\\S>
    b2      <S_L> u... <\\S>

Under ``b2`` the language symbol replaces the start token, so decoding can
be forced into a chosen language.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

PAD, UNK, BOS, EOS = "<PAD>", "<UNK>", "<S>", "<\\S>"
SPECIALS = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = range(4)


class Scheme(str, enum.Enum):
    PLAIN = "plain"
    B = "b"
    E = "e"
    B2 = "b2"

    @classmethod
    def parse(cls, value: "str | Scheme") -> "Scheme":
        if isinstance(value, Scheme):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise DataError(f"unknown scheme {value!r}; expected plain, b, e or b2") from None

    @property
    def tagged(self) -> bool:
        return self is not Scheme.PLAIN


def lang_symbol(code: str) -> str:
    return f"<S_{code}>"


@dataclass(frozen=True)
class SymbolVocab:
    tokens: tuple[str, ...]
    scheme: Scheme
    languages: tuple[str, ...]
    id_of: dict[str, int] = field(init=False, repr=False, compare=False)
    lang_symbols: dict[str, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.tokens[:4] != SPECIALS:
            raise DataError("special tokens must occupy ids 0-3")
        id_of = {tok: i for i, tok in enumerate(self.tokens)}
        if len(id_of) != len(self.tokens):
            raise DataError("duplicate token in vocabulary")
        syms = {code: lang_symbol(code) for code in self.languages} if self.scheme.tagged else {}
        missing = [s for s in syms.values() if s not in id_of]
        if missing:
            raise DataError(f"language symbols missing from vocabulary: {missing}")
        object.__setattr__(self, "id_of", id_of)
        object.__setattr__(self, "lang_symbols", syms)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def num_subwords(self) -> int:
        return len(self.tokens) - len(SPECIALS) - len(self.lang_symbols)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, units: Iterable[str]) -> list[int]:
        return [self.id_of.get(u, UNK_ID) for u in units]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def lang_id(self, code: str) -> int:
        try:
            return self.id_of[self.lang_symbols[code]]
        except KeyError:
            raise DataError(f"unknown language {code!r}") from None

    def language_of(self, idx: int) -> str | None:
        """Language code if ``idx`` is a language symbol, else None."""
        tok = self.tokens[idx] if 0 <= idx < len(self.tokens) else ""
        if tok.startswith("<S_") and tok.endswith(">"):
            code = tok[3:-1]
            if code in self.lang_symbols:
                return code
        return None

    def subword_ids(self) -> range:
        return range(len(SPECIALS) + len(self.lang_symbols), len(self.tokens))

    def serialize(self) -> str:
        header = f"#vocab-v1 scheme={self.scheme.value} langs={','.join(self.languages)}"
        return "\n".join((header, *self.tokens)) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]


def vocab_accounting(num_subwords: int, num_languages: int, scheme: Scheme | str) -> dict[str, int]:
    """Output-layer size broken down by token kind.

    ``total`` counts everything the softmax sees; ``subwords_plus_specials``
    is the count without language symbols, the other plausible reading of a
    reported multilingual vocabulary size.
    """
    scheme = Scheme.parse(scheme)
    langs = num_languages if scheme.tagged else 0
    return {
        "subwords": num_subwords,
        "specials": len(SPECIALS),
        "language_symbols": langs,
        "subwords_plus_specials": num_subwords + len(SPECIALS),
        "total": num_subwords + len(SPECIALS) + langs,
    }


def build_vocab(
    corpus_units: Iterable[str], languages: Sequence[str], scheme: Scheme | str
) -> SymbolVocab:
    scheme = Scheme.parse(scheme)
    if len(set(languages)) != len(languages):
        raise DataError("duplicate language codes")
    units = set(corpus_units)
    if not units:
        raise DataError("empty corpus")
    langs = tuple(sorted(languages))
    reserved = set(SPECIALS) | {lang_symbol(c) for c in langs}
    bad = sorted(units & reserved)
    if bad:
        raise DataError(f"sub-word collides with a reserved token: {bad}")
    lang_tokens = [lang_symbol(c) for c in langs] if scheme.tagged else []
    return SymbolVocab((*SPECIALS, *lang_tokens, *sorted(units)), scheme, langs)


@dataclass
class TaggedSequence:
    ids: list[int]
    language: str | None = None


def tag_sequence(
    units: Sequence[str], language: str | None, scheme: Scheme | str, vocab: SymbolVocab
) -> TaggedSequence:
    scheme = Scheme.parse(scheme)
    payload = vocab.encode(units)
    if scheme is Scheme.PLAIN:
        return TaggedSequence([BOS_ID, *payload, EOS_ID], language)
    if language is None:
        raise DataError(f"scheme {scheme.value} needs a language")
    tag = vocab.lang_id(language)
    if scheme is Scheme.B:
        ids = [BOS_ID, tag, *payload, EOS_ID]
    elif scheme is Scheme.E:
        ids = [BOS_ID, *payload, tag, EOS_ID]
    else:
        ids = [tag, *payload, EOS_ID]
    return TaggedSequence(ids, language)


def strip_tags(
    seq: TaggedSequence | Sequence[int], scheme: Scheme | str, vocab: SymbolVocab
) -> tuple[list[str], str | None]:
    """Recover sub-word units and the language symbol from a tagged sequence.

    The language symbol at the scheme's own slot wins.  Otherwise the first
    language symbol found anywhere is reported, and every language symbol is
    removed from the payload.  Anything after the first end token is ignored.
    """
    scheme = Scheme.parse(scheme)
    ids = list(seq.ids if isinstance(seq, TaggedSequence) else seq)
    if EOS_ID in ids:
        ids = ids[: ids.index(EOS_ID)]

    slot = None
    if ids:
        if scheme is Scheme.B2:
            slot = 0
        elif scheme is Scheme.B:
            slot = 1 if ids[0] == BOS_ID else 0
        elif scheme is Scheme.E:
            slot = len(ids) - 1

    language = None
    if slot is not None and slot < len(ids):
        language = vocab.language_of(ids[slot])
    units = []
    for idx in ids:
        code = vocab.language_of(idx)
        if code is not None:
            language = language or code
            continue
        if idx in (PAD_ID, BOS_ID, EOS_ID):
            continue
        units.append(vocab.token_of(idx))
    return units, language


def save_vocab(vocab: SymbolVocab, path: str | Path) -> None:
    Path(path).write_text(vocab.serialize(), encoding="utf-8")


def load_vocab(path: str | Path) -> SymbolVocab:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("#vocab-v1 "):
        raise DataError(f"{path}:1: bad vocab header")
    fields = dict(kv.split("=", 1) for kv in lines[0].split()[1:] if "=" in kv)
    if "scheme" not in fields:
        raise DataError(f"{path}:1: vocab header lacks scheme")
    langs = tuple(c for c in fields.get("langs", "").split(",") if c)
    return SymbolVocab(tuple(lines[1:]), Scheme.parse(fields["scheme"]), langs)
