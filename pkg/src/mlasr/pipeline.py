"""End-to-end experiment driver.

A run chains featurize -> bpe-learn -> vocab -> train -> average -> decode ->
score for every requested tagging scheme.  Everything is driven by one
nested config tree (see ``DEFAULT_CONFIG``); the report embeds a hash of the
resolved tree and the seed, and carries no wall-clock data, so identical
inputs give identical reports.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch

from .bpe import MergeTable, count_words, encode_text, learn_merges, save_merges
from .corpus import Manifest, Record, ToySpec, generate_toy_corpus, load_manifest
from .decode import ScoreReport, beam_search, score_corpus, write_hypotheses
from .errors import DataError
from .frontend import FeatureMatrix, FrontendConfig, featurize, perturbed_id, read_archive, write_archive
from .lexicon import Scheme, SymbolVocab, build_vocab, save_vocab, tag_sequence
from .model import ASRTransformer, Checkpoint, ModelConfig, save_checkpoint
from .training import Example, TrainConfig, average_checkpoints, last_checkpoints, train, transfer_init

log = logging.getLogger(__name__)

# Desk-scale defaults tuned on the bilingual toy corpus.
DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "schemes": ["plain", "b", "e", "b2"],
    "data": {
        "train_manifest": None,
        "test_manifest": None,
        "toy": {"languages": ["EN", "GE"]},
    },
    "frontend": {"perturb_factors": [0.9, 1.1]},
    "bpe": {"alpha": 0, "end_of_word": False},
    "model": {"num_layers": 2, "d_model": 64, "num_heads": 4, "d_k": 16, "d_v": 16, "d_ff": 256, "dropout": 0.1},
    "train": {
        "warmup_steps": 400,
        "max_steps": 1500,
        "epochs": 10000,
        "batch_frames": 1500,
        "checkpoint_every": 25,
        "average_last": 20,
    },
    "decode": {"beam": 8, "max_len": None, "length_penalty": 0.0},
    "score": {"units": None},
}


class StageError(Exception):
    """A pipeline stage failed; ``cause`` is the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# Config tree --------------------------------------------------------------------


def merge_config(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """``"train.max_steps=200"`` -> (["train", "max_steps"], 200).

    Values are parsed as JSON when possible and kept as strings otherwise.
    """
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise DataError(f"override {item!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(tree: Mapping, items: Iterable[str]) -> dict:
    out = copy.deepcopy(dict(tree))
    for item in items:
        path, value = parse_override(item)
        node = out
        for part in path[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise DataError(f"override {item!r}: {part!r} is not a table")
            node = nxt
        node[path[-1]] = value
    return out


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"{path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc.msg} at line {exc.lineno}") from None


def resolve_config(tree: Mapping | None = None, overrides: Iterable[str] = ()) -> dict:
    return apply_overrides(merge_config(DEFAULT_CONFIG, tree or {}), overrides)


def config_hash(tree: Mapping) -> str:
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _build(cls, values: Mapping | None, **forced):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise DataError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for key, value in list(values.items()):
        if isinstance(value, list):
            values[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    values.update(forced)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad {cls.__name__}: {exc}") from None


@dataclass
class ExperimentConfig:
    tree: dict
    schemes: list[Scheme]
    seed: int
    alpha: int
    end_of_word: bool
    frontend: FrontendConfig
    model: dict
    train: TrainConfig
    beam: int
    max_len: int | None
    length_penalty: float
    units: dict[str, str] | None
    train_manifest: str | None = None
    test_manifest: str | None = None
    toy: ToySpec | None = None
    hash: str = field(default="")

    @classmethod
    def from_tree(cls, tree: Mapping) -> "ExperimentConfig":
        tree = copy.deepcopy(dict(tree))
        seed = int(tree.get("seed", 0))
        data = tree.get("data") or {}
        train_m, test_m = data.get("train_manifest"), data.get("test_manifest")
        toy = None
        if train_m is None:
            toy = _build(ToySpec, {"seed": seed, **(data.get("toy") or {})})
        elif test_m is None:
            raise DataError("data.test_manifest is required with data.train_manifest")
        schemes = [Scheme.parse(s) for s in tree.get("schemes") or ["b2"]]
        model_keys = {f.name for f in fields(ModelConfig)} - {"vocab_size", "feat_dim"}
        bad = set(tree.get("model") or {}) - model_keys
        if bad:
            raise DataError(f"unknown model keys: {sorted(bad)}")
        dec = tree.get("decode") or {}
        bpe = tree.get("bpe") or {}
        units = (tree.get("score") or {}).get("units")
        return cls(
            tree=tree,
            schemes=schemes,
            seed=seed,
            alpha=int(bpe.get("alpha", 0)),
            end_of_word=bool(bpe.get("end_of_word", False)),
            frontend=_build(FrontendConfig, tree.get("frontend")),
            model=dict(tree.get("model") or {}),
            train=_build(TrainConfig, {"seed": seed, **(tree.get("train") or {})}),
            beam=int(dec.get("beam", 8)),
            max_len=dec.get("max_len"),
            length_penalty=float(dec.get("length_penalty", 0.0)),
            units={k.upper(): v for k, v in units.items()} if units else None,
            train_manifest=train_m,
            test_manifest=test_m,
            toy=toy,
            hash=config_hash(tree),
        )

    def model_config(self, vocab_size: int, feat_dim: int) -> ModelConfig:
        return _build(ModelConfig, self.model, vocab_size=vocab_size, feat_dim=feat_dim)


# Data preparation ----------------------------------------------------------------


def load_features(
    manifest: Manifest,
    records: Sequence[Record] | None = None,
    archive: str | Path | None = None,
    frontend: FrontendConfig = FrontendConfig(),
    perturb: Sequence[float] = (),
) -> dict[str, np.ndarray]:
    """Feature matrices keyed by utterance id (perturbed copies included).

    Sources, in order: an explicit archive, the records' ``feature_ref``
    entries, or on-the-fly featurisation of their audio.
    """
    records = list(manifest if records is None else records)
    if archive is not None:
        mats = read_archive(archive)
        missing = [r.utt_id for r in records if r.utt_id not in mats]
        if missing:
            raise DataError(f"{archive}: no features for {missing[:3]}")
        return {k: np.asarray(m.frames, dtype=np.float32) for k, m in mats.items()}
    if records and all(r.feature_ref for r in records):
        cache: dict[Path, dict] = {}
        out = {}
        for r in records:
            path, _, key = r.feature_ref.partition("#")
            path = manifest.resolve(path)
            if path not in cache:
                cache[path] = read_archive(path)
            try:
                out[r.utt_id] = np.asarray(cache[path][key or r.utt_id].frames, dtype=np.float32)
            except KeyError:
                raise DataError(f"{r.feature_ref}: utterance not in archive") from None
        return out
    waves = [manifest.waveform(r) for r in records]
    return {m.utt_id: m.frames.astype(np.float32) for m in featurize(waves, frontend, perturb)}


def learn_table(records: Iterable[Record], alpha: int, end_of_word: bool = False) -> MergeTable:
    return learn_merges(count_words(r.transcript for r in records), alpha, end_of_word=end_of_word)


def vocab_for(records: Iterable[Record], table: MergeTable, languages: Sequence[str], scheme: Scheme | str) -> SymbolVocab:
    units = [u for r in records for u in encode_text(r.transcript, table)]
    return build_vocab(units, languages, scheme)


def make_examples(
    records: Iterable[Record],
    feats: Mapping[str, np.ndarray],
    table: MergeTable,
    vocab: SymbolVocab,
    scheme: Scheme | str,
    perturb: Sequence[float] = (),
) -> list[Example]:
    """One example per record and per speed-perturbed copy found in ``feats``."""
    out = []
    factors = [1.0, *[p for p in perturb if p != 1.0]]
    for r in records:
        ids = tag_sequence(encode_text(r.transcript, table), r.language, scheme, vocab).ids
        for factor in factors:
            key = perturbed_id(r.utt_id, factor)
            if key in feats:
                out.append(Example(key, feats[key], ids, r.language))
            elif factor == 1.0:
                raise DataError(f"no features for {r.utt_id!r}")
    return out


def decode_records(
    model: ASRTransformer,
    records: Iterable[Record],
    feats: Mapping[str, np.ndarray],
    vocab: SymbolVocab,
    scheme: Scheme | str,
    beam: int = 8,
    force_lang: str | None = None,
    max_len: int | None = None,
    length_penalty: float = 0.0,
) -> list[dict]:
    """Beam-decode records into hypothesis rows.

    Under scheme b2 the start symbol is ``force_lang`` when given and the
    record's own language otherwise.
    """
    scheme = Scheme.parse(scheme)
    rows = []
    for r in records:
        forced = (force_lang or r.language) if scheme is Scheme.B2 else force_lang
        best = beam_search(model, feats[r.utt_id], vocab, scheme, beam, max_len, forced, length_penalty)[0]
        rows.append(
            {
                "utt_id": r.utt_id,
                "text": best.text(),
                "log_prob": round(best.log_prob, 6),
                "predicted_language": best.predicted_language,
            }
        )
    return rows


def score_rows(records: Iterable[Record], rows: Iterable[Mapping], units=None) -> ScoreReport:
    refs = {r.utt_id: (r.language, r.transcript) for r in records}
    return score_corpus(refs, {row["utt_id"]: row["text"] for row in rows}, units)


# Runs ------------------------------------------------------------------------------


@dataclass
class SchemeResult:
    scheme: Scheme
    vocab_size: int
    num_subwords: int
    score: ScoreReport
    steps: int
    final_loss: float
    lid_accuracy: float | None


@dataclass
class PipelineResult:
    config: ExperimentConfig
    languages: list[str]
    results: list[SchemeResult]
    alpha: int


@dataclass
class Prepared:
    train: list[Record]
    test: list[Record]
    feats: dict[str, np.ndarray]
    languages: list[str]


def _stage(name: str):
    def wrap(fn):
        def run(*args, **kwargs):
            log.info("stage %s", name)
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (DataError, ArithmeticError, OSError, ValueError, KeyError) as exc:
                raise StageError(name, exc) from exc

        return run

    return wrap


@_stage("featurize")
def prepare_data(cfg: ExperimentConfig, work: Path) -> Prepared:
    if cfg.toy is not None:
        manifest = generate_toy_corpus(cfg.toy, work / "corpus")
        train_recs, test_recs = manifest.split("train").records, manifest.split("test").records
        train_man = test_man = manifest
    else:
        train_man, test_man = load_manifest(cfg.train_manifest), load_manifest(cfg.test_manifest)
        train_recs, test_recs = train_man.records, test_man.records
    perturb = cfg.frontend.perturb_factors
    feats = load_features(train_man, train_recs, frontend=cfg.frontend, perturb=perturb)
    test_feats = load_features(test_man, test_recs, frontend=cfg.frontend)
    overlap = set(feats) & set(test_feats)
    if overlap:
        raise DataError(f"train and test share utterance ids, e.g. {sorted(overlap)[:3]}")
    feats.update(test_feats)
    shift = cfg.frontend.shift_ms * cfg.frontend.downsample
    write_archive(work / "feats.ark", (FeatureMatrix(feats[k], shift, k) for k in sorted(feats)))
    languages = sorted({r.language for r in train_recs} | {r.language for r in test_recs})
    return Prepared(train_recs, test_recs, feats, languages)


@_stage("bpe-learn")
def _learn(cfg: ExperimentConfig, data: Prepared, work: Path, alpha: int) -> MergeTable:
    table = learn_table(data.train, alpha, cfg.end_of_word)
    save_merges(table, work / f"merges-a{alpha}.txt")
    return table


@_stage("vocab")
def _vocab(data: Prepared, table: MergeTable, scheme: Scheme, out: Path) -> SymbolVocab:
    vocab = vocab_for(data.train, table, data.languages, scheme)
    save_vocab(vocab, out / "vocab.txt")
    return vocab


@_stage("train")
def _train(cfg: ExperimentConfig, data: Prepared, table, vocab, scheme, out: Path):
    examples = make_examples(data.train, data.feats, table, vocab, scheme, cfg.frontend.perturb_factors)
    mcfg = cfg.model_config(vocab.size, examples[0].feats.shape[1])
    meta = {"scheme": scheme.value, "config_hash": cfg.hash}
    return train(examples, mcfg, cfg.train, vocab_hash=vocab.hash(), out_dir=out / "train", meta=meta)


@_stage("average")
def _average(cfg: ExperimentConfig, out: Path) -> Checkpoint:
    avg = average_checkpoints(last_checkpoints(out / "train", max(cfg.train.average_last, 1)))
    save_checkpoint(avg, out / "avg.bin")
    return avg


@_stage("decode")
def _decode(cfg: ExperimentConfig, data: Prepared, avg: Checkpoint, vocab, scheme, out: Path) -> list[dict]:
    model = avg.build()
    rows = decode_records(model, data.test, data.feats, vocab, scheme, cfg.beam, None, cfg.max_len, cfg.length_penalty)
    write_hypotheses(out / "hyps.jsonl", rows)
    return rows


@_stage("score")
def _score(cfg: ExperimentConfig, data: Prepared, rows) -> ScoreReport:
    return score_rows(data.test, rows, cfg.units)


def run_scheme(cfg: ExperimentConfig, data: Prepared, table: MergeTable, scheme: Scheme, out: Path) -> SchemeResult:
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    vocab = _vocab(data, table, scheme, out)
    result = _train(cfg, data, table, vocab, scheme, out)
    avg = _average(cfg, out)
    rows = _decode(cfg, data, avg, vocab, scheme, out)
    score = _score(cfg, data, rows)
    lid = None
    if scheme.tagged and scheme is not Scheme.B2:
        by_id = {r.utt_id: r.language for r in data.test}
        lid = sum(row["predicted_language"] == by_id[row["utt_id"]] for row in rows) / len(rows)
    return SchemeResult(scheme, vocab.size, vocab.num_subwords, score, result.steps, result.losses[-1], lid)


def run_pipeline(config: ExperimentConfig | Mapping, work_dir: str | Path) -> PipelineResult:
    """Run every configured scheme and write the report files into ``work_dir``."""
    from .report import write_pipeline_report

    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_tree(resolve_config(config))
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    data = prepare_data(cfg, work)
    table = _learn(cfg, data, work, cfg.alpha)
    results = [run_scheme(cfg, data, table, s, work / s.value) for s in cfg.schemes]
    res = PipelineResult(cfg, data.languages, results, cfg.alpha)
    write_pipeline_report(res, work)
    return res


@dataclass
class SweepRow:
    alpha: int
    vocab_size: int
    num_subwords: int
    score: ScoreReport


@dataclass
class SweepResult:
    config: ExperimentConfig
    scheme: Scheme
    languages: list[str]
    rows: list[SweepRow]


def sweep_alpha(config: ExperimentConfig | Mapping, alphas: Sequence[int], work_dir: str | Path) -> SweepResult:
    """One full run per merge budget, under the first configured scheme."""
    from .report import write_sweep_report

    alphas = [int(a) for a in alphas]
    if not alphas or len(set(alphas)) != len(alphas) or min(alphas) < 1:
        raise DataError("alphas must be distinct positive integers")
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_tree(resolve_config(config))
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    scheme = cfg.schemes[0]
    data = prepare_data(cfg, work)
    rows = []
    for alpha in alphas:
        table = _learn(cfg, data, work, alpha)
        res = run_scheme(cfg, data, table, scheme, work / f"alpha-{alpha}")
        rows.append(SweepRow(alpha, res.vocab_size, res.num_subwords, res.score))
    sweep = SweepResult(cfg, scheme, data.languages, rows)
    write_sweep_report(sweep, work)
    return sweep


def init_checkpoint(spec: str | None, model_cfg: ModelConfig, vocab: SymbolVocab, seed: int = 0) -> Checkpoint | None:
    """``--init`` handling: ``random``/None, or a checkpoint to continue or transfer from."""
    from .model import load_checkpoint

    if spec is None or spec == "random":
        return None
    src = load_checkpoint(spec)
    if src.config == model_cfg and src.vocab_hash == vocab.hash():
        return Checkpoint(src.config, src.params, src.vocab_hash, 0, src.meta)
    return transfer_init(src, vocab.size, seed=seed, target=model_cfg, vocab_hash=vocab.hash())
