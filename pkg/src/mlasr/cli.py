"""Command-line entry point: ``mlasr <subcommand> ...``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _tree(args) -> dict:
    from .pipeline import load_config_file, resolve_config

    base = load_config_file(args.config) if getattr(args, "config", None) else {}
    return resolve_config(base, getattr(args, "set", None) or [])


def _experiment(args):
    from .pipeline import ExperimentConfig

    return ExperimentConfig.from_tree(_tree(args))


# Subcommands ---------------------------------------------------------------------


def cmd_bpe_learn(args) -> int:
    from .bpe import count_words, learn_merges, save_merges
    from .corpus import load_manifest

    path = Path(args.input)
    if path.suffix == ".jsonl":
        lines = [r.transcript for r in load_manifest(path)]
    else:
        lines = path.read_text(encoding="utf-8").splitlines()
    table = learn_merges(count_words(lines), args.alpha, end_of_word=args.eow)
    save_merges(table, args.merges)
    print(f"learned {len(table.merges)} merges ({len(table.inventory())} units) -> {args.merges}")
    return EXIT_OK


def cmd_bpe_apply(args) -> int:
    from .bpe import encode_text, load_merges

    table = load_merges(args.merges)
    for line in sys.stdin:
        sys.stdout.write(" ".join(encode_text(line.strip(), table)) + "\n")
    return EXIT_OK


def cmd_featurize(args) -> int:
    from .corpus import load_manifest
    from .frontend import featurize, write_archive
    from .pipeline import ExperimentConfig

    front = ExperimentConfig.from_tree(_tree(args)).frontend
    manifest = load_manifest(args.manifest)
    waves = [manifest.waveform(r) for r in manifest]
    mats = featurize(waves, front, args.perturb or ())
    write_archive(args.out, mats)
    print(f"{len(mats)} feature matrices (dim {mats[0].dim}) -> {args.out}")
    return EXIT_OK


def cmd_vocab(args) -> int:
    from .bpe import load_merges
    from .corpus import load_manifest
    from .lexicon import save_vocab, vocab_accounting
    from .pipeline import vocab_for

    manifest = load_manifest(args.manifest)
    langs = args.languages.split(",") if args.languages else manifest.languages
    vocab = vocab_for(manifest, load_merges(args.merges), langs, args.scheme)
    save_vocab(vocab, args.out)
    acct = vocab_accounting(vocab.num_subwords, len(langs), args.scheme)
    print(json.dumps({"out": str(args.out), **acct}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    from .bpe import load_merges
    from .corpus import load_manifest
    from .lexicon import Scheme, load_vocab
    from .pipeline import init_checkpoint, load_features, make_examples
    from .training import train

    cfg = _experiment(args)
    scheme = Scheme.parse(args.scheme)
    vocab = load_vocab(args.vocab)
    if vocab.scheme is not scheme:
        raise UsageError(f"vocab was built for scheme {vocab.scheme.value}, not {scheme.value}")
    table = load_merges(args.merges)
    manifest = load_manifest(args.manifest, require_transcripts=True)
    perturb = cfg.frontend.perturb_factors if args.features is None else ()
    feats = load_features(manifest, archive=args.features, frontend=cfg.frontend, perturb=perturb)
    examples = make_examples(manifest, feats, table, vocab, scheme, cfg.frontend.perturb_factors)
    mcfg = cfg.model_config(vocab.size, examples[0].feats.shape[1])
    init = init_checkpoint(args.init, mcfg, vocab, seed=cfg.seed)
    meta = {"scheme": scheme.value, "config_hash": cfg.hash, "seed": cfg.seed}
    res = train(examples, mcfg, cfg.train, vocab_hash=vocab.hash(), out_dir=args.out_dir, init=init, meta=meta)
    print(f"{res.steps} steps, final loss {res.losses[-1]:.4f}, {len(res.checkpoints)} checkpoints in {args.out_dir}")
    return EXIT_OK


def cmd_average(args) -> int:
    from .model import save_checkpoint
    from .training import average_checkpoints, last_checkpoints

    if args.ckpts:
        paths = [Path(p) for p in args.ckpts][-args.last:]
    elif args.dir:
        paths = last_checkpoints(args.dir, args.last)
    else:
        raise UsageError("give --dir or checkpoint paths")
    avg = average_checkpoints(paths)
    save_checkpoint(avg, args.out)
    print(f"averaged {len(paths)} checkpoints (steps {avg.meta['averaged_steps']}) -> {args.out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    from .corpus import load_manifest
    from .decode import write_hypotheses
    from .errors import DataError
    from .lexicon import Scheme, load_vocab
    from .model import load_checkpoint
    from .pipeline import ExperimentConfig, decode_records, load_features

    scheme = Scheme.parse(args.scheme)
    ckpt = load_checkpoint(args.ckpt)
    trained = ckpt.meta.get("scheme")
    if trained is not None and trained != scheme.value:
        raise UsageError(f"checkpoint was trained with scheme {trained}, not {scheme.value}")
    vocab = load_vocab(args.vocab)
    if ckpt.vocab_hash and ckpt.vocab_hash != vocab.hash():
        raise DataError("checkpoint and vocabulary do not match")
    if args.force_lang is not None and scheme is not Scheme.B2:
        raise UsageError("--force-lang only applies to scheme b2")
    front = ExperimentConfig.from_tree(_tree(args)).frontend
    manifest = load_manifest(args.manifest)
    feats = load_features(manifest, archive=args.features, frontend=front)
    rows = decode_records(ckpt.build(), manifest, feats, vocab, scheme, args.beam, args.force_lang, args.max_len)
    write_hypotheses(args.out, rows)
    print(f"{len(rows)} hypotheses -> {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    from .corpus import load_manifest
    from .decode import parse_units, read_hypotheses, score_corpus

    manifest = load_manifest(args.refs)
    refs = {r.utt_id: (r.language, r.transcript) for r in manifest}
    hyps = {k: row["text"] for k, row in read_hypotheses(args.hyps).items()}
    report = score_corpus(refs, hyps, parse_units(args.units))
    print("language,unit,rate,S,I,D,ref_len,utterances")
    for lang, s in sorted(report.per_language.items()):
        print(f"{lang},{s.unit},{s.rate:.6f},{s.substitutions},{s.insertions},{s.deletions},{s.ref_len},{s.utterances}")
    print(f"average,,{report.average:.6f},,,,,")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_toygen(args) -> int:
    from .corpus import ToySpec, generate_toy_corpus, summary_table
    from .pipeline import _build

    tree = _tree(args)
    seed = args.seed if args.seed is not None else tree.get("seed", 0)
    spec = _build(ToySpec, {"seed": seed, **((tree.get("data") or {}).get("toy") or {})})
    manifest = generate_toy_corpus(spec, args.out)
    print(summary_table(manifest))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    res = run_pipeline(_experiment(args), args.out_dir)
    print((Path(args.out_dir) / "report.md").read_text(encoding="utf-8"))
    return EXIT_OK if res.results else EXIT_DATA


def cmd_sweep(args) -> int:
    from .pipeline import sweep_alpha

    sweep_alpha(_experiment(args), args.alphas, args.out_dir)
    print((Path(args.out_dir) / "sweep.md").read_text(encoding="utf-8"))
    return EXIT_OK


# Parser --------------------------------------------------------------------------


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlasr", description="Multilingual sub-word sequence-to-sequence ASR toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("bpe-learn", help="learn BPE merges")
    p.add_argument("--input", required=True, help="text file (one sentence per line) or manifest .jsonl")
    p.add_argument("--merges", required=True, help="output merge file")
    p.add_argument("--alpha", type=int, required=True, help="number of merge operations")
    p.add_argument("--eow", action="store_true", help="mark word-final symbols while learning")
    p.set_defaults(fn=cmd_bpe_learn)

    p = sub.add_parser("bpe-apply", help="segment stdin to stdout")
    p.add_argument("--merges", required=True)
    p.set_defaults(fn=cmd_bpe_apply)

    p = sub.add_parser("featurize", help="log-Mel features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--perturb", type=_floats, default=None, help="speed factors, e.g. 0.9,1.1")
    _config_args(p)
    p.set_defaults(fn=cmd_featurize)

    p = sub.add_parser("vocab", help="build a symbol vocabulary")
    p.add_argument("--manifest", required=True)
    p.add_argument("--merges", required=True)
    p.add_argument("--scheme", required=True, choices=["plain", "b", "e", "b2"])
    p.add_argument("--languages", help="comma-separated language codes (default: from manifest)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_vocab)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--merges", required=True)
    p.add_argument("--scheme", required=True, choices=["plain", "b", "e", "b2"])
    p.add_argument("--features", help="feature archive (default: feature_ref or on-the-fly)")
    p.add_argument("--init", default="random", help="'random' or a checkpoint to continue/transfer from")
    p.add_argument("--out-dir", required=True)
    _config_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("average", help="average the last K checkpoints")
    p.add_argument("ckpts", nargs="*", help="checkpoint files (alternative to --dir)")
    p.add_argument("--dir", help="training output directory")
    p.add_argument("--last", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_average)

    p = sub.add_parser("decode", help="beam-search decode a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scheme", required=True, choices=["plain", "b", "e", "b2"])
    p.add_argument("--features")
    p.add_argument("--force-lang", help="start symbol language under b2 (default: each record's language)")
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--out", required=True)
    _config_args(p)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("score", help="per-language error rates")
    p.add_argument("--refs", required=True, help="reference manifest")
    p.add_argument("--hyps", required=True, help="hypothesis JSONL")
    p.add_argument("--units", help="per-language units, e.g. ma=char,ja=char")
    p.add_argument("--out", help="write the score report as JSON")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("toygen", help="generate the synthetic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _config_args(p)
    p.set_defaults(fn=cmd_toygen)

    p = sub.add_parser("pipeline", help="full run for every configured scheme, with report")
    p.add_argument("--out-dir", required=True)
    _config_args(p)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("sweep", help="merge-operation sweep, with report")
    p.add_argument("--alphas", type=_ints, required=True, help="e.g. 10,20,40")
    p.add_argument("--out-dir", required=True)
    _config_args(p)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .errors import DataError, NumericalError
    from .pipeline import StageError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"mlasr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"mlasr {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, ArithmeticError) else EXIT_DATA
    except NumericalError as exc:
        print(f"mlasr {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError) as exc:
        print(f"mlasr {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
