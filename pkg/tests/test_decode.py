import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mlasr.decode import (
    beam_search,
    default_max_len,
    edit_distance,
    error_rate,
    greedy_decode,
    parse_units,
    read_hypotheses,
    score_corpus,
    start_token,
    tokenize,
    write_hypotheses,
)
from mlasr.errors import DataError
from mlasr.lexicon import EOS_ID, build_vocab
from mlasr.model import ASRTransformer, ModelConfig
from oracles import alignment_counts

UNITS = ["a@@", "b", "c", "d@@", "e"]


def random_model(vocab, seed):
    torch.manual_seed(seed)
    cfg = ModelConfig(num_layers=1, d_model=16, num_heads=2, d_k=8, d_v=8, d_ff=32, vocab_size=vocab.size, feat_dim=4)
    return ASRTransformer(cfg).eval()


def feats(seed, t=6):
    return np.random.default_rng(seed).standard_normal((t, 4)).astype(np.float32)


# Edit distance and scoring ------------------------------------------------------------


def test_edit_distance_examples():
    assert edit_distance("by any means".split(), "by any beans".split()) == (1, 0, 0)
    assert error_rate("by any means", "by any beans") == pytest.approx(1 / 3)
    assert edit_distance([], []) == (0, 0, 0)
    assert edit_distance([], list("ab")) == (0, 2, 0)
    assert edit_distance(list("abc"), []) == (0, 0, 3)
    assert edit_distance(list("abc"), list("abc")) == (0, 0, 0)


def test_edit_distance_matches_oracle():
    rng = random.Random(5)
    for _ in range(1000):
        ref = [rng.choice("xyz") for _ in range(rng.randint(0, 8))]
        hyp = [rng.choice("xyz") for _ in range(rng.randint(0, 8))]
        assert edit_distance(ref, hyp) == alignment_counts(ref, hyp)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abc"), max_size=10), st.lists(st.sampled_from("abc"), max_size=10))
def test_edit_distance_swap_symmetry(ref, hyp):
    s, i, d = edit_distance(ref, hyp)
    s2, i2, d2 = edit_distance(hyp, ref)
    assert (s, i, d) == (s2, d2, i2)
    assert i - d == len(hyp) - len(ref)


def test_tokenize_units():
    assert tokenize("ab cd", "word") == ["ab", "cd"]
    assert tokenize("ab cd", "char") == ["a", "b", "c", "d"]
    with pytest.raises(DataError):
        tokenize("x", "phone")


def test_score_corpus_per_language():
    refs = {"u1": ("EN", "a b c"), "u2": ("EN", "a b"), "u3": ("MA", "你好吗")}
    hyps = {"u1": "a x c", "u2": "a b", "u3": "你好"}
    report = score_corpus(refs, hyps)
    en, ma = report.per_language["EN"], report.per_language["MA"]
    assert (en.unit, en.errors, en.ref_len, en.rate) == ("word", 1, 5, pytest.approx(0.2))
    assert (ma.unit, ma.deletions, ma.ref_len) == ("char", 1, 3)
    assert report.average == pytest.approx((0.2 + 1 / 3) / 2)
    assert report.pooled == pytest.approx(2 / 8)
    # Per-language rates equal a recomputation on the split corpora.
    only_en = score_corpus({k: v for k, v in refs.items() if v[0] == "EN"}, {"u1": "a x c", "u2": "a b"})
    assert only_en.per_language["EN"].rate == en.rate


def test_score_all_perfect_and_mismatched_ids():
    refs = {"u1": ("GE", "x y"), "u2": ("EN", "z")}
    report = score_corpus(refs, {"u1": "x y", "u2": "z"})
    assert report.average == 0.0 and report.pooled == 0.0
    with pytest.raises(DataError):
        score_corpus(refs, {"u1": "x y"})


def test_parse_units():
    assert parse_units("ma=char,ja=char") == {"MA": "char", "JA": "char"}
    assert parse_units(None) is None
    with pytest.raises(DataError):
        parse_units("ma=syllable")
    report = score_corpus({"u": ("EN", "ab")}, {"u": "ac"}, parse_units("en=char"))
    assert report.per_language["EN"].rate == 0.5


def test_hypothesis_file_round_trip(tmp_path):
    rows = [{"utt_id": "u1", "text": "ab", "log_prob": -1.5, "predicted_language": "EN"}]
    write_hypotheses(tmp_path / "h.jsonl", rows)
    assert read_hypotheses(tmp_path / "h.jsonl") == {"u1": rows[0]}
    (tmp_path / "bad.jsonl").write_text("{oops\n")
    with pytest.raises(DataError, match=":1:"):
        read_hypotheses(tmp_path / "bad.jsonl")


# Beam search ----------------------------------------------------------------------------


def test_start_token_rules():
    vocab = build_vocab(UNITS, ["EN", "GE"], "b2")
    assert start_token(vocab, "b2", "GE") == vocab.lang_id("GE")
    with pytest.raises(DataError):
        start_token(vocab, "b2", None)
    with pytest.raises(DataError):
        start_token(vocab, "b2", "JA")
    plain = build_vocab(UNITS, [], "plain")
    with pytest.raises(DataError):
        start_token(plain, "plain", "EN")


def test_default_max_len():
    assert default_max_len(10) == 12
    assert default_max_len(10_000) == 512


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_equals_greedy(seed):
    vocab = build_vocab(UNITS, ["EN", "GE"], "b")
    model = random_model(vocab, seed)
    x = feats(seed)
    g = greedy_decode(model, x, vocab, "b", max_len=8)
    b = beam_search(model, x, vocab, "b", beam=1, max_len=8)[0]
    assert b.ids == g.ids
    assert b.log_prob == pytest.approx(g.log_prob, abs=1e-9)


def test_beam_results_sorted_and_well_formed():
    vocab = build_vocab(UNITS, ["EN", "GE"], "b")
    model = random_model(vocab, 7)
    hyps = beam_search(model, feats(7), vocab, "b", beam=4, max_len=8)
    assert 1 <= len(hyps) <= 4
    scores = [h.log_prob for h in hyps]
    assert scores == sorted(scores, reverse=True)
    for h in hyps:
        assert h.ids[0] == 2 and len(h.ids) <= 8
        assert h.ids[-1] == EOS_ID or len(h.ids) == 8


def test_beam_score_is_sum_of_token_log_probs():
    vocab = build_vocab(UNITS, ["EN"], "plain")
    model = random_model(vocab, 8)
    x = feats(8)
    best = beam_search(model, x, vocab, "plain", beam=3, max_len=6)[0]
    with torch.no_grad():
        mem, keys = model.encode(torch.from_numpy(x)[None])
        logits = model.decode(mem, keys, torch.tensor([best.ids[:-1]]))[0]
        logp = torch.log_softmax(logits.double(), -1)
        total = sum(float(logp[t, tok]) for t, tok in enumerate(best.ids[1:]))
    assert best.log_prob == pytest.approx(total, abs=1e-5)


def test_wider_beam_never_scores_worse_on_random_models():
    # Not a theorem for pruned search, only an empirical check on these models.
    worse = 0
    for seed in range(20):
        vocab = build_vocab(UNITS, ["EN", "GE"], "b")
        model = random_model(vocab, 100 + seed)
        x = feats(seed)
        scores = [beam_search(model, x, vocab, "b", beam=k, max_len=7)[0].log_prob for k in (1, 2, 4, 8)]
        worse += any(b < a - 1e-9 for a, b in zip(scores, scores[1:]))
    assert worse == 0


def test_b2_forced_start_and_language():
    vocab = build_vocab(UNITS, ["EN", "GE"], "b2")
    model = random_model(vocab, 9)
    for lang in ("EN", "GE"):
        for h in beam_search(model, feats(9), vocab, "b2", beam=3, max_len=7, forced_language=lang):
            assert h.ids[0] == vocab.lang_id(lang)
            assert h.predicted_language == lang


def test_length_penalty_flag_changes_ranking_only():
    vocab = build_vocab(UNITS, ["EN"], "plain")
    model = random_model(vocab, 10)
    plain = beam_search(model, feats(10), vocab, "plain", beam=4, max_len=8)
    again = beam_search(model, feats(10), vocab, "plain", beam=4, max_len=8)
    assert [h.ids for h in plain] == [h.ids for h in again]
    normed = beam_search(model, feats(10), vocab, "plain", beam=4, max_len=8, length_penalty=1.0)
    assert all(h.ids[0] == 2 for h in normed)
    with pytest.raises(ValueError):
        beam_search(model, feats(10), vocab, "plain", beam=0)


def test_pad_and_start_are_never_emitted():
    vocab = build_vocab(UNITS, ["EN"], "plain")
    model = random_model(vocab, 11)
    with torch.no_grad():
        model.out.bias[0] = 50.0  # make PAD the most likely next token
        model.out.bias[2] = 49.0
    for h in beam_search(model, feats(11), vocab, "plain", beam=4, max_len=6):
        assert 0 not in h.ids and 2 not in h.ids[1:]
    g = greedy_decode(model, feats(11), vocab, "plain", max_len=6)
    assert 0 not in g.ids and 2 not in g.ids[1:]
