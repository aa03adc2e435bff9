import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlasr.bpe import (
    MergeTable,
    apply_bpe,
    decode_units,
    encode_text,
    learn_merges,
    load_merges,
    save_merges,
    segment,
)
from mlasr.errors import DataError
from oracles import brute_force_merges, replay_in_order

words = st.text(alphabet="abcdeäß", min_size=1, max_size=8)
corpora = st.dictionaries(words, st.integers(1, 20), min_size=1, max_size=50)


def test_low_lower_example():
    table = learn_merges({"low": 5, "lower": 2}, 2)
    assert table.merges == (("l", "o"), ("lo", "w"))


def test_single_char_words_have_no_pairs():
    assert learn_merges({"a": 10}, 5).merges == ()


def test_zero_budget():
    assert learn_merges({"ab": 3}, 0).merges == ()


def test_stops_when_no_pair_repeats():
    table = learn_merges({"abc": 1}, 10)
    assert table.merges == ()
    assert learn_merges({"abc": 2}, 10).merges == (("a", "b"), ("ab", "c"))


@pytest.mark.parametrize(
    "counts, message",
    [({}, "empty corpus"), ({"a@@b": 1}, "reserved marker"), ({"": 2}, "empty word")],
)
def test_learn_errors(counts, message):
    with pytest.raises(DataError, match=message):
        learn_merges(counts, 3)


def test_apply_lowest():
    table = MergeTable((("l", "o"), ("lo", "w")), 2)
    assert apply_bpe("lowest", table) == ["low@@", "e@@", "s@@", "t"]


def test_apply_single_char():
    table = learn_merges({"low": 5, "lower": 2}, 2)
    assert apply_bpe("x", table) == ["x"]
    with pytest.raises(DataError):
        apply_bpe("", table)


def test_amazing_layout():
    table = MergeTable((("a", "m"), ("am", "a"), ("i", "n"), ("in", "g")), 4)
    assert encode_text("amazing", table) == ["ama@@", "z@@", "ing"]
    assert decode_units(["ama@@", "z@@", "ing"]) == "amazing"


def test_shared_subwords_across_languages():
    # Joint table over two "languages": the shared prefix becomes a shared unit.
    counts = {"universität": 3, "university": 3}
    table = learn_merges(counts, 8)
    de, en = encode_text("universität", table), encode_text("university", table)
    assert de[0] == en[0] == "universit@@"


def test_encode_edge_cases():
    empty = MergeTable((), 0)
    assert encode_text("", empty) == []
    assert encode_text("a b", empty) == ["a", "b"]


def test_decode_edge_cases():
    assert decode_units([]) == ""
    assert decode_units(["low@@", "e@@", "s@@", "t"]) == "lowest"
    with pytest.raises(DataError, match="dangling continuation"):
        decode_units(["low@@"])
    assert decode_units(["a", "low@@"], strict=False) == "a low"


def test_end_of_word_mode_distinguishes_final_symbols():
    table = learn_merges({"low": 5, "lower": 2}, 2, end_of_word=True)
    assert table.merges == (("l", "o"), ("lo", "w</w>"))
    assert apply_bpe("low", table) == ["low"]
    assert apply_bpe("lowest", table) == ["lo@@", "w@@", "e@@", "s@@", "t"]


@pytest.mark.parametrize("end_of_word", [False, True])
def test_oracle_equivalence_random(end_of_word):
    rng = random.Random(7)
    for _ in range(50):
        counts = {
            "".join(rng.choice("abcd") for _ in range(rng.randint(1, 8))): rng.randint(1, 9)
            for _ in range(rng.randint(1, 50))
        }
        alpha = rng.randint(0, 30)
        table = learn_merges(counts, alpha, end_of_word=end_of_word)
        assert list(table.merges) == brute_force_merges(counts, alpha, end_of_word)


@settings(max_examples=100, deadline=None)
@given(corpora, st.integers(0, 30))
def test_apply_matches_in_order_replay(counts, alpha):
    table = learn_merges(counts, alpha)
    for word in counts:
        assert list(segment(word, table)) == replay_in_order(word, table.merges)


@settings(max_examples=100, deadline=None)
@given(corpora, st.integers(0, 30), st.lists(words, max_size=10))
def test_round_trip(counts, alpha, sentence_words):
    table = learn_merges(counts, alpha)
    sentence = " ".join(sentence_words)
    units = encode_text(sentence, table)
    assert decode_units(units) == sentence
    for unit in units[:-1]:
        assert unit != "@@"


@settings(max_examples=100, deadline=None)
@given(corpora, st.integers(0, 30))
def test_inventory_size_identity(counts, alpha):
    table = learn_merges(counts, alpha)
    chars = {c for w in counts for c in w}
    assert len(table.inventory()) == len(chars) + len(table.merges)


@settings(max_examples=50, deadline=None)
@given(counts=corpora, alpha=st.integers(0, 30))
def test_learning_is_deterministic(counts, alpha, tmp_path_factory):
    a = learn_merges(counts, alpha)
    b = learn_merges(dict(reversed(list(counts.items()))), alpha)
    assert a.merges == b.merges
    d = tmp_path_factory.mktemp("m")
    save_merges(a, d / "a.txt")
    save_merges(b, d / "b.txt")
    assert (d / "a.txt").read_bytes() == (d / "b.txt").read_bytes()


def test_merge_file_round_trip(tmp_path):
    table = learn_merges({"universität": 3, "university": 3, "amazing": 2}, 12)
    path = tmp_path / "merges.txt"
    save_merges(table, path)
    text = path.read_text(encoding="utf-8")
    assert text.startswith("#bpe-v1 alpha=12\n")
    loaded = load_merges(path)
    assert loaded.merges == table.merges
    assert loaded.num_merges == 12
    assert encode_text("universität amazing", loaded) == encode_text(
        "universität amazing", table
    )


def test_merge_file_bad_header(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("l o\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        load_merges(path)
