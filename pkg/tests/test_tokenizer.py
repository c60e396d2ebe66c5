import random
import re

import pytest
from hypothesis import given, settings, strategies as st

from kbcmlm.synthetic import generate_world
from kbcmlm.tokenizer import (
    MASK_ID,
    NUM_SPECIALS,
    UNK_ID,
    Kind,
    TokenSequence,
    add_entity_atoms,
    build_base_vocab,
    detokenize,
    load_vocab,
    save_vocab,
    tokenize,
)


def brute_subtokens(word, vocab):
    """Independent greedy longest-match over the base surfaces."""
    base = {vocab.surface(i): i for i in range(NUM_SPECIALS, vocab.base_size)}
    out, i = [], 0
    while i < len(word):
        best = None
        for surface, tid in base.items():
            if word.startswith(surface, i) and (best is None or len(surface) > len(best[0])):
                best = (surface, tid)
        if best is None:
            out.append(UNK_ID)
            i += 1
        else:
            out.append(best[1])
            i += len(best[0])
    return out


class TestBuildBaseVocab:
    def test_hand_run_merge(self):
        # words ab, ab, b: pair (a, b) occurs twice -> "ab" is the one merge
        v = build_base_vocab(["ab ab b"], 8)
        assert [e.surface for e in v.entries[NUM_SPECIALS:]] == ["a", "b", "ab"]
        assert all(e.kind is Kind.BASE for e in v.entries)

    def test_single_character(self):
        v = build_base_vocab(["x"], 6)
        assert [e.surface for e in v.entries] == ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]", "x"]

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="empty corpus"):
            build_base_vocab([], 10)

    def test_target_below_alphabet(self):
        with pytest.raises(ValueError):
            build_base_vocab(["abc"], 7)

    def test_lexicographic_tie_break(self):
        # (a,b) and (c,d) both occur once; (a,b) sorts first
        v = build_base_vocab(["ab cd"], 10)
        assert v.surface(NUM_SPECIALS + 4) == "ab"

    def test_deterministic(self):
        corpus = generate_world(0, n_sentences=200).corpus
        assert build_base_vocab(corpus, 150) == build_base_vocab(corpus, 150)


class TestTokenize:
    def test_full_atom_match(self, fixture_vocab):
        seq = tokenize("United States of America", fixture_vocab, True)
        assert seq.ids == (fixture_vocab.id_of("United States of America"),)

    def test_partial_surface_uses_shorter_atom(self, fixture_vocab):
        seq = tokenize("United States of", fixture_vocab, True)
        assert seq.ids[0] == fixture_vocab.id_of("United States")

    def test_no_atom_without_full_match(self, base_vocab, fixture_vocab):
        vocab = add_entity_atoms(base_vocab, [("United States of America", "Country", None)]).vocab
        seq = tokenize("United States", vocab, True)
        expected = brute_subtokens("United", vocab) + brute_subtokens("States", vocab)
        assert list(seq.ids) == expected
        assert not any(vocab.is_atom(t) for t in seq.ids)

    def test_mask_sentence(self, base_vocab):
        seq = tokenize("Canada borders [MASK]", base_vocab, True)
        expected = brute_subtokens("Canada", base_vocab) + brute_subtokens("borders", base_vocab) + [MASK_ID]
        assert list(seq.ids) == expected
        assert seq.mask_positions == [len(expected) - 1]

    def test_longest_match_wins(self, fixture_vocab):
        seq = tokenize("the United States of America and the United States", fixture_vocab)
        atoms = [fixture_vocab.surface(t) for t in seq.ids if fixture_vocab.is_atom(t)]
        assert atoms == ["United States of America", "United States"]

    def test_whole_word_and_case_sensitive(self, fixture_vocab):
        assert not any(fixture_vocab.is_atom(t) for t in tokenize("Canadas canada", fixture_vocab).ids)
        seq = tokenize("Canada.", fixture_vocab)
        assert seq.ids[0] == fixture_vocab.id_of("Canada")

    def test_entity_matching_off(self, fixture_vocab):
        seq = tokenize("Canada", fixture_vocab, entity_matching=False)
        assert list(seq.ids) == brute_subtokens("Canada", fixture_vocab)

    def test_unknown_characters(self, fixture_vocab):
        seq = tokenize("Canada éé", fixture_vocab)
        assert seq.ids[-2:] == (UNK_ID, UNK_ID)


class TestDetokenize:
    def test_single_atom(self, fixture_vocab):
        gid = fixture_vocab.id_of("Greenland")
        assert detokenize(TokenSequence((gid,)), fixture_vocab) == "Greenland"

    def test_round_trip(self, fixture_vocab):
        text = "Canada borders Greenland"
        assert detokenize(tokenize(text, fixture_vocab), fixture_vocab) == text

    def test_out_of_range(self, fixture_vocab):
        with pytest.raises(ValueError, match="id out of range"):
            detokenize(TokenSequence((len(fixture_vocab),)), fixture_vocab)

    def test_round_trip_fixture_corpus(self):
        rng = random.Random(7)
        world = generate_world(1, n_sentences=400)
        sentences = rng.sample(world.corpus, 150)
        words = ["alpha", "beta", "gamma", "delta", "(x)", "42", "x-ray", "end."]
        sentences += [
            "  ".join(rng.choice(words) for _ in range(rng.randint(1, 8))) for _ in range(50)
        ]
        assert len(sentences) == 200
        base = build_base_vocab(sentences, 200)
        vocab = add_entity_atoms(base, [(e.surface, e.entity_type, None) for e in world.entities]).vocab
        for s in sentences:
            for matching in (True, False):
                out = detokenize(tokenize(s, vocab, matching), vocab)
                assert out == re.sub(r"\s+", " ", s).strip()


class TestAddEntityAtoms:
    def test_append_only(self, base_vocab):
        res = add_entity_atoms(base_vocab, [("United States of America", "Country", "Q30")])
        assert res.added == 1
        new = res.vocab
        assert new.entries[: len(base_vocab)] == base_vocab.entries
        atom = new.id_of("United States of America")
        assert atom == len(base_vocab)
        assert len(new.constituents(atom)) >= 4
        assert all(not new.is_atom(c) for c in new.constituents(atom))

    def test_duplicate_skipped(self, base_vocab):
        res = add_entity_atoms(base_vocab, [("Canada", "Country", None), ("Canada", "Country", None)])
        assert res.added == 1

    def test_empty_rejected(self, base_vocab):
        res = add_entity_atoms(base_vocab, [("", "Country", None)])
        assert res.added == 0 and res.rejected == [""]

    def test_all_unknown_rejected(self, base_vocab):
        res = add_entity_atoms(base_vocab, [("éè", "Country", None)])
        assert res.rejected == ["éè"]

    def test_file_round_trip(self, fixture_vocab, tmp_path):
        save_vocab(fixture_vocab, tmp_path / "vocab.jsonl")
        assert load_vocab(tmp_path / "vocab.jsonl") == fixture_vocab
        first = (tmp_path / "vocab.jsonl").read_text().splitlines()[0]
        assert '"kind": "base"' in first


names = st.text(alphabet="abcdefgh ", min_size=1, max_size=12).map(str.strip).filter(bool)


@settings(max_examples=50, deadline=None)
@given(st.lists(names, max_size=6))
def test_id_stability(entity_names):
    base = build_base_vocab(["abc def gh", "had bag"], 25)
    new = add_entity_atoms(base, [(n, "T", None) for n in entity_names]).vocab
    for i in range(len(base)):
        assert new.surface(i) == base.surface(i)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["abc", "abc def", "gh", "had", "bag", "x", "."]), max_size=8))
def test_atoms_never_split(parts):
    base = build_base_vocab(["abc def gh", "had bag x ."], 25)
    vocab = add_entity_atoms(base, [("abc def", "T", None), ("had bag", "T", None)]).vocab
    text = " ".join(parts)
    seq = tokenize(text, vocab)
    assert tokenize(text, vocab) == seq
    n_atoms = sum(vocab.is_atom(t) for t in seq.ids)
    # each literal "abc def" part yields one atom (whole-word, leftmost-longest)
    assert n_atoms >= parts.count("abc def")
