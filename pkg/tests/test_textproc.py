import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhsum.textproc import (
    CLS_ID, EOS_ID, BOS_ID, SEP_ID, END_OF_WORD, UNK, Vocab, decode, encode, prepare_document, prepare_summary,
    train_bpe,
)

CORPUS = ["the cat sat on the mat", "a cat and a hat", "the hat sat"]


class TestTrainBPE:
    def test_first_merge_is_most_frequent_pair(self):
        vocab = train_bpe(["aaab"], 20)
        assert vocab.merges[0] == ("a", "a")

    def test_ties_break_lexicographically(self):
        vocab = train_bpe(["ab cd"], 20)
        assert vocab.merges[0] == ("a", "b")

    def test_target_below_base_raises(self):
        with pytest.raises(ValueError):
            train_bpe(CORPUS, 5)

    def test_stops_when_no_pairs_remain(self):
        vocab = train_bpe(["ab"], 1000)
        assert len(vocab) < 1000
        assert vocab.segment("ab") == ("ab" + END_OF_WORD,)

    def test_deterministic(self):
        assert train_bpe(CORPUS, 40).to_text() == train_bpe(list(CORPUS), 40).to_text()

    def test_size_matches_target(self):
        assert len(train_bpe(CORPUS, 30)) == 30


class TestRoundTrip:
    @settings(max_examples=1000, deadline=None)
    @given(st.lists(st.text(alphabet="abcdefgh", min_size=1, max_size=9), min_size=1, max_size=8))
    def test_decode_inverts_encode(self, words):
        vocab = _VOCAB
        text = " ".join(words)
        assert decode(encode(text, vocab), vocab) == text

    def test_unknown_characters_map_to_unk(self):
        ids = encode("aZ", _VOCAB).ids
        assert _VOCAB.index[UNK] in ids.tolist()

    def test_decode_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            decode([len(_VOCAB)], _VOCAB)

    def test_vocab_text_round_trip(self, tmp_path):
        _VOCAB.save(tmp_path / "v.txt")
        assert Vocab.load(tmp_path / "v.txt") == _VOCAB


_VOCAB = train_bpe(["abc abd bcd efgh gha"] * 3 + ["a b c d e f g h"], 40)


class TestDocumentPrep:
    def test_sentence_markers(self):
        vocab = train_bpe(CORPUS, 40)
        seq = prepare_document(["the cat sat", "a hat"], vocab)
        ids = seq.ids
        assert len(seq.sentence_starts) == 2
        for s in seq.sentence_starts:
            assert ids[s] == CLS_ID
        assert ids[-1] == SEP_ID
        assert (ids == CLS_ID).sum() == (ids == SEP_ID).sum() == 2
        np.testing.assert_array_equal(seq.structural_mask, np.isin(ids, (CLS_ID, SEP_ID)))

    def test_empty_document_raises(self):
        with pytest.raises(ValueError):
            prepare_document([], train_bpe(CORPUS, 40))

    def test_summary_framing(self):
        vocab = train_bpe(CORPUS, 40)
        ids = prepare_summary(["the cat", "sat"], vocab)
        assert ids[0] == BOS_ID and ids[-1] == EOS_ID
        assert decode(ids, vocab) == "the cat sat"
