"""Byte-level BPE: training determinism, lossless roundtrip, persistence."""

import json
import random

import pytest

from moelab.errors import FormatError
from moelab.tokenizer import BOS_ID, EOS_ID, PAD_ID, Tokenizer

LOREM = ("the quick brown fox jumps over the lazy dog while the lazy dog "
         "sleeps in the warm sun and the quick fox runs through the field ") * 8


def test_first_merge_on_repeated_byte():
    # hand-simulated BPE: "aaaaaaaa" has only the pair ('a','a'), so the one
    # merge allowed by vocab_size=260 must be (97, 97)
    tok = Tokenizer.train(["aaaaaaaa"], vocab_size=260, seed=0)
    assert tok.merges == [(97, 97)]
    assert tok.vocab[259] == b"aa"


def test_vocab_size_too_small_rejected():
    with pytest.raises(ValueError):
        Tokenizer.train(["abc"], vocab_size=255, seed=0)
    with pytest.raises(ValueError):
        Tokenizer.train(["abc"], vocab_size=258, seed=0)


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        Tokenizer.train([], vocab_size=300, seed=0)
    with pytest.raises(ValueError):
        Tokenizer.train(["", ""], vocab_size=300, seed=0)


def test_training_is_deterministic():
    corpus = ["abab abab", "banana band", "ababab"]
    a = Tokenizer.train(corpus, vocab_size=300, seed=0)
    b = Tokenizer.train(list(corpus), vocab_size=300, seed=9)
    assert a.merges == b.merges
    assert a.vocab == b.vocab


def test_merge_count_bounded_by_corpus():
    tok = Tokenizer.train(["ab"], vocab_size=400, seed=0)
    # one possible merge ('a','b'), then pairs are exhausted
    assert len(tok.merges) == 1
    assert tok.vocab_size == 260


def test_encode_empty_and_merged_pair():
    tok = Tokenizer.train(["aaaaaaaa"], vocab_size=260, seed=0)
    assert tok.encode("") == []
    assert tok.encode("aa") == [259]
    assert tok.encode("aaa") in ([259, 97], [97, 259])
    assert tok.encode("b") == [98]


def test_special_ids_fixed():
    tok = Tokenizer()
    assert (PAD_ID, BOS_ID, EOS_ID) == (256, 257, 258)
    assert tok.specials == {"pad": 256, "bos": 257, "eos": 258}


def test_roundtrip_random_unicode():
    tok = Tokenizer.train([LOREM], vocab_size=320, seed=0)
    rnd = random.Random(1234)
    for _ in range(60):
        n = rnd.randrange(0, 40)
        s = "".join(chr(rnd.choice([rnd.randrange(32, 0x250),
                                    rnd.randrange(0x3B1, 0x2000),
                                    rnd.randrange(0x4E00, 0x9FFF)]))
                    for _ in range(n))
        assert tok.decode(tok.encode(s)) == s


def test_roundtrip_on_training_like_text():
    tok = Tokenizer.train([LOREM], vocab_size=400, seed=0)
    assert tok.decode(tok.encode(LOREM)) == LOREM


def test_compression_no_longer_than_bytes():
    tok = Tokenizer.train([LOREM], vocab_size=400, seed=0)
    sample = "the quick brown fox jumps over the lazy dog"
    assert len(tok.encode(sample)) <= len(sample.encode("utf-8"))
    assert len(tok.encode(sample)) < len(sample.encode("utf-8"))  # merges exist


def test_decode_rejects_out_of_range():
    tok = Tokenizer.train(["abc"], vocab_size=260, seed=0)
    assert tok.decode([]) == ""
    with pytest.raises(ValueError):
        tok.decode([tok.vocab_size])


def test_all_byte_tokens_present():
    tok = Tokenizer.train(["xy"], vocab_size=300, seed=0)
    for i in range(256):
        assert tok.vocab[i] == bytes([i])


def test_save_load_roundtrip(tmp_path):
    tok = Tokenizer.train([LOREM, "banana band"], vocab_size=350, seed=0)
    path = tmp_path / "tok.json"
    tok.save(str(path))
    loaded = Tokenizer.load(str(path))
    assert loaded.merges == tok.merges
    assert loaded.vocab == tok.vocab
    assert loaded.encode("the lazy dog") == tok.encode("the lazy dog")
    # saving the loaded model reproduces the file byte for byte
    path2 = tmp_path / "tok2.json"
    loaded.save(str(path2))
    assert path.read_bytes() == path2.read_bytes()


def test_file_schema_fields(tmp_path):
    tok = Tokenizer.train(["abab"], vocab_size=261, seed=0)
    path = tmp_path / "tok.json"
    tok.save(str(path))
    payload = json.loads(path.read_text(encoding="utf-8"))
    assert set(payload) == {"version", "vocab", "merges", "specials"}
    assert payload["version"] == 1
    assert len(payload["vocab"]) == tok.vocab_size
    assert all(isinstance(m, list) and len(m) == 2 for m in payload["merges"])


def test_load_rejects_bad_version(tmp_path):
    tok = Tokenizer.train(["abab"], vocab_size=261, seed=0)
    path = tmp_path / "tok.json"
    tok.save(str(path))
    payload = json.loads(path.read_text(encoding="utf-8"))
    payload["version"] = 2
    path.write_text(json.dumps(payload))
    with pytest.raises(FormatError):
        Tokenizer.load(str(path))


def test_load_rejects_inconsistent_vocab(tmp_path):
    tok = Tokenizer.train(["abab"], vocab_size=261, seed=0)
    path = tmp_path / "tok.json"
    tok.save(str(path))
    payload = json.loads(path.read_text(encoding="utf-8"))
    payload["vocab"][-1] = [120, 121, 122]
    path.write_text(json.dumps(payload))
    with pytest.raises(FormatError):
        Tokenizer.load(str(path))


def test_load_rejects_merge_referencing_future_id(tmp_path):
    path = tmp_path / "tok.json"
    payload = {
        "version": 1,
        "vocab": [[i] for i in range(256)] + [[], [], [], [97, 97]],
        "merges": [[300, 300]],
        "specials": {"pad": 256, "bos": 257, "eos": 258},
    }
    path.write_text(json.dumps(payload))
    with pytest.raises(FormatError):
        Tokenizer.load(str(path))
