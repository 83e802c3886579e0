import itertools
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from orderlab import data as D
from orderlab.model import LengthError

# exact vocabulary size of the default synthetic corpus, counted once after generation
DEFAULT_VOCAB_SIZE = 333


def test_tokenize_examples():
    assert D.tokenize("I like Tea.") == ["i", "like", "tea", "."]
    assert D.tokenize("") == []
    assert D.tokenize("<p> hi") == ["<p>", "hi"]


def test_detokenize_is_normalize_on_corpus(small_corpus):
    train, test, _ = small_corpus
    for s in list(train)[:20] + list(test):
        for sentence in s.to_record()["persona"] + s.to_record()["context"]:
            assert D.detokenize(D.tokenize(sentence)) == D.normalize(sentence)


def test_vocabulary_specials_first(tmp_path):
    vocab = D.Vocabulary.build(["zebra", "apple", "apple"])
    assert [vocab.id(t) for t in D.SPECIAL_TOKENS] == list(range(8))
    assert vocab.decode(vocab.encode(["apple", "zebra"])) == ["apple", "zebra"]
    assert vocab.id("apple") < vocab.id("zebra")
    vocab.save(tmp_path / "v.json")
    assert D.Vocabulary.load(tmp_path / "v.json") == vocab


def test_shuffle_single_is_identity():
    assert D.shuffle_persona(1, np.random.default_rng(0)) == (0,)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_shuffle_is_bijection(n, seed):
    assert D.is_permutation(D.shuffle_persona(n, np.random.default_rng(seed)), n)


def test_shuffle_uniform_chi_square():
    rng = np.random.default_rng(2024)
    counts = Counter(D.shuffle_persona(3, rng) for _ in range(6000))
    observed = [counts[p] for p in itertools.permutations(range(3))]
    assert sum(observed) == 6000
    assert chisquare(observed).pvalue > 0.001


def test_decoder_serialization_layout(two_persona_sample):
    toks, mask = D.serialize_decoder_tokens(two_persona_sample, (0, 1))
    assert " ".join(toks) == "<bos> <p> i like tea <p> i ski <ctx> hi <res> hello <eos>"
    assert [t for t, m in zip(toks, mask) if m] == ["hello", "<eos>"]


def test_decoder_serialization_swap(two_persona_sample):
    a, ma = D.serialize_decoder_tokens(two_persona_sample, (0, 1))
    b, mb = D.serialize_decoder_tokens(two_persona_sample, (1, 0))
    assert " ".join(b) == "<bos> <p> i ski <p> i like tea <ctx> hi <res> hello <eos>"
    assert len(a) == len(b) and ma == mb
    start = a.index("<ctx>")
    assert a[start:] == b[start:]


def test_decoder_serialization_length_error(two_persona_sample):
    vocab = D.Vocabulary.build(two_persona_sample.words())
    with pytest.raises(LengthError, match="sample 7"):
        D.serialize_decoder_input(two_persona_sample, (0, 1), vocab, max_seq_len=5, index=7)


def test_encdec_serialization(two_persona_sample):
    vocab = D.Vocabulary.build(two_persona_sample.words())
    src, tgt = D.serialize_encdec_input(two_persona_sample, (0, 1), vocab)
    assert vocab.decode(src) == "<p> i like tea <p> i ski <ctx> hi".split()
    assert vocab.decode(tgt) == ["<bos>", "hello", "<eos>"]
    src2, tgt2 = D.serialize_encdec_input(two_persona_sample, (1, 0), vocab)
    assert len(src2) == len(src) and tgt2.tolist() == tgt.tolist()


def test_invalid_permutation_rejected(two_persona_sample):
    with pytest.raises(ValueError):
        D.serialize_decoder_tokens(two_persona_sample, (0, 0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 39), st.integers(0, 2**32 - 1))
def test_serialization_invariants_under_permutation(small_corpus, i, seed):
    train, _, vocab = small_corpus
    s = train[i]
    perm = D.shuffle_persona(s.n_persona, np.random.default_rng(seed))
    ids0, m0 = D.serialize_decoder_input(s, D.identity(s.n_persona), vocab)
    ids1, m1 = D.serialize_decoder_input(s, perm, vocab)
    assert len(ids0) == len(ids1) and m0.tolist() == m1.tolist()
    assert ids0[m0].tolist() == ids1[m1].tolist()
    assert sorted(ids0.tolist()) == sorted(ids1.tolist())


def test_make_batch_alignment(small_corpus):
    train, _, vocab = small_corpus
    samples = list(train)[:3]
    perms = [D.identity(s.n_persona) for s in samples]
    rev = [tuple(reversed(p)) for p in perms]
    for arch in ("decoder_only", "encoder_decoder"):
        a = D.make_batch(samples, perms, vocab, arch)
        b = D.make_batch(samples, rev, vocab, arch)
        assert a.mask.tolist() == b.mask.tolist()
        assert a.targets[a.mask].tolist() == b.targets[b.mask].tolist()
        eos = vocab.id(D.EOS)
        assert all(row[m][-1] == eos for row, m in zip(a.targets, a.mask))


def test_synthetic_response_contains_value(small_corpus):
    train, test, _ = small_corpus
    for s in list(train) + list(test):
        cat = s.context[-1][3]
        value = s.response[-1]
        matching = [p for p in s.persona if value in p]
        assert matching, s
        assert s.response == ("my", cat, "is", value)


def test_synthetic_label_invariance(small_corpus):
    # the response is a function of (context, persona as a set); collect and check
    train, test, _ = small_corpus
    seen = {}
    for s in list(train) + list(test):
        key = (s.context[-1], frozenset(s.persona))
        assert seen.setdefault(key, s.response) == s.response


def test_synthetic_determinism(tmp_path):
    cfg = D.GenConfig(n_train=30, n_test=5, seed=3)
    for tag in ("a", "b"):
        train, test, vocab = D.generate_synthetic_corpus(cfg)
        D.save_jsonl(train, tmp_path / f"{tag}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_default_corpus_vocab_size():
    train, test, vocab = D.generate_synthetic_corpus(D.GenConfig())
    assert len(train) == 2000 and len(test) == 200
    assert 200 <= len(vocab) <= 600
    assert len(vocab) == DEFAULT_VOCAB_SIZE
    assert all(s.n_persona == 4 for s in train)


def test_gen_config_validation():
    with pytest.raises(ValueError):
        D.GenConfig(n_personas=5, n_categories=4).validate()
    with pytest.raises(ValueError):
        D.GenConfig(n_categories=99).validate()


def test_jsonl_one_line(tmp_path):
    f = tmp_path / "d.jsonl"
    f.write_text(json.dumps({"persona": ["i ski"], "context": ["hi"], "response": "hello"}) + "\n")
    assert len(D.load_jsonl(f)) == 1


@pytest.mark.parametrize(
    "record, message",
    [
        ({"persona": ["i ski"], "context": ["hi"]}, "line 1: missing field 'response'"),
        ({"persona": ["i ski"], "context": ["hi"], "response": ""}, "line 1"),
        ({"persona": "i ski", "context": ["hi"], "response": "x"}, "line 1: 'persona'"),
    ],
)
def test_jsonl_schema_errors(tmp_path, record, message):
    f = tmp_path / "d.jsonl"
    f.write_text(json.dumps(record) + "\n")
    with pytest.raises(D.SchemaError, match=message):
        D.load_jsonl(f)


def test_jsonl_malformed_line_number(tmp_path):
    f = tmp_path / "d.jsonl"
    good = json.dumps({"persona": ["i ski"], "context": ["hi"], "response": "hello"})
    f.write_text(good + "\n{oops\n")
    with pytest.raises(D.SchemaError, match="line 2"):
        D.load_jsonl(f)


def test_jsonl_round_trip_canonical(tmp_path):
    src = tmp_path / "in.jsonl"
    records = [
        {"response": "hello!", "persona": ["i like tea", "i ski"], "context": ["hi", "how are you?"]},
        {"context": ["yo"], "persona": ["my dog is red"], "response": "cool"},
    ]
    src.write_text("".join(json.dumps(r, indent=None) + "\n" for r in records))
    out = tmp_path / "out.jsonl"
    D.save_jsonl(D.load_jsonl(src), out)
    canonical = "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)
    assert out.read_text() == canonical
    D.save_jsonl(D.load_jsonl(out), tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == out.read_bytes()
