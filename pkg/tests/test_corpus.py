import json
from collections import Counter

import numpy as np
import pytest

from ctrlcap.corpus import (BOS, EOS, PAD, SUBJECTS, CorpusError, SynthConfig, Vocab, generate_synthetic,
                            load_corpus, save_corpus, split_corpus, split_of)
from ctrlcap.signals import get_scheme, length_level, tense_level


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(SynthConfig())


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_corpus(generate_synthetic(SynthConfig(num_images=30, seed=7)), str(a))
    save_corpus(generate_synthetic(SynthConfig(num_images=30, seed=7)), str(b))
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.jsonl"
    save_corpus(generate_synthetic(SynthConfig(num_images=30, seed=8)), str(c))
    assert a.read_bytes() != c.read_bytes()


def test_two_images_ten_captions():
    c = generate_synthetic(SynthConfig(num_images=2, refs_per_image=5))
    caps = [r for img in c.images for r in img.refs]
    assert len(caps) == 10
    assert all(w in c.vocab for r in caps for w in r)


def test_config_errors():
    with pytest.raises(CorpusError):
        generate_synthetic(SynthConfig(num_images=1))
    with pytest.raises(CorpusError):
        generate_synthetic(SynthConfig(feature_dim=8))


def test_caption_lengths_within_template_bounds(corpus):
    lens = [len(r) for img in corpus.images for r in img.refs]
    assert min(lens) >= 5 and max(lens) <= 15


def test_declared_tense_matches_annotation(corpus):
    for img in corpus.images:
        for r, t in zip(img.refs, img.declared_tense):
            assert tense_level(r, corpus.tags) == t


def test_level_histograms_cover_every_level(corpus):
    caps = [r for img in corpus.images for r in img.refs]
    coarse = Counter(length_level(len(r), get_scheme("length-coarse")) for r in caps)
    tense = Counter(tense_level(r, corpus.tags) for r in caps)
    for hist, n in ((coarse, 5), (tense, 5)):
        assert sorted(hist) == list(range(n))
        assert min(hist.values()) / len(caps) >= 0.05


def test_fine_scheme_levels_reachable(corpus):
    caps = [r for img in corpus.images for r in img.refs]
    fine = {length_level(len(r), get_scheme("length-fine")) for r in caps}
    # shortest captions have 5 tokens, so every fine level appears
    assert fine == set(range(10))


def test_features_predict_subject(corpus):
    X = np.stack([img.feature for img in corpus.images])
    # the subject is the majority vote over references (a few are corrupted on purpose)
    y = np.array([Counter(w for r in img.refs for w in r if w in SUBJECTS).most_common(1)[0][0]
                  for img in corpus.images])
    classes = sorted(set(y))
    Y = np.eye(len(classes))[[classes.index(v) for v in y]]
    tr, te = slice(0, 400), slice(400, 500)
    Wt = np.zeros((X.shape[1], len(classes)))
    for _ in range(300):
        z = X[tr] @ Wt
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        Wt -= 0.5 * X[tr].T @ (p - Y[tr]) / 400
    acc = np.mean((X[te] @ Wt).argmax(1) == Y[te].argmax(1))
    assert acc > 0.95


def test_roundtrip(tmp_path, corpus):
    p = tmp_path / "c.jsonl"
    save_corpus(corpus, str(p))
    back = load_corpus(str(p))
    assert back == corpus
    assert back.vocab.hash == corpus.vocab.hash


def test_load_errors(tmp_path):
    good = generate_synthetic(SynthConfig(num_images=3))
    p = tmp_path / "c.jsonl"
    save_corpus(good, str(p))
    lines = p.read_text().splitlines()

    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(CorpusError, match="empty"):
        load_corpus(str(empty))

    trunc = tmp_path / "trunc.jsonl"
    trunc.write_text("\n".join(lines[:2] + [lines[2][:20]]) + "\n")
    with pytest.raises(CorpusError, match=":3:"):
        load_corpus(str(trunc))

    headless = tmp_path / "headless.jsonl"
    headless.write_text("\n".join(lines[1:]) + "\n")
    with pytest.raises(CorpusError, match="vocab_tags"):
        load_corpus(str(headless))

    rec = json.loads(lines[1])
    rec["captions"][0].append("zebra")
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join([lines[0], json.dumps(rec)]) + "\n")
    with pytest.raises(CorpusError, match="zebra"):
        load_corpus(str(bad))

    rec = json.loads(lines[1])
    rec["feature"] = rec["feature"][:5]
    mixed = tmp_path / "mixed.jsonl"
    mixed.write_text("\n".join([lines[0], json.dumps(rec), lines[2]]) + "\n")
    with pytest.raises(CorpusError, match="dimension"):
        load_corpus(str(mixed))


def test_fixed_vocab_rejects_unknown(tmp_path):
    c = generate_synthetic(SynthConfig(num_images=3))
    p = tmp_path / "c.jsonl"
    save_corpus(c, str(p))
    small = Vocab(["a", "dog"])
    with pytest.raises(CorpusError, match="unknown token"):
        load_corpus(str(p), vocab=small)


def test_vocab_reserved_ids_and_roundtrip():
    v = Vocab(["dog", "a", "runs"])
    assert [v.stoi[t] for t in (PAD, BOS, EOS)] == [v.pad_id, v.bos_id, v.eos_id] == [0, 1, 2]
    ids = v.encode(["a", "dog", "runs"])
    assert min(ids) > v.eos_id
    assert v.decode(ids + [v.eos_id] + ids) == ["a", "dog", "runs"]
    assert v.decode([v.bos_id] + ids) == ["a", "dog", "runs"]
    with pytest.raises(CorpusError):
        v.encode(["cat"])


def test_split_is_deterministic_and_disjoint(corpus):
    parts = split_corpus(corpus)
    ids = [set(img.id for img in parts[k].images) for k in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(map(len, ids)) == len(corpus)
    assert all(split_of(i) == "test" for i in ids[2])
    n = len(corpus)
    assert 0.8 * n < len(ids[0]) < 0.97 * n
