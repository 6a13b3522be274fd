import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctrlcap import autodiff as ad
from ctrlcap.corpus import synthetic_tags
from ctrlcap.signals import (PRESETS, ControlSignal, ControlSpace, InvalidCaption, SchemeError,
                             UnknownToken, annotate, embed_control, get_scheme, gt_quality_score,
                             input_embedding, length_level, load_scheme_file, parse_level_spec,
                             quality_level, tense_level)
from ctrlcap.rewards import NgramStats, cider_d

# Level tables written out by hand, one entry per input value.
COARSE = {n: (0 if n <= 8 else 1 if n == 9 else 2 if n == 10 else 3 if n == 11 else 4) for n in range(1, 31)}
FINE = {n: (0 if n < 7 else 9 if n > 14 else n - 6) for n in range(1, 31)}


def _expected_quality(x, edges):
    return sum(x >= e for e in edges)


QUALITY_EDGES = {
    "quality-updown-5": [0.5, 0.9, 1.3, 1.7],
    "quality-gt-5": [0.375, 0.625, 0.875, 1.25],
    "quality-transformer-3": [0.7, 1.3],
    "quality-gt-3": [0.375, 0.625],
}

TAGS = {w: "OTHER" for w in "a an the red train at station dog frisbee man tennis court on in its mouth with "
                              "woman street two people kite sky by".split()}
TAGS.update({"is": "BE", "are": "BE", "was": "BE", "holding": "VERB_ING", "playing": "VERB_ING",
             "flying": "VERB_ING", "standing": "VERB_ING", "holds": "VERB_BASE", "plays": "VERB_BASE",
             "fly": "VERB_BASE", "stands": "VERB_BASE", "held": "VERB_ED", "parked": "VERB_ED",
             "played": "VERB_ED"})

TENSE_FIXTURE = [
    ("a red train at a station", 0),
    ("a dog with a frisbee in its mouth", 0),
    ("two people on a street", 0),
    ("a dog is holding a frisbee", 1),
    ("a man is playing tennis on a court", 1),
    ("a red train was parked at a station", 1),
    ("two people are flying a kite in the sky", 1),
    ("a dog holding a frisbee", 2),
    ("a man playing tennis on a court", 2),
    ("a woman standing on a street", 2),
    ("a dog holds a frisbee in its mouth", 3),
    ("a man plays tennis", 3),
    ("two people fly a kite", 3),
    ("a frisbee held by a dog", 4),
    ("a red train parked at a station", 4),
]


def test_coarse_length_table():
    sch = get_scheme("length-coarse")
    assert {n: length_level(n, sch) for n in range(1, 31)} == COARSE


def test_fine_length_table():
    sch = get_scheme("length-fine")
    assert sch.size == 10
    assert {n: length_level(n, sch) for n in range(1, 31)} == FINE


def test_length_examples():
    assert length_level(9, get_scheme("length-coarse")) == 1
    assert length_level(20, get_scheme("length-coarse")) == 4
    assert length_level(7, get_scheme("length-fine")) == 1


def test_zero_length_rejected():
    with pytest.raises(InvalidCaption):
        length_level(0, get_scheme("length-coarse"))


@pytest.mark.parametrize("name", sorted(QUALITY_EDGES))
def test_quality_tables_on_grid(name):
    sch = get_scheme(name)
    for i in range(61):
        x = round(0.05 * i, 10)
        assert quality_level(x, sch) == _expected_quality(x, QUALITY_EDGES[name]), (name, x)


def test_quality_examples():
    assert quality_level(1.0, get_scheme("quality-updown-5")) == 2
    assert quality_level(1.3, get_scheme("quality-transformer-3")) == 2
    for name in QUALITY_EDGES:
        assert quality_level(0.0, get_scheme(name)) == 0


@pytest.mark.parametrize("caption,level", TENSE_FIXTURE)
def test_tense_fixture(caption, level):
    assert tense_level(caption.split(), TAGS, get_scheme("tense")) == level


def test_tense_unknown_token_listed():
    with pytest.raises(UnknownToken, match="zebra"):
        tense_level("a zebra is holding".split(), TAGS)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(sorted(synthetic_tags())), min_size=1, max_size=12), st.data())
def test_tense_ignores_other_tokens(caption, data):
    tags = synthetic_tags()
    others = [w for w, t in tags.items() if t == "OTHER"]
    changed = [data.draw(st.sampled_from(others)) if tags[w] == "OTHER" else w for w in caption]
    assert tense_level(caption, tags) == tense_level(changed, tags)


def test_every_scheme_partitions_its_domain():
    for name, sch in PRESETS.items():
        grid = range(1, 31) if sch.kind == "length" else (
            range(5) if sch.kind == "tense" else [0.05 * i for i in range(61)])
        for x in grid:
            hits = [lvl for lvl, (lo, hi) in enumerate(sch.buckets) if lo <= x < hi]
            assert len(hits) == 1 and hits[0] == sch.level_of(x), (name, x)


def test_scheme_file_roundtrip(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("level 0 : 0 <= x < 0.5\nlevel 1 : 0.5 <= x < inf\n")
    sch = load_scheme_file(str(p), "quality")
    assert sch.size == 2 and sch.level_of(0.49) == 0 and sch.level_of(9.0) == 1
    p.write_text("level 0 : 0 <= x < 0.5\nlevel 1 : 0.6 <= x < inf\n")
    with pytest.raises(SchemeError):
        load_scheme_file(str(p), "quality")
    p.write_text("level zero: whatever\n")
    with pytest.raises(SchemeError):
        load_scheme_file(str(p), "quality")


def test_unknown_preset():
    with pytest.raises(SchemeError):
        get_scheme("length-huge")


def test_joint_space_offsets_match_shared_index():
    space = ControlSpace.for_task("length+tense")
    assert space.num_levels == 10
    assert space.rows(ControlSignal(len_level=4, tense_level=0)) == {"len": 4, "tense": 5}
    assert space.rows(ControlSignal(len_level=0, tense_level=4)) == {"len": 0, "tense": 9}


def test_signal_validation():
    space = ControlSpace.for_task("length")
    with pytest.raises(SchemeError):
        space.validate(ControlSignal(len_level=5))
    with pytest.raises(SchemeError):
        space.validate(ControlSignal(len_level=1, tense_level=1))
    with pytest.raises(SchemeError):
        ControlSignal()


def test_level_spec_parsing():
    assert parse_level_spec("len=1,tense=3") == ControlSignal(len_level=1, tense_level=3)
    assert parse_level_spec("quality=4").spec() == "quality=4"
    for bad in ("len", "size=2", "len=x", ""):
        with pytest.raises(SchemeError):
            parse_level_spec(bad)


def test_embed_control_selects_rows():
    space = ControlSpace.for_task("length")
    W = ad.constant(np.eye(5))
    np.testing.assert_array_equal(embed_control(ControlSignal(len_level=1), W, space).data, np.eye(5)[1])
    joint = ControlSpace.for_task("length+tense")
    rng = np.random.default_rng(0)
    Wj = ad.constant(rng.normal(size=(10, 4)))
    e = embed_control(ControlSignal(len_level=2, tense_level=3), Wj, joint)
    np.testing.assert_array_equal(e.data, Wj.data[2] + Wj.data[5 + 3])
    z = embed_control(ControlSignal(len_level=2, tense_level=3), ad.constant(np.zeros((10, 4))), joint)
    np.testing.assert_array_equal(z.data, np.zeros(4))


def test_embed_control_out_of_range():
    with pytest.raises(SchemeError):
        embed_control(ControlSignal(len_level=7), ad.constant(np.eye(5)), ControlSpace.for_task("length"))


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 4), st.integers(0, 4))
def test_embed_control_linear_in_W(alpha, a, b):
    space = ControlSpace.for_task("length+tense")
    W = np.random.default_rng(1).normal(size=(10, 3))
    s = ControlSignal(len_level=a, tense_level=b)
    lhs = embed_control(s, ad.constant(alpha * W), space).data
    rhs = alpha * embed_control(s, ad.constant(W), space).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_input_embedding():
    rng = np.random.default_rng(2)
    E = ad.constant(rng.normal(size=(6, 4)))
    eb = ad.constant(rng.normal(size=4))
    np.testing.assert_array_equal(input_embedding(3, ad.constant(np.zeros(4)), E).data, E.data[3])
    np.testing.assert_array_equal(input_embedding(3, eb, ad.constant(np.zeros((6, 4)))).data, eb.data)
    np.testing.assert_array_equal(input_embedding(2, eb, E).data, eb.data + E.data[2])
    with_pos = input_embedding(2, eb, E, position=0).data
    # sin(0)=0 on even, cos(0)=1 on odd coordinates
    np.testing.assert_allclose(with_pos, eb.data + E.data[2] + np.array([0, 1, 0, 1]))


def test_gt_quality_score_cases():
    refs = [("a", "dog", "runs", "home")] * 3
    other_images = [[("the", "cat", "sleeps")], [("birds", "fly", "high")]]
    stats = NgramStats.build([refs] + other_images)
    assert gt_quality_score(0, refs, stats) == pytest.approx(10.0)
    disjoint = [("x", "y"), ("a", "dog", "runs"), ("a", "dog", "runs")]
    stats2 = NgramStats.build([disjoint] + other_images)
    assert gt_quality_score(0, disjoint, stats2) == 0.0
    two = [("a", "dog", "runs", "fast"), ("a", "cat", "runs")]
    stats3 = NgramStats.build([two] + other_images)
    assert gt_quality_score(0, two, stats3) == pytest.approx(
        cider_d(two[0], [two[1]], stats3, use_length_penalty=False), abs=1e-12)
    with pytest.raises(InvalidCaption):
        gt_quality_score(0, [("a",)], stats)


def test_annotate_is_deterministic_and_idempotent():
    space = ControlSpace.for_task("length+tense")
    caps = [c.split() for c, _ in TENSE_FIXTURE]
    first = [annotate(c, space, TAGS) for c in caps]
    assert first == [annotate(c, space, TAGS) for c in caps]
    assert [s.tense_level for s in first] == [lvl for _, lvl in TENSE_FIXTURE]


def test_annotate_quality_needs_score():
    space = ControlSpace.for_task("quality")
    with pytest.raises(SchemeError):
        annotate(["a"], space, {"a": "OTHER"})
    # references use the ground-truth column
    assert annotate(["a"], space, {"a": "OTHER"}, 0.8, reference=True).quality_level == 2
    assert annotate(["a"], space, {"a": "OTHER"}, 0.8).quality_level == 1
