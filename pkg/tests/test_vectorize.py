import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfrex.errors import DimensionMismatch, InputError, MissingEmbedding, UnknownCategory
from cfrex.ingest import EmbeddingTable, toy_embed
from cfrex.vectorize import (
    AspectConfig,
    CategoricalFeature,
    ContinuousFeature,
    FeatureSchema,
    MentionStats,
    TextField,
    assemble_item_vector,
    build_aspect_matrices,
    build_user_vector,
    fit_scalers,
    text_block,
    tokenize,
)

from oracles import aspect_x, aspect_y

TERN = ("False", "Not-mentioned", "True")


def stats_for(t_user, t_item, s_item):
    tu = np.atleast_2d(t_user)
    ti = np.atleast_2d(t_item)
    return MentionStats(tu, np.ones_like(tu, bool), ti, np.atleast_2d(s_item), np.ones_like(ti, bool))


# -- aspect matrices ----------------------------------------------------------

def test_aspect_spot_value_matches_high_precision_oracle():
    x, _ = build_aspect_matrices(stats_for([[1.0]], [[1.0]], [[0.5]]), AspectConfig(("a",), 5))
    assert abs(x[0, 0] - aspect_x(1.0, 5)) < 1e-12
    assert abs(x[0, 0] - 2.8485) < 1e-3


def test_aspect_y_matches_oracle():
    _, y = build_aspect_matrices(stats_for([[1.0]], [[3.0]], [[-0.4]]), AspectConfig(("a",), 5))
    assert abs(y[0, 0] - aspect_y(3.0, -0.4, 5)) < 1e-12


def test_aspect_small_t_tends_to_one():
    x, _ = build_aspect_matrices(stats_for([[1e-12]], [[1.0]], [[0.0]]), AspectConfig(("a",), 5))
    assert abs(x[0, 0] - 1.0) < 1e-9


def test_masked_entries_are_zero():
    st_ = MentionStats(np.array([[3.0, 1.0]]), np.array([[False, True]]), np.array([[2.0, 2.0]]),
                       np.array([[0.5, 0.5]]), np.array([[True, False]]))
    x, y = build_aspect_matrices(st_, AspectConfig(("a", "b")))
    assert x[0, 0] == 0.0 and x[0, 1] > 1.0
    assert y[0, 1] == 0.0 and y[0, 0] > 1.0


def test_aspect_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        build_aspect_matrices(stats_for([[1.0, 2.0]], [[1.0]], [[0.0]]), AspectConfig(("a",)))


def test_aspect_config_invariants():
    with pytest.raises(InputError):
        AspectConfig(("a", "a"))
    with pytest.raises(InputError):
        AspectConfig(("a",), rating_scale=1)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 50), st.floats(1e-6, 50), st.integers(2, 10))
def test_x_monotone_in_t(t1, t2, n):
    lo, hi = sorted((t1, t2))
    x, _ = build_aspect_matrices(stats_for([[lo, hi]], [[0.0, 0.0]], [[0.0, 0.0]]), AspectConfig(("a", "b"), n))
    assert x[0, 0] <= x[0, 1]
    assert 1.0 < x[0, 0] <= n and x[0, 1] <= n


# -- schema and assembly ------------------------------------------------------

def small_schema(text_dim=4):
    return FeatureSchema(
        continuous=(ContinuousFeature("price", 10.0, 2.0), ContinuousFeature("stars", 3.0, 1.0)),
        categorical=(CategoricalFeature("halal", TERN),),
        textual=(TextField("desc", 16),),
        text_dim=text_dim,
    )


def test_width_arithmetic():
    s = FeatureSchema(
        continuous=(ContinuousFeature("a"), ContinuousFeature("b")),
        categorical=(CategoricalFeature("c", ("x", "y", "z"), "onehot"),),
        textual=(TextField("t", 8),),
        text_dim=4,
    )
    assert s.width == 9


def test_text_block_two_tokens():
    s = FeatureSchema(textual=(TextField("t", 8),), text_dim=2)
    table = EmbeddingTable(2, {"u": np.array([1.0, 0.0]), "v": np.array([0.0, 1.0])})
    rec = assemble_item_vector("i", {"text": {"t": ["u", "v"]}}, s, table)
    assert np.array_equal(rec.vector, [0.5, 0.5])


@pytest.mark.parametrize("value, code", [("Not-mentioned", 0.0), ("False", -1.0), ("True", 1.0)])
def test_ternary_encoding(value, code):
    f = CategoricalFeature("halal", TERN)
    assert f.encode(value)[0] == code


def test_unknown_category_names_feature_and_value():
    s = small_schema()
    with pytest.raises(UnknownCategory) as err:
        assemble_item_vector("i", {"continuous": {"price": 1, "stars": 1}, "categorical": {"halal": "maybe"}}, s,
                             fallback_seed=0)
    assert err.value.feature == "halal" and err.value.value == "maybe"


def test_missing_embedding_names_slot():
    s = small_schema()
    raw = {"continuous": {"price": 1, "stars": 1}, "text": {"desc": ["zzz"]}}
    with pytest.raises(MissingEmbedding) as err:
        assemble_item_vector("i", raw, s, EmbeddingTable(4, {}))
    assert err.value.slot == ("i", "desc", 0)


def test_assembly_layout_and_scaling():
    s = small_schema()
    raw = {"continuous": {"price": 14.0, "stars": 2.0}, "categorical": {"halal": "True"},
           "text": {"desc": ["a", "b"]}}
    rec = assemble_item_vector("i", raw, s, fallback_seed=7)
    expected_text = (toy_embed("a", 4, 7) + toy_embed("b", 4, 7)) / 2
    assert np.allclose(rec.vector[:2], [2.0, -1.0])
    assert rec.vector[2] == 1.0
    assert np.allclose(rec.vector[3:], expected_text, atol=1e-15)
    assert np.allclose(rec.raw_continuous, [14.0, 2.0])


def test_slot_key_lookup_beats_bare_token():
    s = FeatureSchema(textual=(TextField("t", 8),), text_dim=2)
    table = EmbeddingTable(2, {"w": np.array([1.0, 1.0]), ("i", "t", 0): np.array([3.0, 0.0])})
    rec = assemble_item_vector("i", {"text": {"t": ["w"]}}, s, table)
    assert np.array_equal(rec.vector, [3.0, 0.0])


def test_empty_field_is_zero_block():
    s = small_schema()
    rec = assemble_item_vector("i", {"continuous": {"price": 10, "stars": 3}}, s)
    assert np.array_equal(rec.vector[3:], np.zeros(4))


def test_schema_invariants():
    with pytest.raises(InputError):
        FeatureSchema(continuous=(ContinuousFeature("a"), ContinuousFeature("a")))
    with pytest.raises(InputError):
        FeatureSchema(continuous=(ContinuousFeature("a", 0.0, 0.0),))
    with pytest.raises(InputError):
        FeatureSchema(categorical=(CategoricalFeature("c", ()),))


def test_schema_roundtrip(tmp_path):
    s = fit_scalers(small_schema(), [
        {"continuous": {"price": 1, "stars": 2}, "categorical": {"halal": "True"}},
        {"continuous": {"price": 3, "stars": 2}, "categorical": {"halal": "False"}},
    ])
    s.save(tmp_path / "s.json")
    assert FeatureSchema.load(tmp_path / "s.json") == s


def test_fit_scalers_constant_column_gets_unit_std():
    s = fit_scalers(small_schema(), [{"continuous": {"price": 1, "stars": 2}},
                                     {"continuous": {"price": 3, "stars": 2}}])
    assert s.continuous[0].mean == 2.0 and s.continuous[0].std == 1.0
    assert s.continuous[1].std == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3), st.integers(0, 1000))
def test_text_block_linearity(n, c, seed):
    vecs = np.random.default_rng(seed).standard_normal((n, 3))
    assert np.allclose(text_block(c * vecs), c * text_block(vecs), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 1000))
def test_text_block_permutation_invariance(n, seed):
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((n, 3))
    assert np.allclose(text_block(vecs[rng.permutation(n)]), text_block(vecs), atol=1e-12)


def test_text_block_kept_mode_renormalises():
    vecs = np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 3.0]])
    assert np.allclose(text_block(vecs, [1, 0, 1], "kept"), [2.0, 1.5])
    assert np.allclose(text_block(vecs, [1, 0, 1], "count"), [4 / 3, 1.0])
    assert np.array_equal(text_block(vecs, [0, 0, 0], "kept"), [0.0, 0.0])


# -- user vectors -------------------------------------------------------------

def test_user_vector_singleton_and_symmetry():
    v = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(build_user_vector("u", [v]), v)
    assert np.array_equal(build_user_vector("u", [v, -v]), np.zeros(3))


def test_user_vector_mean_matches_compensated_sum():
    rng = np.random.default_rng(5)
    vs = rng.standard_normal((3, 6)) * 1e3
    expected = [math.fsum(vs[:, j]) / 3 for j in range(6)]
    assert np.allclose(build_user_vector("u", list(vs)), expected, rtol=1e-14, atol=1e-12)


def test_user_without_positives_errors():
    with pytest.raises(InputError):
        build_user_vector("u", [])


def test_tokenize():
    text = "Great <b>battery</b> life! see http://x.y/z abc123 don't"
    assert tokenize(text, ["see"]) == ["great", "life", "don't"]
