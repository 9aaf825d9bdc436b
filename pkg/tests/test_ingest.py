import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfrex.errors import DimensionMismatch, InputError, ParseError
from cfrex.ingest import (
    Candidate,
    SplitPolicy,
    load_candidates,
    load_embeddings,
    load_interactions,
    read_split_file,
    toy_embed,
    write_candidates,
    write_embeddings,
    write_interactions,
)


def write_log(path, rows):
    path.write_text("".join("\t".join(str(x) for x in r) + "\n" for r in rows))
    return path


def dense_log(n_users=12, n_items=200, per_user=20, seed=0):
    """Every user reviews ``per_user`` distinct items out of ``n_items``."""
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(n_users):
        items = rng.choice(n_items, size=per_user, replace=False)
        for t, i in enumerate(items):
            rows.append((f"u{u}", f"i{i}", 100 + t))
    return rows


def test_split_rule_for_user_with_20_positives(tmp_path):
    p = write_log(tmp_path / "log.tsv", dense_log())
    inter = load_interactions(p, SplitPolicy(min_item_reviews=1))
    mine = [it for it in inter if it.user_id == "u0"]
    c = Counter((it.split, it.label) for it in mine)
    assert c[("train", 1)] == 10 and c[("train", 0)] == 50
    assert c[("valid", 1)] == 5 and c[("valid", 0)] == 25
    assert c[("test", 1)] == 5 and c[("test", 0)] == 25


def test_last_items_follow_timestamps(tmp_path):
    rows = [(f"u0", f"i{k}", 1000 - k) for k in range(20)]  # later file lines are older
    rows += [(f"u{u}", f"i{k}", k) for u in range(1, 10) for k in range(20)]
    p = write_log(tmp_path / "log.tsv", rows)
    inter = load_interactions(p, SplitPolicy(neg_ratio=1))
    test_pos = {it.item_id for it in inter if it.user_id == "u0" and it.split == "test" and it.label}
    assert test_pos == {f"i{k}" for k in range(5)}


def test_missing_timestamps_use_file_order(tmp_path):
    rows = [(f"u{u}", f"i{k}") for u in range(10) for k in range(20)]
    p = write_log(tmp_path / "log.tsv", rows)
    inter = load_interactions(p, SplitPolicy(neg_ratio=1))
    test_pos = {it.item_id for it in inter if it.user_id == "u3" and it.split == "test" and it.label}
    assert test_pos == {f"i{k}" for k in range(15, 20)}


def test_user_with_four_reviews_dropped(tmp_path):
    rows = dense_log() + [("lonely", f"i{k}", k) for k in range(4)]
    p = write_log(tmp_path / "log.tsv", rows)
    inter = load_interactions(p, SplitPolicy(min_item_reviews=1))
    assert not any(it.user_id == "lonely" for it in inter)


def test_rare_items_dropped(tmp_path):
    rows = [(f"u{u}", f"i{k}", k) for u in range(10) for k in range(20)] + [("u0", "rare", 999)]
    p = write_log(tmp_path / "log.tsv", rows)
    inter = load_interactions(p)
    assert not any(it.item_id == "rare" for it in inter)


def test_small_user_kept_in_train_only(tmp_path):
    rows = [(f"u{u}", f"i{k}", k) for u in range(10) for k in range(20)]
    rows += [("small", f"i{k}", k) for k in range(8)]
    p = write_log(tmp_path / "log.tsv", rows)
    inter = load_interactions(p, SplitPolicy(neg_ratio=1))
    mine = [it for it in inter if it.user_id == "small"]
    assert mine and {it.split for it in mine} == {"train"}


def test_split_determinism_byte_identical(tmp_path):
    p = write_log(tmp_path / "log.tsv", dense_log())
    a = load_interactions(p, SplitPolicy(min_item_reviews=1, seed=3))
    b = load_interactions(p, SplitPolicy(min_item_reviews=1, seed=3))
    write_interactions(tmp_path / "a.tsv", a)
    write_interactions(tmp_path / "b.tsv", b)
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    c = load_interactions(p, SplitPolicy(min_item_reviews=1, seed=4))
    assert a != c


def test_negative_purity_and_disjoint_pools(tmp_path):
    p = write_log(tmp_path / "log.tsv", dense_log())
    inter = load_interactions(p, SplitPolicy(min_item_reviews=1))
    by_user = {}
    for it in inter:
        by_user.setdefault(it.user_id, []).append(it)
    for rows in by_user.values():
        pos = {it.item_id for it in rows if it.label}
        negs = [it.item_id for it in rows if not it.label]
        assert not pos & set(negs)
        assert len(negs) == len(set(negs))
    triples = [(it.user_id, it.item_id, it.split) for it in inter]
    assert len(triples) == len(set(triples))


def test_negative_shortfall_logs_warning(tmp_path, caplog):
    rows = [(f"u{u}", f"i{k}", k) for u in range(12) for k in range(20)]
    rows += [(f"u{u}", f"x{k}", 50 + k) for u in range(10) for k in range(3)]
    p = write_log(tmp_path / "log.tsv", rows)
    with caplog.at_level(logging.WARNING):
        inter = load_interactions(p, SplitPolicy(neg_ratio=5))
    assert "negatives available" in caplog.text
    u11 = [it for it in inter if it.user_id == "u11" and not it.label]
    assert len(u11) == 3  # only the x-items were never touched by u11


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("u1\ti1\t1\nu1\n")
    with pytest.raises(ParseError) as err:
        load_interactions(p)
    assert err.value.line_no == 2


def test_split_policy_invariants():
    with pytest.raises(InputError):
        SplitPolicy(holdout_valid=10, holdout_test=5, min_items_for_eval=15)
    with pytest.raises(InputError):
        SplitPolicy(neg_ratio=0)


def test_split_file_roundtrip(tmp_path):
    p = write_log(tmp_path / "log.tsv", dense_log())
    inter = load_interactions(p, SplitPolicy(min_item_reviews=1))
    write_interactions(tmp_path / "s.tsv", inter, header="x=1")
    assert read_split_file(tmp_path / "s.tsv") == inter


# -- embeddings ---------------------------------------------------------------

def test_embeddings_three_entries(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("dim=4 count=3\na\t1 2 3 4\nb\t0 0 0 1\nitem|desc|0\t1 1 1 1\n")
    t = load_embeddings(p)
    assert t.dim == 4 and len(t) == 3
    assert np.array_equal(t[("item", "desc", 0)], np.ones(4))


def test_embeddings_short_entry_names_key(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("dim=4 count=1\nbattery\t1 2 3\n")
    with pytest.raises(DimensionMismatch) as err:
        load_embeddings(p)
    assert err.value.key == "battery" and "battery" in str(err.value)


def test_embeddings_empty_with_header(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("dim=7 count=0\n")
    t = load_embeddings(p)
    assert t.dim == 7 and len(t) == 0


def test_embeddings_count_mismatch(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("dim=2 count=2\na\t1 2\n")
    with pytest.raises(InputError):
        load_embeddings(p)


@pytest.mark.parametrize("binary", [False, True])
def test_embeddings_roundtrip(tmp_path, binary):
    rng = np.random.default_rng(0)
    entries = {("i1", "desc", 0): rng.standard_normal(5), "word": rng.standard_normal(5)}
    p = tmp_path / "e.bin"
    write_embeddings(p, entries, 5, binary=binary, model="toy")
    t = load_embeddings(p)
    assert t.meta["model"] == "toy"
    for k, v in entries.items():
        assert np.array_equal(t[k], v)


def test_toy_embed_contract():
    a = toy_embed("battery", 8, 42)
    assert np.array_equal(a, toy_embed("battery", 8, 42))
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9
    for tok in ("battery", "screen", "price", "case"):
        assert not np.array_equal(toy_embed(tok, 8, 42), toy_embed(tok, 8, 43))


@settings(max_examples=50, deadline=None)
@given(st.text(min_size=1, max_size=20), st.integers(1, 64), st.integers(0, 2**31))
def test_toy_embed_unit_norm(token, dim, seed):
    assert abs(np.linalg.norm(toy_embed(token, dim, seed)) - 1.0) < 1e-9


# -- candidates ---------------------------------------------------------------

def _cands(dim=3, n=5):
    rng = np.random.default_rng(1)
    return {("i1", "desc", p): [Candidate(f"w{p}_{k}", rng.standard_normal(dim), float(10 - k)) for k in range(n)]
            for p in range(2)}


def test_candidates_roundtrip(tmp_path):
    c = _cands()
    write_candidates(tmp_path / "c.tsv", c)
    back = load_candidates(tmp_path / "c.tsv", 5, 3, {("i1", "desc", 0): "w0_0"})
    assert list(back) == list(c)
    for key in c:
        assert [x.token for x in back[key]] == [x.token for x in c[key]]
        assert all(np.array_equal(a.vector, b.vector) for a, b in zip(back[key], c[key]))


def test_candidates_wrong_count(tmp_path):
    write_candidates(tmp_path / "c.tsv", _cands(n=4))
    with pytest.raises(InputError):
        load_candidates(tmp_path / "c.tsv", 5)


def test_candidates_require_original(tmp_path):
    write_candidates(tmp_path / "c.tsv", _cands())
    with pytest.raises(InputError, match="original token"):
        load_candidates(tmp_path / "c.tsv", 5, 3, {("i1", "desc", 1): "missing"})


def test_candidates_dim_checked(tmp_path):
    write_candidates(tmp_path / "c.tsv", _cands(dim=3))
    with pytest.raises(DimensionMismatch):
        load_candidates(tmp_path / "c.tsv", 5, dim=4)
