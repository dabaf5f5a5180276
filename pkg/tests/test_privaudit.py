import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facemae.privaudit import (
    DimMismatch,
    ZeroRowError,
    build_index,
    curve_csv,
    leakage_risk,
    risk_curve,
    top_k,
    top_k_indices,
)
from facemae.tensorio import EmbeddingSet


def oracle_topk(gallery, query, k):
    """Stable full sort of float64 cosine similarities."""
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    q = query / np.linalg.norm(query)
    sims = g @ q
    return sorted(range(len(g)), key=lambda j: (-sims[j], j))[:k]


def test_simple_top1():
    gal = EmbeddingSet(np.array([[1.0, 0.0], [0.0, 1.0]]), [7, 9])
    assert top_k(build_index(gal), np.array([0.9, 0.1]), 1) == [7]


def test_tie_breaks_to_lower_index():
    gal = EmbeddingSet(np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]), [5, 6, 7])
    assert top_k_indices(build_index(gal), np.array([[1.0, 0.0]]), 2)[0].tolist() == [0, 1]


def test_k_bounds_and_errors():
    index = build_index(EmbeddingSet(np.eye(3), [0, 1, 2]))
    with pytest.raises(ValueError):
        top_k_indices(index, np.ones((1, 3)), 4)
    with pytest.raises(ValueError):
        top_k_indices(index, np.ones((1, 3)), 0)
    with pytest.raises(DimMismatch):
        top_k_indices(index, np.ones((1, 2)), 1)
    with pytest.raises(ZeroRowError):
        top_k_indices(index, np.zeros((1, 3)), 1)
    with pytest.raises(ZeroRowError):
        build_index(EmbeddingSet(np.zeros((2, 3)), [0, 1]))


def _instance(seed):
    """Random gallery with dyadic entries so duplicated rows tie exactly."""
    rng = np.random.default_rng(seed)
    n, d = rng.integers(1, 40), rng.integers(1, 6)
    gal = rng.integers(-4, 5, size=(n, d)).astype(np.float64) / 4
    gal[np.all(gal == 0, axis=1)] = 1.0
    if n > 2:
        dup = rng.integers(0, n, size=n // 3)
        gal[rng.integers(0, n, size=n // 3)] = gal[dup]
    q = gal[rng.integers(0, n)] if rng.uniform() < 0.5 else rng.integers(-4, 5, size=d) / 4.0
    if not np.any(q):
        q = np.ones(d)
    return gal, np.asarray(q, dtype=np.float64), int(rng.integers(1, n + 1))


def test_matches_full_sort_oracle_1000_instances():
    for seed in range(1000):
        gal, q, k = _instance(seed)
        got = top_k_indices(build_index(EmbeddingSet(gal, np.arange(len(gal)))), q[None], k)[0]
        assert got.tolist() == oracle_topk(gal, q, k), seed


def test_blocking_and_workers_do_not_change_results():
    rng = np.random.default_rng(0)
    gal = np.round(rng.standard_normal((300, 8)), 1)
    qs = np.round(rng.standard_normal((257, 8)), 1)
    index = build_index(EmbeddingSet(gal, np.arange(300)))
    ref = top_k_indices(index, qs, 5, workers=1, block=512)
    np.testing.assert_array_equal(top_k_indices(index, qs, 5, workers=4, block=16), ref)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    gal, qs = rng.standard_normal((30, 4)), rng.standard_normal((5, 4))
    ref = top_k_indices(build_index(EmbeddingSet(gal, np.arange(30))), qs, 3)
    got = top_k_indices(build_index(EmbeddingSet(gal * a, np.arange(30))), qs * b, 3)
    np.testing.assert_array_equal(got, ref)


def test_self_retrieval_risk_is_one():
    emb = EmbeddingSet(np.random.default_rng(1).standard_normal((20, 5)), np.arange(20) % 10)
    assert leakage_risk(emb, build_index(emb), k=1).risk == 1.0


def test_risk_rises_with_k():
    rng = np.random.default_rng(2)
    gal = EmbeddingSet(rng.standard_normal((100, 6)), np.arange(100) % 25)
    q = EmbeddingSet(rng.standard_normal((50, 6)), np.arange(50) % 25)
    index = build_index(gal)
    risks = [leakage_risk(q, index, k).risk for k in (1, 2, 5, 20, 100)]
    assert all(a <= b for a, b in zip(risks, risks[1:]))
    assert risks[-1] == 1.0


def test_empty_queries():
    index = build_index(EmbeddingSet(np.eye(2), [0, 1]))
    assert leakage_risk(EmbeddingSet(np.zeros((0, 2)), []), index).risk == 0.0


def test_risk_curve_and_csv():
    rng = np.random.default_rng(3)
    labels = np.repeat(np.arange(10), 3)
    emb = EmbeddingSet(rng.standard_normal((30, 4)), labels)
    pts = risk_curve(emb, emb, 2, [2, 5, 10], seed=0)
    assert [n for n, _ in pts] == [2, 5, 10]
    assert all(r == 1.0 for _, r in pts)
    assert pts == risk_curve(emb, emb, 2, [2, 5, 10], seed=0)
    assert curve_csv(pts, 2).splitlines()[:2] == ["n_ids,k,risk", "2,2,1.000000"]
    with pytest.raises(ValueError):
        risk_curve(emb, emb, 2, [11], seed=0)
