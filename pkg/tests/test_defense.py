"""Aggregation rules against brute-force / sort / grid oracles, plus the
spec's invariance properties."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpoison import defense


def _updates(seed, n=6, d=4):
    return np.random.default_rng(seed).standard_normal((n, d))


# ---------------------------------------------------------------------------
# oracles

def krum_oracle(updates, f):
    """Exhaustive re-derivation of the krum score (no vectorized tricks)."""
    n = len(updates)
    k = n - f - 2
    scores = []
    for i in range(n):
        dists = sorted(
            sum((updates[i][c] - updates[j][c]) ** 2 for c in range(updates.shape[1]))
            for j in range(n)
            if j != i
        )
        scores.append(sum(dists[:k]))
    return np.array(scores)


def trimmed_mean_oracle(updates, beta):
    n, d = updates.shape
    out = np.empty(d)
    for c in range(d):
        col = sorted(updates[:, c])
        out[c] = np.mean(col[beta : n - beta])
    return out


def median_oracle(updates):
    out = np.empty(updates.shape[1])
    for c in range(updates.shape[1]):
        col = sorted(updates[:, c])
        m = len(col)
        out[c] = col[m // 2] if m % 2 else 0.5 * (col[m // 2 - 1] + col[m // 2])
    return out


def geomedian_objective(x, updates):
    return sum(np.linalg.norm(u - x) for u in updates)


def geomedian_grid_oracle(updates, rounds=4, width=4.0, steps=9):
    """Coarse-to-fine grid search in R^3."""
    center = updates.mean(axis=0)
    for _ in range(rounds):
        axes = [np.linspace(c - width, c + width, steps) for c in center]
        best = None
        for p in itertools.product(*axes):
            val = geomedian_objective(np.array(p), updates)
            if best is None or val < best[0]:
                best = (val, np.array(p))
        center = best[1]
        width = 2 * width / (steps - 1)
    return best[0], center


# ---------------------------------------------------------------------------
# cosine

def test_cosine_basics():
    assert defense.cosine(np.array([1.0, 0.0]), np.array([2.0, 0.0])) == 1.0
    assert np.isclose(defense.cosine(np.array([1.0, 0.0]), np.array([0.0, 3.0])), 0.0)
    assert defense.cosine(np.zeros(2), np.array([1.0, 0.0])) == -1.0


# ---------------------------------------------------------------------------
# krum / multi-krum

@pytest.mark.parametrize("seed", range(10))
def test_krum_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 9))
    f = int(rng.integers(1, n - 2))
    u = rng.standard_normal((n, int(rng.integers(1, 7))))
    idx, scores = defense.krum(u, f)
    oracle = krum_oracle(u, f)
    assert np.allclose(scores, oracle)
    assert idx == int(np.argmin(oracle))


def test_krum_needs_enough_clients():
    with pytest.raises(defense.DefenseError):
        defense.krum(_updates(0, n=3), f=1)


def test_multi_krum_selects_m_best():
    u = _updates(1, n=7)
    sel, agg = defense.multi_krum(u, f=1, m=3)
    oracle = krum_oracle(u, 1)
    assert sel == sorted(np.argsort(oracle, kind="stable")[:3].tolist())
    assert np.allclose(agg, u[sel].mean(axis=0))


def test_multi_krum_m_bounds():
    with pytest.raises(defense.DefenseError):
        defense.multi_krum(_updates(2, n=6), f=1, m=4)


def test_krum_scale_invariant_argmin():
    u = _updates(3, n=6)
    i1, _ = defense.krum(u, 1)
    i2, _ = defense.krum(3.7 * u, 1)
    assert i1 == i2


# ---------------------------------------------------------------------------
# trimmed mean / median

@pytest.mark.parametrize("seed", range(10))
def test_trimmed_mean_matches_sort_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(3, 9))
    beta = int(rng.integers(0, (n - 1) // 2 + 1))
    u = rng.standard_normal((n, int(rng.integers(1, 7))))
    assert np.allclose(defense.trimmed_mean(u, beta), trimmed_mean_oracle(u, beta),
                       atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_coord_median_matches_sort_oracle(seed):
    u = _updates(200 + seed, n=int(np.random.default_rng(seed).integers(1, 9)))
    assert np.allclose(defense.coord_median(u), median_oracle(u), atol=1e-12)


def test_trimmed_mean_needs_enough_rows():
    with pytest.raises(defense.DefenseError):
        defense.trimmed_mean(_updates(0, n=4), beta=2)


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=30, deadline=None)
def test_trim_and_median_bounded_by_inputs(seed):
    u = _updates(seed, n=6, d=5)
    lo, hi = u.min(axis=0), u.max(axis=0)
    for out in (defense.trimmed_mean(u, 1), defense.coord_median(u)):
        assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


# ---------------------------------------------------------------------------
# geometric median

@pytest.mark.parametrize("seed", range(5))
def test_geometric_median_matches_grid_oracle(seed):
    u = np.random.default_rng(300 + seed).standard_normal((5, 3))
    x, converged = defense.geometric_median(u)
    assert converged
    oracle_val, _ = geomedian_grid_oracle(u)
    assert geomedian_objective(x, u) <= oracle_val + 1e-3


def test_geometric_median_collinear_coincident():
    u = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    x, _ = defense.geometric_median(u)
    assert geomedian_objective(x, u) <= geomedian_objective(np.zeros(2), u) + 1e-6


# ---------------------------------------------------------------------------
# fedavg

def test_fedavg_weighted_mean():
    u = _updates(4, n=3)
    w = np.array([1.0, 2.0, 3.0])
    assert np.allclose(defense.fedavg(u, w), w @ u / w.sum())


def test_fedavg_bad_weights():
    with pytest.raises(defense.DefenseError):
        defense.fedavg(_updates(5, n=2), np.array([0.0, 0.0]))


# ---------------------------------------------------------------------------
# cosine threshold filter

def test_cosine_filter_threshold_formula():
    u = _updates(6, n=6)
    ref = np.ones(u.shape[1])
    rep = defense.cosine_threshold_filter(u, ref, lam=1.5)
    scores = np.array([defense.cosine(x, ref) for x in u])
    assert np.allclose(rep.scores, scores)
    assert np.isclose(rep.threshold, scores.mean() - 1.5 * scores.std())
    assert np.array_equal(rep.accepted, scores >= rep.threshold)
    assert np.allclose(rep.aggregate, u[rep.accepted].mean(axis=0))


def test_cosine_filter_rejects_opposed_update():
    ref = np.array([1.0, 0.0, 0.0])
    u = np.vstack([np.tile(ref, (5, 1)) + 0.01 * _updates(7, n=5, d=3), -10 * ref])
    rep = defense.cosine_threshold_filter(u, ref, lam=1.5)
    assert not rep.accepted[-1]
    assert rep.accepted[:-1].all()


def test_cosine_filter_scale_invariant_scores():
    u = _updates(8, n=5)
    ref = np.ones(u.shape[1])
    r1 = defense.cosine_threshold_filter(u, ref, 1.5)
    u2 = u.copy()
    u2[2] *= 42.0
    r2 = defense.cosine_threshold_filter(u2, ref, 1.5)
    assert np.isclose(r1.scores[2], r2.scores[2])


def test_cosine_filter_errors():
    with pytest.raises(defense.DefenseError):
        defense.cosine_threshold_filter(_updates(9, n=1), np.ones(4), 1.5)
    with pytest.raises(defense.DefenseError):
        defense.cosine_threshold_filter(_updates(9, n=3), np.zeros(4), 1.5)


# ---------------------------------------------------------------------------
# dispatcher + permutation equivariance

@pytest.mark.parametrize("name", defense.DEFENSES)
def test_apply_defense_permutation_equivariant(name):
    u = _updates(10, n=6)
    ref = np.ones(u.shape[1])
    w = np.ones(6)
    params = defense.DefenseParams()
    perm = np.random.default_rng(0).permutation(6)
    r1 = defense.apply_defense(name, u, w, ref, params)
    r2 = defense.apply_defense(name, u[perm], w[perm], ref, params)
    assert np.allclose(r1.aggregate, r2.aggregate, atol=1e-9)
    assert np.array_equal(r1.accepted[perm], r2.accepted)
    assert np.allclose(r1.scores[perm], r2.scores)


def test_apply_defense_unknown_rule():
    with pytest.raises(defense.DefenseError):
        defense.apply_defense("madness", _updates(0), np.ones(6), np.ones(4),
                              defense.DefenseParams())
