import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.cluster.hierarchy import cophenet, linkage
from scipy.spatial.distance import squareform

from genealogy_lab import core
from genealogy_lab.errors import (ComponentTooTall, DimensionMismatch, EmptySpace,
                                  NegativeMass, NotUltrametric, TopTooTall)


def two_leaf(D, m=0.5):
    return core.from_distance_matrix([[0.0, D], [D, 0.0]], [m, 1.0 - m])


def single_linkage_ultrametric(rng, n):
    """Independent oracle: cophenetic matrix of a scipy single-linkage tree."""
    pts = rng.normal(size=(n, 2))
    Z = linkage(pts, method="single")
    return squareform(cophenet(Z))


seeds = st.integers(0, 2 ** 32 - 1)


# -- construction --------------------------------------------------------

def test_single_leaf_identity():
    sp = core.from_distance_matrix([[0.0]], [1.0])
    assert sp.n_leaves == 1
    assert sp.total_mass == 1.0
    assert core.diameter(sp) == 0.0


def test_two_leaves_merge_value():
    sp = two_leaf(6.0)
    assert sp.root.value == 6.0
    assert sp.distance_matrix()[0, 1] == 6.0


def test_round_trip_single_linkage_oracle(rng):
    # [DERIVED] scipy single-linkage cophenetic distances are an independent ultrametric
    for _ in range(50):
        D = single_linkage_ultrametric(rng, 6)
        sp = core.from_distance_matrix(D, rng.uniform(0.1, 1, 6))
        assert np.array_equal(sp.distance_matrix(), D)


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(1, 12), st.booleans())
def test_round_trip_property(seed, n, ints):
    r = np.random.default_rng(seed)
    sp = core.random_space(r, n, integer_values=ints)
    D = sp.distance_matrix()
    back = core.from_distance_matrix(D, sp.masses)
    assert np.array_equal(back.distance_matrix(), D)
    assert core.isomorphic(back, sp)


def test_from_merges_matches_matrix():
    sp = core.from_merges(3, [(0, 1, 2.0), (3, 2, 5.0)], [1, 1, 1])
    expect = np.array([[0, 2, 5], [2, 0, 5], [5, 5, 0]], float)
    assert np.array_equal(sp.distance_matrix(), expect)


@pytest.mark.parametrize("D,err", [
    ([[0, 1, 3], [1, 0, 1], [3, 1, 0]], NotUltrametric),
    ([[0, 1], [2, 0]], NotUltrametric),
    ([[1, 0], [0, 0]], NotUltrametric),
    ([[0, -1], [-1, 0]], NotUltrametric),
    ([[0, 1, 1], [1, 0, 1]], DimensionMismatch),
])
def test_invalid_matrices(D, err):
    n = len(D)
    with pytest.raises(err):
        core.from_distance_matrix(D, np.ones(n))


def test_mass_errors():
    with pytest.raises(NegativeMass):
        core.from_distance_matrix([[0.0]], [-1.0])
    with pytest.raises(EmptySpace):
        core.from_distance_matrix([[0.0]], [0.0])
    with pytest.raises(DimensionMismatch):
        core.from_distance_matrix([[0.0]], [1.0, 2.0])
    assert NotUltrametric("x").code == "core.NotUltrametric"


def test_json_round_trip_marked():
    sp = core.from_distance_matrix([[0, 2, 4], [2, 0, 4], [4, 4, 0]], [0.2, 0.3, 0.5],
                                   types=[0, 1, 1], locations=[1, 0, 2])
    back = core.from_json(sp.to_json())
    assert back.is_marked
    assert back.to_json() == sp.to_json()
    assert json.loads(sp.to_json())["merge_value"] == 4


# -- sampling ------------------------------------------------------------

def test_sample_single_leaf(rng):
    s = core.sample_distance_matrix(core.single_leaf(), 3, rng)
    assert np.array_equal(s.distances, np.zeros((3, 3)))


def test_sample_two_leaf_binomial(rng):
    # [DERIVED] off-diagonal entry is 6 with probability 1/2
    sp = two_leaf(6.0)
    n = 100000
    hits = sum(core.sample_distance_matrix(sp, 2, rng).distances[0, 1] == 6.0
               for _ in range(n))
    assert abs(hits / n - 0.5) <= 3 * math.sqrt(0.25 / n)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 10), st.integers(1, 6))
def test_samples_are_ultrametric(seed, n_leaves, order):
    r = np.random.default_rng(seed)
    sp = core.random_space(r, n_leaves, integer_values=True)
    s = core.sample_distance_matrix(sp, order, r)
    assert s.is_ultrametric()
    assert s.to_csv().startswith("i,j,value\n")


# -- polynomials ---------------------------------------------------------

def test_constant_polynomial(rng):
    sp = core.random_space(rng, 7)
    for n in (1, 2, 3):
        v = core.evaluate_polynomial(sp, core.PolynomialSpec.constant(n, 2.5))
        assert v.value == pytest.approx(2.5, abs=1e-14)
    v = core.evaluate_polynomial(sp, core.PolynomialSpec.constant(1, 1.0), normalized=False)
    assert v.value == pytest.approx(sp.total_mass, rel=1e-14)


@pytest.mark.parametrize("D,m,lam", [(6.0, 0.5, 0.5), (3.0, 0.2, 1.3), (0.7, 0.9, 2.0)])
def test_two_leaf_exponential_closed_form(D, m, lam):
    sp = two_leaf(D, m)
    v = core.evaluate_polynomial(sp, core.PolynomialSpec.exponential(2, lam)).value
    assert v == pytest.approx(m * m + (1 - m) ** 2 + 2 * m * (1 - m) * math.exp(-lam * D),
                              abs=1e-14)


def test_monte_carlo_vs_exact(rng):
    # [DERIVED] exact enumeration is the oracle for the MC estimator
    sp = core.random_space(rng, 8)
    poly = core.PolynomialSpec.exponential(3, 0.3)
    ex = core.evaluate_polynomial(sp, poly).value
    mc = core.evaluate_polynomial(sp, poly, mode="monte_carlo", reps=100000, rng=rng)
    assert abs(mc.value - ex) <= 3 * mc.se


def test_distinct_sampling_and_threshold():
    sp = core.from_distance_matrix([[0, 2, 4], [2, 0, 4], [4, 4, 0]], [1, 1, 2])
    thr = core.PolynomialSpec.threshold(2, 3.0)
    # only the ordered distinct pairs (0,1), (1,0) lie below the threshold
    num = 2 * 1 * 1
    den = 2 * (1 * 1 + 1 * 2 + 1 * 2)
    v = core.evaluate_polynomial(sp, thr, sampling="distinct").value
    assert v == pytest.approx(num / den, abs=1e-15)


def test_budget_exceeded(rng):
    sp = core.random_space(rng, 20)
    with pytest.raises(core.BudgetExceeded):
        core.evaluate_polynomial(sp, core.PolynomialSpec.constant(4), budget=1000)


# -- truncation / concatenation -----------------------------------------

def test_truncate_two_leaf():
    assert core.truncate(two_leaf(6.0), 2.0).distance_matrix()[0, 1] == 4.0


def test_truncate_high_level_is_identity(rng):
    sp = core.random_space(rng, 9)
    assert core.isomorphic(core.truncate(sp, sp.height() / 2), sp)


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_truncation_composes(seed, a, b):
    r = np.random.default_rng(seed)
    sp = core.random_space(r, int(r.integers(1, 10)), integer_values=bool(seed % 2))
    h = a * (sp.height() + 1)
    h2 = b * h
    assert core.canonical_hash(core.truncate(core.truncate(sp, h), h2)) == \
        core.canonical_hash(core.truncate(sp, h2))


def test_concatenate_identity_and_pair(rng):
    u = core.random_space(rng, 4, max_value=3.0)
    h = u.height()
    assert core.isomorphic(core.concatenate([u, core.zero_space()], h), u)
    v = core.concatenate([core.single_leaf(0.3), core.single_leaf(0.9)], 3.0)
    assert v.distance_matrix()[0, 1] == 6.0
    assert v.total_mass == pytest.approx(1.2, abs=1e-15)
    with pytest.raises(ComponentTooTall):
        core.concatenate([two_leaf(6.0), core.single_leaf()], 2.0)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_concatenation_semigroup(seed):
    r = np.random.default_rng(seed)
    h = 2.0
    u, v, w = (core.metric_transform(core.random_space(r, int(r.integers(1, 5))),
                                     lambda x: 4.0 * (-math.expm1(-x))) for _ in range(3))
    H = core.canonical_hash
    assert H(core.concatenate([core.concatenate([u, v], h), w], h)) == \
        H(core.concatenate([u, core.concatenate([v, w], h)], h))
    assert H(core.concatenate([u, v], h)) == H(core.concatenate([v, u], h))


# -- grafting ------------------------------------------------------------

def test_graft_top_below_2t(rng):
    top = core.from_distance_matrix([[0, 1], [1, 0]], [0.5, 0.5])
    base = two_leaf(10.0)
    assert core.isomorphic(core.graft(base, top, 1.0, rng), top)


def test_graft_single_leaf_base(rng):
    top = core.from_merges(3, [], [1, 1, 1], top_value=2.0)
    g = core.graft(core.single_leaf(), top, 1.0, rng)
    D = g.distance_matrix()
    assert np.all(D[~np.eye(3, dtype=bool)] == 2.0)


def test_graft_two_leaf_base_binomial(rng):
    # [DERIVED] separate lines land on different base leaves w.p. 1/2
    top = core.from_merges(2, [], [0.5, 0.5], top_value=2.0)
    base = two_leaf(10.0)
    n = 100000
    vals = np.array([core.graft(base, top, 1.0, rng).distance_matrix()[0, 1]
                     for _ in range(n)])
    assert set(np.unique(vals)) <= {2.0, 12.0}
    assert abs(np.mean(vals == 12.0) - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_graft_errors(rng):
    with pytest.raises(TopTooTall):
        core.graft(core.single_leaf(), two_leaf(5.0), 1.0, rng)


# -- metric transform / equivalence --------------------------------------

def test_metric_transform():
    sp = two_leaf(3.0)
    assert core.isomorphic(core.metric_transform(sp, lambda r: r), sp)
    assert core.metric_transform(sp).distance_matrix()[0, 1] == pytest.approx(
        1 - math.exp(-3.0), abs=1e-15)
    with pytest.raises(core.NonMonotoneMap):
        core.metric_transform(sp, lambda r: -r)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_metric_transform_stays_ultrametric(seed):
    r = np.random.default_rng(seed)
    sp = core.metric_transform(core.random_space(r, int(r.integers(2, 10))))
    D = sp.distance_matrix()
    assert np.array_equal(core.from_distance_matrix(D, sp.masses).distance_matrix(), D)


def test_isomorphism_cases(rng):
    sp = core.random_space(rng, 6)
    perm = rng.permutation(6)
    D = sp.distance_matrix()[np.ix_(perm, perm)]
    assert core.isomorphic(core.from_distance_matrix(D, sp.masses[perm]), sp)
    assert not core.isomorphic(two_leaf(4.0), two_leaf(6.0))


def test_zero_distance_leaves_merge():
    # [DERIVED] support-based equivalence: leaves at distance 0 are one point
    a, b = 0.3, 0.45
    split = core.from_distance_matrix([[0, 0, 5], [0, 0, 5], [5, 5, 0]], [a, b, 0.25])
    merged = core.from_distance_matrix([[0, 5], [5, 0]], [a + b, 0.25])
    assert core.isomorphic(split, merged)
    # exhaustive bijection search over the reduced supports agrees
    A, pa = core._support(split)
    B, pb = core._support(merged)
    assert len(pa) == len(pb) == 2
    assert any(np.allclose(A[np.ix_(p, p)], B) and np.allclose(pa[list(p)], pb)
               for p in itertools.permutations(range(2)))


def test_zero_mass_leaves_ignored():
    a = core.from_distance_matrix([[0, 2, 8], [2, 0, 8], [8, 8, 0]], [0.5, 0.5, 0.0])
    b = core.from_distance_matrix([[0, 2], [2, 0]], [0.5, 0.5])
    assert core.isomorphic(a, b)
    assert core.diameter(a) == 2.0


# -- compactness functionals and GP bounds -------------------------------

def test_covering_and_diameter_fixtures():
    sp = two_leaf(5.0)
    assert core.diameter(sp) == 5.0
    assert core.covering_number(sp, 0.1) == 2
    assert core.covering_number(sp, 6.0) == 1
    # three clusters of masses .6/.3/.1 at eps = 0.15 -> two balls carry .9 >= .85
    sp3 = core.from_distance_matrix([[0, 4, 4], [4, 0, 4], [4, 4, 0]], [0.6, 0.3, 0.1])
    assert core.covering_number(sp3, 0.15) == 2
    assert core.covering_number(sp3, 0.05) == 3
    with pytest.raises(EmptySpace):
        core.diameter(core.zero_space())


def test_gp_bounds_fixtures():
    a = two_leaf(4.0)
    assert core.gp_distance_bounds(a, a) == (0.0, 0.0)
    lo, hi = core.gp_distance_bounds(a, two_leaf(6.0))
    assert lo == pytest.approx(1.0, abs=1e-15)
    assert hi >= lo


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_gp_bounds_ordering(seed):
    r = np.random.default_rng(seed)
    a = core.random_space(r, int(r.integers(1, 6)))
    b = core.random_space(r, int(r.integers(1, 6)))
    lo, hi = core.gp_distance_bounds(a, b)
    assert 0.0 <= lo <= hi + 1e-12


def test_decompose_compose(rng):
    sp = core.random_space(rng, 5)
    dec = core.decompose(sp)
    assert dec.normalized_space.total_mass == pytest.approx(1.0)
    back = core.compose(dec)
    assert np.allclose(back.masses, sp.masses, rtol=1e-14)
    assert np.array_equal(back.distance_matrix(), sp.distance_matrix())
    z = core.from_distance_matrix([[0, 1], [1, 0]], [0, 0], allow_zero=True)
    assert core.decompose(z).normalized_space is None
    assert core.decompose(z, retain_genealogy=True).retained


def test_pair_distance_law_matches_polynomial(rng):
    sp = core.random_space(rng, 7)
    vals, w = core.pair_distance_law(sp)
    lam = 0.4
    ex = core.evaluate_polynomial(sp, core.PolynomialSpec.exponential(2, lam)).value
    assert float(np.dot(w, np.exp(-lam * vals))) == pytest.approx(ex, abs=1e-13)


def test_separating_polynomial():
    a, b = two_leaf(4.0), two_leaf(6.0)
    res = core.find_separating_polynomial(a, b)
    assert res is not None and res[1] != res[2]
    assert core.find_separating_polynomial(a, a) is None
