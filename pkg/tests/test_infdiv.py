import math

import numpy as np
import pytest
from scipy import stats

from genealogy_lab import core, infdiv
from genealogy_lab.errors import ComponentTooTall, KernelNotBoundaryVanishing

H = 2.0


def boundary_poly(h=H):
    return core.PolynomialSpec.custom(2, lambda r: np.maximum(0.0, 1.0 - r[..., 0, 1] / (2 * h)))


def _atoms():
    return [core.single_leaf(0.5),
            core.from_distance_matrix([[0, 1], [1, 0]], [0.3, 0.6]),
            core.from_distance_matrix([[0, 2, 3], [2, 0, 3], [3, 3, 0]], [0.2, 0.2, 0.4])]


def test_spec_validation():
    with pytest.raises(ComponentTooTall):
        infdiv.LevyMeasureSpec([1.0], [core.from_distance_matrix([[0, 5], [5, 0]], [1, 1])], 2.0)
    with pytest.raises(ValueError):
        infdiv.LevyMeasureSpec([-1.0], [core.single_leaf()], 1.0)
    spec = infdiv.LevyMeasureSpec([0.5, 1.0, 2.0], _atoms(), H)
    back = infdiv.LevyMeasureSpec.from_dict(spec.to_dict())
    assert np.array_equal(back.intensities, spec.intensities)
    assert all(core.isomorphic(a, b) for a, b in zip(back.atoms, spec.atoms))


def test_void_probability(rng):
    # [DERIVED] P(no point) = exp(-c)
    c = 1e-6
    spec = infdiv.LevyMeasureSpec([c], [core.single_leaf()], 1.0)
    n = 10 ** 6
    empty = np.mean(infdiv.sample_counts(spec, rng, size=n)[:, 0] == 0)
    p = math.exp(-c)
    assert abs(empty - p) <= 3 * math.sqrt(p * (1 - p) / n) + 1.0 / n


def test_single_point_is_atom(rng):
    u = _atoms()[2]
    spec = infdiv.LevyMeasureSpec([0.7], [u], H)
    for _ in range(200):
        v = infdiv.poisson_concatenate(spec, rng)
        k = round(v.total_mass / u.total_mass)
        if k == 1:
            assert core.isomorphic(v, u)
            return
    pytest.fail("no single-point outcome")


def test_campbell(rng):
    spec = infdiv.LevyMeasureSpec([0.5, 1.0, 2.0], _atoms(), H)
    r = infdiv.campbell_check(spec, 100000, rng)
    assert r["exact"] == pytest.approx(0.5 * 0.5 + 0.9 + 2.0 * 0.8)
    assert r["pass"]


def test_zero_kernel_laplace_is_one(rng):
    spec = infdiv.LevyMeasureSpec([0.5, 1.0], _atoms()[:2], H)
    r = infdiv.laplace_check(spec, core.PolynomialSpec.constant(2, 0.0), 1000, rng)
    assert r["laplace_mc"] == 1.0 and r["laplace_exact"] == 1.0


def test_one_atom_series_oracle():
    # [DERIVED] sum_k Pois(k; c) exp(-Phi(k copies concatenated)) equals the
    # Levy-Khintchine form when the kernel vanishes on the 2h boundary
    u = _atoms()[2]
    c = 1.3
    poly = boundary_poly()
    spec = infdiv.LevyMeasureSpec([c], [u], H)
    series = math.fsum(stats.poisson.pmf(k, c) * math.exp(
        -(core.evaluate_polynomial(core.concatenate([u] * k, H), poly, normalized=False).value
          if k else 0.0)) for k in range(25))
    phi_u = core.evaluate_polynomial(u, poly, normalized=False).value
    assert series == pytest.approx(math.exp(-c * (1 - math.exp(-phi_u))), abs=1e-12)
    r = infdiv.laplace_check(spec, poly, 20000, np.random.default_rng(1))
    assert r["laplace_exact"] == pytest.approx(series, abs=1e-12)


def test_laplace_mc(rng):
    spec = infdiv.LevyMeasureSpec([0.5, 1.0, 2.0], _atoms(), H)
    assert infdiv.laplace_check(spec, boundary_poly(), 100000, rng)["pass"]


def test_non_vanishing_kernel_rejected(rng):
    spec = infdiv.LevyMeasureSpec([1.0], _atoms()[:1], H)
    with pytest.raises(KernelNotBoundaryVanishing):
        infdiv.laplace_check(spec, core.PolynomialSpec.exponential(2, 0.3), 100, rng)
    # order 1 is always accepted
    infdiv.check_boundary_vanishing(core.PolynomialSpec.constant(1), H)


def test_split_trivial_cases(rng):
    spec = infdiv.LevyMeasureSpec([0.5, 1.0, 2.0], _atoms(), H)
    assert infdiv.split_check(spec, 1, 300, rng)["pass"]
    zero = infdiv.LevyMeasureSpec([0.0], _atoms()[:1], H)
    r = infdiv.split_check(zero, 3, 50, rng)
    assert r["pass"] and r["mass_ks_p"] == 1.0


def test_split_ks(rng):
    spec = infdiv.LevyMeasureSpec([0.5, 1.0, 2.0], _atoms(), H)
    r = infdiv.split_check(spec, 4, 3000, rng)
    assert r["pass"], r


def test_truncation(rng):
    spec = infdiv.LevyMeasureSpec([0.5, 1.0, 2.0], _atoms(), H)
    assert infdiv.truncation_check(spec, 0.8, 3000, rng)["pass"]


def test_semigroup_laws(rng):
    fails = infdiv.semigroup_law_check(rng, n_instances=300)
    assert fails == {"associativity": 0, "commutativity": 0, "identity": 0, "truncation": 0}
