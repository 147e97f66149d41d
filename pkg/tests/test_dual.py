import math

import numpy as np
import pytest
from scipy import stats

from genealogy_lab import core, dual, forward, harness
from genealogy_lab.errors import MassPathGap, OrderMismatch


def closed_form_n2(d, lam, t):
    return (d + 2 * lam * math.exp(-(d + 2 * lam) * t)) / (d + 2 * lam)


def test_single_line_no_events(rng):
    cs = dual.coalescent_run(dual.DualConfig(n=1, d=2.0, horizon=3.0, mode="feynman_kac"), rng)
    assert cs.n_blocks == 1 and cs.beta == 0.0


def test_pair_coalescence_exponential():
    # [DERIVED] n = 2 coalescence time ~ Exp(d)
    rng = np.random.default_rng(7)
    d = 1.7
    cfg = dual.DualConfig(n=2, d=d, horizon=1e9)
    t = np.array([dual.coalescent_run(cfg, rng).distances()[0, 1] / 2 for _ in range(100000)])
    assert stats.kstest(t, "expon", args=(0, 1 / d)).pvalue > 0.01


def test_three_lines_mean_time(rng):
    # [DERIVED] E[T_MRCA] for n = 3 is 1/(3d) + 1/d
    d = 0.8
    cfg = dual.DualConfig(n=3, d=d, horizon=1e9)
    t = np.array([dual.coalescent_run(cfg, rng).distances().max() / 2 for _ in range(40000)])
    assert abs(t.mean() - (1 / (3 * d) + 1 / d)) <= 3 * t.std(ddof=1) / math.sqrt(t.size)


def test_feynman_kac_beta(rng):
    # with n = 2 the weight exponent is d * (time spent as two blocks)
    d, T = 1.2, 0.9
    cfg = dual.DualConfig(n=2, d=d, horizon=T, mode="feynman_kac")
    for _ in range(200):
        cs = dual.coalescent_run(cfg, rng)
        tau = cs.distances()[0, 1] / 2
        assert cs.beta == pytest.approx(d * min(tau, T), rel=1e-12)


def test_duality_value_trivial_cases(rng):
    lam, T = 0.5, 1.3
    poly = core.PolynomialSpec.exponential(2, lam)
    init = core.single_leaf()
    never = dual.coalescent_run(dual.DualConfig(n=2, d=0.0, horizon=T), rng)
    assert dual.duality_value(init, never, poly, rng) == pytest.approx(math.exp(-2 * lam * T))
    cs = dual.coalescent_run(dual.DualConfig(n=2, d=50.0, horizon=T), rng)
    assert cs.n_blocks == 1
    r = cs.distances()[0, 1]
    assert dual.duality_value(init, cs, poly, rng) == pytest.approx(math.exp(-lam * r))
    with pytest.raises(OrderMismatch):
        dual.duality_value(init, cs, core.PolynomialSpec.exponential(3, lam), rng)


@pytest.mark.parametrize("d,lam,t", [(1.0, 0.5, 1.0), (2.0, 0.3, 0.4), (0.5, 1.0, 3.0)])
def test_expected_value_closed_form(d, lam, t):
    # [DERIVED] closed-form integral oracle
    v = dual.expected_duality_value_n2(core.single_leaf(), core.PolynomialSpec.exponential(2, lam),
                                       d, t)
    assert v == pytest.approx(closed_form_n2(d, lam, t), abs=1e-12)


def test_paper_value():
    assert closed_form_n2(1.0, 0.5, 1.0) == pytest.approx((1 + math.exp(-2)) / 2, abs=1e-15)
    assert round(closed_form_n2(1.0, 0.5, 1.0), 5) == 0.56767


def test_mc_dual_matches_expectation(rng):
    d, lam, T = 1.0, 0.5, 1.0
    init = core.from_distance_matrix([[0, 3], [3, 0]], [0.3, 0.7])
    poly = core.PolynomialSpec.exponential(2, lam)
    cfg = dual.DualConfig(n=2, d=d, horizon=T)
    v = np.array([dual.duality_value(init, dual.coalescent_run(cfg, rng), poly, rng)
                  for _ in range(40000)])
    ex = dual.expected_duality_value_n2(init, poly, d, T)
    assert abs(v.mean() - ex) <= 3 * v.std(ddof=1) / math.sqrt(v.size)


def test_entrance_law_basic(rng):
    assert dual.entrance_law_tree(1, 1.0, 1.0, rng).n_leaves == 1
    for _ in range(50):
        tr = dual.entrance_law_tree(30, 0.7, 1.0, rng)
        assert tr.distance_matrix().max() <= 1.4


def test_entrance_law_stabilizes(rng):
    # [DERIVED] self-consistency: pair-distance laws for 100 and 400 lines
    # differ by less than twice the Monte Carlo noise floor
    def pairs(n, reps):
        out = []
        for _ in range(reps):
            sp = dual.entrance_law_tree(n, 1.0, 1.0, rng)
            out.append(core.sample_distance_matrix(sp, 2, rng).distances[0, 1])
        return np.array(out)
    reps = 3000
    a, b = pairs(100, reps), pairs(400, reps)
    w = stats.wasserstein_distance(a, b)
    noise = np.mean([stats.wasserstein_distance(*np.split(rng.permutation(np.r_[a, b]), 2))
                     for _ in range(50)])
    assert w < 2 * noise


def test_conditioned_constant_path_is_plain(rng):
    m, b, T = 0.5, 1.0, 2.0
    cfg = dual.DualConfig(n=2, d=b, horizon=T, mode="conditioned",
                          mass_path=forward.MassPath.constant(m, T))
    t = dual.conditioned_pair_times(cfg, 50000, rng)
    atom = np.mean(~np.isfinite(t))
    p = math.exp(-b / m * T)
    assert abs(atom - p) <= 3 * math.sqrt(p * (1 - p) / t.size)
    cont = t[np.isfinite(t)]
    assert stats.kstest(cont, lambda x: (1 - np.exp(-b / m * x)) / (1 - p)).pvalue > 0.01


def test_conditioned_loop_matches_vectorized(rng):
    mp = forward.MassPath(np.array([0.0, 0.3, 0.7]), np.array([2.0, 0.5, 1.0]), 1.0)
    cfg = dual.DualConfig(n=2, d=1.0, horizon=1.0, mode="conditioned", mass_path=mp)
    fast = np.minimum(dual.conditioned_pair_times(cfg, 20000, rng), 1.0)
    slow = [dual.coalescent_run(cfg, rng).distances()[0, 1] / 2 for _ in range(20000)]
    # no-merge probability exp(-(0.3/2 + 0.4/0.5 + 0.3/1))
    assert np.mean(fast == 1.0) == pytest.approx(math.exp(-1.25), abs=0.012)
    assert stats.ks_2samp(fast, slow).pvalue > 0.01


def test_conditioned_extinct_path_freezes(rng):
    # zero mass from dual time 0.4 on: no merges after that
    mp = forward.MassPath(np.array([0.0, 0.4]), np.array([0.3, 0.0]), 1.0)
    cfg = dual.DualConfig(n=3, d=1.0, horizon=1.0, mode="conditioned", mass_path=mp)
    for _ in range(300):
        D = dual.coalescent_run(cfg, rng).distances()
        off = D[np.triu_indices(3, 1)]
        assert np.all((off <= 0.8) | (off == 2.0))


def test_mass_path_gap(rng):
    mp = forward.MassPath(np.array([0.0]), np.array([1.0]), 0.5)
    with pytest.raises(MassPathGap):
        dual.coalescent_run(dual.DualConfig(n=2, horizon=1.0, mode="conditioned",
                                            mass_path=mp), rng)


def test_dual_kernels():
    a = np.array([[0.2, 0.8], [0.4, 0.6]])
    cfg = dual.DualConfig(n=2, migration_kernel=a)
    assert np.allclose(cfg.dual_kernel(), [[0.2, 0.6], [0.6, 0.6]])
    cfg.kernel_mode = "adjoint"
    At = a.T / a.T.sum(axis=1, keepdims=True)
    assert np.allclose(cfg.dual_kernel(), At)


def test_spatial_lines_never_merge_apart(rng):
    # two sites with no migration: lines at different sites never coalesce
    cfg = dual.DualConfig(n=2, d=5.0, horizon=1.0, migration_rate=0.0,
                          migration_kernel=np.eye(2), line_locations=np.array([0, 1]))
    for _ in range(100):
        assert dual.coalescent_run(cfg, rng).n_blocks == 2


def test_spatial_rate_kernel_matches_oracle(rng):
    # [DERIVED] matrix-exponential oracle; the symmetrized kernel of a
    # non-doubly-stochastic matrix acts as a jump-rate kernel
    a = np.array([[0.2, 0.8], [0.4, 0.6]])
    d, rate, lam, T = 1.5, 0.8, 0.4, 1.0
    cfg = dual.DualConfig(n=2, d=d, horizon=T, migration_rate=rate, migration_kernel=a,
                          line_locations=np.array([0, 1]))
    tau = np.array([dual.coalescent_run(cfg, rng).distances()[0, 1] / 2 for _ in range(20000)])
    v = np.exp(-2 * lam * tau)
    ex = harness.spatial_pair_oracle(d, rate, cfg.dual_kernel(), lam, T, start=(0, 1))
    assert abs(v.mean() - ex) <= 3 * v.std(ddof=1) / math.sqrt(v.size)
