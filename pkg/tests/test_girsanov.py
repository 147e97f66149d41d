import math

import numpy as np
import pytest

from genealogy_lab import core, forward, girsanov
from genealogy_lab.errors import EffectiveSampleSizeTooLow, LogGap, ParameterMismatch


def _two_type_space():
    return core.from_distance_matrix([[0, 2, 4], [2, 0, 4], [4, 4, 0]], [0.2, 0.3, 0.5],
                                     types=[0, 1, 1])


def test_psi_constant_fitness():
    sp = _two_type_space()
    assert girsanov.psi(sp, girsanov.GirsanovConfig(0.6, 2.0, fitness=np.ones(2))) \
        == pytest.approx(0.3)
    assert girsanov.psi(sp, girsanov.GirsanovConfig(0.6, 2.0, fitness=np.zeros(2))) == 0.0


def test_psi_haploid_closed_form():
    # [DERIVED] haploid chi'(u, v) = chi(u): psi = alpha/gamma * sum_i m_i chi(t_i)
    sp = _two_type_space()
    cfg = girsanov.GirsanovConfig(0.5, 1.0, fitness=np.array([0.2, 0.9]))
    assert girsanov.psi(sp, cfg) == pytest.approx(0.5 * (0.2 * 0.2 + 0.8 * 0.9), abs=1e-15)


def test_psi_pair_fitness():
    sp = _two_type_space()
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    cfg = girsanov.GirsanovConfig(1.0, 1.0, chi_pair=C)
    # mass 0.2 of type 0, 0.8 of type 1: P(types differ) = 2 * 0.2 * 0.8
    assert girsanov.psi(sp, cfg) == pytest.approx(0.32)


def _neutral_log(rng, N=6, T=1.0, theta=0.0):
    cfg = forward.MoranConfig(N=N, d=1.0, theta=theta,
                              mutation_kernel=np.array([[0.0, 1.0], [1.0, 0.0]]),
                              initial=core.from_distance_matrix([[0, 1], [1, 0]], [0.5, 0.5],
                                                                types=[0, 1]),
                              record_log=True)
    return forward.moran_run(cfg, T, rng).event_log


def test_zero_alpha_weight_is_one(rng):
    log = _neutral_log(rng)
    for form in ("diffusion", "jump"):
        w = girsanov.path_weight(log, girsanov.GirsanovConfig(0.0, fitness=np.array([0, 1.0]),
                                                              form=form))
        assert w.weight == 1.0


def test_constant_fitness_weight_is_one(rng):
    log = _neutral_log(rng)
    w = girsanov.path_weight(log, girsanov.GirsanovConfig(0.7, fitness=np.array([0.4, 0.4])))
    assert w.weight == pytest.approx(1.0, abs=1e-14)


def test_jump_weight_mean_one(rng):
    cfg = girsanov.GirsanovConfig(0.8, fitness=np.array([0.0, 1.0]), form="jump")
    w = np.array([girsanov.path_weight(_neutral_log(rng, N=5), cfg).weight for _ in range(20000)])
    assert abs(w.mean() - 1.0) <= 3 * w.std(ddof=1) / math.sqrt(w.size)


def test_log_gap_and_mismatch(rng):
    log = _neutral_log(rng, T=1.0)
    cfg = girsanov.GirsanovConfig(0.5, fitness=np.array([0.0, 1.0]))
    with pytest.raises(LogGap):
        girsanov.path_weight(log, cfg, horizon=1.5)
    with pytest.raises(ParameterMismatch):
        girsanov.path_weight(log, girsanov.GirsanovConfig(0.5, gamma=2.0,
                                                          fitness=np.array([0.0, 1.0])))
    with pytest.raises(ParameterMismatch):
        girsanov.GirsanovConfig(-1.0)
    with pytest.raises(ParameterMismatch):
        girsanov.GirsanovConfig(0.5, fitness=np.array([0.0, 1.5]))
    with pytest.raises(ParameterMismatch):
        girsanov.GirsanovConfig(0.5, chi_pair=np.array([[0.0, 1.0], [1.0, 0.0]])) \
            .haploid_fitness(2)
    assert LogGap("x").code == "girsanov.LogGap"


def test_theta_needs_kernel(rng):
    log = _neutral_log(rng, theta=0.5)
    cfg = girsanov.GirsanovConfig(0.5, fitness=np.array([0.0, 1.0]))
    with pytest.raises(ParameterMismatch):
        girsanov.path_weight(log, cfg)
    w = girsanov.path_weight(log, cfg, mutation_kernel=np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.isfinite(w.log_weight)


def test_zero_alpha_reweighting_is_plain_mean(rng):
    f = rng.random(500)
    v = girsanov.reweighted_expectation(f, np.ones(500))
    assert v.value == pytest.approx(f.mean(), abs=1e-15)


def test_ess_floor():
    w = np.r_[1000.0, np.full(999, 1e-6)]
    assert girsanov.effective_sample_size(w) < 2
    with pytest.raises(EffectiveSampleSizeTooLow):
        girsanov.reweighted_expectation(np.ones(1000), w)


@pytest.mark.parametrize("alpha,T", [(0.5, 1.0), (2.0, 0.3), (1.0, 3.0)])
def test_exact_two_individual(alpha, T):
    # [DERIVED] matrix-exponential oracle for the selective N = 2 chain
    r = girsanov.exact_two_individual_check(alpha, 1.0, T)
    assert r["abs_diff"] <= 1e-6


def test_count_chain_weight_mean_one():
    cfg = girsanov.GirsanovConfig(0.5, 1.0, fitness=np.array([0.0, 1.0]), form="jump")
    seeds = np.random.SeedSequence(3).spawn(20000)
    kT, nu, I = girsanov.count_chain_paths(20, 10, 1.0, 1.0, 0.5, seeds)
    w = np.exp(girsanov.count_chain_weight(kT, nu, I, 20, 10, cfg))
    assert abs(w.mean() - 1.0) <= 3 * w.std(ddof=1) / math.sqrt(w.size)


def test_count_chain_vs_event_log_weight(rng):
    # the labelled-individual likelihood ratio differs from the count-chain one
    # by the fit -> fit replacements: n_same log(1 + c) - alpha int k (k-1) / N
    N, alpha = 6, 0.9
    log = _neutral_log(rng, N=N)
    cfg = girsanov.GirsanovConfig(alpha, fitness=np.array([0.0, 1.0]), form="jump")
    full = girsanov.path_weight(log, cfg).log_weight
    types = np.asarray(log.initial_types).copy()
    k0 = int(types.sum())
    n_up, n_same, I, J, t = 0, 0, 0.0, 0.0, 0.0
    for te, a, b in zip(log.times, log.a, log.b):
        k = types.sum()
        I += (te - t) * k * (N - k) / N ** 2
        J += (te - t) * k * (k - 1) / N
        t = te
        if types[a] == 1:
            n_up += int(types[b] == 0)
            n_same += int(types[b] == 1)
        types[b] = types[a]
    k = types.sum()
    I += (1.0 - t) * k * (N - k) / N ** 2
    J += (1.0 - t) * k * (k - 1) / N
    cc = girsanov.count_chain_weight(int(types.sum()), n_up, I, N, k0, cfg)
    assert full == pytest.approx(cc + n_same * math.log1p(2 * alpha / N) - alpha * J, abs=1e-12)


def test_compare_with_selective():
    cfg = girsanov.GirsanovConfig(0.5, 1.0, fitness=np.array([0.0, 1.0]), form="jump")
    ss = np.random.SeedSequence(11)
    r = girsanov.compare_with_selective(cfg, 20, 1.0, 0.5, ss.spawn(20000), ss.spawn(5000))
    assert r["pass"]
    assert abs(r["mean_weight"] - 1.0) <= 3 * r["mean_weight_se"]
