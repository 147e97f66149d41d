"""Radon-Nikodym reweighting of neutral Moran paths into selective ones.

The fitness functional is ``Psi = (alpha/gamma) <nu, chi'_{1,2}>``.  For
path weights the pair fitness must be haploid, ``chi'(u, v) = chi(u)``, so
``Psi`` is ``alpha/gamma`` times the mean fitness.  Two weight forms are
provided:

``diffusion``
    ``exp(M_T - [M]_T / 2)`` with ``M_T = Psi_T - Psi_0 - int Omega Psi ds``
    and ``[M]_T = (alpha^2/gamma) int Var_nu[chi] ds``.  ``Omega`` is the
    neutral generator (``compensator="neutral"``) or the selective one.
``jump``
    the exact likelihood ratio of the finite-N selective Moran model with
    respect to the neutral one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np
from scipy import integrate
from scipy.linalg import expm

from . import core
from .errors import (EffectiveSampleSizeTooLow, LogGap, ParameterMismatch)
from .forward import EventLog

__all__ = ["GirsanovConfig", "PathWeight", "psi", "path_weight", "count_chain_paths",
           "count_chain_weight", "reweighted_expectation", "compare_with_selective",
           "exact_two_individual_check", "effective_sample_size"]


@dataclass
class GirsanovConfig:
    """Selection strength ``alpha``, resampling normalisation ``gamma`` (the
    forward pair rate ``d``) and the fitness.  ``fitness`` is a per-type
    vector ``chi``; ``chi_pair`` an optional type-pair matrix ``chi'``."""
    alpha: float
    gamma: float = 1.0
    fitness: Optional[np.ndarray] = None
    chi_pair: Optional[np.ndarray] = None
    compensator: str = "neutral"
    form: str = "diffusion"
    ess_floor: float = 100.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterMismatch("alpha must be >= 0")
        if not self.gamma > 0:
            raise ParameterMismatch("gamma must be > 0")
        if self.compensator not in ("neutral", "selective"):
            raise ParameterMismatch(f"unknown compensator {self.compensator!r}")
        if self.form not in ("diffusion", "jump"):
            raise ParameterMismatch(f"unknown weight form {self.form!r}")
        for x in (self.fitness, self.chi_pair):
            if x is not None and (np.any(np.asarray(x) < 0) or np.any(np.asarray(x) > 1)):
                raise ParameterMismatch("fitness values must lie in [0, 1]")

    def pair_matrix(self, n_types):
        if self.chi_pair is not None:
            C = np.asarray(self.chi_pair, dtype=float)
        else:
            chi = self.haploid_fitness(n_types)
            C = np.repeat(chi[:, None], len(chi), axis=1)
        if C.shape[0] < n_types:
            raise ParameterMismatch("fitness shorter than the type alphabet")
        return C

    def haploid_fitness(self, n_types=1):
        if self.chi_pair is not None:
            C = np.asarray(self.chi_pair, dtype=float)
            if not np.allclose(C, C[:, :1]):
                raise ParameterMismatch("path weights need chi'(u, v) = chi(u)")
            chi = C[:, 0].copy()
        elif self.fitness is not None:
            chi = np.asarray(self.fitness, dtype=float)
        else:
            chi = np.zeros(max(n_types, 1))
        if chi.shape[0] < n_types:
            raise ParameterMismatch("fitness shorter than the type alphabet")
        return chi


@dataclass
class PathWeight:
    M_T: float
    qv: float
    weight: float
    log_weight: float

    def __iter__(self):
        return iter((self.M_T, self.qv, self.weight))


def psi(space, config):
    """``(alpha/gamma) <nu, chi'_{1,2}>`` evaluated exactly (order-2 sum)."""
    if space.total_mass <= 0:
        raise core.EmptySpace("psi needs a space with positive mass")
    m = space.masses / space.total_mass
    t = space.types if space.is_marked else np.zeros(space.n_leaves, dtype=np.int64)
    C = config.pair_matrix(int(t.max()) + 1)
    val = math.fsum((np.outer(m, m) * C[t[:, None], t[None, :]]).ravel().tolist())
    return config.alpha / config.gamma * val


@nb.njit(cache=True)
def _log_integrals(times, kinds, a, b, types, chi, dchi, N, T, jump_c):
    """Piecewise-exact integrals along a single-site neutral event log.

    Returns (S1_0, S1_T, int Var, int mean(dchi), int S1 (N-1)/N, sum log jumps).
    """
    S1 = 0.0
    S2 = 0.0
    SB = 0.0
    for i in range(N):
        x = chi[types[i]]
        S1 += x
        S2 += x * x
        SB += dchi[types[i]]
    S1_0 = S1
    iv = 0.0
    im = 0.0
    isel = 0.0
    lj = 0.0
    t = 0.0
    for e in range(times.shape[0]):
        te = times[e]
        if te > T:
            break
        h = te - t
        mean = S1 / N
        iv += h * (S2 / N - mean * mean)
        im += h * SB / N
        isel += h * S1 * (N - 1) / N
        t = te
        if kinds[e] == 0:
            ind = b[e]
            new = types[a[e]]
            lj += math.log1p(jump_c * chi[new])
        else:
            ind = a[e]
            new = b[e]
        old = types[ind]
        S1 += chi[new] - chi[old]
        S2 += chi[new] * chi[new] - chi[old] * chi[old]
        SB += dchi[new] - dchi[old]
        types[ind] = new
    h = T - t
    mean = S1 / N
    iv += h * (S2 / N - mean * mean)
    im += h * SB / N
    isel += h * S1 * (N - 1) / N
    return S1_0, S1, iv, im, isel, lj


def path_weight(event_log, config, horizon=None, mutation_kernel=None):
    """Girsanov weight of a neutral single-site Moran path.

    ``event_log`` must come from a run with ``alpha = 0``, resampling rate
    ``d = gamma`` and ``record_log=True``.  Mutation (kind 1) events are
    allowed; ``mutation_kernel`` and ``theta`` are needed for the neutral
    compensator term and default to the log's parameters.
    """
    log = event_log
    T = log.horizon if horizon is None else float(horizon)
    if T > log.horizon + 1e-12:
        raise LogGap(f"event log ends at {log.horizon}, weight requested at {T}")
    if len(log) and (not np.all(np.isfinite(log.times)) or np.any(np.diff(log.times) < 0)):
        raise LogGap("event times must be finite and non-decreasing")
    p = log.params or {}
    if p.get("alpha", 0.0) != 0.0 or np.any(log.kinds == 3):
        raise ParameterMismatch("path weights are defined on neutral paths (alpha = 0)")
    if np.any(log.kinds == 2) or np.any(log.initial_locations != log.initial_locations[0]):
        raise ParameterMismatch("path weights are implemented for a single site")
    if np.any((log.kinds != 0) & (log.kinds != 1)):
        raise ParameterMismatch("unexpected event kinds in a Moran log")
    if "d" in p and not math.isclose(p["d"], config.gamma, rel_tol=1e-12):
        raise ParameterMismatch(f"gamma = {config.gamma} but the log was run with d = {p['d']}")
    types0 = np.asarray(log.initial_types, dtype=np.int64)
    nt = max(int(types0.max()) + 1, int(log.b[log.kinds == 1].max()) + 1
             if np.any(log.kinds == 1) else 0)
    chi = config.haploid_fitness(nt)
    theta = float(p.get("theta", 0.0))
    if theta > 0:
        if mutation_kernel is None:
            raise ParameterMismatch("a mutation kernel is needed when theta > 0")
        B = np.asarray(mutation_kernel, dtype=float)
        dchi = theta * (B @ chi[:B.shape[0]] - chi[:B.shape[0]])
    else:
        dchi = np.zeros_like(chi)
    N = int(log.N)
    a_, g = float(config.alpha), float(config.gamma)
    S0, ST, iv, im, isel, lj = _log_integrals(
        np.asarray(log.times, float), np.asarray(log.kinds, np.int64),
        np.asarray(log.a, np.int64), np.asarray(log.b, np.int64), types0.copy(),
        chi, dchi, N, T, 2.0 * a_ / (g * N))
    qv = a_ * a_ / g * iv
    comp = a_ / g * im
    if config.compensator == "selective":
        comp += a_ * a_ / g * iv
    M = a_ / g * (ST - S0) / N - comp
    if config.form == "diffusion":
        lw = M - 0.5 * qv
    else:
        lw = lj - a_ * isel
        M = lw + 0.5 * qv
    return PathWeight(float(M), float(qv), math.exp(lw), float(lw))


# ----------------------------------------------------------------------------
# two-type count chain (fast path for many replicates)
# ----------------------------------------------------------------------------

@nb.njit(cache=True)
def _count_chunk(k, t, I, n_up, N, T, up_prob, scale, exps, us):
    """Advance the fit-type count; returns (k, t, I, n_up, done).

    Holding rate ``scale * k (N - k)``; ``I`` accumulates ``int p (1 - p)``.
    """
    N2 = float(N) * N
    for e in range(exps.shape[0]):
        if k == 0 or k == N:
            return k, t, I, n_up, True
        r = scale * k * (N - k)
        h = exps[e] / r
        if t + h > T:
            I += (T - t) * k * (N - k) / N2
            return k, T, I, n_up, True
        I += exps[e] / (scale * N2)
        t += h
        if us[e] < up_prob:
            k += 1
            n_up += 1
        else:
            k -= 1
    return k, t, I, n_up, False


def count_chain_paths(N, k0, T, gamma, alpha, seeds, selective=False):
    """Simulate the fit-type count of a two-type Moran model.

    Under the neutral law the count jumps up and down at rate
    ``gamma k (N-k) / 2`` each; with ``selective=True`` the up rate is
    ``k (N-k) (gamma/2 + alpha/N)``.  One replicate per seed; returns arrays
    ``(k_T, n_up, I)`` with ``I = int_0^T p (1-p) ds``.
    """
    if not 0 <= k0 <= N:
        raise ValueError("k0 must lie in [0, N]")
    up = gamma / 2.0 + (alpha / N if selective else 0.0)
    scale = gamma / 2.0 + up
    up_prob = up / scale
    n = len(seeds)
    kT = np.empty(n, dtype=np.int64)
    nu = np.empty(n, dtype=np.int64)
    Ia = np.empty(n)
    guess = int(scale * N * N / 4 * T * 1.1) + 256
    for r, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        k, t, I, n_up, done = k0, 0.0, 0.0, 0, False
        while not done:
            exps = rng.standard_exponential(guess)
            us = rng.random(guess)
            k, t, I, n_up, done = _count_chunk(k, t, I, n_up, N, T, up_prob, scale, exps, us)
        kT[r], nu[r], Ia[r] = k, n_up, I
    return kT, nu, Ia


def count_chain_weight(kT, n_up, I, N, k0, config):
    """Log-weights of count-chain paths in the requested form."""
    a, g = float(config.alpha), float(config.gamma)
    if config.form == "jump":
        return n_up * math.log1p(2 * a / (g * N)) - a * N * I
    comp = a * a / g * I if config.compensator == "selective" else 0.0
    return a / g * (np.asarray(kT) - k0) / N - comp - 0.5 * a * a / g * I


# ----------------------------------------------------------------------------
# reweighting and comparison
# ----------------------------------------------------------------------------

def effective_sample_size(weights):
    w = np.asarray(weights, dtype=float)
    return math.fsum(w) ** 2 / math.fsum((w * w).tolist())


def reweighted_expectation(values, weights, ess_floor=100.0):
    """Importance-sampling estimate ``E_P[F w]`` with its standard error."""
    f = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if f.shape != w.shape or f.size < 2:
        raise ValueError("values and weights must be equal-length arrays (>= 2)")
    ess = effective_sample_size(w)
    if ess < ess_floor:
        raise EffectiveSampleSizeTooLow(f"effective sample size {ess:.1f} < {ess_floor}")
    fw = f * w
    return core.PolyValue(math.fsum(fw.tolist()) / f.size,
                          float(np.std(fw, ddof=1) / math.sqrt(f.size)))


def compare_with_selective(config, N, T, p0, neutral_seeds, selective_seeds, z=3.0,
                           bias=None):
    """Mean fit-type frequency at ``T``: reweighted neutral vs direct selective.

    Also reports the mean weight under both compensator choices.
    """
    k0 = int(round(p0 * N))
    kT, nu, I = count_chain_paths(N, k0, T, config.gamma, config.alpha, neutral_seeds)
    lw = count_chain_weight(kT, nu, I, N, k0, config)
    w = np.exp(lw)
    F = kT / N
    rw = reweighted_expectation(F, w, config.ess_floor)
    kq, _, _ = count_chain_paths(N, k0, T, config.gamma, config.alpha, selective_seeds,
                                 selective=True)
    Fq = kq / N
    direct = core.PolyValue(math.fsum(Fq.tolist()) / Fq.size,
                            float(np.std(Fq, ddof=1) / math.sqrt(Fq.size)))
    bias = 10.0 / N if bias is None else bias
    tol = z * math.hypot(rw.se, direct.se) + bias
    means = {}
    for comp in ("neutral", "selective"):
        c = GirsanovConfig(config.alpha, config.gamma, config.fitness, config.chi_pair,
                           comp, config.form, config.ess_floor)
        ww = np.exp(count_chain_weight(kT, nu, I, N, k0, c))
        means[comp] = {"mean": math.fsum(ww.tolist()) / ww.size,
                       "se": float(np.std(ww, ddof=1) / math.sqrt(ww.size))}
        means[comp]["mean_one"] = abs(means[comp]["mean"] - 1.0) <= z * means[comp]["se"]
    winners = [c for c in means if means[c]["mean_one"]]
    return {
        "reweighted": rw.value, "reweighted_se": rw.se,
        "direct": direct.value, "direct_se": direct.se,
        "tolerance": tol, "bias": bias, "z": z,
        "pass": abs(rw.value - direct.value) <= tol,
        "ess": effective_sample_size(w),
        "mean_weight": means[config.compensator]["mean"],
        "mean_weight_se": means[config.compensator]["se"],
        "compensators": means,
        "compensator_winner": winners[0] if len(winners) == 1 else None,
        "weights": w, "neutral_values": F, "selective_values": Fq,
    }


def exact_two_individual_check(alpha, gamma, T, f=(0.0, 0.5, 1.0), form="jump"):
    """Two-individual, two-type model started from one fit individual.

    Direct side: ``[exp(T G_Q) f](1)`` for the selective count chain.
    Reweighted side: integrates :func:`path_weight` over the neutral path
    law (no event, or a fixing event at time ``s``).
    """
    f = np.asarray(f, dtype=float)
    up_q = gamma / 2 + alpha / 2
    dn = gamma / 2
    G = np.array([[0.0, 0.0, 0.0], [dn, -(up_q + dn), up_q], [0.0, 0.0, 0.0]])
    direct = float((expm(T * G) @ f)[1])
    cfg = GirsanovConfig(alpha, gamma, fitness=np.array([0.0, 1.0]), form=form)
    types0 = np.array([1, 0], dtype=np.int64)
    locs0 = np.zeros(2, dtype=np.int64)
    params = {"d": gamma, "theta": 0.0, "migration_rate": 0.0, "alpha": 0.0}

    def logw(events):
        # after fixation F is determined and the weight is a martingale, so
        # the weight is evaluated at the fixing event
        if events:
            s, parent, child = events[0]
            log = EventLog(2, T, types0, locs0, np.array([s]), np.array([0]),
                           np.array([parent]), np.array([child]), params)
        else:
            log = EventLog(2, T, types0, locs0, np.empty(0), np.empty(0, np.int64),
                           np.empty(0, np.int64), np.empty(0, np.int64), params)
        return path_weight(log, cfg, horizon=events[0][0] if events else T).weight

    stay = math.exp(-gamma * T) * logw([]) * f[1]
    # ordered pair (0 -> 1) and (1 -> 0) each at rate gamma / 2
    up, _ = integrate.quad(lambda s: dn * math.exp(-gamma * s) * logw([(s, 0, 1)]) * f[2],
                           0, T, epsabs=1e-14, epsrel=1e-13)
    down, _ = integrate.quad(lambda s: dn * math.exp(-gamma * s) * logw([(s, 1, 0)]) * f[0],
                             0, T, epsabs=1e-14, epsrel=1e-13)
    return {"direct": direct, "reweighted": stay + up + down,
            "abs_diff": abs(direct - (stay + up + down))}
