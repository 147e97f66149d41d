"""Concatenation semigroup: Poisson concatenation, Laplace functionals and
infinite-divisibility checks for finite atomic Lévy measures."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import core
from .errors import ComponentTooTall, KernelNotBoundaryVanishing

__all__ = ["LevyMeasureSpec", "poisson_concatenate", "laplace_check", "split_check",
           "check_boundary_vanishing", "semigroup_law_check", "truncation_check",
           "campbell_check", "sample_counts"]


@dataclass
class LevyMeasureSpec:
    """Atomic measure ``sum_i c_i delta_{u_i}`` at truncation level ``h``."""
    intensities: np.ndarray
    atoms: list
    h: float

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=float)
        if self.h <= 0:
            raise ValueError("truncation level h must be > 0")
        if self.intensities.shape != (len(self.atoms),):
            raise ValueError("one intensity per atom")
        if np.any(self.intensities < 0) or not np.all(np.isfinite(self.intensities)):
            raise ValueError("intensities must be finite and >= 0")
        for u in self.atoms:
            if u.height() > 2.0 * self.h:
                raise ComponentTooTall(f"atom height {u.height()} > 2h = {2 * self.h}")
        marked = {u.is_marked for u in self.atoms}
        if len(marked) > 1:
            raise core.DimensionMismatch("atoms must be all marked or all unmarked")

    @property
    def is_marked(self):
        return bool(self.atoms) and self.atoms[0].is_marked

    def thinned(self, n):
        return LevyMeasureSpec(self.intensities / n, list(self.atoms), self.h)

    def truncated(self, h2):
        if h2 > self.h:
            raise ValueError("can only truncate to a lower level")
        return LevyMeasureSpec(self.intensities, [core.truncate(u, h2) for u in self.atoms], h2)

    def to_dict(self):
        return {"h": self.h, "atoms": [{"intensity": float(c), "space": u.to_dict()}
                                       for c, u in zip(self.intensities, self.atoms)]}

    @classmethod
    def from_dict(cls, d):
        atoms = [core.from_dict(a["space"]) for a in d["atoms"]]
        return cls([a["intensity"] for a in d["atoms"]], atoms, float(d["h"]))


def sample_counts(spec, rng, size=None):
    return rng.poisson(spec.intensities, size=None if size is None else (size, len(spec.atoms)))


def _from_counts(spec, counts):
    comps = [u for u, k in zip(spec.atoms, counts) for _ in range(int(k))]
    if not comps:
        return core.zero_space(marked=spec.is_marked)
    return core.concatenate(comps, spec.h)


def poisson_concatenate(spec, rng):
    """h-concatenation of the points of a Poisson process with intensity ``spec``."""
    return _from_counts(spec, sample_counts(spec, rng))


def check_boundary_vanishing(poly, h, rng=None, n_probes=64, tol=1e-12):
    """Raise unless the kernel vanishes whenever some distance equals ``2h``.

    Probes are ultrametric matrices with a split at exactly ``2h`` into two
    non-empty groups (random within-group distances below ``2h``).
    """
    n = poly.order
    if n < 2:
        return
    rng = np.random.default_rng(0) if rng is None else rng
    probes = []
    for k in range(n_probes):
        perm = rng.permutation(n)
        cut = 1 + k % (n - 1)
        left, right = perm[:cut], perm[cut:]
        D = np.full((n, n), 2.0 * h)
        for grp in (left, right):
            inner = 0.0 if k % 2 == 0 else rng.uniform(0, 2.0 * h)
            D[np.ix_(grp, grp)] = inner
        np.fill_diagonal(D, 0.0)
        probes.append(D)
    vals = poly.phi(np.array(probes))
    if np.any(np.abs(vals) > tol):
        raise KernelNotBoundaryVanishing(
            f"kernel is {float(np.max(np.abs(vals))):.3g} on a 2h-distance probe")


def _phi_value(space, poly):
    return core.evaluate_polynomial(space, poly, normalized=False).value


def laplace_check(spec, poly, reps, rng, z=3.0):
    """Monte Carlo ``E[exp(-Phi(U(h)))]`` against ``exp(-sum c_i (1 - e^{-Phi(u_i)}))``.

    ``Phi`` is the unnormalised polynomial (order 1: ``c * mass``).  Order
    >= 2 kernels must vanish on the ``2h`` boundary, which makes ``Phi``
    additive over concatenation components.  Each distinct count vector is
    assembled once and ``Phi`` is evaluated on the concatenated space.
    """
    check_boundary_vanishing(poly, spec.h)
    counts = sample_counts(spec, rng, size=int(reps))
    uniq, inv = np.unique(counts, axis=0, return_inverse=True)
    phis = np.array([_phi_value(_from_counts(spec, row), poly) if row.any() else 0.0
                     for row in uniq])
    vals = np.exp(-phis[inv.ravel()])
    mc = math.fsum(vals.tolist()) / vals.size
    se = float(np.std(vals, ddof=1) / math.sqrt(vals.size))
    atoms_phi = np.array([_phi_value(u, poly) for u in spec.atoms])
    rhs = math.fsum((spec.intensities * -np.expm1(-atoms_phi)).tolist())
    exact = math.exp(-rhs)
    tol = z * se
    return {"laplace_mc": mc, "laplace_se": se, "laplace_exact": exact,
            "minus_log_mc": -math.log(mc) if mc > 0 else math.inf,
            "levy_khintchine_rhs": rhs, "abs_diff": abs(mc - exact),
            "tolerance": tol, "pass": abs(mc - exact) <= tol,
            "n_distinct_outcomes": int(len(uniq)), "values": vals}


def campbell_check(spec, reps, rng, z=3.0):
    """First-moment (Campbell) identity for the total mass."""
    counts = sample_counts(spec, rng, size=int(reps))
    uniq, inv = np.unique(counts, axis=0, return_inverse=True)
    masses = np.array([_from_counts(spec, row).total_mass for row in uniq])[inv.ravel()]
    mean = math.fsum(masses.tolist()) / masses.size
    se = float(np.std(masses, ddof=1) / math.sqrt(masses.size))
    exact = math.fsum((spec.intensities * [u.total_mass for u in spec.atoms]).tolist())
    return {"mean_mass": mean, "se": se, "exact": exact, "tolerance": z * se,
            "pass": abs(mean - exact) <= z * se, "values": masses}


def _pair_distance(space, rng):
    return float(core.sample_distance_matrix(space, 2, rng).distances[0, 1])


def split_check(spec, n, reps, rng, alpha=0.01):
    """Direct sampling vs ``n`` i.i.d. samples at intensity ``c/n`` concatenated.

    Two-sample KS tests on the total mass and (on nonzero outcomes) on the
    distance between two sampled points.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    thin = spec.thinned(n)
    direct_m, direct_r, split_m, split_r = [], [], [], []
    for _ in range(int(reps)):
        u = poisson_concatenate(spec, rng)
        direct_m.append(u.total_mass)
        if u.total_mass > 0:
            direct_r.append(_pair_distance(u, rng))
        parts = [poisson_concatenate(thin, rng) for _ in range(n)]
        v = core.concatenate(parts, spec.h)
        split_m.append(v.total_mass)
        if v.total_mass > 0:
            split_r.append(_pair_distance(v, rng))
    out = {"n": n, "reps": int(reps), "alpha": alpha}
    if np.ptp(direct_m + split_m) == 0:
        out.update(mass_ks_p=1.0, distance_ks_p=1.0)
        out["pass"] = True
        return out
    p_m = float(stats.ks_2samp(direct_m, split_m).pvalue)
    p_r = (float(stats.ks_2samp(direct_r, split_r).pvalue)
           if len(direct_r) > 1 and len(split_r) > 1 else 1.0)
    out.update(mass_ks_p=p_m, distance_ks_p=p_r)
    out["pass"] = p_m > alpha and p_r > alpha
    out["direct_mass"] = np.array(direct_m)
    out["split_mass"] = np.array(split_m)
    return out


def truncation_check(spec, h2, reps, rng, alpha=0.01):
    """``T_{h2}`` of level-h samples vs level-h2 samples with truncated atoms
    (KS on the two-point distance of nonzero outcomes)."""
    low = spec.truncated(h2)
    a, b = [], []
    for _ in range(int(reps)):
        u = core.truncate(poisson_concatenate(spec, rng), h2)
        if u.total_mass > 0:
            a.append(_pair_distance(u, rng))
        v = poisson_concatenate(low, rng)
        if v.total_mass > 0:
            b.append(_pair_distance(v, rng))
    p = float(stats.ks_2samp(a, b).pvalue) if len(a) > 1 and len(b) > 1 else 1.0
    return {"ks_p": p, "pass": p > alpha, "h": spec.h, "h_truncated": h2}


def semigroup_law_check(rng, n_instances=1000, h=2.0, max_leaves=5):
    """Count failures of the h-concatenation semigroup laws by canonical hash.

    Laws: associativity, commutativity, identity (zero element) and
    ``T_{h'}(u ⊔^h v) = T_{h'}(u) ⊔^{h'} T_{h'}(v)`` for ``h' <= h``.
    """
    H = core.canonical_hash
    fails = {"associativity": 0, "commutativity": 0, "identity": 0, "truncation": 0}

    def draw():
        sp = core.random_space(rng, int(rng.integers(1, max_leaves + 1)),
                               max_value=2.0 * h, integer_values=bool(rng.integers(2)))
        top = sp.height()
        if top > 2.0 * h:
            f = 2.0 * h / top
            sp = core.metric_transform(sp, lambda r: r * f)
        return sp

    zero = core.zero_space()
    for _ in range(int(n_instances)):
        u, v, w = draw(), draw(), draw()
        if H(core.concatenate([core.concatenate([u, v], h), w], h)) != H(
                core.concatenate([u, core.concatenate([v, w], h)], h)):
            fails["associativity"] += 1
        if H(core.concatenate([u, v], h)) != H(core.concatenate([v, u], h)):
            fails["commutativity"] += 1
        if H(core.concatenate([u, zero], h)) != H(u):
            fails["identity"] += 1
        h2 = float(rng.uniform(0.1, 1.0)) * h
        lhs = core.truncate(core.concatenate([u, v], h), h2)
        rhs = core.concatenate([core.truncate(u, h2), core.truncate(v, h2)], h2)
        if H(lhs) != H(rhs):
            fails["truncation"] += 1
    return fails
