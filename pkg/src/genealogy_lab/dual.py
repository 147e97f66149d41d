"""Distance-matrix-enriched Kingman coalescent and its variants.

Modes: ``plain`` (pair rate d), ``feynman_kac`` (pair rate d with the
accumulated potential ``beta_T = int_0^T d C(|p_s|, 2) ds``) and
``conditioned`` (pair rate ``b / m(s)`` along a piecewise-constant mass
path, frozen while the mass is 0).  A finite geography makes blocks jump
independently; only co-located blocks coalesce.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from . import core
from .core import Node, PolynomialSpec
from .errors import EmptyLocation, InvalidKernel, MassPathGap, OrderMismatch
from .forward import MassPath

__all__ = ["DualConfig", "CoalescentState", "coalescent_run", "duality_value",
           "entrance_law_tree", "expected_duality_value_n2", "kingman_merges", "conditioned_pair_times"]


@dataclass
class DualConfig:
    """Parameters of a dual coalescent run.

    ``mass_path`` (conditioned mode) is indexed by *dual* time; use
    :meth:`MassPath.reversed` on a forward path.  ``migration_kernel`` is the
    forward kernel ``a``; blocks move with ``(a + a^T)/2`` by default
    (``kernel_mode="symmetrized"``) or with ``a^T`` (``"adjoint"``).
    """
    n: int
    d: float = 1.0
    horizon: float = 1.0
    mode: str = "plain"
    mass_path: Optional[MassPath] = None
    migration_rate: float = 0.0
    migration_kernel: Optional[np.ndarray] = None
    kernel_mode: str = "symmetrized"
    line_locations: Optional[np.ndarray] = None
    _hazard: Optional[tuple] = field(default=None, repr=False, compare=False)

    def pair_hazard(self):
        """Per-pair cumulative hazard ``int_0^s d / m`` at the mass-path
        steps: (starts, rates, H at starts, H at ends); cached."""
        if self._hazard is None:
            mp = self.mass_path
            starts = np.asarray(mp.times, dtype=float)
            ends = np.append(starts[1:], mp.horizon)
            m = np.asarray(mp.masses, dtype=float)
            rates = np.where(m > 0, self.d / np.where(m > 0, m, 1.0), 0.0)
            Hend = np.cumsum(rates * (ends - starts))
            self._hazard = (starts, rates, Hend - rates * (ends - starts), Hend)
        return self._hazard

    def validate(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.d < 0 or self.horizon < 0:
            raise ValueError("rates and horizon must be >= 0")
        if self.mode not in ("plain", "feynman_kac", "conditioned"):
            raise ValueError(f"unknown dual mode {self.mode!r}")
        if self.mode == "conditioned" and self._hazard is None:
            mp = self.mass_path
            if mp is None or mp.times[0] > 0 or mp.horizon < self.horizon:
                raise MassPathGap("mass path does not cover [0, horizon]")
            if np.any(mp.masses < 0):
                raise MassPathGap("negative mass on the path")
            self.pair_hazard()
        if self.migration_kernel is not None:
            A = np.asarray(self.migration_kernel, dtype=float)
            if A.shape[0] != A.shape[1] or np.any(A < 0) or not np.allclose(A.sum(1), 1):
                raise InvalidKernel("migration kernel must be row-stochastic")
            if self.mode == "conditioned" and self.migration_rate > 0:
                raise ValueError("conditioned mode is non-spatial")

    def dual_kernel(self):
        A = np.asarray(self.migration_kernel, dtype=float)
        if self.kernel_mode == "symmetrized":
            return 0.5 * (A + A.T)
        if self.kernel_mode == "adjoint":
            At = A.T.copy()
            return At / At.sum(axis=1, keepdims=True)
        raise ValueError(f"unknown kernel mode {self.kernel_mode!r}")


@dataclass
class CoalescentState:
    n: int
    time: float
    blocks: list
    block_locations: np.ndarray
    line_locations: np.ndarray
    pair_times: np.ndarray          # inf where not coalesced by ``time``
    beta: float = 0.0
    events: list = field(default_factory=list)

    @property
    def n_blocks(self):
        return len(self.blocks)

    def distances(self):
        """Dual distance matrix ``2 min(T_ij, T)``."""
        D = 2.0 * np.minimum(self.pair_times, self.time)
        np.fill_diagonal(D, 0.0)
        return D

    def block_of(self):
        out = np.empty(self.n, dtype=np.int64)
        for k, blk in enumerate(self.blocks):
            out[blk] = k
        return out


def coalescent_run(config, rng, record_events=False):
    """Exact-jump simulation of the dual up to ``config.horizon``."""
    config.validate()
    n, T, d = config.n, float(config.horizon), float(config.d)
    spatial = config.migration_kernel is not None
    locs0 = (np.zeros(n, dtype=np.int64) if config.line_locations is None
             else np.asarray(config.line_locations, dtype=np.int64).copy())
    blocks = [[i] for i in range(n)]
    bloc = list(locs0)
    pair = np.full((n, n), np.inf)
    np.fill_diagonal(pair, 0.0)
    events = []
    t = 0.0
    beta = 0.0
    fk = config.mode == "feynman_kac"
    if spatial:
        # the dual kernel is used as a jump-rate kernel; its rows need not
        # sum to one (symmetrization of a non-doubly-stochastic kernel)
        A = config.dual_kernel()
        out_rate = A.sum(axis=1)
        Acum = np.cumsum(A, axis=1) / np.where(out_rate > 0, out_rate, 1.0)[:, None]
        Acum[:, -1] = 1.0
    mig = float(config.migration_rate) if spatial else 0.0
    while True:
        k = len(blocks)
        if config.mode == "conditioned":
            if k < 2:
                break
            # invert the cumulative hazard C(k,2) * int b/m over the path
            starts, rates, Hs, He = config.pair_hazard()
            seg = max(int(np.searchsorted(starts, t, side="right")) - 1, 0)
            target = Hs[seg] + rates[seg] * (t - starts[seg])
            target += rng.standard_exponential() / (k * (k - 1) / 2.0)
            j = int(np.searchsorted(He, target, side="left"))
            if j >= len(He) or rates[j] <= 0:
                break
            tnext = starts[j] + (target - Hs[j]) / rates[j]
            if tnext > T:
                break
            t = tnext
            i, j = _pick_pair(rng, k)
        else:
            if spatial:
                coloc = [(a, b) for a in range(k) for b in range(a + 1, k)
                         if bloc[a] == bloc[b]]
            else:
                coloc = None
            npairs = len(coloc) if spatial else k * (k - 1) // 2
            if spatial:
                wloc = np.cumsum(out_rate[np.asarray(bloc[:k])])
                R = d * npairs + mig * wloc[-1]
            else:
                R = d * npairs
            if R <= 0:
                if fk:
                    beta += d * k * (k - 1) / 2.0 * (T - t)
                break
            dt = rng.exponential(1.0 / R)
            if t + dt > T:
                if fk:
                    beta += d * k * (k - 1) / 2.0 * (T - t)
                break
            if fk:
                beta += d * k * (k - 1) / 2.0 * dt
            t += dt
            if rng.random() * R >= d * npairs:
                a = min(int(np.searchsorted(wloc, rng.random() * wloc[-1], side="right")), k - 1)
                old = bloc[a]
                bloc[a] = int(np.searchsorted(Acum[old], rng.random(), side="right"))
                if record_events:
                    events.append((t, "migrate", a, bloc[a]))
                continue
            if spatial:
                i, j = coloc[int(rng.integers(0, len(coloc)))]
            else:
                i, j = _pick_pair(rng, k)
        bi, bj = blocks[i], blocks[j]
        pair[np.ix_(bi, bj)] = t
        pair[np.ix_(bj, bi)] = t
        if record_events:
            events.append((t, "coalesce", tuple(bi), tuple(bj)))
        blocks[i] = sorted(bi + bj)
        del blocks[j]
        del bloc[j]
    order = sorted(range(len(blocks)), key=lambda x: blocks[x][0])
    blocks = [blocks[x] for x in order]
    bloc = np.array([bloc[x] for x in order], dtype=np.int64)
    return CoalescentState(n, T, blocks, bloc, locs0, pair, beta, events)


def conditioned_pair_times(config, size, rng):
    """Coalescence times of ``size`` independent conditioned pairs (``inf``
    when the pair does not merge before the horizon)."""
    if config.mode != "conditioned":
        raise ValueError("conditioned_pair_times needs mode='conditioned'")
    config.validate()
    starts, rates, Hs, He = config.pair_hazard()
    target = rng.standard_exponential(int(size))
    j = np.searchsorted(He, target, side="left")
    out = np.full(target.shape, np.inf)
    ok = j < len(He)
    jj = j[ok]
    good = rates[jj] > 0
    t = np.full(jj.shape, np.inf)
    t[good] = starts[jj[good]] + (target[ok][good] - Hs[jj[good]]) / rates[jj[good]]
    out[ok] = t
    out[out > config.horizon] = np.inf
    return out


def _pick_pair(rng, k):
    """Uniform unordered pair ``i < j`` of ``range(k)``."""
    i = int(rng.integers(0, k))
    j = int(rng.integers(0, k - 1))
    if j >= i:
        j += 1
    return (i, j) if i < j else (j, i)


def _particle_counts(initial, atom_mass):
    c = np.rint(initial.masses / atom_mass).astype(np.int64)
    if not np.allclose(c * atom_mass, initial.masses, rtol=1e-9, atol=1e-12):
        raise ValueError("leaf masses are not multiples of atom_mass")
    return c


def _ancestor_draw(initial, state, rng, sampling, fallback_global, spatial,
                   atom_mass=None):
    """One initial leaf per block; returns (leaves, mass factor)."""
    m = initial.masses
    nb_ = state.n_blocks
    if sampling == "distinct" and atom_mass is not None and not spatial:
        # distinct particles of mass atom_mass inside the leaves
        c = _particle_counts(initial, atom_mass)
        P = int(c.sum())
        if nb_ > P:
            return None, 0.0
        picks = rng.choice(P, size=nb_, replace=False)
        leaves = np.searchsorted(np.cumsum(c), picks, side="right").astype(np.int64)
        return leaves, atom_mass ** nb_ * math.perm(P, nb_)
    probs = []
    factors = []
    for g in state.block_locations:
        if spatial:
            w = np.where(initial.locations == g, m, 0.0)
            if w.sum() <= 0:
                if not fallback_global:
                    raise EmptyLocation(f"initial space has no mass at location {g}")
                w = m.copy()
        else:
            w = m
        tot = math.fsum(w)
        probs.append(w / tot)
        factors.append(tot)
    leaves = np.array([rng.choice(len(m), p=p) for p in probs], dtype=np.int64)
    if sampling == "distinct":
        if nb_ > np.count_nonzero(m):
            return None, 0.0
        while len(set(leaves.tolist())) < nb_:
            leaves = np.array([rng.choice(len(m), p=p) for p in probs], dtype=np.int64)
        if not spatial:
            return leaves, core._offdiag_mass(m, nb_)
    return leaves, float(np.prod(factors))


def duality_value(initial, state, poly, rng, sampling="with_replacement",
                  normalized=True, fk_weight=None, fallback_global=False,
                  atom_mass=None):
    """Duality function ``H`` evaluated at an initial space and a dual state.

    One ancestor is drawn per block (from the initial measure restricted to
    the block's location when the initial space is marked with several
    locations).  Same-block pairs use the dual distance; pairs in different
    blocks get ``2T + r_0(ancestors)``.  The Feynman-Kac factor
    ``exp(beta_T)`` is applied when ``fk_weight`` is true (default: when
    ``state.beta > 0``).  With ``normalized=False`` the value carries the
    initial mass factor ``mu(·)^{#blocks}`` (or the off-diagonal mass for
    ``sampling="distinct"``).  ``atom_mass`` splits every leaf into
    particles of that mass, and distinct sampling then refers to particles
    (the finite-K branching convention).
    """
    if poly.order != state.n:
        raise OrderMismatch(f"polynomial order {poly.order} != dual size {state.n}")
    if initial.total_mass <= 0:
        raise core.EmptySpace("initial space has zero mass")
    spatial = initial.is_marked and len(set(initial.locations.tolist())) > 1
    leaves, factor = _ancestor_draw(initial, state, rng, sampling, fallback_global,
                                    spatial, atom_mass)
    if leaves is None:
        return 0.0
    blk = state.block_of()
    anc = leaves[blk]
    D = state.distances()
    r0 = initial.distance_matrix()
    cross = blk[:, None] != blk[None, :]
    D = np.where(cross, 2.0 * state.time + r0[anc[:, None], anc[None, :]], D)
    types = (initial.types[anc] if initial.is_marked
             else np.zeros(state.n, dtype=np.int64))
    val = float(poly(D[None], state.line_locations[None], types[None])[0])
    if fk_weight is None:
        fk_weight = state.beta > 0
    if fk_weight:
        val *= math.exp(state.beta)
    if not normalized:
        val *= factor
    return val


def kingman_merges(n_lines, T, d, rng):
    """Kingman merges (pair rate d) up to time T as linkage rows (a, b, time)."""
    clusters = list(range(n_lines))
    merges = []
    t = 0.0
    nxt = n_lines
    k = n_lines
    while k > 1:
        t += rng.exponential(1.0 / (d * k * (k - 1) / 2.0))
        if t > T:
            break
        i, j = _pick_pair(rng, k)
        a, b = clusters[i], clusters[j]
        merges.append((a, b, t))
        clusters[i] = nxt
        clusters[j] = clusters[-1]
        clusters.pop()
        nxt += 1
        k -= 1
    return merges


def entrance_law_tree(n_lines, T, d, rng):
    """n-line coalescent tree at depth T: distances ``2 min(T_ij, T)``,
    uniform masses ``1/n``."""
    if n_lines < 1:
        raise ValueError("n_lines must be >= 1")
    merges = [(a, b, 2.0 * t) for a, b, t in kingman_merges(n_lines, T, d, rng)]
    return core.from_merges(n_lines, merges, np.full(n_lines, 1.0 / n_lines),
                            top_value=2.0 * T)


def expected_duality_value_n2(initial, poly, d, T, fk=False, normalized=True,
                              sampling="with_replacement", atom_mass=None):
    """Exact dual-side expectation for ``n = 2`` on a single site.

    Integrates over the coalescence time ``tau ~ Exp(d)``; the uncoalesced
    term averages the kernel over independent (or distinct) ancestor pairs.
    """
    if poly.order != 2:
        raise OrderMismatch("exact n = 2 evaluation needs an order-2 polynomial")
    z = np.zeros((1, 2), dtype=np.int64)
    tm = initial.total_mass
    m = initial.masses

    def coalesced(tau):
        D = np.array([[[0.0, 2 * tau], [2 * tau, 0.0]]])
        v = float(poly(D, z, z)[0])
        if not normalized:
            v *= tm
        return v

    r0 = initial.distance_matrix()
    L = initial.n_leaves
    ii, jj = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    w = np.outer(m, m)
    if sampling == "distinct":
        w = w * (ii != jj)
        if atom_mass is not None:
            c = _particle_counts(initial, atom_mass)
            w = w + np.diag(c * (c - 1) * atom_mass ** 2.0)
    Ds = np.zeros((L * L, 2, 2))
    Ds[:, 0, 1] = Ds[:, 1, 0] = (2.0 * T + r0).ravel()
    if initial.is_marked:
        tt = np.stack([initial.types[ii.ravel()], initial.types[jj.ravel()]], axis=1)
        gg = np.zeros_like(tt)
        vals = poly(Ds, gg, tt)
    else:
        vals = poly(Ds, np.zeros((L * L, 2), np.int64), np.zeros((L * L, 2), np.int64))
    unc = math.fsum((w.ravel() * vals).tolist())
    if normalized:
        unc /= w.sum()
    if fk:
        # density d e^{-d tau} times weight e^{d tau}
        part, _ = integrate.quad(lambda s: d * coalesced(s), 0.0, T,
                                 epsabs=1e-13, epsrel=1e-12, limit=200)
        return part + unc
    part, _ = integrate.quad(lambda s: d * math.exp(-d * s) * coalesced(s), 0.0, T,
                             epsabs=1e-13, epsrel=1e-12, limit=200)
    return part + math.exp(-d * T) * unc
