"""Event-driven individual-based simulators: Moran and branching particles.

Two Moran engines are provided:

* :func:`moran_run` — the general model (resampling, mutation, migration,
  selection on a finite geography) with an on-line coalescence-time matrix
  ``T_MRCA``.  Cost O(N) per event, O(N^2) memory.
* :func:`moran_trace` — neutral single-site resampling only.  The ordered
  (parent, child) marks of the Poisson event stream are traced from the
  horizon back through a union-find over positions, which yields the exact
  genealogy of the whole population in O(number of events).

Both engines consume streams derived from a :class:`numpy.random.Generator`,
so replicate seeds fully determine the output.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numba as nb
import numpy as np

from . import core
from .core import Node, UltrametricSpace, MassDecomposition
from .errors import (InconsistentAncestry, InvalidKernel, ParticleBudgetExceeded,
                     ZeroPopulation)

__all__ = [
    "MoranConfig", "MoranState", "BranchingConfig", "BranchingState", "EventLog",
    "MassPath", "GenealogyTrace", "moran_run", "moran_trace", "extract_genealogy",
    "branching_run", "allocate_initial", "trace_order2", "trace_statistics",
    "conditional_pair_distances", "replay_branching_genealogy",
]

EVENT_KINDS = {0: "resample", 1: "mutation", 2: "migration", 3: "selection",
               4: "split", 5: "death"}


def _check_stochastic(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or np.any(M < 0) or not np.allclose(M.sum(axis=1), 1.0):
        raise InvalidKernel(f"{name} must be a square row-stochastic matrix")
    return M


def _cum_rows(M):
    C = np.cumsum(M, axis=1)
    C[:, -1] = 1.0
    return C


def _numba_seed(rng):
    return int(rng.integers(0, 2 ** 32 - 1))


def allocate_initial(initial, N, rng=None, method="stratified"):
    """Assign ``N`` individuals to leaves of the initial space.

    ``stratified`` uses largest-remainder rounding of ``N * mu_i`` (exact and
    deterministic); ``iid`` draws ancestors independently from ``mu``.
    """
    p = initial.masses / initial.total_mass
    if method == "iid":
        return np.sort(rng.choice(initial.n_leaves, size=N, p=p))
    raw = N * p
    counts = np.floor(raw).astype(np.int64)
    rem = N - counts.sum()
    order = np.lexsort((np.arange(len(p)), -(raw - counts)))
    counts[order[:rem]] += 1
    return np.repeat(np.arange(initial.n_leaves), counts)


# ----------------------------------------------------------------------------
# event logs and mass paths
# ----------------------------------------------------------------------------

@dataclass
class EventLog:
    """Event record of a forward run.

    ``kinds`` codes: 0 resample (a=parent, b=child), 1 mutation (a=individual,
    b=new type), 2 migration (a=individual, b=new site), 3 selection
    (a=parent, b=child), 4 split (a=particle, b=count after the event),
    5 death (a=particle, b=count after the event).
    """
    N: int
    horizon: float
    initial_types: np.ndarray
    initial_locations: np.ndarray
    times: np.ndarray
    kinds: np.ndarray
    a: np.ndarray
    b: np.ndarray
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def to_jsonl(self):
        head = {"N": self.N, "horizon": self.horizon,
                "initial_types": self.initial_types.tolist(),
                "initial_locations": self.initial_locations.tolist(),
                "params": self.params}
        lines = [json.dumps(head, sort_keys=True)]
        for t, k, a, b in zip(self.times.tolist(), self.kinds.tolist(),
                              self.a.tolist(), self.b.tolist()):
            lines.append(json.dumps({"t": t, "kind": EVENT_KINDS[k], "a": a, "b": b},
                                    sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        rows = [json.loads(x) for x in text.splitlines() if x.strip()]
        head, ev = rows[0], rows[1:]
        codes = {v: k for k, v in EVENT_KINDS.items()}
        return cls(head["N"], head["horizon"], np.array(head["initial_types"], dtype=np.int64),
                   np.array(head["initial_locations"], dtype=np.int64),
                   np.array([e["t"] for e in ev], dtype=float),
                   np.array([codes[e["kind"]] for e in ev], dtype=np.int64),
                   np.array([e["a"] for e in ev], dtype=np.int64),
                   np.array([e["b"] for e in ev], dtype=np.int64), head["params"])


@dataclass
class MassPath:
    """Right-continuous piecewise-constant total-mass path on ``[0, horizon]``."""
    times: np.ndarray
    masses: np.ndarray
    horizon: float

    def __call__(self, t):
        i = np.searchsorted(self.times, t, side="right") - 1
        return self.masses[np.maximum(i, 0)]

    def to_csv(self):
        rows = ["time,total_mass"]
        rows += [f"{t!r},{m!r}" for t, m in zip(self.times.tolist(), self.masses.tolist())]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text, horizon=None):
        lines = [x for x in text.splitlines()[1:] if x.strip()]
        arr = np.array([[float(v) for v in x.split(",")] for x in lines])
        h = float(arr[-1, 0]) if horizon is None else horizon
        return cls(arr[:, 0], arr[:, 1], h)

    def reversed(self):
        """The path read backward from the horizon, ``s -> m(horizon - s)``.

        Step values are kept on the same (reflected) intervals; the
        right/left-continuity change only affects a null set of times.
        """
        t = self.times
        ends = np.append(t[1:], self.horizon)
        keep = ends > t
        starts = self.horizon - ends[keep][::-1]
        return MassPath(starts, self.masses[keep][::-1].copy(), self.horizon)

    @classmethod
    def constant(cls, m, horizon):
        return cls(np.array([0.0]), np.array([float(m)]), float(horizon))


# ----------------------------------------------------------------------------
# general Moran model
# ----------------------------------------------------------------------------

@dataclass
class MoranConfig:
    """Parameters of the finite-N Moran model.

    ``d`` is the resampling rate per unordered same-site pair, ``theta`` the
    per-individual mutation rate with kernel ``mutation_kernel``,
    ``migration_rate`` the per-individual jump rate with kernel
    ``migration_kernel``, and ``alpha`` the selection coefficient with fitness
    vector ``fitness`` (values in [0, 1] indexed by type).
    """
    N: int
    d: float = 1.0
    theta: float = 0.0
    mutation_kernel: Optional[np.ndarray] = None
    migration_rate: float = 0.0
    migration_kernel: Optional[np.ndarray] = None
    alpha: float = 0.0
    fitness: Optional[np.ndarray] = None
    initial: Optional[UltrametricSpace] = None
    initial_origins: Optional[np.ndarray] = None
    record_log: bool = False

    def validate(self):
        if self.N < 1:
            raise ZeroPopulation("N must be >= 1")
        for name in ("d", "theta", "migration_rate", "alpha"):
            if getattr(self, name) < 0:
                raise InvalidKernel(f"{name} must be >= 0")
        n_types = 1
        n_sites = 1
        if self.initial is not None and self.initial.is_marked:
            n_types = int(self.initial.types.max()) + 1
            n_sites = int(self.initial.locations.max()) + 1
        B = (np.eye(n_types) if self.mutation_kernel is None
             else _check_stochastic(self.mutation_kernel, "mutation kernel"))
        A = (np.eye(n_sites) if self.migration_kernel is None
             else _check_stochastic(self.migration_kernel, "migration kernel"))
        if B.shape[0] < n_types or A.shape[0] < n_sites:
            raise InvalidKernel("kernel smaller than the mark alphabet")
        chi = (np.zeros(B.shape[0]) if self.fitness is None
               else np.asarray(self.fitness, dtype=float))
        if chi.shape[0] != B.shape[0] or np.any(chi < 0) or np.any(chi > 1):
            raise InvalidKernel("fitness must map every type into [0, 1]")
        return B, A, chi


@dataclass
class MoranState:
    time: float
    types: np.ndarray
    locations: np.ndarray
    origins: np.ndarray
    tmrca: np.ndarray          # NaN where no common ancestor within the run
    event_log: Optional[EventLog] = None

    @property
    def N(self):
        return self.types.shape[0]

    @property
    def total_mass(self):
        return 1.0


@nb.njit(cache=True)
def _grow(arr, n):
    out = np.empty(max(2 * arr.shape[0], n), arr.dtype)
    out[:arr.shape[0]] = arr
    return out


@nb.njit(cache=True)
def _moran_kernel(N, d, theta, Bcum, mig, Acum, alpha, chi, types, locs, origins,
                  horizon, seed, record):
    np.random.seed(seed)
    G = Acum.shape[0]
    Tm = np.full((N, N), -1.0)
    members = np.empty((G, N), np.int64)
    cnt = np.zeros(G, np.int64)
    pos = np.empty(N, np.int64)
    S = np.zeros(G)
    for i in range(N):
        g = locs[i]
        members[g, cnt[g]] = i
        pos[i] = cnt[g]
        cnt[g] += 1
        S[g] += chi[types[i]]
    cap = 1024 if record else 1
    lt = np.empty(cap)
    lk = np.empty(cap, np.int64)
    la = np.empty(cap, np.int64)
    lb = np.empty(cap, np.int64)
    ne = 0
    t = 0.0
    while True:
        Rres = 0.0
        Rsel = 0.0
        for g in range(G):
            n = cnt[g]
            Rres += d * n * (n - 1) / 2.0
            Rsel += alpha * (n - 1) * S[g] / N
        Rmut = N * theta
        Rmig = N * mig
        R = Rres + Rsel + Rmut + Rmig
        if R <= 0.0:
            break
        t += np.random.exponential(1.0 / R)
        if t > horizon:
            break
        u = np.random.random() * R
        kind = 0
        a = -1
        b = -1
        if u < Rres + Rsel:
            if u < Rres:
                kind = 0
                v = np.random.random() * Rres
                g = 0
                acc = 0.0
                for g in range(G):
                    acc += d * cnt[g] * (cnt[g] - 1) / 2.0
                    if v < acc:
                        break
                n = cnt[g]
                x = np.random.randint(0, n * (n - 1))
                pi = x // (n - 1)
                ci = x % (n - 1)
                if ci >= pi:
                    ci += 1
                a = members[g, pi]
                b = members[g, ci]
            else:
                kind = 3
                v = np.random.random() * Rsel
                g = 0
                acc = 0.0
                for g in range(G):
                    acc += alpha * (cnt[g] - 1) * S[g] / N
                    if v < acc:
                        break
                n = cnt[g]
                w = np.random.random() * S[g]
                acc = 0.0
                pi = 0
                for pi in range(n):
                    acc += chi[types[members[g, pi]]]
                    if w < acc:
                        break
                ci = np.random.randint(0, n - 1)
                if ci >= pi:
                    ci += 1
                a = members[g, pi]
                b = members[g, ci]
            # b becomes a copy of a
            for k in range(N):
                Tm[b, k] = Tm[a, k]
                Tm[k, b] = Tm[a, k]
            Tm[a, b] = t
            Tm[b, a] = t
            Tm[b, b] = -1.0
            g = locs[b]
            S[g] += chi[types[a]] - chi[types[b]]
            types[b] = types[a]
            origins[b] = origins[a]
        elif u < Rres + Rsel + Rmut:
            kind = 1
            a = np.random.randint(0, N)
            w = np.random.random()
            row = types[a]
            nt = 0
            while Bcum[row, nt] <= w:
                nt += 1
            S[locs[a]] += chi[nt] - chi[types[a]]
            types[a] = nt
            b = nt
        else:
            kind = 2
            a = np.random.randint(0, N)
            w = np.random.random()
            old = locs[a]
            ng = 0
            while Acum[old, ng] <= w:
                ng += 1
            b = ng
            if ng != old:
                last = members[old, cnt[old] - 1]
                members[old, pos[a]] = last
                pos[last] = pos[a]
                cnt[old] -= 1
                members[ng, cnt[ng]] = a
                pos[a] = cnt[ng]
                cnt[ng] += 1
                S[old] -= chi[types[a]]
                S[ng] += chi[types[a]]
                locs[a] = ng
        if record:
            if ne >= lt.shape[0]:
                lt = _grow(lt, ne + 1)
                lk = _grow(lk, ne + 1)
                la = _grow(la, ne + 1)
                lb = _grow(lb, ne + 1)
            lt[ne] = t
            lk[ne] = kind
            la[ne] = a
            lb[ne] = b
            ne += 1
    return Tm, lt[:ne], lk[:ne], la[:ne], lb[:ne]


def _initial_population(config, rng):
    init = config.initial if config.initial is not None else core.single_leaf(1.0)
    if config.initial_origins is not None:
        origins = np.asarray(config.initial_origins, dtype=np.int64).copy()
        if origins.shape[0] != config.N or origins.max() >= init.n_leaves:
            raise InconsistentAncestry("initial origins do not match N / initial space")
    else:
        origins = allocate_initial(init, config.N)
    if init.is_marked:
        types = init.types[origins].astype(np.int64)
        locs = init.locations[origins].astype(np.int64)
    else:
        types = np.zeros(config.N, dtype=np.int64)
        locs = np.zeros(config.N, dtype=np.int64)
    return init, origins, types, locs


def moran_run(config, horizon, rng):
    """Exact-jump simulation of the Moran model up to ``horizon``."""
    B, A, chi = config.validate()
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    init, origins, types, locs = _initial_population(config, rng)
    t0_types, t0_locs = types.copy(), locs.copy()
    Tm, lt, lk, la, lb = _moran_kernel(
        config.N, float(config.d), float(config.theta), _cum_rows(B),
        float(config.migration_rate), _cum_rows(A), float(config.alpha), chi,
        types, locs, origins, float(horizon), _numba_seed(rng), bool(config.record_log))
    Tm = np.where(Tm < 0, np.nan, Tm)
    np.fill_diagonal(Tm, horizon)
    log = None
    if config.record_log:
        log = EventLog(config.N, float(horizon), t0_types, t0_locs, lt, lk, la, lb,
                       params={"d": config.d, "theta": config.theta,
                               "migration_rate": config.migration_rate,
                               "alpha": config.alpha})
    return MoranState(float(horizon), types, locs, origins, Tm, log)


# ----------------------------------------------------------------------------
# neutral single-site trace engine
# ----------------------------------------------------------------------------

@dataclass
class GenealogyTrace:
    """Genealogy of a neutral Moran population read off its event stream.

    ``merge_left/right`` follow the linkage convention (ids ``0..N-1`` are the
    individuals, merge ``k`` creates cluster ``N + k``); ``merge_time`` is the
    forward time of the merging event and ``merge_size`` the size of the new
    cluster.  ``root_ids`` / ``root_origins`` describe the clusters that are
    still separate at time 0 and the initial leaf each descends from.
    """
    N: int
    horizon: float
    merge_left: np.ndarray
    merge_right: np.ndarray
    merge_time: np.ndarray
    merge_size: np.ndarray
    child_sizes: np.ndarray
    root_ids: np.ndarray
    root_sizes: np.ndarray
    root_origins: np.ndarray
    n_events: int


@nb.njit(cache=True)
def _trace_chunk(u, N, owner, size, state, ml, mr, me, ms, cs, start_index):
    """Process event marks backward; ``start_index`` is the forward index of
    ``u[0]`` (events are consumed with decreasing index)."""
    nm = state[0]
    alive = state[1]
    fN = float(N)
    fN1 = float(N - 1)
    for e in range(u.shape[0]):
        # uniform ordered pair of distinct positions from one uniform draw
        x = u[e] * fN
        p = int(x)
        c = int((x - p) * fN1)
        if p >= N:
            p = N - 1
        if c >= N - 1:
            c = N - 2
        if c >= p:
            c += 1
        oc = owner[c]
        if oc < 0:
            continue
        op = owner[p]
        if op >= 0:
            nid = N + nm
            ml[nm] = op
            mr[nm] = oc
            me[nm] = start_index - e
            cs[nm, 0] = size[op]
            cs[nm, 1] = size[oc]
            size[nid] = size[op] + size[oc]
            ms[nm] = size[nid]
            owner[p] = nid
            nm += 1
            alive -= 1
        else:
            owner[p] = oc
        owner[c] = -1
        if alive == 1:
            state[0] = nm
            state[1] = alive
            return True
    state[0] = nm
    state[1] = alive
    return False


def moran_trace(N, d, horizon, rng, origins=None, chunk=1 << 16):
    """Neutral single-site Moran genealogy at ``horizon``.

    The number of resampling events is Poisson(d * C(N,2) * horizon); each
    event is an independent uniformly chosen ordered pair (parent, child).
    Marks are traced from the last event backward.  Event times are only
    needed at merges and are drawn from the joint law of the uniform order
    statistics of the Poisson stream.
    """
    if N < 1:
        raise ZeroPopulation("N must be >= 1")
    origins = np.zeros(N, dtype=np.int64) if origins is None else np.asarray(origins)
    rate = d * N * (N - 1) / 2.0
    k = int(rng.poisson(rate * horizon)) if rate > 0 and horizon > 0 else 0
    owner = np.arange(N, dtype=np.int64)
    size = np.zeros(2 * N, dtype=np.int64)
    size[:N] = 1
    ml = np.empty(max(N - 1, 0), np.int64)
    mr = np.empty_like(ml)
    me = np.empty_like(ml)
    ms = np.empty_like(ml)
    cs = np.empty((max(N - 1, 0), 2), np.int64)
    state = np.array([0, N], dtype=np.int64)
    remaining = k
    while remaining > 0 and state[1] > 1:
        m = min(chunk, remaining)
        u = rng.random(m)
        done = _trace_chunk(u, N, owner, size, state, ml, mr, me, ms, cs, remaining)
        remaining -= m
        if done:
            break
    nm = int(state[0])
    idx = me[:nm]  # 1-based forward event indices, decreasing
    times = np.empty(nm)
    if nm:
        # U_(j1) = T Beta(j1, k - j1 + 1); U_(j_{i+1}) = U_(j_i) Beta(j_{i+1}, j_i - j_{i+1})
        prev = np.concatenate(([k + 1], idx[:-1]))
        betas = rng.beta(idx.astype(float), (prev - idx).astype(float))
        times = horizon * np.cumprod(betas)
    live = np.flatnonzero(owner >= 0)
    root_ids = owner[live]
    return GenealogyTrace(N, float(horizon), ml[:nm].copy(), mr[:nm].copy(), times,
                          ms[:nm].copy(), cs[:nm].copy(), root_ids,
                          size[root_ids].copy(), origins[live].copy(), k)


def trace_order2(trace, phi, base_dist=None):
    """Exact order-2 polynomial (with replacement) of a traced genealogy.

    ``phi`` is a vectorized function of the pair distance; ``base_dist`` maps
    two arrays of initial leaves to their initial distance (``None`` for the
    trivial initial state).
    """
    N = trace.N
    T = trace.horizon
    dist = 2.0 * (T - trace.merge_time)
    cs = trace.child_sizes.astype(float)
    total = [float(N) * float(phi(np.zeros(1))[0])]
    if len(dist):
        total.append(float(np.dot(2.0 * cs[:, 0] * cs[:, 1], phi(dist))))
    s = trace.root_sizes.astype(float)
    if len(s) > 1:
        if base_dist is None:
            cross = (s.sum() ** 2 - np.dot(s, s))
            total.append(cross * float(phi(np.array([2.0 * T]))[0]))
        else:
            o = trace.root_origins
            ii, jj = np.triu_indices(len(s), 1)
            r = 2.0 * T + base_dist(o[ii], o[jj])
            total.append(float(np.dot(2.0 * s[ii] * s[jj], phi(r))))
    return math.fsum(total) / (N * N)


def trace_statistics(trace, lams):
    """Per-replicate statistics for the trivial initial state.

    Returns ``[Phi2_exp(lam) for lam in lams] + [mean pair distance,
    mean triple max distance]`` where all samples are drawn with
    replacement from the population.  The largest pairwise distance of an
    ultrametric triple equals its median.
    """
    N = trace.N
    T = trace.horizon
    out = [trace_order2(trace, lambda r, l=l: np.exp(-l * r)) for l in lams]
    out.append(trace_order2(trace, lambda r: r))
    dist = 2.0 * (T - trace.merge_time)
    cs = trace.child_sizes.astype(float)
    S = cs.sum(axis=1)
    cubes = S ** 3 - cs[:, 0] ** 3 - cs[:, 1] ** 3
    s = trace.root_sizes.astype(float)
    parts = [float(np.dot(cubes, dist))]
    if len(s) > 1:
        parts.append((float(N) ** 3 - float(np.sum(s ** 3))) * 2.0 * T)
    out.append(math.fsum(parts) / float(N) ** 3)
    return np.array(out)


def trace_to_space(trace, initial=None):
    """Build the genealogy (masses 1/N) of a trace, grafted on ``initial``."""
    N, T = trace.N, trace.horizon
    merges = [(a, b, 2.0 * (T - t)) for a, b, t in
              zip(trace.merge_left, trace.merge_right, trace.merge_time)]
    if initial is None:
        initial = core.single_leaf(1.0)
    items = {i: i for i in range(N)}
    nxt = N
    for a, b, v in merges:
        items[nxt] = Node(v, [items.pop(int(a)), items.pop(int(b))])
        nxt += 1
    roots = [items[int(r)] for r in trace.root_ids]
    return _attach(initial, roots, trace.root_origins, T, np.full(N, 1.0 / N), None,
                   N)


def _attach(initial, lines, line_origins, t, masses, marks, n_leaves):
    """Hang ancestor lines (subtrees of height < 2t) below the leaves of
    ``initial`` they descend from, shifting initial merge values by 2t."""
    assigned = {}
    for line, o in zip(lines, line_origins):
        assigned.setdefault(int(o), []).append(line)

    def rebuild(node):
        if not isinstance(node, Node):
            ls = assigned.get(node)
            if not ls:
                return None
            return ls[0] if len(ls) == 1 else Node(2.0 * t, ls)
        kids = [k for k in (rebuild(c) for c in node.children) if k is not None]
        if not kids:
            return None
        return kids[0] if len(kids) == 1 else Node(node.value + 2.0 * t, kids)

    root = rebuild(initial.root)
    types = locs = None
    if marks is not None:
        types, locs = marks
    return core._make(root, masses, types, locs)


def extract_genealogy(state, initial=None, as_space=False, retain_genealogy=False):
    """Read out the genealogy of a forward state.

    Moran states give a (marked, if the initial space is marked) space with
    masses 1/N.  Branching states give a :class:`MassDecomposition` (or the
    unnormalized space with masses 1/K when ``as_space``).  Pairs without a
    common ancestor within the run are attached to the initial space.
    """
    if initial is None:
        initial = core.single_leaf(1.0)
    if isinstance(state, GenealogyTrace):
        return trace_to_space(state, initial)
    if isinstance(state, BranchingState):
        n = state.n_particles
        if n == 0:
            return core.zero_space() if as_space else MassDecomposition(0.0, None)
        masses = np.full(n, 1.0 / state.K)
    else:
        n = state.N
        masses = np.full(n, 1.0 / n)
    t = state.time
    Tm = state.tmrca
    if Tm.shape != (n, n):
        raise InconsistentAncestry("coalescence-time matrix does not match population")
    if np.any(Tm[~np.isnan(Tm)] > t) or not np.array_equal(np.isnan(Tm), np.isnan(Tm.T)):
        raise InconsistentAncestry("coalescence times after the current time")
    D = 2.0 * (t - Tm)
    miss = np.isnan(Tm)
    if miss.any():
        r0 = initial.distance_matrix()
        o = state.origins
        D[miss] = (2.0 * t + r0[o[:, None], o[None, :]])[miss]
    np.fill_diagonal(D, 0.0)
    types = locs = None
    if initial.is_marked or isinstance(state, MoranState):
        types, locs = state.types, state.locations
        if not initial.is_marked and not np.any(types) and not np.any(locs):
            types = locs = None
    space = core.from_distance_matrix(D, masses, types, locs)
    if isinstance(state, BranchingState) and not as_space:
        return core.decompose(space, retain_genealogy=retain_genealogy)
    return space


# ----------------------------------------------------------------------------
# branching particles
# ----------------------------------------------------------------------------

@dataclass
class BranchingConfig:
    """Critical (or logistic) binary branching with mass granularity 1/K.

    Each particle fires at rate ``b * K``; it splits with probability
    ``1/2`` (critical) or ``clip(1/2 * (1 + c * (capacity - M) / K), 0, 1)``
    (logistic, ``M`` the current total mass), and dies otherwise.
    """
    b: float = 1.0
    K: int = 100
    logistic: Optional[tuple] = None   # (c, capacity)
    initial: Optional[UltrametricSpace] = None
    particle_cap: int = 20000

    def validate(self):
        if self.K < 1:
            raise InvalidKernel("K must be >= 1")
        if self.b < 0:
            raise InvalidKernel("b must be >= 0")
        if self.logistic is not None:
            c, cap = self.logistic
            if c < 0 or cap <= 0:
                raise InvalidKernel("logistic parameters must satisfy c >= 0, capacity > 0")


@dataclass
class BranchingState:
    time: float
    K: int
    types: np.ndarray
    locations: np.ndarray
    origins: np.ndarray
    tmrca: np.ndarray
    mass_path: MassPath
    event_log: Optional[EventLog] = None
    initial_origins: Optional[np.ndarray] = None

    @property
    def n_particles(self):
        return self.types.shape[0]

    @property
    def total_mass(self):
        return self.n_particles / self.K


@nb.njit(cache=True)
def _branching_kernel(K, b, logistic, c, capm, horizon, seed, origins0, types0,
                      locs0, pcap, track):
    np.random.seed(seed)
    n = origins0.shape[0]
    origins = np.empty(pcap, np.int64)
    types = np.empty(pcap, np.int64)
    locs = np.empty(pcap, np.int64)
    ids = np.empty(pcap, np.int64)
    origins[:n] = origins0
    types[:n] = types0
    locs[:n] = locs0
    for k in range(n):
        ids[k] = k
    next_id = n
    cap = 1024
    pt = np.empty(cap)
    pn = np.empty(cap, np.int64)
    pk = np.empty(cap, np.int64)
    pi_ = np.empty(cap, np.int64)
    # split record: (time, parent id, child id)
    scap = 1024 if track else 1
    st = np.empty(scap)
    sp = np.empty(scap, np.int64)
    ns = 0
    pt[0] = 0.0
    pn[0] = n
    pk[0] = -1
    pi_[0] = -1
    ne = 1
    t = 0.0
    status = 0
    while n > 0:
        R = b * K * n
        if R <= 0.0:
            break
        t += np.random.exponential(1.0 / R)
        if t > horizon:
            break
        i = np.random.randint(0, n)
        p = 0.5
        if logistic:
            p = 0.5 * (1.0 + c * (capm - n / K) / K)
            p = min(1.0, max(0.0, p))
        if np.random.random() < p:
            if n >= pcap:
                status = 1
                break
            j = n
            if track:
                if ns >= st.shape[0]:
                    st = _grow(st, ns + 1)
                    sp = _grow(sp, ns + 1)
                st[ns] = t
                sp[ns] = ids[i]
                ns += 1
            ids[j] = next_id
            next_id += 1
            origins[j] = origins[i]
            types[j] = types[i]
            locs[j] = locs[i]
            n += 1
            kind = 4
        else:
            last = n - 1
            if i != last:
                ids[i] = ids[last]
                origins[i] = origins[last]
                types[i] = types[last]
                locs[i] = locs[last]
            n -= 1
            kind = 5
        if ne >= pt.shape[0]:
            pt = _grow(pt, ne + 1)
            pn = _grow(pn, ne + 1)
            pk = _grow(pk, ne + 1)
            pi_ = _grow(pi_, ne + 1)
        pt[ne] = t
        pn[ne] = n
        pk[ne] = kind
        pi_[ne] = i
        ne += 1
    m = n if track else 0
    Tm = np.full((m, m), -1.0)
    if track and m > 0:
        # backward pass: clusters of surviving particles per lineage id;
        # split k created id n0 + k from parent sp[k]
        n0 = origins0.shape[0]
        head = np.full(next_id, -1, np.int64)
        tail = np.full(next_id, -1, np.int64)
        nxt = np.full(m, -1, np.int64)
        for x in range(m):
            head[ids[x]] = x
            tail[ids[x]] = x
        for k in range(ns - 1, -1, -1):
            ch = n0 + k
            if head[ch] < 0:
                continue
            par = sp[k]
            if head[par] >= 0:
                x = head[ch]
                while x >= 0:
                    y = head[par]
                    while y >= 0:
                        Tm[x, y] = st[k]
                        Tm[y, x] = st[k]
                        y = nxt[y]
                    x = nxt[x]
                nxt[tail[par]] = head[ch]
                tail[par] = tail[ch]
            else:
                head[par] = head[ch]
                tail[par] = tail[ch]
            head[ch] = -1
    return (status, Tm, origins[:n].copy(), types[:n].copy(),
            locs[:n].copy(), pt[:ne], pn[:ne], pk[:ne], pi_[:ne])


def branching_run(config, horizon, rng, track_genealogy=True):
    """Exact-jump simulation of the branching particle system.

    The total-mass path is recorded at event resolution.  With
    ``track_genealogy=False`` only the mass path and event record are kept
    (O(1) work per event).
    """
    config.validate()
    init = config.initial if config.initial is not None else core.single_leaf(1.0)
    n0 = int(round(config.K * init.total_mass))
    origins = allocate_initial(init, n0) if n0 > 0 else np.zeros(0, dtype=np.int64)
    if init.is_marked:
        types, locs = init.types[origins], init.locations[origins]
    else:
        types = locs = np.zeros(n0, dtype=np.int64)
    logistic = config.logistic is not None
    c, capm = config.logistic if logistic else (0.0, 1.0)
    pcap = max(int(config.particle_cap), n0 + 1)
    status, Tm, o, ty, lo, pt, pn, pk, pi_ = _branching_kernel(
        float(config.K), float(config.b), logistic, float(c), float(capm),
        float(horizon), _numba_seed(rng), origins.astype(np.int64),
        types.astype(np.int64), locs.astype(np.int64), pcap, track_genealogy)
    if status == 1:
        raise ParticleBudgetExceeded(
            f"particle count reached the cap {pcap} before t={horizon}")
    Tm = np.where(Tm < 0, np.nan, Tm)
    if Tm.size:
        np.fill_diagonal(Tm, horizon)
    path = MassPath(pt.copy(), pn / config.K, float(horizon))
    log = EventLog(n0, float(horizon), types.copy(), locs.copy(), pt[1:].copy(),
                   pk[1:].copy(), pi_[1:].copy(), pn[1:].copy(),
                   params={"b": config.b, "K": config.K})
    return BranchingState(float(horizon), config.K, ty, lo, o, Tm, path, log,
                          origins.copy())


def conditional_pair_distances(state, n_samples, rng, initial=None):
    """Pair distances of the genealogy at the horizon *conditional on the
    recorded event stream* (times and split/death types).

    Given the counts, the particle involved in each event is uniform among
    those alive, so two sampled lineages traced backward merge at a split
    with ``n`` particles after the split with probability ``1 / C(n, 2)``.
    Lineages that do not merge descend from two distinct initial particles
    chosen uniformly.  Requires at least two particles at the horizon.
    """
    if state.n_particles < 2:
        raise ValueError("need at least two particles at the horizon")
    log = state.event_log
    T = state.time
    split = log.kinds == 4
    ts = log.times[split][::-1]
    n_after = log.b[split][::-1].astype(float)
    q = 2.0 / (n_after * (n_after - 1.0))
    # cumulative hazard in "event count" space: survive each split w.p. 1-q
    with np.errstate(divide="ignore"):
        logsurv = np.cumsum(np.log1p(-np.minimum(q, 1.0)))
    E = rng.standard_exponential(n_samples)
    j = np.searchsorted(-logsurv, E, side="left")
    coalesced = j < len(ts)
    dist = np.full(n_samples, 2.0 * T)
    dist[coalesced] = 2.0 * (T - ts[j[coalesced]])
    n_unc = int((~coalesced).sum())
    if n_unc and initial is not None and initial.n_leaves > 1:
        o = state.initial_origins
        a = rng.integers(0, len(o), size=n_unc)
        b = rng.integers(0, len(o) - 1, size=n_unc)
        b = b + (b >= a)
        r0 = initial.distance_matrix()
        dist[~coalesced] += r0[o[a], o[b]]
    return dist


@nb.njit(cache=True)
def _replay_kernel(kinds, times, counts, n0, seed):
    np.random.seed(seed)
    cap = n0 + 1
    for k in range(counts.shape[0]):
        if counts[k] + 1 > cap:
            cap = counts[k] + 1
    Tm = np.full((cap, cap), -1.0)
    n = n0
    for e in range(kinds.shape[0]):
        t = times[e]
        if kinds[e] == 4:
            i = np.random.randint(0, n)
            j = n
            for k in range(n):
                Tm[j, k] = Tm[i, k]
                Tm[k, j] = Tm[i, k]
            Tm[i, j] = t
            Tm[j, i] = t
            Tm[j, j] = -1.0
            n += 1
        else:
            i = np.random.randint(0, n)
            last = n - 1
            if i != last:
                for k in range(n):
                    Tm[i, k] = Tm[last, k]
                for k in range(n):
                    Tm[k, i] = Tm[i, k]
                Tm[i, i] = -1.0
            n -= 1
    return Tm[:n, :n].copy()


def replay_branching_genealogy(state, rng):
    """Forward replay of a recorded event stream with fresh uniform particle
    choices: one exact draw of the genealogy conditional on the mass path.

    Returns the coalescence-time matrix (NaN where not coalesced)."""
    log = state.event_log
    Tm = _replay_kernel(log.kinds, log.times, log.b, log.N, _numba_seed(rng))
    Tm = np.where(Tm < 0, np.nan, Tm)
    return Tm
