"""Forward-vs-dual verification experiments.

Every replicate draws from its own generator seeded by
``SeedSequence(master, spawn_key=(side, index))`` so that results do not
depend on how replicates are distributed over worker processes, and all
means are accumulated with ``math.fsum``.
"""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats
from scipy.linalg import expm
from scipy.spatial.distance import cdist

from . import core, dual, forward, girsanov, infdiv
from .core import PolynomialSpec, UltrametricSpace
from .errors import GenealogyError

__all__ = ["DualityExperiment", "Check", "DualityReport", "replicate_rng", "run_replicates",
           "z_check", "run_moment_duality", "run_fk_duality", "run_conditioned_duality",
           "run_equilibrium_check", "run_strong_duality_check", "run_girsanov_check",
           "run_infdiv_check", "run_diagnostics", "fk_moment_oracle", "spatial_pair_oracle",
           "energy_test", "default_workers", "FORWARD", "DUAL"]

FORWARD, DUAL = 0, 1
INFO_KINDS = ("info", "z-info")   # reported but not part of the verdict
WORKERS_ENV = "GENEALOGY_LAB_WORKERS"


def default_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# ----------------------------------------------------------------------------
# replicate plumbing
# ----------------------------------------------------------------------------

def replicate_rng(master, side, index):
    return np.random.default_rng(np.random.SeedSequence(int(master),
                                                        spawn_key=(int(side), int(index))))


def _run_range(task, master, side, start, stop):
    return [np.atleast_1d(np.asarray(task(replicate_rng(master, side, i)), dtype=float))
            for i in range(start, stop)]


def run_replicates(task, master, side, n, workers=1, start=0):
    """Evaluate ``task(rng)`` for replicate indices ``start .. start+n-1``.

    Returns an array of shape (n, k) in index order.
    """
    n = int(n)
    if n <= 0:
        return np.empty((0, 1))
    workers = max(1, int(workers))
    if workers == 1 or n < 2:
        rows = _run_range(task, master, side, start, start + n)
    else:
        size = max(1, n // (workers * 4))
        bounds = [(a, min(a + size, start + n)) for a in range(start, start + n, size)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_run_range, task, master, side, a, b) for a, b in bounds]
            rows = [r for f in futs for r in f.result()]
    return np.vstack(rows)


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    m = math.fsum(x.tolist()) / x.size
    if x.size < 2:
        return m, 0.0
    v = math.fsum(((x - m) ** 2).tolist()) / (x.size - 1)
    return m, math.sqrt(v / x.size)


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    kind: str
    passed: bool
    values: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "pass": bool(self.passed),
                **self.values}


def z_check(name, est, se, ref, ref_se=0.0, z=3.0, bias=0.0, **extra):
    """Verdict ``|est - ref| <= z sqrt(se^2 + ref_se^2) + bias``."""
    diff = abs(est - ref)
    sig = math.hypot(se, ref_se)
    tol = z * sig + bias
    return Check(name, "z", bool(diff <= tol), {
        "estimate": est, "estimate_se": se, "reference": ref, "reference_se": ref_se,
        "abs_diff": diff, "z": z, "bias": bias, "tolerance": tol,
        "z_score": diff / sig if sig > 0 else (0.0 if diff == 0 else math.inf), **extra})


@dataclass
class DualityReport:
    experiment: str
    checks: list
    seeds: dict
    parameters: dict
    replicates: dict = field(default_factory=dict)
    figures: dict = field(default_factory=dict)
    wall_time: float = 0.0
    error: Optional[str] = None

    @property
    def verdict(self):
        return self.error is None and all(c.passed for c in self.checks
                                          if c.kind not in INFO_KINDS)

    def to_dict(self):
        return _clean({"experiment": self.experiment,
                       "verdict": "pass" if self.verdict else "fail",
                       "checks": [c.to_dict() for c in self.checks],
                       "seeds": self.seeds, "parameters": self.parameters,
                       "error": self.error})

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def replicate_csv(self):
        rows = ["series,replicate,value"]
        for name in sorted(self.replicates):
            for i, v in enumerate(np.asarray(self.replicates[name], dtype=float).ravel()):
                rows.append(f"{name},{i},{float(v)!r}")
        return "\n".join(rows) + "\n"


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _seeds(master, **counts):
    return {"master": int(master), "scheme": "SeedSequence(master, spawn_key=(side, index))",
            "sides": {"forward": FORWARD, "dual": DUAL}, **counts}


# ----------------------------------------------------------------------------
# experiment description
# ----------------------------------------------------------------------------

@dataclass
class DualityExperiment:
    """Parameters shared by the forward and dual sides of a check.

    ``bias`` defaults to ``10/N`` (Moran) or ``10/K`` (branching).
    """
    poly: PolynomialSpec = None
    initial: UltrametricSpace = None
    horizon: float = 1.0
    d: float = 1.0
    N: int = 500
    K: int = 200
    b: float = 1.0
    reps_forward: int = 10000
    reps_dual: int = 10000
    z: float = 3.0
    bias: Optional[float] = None
    seed: int = 0
    workers: int = 1
    sampling: str = "with_replacement"
    migration_rate: float = 0.0
    migration_kernel: Optional[np.ndarray] = None
    kernel_mode: str = "symmetrized"
    line_locations: Optional[np.ndarray] = None
    n_paths: int = 200
    samples_per_path: int = 1000
    alpha: float = 0.01
    lams: tuple = (0.25, 0.5, 1.0)
    forward_engine: str = "auto"

    def __post_init__(self):
        if self.poly is None:
            self.poly = PolynomialSpec.exponential(2, 0.5)
        if self.initial is None:
            self.initial = core.single_leaf(1.0)
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")

    def bias_for(self, scale):
        return 10.0 / scale if self.bias is None else float(self.bias)

    def parameters(self):
        p = {"order": self.poly.order, "kernel": self.poly.kernel,
             "kernel_params": _clean(self.poly.params) if self.poly.kernel != "custom" else None,
             "horizon": self.horizon, "d": self.d, "N": self.N, "K": self.K, "b": self.b,
             "reps_forward": self.reps_forward, "reps_dual": self.reps_dual,
             "z": self.z, "bias": self.bias, "sampling": self.sampling,
             "initial": self.initial.to_dict()}
        if self.migration_kernel is not None:
            p.update(migration_rate=self.migration_rate,
                     migration_kernel=np.asarray(self.migration_kernel).tolist(),
                     kernel_mode=self.kernel_mode,
                     line_locations=_clean(self.line_locations))
        return p


# ----------------------------------------------------------------------------
# replicate tasks (module level so they pickle)
# ----------------------------------------------------------------------------

def _pair_phi(poly):
    """Vectorised ``r -> phi`` for an order-2 kernel without marks."""
    def phi(r):
        r = np.asarray(r, dtype=float)
        D = np.zeros((r.size, 2, 2))
        D[:, 0, 1] = D[:, 1, 0] = r.ravel()
        return poly.phi(D).reshape(r.shape)
    return phi


def _state_distances(tmrca, origins, t, initial):
    D = 2.0 * (t - tmrca)
    miss = np.isnan(tmrca)
    if miss.any():
        r0 = initial.distance_matrix()
        D[miss] = (2.0 * t + r0[origins[:, None], origins[None, :]])[miss]
    np.fill_diagonal(D, 0.0)
    return D


def _tuple_average(D, poly, groups, types, locs, rng, budget=1 << 20, mc_tuples=256):
    """Average of the kernel over tuples with coordinate k drawn from
    ``groups[k]`` (with replacement); exact when small, else Monte Carlo."""
    sizes = [len(g) for g in groups]
    if min(sizes) == 0:
        return math.nan
    n = len(groups)
    total = math.prod(sizes)
    if total <= budget:
        grids = np.meshgrid(*groups, indexing="ij")
        idx = np.stack([g.ravel() for g in grids], axis=1)
    else:
        idx = np.stack([rng.choice(g, size=mc_tuples) for g in groups], axis=1)
    sub = D[idx[:, :, None], idx[:, None, :]]
    vals = poly(sub, locs[idx], types[idx]) if poly.mark_factor is not None else poly.phi(sub)
    return math.fsum(np.asarray(vals, dtype=float).tolist()) / idx.shape[0]


@dataclass
class _MoranForward:
    exp: DualityExperiment
    engine: str

    def __call__(self, rng):
        e = self.exp
        init = e.initial
        if self.engine == "trace":
            origins = forward.allocate_initial(init, e.N, rng)
            tr = forward.moran_trace(e.N, e.d, e.horizon, rng, origins=origins)
            r0 = init.distance_matrix()
            return forward.trace_order2(tr, _pair_phi(e.poly),
                                        base_dist=lambda a, b: r0[a, b])
        cfg = forward.MoranConfig(N=e.N, d=e.d, migration_rate=e.migration_rate,
                                  migration_kernel=e.migration_kernel, initial=init)
        st = forward.moran_run(cfg, e.horizon, rng)
        D = _state_distances(st.tmrca, st.origins, e.horizon, init)
        n = e.poly.order
        if e.line_locations is not None:
            groups = [np.flatnonzero(st.locations == g) for g in e.line_locations]
        else:
            groups = [np.arange(e.N)] * n
        return _tuple_average(D, e.poly, groups, st.types, st.locations, rng)


@dataclass
class _MomentDual:
    exp: DualityExperiment
    mode: str = "plain"

    def __call__(self, rng):
        e = self.exp
        cfg = dual.DualConfig(n=e.poly.order, d=(e.b if self.mode == "feynman_kac" else e.d),
                              horizon=e.horizon, mode=self.mode,
                              migration_rate=e.migration_rate,
                              migration_kernel=e.migration_kernel,
                              kernel_mode=e.kernel_mode, line_locations=e.line_locations)
        st = dual.coalescent_run(cfg, rng)
        if self.mode == "feynman_kac":
            atom = 1.0 / e.K if e.sampling == "distinct" else None
            return dual.duality_value(e.initial, st, e.poly, rng, sampling=e.sampling,
                                      normalized=False, atom_mass=atom)
        return dual.duality_value(e.initial, st, e.poly, rng)


@dataclass
class _BranchingForward:
    exp: DualityExperiment

    def __call__(self, rng):
        e = self.exp
        cfg = forward.BranchingConfig(b=e.b, K=e.K, initial=e.initial)
        st = forward.branching_run(cfg, e.horizon, rng, track_genealogy=e.poly.order > 1)
        n = st.n_particles
        if e.poly.order == 1:
            return float(e.poly.phi(np.zeros((1, 1, 1)))[0]) * st.total_mass
        if n == 0:
            return 0.0
        D = _state_distances(st.tmrca, st.origins, e.horizon, e.initial)
        w = 1.0 / e.K
        if e.poly.order == 2:
            vals = _pair_phi(e.poly)(D)
            if e.sampling == "distinct":
                np.fill_diagonal(vals, 0.0)
            return math.fsum(vals.ravel().tolist()) * w * w
        space = core.from_distance_matrix(D, np.full(n, w))
        return core.evaluate_polynomial(space, e.poly, normalized=False,
                                        sampling=e.sampling).value


# ----------------------------------------------------------------------------
# oracles
# ----------------------------------------------------------------------------

def spatial_pair_oracle(d, rate, kernel, lam, T, start=(0, 0)):
    """``E[exp(-2 lam min(tau, T))]`` for two lines on a finite geography.

    Lines jump independently at ``rate`` with ``kernel`` and coalesce at rate
    ``d`` while co-located; computed by a matrix exponential of the
    Feynman-Kac generator on (site, site) pairs plus a coalesced state.
    """
    A = np.asarray(kernel, dtype=float)
    G = A.shape[0]
    S = G * G
    Q = np.zeros((S + 1, S + 1))
    for g in range(G):
        for h in range(G):
            s = g * G + h
            for g2 in range(G):
                if g2 != g:
                    Q[s, g2 * G + h] += rate * A[g, g2]
                if g2 != h:
                    Q[s, g * G + g2] += rate * A[h, g2]
            if g == h:
                Q[s, S] += d
    Q -= np.diag(Q.sum(axis=1))
    V = np.diag(np.r_[np.full(S, 2.0 * lam), 0.0])
    return float((expm(T * (Q - V)) @ np.ones(S + 1))[start[0] * G + start[1]])


def fk_moment_oracle(K, b, lam, T, m0=1.0, cap=None):
    """Exact ``E[sum_{i != j} exp(-lam r_ij)] / K^2`` for critical branching.

    Brute-force linear system on ``(u_n, v_n)`` with ``u_n = P(n particles)``
    and ``v_n = E[S 1{n}]``, ``S`` the off-diagonal kernel sum, truncated at
    ``cap`` particles; solved by a matrix exponential.
    """
    n0 = int(round(K * m0))
    cap = max(4 * n0 + 40, 60) if cap is None else int(cap)
    M = cap + 1
    A = np.zeros((2 * M, 2 * M))   # state (u_0..u_cap, v_0..v_cap)
    r = b * K / 2.0
    for n in range(M):
        u, v = n, M + n
        A[u, u] -= 2 * r * n
        A[v, v] -= 2 * r * n + 2.0 * lam
        if n + 1 <= cap:
            # split n -> n+1
            A[u + 1, u] += r * n
            A[v + 1, v] += r * (n + 2)
            A[v + 1, u] += 2.0 * r * n
        if n >= 1:
            # death n -> n-1
            A[u - 1, u] += r * n
            A[v - 1, v] += r * (n - 2)
    x0 = np.zeros(2 * M)
    x0[n0] = 1.0
    x0[M + n0] = n0 * (n0 - 1.0)
    x = expm(T * A) @ x0
    return math.fsum(x[M:].tolist()) / K ** 2, float(x[cap])


# ----------------------------------------------------------------------------
# experiments
# ----------------------------------------------------------------------------

def _forward_engine(exp):
    if exp.forward_engine != "auto":
        return exp.forward_engine
    simple = (exp.poly.order == 2 and exp.poly.mark_factor is None
              and exp.migration_kernel is None and exp.line_locations is None)
    return "trace" if simple else "moran"


def run_moment_duality(exp):
    """Moran model vs Kingman dual (optionally on a finite geography)."""
    t0 = time.perf_counter()
    bias = exp.bias_for(exp.N)
    checks, reps = [], {}
    spatial = exp.migration_kernel is not None
    if exp.poly.order == 1 and exp.poly.mark_factor is None:
        # the order-1 identity holds without Monte Carlo variance
        c = float(exp.poly.phi(np.zeros((1, 1, 1)))[0])
        checks.append(z_check("duality", c, 0.0, c, 0.0, exp.z, 0.0, short_circuit=True))
        return DualityReport("duality-check", checks, _seeds(exp.seed), exp.parameters(),
                             wall_time=time.perf_counter() - t0)
    engine = _forward_engine(exp)
    fw = run_replicates(_MoranForward(exp, engine), exp.seed, FORWARD, exp.reps_forward,
                        exp.workers)[:, 0]
    dv = run_replicates(_MomentDual(exp), exp.seed, DUAL, exp.reps_dual, exp.workers)[:, 0]
    reps["forward"], reps["dual"] = fw, dv
    fm, fs = _mean_se(fw)
    dm, ds = _mean_se(dv)
    checks.append(z_check("duality", fm, fs, dm, ds, exp.z, bias, forward_engine=engine))
    oracle = None
    if exp.poly.order == 2 and not spatial and exp.poly.mark_factor is None:
        oracle = dual.expected_duality_value_n2(exp.initial, exp.poly, exp.d, exp.horizon)
    elif (spatial and exp.poly.order == 2 and exp.poly.kernel == "exponential"
          and float(exp.initial.distance_matrix().max(initial=0.0)) == 0.0 and exp.line_locations is not None):
        cfg = dual.DualConfig(n=2, migration_kernel=exp.migration_kernel,
                              kernel_mode=exp.kernel_mode)
        oracle = spatial_pair_oracle(exp.d, exp.migration_rate, cfg.dual_kernel(),
                                     float(exp.poly.params[0, 1]), exp.horizon,
                                     tuple(int(g) for g in exp.line_locations))
    if oracle is not None:
        checks.append(z_check("forward_vs_oracle", fm, fs, oracle, 0.0, exp.z, bias))
        checks.append(z_check("dual_vs_oracle", dm, ds, oracle, 0.0, exp.z,
                              0.0 if spatial else bias))
    return DualityReport("duality-check", checks,
                         _seeds(exp.seed, n_forward=exp.reps_forward, n_dual=exp.reps_dual),
                         exp.parameters(), reps, wall_time=time.perf_counter() - t0)


def run_fk_duality(exp, oracle_K=(2, 3, 5), oracle_horizon=0.5):
    """Critical branching vs Feynman-Kac weighted Kingman dual (pair rate b).

    With ``sampling="distinct"`` the identity is exact at finite K; it is
    additionally checked against :func:`fk_moment_oracle` for small K.
    """
    t0 = time.perf_counter()
    bias = exp.bias_for(exp.K)
    checks, reps = [], {}
    m0 = exp.initial.total_mass
    try:
        fw = run_replicates(_BranchingForward(exp), exp.seed, FORWARD, exp.reps_forward,
                            exp.workers)[:, 0]
    except GenealogyError as err:
        rep = DualityReport("fk-duality", checks, _seeds(exp.seed), exp.parameters(),
                            error=f"{err.code}: {err}")
        err.report = rep
        raise
    fm, fs = _mean_se(fw)
    reps["forward"] = fw
    if exp.poly.order == 1:
        c = float(exp.poly.phi(np.zeros((1, 1, 1)))[0])
        checks.append(z_check("mass_conservation", fm, fs, c * m0, 0.0, exp.z, 0.0))
    else:
        dv = run_replicates(_MomentDual(exp, "feynman_kac"), exp.seed, DUAL, exp.reps_dual,
                            exp.workers)[:, 0]
        reps["dual"] = dv
        dm, ds = _mean_se(dv)
        checks.append(z_check("fk_duality", fm, fs, dm, ds, exp.z, bias))
        if exp.poly.order == 2 and exp.poly.mark_factor is None:
            atom = 1.0 / exp.K if exp.sampling == "distinct" else None
            ex = dual.expected_duality_value_n2(exp.initial, exp.poly, exp.b, exp.horizon,
                                                fk=True, normalized=False,
                                                sampling=exp.sampling, atom_mass=atom)
            checks.append(z_check("forward_vs_exact_dual", fm, fs, ex, 0.0, exp.z, bias))
    if (exp.poly.order == 2 and exp.poly.kernel == "exponential"
            and exp.initial.n_leaves == 1 and oracle_K):
        lam = float(exp.poly.params[0, 1])
        rows = []
        for k in oracle_K:
            fwd, tail = fk_moment_oracle(k, exp.b, lam, oracle_horizon, m0)
            dex = dual.expected_duality_value_n2(
                core.single_leaf(m0), exp.poly, exp.b, oracle_horizon, fk=True,
                normalized=False, sampling="distinct", atom_mass=1.0 / k)
            rows.append({"K": k, "forward_ctmc": fwd, "dual_exact": dex,
                         "abs_diff": abs(fwd - dex), "truncation_mass": tail})
        worst = max(r["abs_diff"] for r in rows)
        checks.append(Check("exact_small_K", "exact", worst <= 1e-6,
                            {"tolerance": 1e-6, "max_abs_diff": worst, "horizon": oracle_horizon,
                             "rows": rows}))
    return DualityReport("fk-duality", checks,
                         _seeds(exp.seed, n_forward=exp.reps_forward, n_dual=exp.reps_dual),
                         exp.parameters(), reps, wall_time=time.perf_counter() - t0)


@dataclass
class _ConditionedPath:
    exp: DualityExperiment

    def __call__(self, rng):
        """Returns [survived, ks statistic, ks p-value]."""
        e = self.exp
        cfg = forward.BranchingConfig(b=e.b, K=e.K, initial=e.initial)
        st = forward.branching_run(cfg, e.horizon, rng, track_genealogy=False)
        if st.n_particles < 2:
            return [0.0, math.nan, math.nan]
        n = e.samples_per_path
        fwd = forward.conditional_pair_distances(st, n, rng, e.initial)
        dcfg = dual.DualConfig(n=2, d=e.b, horizon=e.horizon, mode="conditioned",
                               mass_path=st.mass_path.reversed())
        tc = dual.conditioned_pair_times(dcfg, n, rng)
        dv = 2.0 * np.minimum(tc, e.horizon)
        o = st.initial_origins
        miss = ~np.isfinite(tc)
        if miss.any() and len(o) > 1:
            r0 = e.initial.distance_matrix()
            a = rng.integers(0, len(o), size=int(miss.sum()))
            b = rng.integers(0, len(o) - 1, size=a.size)
            b = b + (b >= a)
            dv[miss] += r0[o[a], o[b]]
        # break ties at atoms by a common continuous jitter on both sides
        fwd = fwd + rng.uniform(0.0, 1e-9, n)
        dv = dv + rng.uniform(0.0, 1e-9, n)
        res = stats.ks_2samp(fwd, dv)
        return [1.0, float(res.statistic), float(res.pvalue)]


def run_conditioned_duality(exp, max_attempts=None):
    """Per-path KS tests of the pair-distance law given the mass path.

    Paths that die out (fewer than two particles at the horizon) are
    skipped; the first ``n_paths`` surviving path indices are used.
    """
    t0 = time.perf_counter()
    task = _ConditionedPath(exp)
    need = int(exp.n_paths)
    max_attempts = 50 * need if max_attempts is None else max_attempts
    rows = []
    start = 0
    while sum(1 for r in rows if r[0] > 0) < need and start < max_attempts:
        batch = max(need - sum(1 for r in rows if r[0] > 0), 1)
        batch = int(batch * 1.3) + 1
        out = run_replicates(task, exp.seed, FORWARD, batch, exp.workers, start=start)
        rows.extend(out.tolist())
        start += batch
    idx = [i for i, r in enumerate(rows) if r[0] > 0][:need]
    pv = np.array([rows[i][2] for i in idx])
    ks = np.array([rows[i][1] for i in idx])
    n = len(pv)
    a = exp.alpha
    rejections = int(np.sum(pv < a))
    binom_p = float(stats.binom.sf(rejections - 1, n, a)) if n else math.nan
    checks = [Check("paths", "count", n == need, {"surviving_paths": n, "required": need,
                                                   "attempted": int(idx[-1] + 1) if idx else start})]
    checks.append(Check("per_path_rejections", "binomial", n > 0 and binom_p > a,
                        {"rejections": rejections, "alpha": a, "n_paths": n,
                         "binomial_tail_p": binom_p}))
    if n >= 2:
        gof = stats.goodness_of_fit(stats.uniform, pv, known_params={"loc": 0.0, "scale": 1.0},
                                    statistic="ad", n_mc_samples=4999,
                                    rng=np.random.default_rng(exp.seed))
        ad_p = float(gof.pvalue)
        ad = float(gof.statistic)
    else:
        ad_p, ad = math.nan, math.nan
    checks.append(Check("p_value_uniformity", "ad", n >= 2 and ad_p > a,
                        {"anderson_darling": ad, "p_value": ad_p, "alpha": a}))
    return DualityReport("conditioned-duality", checks,
                         _seeds(exp.seed, n_paths=n, samples_per_path=exp.samples_per_path),
                         exp.parameters(), {"ks_pvalue": pv, "ks_statistic": ks},
                         wall_time=time.perf_counter() - t0)


@dataclass
class _EquilibriumForward:
    exp: DualityExperiment

    def __call__(self, rng):
        e = self.exp
        tr = forward.moran_trace(e.N, e.d, e.horizon, rng)
        return forward.trace_statistics(tr, e.lams)


@dataclass
class _EntranceLaw:
    exp: DualityExperiment

    def __call__(self, rng):
        e = self.exp
        t2 = dual.entrance_law_tree(2, e.horizon, e.d, rng)
        r = t2.distance_matrix()[0, 1]
        t3 = dual.entrance_law_tree(3, e.horizon, e.d, rng)
        D = t3.distance_matrix()
        med = float(np.median(D[np.triu_indices(3, 1)]))
        return [math.exp(-l * r) for l in e.lams] + [r, med]


def run_equilibrium_check(exp):
    """Long-run Moran genealogy vs the Kingman entrance law."""
    t0 = time.perf_counter()
    bias = exp.bias_for(exp.N)
    fw = run_replicates(_EquilibriumForward(exp), exp.seed, FORWARD, exp.reps_forward,
                        exp.workers)
    dv = run_replicates(_EntranceLaw(exp), exp.seed, DUAL, exp.reps_dual, exp.workers)
    d, z = exp.d, exp.z
    checks = []
    names = [f"laplace_{l:g}" for l in exp.lams] + ["mean_pair_distance", "median_triple"]
    oracles = [d / (d + 2 * l) for l in exp.lams] + [2.0 / d, 2.0 * (1.0 / (3 * d) + 1.0 / d)]
    reps = {}
    for k, (name, orc) in enumerate(zip(names, oracles)):
        fm, fs = _mean_se(fw[:, k])
        dm, ds = _mean_se(dv[:, k])
        reps[f"forward_{name}"] = fw[:, k]
        reps[f"dual_{name}"] = dv[:, k]
        if name == "median_triple":
            checks.append(z_check(f"{name}_vs_entrance_law", fm, fs, dm, ds, z, bias,
                                  stationary_value=orc))
        else:
            checks.append(z_check(f"{name}_vs_stationary", fm, fs, orc, 0.0, z, bias,
                                  entrance_law=dm, entrance_law_se=ds))
    return DualityReport("equilibrium", checks,
                         _seeds(exp.seed, n_forward=exp.reps_forward, n_dual=exp.reps_dual),
                         exp.parameters(), reps, wall_time=time.perf_counter() - t0)


@dataclass
class _StrongForward:
    exp: DualityExperiment

    def __call__(self, rng):
        e = self.exp
        origins = forward.allocate_initial(e.initial, e.N, rng, method="iid")
        tr = forward.moran_trace(e.N, e.d, e.horizon, rng, origins=origins)
        space = forward.trace_to_space(tr, e.initial)
        return _pair_and_triple(space, rng)


@dataclass
class _StrongDual:
    exp: DualityExperiment

    def __call__(self, rng):
        e = self.exp
        top = dual.entrance_law_tree(e.N, e.horizon, e.d, rng)
        space = core.graft(e.initial, top, e.horizon, rng)
        return _pair_and_triple(space, rng)


def _pair_and_triple(space, rng):
    r2 = core.sample_distance_matrix(space, 2, rng).distances[0, 1]
    D3 = core.sample_distance_matrix(space, 3, rng).distances
    return np.r_[r2, np.sort(D3[np.triu_indices(3, 1)])]


def energy_test(x, y, n_perm=500, rng=None):
    """Two-sample energy-distance permutation test (Euclidean)."""
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    Z = np.vstack([x, y])
    n, m = len(x), len(y)
    Dm = cdist(Z, Z)

    def stat(lab):
        a, b = Dm[np.ix_(lab, lab)], Dm[np.ix_(~lab, ~lab)]
        c = Dm[np.ix_(lab, ~lab)]
        return 2 * c.mean() - a.mean() - b.mean()

    lab = np.r_[np.ones(n, bool), np.zeros(m, bool)]
    e0 = stat(lab)
    count = 0
    for _ in range(n_perm):
        if stat(rng.permutation(lab)) >= e0:
            count += 1
    return float(e0), (count + 1) / (n_perm + 1)


def run_strong_duality_check(exp, n_perm=200, energy_samples=1500):
    """Forward Moran genealogy at T vs initial space grafted with the
    entrance law: KS on pair distances, energy test on sorted triples."""
    t0 = time.perf_counter()
    fw = run_replicates(_StrongForward(exp), exp.seed, FORWARD, exp.reps_forward, exp.workers)
    dv = run_replicates(_StrongDual(exp), exp.seed, DUAL, exp.reps_dual, exp.workers)
    ks = stats.ks_2samp(fw[:, 0], dv[:, 0])
    checks = [Check("pair_distance_ks", "ks", bool(ks.pvalue > exp.alpha),
                    {"statistic": float(ks.statistic), "p_value": float(ks.pvalue),
                     "alpha": exp.alpha, "n_forward": len(fw), "n_dual": len(dv)})]
    m = min(energy_samples, len(fw), len(dv))
    e0, p = energy_test(fw[:m, 1:], dv[:m, 1:], n_perm, np.random.default_rng(exp.seed))
    checks.append(Check("triple_energy", "energy", p > exp.alpha,
                        {"statistic": e0, "p_value": p, "alpha": exp.alpha,
                         "n_per_side": m, "permutations": n_perm}))
    return DualityReport("strong-duality", checks,
                         _seeds(exp.seed, n_forward=exp.reps_forward, n_dual=exp.reps_dual),
                         exp.parameters(), {"forward_pair": fw[:, 0], "dual_pair": dv[:, 0]},
                         wall_time=time.perf_counter() - t0)


@dataclass
class _CountChain:
    N: int
    k0: int
    T: float
    gamma: float
    alpha: float
    selective: bool

    def __call__(self, rng):
        seed = rng.integers(0, 2 ** 63 - 1)
        kT, nu, I = girsanov.count_chain_paths(self.N, self.k0, self.T, self.gamma,
                                               self.alpha, [seed], self.selective)
        return [kT[0], nu[0], I[0]]


def run_girsanov_check(config, N=500, T=1.0, p0=0.5, reps_neutral=100000,
                       reps_selective=20000, seed=0, workers=1, z=3.0, bias=None):
    """Mean-one property (both compensator choices), reweighted vs direct
    selective fit-type frequency, and the exact two-individual check."""
    t0 = time.perf_counter()
    k0 = int(round(p0 * N))
    P = run_replicates(_CountChain(N, k0, T, config.gamma, config.alpha, False), seed,
                       FORWARD, reps_neutral, workers)
    Q = run_replicates(_CountChain(N, k0, T, config.gamma, config.alpha, True), seed,
                       DUAL, reps_selective, workers)
    kT, nu, I = P[:, 0], P[:, 1], P[:, 2]
    bias = 10.0 / N if bias is None else bias
    checks, means = [], {}
    for comp in ("neutral", "selective"):
        c = girsanov.GirsanovConfig(config.alpha, config.gamma, config.fitness,
                                    config.chi_pair, comp, config.form, config.ess_floor)
        w = np.exp(girsanov.count_chain_weight(kT, nu, I, N, k0, c))
        m, s = _mean_se(w)
        means[comp] = (m, s, w)
        ch = z_check(f"mean_one_{comp}_compensator", m, s, 1.0, 0.0, z, 0.0)
        ch.kind = "z-info" if comp != config.compensator else "z"
        checks.append(ch)
    winners = [c for c in means if abs(means[c][0] - 1.0) <= z * means[c][1]]
    w = means[config.compensator][2]
    F = kT / N
    rw = girsanov.reweighted_expectation(F, w, config.ess_floor)
    dm, ds = _mean_se(Q[:, 0] / N)
    checks.append(z_check("reweighted_vs_selective", rw.value, rw.se, dm, ds, z, bias,
                          ess=girsanov.effective_sample_size(w)))
    ex = girsanov.exact_two_individual_check(config.alpha, config.gamma, T, form="jump")
    exd = girsanov.exact_two_individual_check(config.alpha, config.gamma, T, form="diffusion")
    checks.append(Check("exact_two_individuals", "exact", ex["abs_diff"] <= 1e-6,
                        {"tolerance": 1e-6, **ex, "weight_form": "jump",
                         "diffusion_form_abs_diff": exd["abs_diff"]}))
    params = {"alpha": config.alpha, "gamma": config.gamma, "compensator": config.compensator,
              "form": config.form, "N": N, "T": T, "p0": p0, "reps_neutral": reps_neutral,
              "reps_selective": reps_selective, "compensator_winner":
              winners[0] if len(winners) == 1 else None}
    return DualityReport("girsanov-check", checks,
                         _seeds(seed, n_forward=reps_neutral, n_dual=reps_selective), params,
                         {"weight": w, "neutral_fit_frequency": F,
                          "selective_fit_frequency": Q[:, 0] / N},
                         wall_time=time.perf_counter() - t0)


def run_infdiv_check(spec, poly2=None, theta=0.7, reps=100000, split_n=3, split_reps=10000,
                     semigroup_instances=1000, seed=0, z=3.0, alpha=0.01):
    """Campbell / Laplace identities, Poisson split check and semigroup laws."""
    t0 = time.perf_counter()
    ss = np.random.SeedSequence(seed).spawn(6)
    g = [np.random.default_rng(s) for s in ss]
    checks = []
    c = infdiv.campbell_check(spec, reps, g[0], z)
    checks.append(z_check("campbell_mean_mass", c["mean_mass"], c["se"], c["exact"], 0.0, z))
    lp = infdiv.laplace_check(spec, PolynomialSpec.constant(1, theta), reps, g[1], z)
    checks.append(z_check("laplace_order1", lp["laplace_mc"], lp["laplace_se"],
                          lp["laplace_exact"], 0.0, z, levy_khintchine_rhs=lp["levy_khintchine_rhs"]))
    if poly2 is not None:
        l2 = infdiv.laplace_check(spec, poly2, reps, g[2], z)
        checks.append(z_check("laplace_order2_boundary_vanishing", l2["laplace_mc"],
                              l2["laplace_se"], l2["laplace_exact"], 0.0, z,
                              levy_khintchine_rhs=l2["levy_khintchine_rhs"]))
    sp = infdiv.split_check(spec, split_n, split_reps, g[3], alpha)
    checks.append(Check("poisson_split", "ks", sp["pass"],
                        {"mass_ks_p": sp["mass_ks_p"], "distance_ks_p": sp["distance_ks_p"],
                         "n": split_n, "reps": split_reps, "alpha": alpha}))
    fails = infdiv.semigroup_law_check(g[4], semigroup_instances, h=spec.h)
    checks.append(Check("semigroup_laws", "count", sum(fails.values()) == 0,
                        {"failures": fails, "instances": semigroup_instances}))
    tr = infdiv.truncation_check(spec, spec.h / 2.0, min(split_reps, 5000), g[5], alpha)
    checks.append(Check("truncation_consistency", "ks", tr["pass"], {"p_value": tr["ks_p"], "alpha": alpha,
                                                                     "h_truncated": spec.h / 2}))
    params = {"levy_measure": spec.to_dict(), "theta": theta, "reps": reps,
              "order2_kernel": None if poly2 is None else "max(0, 1 - r/(2h))"}
    return DualityReport("infdiv-check", checks, _seeds(seed, reps=reps), params,
                         {"laplace_order1": lp["values"], "campbell_mass": c["values"]},
                         wall_time=time.perf_counter() - t0)


@dataclass
class _Diag:
    N: int
    d: float
    T: float
    eps: tuple

    def __call__(self, rng):
        tr = forward.moran_trace(self.N, self.d, self.T, rng)
        sp = forward.trace_to_space(tr)
        return [core.diameter(sp)] + [core.covering_number(sp, e) for e in self.eps]


def run_diagnostics(N=200, d=1.0, T=10.0, eps=(0.05, 0.1, 0.2, 0.4), reps=200, seed=0,
                    workers=1):
    """Compactness functionals of equilibrium genealogies: diameter and
    ``eps``-covering numbers; ``eps N_eps`` is compared qualitatively with
    ``2/d``."""
    t0 = time.perf_counter()
    out = run_replicates(_Diag(N, d, T, tuple(eps)), seed, FORWARD, reps, workers)
    checks = []
    dm, ds = _mean_se(out[:, 0])
    checks.append(Check("diameter", "info", True, {"mean": dm, "se": ds}))
    for k, e in enumerate(eps):
        m, s = _mean_se(out[:, k + 1])
        checks.append(Check(f"covering_number_{e:g}", "info", True,
                            {"eps": e, "mean": m, "se": s, "eps_times_mean": e * m,
                             "asymptote_2_over_d": 2.0 / d}))
    reps_ = {"diameter": out[:, 0]}
    for k, e in enumerate(eps):
        reps_[f"covering_{e:g}"] = out[:, k + 1]
    return DualityReport("diagnostics", checks, _seeds(seed, n_forward=reps),
                         {"N": N, "d": d, "T": T, "eps": list(eps), "reps": reps}, reps_,
                         wall_time=time.perf_counter() - t0)
