"""Command-line experiment runner.

    genealogy-lab <subcommand> --config FILE [--seed N] [--reps N] [--out DIR] [--workers N]

The YAML config is validated against a per-experiment schema before anything
runs; every default is written back to ``config.resolved.yaml``.  Outputs in
``--out``: ``report.json`` (deterministic for a given config and seed),
``replicates.csv``, ``metadata.json`` (timestamps, wall time, worker count)
and PNG figures.  Exit status: 0 all checks pass, 2 some statistical check
failed, 1 invalid config or execution error.
"""
from __future__ import annotations

import argparse
import copy
import datetime
import json
import math
import os
import platform
import sys
import time
from importlib import resources

import numpy as np
import yaml

from . import __version__, core, forward, girsanov, harness, infdiv, plotting
from .errors import ConfigInvalid, GenealogyError

EXPERIMENTS = ("simulate", "duality-check", "fk-duality", "conditioned-duality", "equilibrium",
               "strong-duality", "girsanov-check", "infdiv-check", "diagnostics")
REPORT_SCHEMA_VERSION = 1

REQUIRED = object()


class Field:
    """One config entry: ``kind`` in int, float, str, bool, vector, matrix,
    int_vector, list; ``None`` is accepted when ``nullable``."""

    def __init__(self, kind, default=REQUIRED, choices=None, minimum=None, nullable=False):
        self.kind, self.default, self.choices = kind, default, choices
        self.minimum, self.nullable = minimum, nullable or default is None

    def check(self, value, path):
        if value is None:
            if self.nullable:
                return None
            raise ConfigInvalid(f"{path}: must not be null")
        k = self.kind
        if k == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigInvalid(f"{path}: expected an integer, got {value!r}")
        elif k == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigInvalid(f"{path}: expected a number, got {value!r}")
            value = float(value)
            if not math.isfinite(value):
                raise ConfigInvalid(f"{path}: must be finite")
        elif k == "str":
            if not isinstance(value, str):
                raise ConfigInvalid(f"{path}: expected a string, got {value!r}")
        elif k == "bool":
            if not isinstance(value, bool):
                raise ConfigInvalid(f"{path}: expected true/false, got {value!r}")
        elif k in ("vector", "int_vector"):
            if not isinstance(value, list) or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise ConfigInvalid(f"{path}: expected a list of numbers")
            if k == "int_vector" and not all(isinstance(v, int) for v in value):
                raise ConfigInvalid(f"{path}: expected a list of integers")
            value = [int(v) if k == "int_vector" else float(v) for v in value]
        elif k == "matrix":
            if (not isinstance(value, list) or not value
                    or not all(isinstance(r, list) and len(r) == len(value[0]) for r in value)):
                raise ConfigInvalid(f"{path}: expected a rectangular list of lists")
            value = [Field("vector").check(r, f"{path}[{i}]") for i, r in enumerate(value)]
        if self.choices is not None and value not in self.choices:
            raise ConfigInvalid(f"{path}: {value!r} not one of {list(self.choices)}")
        if self.minimum is not None:
            vals = value if isinstance(value, list) else [value]
            flat = [x for v in vals for x in (v if isinstance(v, list) else [v])]
            if any(x < self.minimum for x in flat):
                raise ConfigInvalid(f"{path}: must be >= {self.minimum}")
        return value


def _counts(*names):
    return {n: Field("int", None, minimum=1) for n in names}


SAMPLING = ("with_replacement", "distinct")
MODEL = {
    "simulate": {
        "engine": Field("str", "moran", choices=("moran", "branching")),
        "horizon": Field("float", minimum=0.0),
        "N": Field("int", 100, minimum=1), "d": Field("float", 1.0, minimum=0.0),
        "theta": Field("float", 0.0, minimum=0.0), "mutation_kernel": Field("matrix", None),
        "migration_rate": Field("float", 0.0, minimum=0.0),
        "migration_kernel": Field("matrix", None),
        "alpha": Field("float", 0.0, minimum=0.0), "fitness": Field("vector", None),
        "K": Field("int", 100, minimum=1), "b": Field("float", 1.0, minimum=0.0),
        "logistic": Field("vector", None), "particle_cap": Field("int", 20000, minimum=1),
        "record_log": Field("bool", False)},
    "duality-check": {
        "N": Field("int", 500, minimum=1), "d": Field("float", 1.0, minimum=0.0),
        "horizon": Field("float", minimum=0.0), **_counts("reps_forward", "reps_dual"),
        "migration_rate": Field("float", 0.0, minimum=0.0),
        "migration_kernel": Field("matrix", None),
        "kernel_mode": Field("str", "symmetrized", choices=("symmetrized", "adjoint")),
        "line_locations": Field("int_vector", None, minimum=0),
        "forward_engine": Field("str", "auto", choices=("auto", "trace", "moran"))},
    "fk-duality": {
        "K": Field("int", 200, minimum=1), "b": Field("float", 1.0, minimum=0.0),
        "horizon": Field("float", minimum=0.0), **_counts("reps_forward", "reps_dual"),
        "sampling": Field("str", "distinct", choices=SAMPLING),
        "oracle_K": Field("int_vector", [2, 3, 5], minimum=1),
        "oracle_horizon": Field("float", 0.5, minimum=0.0)},
    "conditioned-duality": {
        "K": Field("int", 1000, minimum=1), "b": Field("float", 1.0, minimum=0.0),
        "horizon": Field("float", minimum=0.0), **_counts("n_paths"),
        "samples_per_path": Field("int", 1000, minimum=2)},
    "equilibrium": {
        "N": Field("int", 500, minimum=1), "d": Field("float", 1.0, minimum=0.0),
        "horizon": Field("float", minimum=0.0), **_counts("reps_forward", "reps_dual"),
        "lams": Field("vector", [0.25, 0.5, 1.0], minimum=0.0)},
    "strong-duality": {
        "N": Field("int", 500, minimum=1), "d": Field("float", 1.0, minimum=0.0),
        "horizon": Field("float", minimum=0.0), **_counts("reps_forward", "reps_dual"),
        "n_perm": Field("int", 200, minimum=1), "energy_samples": Field("int", 1500, minimum=2)},
    "girsanov-check": {
        "N": Field("int", 500, minimum=2), "d": Field("float", 1.0, minimum=0.0),
        "horizon": Field("float", minimum=0.0), "alpha": Field("float", 0.5, minimum=0.0),
        "gamma": Field("float", None, minimum=0.0), "p0": Field("float", 0.5, minimum=0.0),
        "compensator": Field("str", "neutral", choices=("neutral", "selective")),
        "form": Field("str", "diffusion", choices=("diffusion", "jump")),
        "ess_floor": Field("float", 100.0, minimum=0.0),
        **_counts("reps_neutral", "reps_selective")},
    "infdiv-check": {
        "theta": Field("float", 0.7, minimum=0.0), "order2_kernel": Field("bool", True),
        **_counts("draws"), "split_n": Field("int", 3, minimum=1),
        "split_reps": Field("int", 10000, minimum=2),
        "semigroup_instances": Field("int", 1000, minimum=0)},
    "diagnostics": {
        "N": Field("int", 200, minimum=1), "d": Field("float", 1.0, minimum=0.0),
        "horizon": Field("float", minimum=0.0), **_counts("replicates"),
        "eps": Field("vector", [0.05, 0.1, 0.2, 0.4], minimum=0.0)},
}
DEFAULT_REPS = {"simulate": 1, "duality-check": 100000, "fk-duality": 100000,
                "conditioned-duality": 200, "equilibrium": 10000, "strong-duality": 10000,
                "girsanov-check": 100000, "infdiv-check": 100000, "diagnostics": 200}
# which model entries the replicate count fills in
REP_FIELDS = {"duality-check": ("reps_forward", "reps_dual"),
              "fk-duality": ("reps_forward", "reps_dual"),
              "conditioned-duality": ("n_paths",),
              "equilibrium": ("reps_forward", "reps_dual"),
              "strong-duality": ("reps_forward", "reps_dual"),
              "girsanov-check": ("reps_neutral", "reps_selective"),
              "infdiv-check": ("draws",), "diagnostics": ("replicates",), "simulate": ()}

POLYNOMIAL = {"order": Field("int", 2, minimum=1),
              "kernel": Field("str", "exponential", choices=("constant", "exponential", "threshold")),
              "param": Field("float", 0.5), "truncation": Field("float", None, minimum=0.0)}
INITIAL = {"distances": Field("matrix", [[0.0]], minimum=0.0),
           "masses": Field("vector", [1.0], minimum=0.0),
           "types": Field("int_vector", None, minimum=0),
           "locations": Field("int_vector", None, minimum=0)}
TOLERANCE = {"z": Field("float", 3.0, minimum=0.0), "bias": Field("float", None, minimum=0.0),
             "alpha": Field("float", 0.01, minimum=0.0)}
LEVY = {"h": Field("float", 2.0, minimum=0.0)}
ATOM = {"intensity": Field("float", minimum=0.0), "distances": Field("matrix", [[0.0]]),
        "masses": Field("vector", [1.0], minimum=0.0)}
DEFAULT_ATOMS = [{"intensity": 0.8, "distances": [[0.0]], "masses": [1.0]},
                 {"intensity": 0.5, "distances": [[0.0, 1.0], [1.0, 0.0]], "masses": [0.5, 1.0]},
                 {"intensity": 0.3, "distances": [[0.0, 2.0, 3.0], [2.0, 0.0, 3.0],
                                                  [3.0, 3.0, 0.0]], "masses": [0.4, 0.4, 0.7]}]
OUTPUT = {"figures": Field("bool", True)}


def _section(raw, schema, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"{path}: expected a mapping")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigInvalid(f"{path}.{unknown[0]}: unknown field")
    out = {}
    for name, f in schema.items():
        p = f"{path}.{name}"
        if name not in raw:
            if f.default is REQUIRED:
                raise ConfigInvalid(f"{p}: required field missing")
            out[name] = copy.deepcopy(f.default)
        else:
            out[name] = f.check(raw[name], p)
    return out


def resolve_config(raw, experiment=None, seed=None, reps=None):
    """Validate ``raw`` (a parsed YAML mapping) and return the fully
    resolved config; command-line overrides win over file values."""
    if not isinstance(raw, dict):
        raise ConfigInvalid("config: top level must be a mapping")
    top = {"experiment", "seed", "reps", "model", "polynomial", "initial", "tolerance",
           "levy", "output"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigInvalid(f"config.{unknown[0]}: unknown field")
    exp = raw.get("experiment", experiment)
    if exp is None:
        raise ConfigInvalid("config.experiment: required field missing")
    exp = Field("str", choices=EXPERIMENTS).check(exp, "config.experiment")
    if experiment is not None and exp != experiment:
        raise ConfigInvalid(f"config.experiment: {exp!r} does not match subcommand {experiment!r}")
    cfg = {"experiment": exp}
    cfg["seed"] = Field("int", 0, minimum=0).check(raw.get("seed", 0), "config.seed")
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg["reps"] = Field("int", minimum=1).check(raw.get("reps", DEFAULT_REPS[exp]), "config.reps")
    model = _section(raw.get("model"), MODEL[exp], "config.model")
    if reps is not None:
        cfg["reps"] = int(reps)
        for k in REP_FIELDS[exp]:
            model[k] = int(reps)
    for k in REP_FIELDS[exp]:
        if model[k] is None:
            model[k] = cfg["reps"]
    if exp == "girsanov-check" and model["gamma"] is None:
        model["gamma"] = model["d"]
    cfg["model"] = model
    cfg["tolerance"] = _section(raw.get("tolerance"), TOLERANCE, "config.tolerance")
    cfg["output"] = _section(raw.get("output"), OUTPUT, "config.output")
    if exp in ("duality-check", "fk-duality", "simulate", "conditioned-duality",
               "strong-duality"):
        cfg["initial"] = _section(raw.get("initial"), INITIAL, "config.initial")
        build_initial(cfg["initial"], "config.initial")
    elif "initial" in raw:
        raise ConfigInvalid(f"config.initial: not used by {exp}")
    if exp in ("duality-check", "fk-duality"):
        cfg["polynomial"] = _section(raw.get("polynomial"), POLYNOMIAL, "config.polynomial")
        build_polynomial(cfg["polynomial"], "config.polynomial")
    elif "polynomial" in raw:
        raise ConfigInvalid(f"config.polynomial: not used by {exp}")
    if exp == "infdiv-check":
        lv = raw.get("levy") or {}
        if not isinstance(lv, dict):
            raise ConfigInvalid("config.levy: expected a mapping")
        levy = _section({k: v for k, v in lv.items() if k != "atoms"}, LEVY, "config.levy")
        atoms = lv.get("atoms", DEFAULT_ATOMS)
        if not isinstance(atoms, list) or not atoms:
            raise ConfigInvalid("config.levy.atoms: expected a non-empty list")
        levy["atoms"] = [_section(a, ATOM, f"config.levy.atoms[{i}]") for i, a in enumerate(atoms)]
        cfg["levy"] = levy
        build_levy(levy)
    elif "levy" in raw:
        raise ConfigInvalid(f"config.levy: not used by {exp}")
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg):
    m = cfg["model"]
    for key in ("migration_kernel", "mutation_kernel"):
        A = m.get(key)
        if A is not None:
            A = np.asarray(A)
            if A.shape[0] != A.shape[1] or not np.allclose(A.sum(axis=1), 1.0):
                raise ConfigInvalid(f"config.model.{key}: must be square and row-stochastic")
    if cfg["experiment"] == "duality-check":
        if m["migration_kernel"] is not None and m["line_locations"] is None:
            raise ConfigInvalid("config.model.line_locations: required with a migration kernel")
        if m["line_locations"] is not None and len(m["line_locations"]) != cfg["polynomial"]["order"]:
            raise ConfigInvalid("config.model.line_locations: one site per polynomial order")
    if m.get("logistic") is not None and len(m["logistic"]) != 2:
        raise ConfigInvalid("config.model.logistic: expected [c, capacity]")
    if cfg["experiment"] == "girsanov-check" and not 0.0 <= m["p0"] <= 1.0:
        raise ConfigInvalid("config.model.p0: must lie in [0, 1]")


def build_initial(sec, path="config.initial"):
    try:
        return core.from_distance_matrix(np.asarray(sec["distances"], dtype=float),
                                         np.asarray(sec["masses"], dtype=float),
                                         sec.get("types"), sec.get("locations"))
    except (GenealogyError, ValueError) as err:
        raise ConfigInvalid(f"{path}: {err}") from err


def build_polynomial(sec, path="config.polynomial"):
    try:
        n, kind, p = sec["order"], sec["kernel"], sec["param"]
        if kind == "constant":
            return core.PolynomialSpec.constant(n, p)
        if kind == "exponential":
            return core.PolynomialSpec.exponential(n, p, truncation=sec["truncation"])
        return core.PolynomialSpec.threshold(n, p, truncation=sec["truncation"])
    except ValueError as err:
        raise ConfigInvalid(f"{path}: {err}") from err


def build_levy(sec):
    atoms = [build_initial(a, f"config.levy.atoms[{i}]") for i, a in enumerate(sec["atoms"])]
    try:
        return infdiv.LevyMeasureSpec([a["intensity"] for a in sec["atoms"]], atoms, sec["h"])
    except (GenealogyError, ValueError) as err:
        raise ConfigInvalid(f"config.levy: {err}") from err


def boundary_kernel(h):
    """Order-2 kernel ``max(0, 1 - r/(2h))``, vanishing at distance ``2h``."""
    return core.PolynomialSpec.custom(
        2, lambda D: np.maximum(0.0, 1.0 - D[:, 0, 1] / (2.0 * h)))


# ----------------------------------------------------------------------------
# dispatch
# ----------------------------------------------------------------------------

def _experiment(cfg, workers):
    m, tol = cfg["model"], cfg["tolerance"]
    kw = {k: m[k] for k in ("N", "d", "K", "b", "reps_forward", "reps_dual", "sampling",
                            "migration_rate", "kernel_mode", "n_paths", "samples_per_path",
                            "forward_engine") if k in m}
    if m.get("migration_kernel") is not None:
        kw["migration_kernel"] = np.asarray(m["migration_kernel"], dtype=float)
    if m.get("line_locations") is not None:
        kw["line_locations"] = np.asarray(m["line_locations"], dtype=np.int64)
    if "lams" in m:
        kw["lams"] = tuple(m["lams"])
    poly = build_polynomial(cfg["polynomial"]) if "polynomial" in cfg else None
    init = build_initial(cfg["initial"]) if "initial" in cfg else None
    return harness.DualityExperiment(poly=poly, initial=init, horizon=m["horizon"],
                                     z=tol["z"], bias=tol["bias"], alpha=tol["alpha"],
                                     seed=cfg["seed"], workers=workers, **kw)


def run_experiment(cfg, workers=1, out_dir=None):
    """Run a resolved config; returns a :class:`harness.DualityReport`."""
    exp, m, tol = cfg["experiment"], cfg["model"], cfg["tolerance"]
    if exp == "simulate":
        return _simulate(cfg, workers, out_dir)
    if exp == "duality-check":
        return harness.run_moment_duality(_experiment(cfg, workers))
    if exp == "fk-duality":
        return harness.run_fk_duality(_experiment(cfg, workers), tuple(m["oracle_K"]),
                                      m["oracle_horizon"])
    if exp == "conditioned-duality":
        return harness.run_conditioned_duality(_experiment(cfg, workers))
    if exp == "equilibrium":
        return harness.run_equilibrium_check(_experiment(cfg, workers))
    if exp == "strong-duality":
        return harness.run_strong_duality_check(_experiment(cfg, workers), m["n_perm"],
                                                m["energy_samples"])
    if exp == "girsanov-check":
        gc = girsanov.GirsanovConfig(m["alpha"], m["gamma"], np.array([0.0, 1.0]),
                                     compensator=m["compensator"], form=m["form"],
                                     ess_floor=m["ess_floor"])
        return harness.run_girsanov_check(gc, m["N"], m["horizon"], m["p0"], m["reps_neutral"],
                                          m["reps_selective"], cfg["seed"], workers, tol["z"],
                                          tol["bias"])
    if exp == "infdiv-check":
        spec = build_levy(cfg["levy"])
        poly2 = boundary_kernel(spec.h) if m["order2_kernel"] else None
        return harness.run_infdiv_check(spec, poly2, m["theta"], m["draws"], m["split_n"],
                                        m["split_reps"], m["semigroup_instances"], cfg["seed"],
                                        tol["z"], tol["alpha"])
    if exp == "diagnostics":
        return harness.run_diagnostics(m["N"], m["d"], m["horizon"], tuple(m["eps"]),
                                       m["replicates"], cfg["seed"], workers)
    raise ConfigInvalid(f"config.experiment: unknown experiment {exp!r}")


def _simulate(cfg, workers, out_dir):
    """Forward runs; writes genealogy JSON, optional event logs and (for
    branching) mass paths per replicate."""
    t0 = time.perf_counter()
    m = cfg["model"]
    init = build_initial(cfg["initial"])
    arr = lambda x: None if x is None else np.asarray(x, dtype=float)  # noqa: E731
    rows, checks, figs = [], [], {}
    for i in range(cfg["reps"]):
        rng = harness.replicate_rng(cfg["seed"], harness.FORWARD, i)
        if m["engine"] == "moran":
            mc = forward.MoranConfig(N=m["N"], d=m["d"], theta=m["theta"],
                                     mutation_kernel=arr(m["mutation_kernel"]),
                                     migration_rate=m["migration_rate"],
                                     migration_kernel=arr(m["migration_kernel"]),
                                     alpha=m["alpha"], fitness=arr(m["fitness"]),
                                     initial=init, record_log=m["record_log"])
            st = forward.moran_run(mc, m["horizon"], rng)
            space = forward.extract_genealogy(st, init)
            path = None
        else:
            bc = forward.BranchingConfig(b=m["b"], K=m["K"], initial=init,
                                         logistic=None if m["logistic"] is None
                                         else tuple(m["logistic"]),
                                         particle_cap=m["particle_cap"])
            st = forward.branching_run(bc, m["horizon"], rng)
            space = forward.extract_genealogy(st, init, as_space=True)
            path = st.mass_path
        if out_dir is not None:
            with open(os.path.join(out_dir, f"genealogy_{i}.json"), "w") as fh:
                fh.write(space.to_json())
            if st.event_log is not None and m["record_log"]:
                with open(os.path.join(out_dir, f"events_{i}.jsonl"), "w") as fh:
                    fh.write(st.event_log.to_jsonl())
            if path is not None:
                with open(os.path.join(out_dir, f"mass_path_{i}.csv"), "w") as fh:
                    fh.write(path.to_csv())
        rows.append((space.total_mass, space.n_leaves,
                     core.diameter(space) if space.n_leaves else 0.0))
        if i == 0 and out_dir is not None and cfg["output"]["figures"]:
            if space.n_leaves > 1:
                figs["genealogy"] = plotting.plot_distance_matrix(space, out_dir)
            if path is not None:
                figs["mass_path"] = plotting.plot_mass_path(path, out_dir)
    arr_rows = np.array(rows, dtype=float).reshape(-1, 3)
    checks.append(harness.Check("runs", "info", True, {"replicates": cfg["reps"],
                                                       "engine": m["engine"]}))
    rep = harness.DualityReport("simulate", checks, harness._seeds(cfg["seed"], n_forward=cfg["reps"]),
                                dict(m), {"total_mass": arr_rows[:, 0],
                                          "n_leaves": arr_rows[:, 1],
                                          "diameter": arr_rows[:, 2]},
                                wall_time=time.perf_counter() - t0)
    rep.figures = figs
    return rep


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def preset_path(name):
    """Path of a shipped preset (``name`` with or without ``.yaml``)."""
    if not name.endswith(".yaml"):
        name += ".yaml"
    return str(resources.files("genealogy_lab") / "presets" / name)


def list_presets():
    d = resources.files("genealogy_lab") / "presets"
    return sorted(p.name[:-5] for p in d.iterdir() if p.name.endswith(".yaml"))


def load_config(path):
    if not os.path.exists(path) and os.path.sep not in path:
        cand = preset_path(path)
        if os.path.exists(cand):
            path = cand
    try:
        with open(path) as fh:
            return yaml.safe_load(fh)
    except OSError as err:
        raise ConfigInvalid(f"config: cannot read {path}: {err.strerror}") from err
    except yaml.YAMLError as err:
        raise ConfigInvalid(f"config: YAML parse error: {err}") from err


def _summary_line(c):
    v = c.values
    if "tolerance" in v and "abs_diff" in v and "estimate" in v:
        detail = (f"est={v.get('estimate', math.nan):.6g} ref={v.get('reference', math.nan):.6g} "
                  f"|diff|={v['abs_diff']:.3g} tol={v['tolerance']:.3g}")
    elif "max_abs_diff" in v or "abs_diff" in v:
        diff = v.get("max_abs_diff", v.get("abs_diff"))
        detail = f"|diff|={diff:.3g} tol={v['tolerance']:.3g}"
    elif "p_value" in v:
        detail = f"p={v['p_value']:.4g} alpha={v.get('alpha', math.nan):g}"
    elif "rejections" in v:
        detail = f"rejections={v['rejections']}/{v['n_paths']} binom_p={v['binomial_tail_p']:.4g}"
    elif "failures" in v:
        detail = f"failures={sum(v['failures'].values())}/{v['instances']}"
    elif "mass_ks_p" in v:
        detail = f"mass_p={v['mass_ks_p']:.4g} distance_p={v['distance_ks_p']:.4g}"
    elif "mean" in v:
        detail = f"mean={v['mean']:.6g} se={v['se']:.3g}"
    else:
        detail = ""
    tag = "PASS" if c.passed else "FAIL"
    if c.kind in harness.INFO_KINDS:
        tag = "INFO"
    return f"{tag} {c.name} [{c.kind}] {detail}".rstrip()


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="genealogy-lab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="YAML config file or the name of a shipped preset")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--reps", type=int, help="replicate count (overrides the config)")
        p.add_argument("--out", default=None, help="output directory (default results/<cmd>)")
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default ${harness.WORKERS_ENV} or 1)")
        p.add_argument("--no-figures", action="store_true")
    sub.add_parser("presets", help="list shipped presets")
    args = ap.parse_args(argv)
    if args.command == "presets":
        print("\n".join(list_presets()))
        return 0
    workers = args.workers if args.workers is not None else harness.default_workers()
    out = args.out or os.path.join("results", args.command)
    started = datetime.datetime.now(datetime.timezone.utc)
    t0 = time.perf_counter()
    report = None
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigInvalid("--seed: must be >= 0")
        if args.reps is not None and args.reps < 1:
            raise ConfigInvalid("--reps: must be >= 1")
        if workers < 1:
            raise ConfigInvalid("--workers: must be >= 1")
        cfg = resolve_config(load_config(args.config), args.command, args.seed, args.reps)
        if args.no_figures:
            cfg["output"]["figures"] = False
        os.makedirs(out, exist_ok=True)
        _write(os.path.join(out, "config.resolved.yaml"),
               yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None))
        report = run_experiment(cfg, workers, out)
    except GenealogyError as err:
        report = getattr(err, "report", None)
        print(f"error: {err.code}: {err}", file=sys.stderr)
        status = 1
    except Exception as err:  # execution error: exit 1 with a readable message
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        status = 1
    else:
        status = 0 if report.verdict else 2
    if report is not None and os.path.isdir(out):
        doc = report.to_dict()
        doc["schema_version"] = REPORT_SCHEMA_VERSION
        _write(os.path.join(out, "report.json"), json.dumps(doc, sort_keys=True, indent=2) + "\n")
        _write(os.path.join(out, "replicates.csv"), report.replicate_csv())
        if status != 1 and report.experiment != "simulate" and cfg["output"]["figures"]:
            plotting.render_report(report, out)
        meta = {"started_utc": started.isoformat(), "wall_time_s": time.perf_counter() - t0,
                "experiment_wall_time_s": report.wall_time, "workers": workers,
                "version": __version__, "python": platform.python_version(),
                "numpy": np.__version__, "argv": list(sys.argv if argv is None else argv),
                "figures": report.figures, "exit_status": status}
        _write(os.path.join(out, "metadata.json"), json.dumps(meta, sort_keys=True, indent=2) + "\n")
        for c in report.checks:
            print(_summary_line(c))
        print(f"verdict: {'pass' if status == 0 else 'fail'} ({report.experiment}) -> {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
