"""Finite (marked) ultrametric measure spaces stored as canonical dendrograms.

A space is a rooted tree whose leaves carry masses (and optionally a mark
``(location, type)``) and whose internal nodes carry a *merge value*: the
distance, in distance units (twice the time to the most recent common
ancestor), realized between leaves in different child subtrees.

Leaves keep the index they were constructed with, so that
``space.distance_matrix()`` reproduces the input of
:func:`from_distance_matrix` entrywise.  Equivalence-class questions
(hashing, serialization, isomorphism) are answered on the *reduced* form,
which drops zero-mass leaves and merges zero-distance leaves with equal marks.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import wasserstein_distance

from .errors import (BudgetExceeded, ComponentTooTall, DimensionMismatch,
                     EmptyBase, EmptySpace, NegativeMass, NonMonotoneMap,
                     NotUltrametric, TopTooTall)

__all__ = [
    "Node", "UltrametricSpace", "MarkedUltrametricSpace", "DistanceMatrixSample",
    "PolynomialSpec", "PolyValue", "MassDecomposition",
    "from_distance_matrix", "from_merges", "single_leaf", "zero_space",
    "sample_distance_matrix", "evaluate_polynomial", "truncate", "concatenate",
    "graft", "metric_transform", "canonical_hash", "isomorphic", "diameter",
    "covering_number", "mass", "gp_distance_bounds", "decompose", "compose",
    "pair_distance_law", "random_space", "find_separating_polynomial",
]

sys.setrecursionlimit(max(20000, sys.getrecursionlimit()))

DEFAULT_BUDGET = 10 ** 7


class Node:
    """Internal dendrogram node: a merge value and a tuple of children.

    Children are either ``Node`` instances or integer leaf indices.
    """
    __slots__ = ("value", "children", "_size")

    def __init__(self, value, children):
        self.value = float(value)
        self.children = tuple(children)
        self._size = None

    def __repr__(self):
        return f"Node({self.value!r}, {list(self.children)!r})"


def _leaves_under(node):
    if not isinstance(node, Node):
        return [node]
    out = []
    stack = [node]
    while stack:
        x = stack.pop()
        if isinstance(x, Node):
            stack.extend(reversed(x.children))
        else:
            out.append(x)
    return out


def _n_leaves(node):
    if not isinstance(node, Node):
        return 1
    n = node._size
    if n is None:
        n = sum(_n_leaves(c) for c in node.children)
        node._size = n
    return n


def _iter_nodes(node):
    stack = [node]
    while stack:
        x = stack.pop()
        if isinstance(x, Node):
            yield x
            stack.extend(x.children)


def _normalize(node):
    """Splice children carrying their parent's merge value, drop single-child
    nodes, and check that merge values strictly increase toward the root."""
    if not isinstance(node, Node):
        return node
    kids = []
    for c in node.children:
        c = _normalize(c)
        if isinstance(c, Node) and c.value == node.value:
            kids.extend(c.children)
        else:
            kids.append(c)
    if len(kids) == 0:
        return None
    if len(kids) == 1:
        return kids[0]
    for c in kids:
        if isinstance(c, Node) and not c.value < node.value:
            raise NotUltrametric(
                f"merge value {c.value} below a node with value {node.value}")
    if node.value < 0 or not math.isfinite(node.value):
        raise NotUltrametric(f"invalid merge value {node.value}")
    return Node(node.value, kids)


def _mark_str(types, locations, i):
    t = "" if types is None else int(types[i])
    g = "" if locations is None else int(locations[i])
    return f"{t}|{g}"


class UltrametricSpace:
    """Finite ultrametric measure space in dendrogram form.

    Parameters
    ----------
    root : Node, int or None
        Dendrogram over leaf indices ``0..n-1``; ``None`` for the empty space.
    masses : array_like
        Leaf masses (nonnegative).
    types, locations : array_like of int, optional
        Leaf marks.  Supplying either makes the space marked (the other
        defaults to zeros).
    """

    def __init__(self, root, masses, types=None, locations=None):
        masses = np.array(masses, dtype=float).reshape(-1)
        if np.any(masses < 0) or not np.all(np.isfinite(masses)):
            raise NegativeMass("leaf masses must be finite and nonnegative")
        n = masses.shape[0]
        if (types is None) != (locations is None):
            if types is None:
                types = np.zeros(n, dtype=np.int64)
            else:
                locations = np.zeros(n, dtype=np.int64)
        if types is not None:
            types = np.array(types, dtype=np.int64).reshape(-1)
            locations = np.array(locations, dtype=np.int64).reshape(-1)
            if types.shape[0] != n or locations.shape[0] != n:
                raise DimensionMismatch("marks and masses differ in length")
            types.setflags(write=False)
            locations.setflags(write=False)
        root = _normalize(root) if root is not None else None
        leaves = sorted(_leaves_under(root)) if root is not None else []
        if leaves != list(range(n)):
            raise DimensionMismatch(
                f"dendrogram leaves do not match {n} leaf masses")
        masses.setflags(write=False)
        self.masses = masses
        self.types = types
        self.locations = locations
        self.root = root
        self._dm = None
        self._reduced = None

    # -- basic accessors ------------------------------------------------
    @property
    def n_leaves(self):
        return self.masses.shape[0]

    @property
    def total_mass(self):
        return math.fsum(self.masses)

    @property
    def is_marked(self):
        return self.types is not None

    def marks(self):
        """List of ``(location, type)`` pairs, or ``None`` if unmarked."""
        if not self.is_marked:
            return None
        return list(zip(self.locations.tolist(), self.types.tolist()))

    def internal_nodes(self):
        return list(_iter_nodes(self.root)) if isinstance(self.root, Node) else []

    def height(self):
        """Largest merge value over all leaves (including zero-mass ones)."""
        return self.root.value if isinstance(self.root, Node) else 0.0

    def subtree_mass(self, node):
        return math.fsum(sorted(self.masses[_leaves_under(node)]))

    # -- distances -------------------------------------------------------
    def distance_matrix(self):
        """Full pairwise distance matrix over leaf indices (cached, read-only)."""
        if self._dm is None:
            n = self.n_leaves
            order = _leaves_under(self.root) if self.root is not None else []
            # leaves of every subtree are contiguous in DFS order
            Dp = np.zeros((n, n))
            stack = [(self.root, 0)]
            while stack:
                node, lo = stack.pop()
                if not isinstance(node, Node):
                    continue
                bounds = [lo]
                for c in node.children:
                    bounds.append(bounds[-1] + _n_leaves(c))
                for a in range(len(node.children)):
                    a0, a1 = bounds[a], bounds[a + 1]
                    Dp[a0:a1, a1:bounds[-1]] = node.value
                    Dp[a1:bounds[-1], a0:a1] = node.value
                    stack.append((node.children[a], a0))
            inv = np.empty(n, dtype=np.int64)
            inv[np.asarray(order, dtype=np.int64)] = np.arange(n)
            D = Dp[np.ix_(inv, inv)] if n else Dp
            D.setflags(write=False)
            self._dm = D
        return self._dm

    def pairwise_distance(self, i, j):
        return float(self.distance_matrix()[i, j])

    # -- reduced form / serialization -------------------------------------
    def _reduce(self, node):
        """Nested reduced representation: leaves are (mass, type, loc)."""
        if not isinstance(node, Node):
            m = float(self.masses[node])
            if m == 0.0:
                return None
            t = None if self.types is None else int(self.types[node])
            g = None if self.locations is None else int(self.locations[node])
            return ("leaf", m, t, g)
        kids = [k for k in (self._reduce(c) for c in node.children) if k is not None]
        if node.value == 0.0:
            # all children are leaves: merge equal marks
            groups = {}
            for k in kids:
                groups.setdefault((k[2], k[3]), []).append(k[1])
            kids = [("leaf", math.fsum(sorted(ms)), t, g)
                    for (t, g), ms in groups.items()]
        if not kids:
            return None
        if len(kids) == 1:
            return kids[0]
        return ("node", node.value, kids)

    def _reduced_tree(self):
        if self._reduced is None:
            self._reduced = (self._reduce(self.root) if self.root is not None
                             else None)
        return self._reduced

    def to_dict(self):
        """Canonical JSON-ready form of the equivalence class."""
        marked = self.is_marked

        def conv(x):
            if x[0] == "leaf":
                d = {"mass": x[1]}
                if marked:
                    d["type"] = x[2]
                    d["location"] = x[3]
                return d, x[1], _h(d)
            kids = [conv(k) for k in x[2]]
            kids.sort(key=lambda k: (k[1], k[2]))
            m = math.fsum(sorted(k[1] for k in kids))
            d = {"merge_value": x[1], "children": [k[0] for k in kids]}
            return d, m, _h(d)

        red = self._reduced_tree()
        return None if red is None else conv(red)[0]

    def to_json(self):
        return _dumps(self.to_dict())

    def canonical(self):
        """The reduced canonical representative as a new space."""
        return from_dict(self.to_dict(), marked=self.is_marked)

    def forget_marks(self):
        return UltrametricSpace(self.root, self.masses)

    def with_masses(self, masses):
        return _make(self.root, masses, self.types, self.locations)

    def __repr__(self):
        return (f"{type(self).__name__}(n_leaves={self.n_leaves}, "
                f"total_mass={self.total_mass:.6g}, height={self.height():.6g})")


class MarkedUltrametricSpace(UltrametricSpace):
    """Ultrametric measure space whose leaves carry ``(location, type)`` marks."""

    def __init__(self, root, masses, types=None, locations=None):
        n = np.asarray(masses).reshape(-1).shape[0]
        if types is None and locations is None:
            types = np.zeros(n, dtype=np.int64)
        super().__init__(root, masses, types, locations)


def _make(root, masses, types=None, locations=None):
    if types is None and locations is None:
        return UltrametricSpace(root, masses)
    return MarkedUltrametricSpace(root, masses, types, locations)


def _h(d):
    return hashlib.sha256(_dumps(d).encode()).hexdigest()


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ----------------------------------------------------------------------------
# constructors
# ----------------------------------------------------------------------------

def zero_space(marked=False):
    """The zero element (no leaves, total mass 0)."""
    if marked:
        return MarkedUltrametricSpace(None, np.zeros(0), np.zeros(0, int),
                                      np.zeros(0, int))
    return UltrametricSpace(None, np.zeros(0))


def single_leaf(mass=1.0, type=None, location=None):
    if type is None and location is None:
        return UltrametricSpace(0, [mass])
    return MarkedUltrametricSpace(0, [mass], [type or 0], [location or 0])


def from_distance_matrix(distances, masses, types=None, locations=None,
                         allow_zero=False):
    """Build the canonical dendrogram of a finite ultrametric.

    The input is compared exactly (tolerance 0); the reconstruction must
    reproduce every entry or :class:`NotUltrametric` is raised.
    """
    D = np.array(distances, dtype=float)
    masses = np.array(masses, dtype=float).reshape(-1)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise DimensionMismatch("distance matrix must be square")
    n = D.shape[0]
    if masses.shape[0] != n:
        raise DimensionMismatch(f"{masses.shape[0]} masses for {n} points")
    if np.any(masses < 0) or not np.all(np.isfinite(masses)):
        raise NegativeMass("masses must be finite and nonnegative")
    if n == 0:
        if not allow_zero:
            raise EmptySpace("no points given")
        return zero_space(marked=types is not None or locations is not None)
    if not allow_zero and not np.any(masses > 0):
        raise EmptySpace("all masses are zero")
    if not np.all(np.isfinite(D)) or np.any(D < 0):
        raise NotUltrametric("distances must be finite and nonnegative")
    if not np.array_equal(D, D.T):
        raise NotUltrametric("distance matrix is not symmetric")
    if np.any(np.diag(D) != 0):
        raise NotUltrametric("nonzero diagonal")

    def build(idx):
        if idx.shape[0] == 1:
            return int(idx[0])
        sub = D[np.ix_(idx, idx)]
        m = sub.max()
        if m == 0.0:
            return Node(0.0, [int(i) for i in idx])
        remaining = np.ones(idx.shape[0], dtype=bool)
        kids = []
        while remaining.any():
            i = np.flatnonzero(remaining)[0]
            cls = remaining & (sub[i] < m)
            if cls.all():
                raise NotUltrametric("three-point condition violated")
            kids.append(build(idx[cls]))
            remaining &= ~cls
        return Node(m, kids)

    root = build(np.arange(n))
    try:
        space = _make(root, masses, types, locations)
    except NotUltrametric:
        raise NotUltrametric("three-point condition violated") from None
    if not np.array_equal(space.distance_matrix(), D):
        raise NotUltrametric("three-point condition violated")
    return space


def from_merges(n_leaves, merges, masses, types=None, locations=None,
                top_value=None):
    """Build a space from a linkage-style merge list.

    ``merges`` is a sequence of ``(a, b, value)``; cluster ids ``0..n-1`` are
    leaves and merge ``k`` creates cluster ``n + k``.  Clusters still separate
    at the end are joined at ``top_value`` (required if more than one remains).
    """
    items = {i: i for i in range(n_leaves)}
    nxt = n_leaves
    for a, b, v in merges:
        a, b = int(a), int(b)
        items[nxt] = Node(v, [items.pop(a), items.pop(b)])
        nxt += 1
    roots = list(items.values())
    if n_leaves == 0:
        return zero_space(marked=types is not None)
    if len(roots) == 1:
        root = roots[0]
    else:
        if top_value is None:
            raise DimensionMismatch("several clusters remain and no top_value")
        root = Node(top_value, roots)
    return _make(root, masses, types, locations)


def from_dict(d, marked=None):
    """Inverse of :meth:`UltrametricSpace.to_dict`."""
    if d is None:
        return zero_space(marked=bool(marked))
    masses, types, locs = [], [], []

    def walk(x):
        if "children" in x:
            return Node(x["merge_value"], [walk(c) for c in x["children"]])
        masses.append(float(x["mass"]))
        types.append(x.get("type"))
        locs.append(x.get("location"))
        return len(masses) - 1

    root = walk(d)
    if marked is None:
        marked = any(t is not None for t in types) or any(g is not None for g in locs)
    if marked:
        return MarkedUltrametricSpace(root, masses,
                                      [t or 0 for t in types], [g or 0 for g in locs])
    return UltrametricSpace(root, masses)


def from_json(text, marked=None):
    return from_dict(json.loads(text), marked=marked)


# ----------------------------------------------------------------------------
# sampling and polynomials
# ----------------------------------------------------------------------------

@dataclass
class DistanceMatrixSample:
    distances: np.ndarray
    leaves: np.ndarray
    marks: Optional[list] = None

    @property
    def order(self):
        return self.distances.shape[0]

    def is_ultrametric(self):
        D = self.distances
        # D[i,k] <= max(D[i,j], D[j,k]) for all i, j, k
        return bool(np.all(D[:, None, :] <= np.maximum(D[:, :, None], D[None, :, :])))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        n = self.order
        for i in range(n):
            for j in range(n):
                w.writerow([i, j, repr(float(self.distances[i, j]))])
        return buf.getvalue()


def _probabilities(space):
    tm = space.total_mass
    if tm <= 0:
        raise EmptySpace("space has zero total mass")
    p = space.masses / tm
    return p / p.sum()


def sample_distance_matrix(space, n, rng):
    """Draw ``n`` leaves i.i.d. from the normalized sampling measure."""
    if n < 1:
        raise ValueError("order must be >= 1")
    p = _probabilities(space)
    idx = rng.choice(space.n_leaves, size=n, p=p)
    D = space.distance_matrix()[np.ix_(idx, idx)].copy()
    marks = None
    if space.is_marked:
        marks = [(int(space.locations[i]), int(space.types[i])) for i in idx]
    return DistanceMatrixSample(D, idx, marks)


@dataclass(frozen=True, eq=False)
class PolynomialSpec:
    """Test function ``Phi^{n, phi}`` (optionally with a mark factor).

    Build instances with :meth:`constant`, :meth:`exponential`,
    :meth:`threshold` or :meth:`custom`.  ``truncation=h`` evaluates the
    kernel on ``r ∧ 2h`` (the h-truncated polynomial).
    """
    order: int
    kernel: str
    params: object = None
    func: Optional[Callable] = None
    mark_factor: Optional[Callable] = None
    bound: float = 1.0
    truncation: Optional[float] = None

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("polynomial order must be >= 1")

    @classmethod
    def constant(cls, n, c=1.0, mark_factor=None):
        return cls(n, "constant", float(c), mark_factor=mark_factor,
                   bound=abs(float(c)))

    @classmethod
    def exponential(cls, n, lam, mark_factor=None, truncation=None):
        L = np.broadcast_to(np.asarray(lam, dtype=float), (n, n)).copy()
        L = np.triu(L, 1)
        if np.any(L < 0):
            raise ValueError("exponential rates must be >= 0")
        return cls(n, "exponential", L, mark_factor=mark_factor,
                   truncation=truncation)

    @classmethod
    def threshold(cls, n, c, mark_factor=None, truncation=None):
        C = np.broadcast_to(np.asarray(c, dtype=float), (n, n)).copy()
        return cls(n, "threshold", C, mark_factor=mark_factor,
                   truncation=truncation)

    @classmethod
    def custom(cls, n, func, bound=1.0, mark_factor=None, truncation=None):
        """``func`` maps an array of shape (B, n, n) to shape (B,)."""
        return cls(n, "custom", None, func=func, mark_factor=mark_factor,
                   bound=float(bound), truncation=truncation)

    def phi(self, D):
        """Evaluate the distance kernel on a batch of matrices (B, n, n)."""
        D = np.asarray(D, dtype=float)
        if self.truncation is not None:
            D = np.minimum(D, 2.0 * self.truncation)
        B = D.shape[0]
        if self.kernel == "constant":
            return np.full(B, self.params)
        if self.kernel == "exponential":
            return np.exp(-np.einsum("bkl,kl->b", D, self.params))
        if self.kernel == "threshold":
            iu = np.triu_indices(self.order, 1)
            if len(iu[0]) == 0:
                return np.ones(B)
            return np.all(D[:, iu[0], iu[1]] <= self.params[iu], axis=1).astype(float)
        return np.asarray(self.func(D), dtype=float).reshape(B)

    def __call__(self, D, locations=None, types=None):
        v = self.phi(D)
        if self.mark_factor is not None:
            v = v * np.asarray(self.mark_factor(locations, types), dtype=float)
        return v


@dataclass
class PolyValue:
    value: float
    se: float = 0.0

    def __iter__(self):
        return iter((self.value, self.se))

    def __float__(self):
        return float(self.value)


def _tuple_blocks(L, n, block=1 << 16):
    s = n
    while s > 0 and L ** s > block:
        s -= 1
    if s > 0:
        suffix = np.indices((L,) * s).reshape(s, -1).T
    else:
        suffix = np.zeros((1, 0), dtype=np.int64)
    for prefix in itertools.product(range(L), repeat=n - s):
        pre = np.broadcast_to(np.array(prefix, dtype=np.int64), (suffix.shape[0], n - s))
        yield np.hstack([pre, suffix])


def _eval_tuples(space, poly, idx, D):
    sub = D[idx[:, :, None], idx[:, None, :]]
    if poly.mark_factor is not None and space.is_marked:
        return poly(sub, space.locations[idx], space.types[idx])
    if poly.mark_factor is not None:
        z = np.zeros(idx.shape, dtype=np.int64)
        return poly(sub, z, z)
    return poly.phi(sub)


def evaluate_polynomial(space, poly, mode="exact", reps=None, rng=None,
                        normalized=True, sampling="with_replacement",
                        budget=DEFAULT_BUDGET):
    """Evaluate ``Phi^{n, phi}`` on a space.

    ``mode`` is ``"exact"`` (sum over all ordered leaf n-tuples, SE 0) or
    ``"monte_carlo"`` (``reps`` i.i.d. tuples, SE reported).  With
    ``normalized=False`` raw masses are used, so that the order-1 constant
    polynomial returns the total mass.  ``sampling="distinct"`` restricts to
    tuples of pairwise distinct leaves (factorial moment measure).
    """
    n = poly.order
    L = space.n_leaves
    tm = space.total_mass
    if tm <= 0:
        if normalized:
            raise EmptySpace("cannot normalize a zero-mass space")
        return PolyValue(0.0, 0.0)
    distinct = sampling == "distinct"
    if sampling not in ("with_replacement", "distinct"):
        raise ValueError(f"unknown sampling scheme {sampling!r}")
    m = space.masses
    if distinct:
        # total mass of the off-diagonal part of mu^{⊗n}
        if n > L:
            return PolyValue(0.0, 0.0)
        norm = _offdiag_mass(m, n)
    else:
        norm = tm ** n
    if norm <= 0:
        return PolyValue(0.0, 0.0)
    D = space.distance_matrix()
    if mode == "exact":
        if L ** n > budget:
            raise BudgetExceeded(f"{L}^{n} tuples exceed budget {budget}")
        parts = []
        for idx in _tuple_blocks(L, n):
            w = np.prod(m[idx], axis=1)
            if distinct:
                w = w * _all_distinct(idx)
            keep = w > 0
            if not keep.any():
                continue
            idx, w = idx[keep], w[keep]
            parts.append(float(np.dot(w, _eval_tuples(space, poly, idx, D))))
        total = math.fsum(parts)
        val = total / norm if normalized else total
        return PolyValue(val, 0.0)
    if mode in ("monte_carlo", "mc"):
        if rng is None or reps is None:
            raise ValueError("monte_carlo mode needs reps and rng")
        p = m / tm
        p = p / p.sum()
        idx = rng.choice(L, size=(int(reps), n), p=p)
        if distinct:
            bad = ~_all_distinct(idx).astype(bool)
            while bad.any():
                idx[bad] = rng.choice(L, size=(int(bad.sum()), n), p=p)
                bad = ~_all_distinct(idx).astype(bool)
        vals = _eval_tuples(space, poly, idx, D)
        scale = 1.0 if normalized else norm
        mean = math.fsum(vals) / len(vals)
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        return PolyValue(scale * mean, scale * se)
    raise ValueError(f"unknown mode {mode!r}")


def _all_distinct(idx):
    n = idx.shape[1]
    ok = np.ones(idx.shape[0])
    for a in range(n):
        for b in range(a + 1, n):
            ok = ok * (idx[:, a] != idx[:, b])
    return ok


def _offdiag_mass(m, n):
    """Sum over ordered tuples of distinct indices of the product of masses."""
    # elementary symmetric polynomial e_n times n!
    e = np.zeros(n + 1)
    e[0] = 1.0
    for x in m:
        e[1:] = e[1:] + x * e[:-1]
    return float(e[n] * math.factorial(n))


def pair_distance_law(space):
    """Exact law of the distance between two i.i.d. samples.

    Returns ``(values, weights)`` sorted by value.
    """
    p = _probabilities(space)
    atoms = {0.0: math.fsum(p ** 2)}
    for node in space.internal_nodes():
        s = [math.fsum(p[_leaves_under(c)]) for c in node.children]
        w = math.fsum(s) ** 2 - math.fsum(x * x for x in s)
        atoms[node.value] = atoms.get(node.value, 0.0) + w
    vals = np.array(sorted(atoms))
    wts = np.array([atoms[v] for v in vals])
    keep = wts > 0
    return vals[keep], wts[keep] / wts[keep].sum()


# ----------------------------------------------------------------------------
# algebra
# ----------------------------------------------------------------------------

def _map_values(node, f):
    if not isinstance(node, Node):
        return node
    return Node(f(node.value), [_map_values(c, f) for c in node.children])


def truncate(space, h):
    """h-top: cap every distance at ``2h``."""
    if h < 0:
        raise ValueError("truncation level must be >= 0")
    if space.root is None:
        return space
    cap = 2.0 * h
    return _make(_map_values(space.root, lambda v: min(v, cap)), space.masses,
                 space.types, space.locations)


def concatenate(components, h):
    """h-concatenation: disjoint union with all cross distances exactly ``2h``."""
    if h <= 0:
        raise ValueError("concatenation level must be > 0")
    comps = [c for c in components if c.n_leaves > 0]
    marked = [c.is_marked for c in comps]
    if any(marked) and not all(marked):
        raise DimensionMismatch("cannot concatenate marked and unmarked spaces")
    for c in comps:
        if c.height() > 2.0 * h:
            raise ComponentTooTall(f"component height {c.height()} > 2h = {2 * h}")
    if not comps:
        return zero_space(marked=any(c.is_marked for c in components))
    if len(comps) == 1:
        return comps[0]
    roots, masses, types, locs = [], [], [], []
    off = 0
    for c in comps:
        roots.append(_map_leaves(c.root, off))
        masses.append(c.masses)
        if c.is_marked:
            types.append(c.types)
            locs.append(c.locations)
        off += c.n_leaves
    root = Node(2.0 * h, roots)
    if comps[0].is_marked:
        return MarkedUltrametricSpace(root, np.concatenate(masses),
                                      np.concatenate(types), np.concatenate(locs))
    return UltrametricSpace(root, np.concatenate(masses))


def _map_leaves(node, off):
    if not isinstance(node, Node):
        return node + off
    return Node(node.value, [_map_leaves(c, off) for c in node.children])


def ancestor_lines(space, t):
    """Leaf groups of ``space`` that coalesce strictly below ``2t``."""
    root = space.root
    if root is None:
        return []
    if isinstance(root, Node) and root.value >= 2.0 * t:
        return [c for c in root.children]
    return [root]


def graft(base, top, t, rng):
    """Attach the ancestor lines of ``top`` (depth ``t``) to ``mu_base``-samples.

    Pairs of ``top`` at distance < 2t keep their distance; every other pair
    gets ``2t + r_base(beta, beta')`` where ``beta`` are the independently
    sampled ancestors of the two lines.
    """
    if top.height() > 2.0 * t:
        raise TopTooTall(f"top height {top.height()} > 2t = {2 * t}")
    if base.total_mass <= 0:
        raise EmptyBase("base space has zero mass")
    if top.n_leaves == 0:
        return top
    lines = ancestor_lines(top, t)
    p = _probabilities(base)
    beta = rng.choice(base.n_leaves, size=len(lines), p=p)
    assigned = {}
    for line, b in zip(lines, beta):
        assigned.setdefault(int(b), []).append(line)

    def rebuild(node):
        if not isinstance(node, Node):
            ls = assigned.get(node)
            if not ls:
                return None
            return ls[0] if len(ls) == 1 else Node(2.0 * t, ls)
        kids = [k for k in (rebuild(c) for c in node.children) if k is not None]
        if not kids:
            return None
        if len(kids) == 1:
            return kids[0]
        return Node(node.value + 2.0 * t, kids)

    root = rebuild(base.root)
    types, locs = top.types, top.locations
    if not top.is_marked and base.is_marked:
        anc = np.empty(top.n_leaves, dtype=np.int64)
        for line, b in zip(lines, beta):
            anc[_leaves_under(line)] = b
        types, locs = base.types[anc], base.locations[anc]
    return _make(root, top.masses, types, locs)


def metric_transform(space, fn="exp"):
    """Apply a nondecreasing map fixing 0 to every distance.

    ``fn="exp"`` is the bounded transform ``r -> 1 - exp(-r)``.
    """
    f = (lambda r: -math.expm1(-r)) if fn == "exp" else fn
    if f(0.0) != 0.0:
        raise NonMonotoneMap("map must fix 0")
    vals = sorted({0.0} | {nd.value for nd in space.internal_nodes()})
    mapped = [f(v) for v in vals]
    if any(b < a for a, b in zip(mapped, mapped[1:])) or any(
            not math.isfinite(x) for x in mapped):
        raise NonMonotoneMap("map is not nondecreasing on the merge values")
    if space.root is None:
        return space
    return _make(_map_values(space.root, lambda v: float(f(v))), space.masses,
                 space.types, space.locations)


def canonical_hash(space):
    return hashlib.sha256(space.to_json().encode()).hexdigest()


def isomorphic(a, b):
    return a.is_marked == b.is_marked and canonical_hash(a) == canonical_hash(b)


# ----------------------------------------------------------------------------
# compactness functionals
# ----------------------------------------------------------------------------

def mass(space):
    return space.total_mass


def diameter(space):
    """Largest distance between positive-mass leaves."""
    if space.total_mass <= 0:
        raise EmptySpace("diameter of a zero-mass space")
    red = space._reduced_tree()
    return red[1] if red[0] == "node" else 0.0


def covering_number(space, eps):
    """Minimal number of closed eps-balls carrying normalized mass >= 1 - eps.

    Balls are the maximal subtrees whose merge value is <= eps; they
    partition the leaves, so taking the heaviest first is optimal.  A
    nonempty space always needs at least one ball.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    tm = space.total_mass
    if tm <= 0:
        raise EmptySpace("covering number of a zero-mass space")
    balls = []

    def walk(node):
        if not isinstance(node, Node) or node.value <= eps:
            balls.append(space.subtree_mass(node))
        else:
            for c in node.children:
                walk(c)

    walk(space.root)
    balls = sorted((b / tm for b in balls if b > 0), reverse=True)
    need = 1.0 - eps
    # smallest k whose exact prefix sum reaches the target (binary search)
    lo, hi = 1, len(balls)
    while lo < hi:
        mid = (lo + hi) // 2
        if math.fsum(balls[:mid]) >= need:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _support(space):
    """(distance matrix, probabilities) over the reduced support leaves."""
    red = space.canonical()
    return red.distance_matrix(), _probabilities(red)


def _matching_cost(A, pa, B, pb, perm):
    """E|r_a - r_b| under the coupling induced by matching leaf i -> perm[i]."""
    na, nb = len(pa), len(pb)
    P = np.zeros((na, nb))
    P[np.arange(na), perm] = np.minimum(pa, pb[perm])
    ra = pa - P.sum(axis=1)
    rb = pb - P.sum(axis=0)
    R = ra.sum()
    if R > 1e-15:
        P += np.outer(ra, rb) / R
    diff = np.abs(A[:, None, :, None] - B[None, :, None, :])
    return float(np.einsum("ij,kl,ijkl->", P, P, diff))


def gp_distance_bounds(a, b, sample_size=None, reps=None, rng=None,
                       exhaustive_limit=8):
    """Lower and upper bounds on the discrepancy of two normalized spaces.

    The lower bound is the 1-Wasserstein distance between the order-2
    distance laws (exact, or empirical from ``reps`` samples when
    ``sample_size``/``reps`` and ``rng`` are given).  The upper bound is the
    smallest expected pair-distance distortion ``E|r_a - r_b|`` over the
    couplings induced by leaf matchings, which dominates the lower bound.
    """
    if a.total_mass <= 0 or b.total_mass <= 0:
        raise EmptySpace("bounds need nonempty spaces")
    if rng is not None and reps:
        n = int(reps) * int(sample_size or 1)
        sa = [sample_distance_matrix(a, 2, rng).distances[0, 1] for _ in range(n)]
        sb = [sample_distance_matrix(b, 2, rng).distances[0, 1] for _ in range(n)]
        lower = float(wasserstein_distance(sa, sb))
    else:
        va, wa = pair_distance_law(a)
        vb, wb = pair_distance_law(b)
        lower = float(wasserstein_distance(va, vb, wa, wb))
    A, pa = _support(a)
    B, pb = _support(b)
    swap = len(pa) > len(pb)
    if swap:
        A, pa, B, pb = B, pb, A, pa
    na, nb = len(pa), len(pb)
    if nb <= exhaustive_limit:
        cands = itertools.permutations(range(nb), na)
    else:
        oa = np.argsort(-pa, kind="stable")
        ob = np.argsort(-pb, kind="stable")
        perm = np.empty(na, dtype=np.int64)
        perm[oa] = ob[:na]
        cands = [tuple(perm)]
    upper = min(_matching_cost(A, pa, B, pb, np.array(c, dtype=np.int64))
                for c in cands)
    return lower, upper


# ----------------------------------------------------------------------------
# mass decomposition
# ----------------------------------------------------------------------------

@dataclass
class MassDecomposition:
    total_mass: float
    normalized_space: Optional[UltrametricSpace] = None
    retained: bool = False


def decompose(space, retain_genealogy=False):
    """Split into total mass and the normalized genealogy.

    At mass 0 the genealogy is dropped unless ``retain_genealogy`` is set, in
    which case a space with leaves keeps its tree with uniform leaf masses.
    """
    tm = space.total_mass
    if tm > 0:
        return MassDecomposition(tm, space.with_masses(space.masses / tm), False)
    if retain_genealogy and space.n_leaves > 0:
        n = space.n_leaves
        return MassDecomposition(0.0, space.with_masses(np.full(n, 1.0 / n)), True)
    return MassDecomposition(0.0, None, False)


def compose(dec):
    if dec.normalized_space is None or dec.total_mass == 0:
        return zero_space()
    s = dec.normalized_space
    return s.with_masses(s.masses * dec.total_mass)


# ----------------------------------------------------------------------------
# random instances and separation search
# ----------------------------------------------------------------------------

def random_space(rng, n_leaves, max_value=10.0, n_types=0, n_locations=0,
                 binary=False, integer_values=False, zero_mass_prob=0.0):
    """Random dendrogram with random masses (for tests and diagnostics).

    Merge values are drawn increasing along each merge; with
    ``integer_values`` they are small integers, which produces ties and
    multifurcations.
    """
    clusters = [(i, 0.0) for i in range(n_leaves)]
    merges = []
    nxt = n_leaves
    level = 0.0
    while len(clusters) > 1:
        k = 2 if binary else int(rng.integers(2, min(4, len(clusters)) + 1))
        pick = rng.choice(len(clusters), size=k, replace=False)
        if integer_values:
            level = level + float(rng.integers(0, 2))
            level = max(level, 1.0)
        else:
            level = level + float(rng.exponential(max_value / n_leaves))
        chosen = [clusters[i] for i in sorted(pick)]
        clusters = [c for i, c in enumerate(clusters) if i not in set(pick.tolist())]
        cur = chosen[0][0]
        for c, _ in chosen[1:]:
            merges.append((cur, c, level))
            cur = nxt
            nxt += 1
        clusters.append((cur, level))
    masses = rng.uniform(0.1, 1.0, size=n_leaves)
    if zero_mass_prob > 0:
        z = rng.random(n_leaves) < zero_mass_prob
        if z.all():
            z[0] = False
        masses[z] = 0.0
    types = locs = None
    if n_types or n_locations:
        types = rng.integers(0, max(n_types, 1), size=n_leaves)
        locs = rng.integers(0, max(n_locations, 1), size=n_leaves)
    return from_merges(n_leaves, merges, masses, types, locs)


def find_separating_polynomial(a, b, max_order=4, normalized=False):
    """Search built-in threshold polynomials of order <= max_order for one
    taking different values on ``a`` and ``b``.

    Orders up to 3 use per-pair thresholds drawn from the merge values of
    both spaces; order 4 uses uniform thresholds.  Returns
    ``(poly, value_a, value_b)`` or ``None``.
    """
    levels = sorted({0.0} | {n.value for n in a.internal_nodes()}
                    | {n.value for n in b.internal_nodes()})
    for n in range(1, max_order + 1):
        pairs = n * (n - 1) // 2
        if n == 1 or n == 4:
            grids = [(c,) * pairs for c in levels]
        else:
            grids = itertools.product(levels, repeat=pairs)
        for g in grids:
            C = np.full((n, n), np.inf)
            iu = np.triu_indices(n, 1)
            C[iu] = g
            poly = PolynomialSpec.threshold(n, C)
            va = evaluate_polynomial(a, poly, normalized=normalized).value
            vb = evaluate_polynomial(b, poly, normalized=normalized).value
            if not math.isclose(va, vb, rel_tol=1e-12, abs_tol=1e-12):
                return poly, va, vb
    return None
