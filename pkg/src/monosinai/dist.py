"""Finite probability vectors on [N] = {0, ..., N-1}, entropies and orders."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import networkx as nx
import numpy as np

if TYPE_CHECKING:
    from .coupling import Coupling

SUM_TOL = 1e-12
ORDER_TOL = 1e-12
FLOW_TOL = 1e-10


class DistributionError(ValueError):
    """Raised when a probability vector or relation is malformed."""


@dataclass(frozen=True)
class Dist:
    """A probability vector on ``range(n)``.

    Entries must be nonnegative and sum to one within ``1e-12``; the stored
    vector is renormalised so the sum is one to machine precision.
    """

    probs: tuple[float, ...]

    def __init__(self, probs: Iterable[float]):
        values = tuple(float(v) for v in probs)
        if not values:
            raise DistributionError("empty probability vector")
        if any(not math.isfinite(v) for v in values):
            raise DistributionError(f"non-finite entry in {values}")
        if any(v < 0 for v in values):
            raise DistributionError(f"negative entry in {values}")
        total = math.fsum(values)
        if abs(total - 1.0) > SUM_TOL:
            raise DistributionError(f"probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "probs", tuple(v / total for v in values))

    @property
    def n(self) -> int:
        return len(self.probs)

    def __getitem__(self, i: int) -> float:
        return self.probs[i]

    def __len__(self) -> int:
        return len(self.probs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.as_array())

    def support(self) -> list[int]:
        return [i for i, v in enumerate(self.probs) if v > 0]

    @classmethod
    def uniform(cls, n: int) -> "Dist":
        return cls([1.0 / n] * n)

    @classmethod
    def point(cls, n: int, i: int) -> "Dist":
        v = [0.0] * n
        v[i] = 1.0
        return cls(v)

    @classmethod
    def from_weights(cls, weights: Iterable[float]) -> "Dist":
        w = [float(x) for x in weights]
        s = math.fsum(w)
        if s <= 0:
            raise DistributionError("weights have no positive mass")
        return cls([x / s for x in w])


@dataclass(frozen=True)
class Relation:
    """A set of ordered pairs ``(a, b)`` inside ``[n] x [n]``."""

    n: int
    pairs: frozenset[tuple[int, int]]

    def __init__(self, n: int, pairs: Iterable[tuple[int, int]]):
        if n <= 0:
            raise DistributionError("relation alphabet must be non-empty")
        ps = frozenset((int(a), int(b)) for a, b in pairs)
        for a, b in ps:
            if not (0 <= a < n and 0 <= b < n):
                raise DistributionError(f"pair {(a, b)} outside [{n}]x[{n}]")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "pairs", ps)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.pairs

    @classmethod
    def monotone(cls, n: int) -> "Relation":
        return cls(n, ((a, b) for a in range(n) for b in range(n) if a >= b))

    @classmethod
    def full(cls, n: int) -> "Relation":
        return cls(n, ((a, b) for a in range(n) for b in range(n)))

    @classmethod
    def identity(cls, n: int) -> "Relation":
        return cls(n, ((a, a) for a in range(n)))

    def holds(self, a, b) -> bool:
        """Blockwise membership: tuples are checked coordinate by coordinate."""
        if isinstance(a, tuple):
            return len(a) == len(b) and all((u, v) in self.pairs for u, v in zip(a, b))
        return (a, b) in self.pairs


def _plogp(v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v, dtype=float)
    pos = v > 0
    out[pos] = v[pos] * np.log(v[pos])
    return out


def entropy_of(weights: Iterable[float]) -> float:
    """Shannon entropy in nats of a nonnegative vector summing to one."""
    v = np.asarray(list(weights), dtype=float)
    return float(-_plogp(v).sum())


def entropy(p: Dist) -> float:
    return entropy_of(p.probs)


def binary_entropy(t: float) -> float:
    """Entropy of the two-cell partition with masses ``t`` and ``1 - t``."""
    if not 0.0 <= t <= 1.0:
        raise DistributionError(f"t={t} outside [0, 1]")
    return entropy_of([t, 1.0 - t])


def _check_same_size(p: Dist, q: Dist) -> None:
    if p.n != q.n:
        raise DistributionError(f"alphabet sizes differ: {p.n} vs {q.n}")


def dominates(p: Dist, q: Dist) -> bool:
    """True iff ``p`` stochastically dominates ``q`` (prefix sums of p <= those of q)."""
    _check_same_size(p, q)
    return bool(np.all(p.cdf() <= q.cdf() + ORDER_TOL))


def r_dominates(p: Dist, q: Dist, relation: Relation) -> "Coupling | None":
    """Return a coupling of ``p`` and ``q`` carried by ``relation``, or None.

    Feasibility is a bipartite max-flow: source -> a (capacity p_a),
    a -> b for (a, b) in the relation, b -> sink (capacity q_b).
    """
    from .coupling import Coupling

    _check_same_size(p, q)
    if relation.n != p.n:
        raise DistributionError(f"relation is on [{relation.n}], distributions on [{p.n}]")
    g = nx.DiGraph()
    for a in p.support():
        g.add_edge("s", ("r", a), capacity=p[a])
    for b in q.support():
        g.add_edge(("c", b), "t", capacity=q[b])
    for a, b in sorted(relation.pairs):
        if p[a] > 0 and q[b] > 0:
            g.add_edge(("r", a), ("c", b))  # uncapacitated
    if "s" not in g or "t" not in g:
        return None
    value, flow = nx.maximum_flow(g, "s", "t", flow_func=nx.algorithms.flow.edmonds_karp)
    if value < 1.0 - FLOW_TOL:
        return None
    mass = {}
    for a in p.support():
        for node, f in flow.get(("r", a), {}).items():
            if f > 0:
                mass[(a, node[1])] = f
    return Coupling.from_mass(range(p.n), range(q.n), mass, normalize=True)


def conditioned_pair(z: "Coupling", e_star) -> tuple[Dist, Dist]:
    """Laws of X and of Y given ``X != e_star`` under the coupling ``z``."""
    u = z.row_marginal_dict().get(e_star, 0.0)
    if u >= 1.0 - SUM_TOL:
        raise DistributionError(f"P(X = {e_star!r}) = 1; conditioning event is null")
    rows = {r: 0.0 for r in z.rows}
    cols = {c: 0.0 for c in z.cols}
    for (a, b), m in z.mass.items():
        if a != e_star:
            rows[a] += m
            cols[b] += m
    scale = 1.0 - u
    return (
        Dist.from_weights([rows[r] / scale for r in z.rows]),
        Dist.from_weights([cols[c] / scale for c in z.cols]),
    )


@dataclass(frozen=True)
class CapHCheck:
    u: float
    hX: float
    hY: float
    hXt: float
    hYt: float
    lower: float
    upper: float
    holds: bool


def cap_h_check(z: "Coupling", e_star, tol: float = 1e-9) -> CapHCheck:
    """Evaluate both entropy bounds for conditioning a pair on ``X != e_star``.

    ``lower`` = H(X) - Phi(u) must not exceed H(X~); ``upper`` =
    H(Y) + Phi(u) + u log #E must not be exceeded by H(Y~).
    """
    px, py = z.marginals()
    u = z.row_marginal_dict().get(e_star, 0.0)
    xt, yt = conditioned_pair(z, e_star)
    hx, hy = entropy(px), entropy(py)
    hxt, hyt = entropy(xt), entropy(yt)
    size = len(set(z.rows) | set(z.cols))
    lower = hx - binary_entropy(u)
    upper = hy + binary_entropy(u) + u * math.log(size)
    ok = hxt >= lower - tol and hyt <= upper + tol
    return CapHCheck(u, hx, hy, hxt, hyt, lower, upper, ok)
