"""Finite couplings: construction, predicates, splitting and refinement.

Labels are plain ints for single symbols and tuples of ints for blocks.  The
order on a block alphabet is the lexicographic order of the tuples, which is
the order Python already uses for tuple comparison.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping

import numpy as np

from .dist import SUM_TOL, Dist, DistributionError, Relation

ZERO_TOL = 1e-14
SNAP_TOL = 1e-13  # cumulative sums closer than this are one breakpoint
DEFAULT_BUDGET = 1 << 22


class BudgetExceeded(RuntimeError):
    """A sparse table would exceed the configured support budget."""


def geq(a, b) -> bool:
    """Coordinatewise ``a >= b`` for symbols or equal-length blocks."""
    if isinstance(a, tuple):
        return len(a) == len(b) and all(u >= v for u, v in zip(a, b))
    return a >= b


def as_block(label) -> tuple:
    return label if isinstance(label, tuple) else (label,)


@dataclass(frozen=True)
class Coupling:
    """A probability measure on ``rows x cols`` stored sparsely.

    ``rows`` and ``cols`` are the ordered alphabets; ``mass`` only holds
    strictly positive entries.
    """

    rows: tuple
    cols: tuple
    mass: Mapping[tuple, float]

    @classmethod
    def from_mass(cls, rows: Iterable, cols: Iterable, mass: Mapping, normalize: bool = False,
                  tol: float = SUM_TOL) -> "Coupling":
        rows, cols = tuple(rows), tuple(cols)
        rset, cset = set(rows), set(cols)
        clean = {}
        for (a, b), m in mass.items():
            if m < 0:
                raise DistributionError(f"negative mass at {(a, b)}")
            if m <= 0:
                continue
            if a not in rset or b not in cset:
                raise DistributionError(f"pair {(a, b)} outside the alphabets")
            clean[(a, b)] = float(m)
        total = math.fsum(clean.values())
        if normalize:
            if total <= 0:
                raise DistributionError("coupling has no mass")
            clean = {k: v / total for k, v in clean.items()}
        elif abs(total - 1.0) > tol:
            raise DistributionError(f"coupling mass sums to {total!r}")
        return cls(rows, cols, clean)

    @classmethod
    def diagonal(cls, p: Dist) -> "Coupling":
        return cls.from_mass(range(p.n), range(p.n), {(i, i): v for i, v in enumerate(p.probs)})

    @classmethod
    def product(cls, p: Dist, q: Dist) -> "Coupling":
        return cls.from_mass(
            range(p.n), range(q.n),
            {(i, j): a * b for i, a in enumerate(p.probs) for j, b in enumerate(q.probs)},
        )

    def __len__(self) -> int:
        return len(self.mass)

    def support(self) -> set:
        return set(self.mass)

    def row_marginal_dict(self) -> dict:
        out = defaultdict(float)
        for (a, _), m in self.mass.items():
            out[a] += m
        return dict(out)

    def col_marginal_dict(self) -> dict:
        out = defaultdict(float)
        for (_, b), m in self.mass.items():
            out[b] += m
        return dict(out)

    def marginals(self) -> tuple[Dist, Dist]:
        rm, cm = self.row_marginal_dict(), self.col_marginal_dict()
        return (
            Dist.from_weights([rm.get(r, 0.0) for r in self.rows]),
            Dist.from_weights([cm.get(c, 0.0) for c in self.cols]),
        )

    def conditional_rows(self) -> dict:
        """Map column -> list of (row, mass) in row order."""
        index = {r: i for i, r in enumerate(self.rows)}
        out = defaultdict(list)
        for (a, b), m in self.mass.items():
            out[b].append((a, m))
        for b in out:
            out[b].sort(key=lambda t: index[t[0]])
        return dict(out)

    def conditional_cols(self) -> dict:
        """Map row -> list of (column, mass) in column order."""
        index = {c: i for i, c in enumerate(self.cols)}
        out = defaultdict(list)
        for (a, b), m in self.mass.items():
            out[a].append((b, m))
        for a in out:
            out[a].sort(key=lambda t: index[t[0]])
        return dict(out)

    def dense(self) -> np.ndarray:
        ri = {r: i for i, r in enumerate(self.rows)}
        ci = {c: i for i, c in enumerate(self.cols)}
        out = np.zeros((len(self.rows), len(self.cols)))
        for (a, b), m in self.mass.items():
            out[ri[a], ci[b]] = m
        return out

    def to_triplets(self) -> str:
        """Sparse ``a b mass`` lines in row-then-column order; blocks as ``0,1,2``."""
        ri = {r: i for i, r in enumerate(self.rows)}
        ci = {c: i for i, c in enumerate(self.cols)}
        lines = []
        for (a, b) in sorted(self.mass, key=lambda k: (ri[k[0]], ci[k[1]])):
            lines.append(f"{_fmt_label(a)} {_fmt_label(b)} {self.mass[(a, b)]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_triplets(cls, text: str, rows: Iterable | None = None,
                      cols: Iterable | None = None) -> "Coupling":
        mass = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            a, b, m = line.split()
            mass[(_parse_label(a), _parse_label(b))] = float(m)
        if rows is None:
            rows = sorted({a for a, _ in mass})
        if cols is None:
            cols = sorted({b for _, b in mass})
        return cls.from_mass(rows, cols, mass)


def _fmt_label(label) -> str:
    if isinstance(label, tuple):
        return ",".join(str(s) for s in label)
    return str(label)


def _parse_label(text: str):
    if "," in text:
        return tuple(int(s) for s in text.split(","))
    return int(text)


def quantile_pairs(wa: np.ndarray, wb: np.ndarray) -> list[tuple[int, int, float]]:
    """Overlaps of the unit-interval cells of two weight vectors.

    Cell ``i`` of ``wa`` is ``[Fa(i-1), Fa(i))``; entries returned are
    ``(i, j, length of overlap)`` with positive length, in sweep order.
    """
    fa = np.concatenate(([0.0], np.cumsum(wa)))
    fb = np.concatenate(([0.0], np.cumsum(wb)))
    fa[-1] = fb[-1] = max(fa[-1], fb[-1])
    # breakpoints equal up to rounding are made equal, so no sliver cells appear
    near = np.clip(np.searchsorted(fa, fb), 1, len(fa) - 1)
    for t, k in enumerate(near):
        for cand in (k - 1, k):
            if abs(fa[cand] - fb[t]) <= SNAP_TOL:
                fb[t] = fa[cand]
    out = []
    i = j = 0
    na, nb = len(wa), len(wb)
    while i < na and j < nb:
        lo = max(fa[i], fb[j])
        hi = min(fa[i + 1], fb[j + 1])
        if hi > lo:
            out.append((i, j, hi - lo))
        if fa[i + 1] <= fb[j + 1]:
            i += 1
        else:
            j += 1
    return out


def quantile_coupling(p: Dist, q: Dist) -> Coupling:
    """Couple ``p`` and ``q`` through one shared uniform and both generalised inverses."""
    mass = defaultdict(float)
    for i, j, m in quantile_pairs(p.as_array(), q.as_array()):
        mass[(i, j)] += m
    return Coupling.from_mass(range(p.n), range(q.n), mass, normalize=True)


def marginals(c: Coupling) -> tuple[Dist, Dist]:
    return c.marginals()


def is_monotone(c: Coupling) -> bool:
    return all(geq(a, b) for a, b in c.mass)


def respects_relation(c: Coupling, relation: Relation) -> bool:
    return all(relation.holds(a, b) for a, b in c.mass)


def is_subordinate(fine: Coupling, coarse: Coupling) -> bool:
    if set(fine.rows) != set(coarse.rows) or set(fine.cols) != set(coarse.cols):
        raise DistributionError("couplings live on different alphabets")
    return set(fine.mass) <= set(coarse.mass)


def split_elements(c: Coupling, bprime: Iterable | None = None) -> set:
    """Rows sending positive mass to at least two distinct columns of ``bprime``."""
    if bprime is None:
        bset = set(c.cols)
    else:
        bset = set(bprime)
        if not bset <= set(c.cols):
            raise DistributionError("B' is not a subset of the column alphabet")
    seen: dict = {}
    split = set()
    for a, b in c.mass:
        if b in bset:
            if a in seen and seen[a] != b:
                split.add(a)
            seen.setdefault(a, b)
    return split


def marriage_refine(alpha: Coupling, bprime: Iterable) -> Coupling:
    """Remove splitting inside ``bprime`` without leaving the support of ``alpha``.

    Edges into ``bprime`` are inserted into a spanning forest in (row, column)
    index order.  An edge closing a cycle triggers cancellation: mass is
    shifted alternately around the cycle until one of its edges vanishes.
    Row and column sums are invariant under each shift, and the final
    ``bprime``-restricted support is a forest, which bounds the number of
    split rows by ``#bprime - 1``.
    """
    bset = set(bprime)
    if not bset <= set(alpha.cols):
        raise DistributionError("B' is not a subset of the column alphabet")
    ri = {r: i for i, r in enumerate(alpha.rows)}
    ci = {c: i for i, c in enumerate(alpha.cols)}
    mass = dict(alpha.mass)
    edges = sorted((k for k in mass if k[1] in bset), key=lambda k: (ri[k[0]], ci[k[1]]))
    adj: dict = defaultdict(set)  # forest adjacency on ("r", a) / ("c", b) nodes

    def path(src, dst):
        prev = {src: None}
        stack = [src]
        while stack:
            node = stack.pop()
            if node == dst:
                break
            for nxt in sorted(adj[node], key=_node_key(ri, ci)):
                if nxt not in prev:
                    prev[nxt] = node
                    stack.append(nxt)
        if dst not in prev:
            return None
        out = [dst]
        while prev[out[-1]] is not None:
            out.append(prev[out[-1]])
        return out[::-1]

    def edge_key(u, v):
        return (u[1], v[1]) if u[0] == "r" else (v[1], u[1])

    for a, b in edges:
        if mass.get((a, b), 0.0) <= 0:
            continue
        ra, cb = ("r", a), ("c", b)
        route = path(cb, ra)
        if route is None:
            adj[ra].add(cb)
            adj[cb].add(ra)
            continue
        # cycle: (a, b) then the forest path b -> ... -> a
        cycle = [(a, b)] + [edge_key(route[i], route[i + 1]) for i in range(len(route) - 1)]
        minus = cycle[0::2]
        plus = cycle[1::2]
        theta = min(mass[e] for e in minus)
        hit = min((e for e in minus if mass[e] <= theta), key=lambda e: (ri[e[0]], ci[e[1]]))
        for e in plus:
            mass[e] += theta
        for e in minus:
            mass[e] -= theta
            if mass[e] <= ZERO_TOL:
                mass[e] = 0.0
        mass[hit] = 0.0
        # forest update: drop every vanished forest edge, then try to add (a, b)
        for e in cycle[1:]:
            if mass[e] == 0.0:
                u, v = ("r", e[0]), ("c", e[1])
                adj[u].discard(v)
                adj[v].discard(u)
        if mass[(a, b)] > 0 and path(cb, ra) is None:
            adj[ra].add(cb)
            adj[cb].add(ra)
        elif mass[(a, b)] > 0:  # pragma: no cover - a cycle edge always vanishes
            raise AssertionError("cycle cancellation left a cycle")
    out = {k: v for k, v in mass.items() if v > 0}
    return Coupling(alpha.rows, alpha.cols, out)


def _node_key(ri, ci):
    def key(node):
        return (0, ri[node[1]]) if node[0] == "r" else (1, ci[node[1]])
    return key


def tensor(c1: Coupling, c2: Coupling, budget: int = DEFAULT_BUDGET) -> Coupling:
    """Independent product of two couplings on concatenated block labels."""
    if len(c1) * len(c2) > budget:
        raise BudgetExceeded(f"product support {len(c1) * len(c2)} exceeds budget {budget}")
    rm1, cm1 = c1.row_marginal_dict(), c1.col_marginal_dict()
    rm2, cm2 = c2.row_marginal_dict(), c2.col_marginal_dict()
    rows = [as_block(a) + as_block(b) for a in c1.rows if rm1.get(a, 0) > 0
            for b in c2.rows if rm2.get(b, 0) > 0]
    cols = [as_block(a) + as_block(b) for a in c1.cols if cm1.get(a, 0) > 0
            for b in c2.cols if cm2.get(b, 0) > 0]
    mass = {}
    for (a1, b1), m1 in c1.mass.items():
        for (a2, b2), m2 in c2.mass.items():
            mass[(as_block(a1) + as_block(a2), as_block(b1) + as_block(b2))] = m1 * m2
    return Coupling(tuple(sorted(rows)), tuple(sorted(cols)), mass)


def product_power(c: Coupling, m: int, budget: int = DEFAULT_BUDGET) -> Coupling:
    """The ``m``-fold independent product over lexicographically ordered blocks.

    Rows and columns of zero marginal mass are dropped from the product
    alphabets.
    """
    if m < 1:
        raise ValueError("m must be a positive integer")
    if len(c) ** m > budget:
        raise BudgetExceeded(f"support {len(c)}^{m} exceeds budget {budget}")
    out = c
    for _ in range(m - 1):
        out = tensor(out, c, budget)
    if m == 1:
        return c
    return out


def block_alphabet(n: int, k: int) -> list[tuple[int, ...]]:
    """All ``n**k`` blocks of length ``k`` in lexicographic order."""
    return list(itertools.product(range(n), repeat=k))


def relabel_blocks(c: Coupling) -> Coupling:
    """Return ``c`` with int labels promoted to length-one blocks."""
    return Coupling(
        tuple(as_block(r) for r in c.rows),
        tuple(as_block(b) for b in c.cols),
        {(as_block(a), as_block(b)): m for (a, b), m in c.mass.items()},
    )


def mixture(couplings: Iterable[Coupling], weights: Iterable[float]) -> Coupling:
    """Convex combination of couplings on common alphabets."""
    cs = list(couplings)
    ws = list(weights)
    mass: dict[Hashable, float] = defaultdict(float)
    for c, w in zip(cs, ws):
        for k, v in c.mass.items():
            mass[k] += w * v
    return Coupling.from_mass(cs[0].rows, cs[0].cols, mass, normalize=True)
