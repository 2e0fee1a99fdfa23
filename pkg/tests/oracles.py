"""Independent brute-force references used by several test modules."""

from fractions import Fraction
from itertools import combinations
from math import lcm

import numpy as np


def compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in compositions(total - head, parts - 1):
            yield (head,) + rest


def rational_3x3(max_den=5):
    """Every 3x3 mass matrix whose entries are multiples of 1/d, d <= max_den."""
    seen = set()
    for d in range(1, max_den + 1):
        for comp in compositions(d, 9):
            key = tuple(Fraction(c, d) for c in comp)
            if key not in seen:
                seen.add(key)
                yield key


def _peel(edges, rows, cols):
    """Unique solution on a forest support by leaf elimination, or None."""
    rows, cols = dict(rows), dict(cols)
    left = set(edges)
    out = {}
    while left:
        deg = {}
        for a, b in left:
            deg[("r", a)] = deg.get(("r", a), 0) + 1
            deg[("c", b)] = deg.get(("c", b), 0) + 1
        leaf = next((e for e in sorted(left)
                     if deg[("r", e[0])] == 1 or deg[("c", e[1])] == 1), None)
        if leaf is None:
            return None
        a, b = leaf
        v = rows[a] if deg[("r", a)] == 1 else cols[b]
        if v <= 0 or v > rows[a] or v > cols[b]:
            return None
        out[leaf] = v
        rows[a] -= v
        cols[b] -= v
        left.discard(leaf)
    if any(rows.values()) or any(cols.values()):
        return None
    return out


def _acyclic(edges):
    parent = {}

    def find(u):
        while parent.get(u, u) != u:
            u = parent[u]
        return u

    for a, b in edges:
        ra, rb = find(("r", a)), find(("c", b))
        if ra == rb:
            return False
        parent[ra] = rb
    return True


def transport_vertices(mass):
    """Vertices of {couplings with the marginals of ``mass`` and support inside it}.

    ``mass`` maps (row, col) to Fraction.  Vertices are exactly the
    feasible points carried by a forest, which is what is enumerated.
    """
    scale = lcm(*(m.denominator for m in mass.values()))
    imass = {k: int(m * scale) for k, m in mass.items() if m}
    rows, cols = {}, {}
    for (a, b), m in imass.items():
        rows[a] = rows.get(a, 0) + m
        cols[b] = cols.get(b, 0) + m
    cells = sorted(imass)
    top = len(rows) + len(cols) - 1
    found = set()
    for size in range(1, top + 1):
        for sub in combinations(cells, size):
            if not _acyclic(sub):
                continue
            sol = _peel(sub, rows, cols)
            if sol is not None:
                found.add(tuple(sorted((k, Fraction(v, scale)) for k, v in sol.items())))
    return found


def splits(support, bprime):
    seen = {}
    out = set()
    for a, b in support:
        if b in bprime:
            if a in seen and seen[a] != b:
                out.add(a)
            seen.setdefault(a, b)
    return out


def exact_quantile(p, q):
    """Quantile coupling by merging breakpoints in Fractions."""
    p = [Fraction(x).limit_denominator(10**9) for x in p]
    q = [Fraction(x).limit_denominator(10**9) for x in q]
    cp = np.cumsum([Fraction(0)] + p)
    cq = np.cumsum([Fraction(0)] + q)
    points = sorted(set(cp) | set(cq))
    out = {}
    for lo, hi in zip(points, points[1:]):
        if hi <= lo:
            continue
        mid = (lo + hi) / 2
        i = max(j for j in range(len(p)) if cp[j] <= mid)
        j = max(j for j in range(len(q)) if cq[j] <= mid)
        out[(i, j)] = out.get((i, j), 0) + (hi - lo)
    return out
