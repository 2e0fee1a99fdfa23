"""del Junco's star-coupling: exact joint law, sampler, and the iterative form.

For jointly distributed ``(X1, Y1)`` on ``E1 x F1`` and ``(X2, Y2)`` on
``E2 x F2`` with ``E1`` and ``F2`` ordered, the star-coupling draws ``X2'``
and ``Y1'`` independently from their marginals and then couples ``X1'`` (given
``Y1' = f1``) with ``Y2'`` (given ``X2' = e2``) through one shared uniform.
"""

from __future__ import annotations

import bisect
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .coupling import DEFAULT_BUDGET, BudgetExceeded, Coupling, as_block, quantile_pairs
from .dist import Relation


@dataclass(frozen=True)
class StarJoint:
    """Sparse law of ``(e1, f1, e2, f2)``."""

    z1: Coupling
    z2: Coupling
    mass: dict

    def project_first(self) -> dict:
        out = defaultdict(float)
        for (e1, f1, _, _), m in self.mass.items():
            out[(e1, f1)] += m
        return dict(out)

    def project_second(self) -> dict:
        out = defaultdict(float)
        for (_, _, e2, f2), m in self.mass.items():
            out[(e2, f2)] += m
        return dict(out)

    def as_block_coupling(self) -> Coupling:
        """Repackage as a coupling of ``(e1, e2)`` against ``(f1, f2)``.

        Labels are concatenated blocks, so tuple order is the lexicographic
        product order.
        """
        mass = defaultdict(float)
        for (e1, f1, e2, f2), m in self.mass.items():
            mass[(as_block(e1) + as_block(e2), as_block(f1) + as_block(f2))] += m
        rows = sorted({k[0] for k in mass})
        cols = sorted({k[1] for k in mass})
        return Coupling(tuple(rows), tuple(cols), dict(mass))


def _check_orders(z1: Coupling, z2: Coupling) -> None:
    for labels, name in ((z1.rows, "E1"), (z2.cols, "F2")):
        try:
            sorted(labels)
        except TypeError as exc:
            raise TypeError(f"{name} carries no total order") from exc


def star_couple(z1: Coupling, z2: Coupling, budget: int = DEFAULT_BUDGET) -> StarJoint:
    """Exact star-coupling by intersecting conditional quantile cells."""
    _check_orders(z1, z2)
    py1 = z1.col_marginal_dict()
    px2 = z2.row_marginal_dict()
    given_f1 = z1.conditional_rows()
    given_e2 = z2.conditional_cols()
    mass = {}
    for f1, col in given_f1.items():
        w1 = np.array([m for _, m in col]) / py1[f1]
        e1s = [e for e, _ in col]
        for e2, row in given_e2.items():
            w2 = np.array([m for _, m in row]) / px2[e2]
            f2s = [f for f, _ in row]
            scale = py1[f1] * px2[e2]
            for i, j, length in quantile_pairs(w1, w2):
                mass[(e1s[i], f1, e2, f2s[j])] = scale * length
            if len(mass) > budget:
                raise BudgetExceeded(f"star-coupling support exceeds budget {budget}")
    return StarJoint(z1, z2, mass)


def iterative_star(z0: Coupling, zs: list[Coupling], budget: int = DEFAULT_BUDGET) -> Coupling:
    """Star-couple ``z0`` with each of ``zs`` in turn, left to right."""
    w = z0
    for z in zs:
        w = star_couple(w, z, budget).as_block_coupling()
    return w


RESOLUTION = 1e-9  # narrowest cell resolved from the shared uniform itself


def _inverse(cum: np.ndarray, u: float) -> int:
    """Index of the half-open cell ``[cum[i-1], cum[i])`` containing ``u``."""
    i = int(np.searchsorted(cum, u, side="right"))
    return min(i, len(cum) - 1)


def _inverse_many(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)


class _Table:
    """Cumulative tables for the conditional laws a sampler needs."""

    def __init__(self, labels: list, weights: list[float]):
        self.labels = labels
        self.cum = np.cumsum(weights)
        self.cum /= self.cum[-1]

    def draw(self, u: float):
        return self.labels[_inverse(self.cum, u)]


def star_sample(rng: np.random.Generator, z1: Coupling, z2: Coupling, size: int = 1) -> list[tuple]:
    """Draw ``size`` tuples ``(e1, f1, e2, f2)`` from the star-coupling.

    Uses three independent uniforms per draw: ``V2`` for ``X2'``, ``V1`` for
    ``Y1'`` and ``U`` shared by both conditional quantile transforms.
    """
    _check_orders(z1, z2)
    ym = z1.col_marginal_dict()
    xm = z2.row_marginal_dict()
    y_table = _Table([c for c in z1.cols if ym.get(c, 0) > 0], [ym[c] for c in z1.cols if ym.get(c, 0) > 0])
    x_table = _Table([r for r in z2.rows if xm.get(r, 0) > 0], [xm[r] for r in z2.rows if xm.get(r, 0) > 0])
    s_tables = {f: _Table([e for e, _ in col], [m for _, m in col]) for f, col in z1.conditional_rows().items()}
    t_tables = {e: _Table([f for f, _ in row], [m for _, m in row]) for e, row in z2.conditional_cols().items()}
    v = rng.random((size, 3))
    e2 = _inverse_many(x_table.cum, v[:, 0])
    f1 = _inverse_many(y_table.cum, v[:, 1])
    e1 = np.empty(size, dtype=np.int64)
    f2 = np.empty(size, dtype=np.int64)
    for i, f in enumerate(y_table.labels):
        sel = f1 == i
        e1[sel] = _inverse_many(s_tables[f].cum, v[sel, 2])
    for i, e in enumerate(x_table.labels):
        sel = e2 == i
        f2[sel] = _inverse_many(t_tables[e].cum, v[sel, 2])
    return [(s_tables[y_table.labels[b]].labels[a], y_table.labels[b],
             x_table.labels[c], t_tables[x_table.labels[c]].labels[d])
            for a, b, c, d in zip(e1.tolist(), f1.tolist(), e2.tolist(), f2.tolist())]


def _flatten(blocks) -> tuple:
    return tuple(s for b in blocks for s in as_block(b))


class _FillerLevel:
    """Per-column interval data of one star factor ``Gamma`` for the recursive quantile."""

    def __init__(self, gamma: Coupling):
        self.gamma = gamma
        rm = gamma.row_marginal_dict()
        cm = gamma.col_marginal_dict()
        self.rows = [r for r in gamma.rows if rm.get(r, 0) > 0]
        self.cols = [c for c in gamma.cols if cm.get(c, 0) > 0]
        self.row_index = {r: i for i, r in enumerate(self.rows)}
        self.col_index = {c: j for j, c in enumerate(self.cols)}
        self.mu = np.array([rm[r] for r in self.rows])
        self.nu = np.array([cm[c] for c in self.cols])
        self.mu_cum = np.cumsum(self.mu) / self.mu.sum()
        self.nu_cum = np.cumsum(self.nu) / self.nu.sum()
        # conditional CDF cells of Y given X = x, per row
        self.t_tables = {}
        cells = defaultdict(list)  # col index -> list of (row index, lo, hi)
        for r, row in gamma.conditional_cols().items():
            i = self.row_index[r]
            w = np.array([m for _, m in row]) / rm[r]
            cum = np.cumsum(w)
            cum[-1] = 1.0
            self.t_tables[i] = (np.array([self.col_index[c] for c, _ in row]), cum)
            lo = 0.0
            for (c, _), hi in zip(row, cum):
                if hi > lo:
                    cells[self.col_index[c]].append((i, lo, hi))
                lo = hi
        self.by_col = {}
        for j, items in cells.items():
            items.sort()
            xs = np.array([t[0] for t in items])
            lo = np.array([t[1] for t in items])
            hi = np.array([t[2] for t in items])
            mu = self.mu[xs]
            nu = float(np.dot(mu, hi - lo))
            bps = np.unique(np.concatenate(([0.0, 1.0], lo, hi)))
            g = np.array([np.dot(mu, np.clip(b - lo, 0.0, hi - lo)) for b in bps]) / nu
            self.by_col[j] = (xs, lo, hi, mu / nu, bps, g)

    def draw_x(self, u: float) -> int:
        return _inverse(self.mu_cum, u)

    def draw_y(self, u: float) -> int:
        return _inverse(self.nu_cum, u)

    def y_given_x(self, i: int, u: float) -> int:
        cols, cum = self.t_tables[i]
        return int(cols[_inverse(cum, u)])

    def pull_down(self, j: int, u: float) -> float:
        """Invert the piecewise-linear map from the lower-level uniform to ``u``."""
        _, _, _, _, bps, g = self.by_col[j]
        k = bisect.bisect_right(g, u) - 1
        k = max(0, min(k, len(g) - 2))
        while k > 0 and g[k + 1] <= g[k]:
            k -= 1
        span = g[k + 1] - g[k]
        if span <= 0:
            return float(bps[k])
        v = bps[k] + (u - g[k]) * (bps[k + 1] - bps[k]) / span
        return float(min(max(v, bps[k]), bps[k + 1]))

    def push_up(self, j: int, u: float, lo: float, hi: float):
        """Choose the last-coordinate row given the lower cell ``[lo, hi)``.

        Returns None when the cell is too narrow to resolve in floating point.
        """
        xs, tlo, thi, wmu, bps, g = self.by_col[j]
        base = float(np.interp(lo, bps, g))
        w = wmu * np.clip(np.minimum(thi, hi) - np.maximum(tlo, lo), 0.0, None)
        cum = base + np.cumsum(w)
        pos = np.flatnonzero(w > 0)
        if len(pos) == 0:
            return None
        k = int(np.searchsorted(cum[pos], u, side="right"))
        k = pos[min(k, len(pos) - 1)]
        return int(xs[k]), float(cum[k] - w[k]), float(cum[k])

    def x_at(self, j: int, s: float, v: float) -> int:
        """Row drawn with weight ``mu(x)`` among rows whose cell for column ``j`` holds ``s``."""
        xs, tlo, thi, wmu, _, _ = self.by_col[j]
        w = np.where((tlo <= s) & (s < thi), wmu, 0.0)
        if not w.any():  # s sits on the right end of the unit interval
            w = np.where(thi >= np.max(thi), wmu, 0.0)
        cum = np.cumsum(w)
        return int(xs[_inverse(cum / cum[-1], v)])


class _CouplingBase:
    """Level zero given by an explicit coupling (e.g. the refined initial block)."""

    def __init__(self, beta: Coupling):
        cm = beta.col_marginal_dict()
        self.cols = [c for c in beta.cols if cm.get(c, 0) > 0]
        self.col_cum = np.cumsum([cm[c] for c in self.cols])
        self.col_cum /= self.col_cum[-1]
        self.given = {}
        for c, col in beta.conditional_rows().items():
            cum = np.cumsum([m for _, m in col])
            cum /= cum[-1]
            self.given[c] = ([r for r, _ in col], cum)

    def draw_y(self, rng: np.random.Generator):
        return self.cols[_inverse(self.col_cum, rng.random())]

    def quantile(self, u: float, y, rng=None) -> tuple[object, float, float]:
        rows, cum = self.given[y]
        i = _inverse(cum, u)
        return rows[i], float(cum[i - 1]) if i else 0.0, float(cum[i])


class _ProductBase:
    """Level zero given by ``Gamma**n0`` without refinement, sampled lazily."""

    def __init__(self, level: _FillerLevel, n0: int):
        self.level = level
        self.n0 = n0
        self.given = {}
        for c, col in level.gamma.conditional_rows().items():
            cum = np.cumsum([m for _, m in col])
            cum /= cum[-1]
            self.given[as_block(c)] = ([r for r, _ in col], cum)

    def draw_y(self, rng: np.random.Generator):
        return _flatten(self.level.cols[self.level.draw_y(u)] for u in rng.random(self.n0))

    def quantile(self, u: float, y, rng=None) -> tuple[object, float, float]:
        k = len(y) // self.n0
        lo, hi = 0.0, 1.0
        out = []
        for c in (y[i:i + k] for i in range(0, len(y), k)):
            rows, cum = self.given[c]
            i = _inverse(cum, u)
            a = float(cum[i - 1]) if i else 0.0
            b = float(cum[i])
            out.append(rows[i])
            lo, hi = lo + (hi - lo) * a, lo + (hi - lo) * b
            if hi - lo > RESOLUTION or rng is None:
                u = min(max((u - a) / (b - a), 0.0), np.nextafter(1.0, 0.0))
            else:  # the remaining digits of u are exhausted; they are uniform in the cell
                u = rng.random()
        return _flatten(out), lo, hi


class StarFiller:
    """Sampler for the iterative star-coupling of an initial block and ``n`` copies of ``gamma``.

    Exact enumeration is exponential in ``n``; this sampler needs ``O(n)``
    work per draw.  The conditional lexicographic quantile of the first
    ``j`` blocks given their ``Y`` values is evaluated recursively: a
    piecewise-linear map carries the uniform down one level, and on the way
    back up the last block is chosen inside the returned cell.
    """

    def __init__(self, gamma: Coupling, beta: Coupling | None = None, n0: int = 1):
        self.level = _FillerLevel(gamma)
        self.base = _CouplingBase(beta) if beta is not None else _ProductBase(self.level, n0)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[tuple, list, tuple, list]:
        """Return ``(x0, xs, y0, ys)``: initial-block labels and ``n`` filler block labels."""
        lv = self.level
        y0 = self.base.draw_y(rng)
        if n == 0:
            x0, _, _ = self.base.quantile(rng.random(), y0, rng)
            return x0, [], y0, []
        ys = [lv.draw_y(v) for v in rng.random(n - 1)]
        x_last = lv.draw_x(rng.random())
        u = rng.random()
        y_last = lv.y_given_x(x_last, u)
        # carry u down through levels n-1, ..., 1
        us = [u]
        for j in reversed(ys):
            us.append(lv.pull_down(j, us[-1]))
        x0, lo, hi = self.base.quantile(us[-1], y0, rng)
        xs = []
        exact = True
        for level_idx, j in enumerate(ys):
            if exact and hi - lo > RESOLUTION:
                step = lv.push_up(j, us[len(ys) - 1 - level_idx], lo, hi)
                if step is not None:
                    x, lo, hi = step
                    xs.append(x)
                    continue
            # Below floating-point resolution the position inside the cell is
            # uniform given the coarse digits; locate the cell by the lower uniform.
            exact = False
            xs.append(lv.x_at(j, us[len(ys) - level_idx], rng.random()))
        xs.append(x_last)
        ys = ys + [y_last]
        return x0, [lv.rows[i] for i in xs], y0, [lv.cols[j] for j in ys]


def mutual_information(joint: dict) -> float:
    """Mutual information (nats) of a sparse law on pairs ``(a, b)``."""
    pa, pb = defaultdict(float), defaultdict(float)
    for (a, b), m in joint.items():
        pa[a] += m
        pb[b] += m
    return math.fsum(m * math.log(m / (pa[a] * pb[b])) for (a, b), m in joint.items() if m > 0)


def independence_gaps(sj: StarJoint) -> tuple[float, float]:
    """Mutual information of ``Y1'`` with ``(X2', Y2')`` and of ``X2'`` with ``(X1', Y1')``."""
    a = defaultdict(float)
    b = defaultdict(float)
    for (e1, f1, e2, f2), m in sj.mass.items():
        a[(f1, (e2, f2))] += m
        b[(e2, (e1, f1))] += m
    return mutual_information(a), mutual_information(b)


def usefulb_split_counts(sj: StarJoint) -> dict:
    """For each ``(e2, f1)``: number of ``e1`` sent to two or more distinct ``f2``."""
    seen = defaultdict(set)
    for (e1, f1, e2, f2), m in sj.mass.items():
        if m > 0:
            seen[(e2, f1, e1)].add(f2)
    counts = defaultdict(int)
    for (e2, f1, _), fs in seen.items():
        if len(fs) >= 2:
            counts[(e2, f1)] += 1
    return dict(counts)


def blocks_respect(x, y, relation: Relation | None = None) -> bool:
    if relation is None:
        return all(a >= b for a, b in zip(as_block(x), as_block(y)))
    return relation.holds(as_block(x), as_block(y))
