"""Window-scale machinery for Ball's alternating joining.

Windows are finite stretches of a jointly sampled pair ``(x, y)``.  The
alternating generator switches between a block coupling on ``k``-blocks and
a single-coordinate coupling; markers ``a^{2k} b`` let the block structure be
recovered from ``x`` alone.
"""

from __future__ import annotations

import bisect
import itertools
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .coupling import DEFAULT_BUDGET, BudgetExceeded, Coupling, product_power, relabel_blocks
from .dist import Dist, DistributionError, binary_entropy, entropy, entropy_of


class DegenerateConstruction(RuntimeError):
    """The conditioned block coupling is undefined (no-switch event is null)."""


@dataclass(frozen=True)
class MarkerConfig:
    a: int
    b: int
    k: int

    def validate(self, p: Dist) -> None:
        if self.k < 1:
            raise DistributionError("marker block length must be positive")
        if not 0 <= self.a < self.b < p.n:
            raise DistributionError(f"need 0 <= a < b < N, got a={self.a}, b={self.b}, N={p.n}")
        if p[self.a] <= 0 or p[self.b] <= 0:
            raise DistributionError("marker symbols need positive mass under p")

    def with_k(self, k: int) -> "MarkerConfig":
        return MarkerConfig(self.a, self.b, k)


@dataclass
class ProcessWindow:
    """A sampled stretch ``(x, y)`` on ``[lo, hi]``; coordinate 0 sits at index ``origin``."""

    x: np.ndarray
    y: np.ndarray
    origin: int = 0
    phase: np.ndarray | None = None  # generator mode per coordinate: 0 block, 1 single
    frozen: np.ndarray | None = None  # generator's own frozen labels

    @property
    def lo(self) -> int:
        return -self.origin

    @property
    def hi(self) -> int:
        return len(self.x) - 1 - self.origin

    def __len__(self) -> int:
        return len(self.x)

    def to_text(self) -> str:
        return (
            f"{self.lo} {self.hi} {self.origin}\n"
            + " ".join(map(str, self.x.tolist())) + "\n"
            + " ".join(map(str, self.y.tolist())) + "\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "ProcessWindow":
        head, xs, ys = text.strip().splitlines()[:3]
        lo, hi, origin = (int(t) for t in head.split())
        x = np.array(xs.split(), dtype=np.int64)
        y = np.array(ys.split(), dtype=np.int64)
        if len(x) != hi - lo + 1 or len(y) != len(x):
            raise ValueError("window header does not match row lengths")
        return cls(x, y, origin)


def find_markers(x, cfg: MarkerConfig) -> list[tuple[int, int]]:
    """Spans ``[n, n + 2k]`` with ``x[n : n + 2k] == a`` and ``x[n + 2k] == b``."""
    x = np.asarray(x)
    span = 2 * cfg.k
    if len(x) < span + 1:
        return []
    is_a = (x == cfg.a).astype(np.int64)
    csum = np.concatenate(([0], np.cumsum(is_a)))
    n = np.arange(len(x) - span)
    ok = (csum[n + span] - csum[n] == span) & (x[n + span] == cfg.b)
    return [(int(i), int(i) + span) for i in np.flatnonzero(ok)]


def _a_runs(x: np.ndarray, a: int) -> np.ndarray:
    """``run[i]`` = number of consecutive ``a`` symbols starting at ``i``."""
    idx = np.flatnonzero(x != a)
    nxt = np.full(len(x), len(x), dtype=np.int64)
    if len(idx):
        pos = np.searchsorted(idx, np.arange(len(x)))
        has = pos < len(idx)
        nxt[has] = idx[pos[has]]
    return nxt - np.arange(len(x))


def alternating_scan(x: np.ndarray, a: int, k: int, start: int = 0, block_mode: bool = True):
    """Alternating intervals of ``x`` from ``start`` to the end.

    Returns arrays ``(starts, sizes, switch)``.  In block mode ``k``-blocks
    are taken until one equals ``a^k`` (a switch); in single mode one
    coordinate at a time until a non-``a`` symbol (a switch).  A trailing
    block cut off by the window end is dropped.
    """
    x = np.asarray(x)
    n = len(x)
    run = _a_runs(x, a)
    long_runs = np.flatnonzero(run >= k)
    by_residue = [long_runs[long_runs % k == r] for r in range(k)]
    non_a = np.flatnonzero(x != a)
    starts, sizes, switch = [], [], []
    pos = start
    mode = block_mode
    while pos < n:
        if mode:
            cand = by_residue[pos % k]
            i = bisect.bisect_left(cand, pos)
            stop = int(cand[i]) if i < len(cand) else n
            if stop < n and stop + k <= n:
                blocks = np.arange(pos, stop + k, k)
                starts.append(blocks)
                sizes.append(np.full(len(blocks), k))
                sw = np.zeros(len(blocks), dtype=bool)
                sw[-1] = True
                switch.append(sw)
                pos = stop + k
                mode = False
            else:
                end_full = pos + ((n - pos) // k) * k
                blocks = np.arange(pos, end_full, k)
                starts.append(blocks)
                sizes.append(np.full(len(blocks), k))
                switch.append(np.zeros(len(blocks), dtype=bool))
                break
        else:
            i = bisect.bisect_left(non_a, pos)
            stop = int(non_a[i]) if i < len(non_a) else n - 1
            singles = np.arange(pos, stop + 1)
            starts.append(singles)
            sizes.append(np.ones(len(singles), dtype=np.int64))
            sw = np.zeros(len(singles), dtype=bool)
            if i < len(non_a):
                sw[-1] = True
            switch.append(sw)
            pos = stop + 1
            mode = True
    if not starts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    return (np.concatenate(starts).astype(np.int64), np.concatenate(sizes).astype(np.int64),
            np.concatenate(switch))


@dataclass
class IntervalDecomposition:
    """Alternating intervals recovered from ``x``, with block-level annotations.

    Coordinates before the first marker's right endpoint are uncovered.
    """

    length: int
    k: int
    markers: list[tuple[int, int]]
    starts: np.ndarray
    sizes: np.ndarray
    switch: np.ndarray
    super_markers: list[tuple[int, int]] = field(default_factory=list)
    large_blocks: list[tuple[int, int]] = field(default_factory=list)
    action_blocks: list[tuple[int, int, np.ndarray]] = field(default_factory=list)

    @cached_property
    def frozen(self) -> np.ndarray:
        return (self.sizes == 1) | self.switch

    @property
    def covered(self) -> tuple[int, int]:
        if len(self.starts) == 0:
            return (0, -1)
        return int(self.starts[0]), int(self.starts[-1] + self.sizes[-1] - 1)

    def coordinate_frozen(self) -> np.ndarray:
        """Per-coordinate frozen flag over the covered range."""
        return np.repeat(self.frozen, self.sizes)

    def free_intervals(self) -> np.ndarray:
        return np.flatnonzero(~self.frozen)

    def to_json(self) -> str:
        return json.dumps({
            "length": self.length,
            "k": self.k,
            "markers": [list(m) for m in self.markers],
            "intervals": [[int(s), int(z), bool(f), bool(w)] for s, z, f, w in
                          zip(self.starts, self.sizes, self.frozen, self.switch)],
            "superMarkers": [list(m) for m in self.super_markers],
            "largeBlocks": [list(m) for m in self.large_blocks],
            "actionBlocks": [[lo, hi, int(len(fi))] for lo, hi, fi in self.action_blocks],
        }, indent=None, separators=(",", ":"))


def super_markers(markers: list[tuple[int, int]], k_super: int) -> list[tuple[int, int]]:
    """Maximal runs of at least ``k_super`` abutting markers, as spans."""
    out = []
    run = []
    for m in markers:
        if run and m[0] == run[-1][1] + 1:
            run.append(m)
        else:
            if len(run) >= k_super:
                out.append((run[0][0], run[-1][1]))
            run = [m]
    if len(run) >= k_super:
        out.append((run[0][0], run[-1][1]))
    return out


def decompose(x, cfg: MarkerConfig, k_super: int | None = None,
              n_initial: int | None = None) -> IntervalDecomposition:
    """Recover the alternating intervals (and optionally large/action blocks) from ``x``."""
    x = np.asarray(x)
    markers = find_markers(x, cfg)
    if not markers:
        raise DistributionError("no marker in window")
    first_right = markers[0][1]
    starts, sizes, switch = alternating_scan(x, cfg.a, cfg.k, first_right + 1, True)
    starts = np.concatenate(([first_right], starts))
    sizes = np.concatenate(([1], sizes))
    switch = np.concatenate(([True], switch))
    dec = IntervalDecomposition(len(x), cfg.k, markers, starts, sizes, switch)
    if k_super is not None:
        sms = super_markers(markers, k_super)
        dec.super_markers = sms
        dec.large_blocks = [(l[1] + 1, r[0] - 1) for l, r in zip(sms, sms[1:]) if r[0] - 1 >= l[1] + 1]
        if n_initial is not None:
            free = dec.free_intervals()
            fstarts = starts[free]
            for lo, hi in dec.large_blocks:
                i0 = np.searchsorted(fstarts, lo, side="left")
                i1 = np.searchsorted(fstarts + cfg.k - 1, hi, side="right")
                inside = free[i0:i1]
                if len(inside) >= n_initial:
                    dec.action_blocks.append((lo, hi, inside))
    return dec


@dataclass
class BlockJoining:
    """Single-coordinate coupling ``rho``, seed coupling, and marker data.

    The block coupling is ``seed**k``; the filler coupling is that block
    coupling conditioned on the X-block differing from ``a^k``.
    """

    rho: Coupling
    seed: Coupling
    cfg: MarkerConfig
    budget: int = DEFAULT_BUDGET

    @property
    def k(self) -> int:
        return self.cfg.k

    @property
    def p(self) -> Dist:
        return self.seed.marginals()[0]

    @property
    def q(self) -> Dist:
        return self.seed.marginals()[1]

    @property
    def switch_prob(self) -> float:
        return self.p[self.cfg.a] ** self.k

    @cached_property
    def gamma(self) -> Coupling:
        return relabel_blocks(product_power(self.seed, self.k, self.budget))

    @cached_property
    def Gamma(self) -> Coupling:
        ak = (self.cfg.a,) * self.k
        mass = {key: m for key, m in self.gamma.mass.items() if key[0] != ak}
        rows = tuple(r for r in self.gamma.rows if r != ak)
        return Coupling.from_mass(rows, self.gamma.cols, mass, normalize=True)

    def filler_marginals(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense marginals of the filler coupling over the ``N**k`` lexicographic blocks."""
        n = self.p.n
        k = self.k
        if n ** k > self.budget:
            raise BudgetExceeded(f"{n}^{k} blocks exceed budget {self.budget}")
        p = self.p.as_array()
        dense = self.seed.dense()
        given_a = dense[self.cfg.a] / p[self.cfg.a]
        px = _tensor_power(p, k)
        qy = _tensor_power(self.q.as_array(), k)
        ya = _tensor_power(given_a, k)
        u = self.switch_prob
        a_index = sum(self.cfg.a * n ** (k - 1 - i) for i in range(k))
        mu = px.copy()
        mu[a_index] = 0.0
        nu = np.clip(qy - u * ya, 0.0, None)
        return mu / (1 - u), nu / (1 - u)


def _tensor_power(v: np.ndarray, k: int) -> np.ndarray:
    out = np.ones(1)
    for _ in range(k):
        out = np.outer(out, v).ravel()
    return out


def build_block_joining(seed: Coupling, cfg: MarkerConfig, rho: Coupling | None = None,
                        budget: int = DEFAULT_BUDGET) -> BlockJoining:
    """Assemble the block joining; ``rho`` defaults to the seed coupling itself."""
    p, _ = seed.marginals()
    if 0 <= cfg.a < p.n and p[cfg.a] ** cfg.k >= 1.0 - 1e-12:
        raise DegenerateConstruction("block coupling is concentrated on a^k")
    cfg.validate(p)
    return BlockJoining(rho if rho is not None else seed, seed, cfg, budget)


def _conditional_tables(c: Coupling, n: int) -> np.ndarray:
    dense = c.dense()[:n, :]
    rows = dense.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(rows > 0, dense / rows, 0.0)
    return np.cumsum(cond, axis=1)


def _draw_y(rng: np.random.Generator, x: np.ndarray, cum: np.ndarray) -> np.ndarray:
    y = np.empty_like(x)
    u = rng.random(len(x))
    for s in range(cum.shape[0]):
        sel = x == s
        if sel.any():
            y[sel] = np.minimum(np.searchsorted(cum[s], u[sel], side="right"), cum.shape[1] - 1)
    return y


def sample_alternating(rng: np.random.Generator, bj: BlockJoining, target_length: int,
                       burn_in: int = 0, random_origin: bool = True) -> ProcessWindow:
    """Simulate the one-sided alternating generator and return a window of it.

    Both couplings share the X-marginal ``p`` and the mode is decided by the
    past, so ``x`` is drawn i.i.d. first, the modes are recovered by a scan,
    and each ``y`` coordinate is drawn from the conditional law of the mode's
    coupling.  The generator starts in block mode; ``burn_in`` leading
    coordinates are discarded.
    """
    cfg = bj.cfg
    p = bj.p
    total = target_length + burn_in
    x = rng.choice(p.n, size=total, p=p.as_array()).astype(np.int64)
    starts, sizes, switch = alternating_scan(x, cfg.a, cfg.k, 0, True)
    phase = np.ones(total, dtype=np.int8)
    covered = int(starts[-1] + sizes[-1]) if len(starts) else 0
    phase[:covered] = np.repeat((sizes == 1).astype(np.int8), sizes)
    phase[covered:] = 0  # only a cut-off trailing block is left uncovered
    frozen = np.zeros(total, dtype=bool)
    frozen[:covered] = np.repeat((sizes == 1) | switch, sizes)
    seed_cum = _conditional_tables(bj.seed, p.n)
    rho_cum = _conditional_tables(bj.rho, p.n)
    y = np.empty_like(x)
    blk = phase == 0
    y[blk] = _draw_y(rng, x[blk], seed_cum)
    y[~blk] = _draw_y(rng, x[~blk], rho_cum)
    x, y, phase, frozen = x[burn_in:], y[burn_in:], phase[burn_in:], frozen[burn_in:]
    origin = int(rng.integers(0, target_length)) if random_origin else 0
    return ProcessWindow(x, y, origin, phase, frozen)


@dataclass(frozen=True)
class FrozenStats:
    p_frozen: float
    stderr: float
    size_one_bound: float
    switch_bound: float
    bound: float
    coordinates: int
    passes: bool


def frozen_stats(windows: list[ProcessWindow], cfg: MarkerConfig, p: Dist,
                 batches: int = 50) -> FrozenStats:
    """Fraction of covered coordinates lying in frozen intervals, with batch-means error.

    Labels come from the marker decomposition; a window without any marker
    falls back to the labels its generator recorded, if present.
    """
    flags = []
    for w in windows:
        try:
            dec = decompose(w.x, cfg)
        except DistributionError:
            if w.frozen is not None:
                flags.append(w.frozen)
            continue
        flags.append(dec.coordinate_frozen())
    if not flags:
        raise ValueError("no covered coordinates in the sample")
    allf = np.concatenate(flags).astype(float)
    est = float(allf.mean())
    parts = np.array_split(allf, min(batches, len(allf)))
    means = np.array([b.mean() for b in parts if len(b)])
    se = float(means.std(ddof=1) / math.sqrt(len(means))) if len(means) > 1 else 0.0
    pa = p[cfg.a]
    b1, b2 = pa ** (cfg.k - 1), pa ** cfg.k
    return FrozenStats(est, se, b1, b2, b1 + b2, len(allf), est <= b1 + b2 + 4 * se)


def _pair_codes(x: np.ndarray, y: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(x, dtype=np.int64) * n + np.asarray(y, dtype=np.int64)


def window_code(xs, ys, n: int) -> int:
    """Integer code of a window ``(xs, ys)``; coordinate ``j`` has weight ``(n*n)**j``."""
    code = 0
    for j, (a, b) in enumerate(zip(xs, ys)):
        code += (a * n + b) * (n * n) ** j
    return code


class IIDJoining:
    """Exact window laws of ``c**Z`` for a single-coordinate coupling ``c``."""

    def __init__(self, c: Coupling, budget: int = DEFAULT_BUDGET):
        self.c = c
        self.n = len(c.rows)
        self.budget = budget

    def restricted(self, i: int) -> dict:
        width = 2 * i + 1
        items = [(a * self.n + b, m) for (a, b), m in self.c.mass.items()]
        if len(items) ** width > self.budget:
            raise BudgetExceeded(f"{len(items)}^{width} cylinder cells exceed budget {self.budget}")
        codes = np.zeros(1, dtype=np.int64)
        probs = np.ones(1)
        base = self.n * self.n
        for j in range(width):
            sym = np.array([s for s, _ in items], dtype=np.int64)
            w = np.array([m for _, m in items])
            codes = (codes[:, None] + sym[None, :] * base ** j).ravel()
            probs = (probs[:, None] * w[None, :]).ravel()
        return dict(zip(codes.tolist(), probs.tolist()))


class AlternatingLaw:
    """Exact window laws of the stationary alternating joining.

    The mode at a coordinate is a function of an automaton driven by the
    past ``x`` symbols.  States ``r`` and ``k + r`` sit at offset ``r`` of a
    block (the block so far is ``a^r`` or not); state ``2k`` is single mode.
    Block mode draws ``y`` from the seed, single mode from ``rho``.
    """

    def __init__(self, bj: "BlockJoining", budget: int = DEFAULT_BUDGET):
        self.bj = bj
        self.n = bj.p.n
        self.budget = budget
        k = bj.k
        self.single = 2 * k
        self.states = 2 * k + 1
        a = bj.cfg.a
        nxt = np.zeros((self.states, self.n), dtype=np.int64)
        for s in range(self.states):
            for x in range(self.n):
                if s == self.single:
                    nxt[s, x] = self.single if x == a else 0
                    continue
                r, clean = s % k, s < k
                clean = clean and x == a
                if r < k - 1:
                    nxt[s, x] = r + 1 if clean else k + r + 1
                else:
                    nxt[s, x] = self.single if clean else 0
        self.next = nxt
        p = bj.p.as_array()
        T = np.zeros((self.states, self.states))
        for s in range(self.states):
            for x in range(self.n):
                T[s, nxt[s, x]] += p[x]
        w, v = np.linalg.eig(T.T)
        pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
        self.stationary = pi / pi.sum()
        self.cond = (self._pairs(bj.seed), self._pairs(bj.rho))

    def _pairs(self, c: Coupling) -> list[list[tuple[int, int, float]]]:
        rm = c.row_marginal_dict()
        out = [[] for _ in range(self.n)]
        for (x, y), m in c.mass.items():
            out[x].append((y, x * self.n + y, m / rm[x]))
        return out

    def restricted(self, i: int) -> dict:
        width = 2 * i + 1
        base = self.n * self.n
        p = self.bj.p.as_array()
        cur = {(s, 0): float(m) for s, m in enumerate(self.stationary) if m > 0}
        for j in range(width):
            out = defaultdict(float)
            for (s, code), m in cur.items():
                table = self.cond[1] if s == self.single else self.cond[0]
                for x in range(self.n):
                    if p[x] <= 0:
                        continue
                    s2 = int(self.next[s, x])
                    for _, sym, cm in table[x]:
                        out[(s2, code + sym * base ** j)] += m * p[x] * cm
            if len(out) > self.budget:
                raise BudgetExceeded(f"window law support exceeds budget {self.budget}")
            cur = out
        law = defaultdict(float)
        for (_, code), m in cur.items():
            law[code] += m
        return dict(law)


class SampledJoining:
    """Empirical window laws from long sampled stretches.

    Windows of radius ``i`` are centred at every ``stride``-th admissible
    coordinate of each stretch.
    """

    def __init__(self, windows: list[ProcessWindow], n: int, stride: int = 1):
        self.windows = windows
        self.n = n
        self.stride = stride

    def codes(self, i: int) -> np.ndarray:
        width = 2 * i + 1
        base = self.n * self.n
        out = []
        for w in self.windows:
            if len(w.x) < width:
                continue
            s = _pair_codes(w.x, w.y, self.n)
            m = len(s) - width + 1
            c = np.zeros(m, dtype=np.int64)
            for j in range(width):
                c += s[j:j + m] * base ** j
            out.append(c[:: self.stride])
        if not out:
            raise ValueError("no windows of the requested radius")
        return np.concatenate(out)

    def restricted(self, i: int) -> dict:
        codes, counts = np.unique(self.codes(i), return_counts=True)
        total = counts.sum()
        return dict(zip(codes.tolist(), (counts / total).tolist()))


def total_variation(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    return 0.5 * math.fsum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


@dataclass(frozen=True)
class WeakStar:
    estimate: float
    truncation_bound: float
    terms: tuple[float, ...]


def weak_star_distance(a, b, i_max: int) -> WeakStar:
    """Truncated weak-star distance ``sum_{i<=i_max} 2^-(i+1) TV_i``.

    The supremum over events depending on coordinates ``[-i, i]`` is the
    total-variation distance of the two restricted window laws.  The
    omitted tail is at most ``2^-(i_max+1)``.
    """
    terms = tuple(total_variation(a.restricted(i), b.restricted(i)) for i in range(i_max + 1))
    est = math.fsum(2.0 ** -(i + 1) * t for i, t in enumerate(terms))
    return WeakStar(est, 2.0 ** -(i_max + 1), terms)


def smb_rate(x, p: Dist) -> float:
    """``-(1/n) log p^n(x)``: the per-symbol information of a sequence under ``p``."""
    x = np.asarray(x)
    probs = p.as_array()[x]
    if np.any(probs <= 0):
        raise DistributionError("sequence contains a zero-mass symbol")
    return float(-np.log(probs).mean())


@dataclass(frozen=True)
class FillerEntropies:
    h_mu_fill: float
    h_nu_fill: float
    gap: float
    lower_bound: float  # bound implied by the conditioning entropy inequalities
    flipped_lower_bound: float  # bound with the sign of the log N term flipped
    holds: bool


def filler_entropies(bj: BlockJoining, tol: float = 1e-9) -> FillerEntropies:
    """Exact block entropies of both filler marginals and the conditioning lower bounds."""
    mu, nu = bj.filler_marginals()
    hmu, hnu = entropy_of(mu), entropy_of(nu)
    k, n = bj.k, bj.p.n
    u = bj.switch_prob
    base = k * (entropy(bj.p) - entropy(bj.q))
    lower = base - 2 * binary_entropy(u) - u * k * math.log(n)
    printed = base - (2 * binary_entropy(u) - u * k * math.log(n))
    gap = hmu - hnu
    return FillerEntropies(hmu, hnu, gap, lower, printed, gap >= lower - tol)
