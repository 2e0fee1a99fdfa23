"""Almost-factor pipeline: good sets, initial-block refinement, Psi extraction,
the alternating star-joining and the staged parameter search."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .coupling import (
    DEFAULT_BUDGET,
    BudgetExceeded,
    Coupling,
    is_subordinate,
    marriage_refine,
    product_power,
    split_elements,
)
from .dist import Dist, DistributionError, Relation, entropy_of
from .process import (
    BlockJoining,
    MarkerConfig,
    ProcessWindow,
    decompose,
    sample_alternating,
)
from .star import StarFiller, blocks_respect


class SearchExhausted(RuntimeError):
    """The parameter search ran out of budget; ``constraint`` names what failed."""

    def __init__(self, constraint: str, detail: str = ""):
        super().__init__(f"search exhausted; binding constraint: {constraint}. {detail}".strip())
        self.constraint = constraint
        self.detail = detail


@dataclass(frozen=True)
class Params:
    epsilon: float
    epsilonPrime: float
    k: int
    n0: int
    nRel: int
    kSuper: int
    eta: float
    smbEps: float
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not self.nRel > self.n0:
            raise ValueError(f"nRel={self.nRel} must exceed n0={self.n0}")
        if not math.isclose(self.epsilonPrime, self.epsilon / 10, rel_tol=1e-12):
            raise ValueError("epsilonPrime must equal epsilon/10")


def block_index(block, n: int) -> int:
    """Lexicographic index of a block in ``[n]**len(block)``."""
    idx = 0
    for s in block:
        idx = idx * n + s
    return idx


def chunks(seq, k: int) -> list[tuple]:
    seq = tuple(seq)
    if len(seq) % k:
        raise ValueError(f"length {len(seq)} is not a multiple of {k}")
    return [seq[i:i + k] for i in range(0, len(seq), k)]


@dataclass(frozen=True)
class GoodSetOracle:
    """Good-prefix predicate for a product of a block measure.

    ``direction="upper"`` tests ``m(prefix) < exp(-(h - eps) L)``;
    ``direction="lower"`` tests ``m(prefix) > exp(-(h + eps) L)``.
    Prefix lengths ``L`` are counted in blocks; checkpoints are
    ``L_j = n0 + j``.
    """

    blockMeasure: np.ndarray
    smbEps: float
    direction: str
    n: int
    k: int
    n0: int = 1

    def __post_init__(self):
        if self.direction not in ("upper", "lower"):
            raise ValueError("direction must be 'upper' or 'lower'")
        m = np.asarray(self.blockMeasure, dtype=float)
        if m.shape != (self.n ** self.k,):
            raise ValueError("block measure has the wrong size")
        object.__setattr__(self, "blockMeasure", m)

    @property
    def h(self) -> float:
        return entropy_of(self.blockMeasure)

    def log_measure(self, blocks) -> float:
        with np.errstate(divide="ignore"):
            return float(sum(np.log(self.blockMeasure[block_index(b, self.n)]) for b in blocks))

    def good_log(self, logm: float, length: int) -> bool:
        if self.direction == "upper":
            return logm < -(self.h - self.smbEps) * length
        return logm > -(self.h + self.smbEps) * length

    def is_good(self, blocks) -> bool:
        return self.good_log(self.log_measure(blocks), len(blocks))

    def prefix_flags(self, blocks) -> list[bool]:
        """Goodness of each checkpoint prefix, ``L_0, L_0 + 1, ...``."""
        flags = []
        logm = self.log_measure(blocks[: self.n0])
        flags.append(self.good_log(logm, self.n0))
        for j, b in enumerate(blocks[self.n0:], start=1):
            with np.errstate(divide="ignore"):
                logm += float(np.log(self.blockMeasure[block_index(b, self.n)]))
            flags.append(self.good_log(logm, self.n0 + j))
        return flags


def completely_good(oracle: GoodSetOracle, block_sequence) -> bool:
    """True iff every checkpoint prefix of ``block_sequence`` is good."""
    blocks = list(block_sequence)
    if len(blocks) < oracle.n0:
        raise ValueError("sequence shorter than the initial block")
    return all(oracle.prefix_flags(blocks))


def oracles_for(bj: BlockJoining, smb_eps: float, n0: int) -> tuple[GoodSetOracle, GoodSetOracle]:
    mu, nu = bj.filler_marginals()
    n, k = bj.p.n, bj.k
    return (GoodSetOracle(mu, smb_eps, "upper", n, k, n0), GoodSetOracle(nu, smb_eps, "lower", n, k, n0))


def nu_good_initial(Gamma_n0: Coupling, nu_oracle: GoodSetOracle) -> list:
    k = nu_oracle.k
    return [c for c in Gamma_n0.cols if nu_oracle.is_good(chunks(c, k))]


def build_beta(Gamma: Coupling, n0: int, nu_oracle: GoodSetOracle,
               budget: int = DEFAULT_BUDGET) -> Coupling:
    """Refine ``Gamma**n0`` so at most ``|B'| - 1`` rows split inside the nu-good set ``B'``."""
    base = product_power(Gamma, n0, budget)
    bprime = nu_good_initial(base, nu_oracle)
    beta = marriage_refine(base, bprime)
    if not is_subordinate(beta, base):
        raise AssertionError("refinement left the support of the base coupling")
    return beta


@dataclass
class PsiTable:
    table: dict
    default: tuple
    desirable_mass: float
    p_match: float
    p_x_not_cg: float
    p_y_not_cg: float
    j: int

    def __call__(self, x) -> tuple:
        return self.table.get(tuple(x), self.default)


def extract_psi(W: Coupling, oracles: tuple[GoodSetOracle, GoodSetOracle]) -> PsiTable:
    """Build the deterministic map on the exact iterative star-coupling ``W``.

    ``x`` is desirable when it is mu-completely good, has at most one
    positive-mass partner whose initial block is nu-good, and that partner
    is nu-completely good.
    """
    mu_o, nu_o = oracles
    k, n0 = mu_o.k, mu_o.n0
    length = len(W.rows[0])
    j = length // k - n0
    if j < 0 or length % k:
        raise ValueError("row labels do not match the block layout")
    x_cg = {x: all(mu_o.prefix_flags(chunks(x, k))) for x in W.rows}
    y_flags = {y: nu_o.prefix_flags(chunks(y, k)) for y in W.cols}
    partners = defaultdict(list)
    for (x, y), m in W.mass.items():
        if y_flags[y][0]:  # initial block nu-good: y lies in J_j
            partners[x].append(y)
    default = (0,) * length
    table = {}
    for x in W.rows:
        ys = partners.get(x, [])
        if x_cg[x] and len(ys) == 1 and all(y_flags[ys[0]]):
            table[x] = ys[0]
    px = W.row_marginal_dict()
    py = W.col_marginal_dict()
    desirable = math.fsum(px[x] for x in table)
    match = math.fsum(m for (x, y), m in W.mass.items() if table.get(x, default) == y)
    not_x = math.fsum(v for x, v in px.items() if not x_cg[x])
    not_y = math.fsum(v for y, v in py.items() if not all(y_flags[y]))
    return PsiTable(table, default, desirable, match, not_x, not_y, j)


def desirable_bound(params: Params, good_stats: PsiTable, n: int) -> float:
    """Right-hand side of the non-desirable bound for ``j`` star steps on ``[n]``."""
    if params.delta <= 0:
        raise ValueError("delta must be positive")
    d, n0, j = params.delta, params.n0, good_stats.j
    tail = (n ** params.k) * math.fsum(math.exp(-d * (n0 + i)) for i in range(j))
    return good_stats.p_x_not_cg + good_stats.p_y_not_cg + math.exp(-d * n0) + tail


def pile_value(n: int, k: int, delta: float, n0: int) -> float:
    """``n**k * sum_{i >= n0} exp(-delta i)`` in closed form."""
    return (n ** k) * math.exp(-delta * n0) / (1.0 - math.exp(-delta))


def relation_matrix(n: int, relation: Relation | None) -> np.ndarray:
    """Boolean ``n x n`` membership table; ``None`` means the order ``x >= y``."""
    if relation is None:
        return np.tril(np.ones((n, n), dtype=bool))
    m = np.zeros((n, n), dtype=bool)
    for a, b in relation.pairs:
        m[a, b] = True
    return m


def violations(x: np.ndarray, y: np.ndarray, allowed: np.ndarray) -> int:
    return int(np.count_nonzero(~allowed[np.asarray(x), np.asarray(y)]))


@dataclass
class AlmostFactorSample:
    window: ProcessWindow
    action_blocks: int
    resampled_intervals: int
    resampled_coordinates: int
    r_coordinates: int
    covered_coordinates: int
    violations: int


def build_almost_factor(bj: BlockJoining, params: Params, rng: np.random.Generator, length: int,
                        beta: Coupling | None = None, relation: Relation | None = None,
                        budget: int = DEFAULT_BUDGET) -> AlmostFactorSample:
    """Sample a window of the alternating joining and star-fill its action blocks.

    The first ``n0`` free intervals of an action block receive the initial
    block (from ``beta``, or from the unrefined ``Gamma**n0`` when ``beta``
    is None); the remaining free intervals get one filler level each.
    Everything outside the free intervals of action blocks is left as is.
    """
    if bj.k != params.k:
        raise ValueError("marker block length differs from params.k")
    win = sample_alternating(rng, bj, length)
    x, y = win.x.copy(), win.y.copy()
    allowed = relation_matrix(bj.p.n, relation)
    dec = decompose(x, bj.cfg, params.kSuper, params.n0)
    filler = StarFiller(bj.Gamma, beta, params.n0)
    k = params.k
    n_free = n_coords = r_coords = 0
    for lo, hi, free in dec.action_blocks:
        starts = dec.starts[free]
        x0, xs, y0, ys = filler.sample(rng, len(free) - params.n0)
        xb = chunks(x0, k) + list(xs)
        yb = chunks(y0, k) + list(ys)
        for s, xk, yk in zip(starts, xb, yb):
            x[s:s + k] = xk
            y[s:s + k] = yk
        n_free += len(free)
        n_coords += hi - lo + 1
        inside = (dec.starts >= lo) & (dec.starts <= hi) & (dec.sizes == k)
        if np.count_nonzero(inside) < params.nRel:
            r_coords += hi - lo + 1
    bad = violations(x, y, allowed)
    if bad:
        raise AssertionError(f"{bad} coordinates violate the relation after star-filling")
    out = ProcessWindow(x, y, win.origin, win.phase, win.frozen)
    covered = 0
    if len(dec.super_markers) >= 2:
        covered = dec.super_markers[-1][0] - dec.super_markers[0][1] - 1
    return AlmostFactorSample(out, len(dec.action_blocks), n_free, n_coords, r_coords, covered, bad)


@dataclass(frozen=True)
class AlmostFactorResult:
    m: int
    errors: tuple[float, ...]
    stderrs: tuple[float, ...]
    epsilon: float
    samples: int
    passes: bool


def _cylinder_codes(x: np.ndarray, m: int, n: int) -> np.ndarray:
    width = 2 * m + 1
    cnt = len(x) - width + 1
    codes = np.zeros(cnt, dtype=np.int64)
    for j in range(width):
        codes = codes * n + x[j:j + cnt]
    return codes


def majority_predictor(codes: np.ndarray, y0: np.ndarray, n: int) -> dict:
    """Most frequent ``y0`` per cylinder; the lowest symbol wins ties."""
    uniq, inv = np.unique(codes, return_inverse=True)
    counts = np.zeros((len(uniq), n), dtype=np.int64)
    np.add.at(counts, (inv, y0), 1)
    return dict(zip(uniq.tolist(), np.argmax(counts, axis=1).tolist()))


def almost_factor_test(windows: list[ProcessWindow], m: int, epsilon: float,
                       min_samples: int = 1000, batches: int = 20) -> AlmostFactorResult:
    """Predict ``y_0`` from ``x`` on ``[-m, m]`` and measure the miss rate per symbol.

    Windows alternate between a fitting half (used to build the majority
    vote) and an evaluation half, so the estimate is not optimistic.
    Cylinders never seen while fitting predict symbol 0.
    """
    if len(windows) < 2:
        raise ValueError("need at least two windows (fit and evaluation halves)")
    n = int(max(max(w.x.max(), w.y.max()) for w in windows)) + 1
    fit, ev = windows[0::2], windows[1::2]

    def stack(ws):
        cs, ys = [], []
        for w in ws:
            if len(w.x) < 2 * m + 1:
                continue
            cs.append(_cylinder_codes(np.asarray(w.x, dtype=np.int64), m, n))
            ys.append(np.asarray(w.y[m:len(w.y) - m], dtype=np.int64))
        if not cs:
            raise ValueError(f"no window is long enough for radius {m}")
        return np.concatenate(cs), np.concatenate(ys)

    fc, fy = stack(fit)
    ec, ey = stack(ev)
    if len(fc) < min_samples or len(ec) < min_samples:
        raise ValueError(f"insufficient samples for radius {m}")
    table = majority_predictor(fc, fy, n)
    pred = np.array([table.get(c, 0) for c in ec.tolist()], dtype=np.int64)
    errs, ses = [], []
    for i in range(n):
        miss = ((pred == i) != (ey == i)).astype(float)
        parts = np.array_split(miss, batches)
        means = np.array([b.mean() for b in parts])
        errs.append(float(miss.mean()))
        ses.append(float(means.std(ddof=1) / math.sqrt(len(means))))
    worst = max(e + 4 * s for e, s in zip(errs, ses))
    return AlmostFactorResult(m, tuple(errs), tuple(ses), epsilon, len(ec), worst < epsilon)


def collision_statistic(pairs) -> tuple[float, int]:
    """Fraction of repeated X-blocks whose sampled Y-blocks disagree, and the repeat count."""
    seen = defaultdict(set)
    hits = defaultdict(int)
    for x, y in pairs:
        seen[x].add(y)
        hits[x] += 1
    repeated = [x for x, h in hits.items() if h > 1]
    if not repeated:
        return 0.0, 0
    return sum(len(seen[x]) > 1 for x in repeated) / len(repeated), len(repeated)


EXACT_CELLS = 1 << 24
REFINE_CELLS = 1 << 14  # larger initial blocks use the unrefined product


@dataclass(frozen=True)
class Coverage:
    value: float
    stderr: float
    exact: bool


def smb_coverage(oracle: GoodSetOracle, horizon: int, rng: np.random.Generator | None = None,
                 trials: int = 20000) -> Coverage:
    """Probability that a block sequence of length ``horizon`` is good at every checkpoint ``L >= n0``.

    Exact when ``(N**k)**horizon`` fits in ``EXACT_CELLS``; otherwise Monte
    Carlo with ``trials`` sequences.
    """
    m = oracle.blockMeasure
    if horizon < oracle.n0:
        raise ValueError("horizon shorter than the initial block")
    with np.errstate(divide="ignore"):
        logm = np.log(m)
    h, eps, up = oracle.h, oracle.smbEps, oracle.direction == "upper"

    def ok(cum, ell):
        return cum < -(h - eps) * ell if up else cum > -(h + eps) * ell

    if len(m) ** horizon <= EXACT_CELLS:
        support = np.flatnonzero(m > 0)
        cum = np.zeros(1)
        prob = np.ones(1)
        alive = np.ones(1, dtype=bool)
        for ell in range(1, horizon + 1):
            cum = (cum[:, None] + logm[support][None, :]).ravel()
            prob = (prob[:, None] * m[support][None, :]).ravel()
            alive = np.repeat(alive, len(support))
            if ell >= oracle.n0:
                alive &= ok(cum, ell)
        return Coverage(float(prob[alive].sum()), 0.0, True)
    if rng is None:
        raise ValueError("Monte Carlo coverage needs a random generator")
    cdf = np.cumsum(m / m.sum())
    lengths = np.arange(1, horizon + 1)[oracle.n0 - 1:]
    hits = 0
    for start in range(0, trials, 2048):
        size = min(2048, trials - start)
        draws = np.minimum(np.searchsorted(cdf, rng.random((size, horizon)), side="right"), len(m) - 1)
        cum = np.cumsum(logm[draws], axis=1)[:, oracle.n0 - 1:]
        hits += int(np.count_nonzero(ok(cum, lengths).all(axis=1)))
    v = hits / trials
    return Coverage(v, math.sqrt(max(v * (1 - v), 1.0 / trials) / trials), False)


@dataclass
class Constraint:
    name: str
    value: float
    threshold: float
    passes: bool
    stderr: float = 0.0


@dataclass
class SearchSettings:
    """Knobs of the staged parameter search."""

    k_range: tuple[int, int] = (2, 10)
    n0_max: int = 400
    kSuper_range: tuple[int, int] = (1, 3)
    window: int = 1_000_000
    windows: int = 4
    imax: int = 1
    smb_trials: int = 20000
    smb_horizon: int = 0  # extra blocks past n0 checked for coverage; 0 means n0
    smb_grid: int = 16
    exact: bool = False
    budget: int = DEFAULT_BUDGET


@dataclass
class SearchLog:
    stages: list = field(default_factory=list)

    def add(self, stage: str, **values):
        self.stages.append({"stage": stage, **values})


def _sample_windows(rng, bj, settings: SearchSettings) -> list[ProcessWindow]:
    return [sample_alternating(rng, bj, settings.window) for _ in range(settings.windows)]


def choose_k(seed: Coupling, cfg: MarkerConfig, epsilon: float, settings: SearchSettings,
             rng: np.random.Generator, rho: Coupling | None = None, log: SearchLog | None = None):
    """Yield ``(k, block joining, constraints)`` for each k passing the marker-length stage."""
    from .process import IIDJoining, SampledJoining, build_block_joining, filler_entropies, frozen_stats, weak_star_distance

    eps1 = epsilon / 10
    p, _ = seed.marginals()
    for k in range(settings.k_range[0], settings.k_range[1] + 1):
        bj = build_block_joining(seed, cfg.with_k(k), rho, settings.budget)
        ws = _sample_windows(rng, bj, settings)
        fs = frozen_stats(ws, bj.cfg, p)
        fe = filler_entropies(bj)
        d = weak_star_distance(IIDJoining(seed, settings.budget), SampledJoining(ws, p.n), settings.imax)
        cons = [
            Constraint("frozen", fs.p_frozen, eps1, fs.p_frozen + 4 * fs.stderr < eps1, fs.stderr),
            Constraint("fillerGap", fe.gap, 0.0, fe.gap > 0),
            Constraint("weakStarBall", d.estimate, eps1, d.estimate < eps1),
        ]
        if log is not None:
            log.add("k", k=k, constraints=[asdict(c) for c in cons])
        if all(c.passes for c in cons):
            yield k, bj, cons, fe


def pile_n0(n: int, k: int, delta: float, eta: float) -> int:
    """Smallest ``n0`` with ``pile_value(n, k, delta, n0) < eta / 4``."""
    need = math.log((n ** k) / ((eta / 4) * (1.0 - math.exp(-delta)))) / delta
    n0 = max(1, math.floor(need))
    while pile_value(n, k, delta, n0) >= eta / 4:
        n0 += 1
    while n0 > 1 and pile_value(n, k, delta, n0 - 1) < eta / 4:
        n0 -= 1
    return n0


def _coverage_ok(bj, se, n0, eta, settings, rng):
    mo, no = oracles_for(bj, se, n0)
    horizon = n0 + (settings.smb_horizon or n0)
    if settings.exact:
        horizon = n0
        cap = n0 + (settings.smb_horizon or n0)
        while len(mo.blockMeasure) ** (horizon + 1) <= EXACT_CELLS and horizon < cap:
            horizon += 1
    cm = smb_coverage(mo, horizon, rng, settings.smb_trials)
    cn = smb_coverage(no, horizon, rng, settings.smb_trials)
    ok_m = cm.value - 4 * cm.stderr > 1 - eta / 4
    ok_n = cn.value - 4 * cn.stderr > 1 - eta / 4
    return ok_m, ok_n, cm, cn, horizon


def choose_initial(bj: BlockJoining, eta: float, gap: float, settings: SearchSettings,
                   rng: np.random.Generator, log: SearchLog | None = None):
    """Smallest ``n0`` (with its ``smbEps``) meeting the tail-sum and both coverage targets.

    For each ``smbEps`` on a grid in ``(0, gap/2)`` the tail-sum bound gives
    a least ``n0`` in closed form; ``n0`` then grows geometrically until
    both coverage targets hold, and a bisection finds the least passing
    value.  The grid point with the smallest ``n0`` wins; scanning from the
    largest ``smbEps`` down lets each result cap the later scans.
    """
    n, k = bj.p.n, bj.k
    grid = [gap / 2 * (i + 1) / (settings.smb_grid + 1) for i in reversed(range(settings.smb_grid))]
    best = None
    binding = "pile"
    for se in grid:
        delta = gap - 2 * se
        lo = pile_n0(n, k, delta, eta)
        if lo > settings.n0_max:
            continue
        if best is not None and lo >= best[0]:
            continue
        cap = settings.n0_max if best is None else best[0] - 1
        cur, passed, fail_lo = lo, None, lo - 1
        while cur <= cap:
            ok_m, ok_n, cm, cn, hz = _coverage_ok(bj, se, cur, eta, settings, rng)
            if log is not None:
                log.add("initial", n0=cur, smbEps=se, delta=delta, pile=pile_value(n, k, delta, cur),
                        horizon=hz, smbTop=cm.value, smbTopErr=cm.stderr,
                        smbBottom=cn.value, smbBottomErr=cn.stderr)
            if ok_m and ok_n:
                passed = (cur, cm, cn)
                break
            binding = "smbTop" if not ok_m else "smbBottom"
            fail_lo = cur
            if cur == cap:
                break
            cur = min(cap, max(cur + 1, int(cur * 1.25)))
        if passed is None:
            continue
        hi_n0, cm, cn = passed
        while hi_n0 - fail_lo > 1:
            mid = (hi_n0 + fail_lo) // 2
            ok_m, ok_n, cm2, cn2, _ = _coverage_ok(bj, se, mid, eta, settings, rng)
            if ok_m and ok_n:
                hi_n0, cm, cn = mid, cm2, cn2
            else:
                fail_lo = mid
        best = (hi_n0, se, delta, cm, cn)
    if best is None:
        raise SearchExhausted(binding, f"no n0 <= {settings.n0_max} at k={k}")
    n0, se, delta, cm, cn = best
    return n0, se, delta, [
        Constraint("pile", pile_value(n, k, delta, n0), eta / 4, True),
        Constraint("smbTop", cm.value, 1 - eta / 4, True, cm.stderr),
        Constraint("smbBottom", cn.value, 1 - eta / 4, True, cn.stderr),
    ]


def action_statistics(windows_x, cfg: MarkerConfig, k_super: int, n0: int, n_rel: int) -> dict:
    """Fractions of coordinates outside action blocks and in short action blocks (the set R).

    Only the stretch between the first and last super marker of each
    window is counted, so every large block seen there is complete.
    """
    outside, short, total = [], [], []
    for x in windows_x:
        try:
            dec = decompose(x, cfg, k_super, n0)
        except DistributionError:
            continue
        if len(dec.super_markers) < 2:
            continue
        span = dec.super_markers[-1][0] - dec.super_markers[0][1] - 1
        in_action = in_short = 0
        for lo, hi, _ in dec.action_blocks:
            size = hi - lo + 1
            in_action += size
            inside = (dec.starts >= lo) & (dec.starts + dec.sizes - 1 <= hi) & (dec.sizes == cfg.k)
            if np.count_nonzero(inside) < n_rel:
                in_short += size
        outside.append(span - in_action)
        short.append(in_short)
        total.append(span)
    if not total or sum(total) == 0:
        return {"outside": 1.0, "outsideErr": 0.0, "r": 1.0, "rErr": 0.0, "coordinates": 0}
    t = np.array(total, dtype=float)
    o = np.array(outside, dtype=float)
    r = np.array(short, dtype=float)

    def ratio(a):
        est = a.sum() / t.sum()
        if len(t) < 2:
            return est, 1.0  # a single stretch carries no error estimate
        resid = (a - est * t) / t.mean()
        return est, float(resid.std(ddof=1) / math.sqrt(len(t)))

    oe, ose = ratio(o)
    re, rse = ratio(r)
    return {"outside": float(oe), "outsideErr": ose, "r": float(re), "rErr": rse, "coordinates": int(t.sum())}


def choose_parameters(seed: Coupling, cfg: MarkerConfig, epsilon: float,
                      settings: SearchSettings | None = None, rng: np.random.Generator | None = None,
                      rho: Coupling | None = None, log: SearchLog | None = None) -> tuple[Params, list]:
    """Staged search: k, then (n0, smbEps), then nRel, then kSuper.

    Later stages that fail send the search back to the next k.  Raises
    SearchExhausted naming the constraint that failed last.
    """
    from .dist import dominates

    settings = settings or SearchSettings()
    rng = rng if rng is not None else np.random.default_rng(0)
    p, q = seed.marginals()
    if not entropy_of(p.probs) > entropy_of(q.probs):
        raise DistributionError("need H(p) > H(q)")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    eps1 = epsilon / 10
    eta = eps1
    binding = "frozen/fillerGap/weakStarBall"
    for k, bj, k_cons, fe in choose_k(seed, cfg, epsilon, settings, rng, rho, log):
        try:
            n0, se, delta, init_cons = choose_initial(bj, eta, fe.gap, settings, rng, log)
        except SearchExhausted as exc:
            binding = exc.constraint
            continue
        n_rel = int(math.floor(n0 / eps1)) + 1
        while not n0 / n_rel < eps1:
            n_rel += 1
        for k_super in range(settings.kSuper_range[0], settings.kSuper_range[1] + 1):
            ws = _sample_windows(rng, bj, settings)
            st = action_statistics([w.x for w in ws], bj.cfg, k_super, n0, n_rel)
            ok_out = st["outside"] + 4 * st["outsideErr"] < eps1
            ok_r = st["r"] + 4 * st["rErr"] < eps1
            if log is not None:
                log.add("kSuper", k=k, kSuper=k_super, nRel=n_rel, **st)
            if ok_out and ok_r:
                params = Params(epsilon, eps1, k, n0, n_rel, k_super, eta, se, delta)
                cons = k_cons + init_cons + [
                    Constraint("nRatio", n0 / n_rel, eps1, True),
                    Constraint("actionCoverage", 1 - st["outside"], 1 - eps1, True, st["outsideErr"]),
                    Constraint("rSet", st["r"], eps1, True, st["rErr"]),
                ]
                return params, cons
            binding = "actionCoverage" if not ok_out else "rSet"
    raise SearchExhausted(binding, f"k searched over {settings.k_range}")


def _batch_stderr(flags: np.ndarray, batches: int = 20) -> float:
    parts = np.array_split(flags.astype(float), batches)
    means = np.array([b.mean() for b in parts if len(b)])
    return float(means.std(ddof=1) / math.sqrt(len(means))) if len(means) > 1 else 0.0


def marginal_check(windows: list[ProcessWindow], p: Dist, q: Dist) -> dict:
    """Empirical single-coordinate frequencies against ``p`` and ``q`` with 4-sigma bands."""
    x = np.concatenate([w.x for w in windows])
    y = np.concatenate([w.y for w in windows])
    out = {"coordinates": int(len(x)), "x": [], "y": [], "passes": True}
    for name, arr, law in (("x", x, p), ("y", y, q)):
        for s in range(law.n):
            flags = arr == s
            f = float(flags.mean())
            se = _batch_stderr(flags)
            ok = abs(f - law[s]) <= 4 * se + 1e-12
            out[name].append({"symbol": s, "frequency": f, "expected": law[s], "stderr": se, "passes": ok})
            out["passes"] &= ok
    return out


def exact_determinism(bj: BlockJoining, params: Params, horizon: int,
                      budget: int = DEFAULT_BUDGET) -> list[dict]:
    """Exact ``P(Y = Psi(X))`` and the non-desirable bound for ``j = 0..horizon`` star steps."""
    from .star import iterative_star

    mo, no = oracles_for(bj, params.smbEps, params.n0)
    beta = build_beta(bj.Gamma, params.n0, no, budget)
    rows = []
    W = beta
    for j in range(horizon + 1):
        if j:
            W = iterative_star(W, [bj.Gamma], budget)
        ps = extract_psi(W, (mo, no))
        bound = desirable_bound(params, ps, bj.p.n)
        rows.append({"j": j, "pMatch": ps.p_match, "desirable": ps.desirable_mass,
                     "notDesirable": 1 - ps.desirable_mass, "bound": bound,
                     "boundHolds": 1 - ps.desirable_mass <= bound + 1e-12,
                     "pXNotCG": ps.p_x_not_cg, "pYNotCG": ps.p_y_not_cg})
    return rows


def _settings_from(exp) -> SearchSettings:
    s = exp.section("search")
    out = SearchSettings(exact=exp.exact, budget=exp.budget)
    if "k" in s:
        out.k_range = tuple(s["k"])
    if "kSuper" in s:
        out.kSuper_range = tuple(s["kSuper"])
    for key, attr in (("n0Max", "n0_max"), ("window", "window"), ("windows", "windows"),
                      ("imax", "imax"), ("smbTrials", "smb_trials"), ("smbHorizon", "smb_horizon"),
                      ("smbGrid", "smb_grid")):
        if key in s:
            setattr(out, attr, int(s[key]))
    if exp.imax is not None:
        out.imax = int(exp.imax)
    return out


def run_factor(exp) -> dict:
    """Full pipeline for a validated experiment; returns the JSON-ready report."""
    from .cli import derive_rng
    from .process import IIDJoining, SampledJoining, build_block_joining, filler_entropies, weak_star_distance

    seed = exp.seed_coupling()
    rho = exp.rho(seed)
    p, q = exp.p, exp.q
    if not entropy_of(p.probs) > entropy_of(q.probs):
        from .cli import PreconditionFailed

        raise PreconditionFailed("need H(p) > H(q)")
    settings = _settings_from(exp)
    log = SearchLog()
    params, cons = choose_parameters(seed, exp.marker, exp.epsilon, settings,
                                     derive_rng(exp.seed, "search"), rho, log)
    bj = build_block_joining(seed, exp.marker.with_k(params.k), rho, exp.budget)
    fe = filler_entropies(bj)
    fac = exp.section("factor")
    length = int(exp.trials or fac.get("length", 1_000_000))
    nwin = max(2, int(fac.get("windows", 4)))
    beta, initial = None, "product"
    if len(bj.Gamma.mass) ** params.n0 <= min(exp.budget, REFINE_CELLS):
        beta = build_beta(bj.Gamma, params.n0, oracles_for(bj, params.smbEps, params.n0)[1], exp.budget)
        initial = "refined"
    samples = [build_almost_factor(bj, params, derive_rng(exp.seed, "factor", i), length, beta,
                                   exp.relation, exp.budget) for i in range(nwin)]
    windows = [s.window for s in samples]
    covered = sum(s.covered_coordinates for s in samples)
    r_est = sum(s.r_coordinates for s in samples) / covered if covered else 1.0
    tests = [almost_factor_test(windows, int(m), exp.epsilon) for m in fac.get("m", [0])]
    best = min(tests, key=lambda t: max(t.errors))
    imax = settings.imax
    exact_side = IIDJoining(seed, exp.budget)
    ws = weak_star_distance(exact_side, SampledJoining(windows, p.n), imax)
    # plug-in bias of an equally large i.i.d. sample of the seed joining itself
    frng = derive_rng(exp.seed, "floor")
    keys = list(seed.mass)
    probs = np.array([seed.mass[k] for k in keys])
    ref = []
    for w in windows:
        idx = frng.choice(len(keys), size=len(w), p=probs / probs.sum())
        pairs = np.array(keys, dtype=np.int64)[idx]
        ref.append(ProcessWindow(pairs[:, 0], pairs[:, 1]))
    floor = weak_star_distance(exact_side, SampledJoining(ref, p.n), imax)
    drift_rhs = params.epsilonPrime + 2 * r_est + params.n0 / params.nRel
    drift_ok = ws.estimate <= drift_rhs + floor.estimate
    viol = sum(s.violations for s in samples)
    marg = marginal_check(windows, p, q)
    determinism: dict = {"initialBlock": initial}
    if exp.exact and beta is not None:
        horizon = int(fac.get("exactHorizon", 2))
        determinism["exact"] = exact_determinism(bj, params, horizon, exp.budget)
    else:
        filler = StarFiller(bj.Gamma, beta, params.n0)
        drng = derive_rng(exp.seed, "collision")
        pairs = []
        for _ in range(int(fac.get("collisionDraws", 200))):
            x0, _, y0, _ = filler.sample(drng, 0)
            pairs.append((x0, y0))
        rate, repeats = collision_statistic(pairs)
        determinism["collisionRate"] = rate if repeats else None
        determinism["collisionRepeats"] = repeats
        determinism["collisionDraws"] = len(pairs)
    all_cons = [asdict(c) for c in cons] + [
        {"name": "almostFactor", "value": max(best.errors), "threshold": exp.epsilon,
         "passes": best.passes, "stderr": max(best.stderrs)},
        {"name": "weakStarDrift", "value": ws.estimate, "threshold": drift_rhs + floor.estimate,
         "passes": drift_ok, "stderr": 0.0},
        {"name": "relation", "value": float(viol), "threshold": 0.0, "passes": viol == 0, "stderr": 0.0},
        {"name": "marginals", "value": float(marg["coordinates"]), "threshold": 0.0,
         "passes": marg["passes"], "stderr": 0.0},
    ]
    if "exact" in determinism:
        last = determinism["exact"][-1]
        all_cons.append({"name": "determinism", "value": last["pMatch"], "threshold": 1 - params.eta,
                         "passes": all(r["pMatch"] >= 1 - params.eta for r in determinism["exact"]),
                         "stderr": 0.0})
    return {
        "schema": 1,
        "params": asdict(params),
        "hGap": {"hMuFill": fe.h_mu_fill, "hNuFill": fe.h_nu_fill, "gap": fe.gap,
                 "lowerBound": fe.lower_bound, "flippedLowerBound": fe.flipped_lower_bound},
        "actionBlocks": {"count": sum(s.action_blocks for s in samples),
                         "resampledIntervals": sum(s.resampled_intervals for s in samples),
                         "resampledCoordinates": sum(s.resampled_coordinates for s in samples),
                         "coveredCoordinates": covered, "rEstimate": r_est},
        "determinism": determinism,
        "almostFactor": [asdict(t) for t in tests],
        "weakStar": {"estimate": ws.estimate, "terms": list(ws.terms), "truncationBound": ws.truncation_bound,
                     "imax": imax, "samplingFloor": floor.estimate, "driftBound": drift_rhs, "holds": drift_ok},
        "marginals": marg,
        "violations": viol,
        "constraints": all_cons,
        "search": log.stages,
        "passes": all(c["passes"] for c in all_cons),
    }
