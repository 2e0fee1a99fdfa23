"""Invariant suites run by ``monosinai verify``; each returns ``(ok, detail)``."""

from __future__ import annotations

import numpy as np

from .coupling import (
    Coupling,
    is_monotone,
    product_power,
    is_subordinate,
    marriage_refine,
    quantile_coupling,
    split_elements,
)
from .dist import Dist, cap_h_check, dominates


def random_dist(rng: np.random.Generator, n: int, zeros: bool = True) -> Dist:
    w = rng.exponential(size=n)
    if zeros and n > 1:
        w[rng.random(n) < 0.2] = 0.0
        if w.sum() == 0:
            w[rng.integers(n)] = 1.0
    return Dist.from_weights(w)


def random_coupling(rng: np.random.Generator, na: int, nb: int, density: float = 0.6) -> Coupling:
    mass = {}
    for a in range(na):
        for b in range(nb):
            if rng.random() < density:
                mass[(a, b)] = float(rng.exponential())
    if not mass:
        mass[(int(rng.integers(na)), int(rng.integers(nb)))] = 1.0
    return Coupling.from_mass(range(na), range(nb), mass, normalize=True)


def _marginals_close(a: Coupling, b: Coupling, tol: float) -> bool:
    ra, rb = a.row_marginal_dict(), b.row_marginal_dict()
    ca, cb = a.col_marginal_dict(), b.col_marginal_dict()
    return (all(abs(ra.get(k, 0) - rb.get(k, 0)) <= tol for k in set(ra) | set(rb))
            and all(abs(ca.get(k, 0) - cb.get(k, 0)) <= tol for k in set(ca) | set(cb)))


def suite_empty(trials, seed):
    return True, "nothing to check"


def suite_dist(trials, seed):
    rng = np.random.default_rng(seed)
    n_inst = trials or 1000
    for _ in range(n_inst):
        n = int(rng.integers(1, 9))
        p, q = random_dist(rng, n), random_dist(rng, n)
        c = quantile_coupling(p, q)
        pm, qm = c.marginals()
        if max(abs(a - b) for a, b in zip(pm.probs + qm.probs, p.probs + q.probs)) > 1e-12:
            return False, "quantile coupling marginals off"
        if dominates(p, q) and not is_monotone(c):
            return False, "quantile coupling not monotone under domination"
        if len(split_elements(c)) > n - 1:
            return False, "too many split rows"
        z = random_coupling(rng, n, n)
        e = next(iter(z.rows))
        if z.row_marginal_dict().get(e, 0) < 1 - 1e-9 and not cap_h_check(z, e).holds:
            return False, "conditioning entropy bounds fail"
    return True, f"{n_inst} instances"


def suite_coupling(trials, seed):
    rng = np.random.default_rng(seed)
    n_inst = trials or 10000
    for _ in range(n_inst):
        na, nb = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        alpha = random_coupling(rng, na, nb)
        bprime = [b for b in range(nb) if rng.random() < 0.5]
        beta = marriage_refine(alpha, bprime)
        if not is_subordinate(beta, alpha):
            return False, "refinement not subordinate"
        if not _marginals_close(alpha, beta, 1e-10):
            return False, "refinement changed marginals"
        if len(split_elements(beta, bprime)) > max(len(bprime) - 1, 0):
            return False, "refinement split bound fails"
    return True, f"{n_inst} instances"


def suite_star(trials, seed):
    from .star import independence_gaps, star_couple, usefulb_split_counts

    rng = np.random.default_rng(seed)
    n_inst = trials or 300
    for _ in range(n_inst):
        sizes = [int(rng.integers(1, 5)) for _ in range(4)]
        z1 = random_coupling(rng, sizes[0], sizes[1])
        z2 = random_coupling(rng, sizes[2], sizes[3])
        sj = star_couple(z1, z2)
        if max(independence_gaps(sj)) > 1e-10:
            return False, "independence statement fails"
        bound = len(z2.cols) - 1
        if any(v > bound for v in usefulb_split_counts(sj).values()):
            return False, "split count exceeds #F2 - 1"
        for got, want in ((sj.project_first(), z1.mass), (sj.project_second(), z2.mass)):
            if any(abs(got.get(k, 0.0) - v) > 1e-10 for k, v in want.items()):
                return False, "star-coupling projection differs from input"
    return True, f"{n_inst} instances"


def suite_process(trials, seed):
    from .process import MarkerConfig, build_block_joining, frozen_stats, sample_alternating

    rng = np.random.default_rng(seed)
    p, q = Dist([1 / 3, 1 / 3, 1 / 3]), Dist([0.6, 0.3, 0.1])
    c = quantile_coupling(p, q)
    length = trials or 200_000
    for k in (3, 4, 5):
        bj = build_block_joining(c, MarkerConfig(0, 1, k))
        ws = [sample_alternating(rng, bj, length) for _ in range(2)]
        if any(np.any(w.x < w.y) for w in ws):
            return False, f"monotonicity fails at k={k}"
        if not frozen_stats(ws, bj.cfg, p).passes:
            return False, f"frozen bound fails at k={k}"
    return True, f"k in 3..5, {length} coordinates"


def suite_factorlab(trials, seed):
    from .factorlab import Params, build_beta, exact_determinism, oracles_for
    from .process import MarkerConfig, build_block_joining

    p, q = Dist([0.5, 0.5]), Dist([0.9, 0.1])
    bj = build_block_joining(quantile_coupling(p, q), MarkerConfig(0, 1, 2))
    for n0 in (1, 2):
        _, no = oracles_for(bj, 0.1, n0)
        beta = build_beta(bj.Gamma, n0, no)
        if not _marginals_close(beta, product_power(bj.Gamma, n0), 1e-10):
            return False, "initial block changed marginals"
    params = Params(0.5, 0.05, 2, 2, 3, 1, 0.05, 0.1, 0.314 - 0.2)
    rows = exact_determinism(bj, params, 2)
    if not all(r["boundHolds"] for r in rows):
        return False, "non-desirable mass exceeds its bound"
    return True, "initial-block refinement and desirable bound"


SUITES = {
    "empty": suite_empty,
    "dist": suite_dist,
    "coupling": suite_coupling,
    "star": suite_star,
    "process": suite_process,
    "factorlab": suite_factorlab,
}
