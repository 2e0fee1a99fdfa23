import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from monosinai.coupling import Coupling, as_block, product_power, quantile_coupling
from monosinai.dist import Dist
from monosinai.star import (
    StarFiller,
    independence_gaps,
    iterative_star,
    star_couple,
    star_sample,
    usefulb_split_counts,
)


def rand_coupling(rng, na, nb, density=0.6):
    mass = {(a, b): float(rng.exponential()) for a in range(na) for b in range(nb)
            if rng.random() < density}
    if not mass:
        mass[(0, 0)] = 1.0
    return Coupling.from_mass(range(na), range(nb), mass, normalize=True)


def check_star(z1, z2):
    sj = star_couple(z1, z2)
    for got, want in ((sj.project_first(), z1.mass), (sj.project_second(), z2.mass)):
        assert set(got) == set(want)
        for k, v in want.items():
            assert got[k] == pytest.approx(v, abs=1e-10)
    assert max(independence_gaps(sj)) <= 1e-10
    assert all(v <= len(z2.cols) - 1 for v in usefulb_split_counts(sj).values())


def test_star_all_alphabet_sizes():
    rng = np.random.default_rng(7)
    for sizes in itertools.product(range(1, 5), repeat=4):
        for _ in range(3):
            check_star(rand_coupling(rng, *sizes[:2]), rand_coupling(rng, *sizes[2:]))


def test_star_all_two_by_two_supports():
    pats = [p for p in itertools.product((0, 1), repeat=4) if any(p)]
    cs = [Coupling.from_mass(range(2), range(2),
                             {(i // 2, i % 2): 1.0 for i, v in enumerate(p) if v}, normalize=True)
          for p in pats]
    for z1, z2 in itertools.product(cs, repeat=2):
        check_star(z1, z2)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_star_properties(a, b, c, d, seed):
    rng = np.random.default_rng(seed)
    check_star(rand_coupling(rng, a, b), rand_coupling(rng, c, d))


def test_star_hand_value():
    # Y1' and X2' independent; with one shared uniform the X's and Y's are comonotone.
    z1 = Coupling.diagonal(Dist([0.5, 0.5]))
    z2 = quantile_coupling(Dist([0.5, 0.5]), Dist([0.5, 0.5]))
    sj = star_couple(z1, z2)
    assert sj.mass == pytest.approx({(0, 0, 0, 0): 0.25, (0, 0, 1, 1): 0.25,
                                     (1, 1, 0, 0): 0.25, (1, 1, 1, 1): 0.25})


def within_4se(counts, law, n):
    law = {tuple(as_block(part) for part in key): v for key, v in law.items()}
    for k in set(counts) | set(law):
        p = law.get(k, 0.0)
        se = max(np.sqrt(p * (1 - p) / n), 1.0 / n)
        assert abs(counts.get(k, 0) / n - p) <= 4 * se, (k, counts.get(k, 0) / n, p)


def test_star_sample_matches_exact():
    rng = np.random.default_rng(11)
    z1 = rand_coupling(rng, 3, 3, density=0.7)
    z2 = rand_coupling(rng, 3, 4, density=0.7)
    n = 1_000_000
    counts = Counter(star_sample(rng, z1, z2, n))
    law = star_couple(z1, z2).mass
    for k in set(counts) | set(law):
        p = law.get(k, 0.0)
        se = max(np.sqrt(p * (1 - p) / n), 1.0 / n)
        assert abs(counts.get(k, 0) / n - p) <= 4 * se


def _flat(x0, xs):
    return as_block(x0) + tuple(s for b in xs for s in as_block(b))


@pytest.mark.parametrize("n", [0, 1, 2, 3])
def test_filler_matches_iterative_star(n):
    rng = np.random.default_rng(100 + n)
    gamma = rand_coupling(rng, 3, 3, density=0.7)
    beta = rand_coupling(rng, 2, 3, density=0.8)
    exact = iterative_star(beta, [gamma] * n)
    sampler = StarFiller(gamma, beta)
    draws = 100_000
    counts = Counter()
    for _ in range(draws):
        x0, xs, y0, ys = sampler.sample(rng, n)
        counts[(_flat(x0, xs), _flat(y0, ys))] += 1
    within_4se(counts, exact.mass, draws)


def test_filler_product_base_matches_iterative_star():
    rng = np.random.default_rng(5)
    gamma = quantile_coupling(Dist([0.5, 0.3, 0.2]), Dist([0.7, 0.2, 0.1]))
    exact = iterative_star(product_power(gamma, 2), [gamma] * 2)
    sampler = StarFiller(gamma, None, n0=2)
    draws = 100_000
    counts = Counter()
    for _ in range(draws):
        x0, xs, y0, ys = sampler.sample(rng, 2)
        counts[(_flat(x0, xs), _flat(y0, ys))] += 1
    within_4se(counts, exact.mass, draws)


def test_filler_long_blocks_keep_marginals():
    # long runs drive cells below floating-point width; marginals must survive
    rng = np.random.default_rng(9)
    p, q = Dist([1 / 3] * 3), Dist([0.6, 0.3, 0.1])
    gamma = quantile_coupling(p, q)
    sampler = StarFiller(gamma, None, n0=1)
    xs_all, ys_all = [], []
    for _ in range(300):
        x0, xs, y0, ys = sampler.sample(rng, 400)
        assert all(a >= b for a, b in zip(xs, ys))
        xs_all += xs
        ys_all += ys
    n = len(xs_all)
    for arr, law in ((xs_all, p), (ys_all, q)):
        freq = np.bincount(arr, minlength=3) / n
        assert np.all(np.abs(freq - law.as_array()) < 0.01)
