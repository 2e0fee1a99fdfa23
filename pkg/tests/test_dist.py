import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from monosinai.coupling import Coupling
from monosinai.dist import (
    Dist,
    DistributionError,
    Relation,
    binary_entropy,
    cap_h_check,
    conditioned_pair,
    dominates,
    entropy,
    r_dominates,
)

from conftest import dists


def lp_feasible(p, q, pairs):
    """Independent oracle: is there a coupling of p and q supported on pairs?"""
    n = p.n
    idx = sorted(pairs)
    if not idx:
        return False
    a_eq = np.zeros((2 * n, len(idx)))
    for j, (a, b) in enumerate(idx):
        a_eq[a, j] = 1
        a_eq[n + b, j] = 1
    b_eq = np.concatenate([p.as_array(), q.as_array()])
    res = linprog(np.zeros(len(idx)), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return res.status == 0


def test_rejects_bad_vectors():
    for bad in ([], [0.5, 0.6], [-0.1, 1.1], [float("nan"), 1.0]):
        with pytest.raises(DistributionError):
            Dist(bad)


def test_renormalises_within_tolerance():
    d = Dist([0.5 + 4e-13, 0.5])
    assert math.fsum(d.probs) == pytest.approx(1.0, abs=1e-15)


def test_relation_bounds_checked():
    with pytest.raises(DistributionError):
        Relation(2, [(0, 2)])


def test_entropy_values():
    assert entropy(Dist.uniform(4)) == pytest.approx(math.log(4))
    assert entropy(Dist.point(3, 1)) == 0.0
    assert binary_entropy(0.5) == pytest.approx(math.log(2))
    with pytest.raises(DistributionError):
        binary_entropy(1.5)


def test_dominance_small_cases():
    assert dominates(Dist([1 / 3] * 3), Dist([0.6, 0.3, 0.1]))
    assert not dominates(Dist([0.6, 0.3, 0.1]), Dist([1 / 3] * 3))
    with pytest.raises(DistributionError):
        dominates(Dist([1.0]), Dist([0.5, 0.5]))


@given(dists(max_n=6), dists(max_n=6))
def test_dominates_agrees_with_lp(p, q):
    if p.n != q.n:
        return
    pairs = {(a, b) for a in range(p.n) for b in range(p.n) if a >= b}
    assert dominates(p, q) == lp_feasible(p, q, pairs)


@given(st.integers(2, 5).flatmap(lambda n: st.tuples(
    dists(n=n), dists(n=n),
    st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=n * n))))
def test_r_dominates_agrees_with_lp(args):
    p, q, pairs = args
    c = r_dominates(p, q, Relation(p.n, pairs))
    assert (c is not None) == lp_feasible(p, q, pairs)
    if c is not None:
        assert set(c.mass) <= pairs
        pm, qm = c.marginals()
        assert np.allclose(pm.as_array(), p.as_array(), atol=1e-9)
        assert np.allclose(qm.as_array(), q.as_array(), atol=1e-9)


@given(dists(n=3), dists(n=3))
def test_monotone_relation_matches_dominance(p, q):
    assert (r_dominates(p, q, Relation.monotone(3)) is not None) == dominates(p, q)


def test_conditioning_null_event():
    z = Coupling.diagonal(Dist([1.0, 0.0]))
    with pytest.raises(DistributionError):
        conditioned_pair(z, 0)


def test_conditioned_pair_hand_value():
    z = Coupling.from_mass(range(2), range(2), {(0, 0): 0.5, (1, 0): 0.25, (1, 1): 0.25})
    xt, yt = conditioned_pair(z, 0)
    assert xt.probs == pytest.approx((0.0, 1.0))
    assert yt.probs == pytest.approx((0.5, 0.5))


@st.composite
def couplings(draw, max_n=4):
    na, nb = draw(st.integers(1, max_n)), draw(st.integers(1, max_n))
    w = draw(st.lists(st.integers(0, 9), min_size=na * nb, max_size=na * nb))
    if sum(w) == 0:
        w[0] = 1
    mass = {(i // nb, i % nb): float(v) for i, v in enumerate(w) if v}
    return Coupling.from_mass(range(na), range(nb), mass, normalize=True)


@given(couplings(), st.data())
def test_cap_h_inequalities(z, data):
    e = data.draw(st.sampled_from(z.rows))
    if z.row_marginal_dict().get(e, 0.0) >= 1 - 1e-12:
        return
    res = cap_h_check(z, e)
    assert res.hXt >= res.lower - 1e-9
    assert res.hYt <= res.upper + 1e-9
