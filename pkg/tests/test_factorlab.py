import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from monosinai.coupling import Coupling, is_subordinate, product_power, quantile_coupling, split_elements
from monosinai.dist import Dist, DistributionError
from monosinai.factorlab import (
    GoodSetOracle,
    Params,
    SearchExhausted,
    SearchSettings,
    action_statistics,
    almost_factor_test,
    block_index,
    build_almost_factor,
    build_beta,
    choose_parameters,
    chunks,
    collision_statistic,
    completely_good,
    desirable_bound,
    exact_determinism,
    extract_psi,
    majority_predictor,
    nu_good_initial,
    oracles_for,
    pile_n0,
    pile_value,
    smb_coverage,
)
from monosinai.process import MarkerConfig, ProcessWindow, build_block_joining, sample_alternating
from monosinai.star import iterative_star

P3 = Dist([1 / 3, 1 / 3, 1 / 3])
Q3 = Dist([0.6, 0.3, 0.1])


@pytest.fixture(scope="module")
def small_bj():
    return build_block_joining(quantile_coupling(Dist([0.5, 0.5]), Dist([0.9, 0.1])), MarkerConfig(0, 1, 2))


def test_params_validation():
    Params(0.3, 0.03, 4, 3, 101, 1, 0.03, 0.1, 0.1)
    with pytest.raises(ValueError):
        Params(0.3, 0.05, 4, 3, 101, 1, 0.03, 0.1, 0.1)
    with pytest.raises(ValueError):
        Params(0.3, 0.03, 4, 3, 3, 1, 0.03, 0.1, 0.1)
    with pytest.raises(ValueError):
        Params(0.3, 0.03, 4, 3, 101, 1, 0.03, 0.1, 0.0)


def test_block_helpers():
    assert block_index((1, 0, 2), 3) == 11
    assert chunks((1, 2, 3, 4), 2) == [(1, 2), (3, 4)]
    with pytest.raises(ValueError):
        chunks((1, 2, 3), 2)


def test_oracle_uniform_measure_is_always_good():
    o_up = GoodSetOracle(np.full(4, 0.25), 0.01, "upper", 2, 2, n0=1)
    o_lo = GoodSetOracle(np.full(4, 0.25), 0.01, "lower", 2, 2, n0=1)
    seq = [(0, 1), (1, 1), (0, 0)]
    assert completely_good(o_up, seq) and completely_good(o_lo, seq)
    with pytest.raises(ValueError):
        GoodSetOracle(np.full(3, 1 / 3), 0.1, "upper", 2, 2)
    with pytest.raises(ValueError):
        GoodSetOracle(np.full(4, 0.25), 0.1, "sideways", 2, 2)
    with pytest.raises(ValueError):
        completely_good(GoodSetOracle(np.full(4, 0.25), 0.1, "upper", 2, 2, n0=3), seq[:2])


def brute_coverage(oracle, horizon):
    total = 0.0
    blocks = list(itertools.product(range(oracle.n), repeat=oracle.k))
    for seq in itertools.product(blocks, repeat=horizon):
        m = math.prod(oracle.blockMeasure[block_index(b, oracle.n)] for b in seq)
        if m > 0 and all(oracle.prefix_flags(list(seq))):
            total += m
    return total


@given(st.lists(st.integers(0, 9), min_size=4, max_size=4), st.sampled_from(["upper", "lower"]),
       st.floats(0.01, 0.5), st.integers(1, 3), st.integers(0, 2))
def test_coverage_exact_matches_brute_force(w, direction, eps, n0, extra):
    if sum(w) == 0:
        return
    m = np.array(w, dtype=float) / sum(w)
    o = GoodSetOracle(m, eps, direction, 2, 2, n0)
    cov = smb_coverage(o, n0 + extra)
    assert cov.exact
    assert cov.value == pytest.approx(brute_coverage(o, n0 + extra), abs=1e-12)


def test_coverage_monte_carlo_agrees(rng):
    m = np.array([0.4, 0.3, 0.2, 0.1])
    o = GoodSetOracle(m, 0.15, "upper", 2, 2, n0=3)
    exact = smb_coverage(o, 8)
    import monosinai.factorlab as fl
    saved = fl.EXACT_CELLS
    fl.EXACT_CELLS = 1
    try:
        mc = smb_coverage(o, 8, rng, 40_000)
    finally:
        fl.EXACT_CELLS = saved
    assert not mc.exact
    assert abs(mc.value - exact.value) <= 4 * mc.stderr + 1e-9
    with pytest.raises(ValueError):
        smb_coverage(o, 2)


def test_build_beta_postconditions(small_bj):
    for n0 in (1, 2, 3):
        _, no = oracles_for(small_bj, 0.1, n0)
        base = product_power(small_bj.Gamma, n0)
        beta = build_beta(small_bj.Gamma, n0, no)
        bp = nu_good_initial(base, no)
        assert is_subordinate(beta, base)
        assert len(split_elements(beta, bp)) <= max(len(bp) - 1, 0)
        for a, b in ((beta.row_marginal_dict(), base.row_marginal_dict()),
                     (beta.col_marginal_dict(), base.col_marginal_dict())):
            assert all(abs(a.get(k, 0) - b[k]) < 1e-10 for k in b)


def brute_desirable(W, mo, no):
    k = mo.k
    good = 0.0
    for x in W.rows:
        if not all(mo.prefix_flags(chunks(x, k))):
            continue
        partners = [y for (xx, y), m in W.mass.items() if xx == x and no.prefix_flags(chunks(y, k))[0]]
        if len(partners) == 1 and all(no.prefix_flags(chunks(partners[0], k))):
            good += sum(m for (xx, _), m in W.mass.items() if xx == x)
    return good


@pytest.mark.parametrize("n0,j", [(1, 0), (1, 2), (2, 1), (3, 1)])
def test_extract_psi_against_brute_force(small_bj, n0, j):
    mo, no = oracles_for(small_bj, 0.1, n0)
    W = iterative_star(build_beta(small_bj.Gamma, n0, no), [small_bj.Gamma] * j)
    ps = extract_psi(W, (mo, no))
    assert ps.j == j
    assert ps.desirable_mass == pytest.approx(brute_desirable(W, mo, no), abs=1e-12)
    assert ps((9,) * 99) == ps.default
    for x, y in ps.table.items():
        assert all(a >= b for a, b in zip(x, y))


def test_desirable_bound_holds_exactly(small_bj):
    for n0, smb in ((1, 0.05), (2, 0.1), (2, 0.15), (3, 0.1)):
        params = Params(0.5, 0.05, 2, n0, n0 * 20 + 1, 1, 0.05, smb, 0.314 - 2 * smb)
        for row in exact_determinism(small_bj, params, 2 if n0 < 3 else 1):
            assert row["boundHolds"], row
            assert row["notDesirable"] <= row["bound"] + 1e-12


def test_pile_n0_is_least():
    for n, k, d, eta in ((3, 5, 0.17, 0.03), (2, 2, 0.1, 0.05), (4, 3, 0.5, 0.01)):
        n0 = pile_n0(n, k, d, eta)
        assert pile_value(n, k, d, n0) < eta / 4
        assert n0 == 1 or pile_value(n, k, d, n0 - 1) >= eta / 4


def test_majority_predictor_ties_lowest():
    codes = np.array([5, 5, 7, 7, 7])
    y0 = np.array([2, 1, 0, 2, 2])
    assert majority_predictor(codes, y0, 3) == {5: 1, 7: 2}


def test_almost_factor_test_separates(rng):
    x = rng.integers(0, 3, size=40_000)
    det = [ProcessWindow(x[i::2], np.minimum(x[i::2], 1)) for i in range(2)]
    res = almost_factor_test(det, 0, 0.05)
    assert res.passes and max(res.errors) == 0.0
    noise = [ProcessWindow(x[i::2], rng.integers(0, 3, size=20_000)) for i in range(2)]
    assert not almost_factor_test(noise, 1, 0.2).passes
    with pytest.raises(ValueError):
        almost_factor_test(det[:1], 0, 0.1)


def test_collision_statistic():
    assert collision_statistic([(1, 1), (2, 2)]) == (0.0, 0)
    assert collision_statistic([(1, 1), (1, 2), (3, 0), (3, 0)]) == (0.5, 2)


def test_almost_factor_window_is_valid(rng):
    bj = build_block_joining(quantile_coupling(P3, Q3), MarkerConfig(0, 1, 4))
    params = Params(0.3, 0.03, 4, 3, 101, 1, 0.03, 0.2, 0.1)
    s = build_almost_factor(bj, params, rng, 300_000)
    assert s.action_blocks > 0 and s.violations == 0
    assert np.all(s.window.x >= s.window.y)
    for arr, law in ((s.window.x, P3), (s.window.y, Q3)):
        freq = np.bincount(arr, minlength=3) / len(arr)
        assert np.all(np.abs(freq - law.as_array()) < 0.01)
    with pytest.raises(ValueError):
        build_almost_factor(bj, Params(0.3, 0.03, 5, 3, 101, 1, 0.03, 0.2, 0.1), rng, 1000)


def test_action_statistics_ranges(rng):
    bj = build_block_joining(quantile_coupling(P3, Q3), MarkerConfig(0, 1, 4))
    xs = [sample_alternating(rng, bj, 200_000).x for _ in range(3)]
    st_ = action_statistics(xs, bj.cfg, 1, 3, 101)
    assert 0 <= st_["outside"] <= 1 and 0 <= st_["r"] <= 1
    assert st_["coordinates"] > 0
    empty = action_statistics([np.ones(50, dtype=np.int64)], bj.cfg, 1, 3, 101)
    assert empty["outside"] == 1.0


def test_choose_parameters_preconditions_and_exhaustion():
    seed = quantile_coupling(Dist([0.5, 0.5]), Dist([0.9, 0.1]))
    with pytest.raises(DistributionError):
        choose_parameters(quantile_coupling(Dist([0.9, 0.1]), Dist([0.9, 0.1])), MarkerConfig(0, 1, 2), 0.3)
    with pytest.raises(ValueError):
        choose_parameters(seed, MarkerConfig(0, 1, 2), 1.5)
    settings = SearchSettings(k_range=(2, 2), n0_max=3, window=20_000, windows=2, exact=True)
    with pytest.raises(SearchExhausted) as info:
        choose_parameters(seed, MarkerConfig(0, 1, 2), 0.3, settings)
    assert info.value.constraint
