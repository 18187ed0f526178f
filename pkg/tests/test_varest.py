import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

import oracles
from conftest import TINY_VALUES
from twostage_inference import designs as D
from twostage_inference import population as P
from twostage_inference import twostage as T
from twostage_inference import varest as V


def _oracle_outcomes(values, design):
    """(prob, TwoStageSample) pairs built from the brute-force oracle."""
    enum = D.enumerate_design(design.first)
    support = {tuple(int(i) for i in s): float(p) for s, p in enum.as_dict().items()}
    pi, _ = oracles.inclusion(support, len(values))
    second_n = [d.n for d in design.second]
    for p, s1, ssus in oracles.two_stage_outcomes(values, support, second_n):
        psus = np.array(s1, dtype=int)
        sample = T.TwoStageSample(
            psus,
            np.array([pi[i] for i in s1]),
            tuple(np.array(c, dtype=int) for c in ssus),
            tuple(np.full(len(c), second_n[i] / len(values[i])) for i, c in zip(s1, ssus)),
        )
        yield p, sample


def _oracle_parts(values, design):
    enum = D.enumerate_design(design.first)
    support = {tuple(int(i) for i in s): float(p) for s, p in enum.as_dict().items()}
    second_n = [d.n for d in design.second]
    _, total = oracles.exact_mean_var(values, support, second_n)
    v3 = sum(oracles.srswor_within_variance(v, n) for v, n in zip(values, second_n))
    return total, total - v3, v3


def _expect(values, design, fn):
    return sum(p * np.asarray(fn(s), dtype=float) for p, s in _oracle_outcomes(values, design))


@pytest.mark.parametrize("form", ["HT", "YG"])
def test_term_by_term_unbiased_tiny(tiny_pop, tiny_design, form):
    incl = tiny_design.first_stage_table()
    second = tiny_design.second_tables
    fn = V.vhat_ht if form == "HT" else V.vhat_yg

    def parts(s):
        v = fn(s, tiny_pop, incl, second)
        return [v.a_term, v.b_term, v.total]

    a, b, tot = _expect(TINY_VALUES, tiny_design, parts)
    total, v12, v3 = _oracle_parts(TINY_VALUES, tiny_design)
    assert tot == pytest.approx(total, rel=1e-9)
    assert a == pytest.approx(v12, rel=1e-9)
    assert b == pytest.approx(v3, rel=1e-9)


small_values = st.lists(
    st.lists(st.floats(-20, 20, allow_nan=False), min_size=2, max_size=3), min_size=3, max_size=5
)


@given(small_values, st.integers(0, 2**32 - 1))
def test_unbiased_random_rejective(values, seed):
    pop = P.build_population(values)
    rng = np.random.default_rng(seed)
    n_I = int(rng.integers(2, pop.N_I))
    pi = D.pps_probabilities(rng.uniform(1, 4, pop.N_I), n_I)
    # a take-all PSU leaves pairs of the others with zero joint probability
    assume(pi.max() < 1.0)
    design = T.TwoStageDesign(D.rejective(target_pi=pi), T.srswor_second_stage(pop, 2))
    incl = design.first_stage_table()
    second = design.second_tables

    def parts(s):
        h = V.vhat_ht(s, pop, incl, second)
        y = V.vhat_yg(s, pop, incl, second)
        return [h.a_term, h.b_term, y.a_term, y.b_term]

    ha, hb, ya, yb = _expect(values, design, parts)
    total, v12, v3 = _oracle_parts(values, design)
    scale = max(1.0, total, abs(v12), v3)
    for got, want in ((ha, v12), (ya, v12), (hb, v3), (yb, v3)):
        assert got == pytest.approx(want, rel=1e-8, abs=1e-9 * scale)


def test_census_second_stage_b_zero(tiny_pop):
    design = T.TwoStageDesign(D.srswor(4, 2), T.srswor_second_stage(tiny_pop, 3))
    incl = design.first_stage_table()
    dec = T.exact_variance(tiny_pop, design)
    a = 0.0
    for p, s in T.enumerate_two_stage(tiny_pop, design):
        v = V.vhat_ht(s, tiny_pop, incl, design.second_tables)
        assert v.b_term == 0.0
        a += p * v.a_term
    assert a == pytest.approx(dec.v1, rel=1e-12)


def test_census_everything_zero(tiny_pop, rng):
    design = T.census_design(tiny_pop)
    s = T.draw_two_stage(tiny_pop, design, rng)
    incl = design.first_stage_table()
    for fn in (V.vhat_ht, V.vhat_yg):
        v = fn(s, tiny_pop, incl, design.second_tables)
        assert v.total == pytest.approx(0.0, abs=1e-9)
    h = V.vhat_hajek(s, tiny_pop, design.second_tables)
    assert h.truncated and h.a_term == 0.0 and h.b_term == 0.0


def test_hajek_srswor_exact_with_factor():
    # SRSWOR first stage, census second stage: the corrected Hajek A-term is
    # the textbook unbiased estimator, so its expectation equals V1 exactly
    values = [[1.0], [4.0], [2.5], [9.0], [3.0], [7.0]]
    pop = P.build_population(values)
    design = T.TwoStageDesign(D.srswor(6, 3), T.srswor_second_stage(pop, 1))
    v1 = T.exact_variance(pop, design).v1
    t = np.array([v[0] for v in values])
    assert v1 == pytest.approx(36 * (1 / 3 - 1 / 6) * t.var(ddof=1), rel=1e-12)
    with_f = _expect(values, design, lambda s: V.simplified("HAJ_A", s, pop, trunc_coeff=0.1).total)
    without = _expect(
        values, design, lambda s: V.simplified("HAJ_A", s, pop, trunc_coeff=0.1, small_sample_factor=False).total
    )
    assert with_f == pytest.approx(v1, rel=1e-12)
    assert without == pytest.approx(v1 * 2 / 3, rel=1e-12)


@given(
    st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=12),
    st.floats(-1e3, 1e3, allow_nan=False),
    st.integers(0, 10**6),
)
def test_hajek_shift_invariance(z, c, seed):
    z = np.array(z)
    pi = np.random.default_rng(seed).uniform(0.01, 0.6, z.size)
    a0, t0 = V.hajek_a_term(z, pi)
    a1, t1 = V.hajek_a_term(z + c, pi)
    assert t0 == t1
    scale = max(1.0, float(np.sum((1 - pi) * (np.abs(z) + abs(c)) ** 2)))
    assert a1 == pytest.approx(a0, abs=1e-9 * scale)
    assert a0 >= 0


def test_hajek_equal_values_zero():
    a, t = V.hajek_a_term(np.full(5, 3.7), np.full(5, 0.1))
    assert a == pytest.approx(0.0, abs=1e-12) and not t


def test_hajek_hand_value():
    z = np.array([10.0, 20.0, 40.0])
    pi = np.array([0.2, 0.5, 0.6])
    c = 1 - pi
    r = np.sum(c * z) / c.sum()
    want = 1.5 * np.sum(c * (z - r) ** 2)
    a, t = V.hajek_a_term(z, pi)
    assert a == pytest.approx(want, rel=1e-14) and not t


def test_hajek_truncation_threshold():
    z = np.array([1.0, 5.0, 2.0, 8.0])
    pi = np.full(4, 0.76)  # d_hat = 0.96 < 0.25 * 4
    a, t = V.hajek_a_term(z, pi)
    assert t and a == 0.0
    a, t = V.hajek_a_term(z, np.full(4, 0.75))  # d_hat = 1.0, not truncated
    assert not t and a > 0
    a, t = V.hajek_a_term(z, np.full(4, 0.75), trunc_coeff=0.3)
    assert t


def test_hajek_vectorized_rows():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(7, 5))
    pi = rng.uniform(0.05, 0.5, size=(7, 5))
    a, t = V.hajek_a_term(z, pi)
    for r in range(7):
        ar, tr = V.hajek_a_term(z[r], pi[r])
        assert a[r] == pytest.approx(ar, rel=1e-14) and t[r] == tr


def test_simplified_equals_a_term(tiny_pop, tiny_design, rng):
    incl = tiny_design.first_stage_table()
    s = T.draw_two_stage(tiny_pop, tiny_design, rng)
    for kind, full in (("HT_A", V.vhat_ht), ("YG_A", V.vhat_yg)):
        v = V.simplified(kind, s, tiny_pop, incl)
        assert v.total == v.a_term == full(s, tiny_pop, incl, tiny_design.second_tables).a_term
    h = V.simplified("HAJ_A", s, tiny_pop)
    assert h.total == V.vhat_hajek(s, tiny_pop, tiny_design.second_tables).a_term
    with pytest.raises(V.EstimatorError):
        V.simplified("HT_A", s, tiny_pop)
    with pytest.raises(V.EstimatorError):
        V.simplified("XX", s, tiny_pop, incl)


def test_yg_nonnegative_srswor():
    rng = np.random.default_rng(5)
    pop = P.build_population(rng.normal(size=(6, 3)).tolist())
    design = T.TwoStageDesign(D.srswor(6, 3), T.srswor_second_stage(pop, 2))
    incl = design.first_stage_table()
    for _ in range(50):
        s = T.draw_two_stage(pop, design, rng)
        assert V.yg_a_term(s, pop, incl) >= 0


def test_yg_equal_expanded_values_zero():
    pop = P.build_population([[2.0, 2.0]] * 4)
    design = T.TwoStageDesign(D.srswor(4, 2), T.srswor_second_stage(pop, 1))
    s = T.draw_two_stage(pop, design, np.random.default_rng(1))
    assert V.yg_a_term(s, pop, design.first_stage_table()) == pytest.approx(0.0, abs=1e-12)


def test_yg_rejects_random_size():
    pop = P.build_population(TINY_VALUES)
    design = T.TwoStageDesign(D.poisson([0.5, 0.6, 0.7, 0.8]), T.srswor_second_stage(pop, 2))
    incl = design.first_stage_table()
    rng = np.random.default_rng(2)
    s = T.draw_two_stage(pop, design, rng)
    with pytest.raises(V.EstimatorError, match="fixed-size"):
        V.vhat_yg(s, pop, incl, design.second_tables)
    out = V.estimate_all(s, pop, design)
    assert isinstance(out["HT"], V.VarEstimate)
    assert isinstance(out["YG"], str) and out["YG"].startswith("error:")


def test_ht_poisson_unbiased():
    pop = P.build_population(TINY_VALUES)
    design = T.TwoStageDesign(D.poisson([0.5, 0.6, 0.7, 0.8]), T.srswor_second_stage(pop, 2))
    incl = design.first_stage_table()
    dec = T.exact_variance(pop, design)
    e = sum(p * V.vhat_ht(s, pop, incl, design.second_tables).total for p, s in T.enumerate_two_stage(pop, design))
    assert e == pytest.approx(dec.total, rel=1e-9)


def test_zero_joint_probability_names_pair():
    pop = P.build_population([[1.0, 2.0]] * 3)
    design = T.TwoStageDesign(D.srswor(3, 2), T.srswor_second_stage(pop, 2))
    second = np.array([[2 / 3, 0.0, 1 / 3], [0.0, 2 / 3, 1 / 3], [1 / 3, 1 / 3, 2 / 3]])
    incl = D.InclusionTable(np.full(3, 2 / 3), second)
    s = T.TwoStageSample(np.array([0, 1]), np.full(2, 2 / 3), (np.arange(2),) * 2, (np.ones(2),) * 2)
    with pytest.raises(V.EstimatorError, match="PSUs 0 and 1"):
        V.vhat_ht(s, pop, incl, design.second_tables)


def test_estimate_all_large_design_reports_errors():
    pop = P.generate_sim_population(P.SimPopConfig(N_I=60, N_0=6, seed=1))
    design = T.TwoStageDesign(
        D.rejective(target_pi=D.pps_probabilities(pop.sizes, 10)), T.srswor_second_stage(pop, 3)
    )
    s = T.draw_two_stage(pop, design, np.random.default_rng(3))
    out = V.estimate_all(s, pop, design)
    assert isinstance(out["HAJ"], V.VarEstimate) and isinstance(out["HAJ_A"], V.VarEstimate)
    for k in ("HT", "YG", "HT_A", "YG_A"):
        assert isinstance(out[k], str)


def test_ci_half_width():
    ci = V.confidence_interval(10.0, 4.0, 0.025)
    assert (ci.upper - ci.lower) / 2 == pytest.approx(1.959964 * 2, abs=1e-6)
    assert ci.covers(10.0) and ci.lower <= ci.estimate <= ci.upper
    d = V.confidence_interval(3.0, 0.0)
    assert d.lower == d.upper == 3.0


@pytest.mark.parametrize("p,z", [(0.975, 1.959963984540054), (0.995, 2.5758293035489004), (0.5, 0.0), (0.1, -1.2815515655446004)])
def test_normal_quantile(p, z):
    assert V.normal_quantile(p) == pytest.approx(z, abs=1e-12)


@pytest.mark.parametrize("args", [(1.0, -1.0, 0.025), (1.0, 1.0, 0.0), (1.0, 1.0, 0.5)])
def test_ci_errors(args):
    with pytest.raises(V.EstimatorError):
        V.confidence_interval(*args)


# stratified proportions


def _strat_population():
    rng = np.random.default_rng(17)
    sizes = [3, 4, 3, 4, 3, 3, 4, 3]
    pop = P.build_population([rng.normal(size=n).tolist() for n in sizes])
    ind = P.build_population([(rng.uniform(size=n) < 0.2 + 0.08 * i).astype(float).tolist() for i, n in enumerate(sizes)])
    strata = tuple(T.Stratum(np.array([2 * h, 2 * h + 1]), D.srswor(2, 1)) for h in range(4))
    design = T.TwoStageDesign(None, T.srswor_second_stage(pop, 2), strata)
    return pop, ind, design


def test_stratified_constant_indicator():
    pop, ind, design = _strat_population()
    ones = P.build_population([[1.0] * n for n in pop.sizes])
    s = T.draw_two_stage(pop, design, np.random.default_rng(4))
    r = V.stratified_proportion(s, pop, design, ones)
    assert r.p_hat == pytest.approx(1.0, rel=1e-14)
    assert r.var_haj == pytest.approx(0.0, abs=1e-20) and r.var_haj_a == pytest.approx(0.0, abs=1e-20)
    assert not r.out_of_range


def test_stratified_census():
    pop, ind, _ = _strat_population()
    design = T.census_design(pop)
    s = T.draw_two_stage(pop, design, np.random.default_rng(4))
    r = V.stratified_proportion(s, pop, design, ind)
    assert r.p_hat == pytest.approx(ind.total / ind.N, rel=1e-14)
    assert r.var_haj == pytest.approx(0.0, abs=1e-20)


def test_stratified_nearly_unbiased():
    pop, ind, design = _strat_population()
    p_c = ind.total / ind.N
    rng = np.random.default_rng(99)
    R = 50_000
    est = np.empty(R)
    for r in range(R):
        s = T.draw_two_stage(pop, design, rng)
        est[r] = V.stratified_proportion(s, pop, design, ind).p_hat
    assert np.all((est >= -0.05) & (est <= 1.05))
    assert abs(est.mean() - p_c) <= 3 * est.std(ddof=1) / np.sqrt(R)


def test_stratified_requires_srswor_and_nonempty_strata():
    pop, ind, design = _strat_population()
    s = T.draw_two_stage(pop, design, np.random.default_rng(4))
    keep = s.psus < 6
    thin = T.TwoStageSample(
        s.psus[keep], s.pi_I[keep], tuple(x for x, k in zip(s.ssus, keep) if k), tuple(x for x, k in zip(s.pi_k, keep) if k)
    )
    with pytest.raises(V.EstimatorError, match="stratum 3"):
        V.stratified_proportion(thin, pop, design, ind)
    pois = T.TwoStageDesign(None, tuple(D.poisson([0.5] * n) for n in pop.sizes), design.strata)
    with pytest.raises(V.EstimatorError):
        V.stratified_proportion(s, pop, pois, ind)


def test_within_srswor_estimate_edge_cases():
    assert V.srswor_within_ht(np.array([5.0]), 1, 1) == 0.0
    with pytest.raises(V.EstimatorError):
        V.srswor_within_ht(np.array([5.0]), 3, 1)
    v = V.srswor_within_ht(np.array([1.0, 3.0]), 4, 2)
    assert v == pytest.approx(16 * (1 / 2 - 1 / 4) * 2.0)
