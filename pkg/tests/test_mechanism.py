import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import stats

from conftest import small_problem
from qdplasso.dataset import NormMode
from qdplasso.errors import GateAbort, MechanismFailure
from qdplasso.fw import AlphaVector, lipschitz_bound
from qdplasso.mechanism import (
    PrivacyParams,
    acceptance_probability,
    calibrate_lambda,
    choose_T,
    default_m_cap,
    examination_gate,
    fit_qdp,
    index_distribution,
    require_gate,
    sample_index,
    sample_index_exact,
)
from qdplasso.oracles import OracleConfig, QueryLedger


def params(lam, l1, m_cap=10_000):
    return PrivacyParams(1.0, 0.1, 1, lam, l1, 0.0, m_cap)


def test_choose_T_examples():
    assert choose_T(1e-6, 0.1, 10, 1.0) == 1
    assert choose_T(1.0, math.exp(-1), 1000, 1.0) == 100
    base = 1.0**(2 / 3) * (500 * 0.4) ** (2 / 3) / math.log(1e5) ** (1 / 3)
    assert choose_T(0.4, 1e-5, 500, 1.0) == round(base)
    assert choose_T(0.8, 1e-5, 500, 1.0) == round(base * 2 ** (2 / 3))
    for bad in (1.0, 0.0, 1.5):
        with pytest.raises(ValueError):
            choose_T(1.0, bad, 10, 1.0)


def test_calibrate_lambda_examples():
    assert calibrate_lambda(1.0, math.exp(-1), 8, 32) == pytest.approx(1.0, abs=1e-12)
    assert calibrate_lambda(0.3, 1e-5, 7, 200) == pytest.approx(calibrate_lambda(0.3, 1e-5, 7, 100) / 2)
    lam = calibrate_lambda(0.7, 1e-4, 13, 321)
    assert lam * 0.7 * 321 / 8 == pytest.approx(math.sqrt(2 * 13 * math.log(1e4)), abs=1e-12)


def test_gate_decisions():
    assert examination_gate(1.0, 0.1, 0.01) is False  # 10 >= ln 100
    assert examination_gate(0.0, 1e-9, 0.5) is True
    assert examination_gate(math.log(2), 1.0, 0.5) is False  # equality aborts
    assert examination_gate(math.log(2) * 0.999, 1.0, 0.5) is True
    for bad in (0.0, 1.0, 2.0):
        with pytest.raises(ValueError):
            examination_gate(1.0, 1.0, bad)
    with pytest.raises(GateAbort, match="too small"):
        require_gate(1.0, 0.1, 0.01)


def test_acceptance_probability_examples():
    assert acceptance_probability(-2.0, 1.0, 0.3) == 1.0
    assert acceptance_probability(np.array([0.5, -0.5]), 1.0, 1e12) == pytest.approx([1.0, 1.0])
    with pytest.raises(ValueError):
        acceptance_probability(0.0, 1.0, 0.0)


def test_two_vertex_softmax_hand_value():
    l1 = 0.8
    p = index_distribution(AlphaVector([-l1]), l1, 2 * l1)
    assert p[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert p[0] == pytest.approx(0.7311, abs=1e-4)


def test_default_cap_hand_value():
    assert default_m_cap(0.1, 0.01) == 11513


@given(
    st.floats(1e-3, 10), st.floats(1e-3, 0.99), st.floats(1e-4, 100),
    st.lists(st.floats(-1, 1), min_size=1, max_size=10),
)
def test_gate_soundness(l1, varsigma, lam, unit):
    assume(varsigma <= l1)
    assume(examination_gate(l1, lam, varsigma))
    alpha = np.array(unit) * (l1 + varsigma)
    p = acceptance_probability(alpha, l1, lam)
    assert np.all(p >= math.exp(-4 * l1 / lam) * (1 - 1e-12))
    assert math.exp(-4 * l1 / lam) > varsigma**4


def test_equal_values_give_uniform_indices():
    d = 4
    pp = params(0.5, 0.3)
    rng = np.random.default_rng(0)
    draws = [sample_index(np.full(2 * d, 0.1), d, pp, None, rng)[0] for _ in range(100_000)]
    counts = np.bincount(draws, minlength=2 * d)
    assert stats.chisquare(counts).pvalue > 1e-4


def test_two_vertex_empirical_frequency():
    l1 = 0.8
    pp = params(2 * l1, l1)
    rng = np.random.default_rng(1)
    hits = sum(sample_index(AlphaVector([-l1]), 1, pp, None, rng)[0] == 0 for _ in range(100_000))
    assert abs(hits / 100_000 - 0.7311) <= 0.01


def test_exact_sampler_matches_law():
    alpha = AlphaVector([0.2, -0.1, 0.05])
    p = index_distribution(alpha, 0.3, 0.2)
    rng = np.random.default_rng(2)
    draws = np.bincount([sample_index_exact(alpha, 0.3, 0.2, rng) for _ in range(50_000)], minlength=6)
    assert 0.5 * np.abs(draws / 50_000 - p).sum() <= 0.02


def test_sampler_charges_one_preparation_per_proposal():
    ledger = QueryLedger()
    pp = params(0.5, 0.5)
    _, row = sample_index(AlphaVector([0.1, -0.2]), 2, pp, None, np.random.default_rng(3), ledger, t=4, prep_cost=3.0)
    assert ledger.counts["OAlpha"] == row.proposals_used >= 1
    assert ledger.charged_budget == 3.0 * row.proposals_used
    assert row.t == 4 and 0 <= row.accepted_index < 4
    assert row.acceptance_prob == pytest.approx(
        acceptance_probability(AlphaVector([0.1, -0.2])[row.accepted_index], 0.5, 0.5)
    )


def test_cap_exhaustion_raises():
    pp = params(1e-3, 1.0, m_cap=5)  # acceptance about exp(-2000)
    ledger = QueryLedger()
    with pytest.raises(MechanismFailure) as err:
        sample_index(AlphaVector([0.0]), 1, pp, None, np.random.default_rng(0), ledger, t=7)
    assert err.value.t == 7 and err.value.m_cap == 5
    assert ledger.counts["OAlpha"] == 5


def test_fit_requires_frobenius_data():
    ds, _ = small_problem(mode=NormMode.INF_NORM)
    with pytest.raises(ValueError, match="Frobenius"):
        fit_qdp(ds, 1.0, 1e-5, OracleConfig(0.01, 0.01), ref_iters=None)
    fit_qdp(ds, 0.1, 0.1, OracleConfig(0.01, 0.01), allow_unnormalized=True, t_total=3, ref_iters=None)


def test_fit_aborts_at_the_gate_before_sampling():
    ds, _ = small_problem(n=30, d=200, mode=NormMode.INF_NORM)
    # InfNorm data has L1 of order d, far above lambda at this budget
    with pytest.raises(GateAbort):
        fit_qdp(ds, 1.0, 1e-5, OracleConfig(0.01, 0.01), allow_unnormalized=True, ref_iters=None)


def test_fit_records_calibration_and_trace(tmp_path):
    ds, _ = small_problem(n=100, d=40, s=5, seed=3)
    report, trace, pp = fit_qdp(ds, 1.0, 1e-5, OracleConfig(0.01, 0.01, 5), seed=5, ref_iters=None)
    T = choose_T(1.0, 1e-5, 100, 1.0)
    assert pp.t_total == T == report.t_total
    assert pp.lam == calibrate_lambda(1.0, 1e-5, T, 100)
    assert pp.eps_step == pytest.approx(8 / (pp.lam * 100))
    assert pp.l1_const == lipschitz_bound(ds)
    assert pp.m_cap == default_m_cap(0.01, 0.01)
    assert len(trace.rows) == T - 1
    assert [r.accepted_index for r in trace.rows] == report.chosen_indices
    assert report.ledger.counts["OAlpha"] == trace.proposals_total
    again, trace2, _ = fit_qdp(ds, 1.0, 1e-5, OracleConfig(0.01, 0.01, 5), seed=5, ref_iters=None)
    assert again.chosen_indices == report.chosen_indices
    trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,proposals_used,accepted_index,acceptance_prob" and len(lines) == T


def test_fit_overrides_and_curvature_modes():
    ds, _ = small_problem(n=50, d=10, seed=4)
    r, _, pp = fit_qdp(ds, 1.0, 1e-5, OracleConfig(0.01, 0.01), t_total=7, ref_iters=None)
    assert pp.t_total == 7 == r.t_total
    _, _, pp_exact = fit_qdp(ds, 1.0, 1e-5, OracleConfig(0.01, 0.01), curvature="exact", ref_iters=None)
    assert pp_exact.t_total == 1  # tiny curvature of normalized data keeps a single iterate
    # unnormalized data passes the gate with acceptance near exp(-2.8), so one proposal rarely suffices
    raw, _ = small_problem(n=30, d=8, mode=NormMode.INF_NORM)
    with pytest.raises(MechanismFailure) as err:
        fit_qdp(raw, 1.0, 1e-5, OracleConfig(0.01, 0.01), m_cap=1, seed=1, allow_unnormalized=True, ref_iters=None)
    assert err.value.t is not None


def test_high_temperature_explores_nearly_uniformly():
    # a small budget makes lambda about 200 while L1 is about 0.02
    ds, _ = small_problem(n=100, d=5, s=2, seed=8)
    chosen = []
    for seed in range(40):
        r, _, pp = fit_qdp(ds, 0.01, 1e-5, OracleConfig(0.01, 0.01, seed), seed=seed, t_total=25, ref_iters=None)
        assert pp.lam > 1000 * pp.l1_const
        chosen += r.chosen_indices
    counts = np.bincount(chosen, minlength=10)
    assert stats.chisquare(counts).pvalue > 1e-4


def test_query_count_does_not_grow_with_dimension():
    per_iter = []
    for d in (100, 400, 1600):
        total = 0
        iters = 0
        for seed in range(5):
            ds, _ = small_problem(n=100, d=d, s=10, seed=seed)
            r, trace, _ = fit_qdp(ds, 1.0, 1e-5, OracleConfig(0.01, 0.01, seed), seed=seed, t_total=30, ref_iters=None)
            total += r.ledger.counts["OAlpha"]
            iters += len(trace.rows)
        per_iter.append(total / iters)
    assert max(per_iter) / min(per_iter) <= 1.1
