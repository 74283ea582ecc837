import math

import numpy as np
import pytest

from relmm.errors import ConfigError
from relmm.predictors import CCE, CCPE, CDOE, FULL
from relmm.simulation import (PARAMETERS, SimConfig, apply_mdm, fmt6, format_table,
                              generate_complete, preset, replicate, run_monte_carlo)

N_SIM = 1000


def test_noiseless_design_recovers_beta():
    cfg = preset("table1", 60, sd_alpha=0.0, sd_eps=0.0, methods=(FULL, CDOE))
    est = replicate(cfg, 0)
    for method in (FULL, CDOE):
        assert np.allclose(est[method], cfg.beta, rtol=0, atol=1e-8)


def test_generator_moments():
    cfg = preset("table1", 400)
    full, truth = generate_complete(cfg, 0)
    assert abs(truth.x4.mean() - 1) < 3 / math.sqrt(2000)
    assert abs(truth.x2.mean() - 0.5) < 3 * 0.5 / math.sqrt(400)
    assert abs(truth.x1.mean() - 0.5) < 3 * math.sqrt(1 / 12 / 400)
    assert set(np.unique(truth.x2)) <= {0.0, 1.0}
    X = full.covariates
    resid = full.response - X @ np.asarray(cfg.beta) - np.repeat(truth.alpha, cfg.T)
    assert np.allclose(resid, truth.eps.ravel(), rtol=0, atol=1e-12)


def test_generator_is_deterministic():
    cfg = preset("table2", 40)
    a, _ = generate_complete(cfg, 3)
    b, _ = generate_complete(cfg, 3)
    c, _ = generate_complete(cfg, 4)
    assert a.equals(b) and not a.equals(c)
    ma, ka = apply_mdm(a, cfg, 3)
    mb, kb = apply_mdm(b, cfg, 3)
    assert ma.equals(mb) and np.array_equal(ka.y_missing, kb.y_missing)


def test_zero_probability_mechanism_masks_nothing():
    cfg = preset("table1", 50, q_mdm=0.0, cov_mdm=(0.0, -math.inf))
    full, _ = generate_complete(cfg, 0)
    masked, masks = apply_mdm(full, cfg, 0)
    assert masked.equals(full)
    assert not masks.x1_missing.any() and not masks.x4_missing.any()


def test_x1_mechanism_uses_expit():
    cfg = preset("table1", 400)
    rates, n0 = [], 0
    for rep in range(5):
        full, truth = generate_complete(cfg, rep)
        _, masks = apply_mdm(full, cfg, rep)
        sel = truth.x2 == 0
        rates.append(masks.x1_missing[sel].mean())
        n0 = sel.sum()
    p = 1 / (1 + math.exp(2))
    assert p == pytest.approx(0.119, abs=5e-4)
    for r in rates:
        assert abs(r - p) < 3 * math.sqrt(p * (1 - p) / n0)


def test_x4_missing_rate_grows_with_time():
    cfg = preset("table1", 400)
    full, _ = generate_complete(cfg, 0)
    _, masks = apply_mdm(full, cfg, 0)
    rate = masks.x4_missing.mean(axis=0)
    assert abs(rate[4] - 0.75) < 3 * math.sqrt(0.75 * 0.25 / 400)
    assert abs(rate[0] - 0.15) < 3 * math.sqrt(0.15 * 0.85 / 400)


def test_response_mechanism_only_in_table2():
    cfg1, cfg2 = preset("table1", 100), preset("table2", 100)
    full, _ = generate_complete(cfg2, 0)
    assert not apply_mdm(full, cfg1, 0)[1].y_missing.any()
    assert apply_mdm(full, cfg2, 0)[1].y_missing.any()


def test_mse_decomposition():
    rep = run_monte_carlo(preset("table1", 40, n_sim=8))
    for method in rep.config.methods:
        n = rep.n_ok(method)
        bias = rep.mean(method) - np.asarray(rep.config.beta)
        expect = bias ** 2 + rep.sd(method) ** 2 * (n - 1) / n
        assert np.allclose(rep.mse(method), expect, rtol=1e-12, atol=1e-15)


def test_half_runs_concatenate():
    cfg = preset("table2", 40, n_sim=6)
    whole = run_monte_carlo(cfg)
    first = run_monte_carlo(cfg, reps=range(3))
    second = run_monte_carlo(cfg, reps=range(3, 6))
    for method in cfg.methods:
        joined = np.vstack([first.estimates[method], second.estimates[method]])
        assert np.array_equal(whole.estimates[method], joined)


def test_disjoint_halves_agree_statistically():
    cfg = preset("table1", 100, n_sim=40, methods=(FULL,))
    a = run_monte_carlo(cfg, reps=range(20))
    b = run_monte_carlo(cfg, reps=range(20, 40))
    se = np.sqrt((a.sd(FULL) ** 2 + b.sd(FULL) ** 2) / 20)
    assert np.all(np.abs(a.mean(FULL) - b.mean(FULL)) < 4 * se)


def test_parallel_run_matches_serial():
    cfg = preset("table1", 40, n_sim=4)
    a = run_monte_carlo(cfg, jobs=1)
    b = run_monte_carlo(cfg, jobs=2)
    assert a.to_csv() == b.to_csv()


def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(q_mdm=0.3)
    with pytest.raises(ConfigError):
        SimConfig(n_sim=0)
    with pytest.raises(ConfigError):
        SimConfig(methods=("MICE",))
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"m": 10, "colour": "red"})
    with pytest.raises(ConfigError):
        preset("table3", 40)
    cfg = preset("table2", 100)
    assert SimConfig.from_dict(cfg.as_dict()) == cfg


def test_failures_are_dropped_and_counted():
    # two subjects: CDOE often lacks enough complete records
    cfg = preset("table1", 2, n_sim=2, q_mdm=0.2, methods=(CDOE,))
    rep = run_monte_carlo(cfg)
    assert rep.failures[CDOE] + rep.n_ok(CDOE) == 2
    assert len(rep.rows()) == 5


def test_report_csv_and_table():
    rep = run_monte_carlo(preset("table1", 40, n_sim=3))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "parameter,method,mean,sd,mse,n_ok"
    assert len(lines) == 1 + 5 * 3
    assert fmt6(float("nan")) == "NA" and fmt6(0.123456789) == "0.123457"
    table = format_table([rep], title="t")
    assert "MSE(1e-3)" in table and all(p in table for p in PARAMETERS)


def _within_3_se(rep, method):
    tol = 3 * rep.sd(method) / math.sqrt(rep.n_ok(method))
    return np.abs(rep.mean(method) - np.asarray(rep.config.beta)) < tol


@pytest.mark.slow
def test_means_unbiased_at_m400(table1_reports, table2_reports):
    for method in table1_reports[400].config.methods:
        assert np.all(_within_3_se(table1_reports[400], method)), method
    for method in (FULL, CDOE):
        assert np.all(_within_3_se(table2_reports[400], method)), method


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="with responses masked through the true x4, rows with x4 "
                   "missing are selected on an unobserved value; CCE and CCPE are biased for "
                   "beta2 (about 0.17 at m=20000); see the decisions ledger")
def test_completed_model_means_unbiased_with_missing_responses(table2_reports):
    for method in (CCE, CCPE):
        assert np.all(_within_3_se(table2_reports[400], method)), method


@pytest.mark.slow
def test_full_beta1_at_m400(table1_reports):
    rep = table1_reports[400]
    assert rep.mean(FULL)[1] == pytest.approx(0.501, abs=3 * 0.055 / math.sqrt(N_SIM))
    assert rep.sd(FULL)[1] == pytest.approx(0.055, rel=0.15)
    assert rep.mse(FULL)[1] == pytest.approx(3.035e-3, rel=0.20)


@pytest.mark.slow
def test_cce_beats_cdoe_for_beta2_at_m40(table1_reports):
    rep = table1_reports[40]
    assert rep.sd(CCE)[2] < rep.sd(CDOE)[2]
    assert rep.sd(CDOE)[2] == pytest.approx(0.183, rel=0.15)
    assert rep.sd(CCE)[2] == pytest.approx(0.142, rel=0.15)


@pytest.mark.slow
def test_table2_beta3_mean_at_m400(table2_reports):
    rep = table2_reports[400]
    for method in (CCE, CCPE):
        assert rep.mean(method)[3] == pytest.approx(0.200, abs=3 * 0.009 / math.sqrt(N_SIM))
    assert round(rep.mean(CCPE)[3], 3) == round(rep.mean(CCE)[3], 3)
    assert rep.sd(CCPE)[3] == pytest.approx(rep.sd(CCE)[3], rel=0.01)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="published beta3 SD (0.009) is about 3.5 times the "
                   "sampling SD implied by the stated generator; see the decisions ledger")
def test_table2_beta3_spread_at_m400(table2_reports):
    rep = table2_reports[400]
    for method in (CCE, CCPE):
        assert rep.sd(method)[3] == pytest.approx(0.009, rel=0.15)
        assert rep.mse(method)[3] == pytest.approx(0.099e-3, rel=0.20)
