import numpy as np
import pytest
from scipy import special

from thermosoc import cva as C
from thermosoc.cva import LagSpec
from thermosoc.monitor import (Case, DecisionRule, DegenerateStatistic, MonitoringModel, MonitoringVerdict,
                               OnlineMonitor, batch_verdicts, box_limit, build_monitor, chi2_limit,
                               control_limit, evaluate_stream, kde_limit, longest_run,
                               normality_pass_fraction, score, statistics, write_verdicts)
from thermosoc.pipeline import cycle_channels, first_estimate_index
from thermosoc.wavelet import WaveletConfig

WAVELET = WaveletConfig(3, "haar", True)
LAG = 3


@pytest.fixture(scope="module")
def fitted(warm_cycles):
    mats = [cycle_channels(c, WAVELET, LAG) for c in warm_cycles[:6]]
    pf = C.arrange_past_future(mats, LagSpec(LAG, LAG))
    cva = C.fit(pf)
    Z = C.training_variates(cva, pf)
    return cva, build_monitor(cva, Z), Z


def _verdict(t2x, spex):
    return MonitoringVerdict(0.0, 0.0, t2x, spex)


# ---------------------------------------------------------------- limits

def test_chi2_two_dof_closed_form():
    # chi-square with 2 dof is exponential: quantile = -2 ln(1 - p)
    assert chi2_limit(2, 0.95) == pytest.approx(-2 * np.log(0.05), abs=1e-9)
    assert chi2_limit(2, 0.95) == pytest.approx(5.991, abs=1e-3)


def test_box_limit_recovers_chi2_quantile():
    rng = np.random.default_rng(0)
    stat = rng.chisquare(6, 400_000)
    assert box_limit(stat) == pytest.approx(chi2_limit(6), rel=0.01)


def test_kde_limit_is_the_kde_quantile():
    rng = np.random.default_rng(1)
    stat = rng.standard_normal(3000)
    cl = kde_limit(stat, 0.95)
    bw = 1.06 * stat.std(ddof=1) * len(stat) ** -0.2 * (0.9 / 1.06) ** 0  # Silverman's rule family
    bw = (len(stat) * 3 / 4) ** -0.2 * stat.std(ddof=1)
    cdf = special.ndtr((cl - stat) / bw).mean()
    assert cdf == pytest.approx(0.95, abs=1e-6)
    assert cl == pytest.approx(1.645, abs=0.15)


def test_zero_statistic_and_degenerate_statistic():
    assert control_limit(np.zeros(50), "kde") > 0
    with pytest.raises(DegenerateStatistic):
        control_limit(np.full(50, 3.0), "kde")
    with pytest.raises(ValueError):
        control_limit(np.arange(5.0), "F-test")


def test_normality_fraction():
    rng = np.random.default_rng(2)
    assert normality_pass_fraction(rng.standard_normal((2000, 20))) >= 0.8
    assert normality_pass_fraction(rng.exponential(size=(2000, 5))) == 0.0


def _iid_model(rng, n_train=4000, dim=6, R=2, method="auto"):
    Z = rng.standard_normal((n_train, dim))
    T2, SPE = statistics(Z, R)
    cl_t2 = control_limit(T2, "chi-square", dof=R) if method == "auto" else control_limit(T2, method)
    cl_spe = control_limit(SPE, "box-approx") if method == "auto" else control_limit(SPE, method)
    return MonitoringModel(R, dim, cl_t2, cl_spe, "chi-square", "box-approx"), Z


def test_monte_carlo_false_alarm_rate():
    rng = np.random.default_rng(3)
    model, Z = _iid_model(rng)
    T2, SPE = statistics(Z, model.R)
    assert abs(np.mean(T2 > model.cl_T2) - 0.05) <= 0.02
    assert abs(np.mean(SPE > model.cl_SPE) - 0.05) <= 0.02
    T2h, SPEh = statistics(rng.standard_normal((4000, 6)), model.R)
    assert 0.02 <= np.mean(T2h > model.cl_T2) <= 0.10
    assert 0.02 <= np.mean(SPEh > model.cl_SPE) <= 0.10


def test_build_monitor_on_process_data(fitted):
    cva, mon, Z = fitted
    assert mon.cl_T2 > 0 and mon.cl_SPE > 0
    T2, SPE = statistics(Z, cva.R)
    assert np.mean(T2 > mon.cl_T2) <= 0.05 + 0.03
    assert np.mean(SPE > mon.cl_SPE) <= 0.05 + 0.03
    assert set(mon.gaussianity) == {"system", "residual"}


def test_zero_system_variates_never_alarm():
    rng = np.random.default_rng(4)
    Z = rng.standard_normal((500, 5))
    Z[:, :2] = 0.0
    T2, _ = statistics(Z, 2)
    cl = control_limit(T2, "kde")
    assert cl > 0 and not np.any(T2 > cl)


def test_model_json_round_trip(fitted):
    _, mon, _ = fitted
    assert MonitoringModel.from_json(mon.to_json()) == mon


# ---------------------------------------------------------------- scoring

def test_score_examples():
    m = MonitoringModel(2, 4, 5.991, 9.0, "chi-square", "box-approx")
    v = score(m, [0, 0], np.zeros(4))
    assert (v.t2, v.spe, v.t2_exceeds, v.spe_exceeds) == (0.0, 0.0, False, False)
    assert score(m, [1, 2], np.zeros(4)).t2 == 5.0
    with pytest.raises(ValueError):
        score(m, [1, 2, 3], np.zeros(4))


def test_t2_scales_quadratically():
    m = MonitoringModel(3, 5, 1.0, 1.0, "kde", "kde")
    z = np.array([0.3, -1.0, 2.0])
    assert score(m, 2.5 * z, np.zeros(5)).t2 == pytest.approx(6.25 * score(m, z, np.zeros(5)).t2)


def test_held_out_row_matches_batch(fitted, warm_cycles):
    cva, mon, _ = fitted
    vals = cycle_channels(warm_cycles[6], WAVELET, LAG)
    Z = cva.features(vals)
    T2, SPE = statistics(Z, cva.R)
    x = cva.normalize_past(np.concatenate([vals[40 + LAG - 1 - i] for i in range(LAG)]))
    zs, zr, _ = C.project(cva, x)
    v = score(mon, zs, zr)
    assert v.t2 == pytest.approx(T2[40], abs=1e-9)
    assert v.spe == pytest.approx(SPE[40], abs=1e-9)


# ---------------------------------------------------------------- decision rule

def test_isolated_exceedances_stay_case_one():
    rule = DecisionRule()
    for f in (True, False, True, False, False, True, True, False):
        out = rule.update(_verdict(f, False))
    assert rule.decision is Case.I and out.case is Case.I


def test_three_consecutive_latch():
    rule = DecisionRule()
    seq = [rule.update(_verdict(f, False)) for f in (False, True, True, True, False, False)]
    assert [v.case for v in seq] == [Case.I, Case.I, Case.I, Case.II, Case.I, Case.I]
    assert rule.decision is Case.II and rule.latched_at == 3


def test_runs_are_per_statistic():
    rule = DecisionRule()
    for t2x, spex in ((True, False), (False, True), (True, False), (False, True)):
        rule.update(_verdict(t2x, spex))
    assert rule.decision is Case.I
    rule = DecisionRule()
    for _ in range(3):
        v = rule.update(_verdict(False, True))
    assert v.case is Case.II and v.consecutive_exceed_count == 3


def test_case_two_iff_count_reaches_three():
    rng = np.random.default_rng(5)
    rule = DecisionRule()
    for _ in range(300):
        v = rule.update(_verdict(*(rng.random(2) < 0.4)))
        assert (v.case is Case.II) == (v.consecutive_exceed_count >= 3)


def test_longest_run():
    assert longest_run([]) == 0
    assert longest_run([1, 1, 0, 1, 1, 1, 0]) == 3


# ---------------------------------------------------------------- streaming

def test_stream_matches_batch(fitted, warm_cycles):
    cva, mon, _ = fitted
    c = warm_cycles[7]
    res = evaluate_stream(mon, cva, WAVELET, zip(c.current_A, c.voltage_V))
    verdicts, rule = batch_verdicts(mon, cva.features(cycle_channels(c, WAVELET, LAG)))
    assert res.warmup == first_estimate_index(WAVELET, LAG)
    assert len(res.verdicts) == len(verdicts) == len(c) - res.warmup
    for a, b in zip(res.verdicts, verdicts):
        assert a.t2 == pytest.approx(b.t2, abs=1e-9) and a.spe == pytest.approx(b.spe, abs=1e-9)
        assert (a.t2_exceeds, a.spe_exceeds, a.case) == (b.t2_exceeds, b.spe_exceeds, b.case)
    assert res.decision is rule.decision
    if rule.latched_at is not None:
        assert res.latched_at == rule.latched_at + res.warmup


def test_mean_shift_is_detected_quickly(fitted, warm_cycles):
    cva, mon, _ = fitted
    c = warm_cycles[7]
    ref = warm_cycles[0]
    cur, volt = c.current_A.copy(), c.voltage_V.copy()
    onset = 500
    cur[onset:] += 5 * ref.current_A.std()
    volt[onset:] += 5 * ref.voltage_V.std()
    res = evaluate_stream(mon, cva, WAVELET, zip(cur, volt))
    idx = res.sample_index
    after = [v.case for k, v in zip(idx, res.verdicts) if onset <= k < onset + 10]
    assert Case.II in after


def test_short_stream_reports_warmup(fitted):
    cva, mon, _ = fitted
    res = evaluate_stream(mon, cva, WAVELET, [(-1.0, 3.9)] * 5)
    assert res.verdicts == [] and res.warmup == first_estimate_index(WAVELET, LAG)


def test_predictor_estimates_until_latch(fitted):
    cva, mon, _ = fitted

    class Echo:
        def step(self, z, state):
            return float(z[0]), state

    m = OnlineMonitor(mon, cva, WAVELET, predictor=Echo())
    rng = np.random.default_rng(6)
    outs = [m.push(-5.0 + rng.normal(), 3.8 + 0.01 * rng.normal()) for _ in range(60)]
    outs = [o for o in outs if o is not None]
    for v, y in outs:
        assert np.isnan(y) == (m.rule.latched_at is not None and v is not None and np.isnan(y))


def test_verdict_csv(tmp_path, fitted, warm_cycles):
    cva, mon, _ = fitted
    c = warm_cycles[7]
    res = evaluate_stream(mon, cva, WAVELET, zip(c.current_A[:200], c.voltage_V[:200]))
    write_verdicts(res, mon, tmp_path / "v.csv")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "k,t2,spe,cl_t2,cl_spe,case"
    assert len(lines) == 1 + len(res.verdicts)
    assert lines[1].split(",")[0] == str(res.warmup)
