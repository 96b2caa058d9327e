"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import dataclasses
import json
import time

import numpy as np
import pytest
import scipy.linalg as sla
from scipy import stats

from thermosoc import cva as C
from thermosoc.cli import main
from thermosoc.config import RunConfig
from thermosoc.cva import LagSpec
from thermosoc.dataset import EcmParams, drive_profile, simulate_campaign, simulate_cycle, split_cycles
from thermosoc.lstm import LstmNetwork, TrainConfig, gradient_check, train
from thermosoc.metrics import compute_metrics
from thermosoc.monitor import Case, chi2_limit, control_limit, statistics
from thermosoc.pipeline import train_raw_baseline, train_reference, transfer_predict, transfer_reference
from thermosoc.transfer import extract_target_cvs, select_consistent, similarity_H, update_alphas
from thermosoc.wavelet import WaveletConfig, decompose

pytestmark = pytest.mark.slow

DESK = RunConfig()
WAVELET = WaveletConfig(DESK.wavelet_levels, DESK.wavelet_basis, True)


def _desk_reference(seed: int):
    cycles = simulate_campaign(EcmParams(), DESK.reference_temperature_C, DESK.n_reference_cycles, seed=seed,
                               prefix="ref")
    train, val, test = split_cycles(cycles, DESK.n_test, DESK.n_val)
    cfg = dataclasses.replace(DESK.train_config(), seed=seed)
    model, _ = train_reference(train, val, WAVELET, DESK.lag, DESK.R, DESK.reference_net, cfg,
                               DESK.significance, DESK.limit_method, seed)
    return model, (train, val, test)


_SEED0 = {}


def _cached_seed0():
    if "ref" not in _SEED0:
        _SEED0["ref"] = _desk_reference(0)
    return _SEED0["ref"]


# ---------------------------------------------------------------------- 1

def test_c01_wavelet_reconstruction(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(1024)
        d = decompose(x, 5)
        worst = max(worst, np.abs(d.reconstruct() - x).max() / np.abs(x).max())
    dt = time.perf_counter() - t0
    assert criterion(1, worst <= 1e-9 and dt < 5, f"max relative error {worst:.2e}, {dt:.2f} s")


# ---------------------------------------------------------------------- 2, 3, 4

def _ar2(K=500, seed=0):
    rng = np.random.default_rng(seed)
    A1 = np.array([[0.5, 0.1, 0.0], [0.0, 0.4, 0.2], [0.1, 0.0, 0.3]])
    A2 = np.diag([-0.2, 0.1, -0.1])
    x = np.zeros((K, 3))
    e = rng.standard_normal((K, 3))
    for k in range(2, K):
        x[k] = A1 @ x[k - 1] + A2 @ x[k - 2] + e[k]
    return x


def test_c02_cva_oracle(criterion):
    pf = C.arrange_past_future([_ar2()], LagSpec(3, 3))
    m = C.fit(pf)
    Xp, Xf = pf.X_p, pf.X_f
    n = len(Xp)
    Spp, Sff, Spf = Xp.T @ Xp / (n - 1), Xf.T @ Xf / (n - 1), Xp.T @ Xf / (n - 1)
    w = sla.eigh(Spf @ np.linalg.solve(Sff, Spf.T), Spp, eigvals_only=True)[::-1]
    err = np.abs(m.singvals - np.sqrt(np.clip(w, 0, None))).max()
    W = Xp @ m.whiten_p
    white = np.abs(np.cov(W.T) - np.eye(m.dim)).max()
    assert criterion(2, err <= 1e-8 and white <= 1e-6,
                     f"max |singval - oracle| {err:.2e}, whitened covariance off identity {white:.2e}")


def test_c03_identity_correlation(criterion):
    X = np.random.default_rng(5).standard_normal((400, 6))
    s = C.NormStats.fit(X)
    pf = C.PastFutureMatrices(s.apply(X), s.apply(X), s, s, LagSpec(2, 2), (400,))
    err = np.abs(C.fit(pf).singvals - 1.0).max()
    assert criterion(3, err <= 1e-8, f"max |singval - 1| {err:.2e}")


def test_c04_hankel_arithmetic(criterion):
    v = np.random.default_rng(0).standard_normal((100, 12))
    pf = C.arrange_past_future([v], LagSpec(36, 36))
    ok = pf.X_p.shape == (29, 432) and pf.X_f.shape == (29, 432) and 163 <= pf.X_p.shape[1]
    assert criterion(4, ok, f"past {pf.X_p.shape}, future {pf.X_f.shape}")


# ---------------------------------------------------------------------- 5

def test_c05_control_limit_calibration(criterion):
    rng = np.random.default_rng(3)
    R, dim = 2, 6
    T2, SPE = statistics(rng.standard_normal((4000, dim)), R)
    cl_t2 = control_limit(T2, "chi-square", dof=R)
    cl_spe = control_limit(SPE, "box-approx")
    T2h, SPEh = statistics(rng.standard_normal((4000, dim)), R)
    r_t2, r_spe = np.mean(T2h > cl_t2), np.mean(SPEh > cl_spe)
    oracle = stats.chi2.ppf(0.95, 2)
    ok = 0.02 <= r_t2 <= 0.10 and 0.02 <= r_spe <= 0.10 and abs(chi2_limit(2) - 5.991) <= 1e-3 \
        and abs(chi2_limit(2) - oracle) <= 1e-9
    assert criterion(5, ok, f"held-out rates T2 {r_t2:.3f} SPE {r_spe:.3f}, chi2(2) limit {chi2_limit(2):.4f}")


# ---------------------------------------------------------------------- 6

def test_c06_case_two_detection(criterion):
    model, (train, _, _) = _cached_seed0()
    p = EcmParams()
    weak = dataclasses.replace(p, capacity_Ah_ref=0.8 * p.capacity_Ah_ref)
    cycle = simulate_campaign(weak, DESK.reference_temperature_C, 1, seed=100, prefix="weak")[0]
    res = model.monitor_cycle(cycle, with_estimates=False)
    detected = res.decision is Case.II and res.latched_at <= 0.25 * len(cycle)
    replay = model.monitor_cycle(train[0], with_estimates=False)
    quiet = replay.decision is Case.I
    t2_rate = np.mean([v.t2_exceeds for v in replay.verdicts])
    detail = (f"capacity 0.8: latched at {res.latched_at} of {len(cycle)}; "
              f"replay: {replay.decision.value} (latched at {replay.latched_at}, T2 exceed rate {t2_rate:.3f})")
    assert criterion(6, detected and quiet, detail)


# ---------------------------------------------------------------------- 7, 8

def test_c07_gradient_check(criterion):
    t0 = time.perf_counter()
    net = LstmNetwork.build((2,), 0, 3, seed=1)
    rng = np.random.default_rng(0)
    err = gradient_check(net, rng.standard_normal((5, 3)), rng.standard_normal(5))
    dt = time.perf_counter() - t0
    assert criterion(7, err < 1e-4 and dt < 10, f"max relative error {err:.2e}, {dt:.2f} s")


def test_c08_overfit_capacity(criterion):
    cycle = simulate_cycle(EcmParams(), drive_profile(200.0, seed=3), 25.0, seed=3)
    X = np.column_stack([cycle.current_A, cycle.voltage_V])
    y = cycle.soc_pct
    net = LstmNetwork.from_config("L(8)N(8)", 2, seed=0)
    cfg = TrainConfig(max_epochs=2000, batch_size=1, seq_len=len(y), dropout_rate=0.0, l2_lambda=0.0,
                      early_stop_patience=2000, learning_rate=0.01, seed=0)
    net, hist = train(net, [(X, y)], cfg)
    rmse = compute_metrics(y, net.forward(X)).rmse
    assert criterion(8, rmse < 1.0, f"training RMSE {rmse:.3f} % SoC after {hist['epochs']} epochs")


# ---------------------------------------------------------------------- 9

def test_c09_feature_engineering_benefit(criterion):
    ratios = []
    for seed in range(5):
        model, (train, val, test) = _desk_reference(seed) if seed else _cached_seed0()
        _, y_cva = model.predict(test[0])
        truth = model.labels(test[0])
        cfg = dataclasses.replace(DESK.train_config(), seed=seed)
        _, raw_predict = train_raw_baseline(train, val, WAVELET, model.lag, DESK.reference_net, cfg, seed)
        ratios.append(compute_metrics(truth, y_cva).rmse / compute_metrics(truth, raw_predict(test[0])).rmse)
    med = float(np.median(ratios))
    assert criterion(9, med <= 0.90, f"median CVA/raw RMSE ratio {med:.3f} (per seed {np.round(ratios, 3).tolist()})")


# ---------------------------------------------------------------------- 10

def test_c10_adjusting_factor_closed_form(criterion):
    a1, a2 = update_alphas(0.5, 0.5, 0.0, 1.0, 0.0, eta=0.5)
    b = (0.5, 0.5)
    same = True
    worst = abs(a1 + a2 - 1)
    rng = np.random.default_rng(0)
    for _ in range(100):
        # dyadic values keep the two errors bit-identical
        y, e = rng.integers(0, 800) / 8, rng.integers(-24, 25) / 8
        b = update_alphas(*b, y + e, y - e, y, 0.5)
        same &= b == (0.5, 0.5)
    for _ in range(100):
        a = update_alphas(a1, a2, *rng.normal(0, 2, 3), 0.5)
        worst = max(worst, abs(sum(a) - 1))
    ok = abs(a1 - 0.62246) <= 1e-5 and same and worst <= 1e-12
    assert criterion(10, ok, f"alpha1 {a1:.7f}, equal errors keep (0.5, 0.5): {same}, max |sum - 1| {worst:.1e}")


# ---------------------------------------------------------------------- 11

def test_c11_transfer_benefit(criterion):
    model, (train, _, _) = _cached_seed0()
    target = simulate_campaign(EcmParams(), DESK.target_temperature_C, DESK.n_target_cycles, seed=0, prefix="tgt")
    test_cycle = target[-1]
    truth = model.labels(test_cycle)
    direct = compute_metrics(truth, model.predict(test_cycle)[1]).rmse
    tm, sel = transfer_reference(model, train, target[:DESK.n_target_train], DESK.shared_net, DESK.specific_net,
                                 DESK.train_config(transfer=True), DESK.eta, DESK.shared_input,
                                 DESK.significance, DESK.limit_method, seed=0)
    transferred = compute_metrics(truth, transfer_predict(tm, WAVELET, test_cycle)[1]).rmse
    ratio = transferred / direct

    mats = [model.channels(c) for c in train]
    Z_x = C.training_variates(model.cva, C.arrange_past_future(mats, model.cva.lag))
    Z_t, _ = extract_target_cvs(mats, model.cva.lag)
    ident = select_consistent(Z_x, Z_t)
    H_full = similarity_H(Z_x, ident.q)
    full = model.cva.dim
    ok = ratio <= 0.60 and ident.q == full and abs(H_full - 1.0) <= 1e-9
    detail = (f"transfer/direct RMSE {transferred:.3f}/{direct:.3f} = {ratio:.3f} (q={sel.q}); "
              f"identity q={ident.q} of {full}, H={H_full:.4f}")
    assert criterion(11, ok, detail)


# ---------------------------------------------------------------------- 12

def test_c12_constructed_consistency(criterion):
    rng = np.random.default_rng(12)
    dim, m = 12, 7
    Z_x = rng.standard_normal((3000, dim))
    Z_t = rng.standard_normal((1500, dim))
    Z_t[:, m:] += 5.0
    q = select_consistent(Z_x, Z_t).q
    assert criterion(12, abs(q - m) <= 1, f"q={q} for m={m}")


# ---------------------------------------------------------------------- 13

def test_c13_metrics(criterion):
    r = compute_metrics([0, 1], [1, 1])
    assert criterion(13, abs(r.rmse - 0.70711) <= 1e-5 and r.mae == 0.5, f"RMSE {r.rmse:.6f}, MAE {r.mae}")


# ---------------------------------------------------------------------- 14

def test_c14_end_to_end_smoke(criterion, tmp_path):
    cfg = RunConfig(out=str(tmp_path / "run"))
    path = tmp_path / "desk.json"
    cfg.save(path)
    t0 = time.perf_counter()
    codes = {}
    for command in ("simulate", "train-reference", "monitor", "train-transfer", "predict", "report"):
        codes[command] = main([command, "--config", str(path)])
        if codes[command] != 0:
            break
    dt = time.perf_counter() - t0
    ok = all(c == 0 for c in codes.values()) and len(codes) == 6 and dt < 600
    rmse = json.loads((tmp_path / "run" / "report" / "metrics.json").read_text())["rmse"] if ok else None
    assert criterion(14, ok, f"exit codes {codes}, {dt:.0f} s, report RMSE {rmse}")
