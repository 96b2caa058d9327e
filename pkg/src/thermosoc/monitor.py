"""Estimation-ability monitoring with T^2 / SPE statistics and the Case I / II rule."""
from __future__ import annotations

import csv
import enum
import json
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, special, stats

from .artifacts import ArtifactError
from .cva import CvaModel, project
from .wavelet import WaveletConfig

LIMIT_METHODS = ("chi-square", "box-approx", "kde")
RUN_LENGTH = 3


class DegenerateStatistic(ValueError):
    """A training statistic is constant and non-zero; no control limit can be placed."""


class Case(str, enum.Enum):
    I = "CaseI"
    II = "CaseII"


# ---------------------------------------------------------------------- #
# control limits
# ---------------------------------------------------------------------- #

def normality_pass_fraction(Z, alpha: float = 0.05) -> float:
    """Fraction of columns not rejected by D'Agostino's K^2 test at ``alpha``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] == 0:
        return 1.0
    if Z.shape[0] < 20:
        return 0.0
    return float(np.mean(normal_columns(Z, alpha)))


def normal_columns(Z, alpha: float = 0.05) -> np.ndarray:
    """Per-column normality verdicts (constant columns count as non-normal)."""
    Z = np.asarray(Z, dtype=float)
    ok = np.zeros(Z.shape[1], dtype=bool)
    varying = Z.std(axis=0) > 1e-12
    if varying.any() and Z.shape[0] >= 20:
        _, pvals = stats.normaltest(Z[:, varying], axis=0)
        ok[varying] = pvals > alpha
    return ok


def chi2_limit(dof: float, significance: float = 0.95) -> float:
    return float(stats.chi2.ppf(significance, dof))


def box_limit(stat, significance: float = 0.95) -> float:
    """Weighted chi-square ``g * chi2_h`` matched to the statistic's mean and variance."""
    stat = np.asarray(stat, dtype=float)
    m, v = stat.mean(), stat.var(ddof=1)
    g, h = v / (2 * m), 2 * m * m / v
    return float(g * stats.chi2.ppf(significance, h))


def kde_limit(stat, significance: float = 0.95) -> float:
    """Quantile of a Gaussian-kernel density estimate with Silverman bandwidth."""
    stat = np.asarray(stat, dtype=float)
    bw = float(np.sqrt(stats.gaussian_kde(stat, bw_method="silverman").covariance[0, 0]))

    def cdf(x):
        return float(special.ndtr((x - stat) / bw).mean()) - significance

    lo, hi = stat.min() - 10 * bw, stat.max() + 10 * bw
    return float(optimize.brentq(cdf, lo, hi, xtol=1e-10 * max(1.0, abs(hi))))


def control_limit(stat, method: str, significance: float = 0.95, dof: float | None = None) -> float:
    stat = np.asarray(stat, dtype=float)
    if np.all(stat == 0):
        return float(np.finfo(float).eps)
    if stat.std() <= 1e-12 * max(1.0, abs(stat.mean())):
        raise DegenerateStatistic(f"training statistic is constant ({stat.mean():g})")
    if method == "chi-square":
        return chi2_limit(dof, significance)
    if method == "box-approx":
        return box_limit(stat, significance)
    if method == "kde":
        return kde_limit(stat, significance)
    raise ValueError(f"unknown limit method {method!r}")


# ---------------------------------------------------------------------- #
# model
# ---------------------------------------------------------------------- #

@dataclass(frozen=True)
class MonitoringModel:
    R: int
    dim: int
    cl_T2: float
    cl_SPE: float
    t2_method: str
    spe_method: str
    significance: float = 0.95
    gaussianity: dict = field(default_factory=dict)

    @property
    def limit_method(self) -> tuple:
        return self.t2_method, self.spe_method

    def to_json(self) -> str:
        return json.dumps({"kind": "monitor", "version": 1, **self.__dict__}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MonitoringModel":
        d = json.loads(text)
        if d.pop("kind", None) != "monitor" or d.pop("version", None) != 1:
            raise ArtifactError("not a version-1 monitoring model")
        return cls(**d)


def statistics(Z_full, R: int):
    """``(T2, SPE)`` from canonical variates: energy of the first ``R`` and of the rest.

    Because the singular vectors are orthonormal, ``||J_r x||^2`` equals the
    energy of the trailing variates.
    """
    Z = np.atleast_2d(np.asarray(Z_full, dtype=float))
    sq = Z ** 2
    return sq[:, :R].sum(axis=1), sq[:, R:].sum(axis=1)


def build_monitor(cva: CvaModel, training_Z, significance: float = 0.95, method: str = "auto",
                  normal_fraction: float = 0.90) -> MonitoringModel:
    """Control limits for T^2 and SPE from training canonical variates.

    With ``method="auto"`` each subspace is checked for normality first: if at
    least ``normal_fraction`` of its variates pass, T^2 uses the chi-square
    limit and SPE the weighted chi-square (Box) limit; otherwise both fall
    back to a kernel density estimate of the training statistic.
    """
    Z = np.asarray(training_Z, dtype=float)
    R = cva.R
    if Z.shape[1] != cva.dim:
        raise ValueError(f"training variates have {Z.shape[1]} columns, model has {cva.dim}")
    T2, SPE = statistics(Z, R)
    Z_r = Z[:, R:] @ cva.singvecs_p[:, R:].T
    gauss = {
        "system": normality_pass_fraction(Z[:, :R]) >= normal_fraction,
        "residual": normality_pass_fraction(Z_r) >= normal_fraction if R < cva.dim else True,
    }
    if method == "auto":
        t2_method = "chi-square" if gauss["system"] else "kde"
        spe_method = "box-approx" if gauss["residual"] else "kde"
    elif method in LIMIT_METHODS:
        t2_method = spe_method = method
        if method == "box-approx":
            t2_method = "chi-square"
    else:
        raise ValueError(f"unknown limit method {method!r}")
    cl_T2 = control_limit(T2, t2_method, significance, dof=R)
    if R < cva.dim:
        cl_SPE = control_limit(SPE, spe_method, significance, dof=cva.dim - R)
    else:
        cl_SPE = float(np.finfo(float).eps)
    return MonitoringModel(R, cva.dim, cl_T2, cl_SPE, t2_method, spe_method, significance, gauss)


# ---------------------------------------------------------------------- #
# scoring and the decision rule
# ---------------------------------------------------------------------- #

@dataclass(frozen=True)
class MonitoringVerdict:
    t2: float
    spe: float
    t2_exceeds: bool
    spe_exceeds: bool
    consecutive_exceed_count: int = 0
    case: Case = Case.I


def score(model: MonitoringModel, z_s, z_r) -> MonitoringVerdict:
    """Stateless statistics and exceedance flags for one sample."""
    z_s = np.asarray(z_s, dtype=float).ravel()
    z_r = np.asarray(z_r, dtype=float).ravel()
    if z_s.size != model.R or z_r.size != model.dim:
        raise ValueError(f"expected z_s of {model.R} and z_r of {model.dim} entries")
    t2 = float(z_s @ z_s)
    spe = float(z_r @ z_r)
    t2x, spex = t2 > model.cl_T2, spe > model.cl_SPE
    n = int(t2x or spex)
    return MonitoringVerdict(t2, spe, t2x, spex, n, Case.I)


def longest_run(flags) -> int:
    best = run = 0
    for f in flags:
        run = run + 1 if f else 0
        best = max(best, run)
    return best


class DecisionRule:
    """Tracks exceedance runs per statistic and latches Case II after ``run_length``."""

    def __init__(self, run_length: int = RUN_LENGTH):
        self.run_length = run_length
        self.t2_run = self.spe_run = 0
        self.latched_at: int | None = None
        self._k = 0

    @property
    def decision(self) -> Case:
        return Case.II if self.latched_at is not None else Case.I

    def update(self, v: MonitoringVerdict) -> MonitoringVerdict:
        self.t2_run = self.t2_run + 1 if v.t2_exceeds else 0
        self.spe_run = self.spe_run + 1 if v.spe_exceeds else 0
        count = max(self.t2_run, self.spe_run)
        case = Case.II if count >= self.run_length else Case.I
        if case is Case.II and self.latched_at is None:
            self.latched_at = self._k
        self._k += 1
        return replace(v, consecutive_exceed_count=count, case=case)


def batch_verdicts(model: MonitoringModel, Z_full, run_length: int = RUN_LENGTH):
    """Verdicts for a block of canonical-variate rows, in order."""
    T2, SPE = statistics(Z_full, model.R)
    rule = DecisionRule(run_length)
    out = [rule.update(MonitoringVerdict(float(t), float(s), t > model.cl_T2, s > model.cl_SPE))
           for t, s in zip(T2, SPE)]
    return out, rule


# ---------------------------------------------------------------------- #
# online evaluation
# ---------------------------------------------------------------------- #

@dataclass
class StreamResult:
    verdicts: list          # one per sample after warm-up
    decision: Case
    latched_at: int | None  # sample index (0-based, whole stream) of the Case II latch
    warmup: int             # samples consumed before the first verdict
    predictions: np.ndarray  # Case I estimates, NaN once Case II has latched

    @property
    def sample_index(self) -> np.ndarray:
        return np.arange(self.warmup, self.warmup + len(self.verdicts))


class OnlineMonitor:
    """Per-stream state: causal wavelet buffer, past window, decision rule.

    Sample ``k`` uses the past vector ``[x(k), x(k-1), ..., x(k-l+1)]``.
    Channel rows produced while the causal wavelet buffer is still filling are
    discarded, so the first verdict arrives at sample ``settle + l - 1``.
    """

    def __init__(self, model: MonitoringModel, cva: CvaModel, wavelet: WaveletConfig,
                 predictor=None, run_length: int = RUN_LENGTH):
        self.model, self.cva = model, cva
        self.channels = wavelet.stream(cva.lag.l)
        self.settle = wavelet.settle(cva.lag.l)
        self.window = deque(maxlen=cva.lag.l)
        self.rule = DecisionRule(run_length)
        self.predictor = predictor
        self._pred_state = None
        self.k = -1

    @property
    def warmup(self) -> int:
        return self.settle + self.cva.lag.l - 1

    def push(self, current: float, voltage: float):
        """Feed one raw sample; returns ``(verdict, estimate)`` or ``None`` during warm-up."""
        self.k += 1
        row = self.channels.push(current, voltage)
        if self.k < self.settle:
            return None
        self.window.appendleft(row)
        if len(self.window) < self.cva.lag.l:
            return None
        x = self.cva.normalize_past(np.concatenate(self.window))
        z_s, z_r, z_full = project(self.cva, x)
        v = self.rule.update(score(self.model, z_s, z_r))
        estimate = np.nan
        if self.predictor is not None:
            y, self._pred_state = self.predictor.step(z_full, self._pred_state)
            if self.rule.decision is Case.I:
                estimate = y
        return v, estimate


def evaluate_stream(model: MonitoringModel, cva: CvaModel, wavelet: WaveletConfig, raw_stream,
                    predictor=None, run_length: int = RUN_LENGTH) -> StreamResult:
    """Run the online monitor over an iterable of ``(current, voltage)`` samples.

    While the decision is Case I the reference predictor's estimate (if given)
    is emitted for each sample; after Case II latches the estimate is NaN.
    """
    mon = OnlineMonitor(model, cva, wavelet, predictor, run_length)
    verdicts, preds = [], []
    for current, voltage in raw_stream:
        out = mon.push(current, voltage)
        if out is None:
            continue
        verdicts.append(out[0])
        preds.append(out[1])
    latched = None if mon.rule.latched_at is None else mon.rule.latched_at + mon.warmup
    return StreamResult(verdicts, mon.rule.decision, latched, mon.warmup, np.asarray(preds))


def write_verdicts(result: StreamResult, model: MonitoringModel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t2", "spe", "cl_t2", "cl_spe", "case"])
        for k, v in zip(result.sample_index, result.verdicts):
            w.writerow([int(k), repr(v.t2), repr(v.spe), repr(model.cl_T2), repr(model.cl_SPE), v.case.value])
