"""Canonical variate analysis of past/future windows.

Rows of the past matrix are ``[x(k-1), x(k-2), ..., x(k-l)]`` and rows of the
future matrix ``[x(k), ..., x(k+h-1)]``, paired at the same anchor ``k``.
Projections act on normalized past rows (``z = P @ x``); in matrix form the
canonical variates of a row-per-sample matrix are ``X @ P.T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import artifacts
from .wavelet import ChannelMatrix

RIDGE = 1e-10
EIG_FLOOR = 1e-12
STD_FLOOR = 1e-12


class LagSelectionError(ValueError):
    """No lag satisfied the autocorrelation rule; ``curve`` holds the diagnostic."""

    def __init__(self, message, curve):
        super().__init__(message)
        self.curve = curve


@dataclass(frozen=True)
class LagSpec:
    l: int
    h: int

    def __post_init__(self):
        if self.l < 1 or self.h < 1:
            raise ValueError("lags must be >= 1")


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "NormStats":
        mean = X.mean(axis=0)
        std = X.std(axis=0, ddof=1) if len(X) > 1 else np.zeros(X.shape[1])
        return cls(mean, std)

    def apply(self, X):
        X = np.asarray(X, dtype=float)
        safe = np.where(self.std > STD_FLOOR, self.std, 1.0)
        out = (X - self.mean) / safe
        return np.where(self.std > STD_FLOOR, out, 0.0)


@dataclass(frozen=True, eq=False)
class PastFutureMatrices:
    X_p: np.ndarray  # normalized, N x (J_x * l)
    X_f: np.ndarray  # normalized, N x (J_x * h)
    past_stats: NormStats
    future_stats: NormStats
    lag: LagSpec
    segments: tuple  # rows per contributing cycle, in order

    @property
    def n_rows(self) -> int:
        return self.X_p.shape[0]


def _as_values(c) -> np.ndarray:
    v = c.values if isinstance(c, ChannelMatrix) else np.asarray(c, dtype=float)
    return v[:, None] if v.ndim == 1 else v


def past_rows(values: np.ndarray, l: int, first: int | None = None, last: int | None = None) -> np.ndarray:
    """Past vectors ``[x(k-1), ..., x(k-l)]`` for anchors ``first..last`` inclusive.

    Defaults cover every anchor with a complete history, ``l..K``.
    """
    values = _as_values(values)
    K = len(values)
    first = l if first is None else first
    last = K if last is None else last
    if first < l or last > K:
        raise ValueError("anchor range exceeds available history")
    n = last - first + 1
    if n <= 0:
        return np.empty((0, values.shape[1] * l))
    return np.hstack([values[first - i:first - i + n] for i in range(1, l + 1)])


def future_rows(values: np.ndarray, h: int, first: int, last: int) -> np.ndarray:
    values = _as_values(values)
    n = last - first + 1
    return np.hstack([values[first + i:first + i + n] for i in range(h)])


def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelation of each column of ``x`` for lags ``0..max_lag`` (via FFT)."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean(axis=0)
    K = len(x)
    n = 1 << int(np.ceil(np.log2(max(2 * K - 1, 1))))
    spec = np.fft.rfft(x, n=n, axis=0)
    acov = np.fft.irfft(spec * np.conj(spec), n=n, axis=0)[: min(max_lag + 1, K)]
    denom = (x ** 2).sum(axis=0)
    out = np.zeros((max_lag + 1, x.shape[1]))
    ok = denom > 0
    out[: len(acov), ok] = acov[:, ok] / denom[ok]
    return out


def lag_curve(cycles: Sequence, max_lag: int) -> np.ndarray:
    """Root-summed-squares over channels of the length-weighted autocorrelation."""
    acfs, weights = [], []
    for c in cycles:
        v = _as_values(c)
        acfs.append(autocorrelation(v, max_lag))
        weights.append(len(v))
    acf = np.average(np.stack(acfs), axis=0, weights=weights)
    return np.sqrt((acf ** 2).sum(axis=1))


def select_lags(cycles: Sequence, band_pct: float = 0.05, stay: int = 3) -> LagSpec:
    """Smallest lag whose root-summed-squares autocorrelation enters ``+-band_pct``.

    The curve must stay inside the band for ``stay`` consecutive lags. Lags up
    to a quarter of the shortest cycle are considered.
    """
    lengths = [len(_as_values(c)) for c in cycles]
    if not lengths:
        raise ValueError("no cycles given")
    max_lag = min(lengths) // 4
    if max_lag < 1:
        raise ValueError("cycles too short for lag selection")
    curve = lag_curve(cycles, max_lag + stay)
    inside = curve <= band_pct
    for k in range(1, max_lag + 1):
        if inside[k:k + stay].all():
            return LagSpec(k, k)
    raise LagSelectionError(
        f"autocorrelation never settles within +-{band_pct:g} up to lag {max_lag}", curve)


def arrange_past_future(cycles: Sequence, lag: LagSpec) -> PastFutureMatrices:
    """Stack past/future windows of every cycle long enough, then normalize."""
    P, F, segs = [], [], []
    for c in cycles:
        v = _as_values(c)
        K = len(v)
        if K < lag.l + lag.h + 1:
            continue
        first, last = lag.l, K - lag.h
        P.append(past_rows(v, lag.l, first, last))
        F.append(future_rows(v, lag.h, first, last))
        segs.append(last - first + 1)
    if not P:
        raise ValueError(f"every cycle is shorter than l + h + 1 = {lag.l + lag.h + 1} samples")
    Xp, Xf = np.vstack(P), np.vstack(F)
    ps, fs = NormStats.fit(Xp), NormStats.fit(Xf)
    return PastFutureMatrices(ps.apply(Xp), fs.apply(Xf), ps, fs, lag, tuple(segs))


def regularized_cov(A: np.ndarray, B: np.ndarray | None = None, eps: float = RIDGE) -> np.ndarray:
    n = len(A)
    if B is not None:
        return A.T @ B / (n - 1)
    S = A.T @ A / (n - 1)
    S = (S + S.T) / 2
    return S + eps * np.trace(S) / S.shape[0] * np.eye(S.shape[0])


def inv_sqrt(S: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    w = np.maximum(w, floor)
    return (V / np.sqrt(w)) @ V.T


def select_R(singvals) -> int:
    """Knee of a descending curve: 1-based index farthest from the end-to-end chord.

    Both axes are rescaled to [0, 1] before measuring distances.
    """
    s = np.asarray(singvals, dtype=float)
    n = len(s)
    if n < 3:
        return 1
    span = s[0] - s[-1]
    if span <= 0:
        return 1
    x = np.arange(n) / (n - 1)
    y = (s - s[-1]) / span
    # chord from (0, 1) to (1, 0): distance proportional to |x + y - 1|
    d = np.abs(x + y - 1.0)
    if d.max() <= 1e-12:
        return 1
    return int(np.argmax(d)) + 1


@dataclass(frozen=True, eq=False)
class CvaModel:
    lag: LagSpec
    past_stats: NormStats
    future_stats: NormStats
    whiten_p: np.ndarray
    whiten_f: np.ndarray
    singvecs_p: np.ndarray  # columns pair with the whitened past space
    singvecs_f: np.ndarray
    singvals: np.ndarray
    R: int
    n_channels: int
    channel_names: tuple = field(default=())

    @property
    def dim(self) -> int:
        return self.whiten_p.shape[0]

    @property
    def proj_full(self) -> np.ndarray:
        return self.singvecs_p.T @ self.whiten_p

    @property
    def proj_future(self) -> np.ndarray:
        return self.singvecs_f.T @ self.whiten_f

    @property
    def proj_sys(self) -> np.ndarray:
        return self.proj_full[: self.R]

    @property
    def proj_res(self) -> np.ndarray:
        return self.residual_projector(self.R)

    def residual_projector(self, r: int) -> np.ndarray:
        """``(I - V_r V_r^T) W_p`` for the first ``r`` past singular vectors."""
        Vr = self.singvecs_p[:, :r]
        return self.whiten_p - Vr @ (Vr.T @ self.whiten_p)

    def with_R(self, R: int) -> "CvaModel":
        if not 1 <= R <= self.dim:
            raise ValueError(f"R must lie in [1, {self.dim}]")
        return CvaModel(**{**self.__dict__, "R": int(R)})

    def normalize_past(self, rows) -> np.ndarray:
        return self.past_stats.apply(rows)

    def features(self, values) -> np.ndarray:
        """Canonical variates for every complete past window of one cycle (anchors ``l..K``)."""
        return self.normalize_past(past_rows(values, self.lag.l)) @ self.proj_full.T

    def save(self, path) -> None:
        arrays = {
            "past_mean": self.past_stats.mean, "past_std": self.past_stats.std,
            "future_mean": self.future_stats.mean, "future_std": self.future_stats.std,
            "whiten_p": self.whiten_p, "whiten_f": self.whiten_f,
            "singvecs_p": self.singvecs_p, "singvecs_f": self.singvecs_f, "singvals": self.singvals,
        }
        meta = {"l": self.lag.l, "h": self.lag.h, "R": self.R, "n_channels": self.n_channels,
                "channel_names": list(self.channel_names)}
        artifacts.save(path, "cva", arrays, meta)

    @classmethod
    def load(cls, path) -> "CvaModel":
        a, m = artifacts.load(path, "cva")
        return cls(LagSpec(m["l"], m["h"]), NormStats(a["past_mean"], a["past_std"]),
                   NormStats(a["future_mean"], a["future_std"]), a["whiten_p"], a["whiten_f"],
                   a["singvecs_p"], a["singvecs_f"], a["singvals"], m["R"], m["n_channels"],
                   tuple(m["channel_names"]))


def fit(pf: PastFutureMatrices, R: int | None = None, channel_names: Sequence[str] = ()) -> CvaModel:
    """Fit the CVA model by SVD of the whitened past/future cross-covariance.

    Parameters
    ----------
    pf : PastFutureMatrices
        Normalized past and future matrices.
    R : int, optional
        Number of system canonical variates; chosen by :func:`select_R` when
        omitted.
    """
    Xp, Xf = pf.X_p, pf.X_f
    N, dp = Xp.shape
    if N <= dp:
        raise ValueError(f"need more rows than past dimensions (N={N}, J_x*l={dp})")
    S_pp, S_ff = regularized_cov(Xp), regularized_cov(Xf)
    if np.trace(S_pp) <= 0 or np.trace(S_ff) <= 0:
        raise ValueError("covariance is rank deficient: every column is constant")
    W_p, W_f = inv_sqrt(S_pp), inv_sqrt(S_ff)
    M = W_p @ regularized_cov(Xp, Xf) @ W_f
    U, s, Vt = np.linalg.svd(M, full_matrices=True)
    # make each canonical pair's sign deterministic
    signs = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U = U * signs
    k = len(s)
    Vt[:k] *= signs[:k, None]
    singvals = np.concatenate([s, np.zeros(dp - k)]) if k < dp else s
    if R is None:
        R = select_R(singvals)
    if not 1 <= R <= dp:
        raise ValueError(f"R must lie in [1, {dp}]")
    n_ch = dp // pf.lag.l
    return CvaModel(pf.lag, pf.past_stats, pf.future_stats, W_p, W_f, U, Vt.T, singvals, int(R),
                    n_ch, tuple(channel_names))


def project(model: CvaModel, past_row):
    """Return ``(z_s, z_r, z_full)`` for normalized past row(s)."""
    x = np.asarray(past_row, dtype=float)
    if x.shape[-1] != model.dim:
        raise ValueError(f"past row has {x.shape[-1]} entries, model expects {model.dim}")
    if x.ndim == 1:
        return model.proj_sys @ x, model.proj_res @ x, model.proj_full @ x
    return x @ model.proj_sys.T, x @ model.proj_res.T, x @ model.proj_full.T


def training_variates(model: CvaModel, pf: PastFutureMatrices) -> np.ndarray:
    """Canonical variates ``Z_x`` of the fitting data (rows = anchors)."""
    return pf.X_p @ model.proj_full.T
