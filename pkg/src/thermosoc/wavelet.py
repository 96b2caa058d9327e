"""Undecimated (stationary) wavelet multiresolution analysis.

Each level smooths the previous approximation with the autocorrelation of the
orthonormal scaling filter, dilated by ``2**(j-1)`` (a trous). The detail band
is the difference between consecutive approximations, so the bands add back to
the input exactly and every band is zero-phase and as long as the input. For
circular boundaries this equals per-level inverse-SWT reconstruction.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

_SQRT3 = np.sqrt(3.0)
SCALING_FILTERS = {
    "haar": np.array([1.0, 1.0]) / np.sqrt(2.0),
    "db2": np.array([1 + _SQRT3, 3 + _SQRT3, 3 - _SQRT3, 1 - _SQRT3]) / (4 * np.sqrt(2.0)),
}


def smoothing_kernel(basis: str) -> np.ndarray:
    """Symmetric, unit-sum level-1 smoothing kernel for ``basis``."""
    try:
        h = SCALING_FILTERS[basis]
    except KeyError:
        raise ValueError(f"unknown wavelet basis {basis!r}; choose from {sorted(SCALING_FILTERS)}") from None
    return np.correlate(h, h, mode="full") / 2.0


def support_halfwidth(levels: int, basis: str = "haar") -> int:
    """Samples each side that influence a band value at ``levels`` levels."""
    half = (len(smoothing_kernel(basis)) - 1) // 2
    return half * (2 ** levels - 1)


@dataclass(frozen=True, eq=False)
class WaveletDecomposition:
    approximation: np.ndarray
    details: np.ndarray  # (levels, K)
    levels: int
    basis: str

    def bands(self) -> np.ndarray:
        """``(levels + 1, K)`` stack: approximation first, then details 1..J."""
        return np.vstack([self.approximation[None, :], self.details])

    def reconstruct(self) -> np.ndarray:
        return self.approximation + self.details.sum(axis=0)


def _mra(x: np.ndarray, levels: int, basis: str) -> np.ndarray:
    """Bands along the last axis of ``x``; returns ``(levels + 1, ..., K)``."""
    K = x.shape[-1]
    if levels == 0:
        return x[None].copy()
    g = smoothing_kernel(basis)
    half = (len(g) - 1) // 2
    pad = half * (2 ** levels - 1)
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    a = np.pad(x, widths, mode="symmetric")
    details = []
    for j in range(1, levels + 1):
        step = 2 ** (j - 1)
        w = half * step
        n = a.shape[-1] - 2 * w
        nxt = np.zeros(a.shape[:-1] + (n,))
        for t, coef in enumerate(g):
            off = t * step
            nxt += coef * a[..., off:off + n]
        details.append(a[..., w:w + n] - nxt)
        a = nxt
    out = [a]
    for d in details:
        trim = (d.shape[-1] - K) // 2
        out.append(d[..., trim:trim + K])
    return np.stack(out)


def decompose(signal, levels: int, basis: str = "haar") -> WaveletDecomposition:
    """Split ``signal`` into an approximation and ``levels`` detail bands.

    ``levels = 0`` is a pass-through: the approximation is the signal itself.
    Boundaries are handled by symmetric padding, trimmed after the transform.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    if levels < 0:
        raise ValueError("levels must be >= 0")
    if len(x) < 2 ** levels:
        raise ValueError(f"signal of length {len(x)} too short for {levels} levels (need {2 ** levels})")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")
    bands = _mra(x, levels, basis)
    return WaveletDecomposition(bands[0], bands[1:], levels, basis)


def buffer_length(levels: int, lag: int = 0) -> int:
    """Causal buffer length ``max(2**J, l + 1)``."""
    return max(2 ** levels, lag + 1)


def _front_fill(history: np.ndarray, length: int) -> np.ndarray:
    if len(history) >= length:
        return history[-length:]
    return np.pad(history, (length - len(history), 0), mode="symmetric")


def causal_decompose(signal, levels: int, basis: str = "haar", buffer_len: int | None = None) -> WaveletDecomposition:
    """Band values computable online: sample ``k`` only sees ``signal[:k+1]``.

    Each sample's bands are the last column of :func:`decompose` applied to
    the trailing ``buffer_len`` samples; before the buffer fills, the missing
    leading samples are a symmetric reflection of what has been seen.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or len(x) == 0:
        raise ValueError("signal must be a non-empty 1-D series")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")
    B = buffer_len or buffer_length(levels)
    if B < 2 ** levels:
        raise ValueError(f"buffer of {B} samples too short for {levels} levels")
    K = len(x)
    windows = np.empty((K, B))
    head = min(K, B - 1)
    for k in range(head):
        windows[k] = _front_fill(x[:k + 1], B)
    if K > head:
        windows[head:] = np.lib.stride_tricks.sliding_window_view(x, B)[: K - head]
    bands = _mra(windows, levels, basis)[..., -1]
    return WaveletDecomposition(bands[0], bands[1:], levels, basis)


class CausalBandBuffer:
    """Streaming counterpart of :func:`causal_decompose` for one signal."""

    def __init__(self, levels: int, basis: str = "haar", buffer_len: int | None = None):
        self.levels = levels
        self.basis = basis
        self.buffer_len = buffer_len or buffer_length(levels)
        smoothing_kernel(basis)
        self._hist = deque(maxlen=self.buffer_len)

    def push(self, sample: float) -> np.ndarray:
        """Add one sample; return its ``levels + 1`` band values."""
        if not np.isfinite(sample):
            raise ValueError("non-finite sample")
        self._hist.append(float(sample))
        window = _front_fill(np.fromiter(self._hist, float), self.buffer_len)
        return _mra(window[None, :], self.levels, self.basis)[:, 0, -1]


@dataclass(frozen=True, eq=False)
class ChannelMatrix:
    values: np.ndarray  # (K, J_x)
    channel_names: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != len(self.channel_names):
            raise ValueError("values must be K x J_x with one name per column")
        if not np.all(np.isfinite(v)):
            raise ValueError("channel matrix has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]


def _band_names(prefix: str, levels: int) -> list[str]:
    return [f"{prefix}_a"] + [f"{prefix}_d{j}" for j in range(1, levels + 1)]


def assemble_channels(current_dec: WaveletDecomposition, voltage_dec: WaveletDecomposition) -> ChannelMatrix:
    """Stack ``[c_a, c_1..c_Jc, v_a, v_1..v_Jv]`` into a ``K x (Jc + Jv + 2)`` matrix."""
    c, v = current_dec.bands(), voltage_dec.bands()
    if c.shape[1] != v.shape[1]:
        raise ValueError(f"length mismatch: current {c.shape[1]} vs voltage {v.shape[1]}")
    names = _band_names("current", current_dec.levels) + _band_names("voltage", voltage_dec.levels)
    return ChannelMatrix(np.vstack([c, v]).T, tuple(names))


@dataclass(frozen=True)
class WaveletConfig:
    levels: int = 5
    basis: str = "haar"
    causal: bool = True

    def channels(self, current, voltage, lag: int = 0) -> ChannelMatrix:
        """Channel matrix for one cycle's raw current and voltage."""
        if self.causal:
            B = buffer_length(self.levels, lag)
            cd = causal_decompose(current, self.levels, self.basis, B)
            vd = causal_decompose(voltage, self.levels, self.basis, B)
        else:
            cd = decompose(current, self.levels, self.basis)
            vd = decompose(voltage, self.levels, self.basis)
        return assemble_channels(cd, vd)

    def settle(self, lag: int = 0) -> int:
        """Leading samples whose causal bands still depend on front-fill padding."""
        return buffer_length(self.levels, lag) - 1 if self.causal else 0

    def settled_channels(self, current, voltage, lag: int = 0) -> np.ndarray:
        """Channel values with the buffer-fill period dropped (rows ``settle..K-1``)."""
        return self.channels(current, voltage, lag).values[self.settle(lag):]

    def stream(self, lag: int = 0) -> "ChannelStream":
        return ChannelStream(self, lag)


class ChannelStream:
    """Per-sample channel rows, identical to ``WaveletConfig.channels`` with ``causal=True``."""

    def __init__(self, cfg: WaveletConfig, lag: int = 0):
        if not cfg.causal:
            raise ValueError("online channel extraction requires the causal transform")
        B = buffer_length(cfg.levels, lag)
        self._current = CausalBandBuffer(cfg.levels, cfg.basis, B)
        self._voltage = CausalBandBuffer(cfg.levels, cfg.basis, B)

    def push(self, current: float, voltage: float) -> np.ndarray:
        return np.concatenate([self._current.push(current), self._voltage.push(voltage)])
