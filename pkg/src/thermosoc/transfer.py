"""Transfer of a reference-temperature SoC estimator to a new temperature.

The target data get their own CVA model. The leading target variates whose
T^2-type statistic stays inside the reference control limits are treated as
consistent and fed to a shared network trained on reference data; the rest
of the target past space feeds a small target-specific network. The two
outputs are blended with adjusting factors updated by exponential
reweighting of their squared errors.
"""
from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import artifacts
from . import cva as cva_mod
from .cva import CvaModel, LagSpec
from .lstm import LstmNetwork, TrainConfig, parse_config, train
from .monitor import RUN_LENGTH, control_limit, longest_run, normal_columns
from .wavelet import WaveletConfig

LOGIT_CLIP = 30.0
SHARED_INPUTS = ("target", "reference")


# ---------------------------------------------------------------------- #
# target variates and consistent-feature selection
# ---------------------------------------------------------------------- #

def extract_target_cvs(target_channels, lag: LagSpec, channel_names=()):
    """Fit a CVA model on target data alone and return ``(Z_t, model)``.

    ``target_channels`` is one channel matrix (or a list of them). The target
    is normalized with its own statistics and every variate is retained.
    """
    cycles = target_channels if isinstance(target_channels, (list, tuple)) else [target_channels]
    pf = cva_mod.arrange_past_future(cycles, lag)
    model = cva_mod.fit(pf, R=pf.X_p.shape[1], channel_names=channel_names)
    return cva_mod.training_variates(model, pf), model


@dataclass
class ConsistentSelection:
    q: int
    per_q_limits: np.ndarray  # CL_q for q = 1..evaluated
    exceed_log: list = field(default_factory=list)

    @property
    def passed(self) -> np.ndarray:
        return np.array([e["passed"] for e in self.exceed_log], dtype=bool)


def select_consistent(Z_x, Z_t, significance: float = 0.95, method: str = "auto",
                      run_length: int = RUN_LENGTH, normal_fraction: float = 0.90,
                      stop_at_first_failure: bool = False) -> ConsistentSelection:
    """Number of leading target variates consistent with the reference.

    For each prefix length ``q`` the reference statistic ``sum(Z_x[:, :q]**2)``
    sets a control limit ``CL_q`` (chi-square when at least ``normal_fraction``
    of the first ``q`` reference variates pass a normality test, a kernel
    density quantile otherwise). Prefix ``q`` passes if the target statistic
    never exceeds ``CL_q`` at ``run_length`` consecutive samples. The
    returned ``q`` is the largest passing prefix (0 when none passes).

    With ``stop_at_first_failure`` the ascending scan ends at the first
    failing prefix and returns the one before it.
    """
    Z_x = np.asarray(Z_x, dtype=float)
    Z_t = np.asarray(Z_t, dtype=float)
    if Z_x.ndim != 2 or Z_t.ndim != 2 or Z_x.shape[1] != Z_t.shape[1]:
        raise ValueError(f"feature dimensions differ: {np.shape(Z_x)} vs {np.shape(Z_t)}")
    normal = normal_columns(Z_x) if method == "auto" else None
    T2x = np.cumsum(Z_x ** 2, axis=1)
    T2t = np.cumsum(Z_t ** 2, axis=1)
    limits, log, q = [], [], 0
    for j in range(Z_x.shape[1]):
        qq = j + 1
        if method == "auto":
            m = "chi-square" if normal[:qq].mean() >= normal_fraction else "kde"
        else:
            m = method
        cl = control_limit(T2x[:, j], m, significance, dof=qq)
        flags = T2t[:, j] > cl
        run = longest_run(flags)
        ok = run < run_length
        limits.append(cl)
        log.append({"q": qq, "limit": cl, "method": m, "n_exceed": int(flags.sum()),
                    "longest_run": run, "passed": bool(ok)})
        if ok:
            q = qq
        elif stop_at_first_failure:
            break
    return ConsistentSelection(q, np.asarray(limits), log)


def similarity_H(Z_x, q: int) -> float:
    """Share of the sample Gram matrix variance carried by the first ``q`` variates.

    ``var`` is taken over all entries of ``Z Z^T`` (samples x samples). For
    centered, whitened variates this equals ``q / dim``.
    """
    Z = np.asarray(Z_x, dtype=float)
    if q <= 0:
        return 0.0

    def gram_var(A):
        n = A.shape[0]
        mean_sq = np.sum((A.T @ A) ** 2) / n ** 2
        mean = np.sum(A.sum(axis=0) ** 2) / n ** 2
        return mean_sq - mean ** 2

    full = gram_var(Z)
    if full <= 0:
        return 0.0
    return float(np.clip(gram_var(Z[:, :q]) / full, 0.0, 1.0))


# ---------------------------------------------------------------------- #
# adjusting factors
# ---------------------------------------------------------------------- #

def _logit_pair(a1: float) -> float:
    a1 = float(np.clip(a1, 1e-300, 1 - 1e-16))
    return float(np.clip(np.log(a1) - np.log1p(-a1), -LOGIT_CLIP, LOGIT_CLIP))


def _from_logit(u: float):
    if u >= 0:
        e = np.exp(-u)
        return 1.0 / (1.0 + e), e / (1.0 + e)
    e = np.exp(u)
    return e / (1.0 + e), 1.0 / (1.0 + e)


def update_alphas(alpha1: float, alpha2: float, f_shared: float, f_specific: float, y: float,
                  eta: float = 0.5):
    """One multiplicative update of the adjusting factors.

    ``alpha_i <- alpha_i * Psi(f_i) / sum_j alpha_j * Psi(f_j)`` with
    ``Psi(f) = exp(-eta * (f - y)**2)``. Carried out on the log-odds, which
    is clipped to +-30 so both factors stay strictly inside (0, 1).
    """
    if not 0 <= eta <= 1:
        raise ValueError("eta must lie in [0, 1]")
    u = np.log(alpha1) - np.log(alpha2) if alpha1 > 0 and alpha2 > 0 else _logit_pair(alpha1)
    u += -eta * (f_shared - y) ** 2 + eta * (f_specific - y) ** 2
    return _from_logit(float(np.clip(u, -LOGIT_CLIP, LOGIT_CLIP)))


def adjust_factors(pred_shared, pred_specific, y, eta: float = 0.5, start=(0.5, 0.5)) -> np.ndarray:
    """Run :func:`update_alphas` over a sequence; returns the ``(K, 2)`` trace after each step."""
    ps, pt, yy = (np.asarray(a, dtype=float).ravel() for a in (pred_shared, pred_specific, y))
    if not len(ps) == len(pt) == len(yy):
        raise ValueError("prediction and label sequences differ in length")
    trace = np.empty((len(yy), 2))
    a1, a2 = start
    for k in range(len(yy)):
        a1, a2 = update_alphas(a1, a2, ps[k], pt[k], yy[k], eta)
        trace[k] = a1, a2
    return trace


# ---------------------------------------------------------------------- #
# model
# ---------------------------------------------------------------------- #

@dataclass(eq=False)
class TransferModel:
    q: int
    shared_net: LstmNetwork | None
    specific_net: LstmNetwork
    alpha1: float
    alpha2: float
    eta: float
    target_cva: CvaModel
    similarity_H: float
    alpha_trace: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    shared_input: str = "target"

    @property
    def proj_q(self) -> np.ndarray:
        return self.target_cva.proj_full[: self.q]

    @property
    def proj_resid(self) -> np.ndarray:
        return self.target_cva.residual_projector(self.q)

    @property
    def target_norm_stats(self):
        return self.target_cva.past_stats

    def combine(self, f_shared, f_specific):
        f_shared = 0.0 if self.shared_net is None else np.asarray(f_shared, dtype=float)
        return self.alpha1 * f_shared + self.alpha2 * np.asarray(f_specific, dtype=float)

    def predict_channels(self, values) -> np.ndarray:
        """Batch estimates for one cycle's settled channel matrix (anchors ``l..K``)."""
        X = self.target_cva.normalize_past(cva_mod.past_rows(values, self.target_cva.lag.l))
        f_t = self.specific_net.forward(X @ self.proj_resid.T)
        f_q = self.shared_net.forward(X @ self.proj_q.T) if self.shared_net is not None else 0.0
        return np.clip(self.combine(f_q, f_t), 0.0, 100.0)

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        self.target_cva.save(os.path.join(directory, "target_cva.npz"))
        self.specific_net.save(os.path.join(directory, "specific_net.npz"))
        if self.shared_net is not None:
            self.shared_net.save(os.path.join(directory, "shared_net.npz"))
        np.savetxt(os.path.join(directory, "alpha_trace.csv"), self.alpha_trace, delimiter=",",
                   header="alpha1,alpha2", comments="")
        meta = {"kind": "transfer", "version": 1, "q": self.q, "alpha1": self.alpha1,
                "alpha2": self.alpha2, "eta": self.eta, "similarity_H": self.similarity_H,
                "shared_input": self.shared_input}
        with open(os.path.join(directory, "transfer.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "TransferModel":
        with open(os.path.join(directory, "transfer.json")) as fh:
            meta = json.load(fh)
        if meta.get("kind") != "transfer" or meta.get("version") != 1:
            raise artifacts.ArtifactError(f"{directory}: not a version-1 transfer model")
        shared_path = os.path.join(directory, "shared_net.npz")
        shared = LstmNetwork.load(shared_path) if meta["q"] > 0 else None
        trace = np.loadtxt(os.path.join(directory, "alpha_trace.csv"), delimiter=",", skiprows=1, ndmin=2)
        return cls(meta["q"], shared, LstmNetwork.load(os.path.join(directory, "specific_net.npz")),
                   meta["alpha1"], meta["alpha2"], meta["eta"],
                   CvaModel.load(os.path.join(directory, "target_cva.npz")), meta["similarity_H"],
                   trace.reshape(-1, 2), meta["shared_input"])


# ---------------------------------------------------------------------- #
# training
# ---------------------------------------------------------------------- #

def train_shared(Z_xq_sequences, Y_sour, cfg: TrainConfig, config: str = "L(50,100)N(100)",
                 validation=None, seed: int = 0):
    """Multi-layer LSTM on consistent reference variates; ``None`` when ``q = 0``.

    Returns ``(net, history)``.
    """
    seqs = [np.asarray(Z, dtype=float) for Z in Z_xq_sequences]
    if not seqs or seqs[0].ndim != 2:
        raise ValueError("expected a list of (T, q) feature sequences")
    q = seqs[0].shape[1]
    if q == 0:
        return None, {"train_loss": [], "val_loss": [], "best_epoch": -1, "epochs": 0}
    net = LstmNetwork.from_config(config, q, seed=seed)
    return train(net, list(zip(seqs, Y_sour)), cfg, validation=validation)


def train_transfer(shared_net: LstmNetwork | None, target_channels, Y_t, target_cva: CvaModel, q: int,
                   eta: float = 0.5, cfg: TrainConfig = TrainConfig(), specific_config: str = "L(50)N(100)",
                   reference_Zq=None, shared_input: str = "target", similarity: float = 1.0,
                   validation=None, seed: int = 0) -> TransferModel:
    """Train the target-specific network and set the adjusting factors.

    Parameters
    ----------
    shared_net : LstmNetwork or None
        Frozen shared predictor (``None`` disables the shared path, ``q = 0``).
    target_channels : list of ndarray
        Settled channel matrices of the labeled target cycles.
    Y_t : list of ndarray
        SoC labels aligned with the past windows of each target cycle.
    target_cva : CvaModel
        CVA fitted on target data with every variate retained.
    reference_Zq : list of ndarray, optional
        Consistent reference variates used as shared input during factor
        adaptation when ``shared_input="reference"``.
    """
    if shared_input not in SHARED_INPUTS:
        raise ValueError(f"shared_input must be one of {SHARED_INPUTS}")
    if not 0 <= q <= target_cva.dim:
        raise ValueError(f"q must lie in [0, {target_cva.dim}]")
    if q > 0 and shared_net is None:
        raise ValueError("q > 0 needs a shared network")
    if len(parse_config(specific_config)[0]) != 1:
        raise ValueError("the specific network must have a single LSTM layer")

    Xs = [target_cva.normalize_past(cva_mod.past_rows(v, target_cva.lag.l)) for v in target_channels]
    ys = [np.asarray(y, dtype=float) for y in Y_t]
    P_res = target_cva.residual_projector(q)
    spec_in = [X @ P_res.T for X in Xs]
    net = LstmNetwork.from_config(specific_config, target_cva.dim, seed=seed)
    val = None
    if validation:
        val = [(target_cva.normalize_past(cva_mod.past_rows(v, target_cva.lag.l)) @ P_res.T, y)
               for v, y in validation]
    specific, _ = train(net, list(zip(spec_in, ys)), cfg, validation=val)

    f_t = np.concatenate([specific.forward(S) for S in spec_in])
    y_all = np.concatenate(ys)
    if q == 0:
        trace = np.tile([0.0, 1.0], (len(y_all), 1))
        a1, a2 = 0.0, 1.0
    else:
        if shared_input == "target":
            P_q = target_cva.proj_full[:q]
            f_q = np.concatenate([shared_net.forward(X @ P_q.T) for X in Xs])
        else:
            if reference_Zq is None:
                raise ValueError("shared_input='reference' needs reference_Zq")
            f_q = np.concatenate([shared_net.forward(Z) for Z in reference_Zq])
            n = min(len(f_q), len(y_all))
            f_q, f_t, y_all = f_q[:n], f_t[:n], y_all[:n]
        trace = adjust_factors(f_q, f_t, y_all, eta)
        a1, a2 = (float(a) for a in trace[-1])
    return TransferModel(q, shared_net, specific, a1, a2, eta, target_cva, similarity, trace, shared_input)


# ---------------------------------------------------------------------- #
# online estimation
# ---------------------------------------------------------------------- #

class TargetPredictor:
    """Per-stream state for online estimates at the target temperature."""

    def __init__(self, model: TransferModel, wavelet: WaveletConfig):
        self.model = model
        l = model.target_cva.lag.l
        self.channels = wavelet.stream(l)
        self.settle = wavelet.settle(l)
        self.window = deque(maxlen=l)
        self._P_q, self._P_res = model.proj_q, model.proj_resid
        self._s_shared = self._s_specific = None
        self.k = -1

    @property
    def warmup(self) -> int:
        return self.settle + self.model.target_cva.lag.l - 1

    def push(self, current: float, voltage: float) -> float | None:
        self.k += 1
        row = self.channels.push(current, voltage)
        if self.k < self.settle:
            return None
        self.window.appendleft(row)
        if len(self.window) < self.window.maxlen:
            return None
        x = self.model.target_cva.normalize_past(np.concatenate(self.window))
        f_t, self._s_specific = self.model.specific_net.step(self._P_res @ x, self._s_specific)
        f_q = 0.0
        if self.model.shared_net is not None:
            f_q, self._s_shared = self.model.shared_net.step(self._P_q @ x, self._s_shared)
        return float(np.clip(self.model.combine(f_q, f_t), 0.0, 100.0))


def predict_target(model: TransferModel, wavelet: WaveletConfig, raw_stream):
    """Online estimates for a stream of ``(current, voltage)`` samples.

    Returns ``(sample_index, estimates)``; estimates start after the warm-up.
    """
    pred = TargetPredictor(model, wavelet)
    out = []
    for current, voltage in raw_stream:
        y = pred.push(current, voltage)
        if y is not None:
            out.append(y)
    if not out:
        raise ValueError(f"stream shorter than the warm-up of {pred.warmup + 1} samples")
    return np.arange(pred.warmup, pred.warmup + len(out)), np.asarray(out)
