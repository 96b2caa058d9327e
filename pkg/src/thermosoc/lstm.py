"""Multi-layer LSTM regressor written against numpy, double precision.

Architecture: stacked LSTM layers -> one fully-connected layer (ReLU by
default, dropout during training) -> linear scalar output at every time step.
Inputs are standardized and the output de-standardized with statistics stored
on the network, so the weights work in unit scale.

Gate layout inside each ``(D + H, 4H)`` weight matrix: input, forget, output,
candidate.
"""
from __future__ import annotations

import copy
import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import artifacts

log = logging.getLogger(__name__)

_CONFIG_RE = re.compile(r"^\s*L\(\s*([\d\s,]*)\)\s*N\(\s*(\d+)\s*\)\s*$")


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite during training."""


def parse_config(config: str) -> tuple[tuple[int, ...], int]:
    """Parse ``L(n1[,n2...])N(m)`` into LSTM layer sizes and the dense width."""
    m = _CONFIG_RE.match(config)
    if not m:
        raise ValueError(f"bad network config {config!r}; expected e.g. 'L(50,100)N(100)'")
    cells = tuple(int(s) for s in m.group(1).replace(" ", "").split(",") if s)
    if any(c < 1 for c in cells):
        raise ValueError(f"bad network config {config!r}: cell counts must be positive")
    return cells, int(m.group(2))


def format_config(lstm_sizes: Sequence[int], dense_size: int) -> str:
    return f"L({','.join(map(str, lstm_sizes))})N({dense_size})"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    max_epochs: int = 2000
    dropout_rate: float = 0.20
    l2_lambda: float = 1e-5
    early_stop_patience: int = 50
    seq_len: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 5.0
    lr_patience: int = 0          # epochs without improvement before the rate is cut (0 = constant)
    lr_factor: float = 0.5
    min_learning_rate: float = 1e-4

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.seq_len < 1 or self.max_epochs < 0:
            raise ValueError("batch_size, seq_len must be >= 1 and max_epochs >= 0")
        if not 0 < self.lr_factor <= 1 or self.lr_patience < 0:
            raise ValueError("lr_factor must lie in (0, 1] and lr_patience >= 0")


@dataclass(eq=False)
class LstmNetwork:
    lstm_sizes: tuple
    dense_size: int
    input_dim: int
    params: dict
    activation: str = "relu"
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    y_mean: float = 0.0
    y_scale: float = 1.0
    seed: int = 0

    # ------------------------------------------------------------------ #
    @classmethod
    def build(cls, lstm_sizes: Sequence[int], dense_size: int, input_dim: int, seed: int = 0,
              activation: str = "relu") -> "LstmNetwork":
        """Randomly initialized network: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), forget bias 1."""
        if activation not in ("relu", "tanh", "linear"):
            raise ValueError(f"unknown dense activation {activation!r}")
        rng = np.random.default_rng(seed)
        params = {}
        d = input_dim
        for i, H in enumerate(lstm_sizes):
            bound = 1.0 / np.sqrt(d + H)
            params[f"lstm{i}.W"] = rng.uniform(-bound, bound, (d + H, 4 * H))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            params[f"lstm{i}.b"] = b
            d = H
        if dense_size:
            bound = 1.0 / np.sqrt(d)
            params["dense.W"] = rng.uniform(-bound, bound, (d, dense_size))
            params["dense.b"] = np.zeros(dense_size)
            d = dense_size
        bound = 1.0 / np.sqrt(d)
        params["head.W"] = rng.uniform(-bound, bound, (d, 1))
        params["head.b"] = np.zeros(1)
        return cls(tuple(lstm_sizes), int(dense_size), int(input_dim), params, activation, seed=seed)

    @classmethod
    def from_config(cls, config: str, input_dim: int, seed: int = 0) -> "LstmNetwork":
        cells, dense = parse_config(config)
        return cls.build(cells, dense, input_dim, seed)

    @property
    def config(self) -> str:
        return format_config(self.lstm_sizes, self.dense_size)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "LstmNetwork":
        return copy.deepcopy(self)

    def zeros_like_params(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # ------------------------------------------------------------------ #
    def _scale_in(self, X):
        if self.x_mean is None:
            return X
        return (X - self.x_mean) / self.x_scale

    def initial_state(self, batch: int = 1):
        return [(np.zeros((batch, H)), np.zeros((batch, H))) for H in self.lstm_sizes]

    def _forward(self, X, state=None, dropout_mask=None):
        """Raw (standardized-space) outputs for ``X`` of shape ``(B, T, D)``."""
        p = self.params
        B, T, _ = X.shape
        state = state or self.initial_state(B)
        caches, final = [], []
        inp = X
        for i, H in enumerate(self.lstm_sizes):
            W, b = p[f"lstm{i}.W"], p[f"lstm{i}.b"]
            d_in = inp.shape[2]
            xz = inp @ W[:d_in] + b
            W_h = W[d_in:]
            h, c = state[i]
            hs = np.empty((B, T, H))
            cs = np.empty((B, T, H))
            gates = np.empty((B, T, 4 * H))
            h_prev = np.empty((B, T, H))
            c_prev = np.empty((B, T, H))
            for t in range(T):
                h_prev[:, t], c_prev[:, t] = h, c
                z = xz[:, t] + h @ W_h
                g = np.empty_like(z)
                g[:, :3 * H] = _sigmoid(z[:, :3 * H])
                g[:, 3 * H:] = np.tanh(z[:, 3 * H:])
                c = g[:, H:2 * H] * c + g[:, :H] * g[:, 3 * H:]
                h = g[:, 2 * H:3 * H] * np.tanh(c)
                gates[:, t], cs[:, t], hs[:, t] = g, c, h
            caches.append((inp, gates, cs, h_prev, c_prev))
            final.append((h, c))
            inp = hs
        pre = act = None
        if self.dense_size:
            pre = inp @ p["dense.W"] + p["dense.b"]
            if self.activation == "relu":
                act = np.maximum(pre, 0.0)
            elif self.activation == "tanh":
                act = np.tanh(pre)
            else:
                act = pre
            if dropout_mask is not None:
                act = act * dropout_mask
            top = act
        else:
            top = inp
        y = (top @ p["head.W"])[..., 0] + p["head.b"][0]
        cache = (caches, inp, pre, act, top, dropout_mask)
        return y, cache, final

    def _backward(self, cache, dy) -> dict:
        p = self.params
        caches, lstm_out, pre, act, top, mask = cache
        grads = {}
        grads["head.W"] = np.einsum("btm,bt->m", top, dy)[:, None]
        grads["head.b"] = np.array([dy.sum()])
        dtop = dy[..., None] * p["head.W"][:, 0]
        if self.dense_size:
            da = dtop if mask is None else dtop * mask
            if self.activation == "relu":
                dpre = da * (pre > 0)
            elif self.activation == "tanh":
                dpre = da * (1.0 - np.tanh(pre) ** 2)
            else:
                dpre = da
            grads["dense.W"] = np.einsum("btd,btm->dm", lstm_out, dpre)
            grads["dense.b"] = dpre.sum(axis=(0, 1))
            dH = dpre @ p["dense.W"].T
        else:
            dH = dtop
        for i in reversed(range(len(self.lstm_sizes))):
            H = self.lstm_sizes[i]
            W = p[f"lstm{i}.W"]
            inp, gates, cs, h_prev, c_prev = caches[i]
            d_in = inp.shape[2]
            W_h = W[d_in:]
            B, T, _ = gates.shape
            dz_all = np.empty((B, T, 4 * H))
            dh_next = np.zeros((B, H))
            dc_next = np.zeros((B, H))
            for t in reversed(range(T)):
                g = gates[:, t]
                ig, fg, og, cg = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
                tc = np.tanh(cs[:, t])
                dh = dH[:, t] + dh_next
                dc = dh * og * (1.0 - tc ** 2) + dc_next
                dz = dz_all[:, t]
                dz[:, :H] = dc * cg * ig * (1.0 - ig)
                dz[:, H:2 * H] = dc * c_prev[:, t] * fg * (1.0 - fg)
                dz[:, 2 * H:3 * H] = dh * tc * og * (1.0 - og)
                dz[:, 3 * H:] = dc * ig * (1.0 - cg ** 2)
                dc_next = dc * fg
                dh_next = dz @ W_h.T
            grads[f"lstm{i}.W"] = np.vstack([
                np.einsum("btd,btg->dg", inp, dz_all),
                np.einsum("bth,btg->hg", h_prev, dz_all),
            ])
            grads[f"lstm{i}.b"] = dz_all.sum(axis=(0, 1))
            dH = dz_all @ W[:d_in].T
        return grads

    # ------------------------------------------------------------------ #
    def forward(self, sequence) -> np.ndarray:
        """Many-to-many predictions for a ``(T, D)`` sequence (or ``(B, T, D)`` batch)."""
        X = np.asarray(sequence, dtype=float)
        single = X.ndim == 2
        if single:
            X = X[None]
        if X.ndim != 3 or X.shape[2] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got shape {np.shape(sequence)}")
        if not all(np.all(np.isfinite(v)) for v in self.params.values()):
            raise ValueError("network has non-finite weights")
        y, _, _ = self._forward(self._scale_in(X))
        y = y * self.y_scale + self.y_mean
        return y[0] if single else y

    predict = forward

    def step(self, x, state=None):
        """One online step for a single ``(D,)`` sample; returns ``(y, new_state)``."""
        X = np.asarray(x, dtype=float).reshape(1, 1, -1)
        if X.shape[2] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got {X.shape[2]}")
        y, _, final = self._forward(self._scale_in(X), state)
        return float(y[0, 0] * self.y_scale + self.y_mean), final

    def loss_and_grad(self, sequence, target):
        """Squared-error loss ``sum (y - yhat)^2`` and its gradient for one sequence."""
        X = self._scale_in(np.asarray(sequence, dtype=float))[None]
        t = np.asarray(target, dtype=float)
        y, cache, _ = self._forward(X)
        err = (y[0] * self.y_scale + self.y_mean) - t
        grads = self._backward(cache, (2.0 * err * self.y_scale)[None])
        return float(np.sum(err ** 2)), grads

    # ------------------------------------------------------------------ #
    def save(self, path) -> None:
        arrays = {f"p.{k}": v for k, v in self.params.items()}
        if self.x_mean is not None:
            arrays["x_mean"], arrays["x_scale"] = self.x_mean, self.x_scale
        meta = {"lstm_sizes": list(self.lstm_sizes), "dense_size": self.dense_size,
                "input_dim": self.input_dim, "activation": self.activation,
                "y_mean": self.y_mean, "y_scale": self.y_scale, "seed": self.seed}
        artifacts.save(path, "lstm", arrays, meta)

    @classmethod
    def load(cls, path) -> "LstmNetwork":
        a, m = artifacts.load(path, "lstm")
        params = {k[2:]: v for k, v in a.items() if k.startswith("p.")}
        return cls(tuple(m["lstm_sizes"]), m["dense_size"], m["input_dim"], params, m["activation"],
                   a.get("x_mean"), a.get("x_scale"), m["y_mean"], m["y_scale"], m["seed"])


def forward(net: LstmNetwork, sequence) -> np.ndarray:
    return net.forward(sequence)


# ---------------------------------------------------------------------- #
# training
# ---------------------------------------------------------------------- #

def _pad(seqs, targets):
    T = max(len(s) for s in seqs)
    D = seqs[0].shape[1]
    X = np.zeros((len(seqs), T, D))
    Y = np.zeros((len(seqs), T))
    M = np.zeros((len(seqs), T))
    for j, (s, y) in enumerate(zip(seqs, targets)):
        X[j, :len(s)], Y[j, :len(s)], M[j, :len(s)] = s, y, 1.0
    return X, Y, M


def _is_weight(name: str) -> bool:
    return name.endswith(".W")


def _eval_loss(net: LstmNetwork, data) -> float:
    """Mean squared error in standardized target units over all samples."""
    total, count = 0.0, 0
    for X, y in data:
        pred = net.forward(X)
        total += float(np.sum(((pred - y) / net.y_scale) ** 2))
        count += len(y)
    return total / max(count, 1)


def train(net: LstmNetwork, data, cfg: TrainConfig = TrainConfig(), validation=None,
          standardize: bool = True):
    """Fit ``net`` to ``(sequence, target)`` pairs with Adam and truncated BPTT.

    Sequences are grouped into mini-batches of ``cfg.batch_size`` sequences
    and processed in consecutive ``cfg.seq_len`` chunks; the recurrent state
    carries across chunks but gradients do not. Training stops after
    ``cfg.early_stop_patience`` epochs without improvement of the validation
    loss (training loss if no validation data) and the best weights are kept.
    With ``cfg.lr_patience > 0`` the learning rate starts at
    ``cfg.learning_rate`` and is multiplied by ``cfg.lr_factor`` whenever the
    monitored loss has not improved for ``lr_patience`` epochs.

    Returns
    -------
    (LstmNetwork, dict)
        A trained copy and its loss history.
    """
    data = [(np.asarray(X, float), np.asarray(y, float)) for X, y in data]
    if not data:
        raise ValueError("no training sequences")
    for X, y in data:
        if X.ndim != 2 or X.shape[1] != net.input_dim or len(X) != len(y):
            raise ValueError("each sequence must be (T, input_dim) with T targets")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
    validation = [(np.asarray(X, float), np.asarray(y, float)) for X, y in (validation or [])]

    net = net.copy()
    if standardize:
        allX = np.vstack([X for X, _ in data])
        ally = np.concatenate([y for _, y in data])
        sd = allX.std(axis=0)
        net.x_mean, net.x_scale = allX.mean(axis=0), np.where(sd > 1e-12, sd, 1.0)
        net.y_mean = float(ally.mean())
        ysd = float(ally.std())
        net.y_scale = ysd if ysd > 1e-12 else 1.0

    rng = np.random.default_rng(cfg.seed)
    m = net.zeros_like_params()
    v = net.zeros_like_params()
    t_adam = 0
    keep = 1.0 - cfg.dropout_rate

    scaled = [(net._scale_in(X), (y - net.y_mean) / net.y_scale) for X, y in data]
    history = {"train_loss": [], "val_loss": [], "best_epoch": -1, "epochs": 0}
    best, best_params, stale = np.inf, copy.deepcopy(net.params), 0
    lr, lr_stale = cfg.learning_rate, 0

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(scaled))
        ep_loss, ep_count = 0.0, 0
        for b0 in range(0, len(order), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            X, Y, M = _pad([scaled[j][0] for j in idx], [scaled[j][1] for j in idx])
            state = None
            for s0 in range(0, X.shape[1], cfg.seq_len):
                sl = slice(s0, s0 + cfg.seq_len)
                Mc = M[:, sl]
                n_valid = Mc.sum()
                if n_valid == 0:
                    break
                mask = None
                if net.dense_size and cfg.dropout_rate > 0:
                    mask = (rng.random((X.shape[0], Mc.shape[1], net.dense_size)) < keep) / keep
                y, cache, final = net._forward(X[:, sl], state, mask)
                err = (y - Y[:, sl]) * Mc
                loss = float(np.sum(err ** 2)) / n_valid
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, chunk starting {s0}")
                ep_loss += loss * n_valid
                ep_count += n_valid
                grads = net._backward(cache, 2.0 * err / n_valid)
                if cfg.l2_lambda:
                    for k in grads:
                        if _is_weight(k):
                            grads[k] += 2.0 * cfg.l2_lambda * net.params[k]
                if cfg.grad_clip:
                    norm = np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
                    if norm > cfg.grad_clip:
                        for k in grads:
                            grads[k] *= cfg.grad_clip / norm
                t_adam += 1
                lr_t = lr * np.sqrt(1 - cfg.beta2 ** t_adam) / (1 - cfg.beta1 ** t_adam)
                for k, g in grads.items():
                    m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                    v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
                    net.params[k] = net.params[k] - lr_t * m[k] / (np.sqrt(v[k]) + cfg.adam_eps)
                state = [(h.copy(), c.copy()) for h, c in final]
        train_loss = ep_loss / max(ep_count, 1)
        history["train_loss"].append(train_loss)
        if validation:
            val_loss = _eval_loss(net, validation)
            if not np.isfinite(val_loss):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            history["val_loss"].append(val_loss)
            score = val_loss
        else:
            score = train_loss
        history["epochs"] = epoch + 1
        if score < best - 1e-12:
            best, best_params, stale, lr_stale = score, copy.deepcopy(net.params), 0, 0
            history["best_epoch"] = epoch
        else:
            stale += 1
            lr_stale += 1
            if cfg.lr_patience and lr_stale >= cfg.lr_patience and lr > cfg.min_learning_rate:
                lr, lr_stale = max(lr * cfg.lr_factor, cfg.min_learning_rate), 0
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                log.info("early stop at epoch %d (best %d)", epoch, history["best_epoch"])
                break
    if history["epochs"]:
        net.params = best_params
    return net, history


# ---------------------------------------------------------------------- #
# gradient check
# ---------------------------------------------------------------------- #

def numeric_gradient(net: LstmNetwork, sequence, target, epsilon: float = 1e-5) -> dict:
    """Central finite-difference gradient of the squared-error loss."""
    work = net.copy()
    out = {}
    for k, p in work.params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            lp, _ = work.loss_and_grad(sequence, target)
            flat[j] = orig - epsilon
            lm, _ = work.loss_and_grad(sequence, target)
            flat[j] = orig
            gflat[j] = (lp - lm) / (2 * epsilon)
        out[k] = g
    return out


def gradient_check(net: LstmNetwork, sequence, target, epsilon: float = 1e-5, atol: float = 1e-7) -> float:
    """Largest ``|analytic - numeric| / max(|analytic|, |numeric|, atol)`` over all parameters."""
    _, analytic = net.loss_and_grad(sequence, target)
    numeric = numeric_gradient(net, sequence, target, epsilon)
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
        worst = max(worst, float(rel.max()))
    return worst
