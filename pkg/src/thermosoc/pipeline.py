"""Glue between the stages: per-cycle features, the reference bundle, transfer training."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import artifacts
from . import cva as cva_mod
from . import transfer as tr
from .cva import CvaModel, LagSpec
from .dataset import DischargeCycle
from .lstm import LstmNetwork, TrainConfig, train
from .monitor import MonitoringModel, build_monitor, evaluate_stream
from .wavelet import WaveletConfig

log = logging.getLogger(__name__)


def cycle_channels(cycle: DischargeCycle, wavelet: WaveletConfig, lag: int) -> np.ndarray:
    """Settled channel matrix of one cycle (buffer-fill rows dropped)."""
    return wavelet.settled_channels(cycle.current_A, cycle.voltage_V, lag)


def cycle_labels(cycle: DischargeCycle, wavelet: WaveletConfig, lag: int) -> np.ndarray:
    """SoC at the newest sample of every past window, aligned with :func:`cycle_channels` rows."""
    return np.asarray(cycle.soc_pct[wavelet.settle(lag) + lag - 1:], dtype=float)


def first_estimate_index(wavelet: WaveletConfig, lag: int) -> int:
    return wavelet.settle(lag) + lag - 1


def channel_names(wavelet: WaveletConfig) -> tuple:
    bands = ["a"] + [f"d{j}" for j in range(1, wavelet.levels + 1)]
    return tuple(f"{s}_{b}" for s in ("current", "voltage") for b in bands)


# ---------------------------------------------------------------------- #
# reference model
# ---------------------------------------------------------------------- #

@dataclass(eq=False)
class ReferenceModel:
    """Wavelet settings, CVA model, monitoring limits and the reference network."""

    wavelet: WaveletConfig
    cva: CvaModel
    monitor: MonitoringModel
    net: LstmNetwork

    @property
    def lag(self) -> int:
        return self.cva.lag.l

    def channels(self, cycle) -> np.ndarray:
        return cycle_channels(cycle, self.wavelet, self.lag)

    def features(self, cycle) -> np.ndarray:
        return self.cva.features(self.channels(cycle))

    def labels(self, cycle) -> np.ndarray:
        return cycle_labels(cycle, self.wavelet, self.lag)

    def predict(self, cycle):
        """Batch estimates for a cycle; returns ``(sample_index, estimates)``."""
        y = np.clip(self.net.forward(self.features(cycle)), 0.0, 100.0)
        k0 = first_estimate_index(self.wavelet, self.lag)
        return np.arange(k0, k0 + len(y)), y

    def monitor_cycle(self, cycle, with_estimates: bool = True):
        stream = zip(cycle.current_A, cycle.voltage_V)
        return evaluate_stream(self.monitor, self.cva, self.wavelet, stream,
                               self.net if with_estimates else None)

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        self.cva.save(os.path.join(directory, "cva.npz"))
        self.net.save(os.path.join(directory, "net.npz"))
        with open(os.path.join(directory, "monitor.json"), "w") as fh:
            fh.write(self.monitor.to_json())
        with open(os.path.join(directory, "reference.json"), "w") as fh:
            json.dump({"kind": "reference", "version": 1, "wavelet": asdict(self.wavelet)}, fh, indent=1)

    @classmethod
    def load(cls, directory) -> "ReferenceModel":
        with open(os.path.join(directory, "reference.json")) as fh:
            meta = json.load(fh)
        if meta.get("kind") != "reference" or meta.get("version") != 1:
            raise artifacts.ArtifactError(f"{directory}: not a version-1 reference model")
        with open(os.path.join(directory, "monitor.json")) as fh:
            mon = MonitoringModel.from_json(fh.read())
        return cls(WaveletConfig(**meta["wavelet"]), CvaModel.load(os.path.join(directory, "cva.npz")), mon,
                   LstmNetwork.load(os.path.join(directory, "net.npz")))


def choose_lag(channel_mats, lag) -> LagSpec:
    if lag in (None, "auto"):
        return cva_mod.select_lags(channel_mats)
    return LagSpec(int(lag), int(lag))


def train_reference(train_cycles, val_cycles, wavelet: WaveletConfig, lag="auto", R="auto",
                    net_config: str = "L(50,100)N(100)", train_cfg: TrainConfig = TrainConfig(),
                    significance: float = 0.95, limit_method: str = "auto", seed: int = 0):
    """Fit CVA and monitoring limits on training cycles, then the reference network.

    With ``lag="auto"`` the lag rule runs on channel matrices built with a
    provisional lag of 1; the final matrices use the selected lag.
    Returns ``(ReferenceModel, history)``.
    """
    if lag in (None, "auto"):
        spec = choose_lag([cycle_channels(c, wavelet, 1) for c in train_cycles], lag)
    else:
        spec = LagSpec(int(lag), int(lag))
    mats = [cycle_channels(c, wavelet, spec.l) for c in train_cycles]
    pf = cva_mod.arrange_past_future(mats, spec)
    model = cva_mod.fit(pf, None if R in (None, "auto") else int(R), channel_names(wavelet))
    monitor = build_monitor(model, cva_mod.training_variates(model, pf), significance, limit_method)
    data = [(model.features(m), cycle_labels(c, wavelet, spec.l)) for m, c in zip(mats, train_cycles)]
    val = [(model.features(cycle_channels(c, wavelet, spec.l)), cycle_labels(c, wavelet, spec.l))
           for c in val_cycles]
    net = LstmNetwork.from_config(net_config, model.dim, seed=seed)
    net, history = train(net, data, train_cfg, validation=val or None)
    return ReferenceModel(wavelet, model, monitor, net), history


def train_raw_baseline(train_cycles, val_cycles, wavelet: WaveletConfig, lag: int,
                       net_config: str, train_cfg: TrainConfig, seed: int = 0):
    """Same network budget fed the raw ``(current, voltage)`` samples.

    Samples are aligned with the CVA-fed model so both are scored on the same
    time steps. Returns ``(net, predict)`` where ``predict(cycle)`` gives estimates.
    """
    k0 = first_estimate_index(wavelet, lag)

    def raw(c):
        return np.column_stack([c.current_A, c.voltage_V])[k0:]

    data = [(raw(c), cycle_labels(c, wavelet, lag)) for c in train_cycles]
    val = [(raw(c), cycle_labels(c, wavelet, lag)) for c in val_cycles]
    net = LstmNetwork.from_config(net_config, 2, seed=seed)
    net, _ = train(net, data, train_cfg, validation=val or None)
    return net, lambda c: np.clip(net.forward(raw(c)), 0.0, 100.0)


# ---------------------------------------------------------------------- #
# transfer
# ---------------------------------------------------------------------- #

def transfer_reference(reference: ReferenceModel, ref_train_cycles, target_cycles,
                       shared_config: str = "L(50,100)N(100)", specific_config: str = "L(50)N(100)",
                       train_cfg: TrainConfig = TrainConfig(), eta: float = 0.5,
                       shared_input: str = "target", significance: float = 0.95,
                       limit_method: str = "auto", seed: int = 0):
    """Consistent-feature selection, shared and specific training, factor adaptation.

    Returns ``(TransferModel, ConsistentSelection)``.
    """
    wv, lag = reference.wavelet, reference.cva.lag
    ref_mats = [cycle_channels(c, wv, lag.l) for c in ref_train_cycles]
    Z_x = cva_mod.training_variates(reference.cva, cva_mod.arrange_past_future(ref_mats, lag))
    tgt_mats = [cycle_channels(c, wv, lag.l) for c in target_cycles]
    Z_t, target_cva = tr.extract_target_cvs(tgt_mats, lag, reference.cva.channel_names)
    sel = tr.select_consistent(Z_x, Z_t, significance, limit_method)
    q = sel.q
    log.info("consistent features q=%d of %d", q, Z_x.shape[1])
    H = tr.similarity_H(Z_x, q)

    ref_feats = [reference.cva.features(m)[:, :q] for m in ref_mats]
    ref_labels = [cycle_labels(c, wv, lag.l) for c in ref_train_cycles]
    if q == reference.cva.dim and shared_config == reference.net.config:
        shared = reference.net
    else:
        shared, _ = tr.train_shared(ref_feats, ref_labels, train_cfg, shared_config, seed=seed)
    model = tr.train_transfer(shared, tgt_mats, [cycle_labels(c, wv, lag.l) for c in target_cycles],
                              target_cva, q, eta, train_cfg, specific_config, reference_Zq=ref_feats,
                              shared_input=shared_input, similarity=H, seed=seed)
    return model, sel


def transfer_predict(model: tr.TransferModel, wavelet: WaveletConfig, cycle):
    """Batch estimates for one target cycle; returns ``(sample_index, estimates)``."""
    lag = model.target_cva.lag.l
    y = model.predict_channels(cycle_channels(cycle, wavelet, lag))
    k0 = first_estimate_index(wavelet, lag)
    return np.arange(k0, k0 + len(y)), y


def train_config_from(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})
