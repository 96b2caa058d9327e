"""Run configuration: a flat-ish JSON document with validation."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .lstm import TrainConfig, parse_config
from .wavelet import SCALING_FILTERS


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name
        self.reason = reason


def _desk_train() -> dict:
    return {"learning_rate": 0.01, "batch_size": 32, "max_epochs": 200, "dropout_rate": 0.2,
            "l2_lambda": 1e-5, "early_stop_patience": 40, "lr_patience": 8, "seq_len": 100}


def _desk_transfer_train() -> dict:
    return {"learning_rate": 0.01, "batch_size": 32, "max_epochs": 100, "dropout_rate": 0.2,
            "l2_lambda": 1e-5, "early_stop_patience": 30, "lr_patience": 8, "seq_len": 100}


@dataclass
class RunConfig:
    """Every tunable of a run. Defaults are the desk-scale setup.

    ``lag`` and ``R`` accept ``"auto"`` or an integer. ``reference_csv`` /
    ``target_csv`` switch from the simulator to recorded cycles.
    """

    seed: int = 0
    out: str = "run"
    # data
    reference_csv: str | None = None
    target_csv: str | None = None
    reference_temperature_C: float = 25.0
    target_temperature_C: float = -10.0
    n_reference_cycles: int = 8
    n_target_cycles: int = 3
    n_target_train: int = 1
    duration_s: float = 1800.0
    n_test: int = 1
    n_val: int = 1
    ecm: dict | None = None
    # features
    wavelet_levels: int = 2
    wavelet_basis: str = "haar"
    lag: int | str = 5
    R: int | str = "auto"
    significance: float = 0.95
    limit_method: str = "auto"
    # networks
    reference_net: str = "L(16)N(16)"
    shared_net: str = "L(16)N(16)"
    specific_net: str = "L(16)N(16)"
    train: dict = field(default_factory=_desk_train)
    transfer_train: dict = field(default_factory=_desk_transfer_train)
    eta: float = 0.5
    shared_input: str = "target"

    def validate(self) -> "RunConfig":
        if self.wavelet_basis not in SCALING_FILTERS:
            raise ConfigError("wavelet_basis", f"unknown basis {self.wavelet_basis!r}")
        if not isinstance(self.wavelet_levels, int) or self.wavelet_levels < 0:
            raise ConfigError("wavelet_levels", "must be an integer >= 0")
        for name in ("lag", "R"):
            v = getattr(self, name)
            if v != "auto" and not (isinstance(v, int) and not isinstance(v, bool) and v >= 1):
                raise ConfigError(name, "must be 'auto' or an integer >= 1")
        if not 0 < self.significance < 1:
            raise ConfigError("significance", "must lie in (0, 1)")
        if self.limit_method not in ("auto", "chi-square", "box-approx", "kde"):
            raise ConfigError("limit_method", f"unknown method {self.limit_method!r}")
        if not 0 <= self.eta <= 1:
            raise ConfigError("eta", "must lie in [0, 1]")
        if self.shared_input not in ("target", "reference"):
            raise ConfigError("shared_input", "must be 'target' or 'reference'")
        for name in ("reference_net", "shared_net", "specific_net"):
            try:
                cells, _ = parse_config(getattr(self, name))
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from None
            if not cells:
                raise ConfigError(name, "needs at least one LSTM layer")
        if len(parse_config(self.specific_net)[0]) != 1:
            raise ConfigError("specific_net", "must have a single LSTM layer")
        for name in ("train", "transfer_train"):
            known = {f.name for f in fields(TrainConfig)}
            extra = set(getattr(self, name)) - known
            if extra:
                raise ConfigError(name, f"unknown key(s) {sorted(extra)}")
            try:
                TrainConfig(**getattr(self, name))
            except (TypeError, ValueError) as exc:
                raise ConfigError(name, str(exc)) from None
        if self.n_reference_cycles < self.n_test + self.n_val + 1:
            raise ConfigError("n_reference_cycles", "too few cycles for the train/val/test split")
        if not 1 <= self.n_target_train < self.n_target_cycles:
            raise ConfigError("n_target_train", "need 1 <= n_target_train < n_target_cycles")
        return self

    # ------------------------------------------------------------------ #
    def train_config(self, transfer: bool = False) -> TrainConfig:
        return TrainConfig(**{**(self.transfer_train if transfer else self.train), "seed": self.seed})

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        return cls(**copy.deepcopy(d)).validate()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("<file>", f"not valid JSON ({exc})") from None
        return cls.from_dict(d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()
