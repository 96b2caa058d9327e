"""Command-line entry point: ``thermosoc <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 missing or
incompatible artifact, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .artifacts import ArtifactError, sha256
from .config import ConfigError, RunConfig
from .cva import LagSelectionError
from .dataset import EcmParams, load_csv, simulate_campaign, split_cycles, write_csv
from .lstm import TrainingDiverged
from .metrics import cycle_metrics
from .monitor import Case, DegenerateStatistic, write_verdicts
from .pipeline import (ReferenceModel, cycle_labels, first_estimate_index, train_reference,
                       transfer_reference)
from .transfer import TransferModel, predict_target
from .wavelet import WaveletConfig

log = logging.getLogger("thermosoc")

COMMANDS = ("simulate", "train-reference", "evaluate", "monitor", "train-transfer", "predict", "report")
EXIT_OK, EXIT_INVALID, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 1, 2, 3


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------------- #
# helpers
# ---------------------------------------------------------------------- #

def _paths(cfg: RunConfig) -> dict:
    o = cfg.out
    return {
        "reference_csv": cfg.reference_csv or os.path.join(o, "data", "reference.csv"),
        "target_csv": cfg.target_csv or os.path.join(o, "data", "target.csv"),
        "reference": os.path.join(o, "reference"),
        "transfer": os.path.join(o, "transfer"),
    }


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifact(f"{what} not found at {path}; run the producing command first")
    return path


def _wavelet(cfg: RunConfig) -> WaveletConfig:
    return WaveletConfig(cfg.wavelet_levels, cfg.wavelet_basis, True)


def _reference_split(cfg: RunConfig):
    cycles = load_csv(_require(_paths(cfg)["reference_csv"], "reference data"))
    return split_cycles(cycles, cfg.n_test, cfg.n_val)


def _target_split(cfg: RunConfig):
    cycles = load_csv(_require(_paths(cfg)["target_csv"], "target data"))
    if len(cycles) <= cfg.n_target_train:
        raise ValueError(f"target data has {len(cycles)} cycles; need more than n_target_train="
                         f"{cfg.n_target_train}")
    return cycles[:cfg.n_target_train], cycles[cfg.n_target_train:]


def _write_predictions(path, rows) -> None:
    """``rows``: iterable of ``(cycle_id, k, soc_true, soc_pred)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle_id", "k", "soc_true", "soc_pred", "error"])
        for cid, k, y, p in rows:
            w.writerow([cid, int(k), repr(float(y)), repr(float(p)), repr(float(p) - float(y))])


def read_predictions(path) -> dict:
    pairs: dict = {}
    with open(_require(path, "predictions")) as fh:
        for row in csv.DictReader(fh):
            y, p = pairs.setdefault(row["cycle_id"], ([], []))
            y.append(float(row["soc_true"]))
            p.append(float(row["soc_pred"]))
    if not pairs:
        raise ValueError(f"{path}: no predictions")
    return {k: (np.asarray(y), np.asarray(p)) for k, (y, p) in pairs.items()}


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _manifest(cfg: RunConfig, command: str, directory: str, inputs=()) -> None:
    arts = {}
    for root, _, files in os.walk(directory):
        for f in sorted(files):
            if f == "manifest.json":
                continue
            p = os.path.join(root, f)
            arts[os.path.relpath(p, directory)] = sha256(p)
    _write_json(os.path.join(directory, "manifest.json"), {
        "command": command, "version": __version__, "seed": cfg.seed, "config_sha256": cfg.digest(),
        "artifacts": dict(sorted(arts.items())),
        "inputs": {p: sha256(p) for p in inputs if os.path.isfile(p)},
    })


def _outdir(cfg: RunConfig, name: str) -> str:
    d = os.path.join(cfg.out, name)
    os.makedirs(d, exist_ok=True)
    return d


# ---------------------------------------------------------------------- #
# commands
# ---------------------------------------------------------------------- #

def cmd_simulate(cfg: RunConfig, args) -> int:
    params = EcmParams.from_dict(cfg.ecm) if cfg.ecm else EcmParams()
    d = _outdir(cfg, "data")
    ref = simulate_campaign(params, cfg.reference_temperature_C, cfg.n_reference_cycles, cfg.seed,
                            cfg.duration_s, prefix="ref")
    tgt = simulate_campaign(params, cfg.target_temperature_C, cfg.n_target_cycles, cfg.seed,
                            cfg.duration_s, prefix="tgt")
    write_csv(ref, os.path.join(d, "reference.csv"))
    write_csv(tgt, os.path.join(d, "target.csv"))
    _write_json(os.path.join(d, "ecm.json"), params.to_dict())
    _manifest(cfg, "simulate", d)
    log.info("simulated %d reference and %d target cycles into %s", len(ref), len(tgt), d)
    return EXIT_OK


def cmd_train_reference(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    train, val, _ = _reference_split(cfg)
    model, history = train_reference(train, val, _wavelet(cfg), cfg.lag, cfg.R, cfg.reference_net,
                                     cfg.train_config(), cfg.significance, cfg.limit_method, cfg.seed)
    d = _paths(cfg)["reference"]
    model.save(d)
    _write_json(os.path.join(d, "history.json"), {
        "train_loss": history["train_loss"], "val_loss": history["val_loss"],
        "best_epoch": history["best_epoch"], "epochs": history["epochs"],
        "l": model.cva.lag.l, "h": model.cva.lag.h, "R": model.cva.R, "dim": model.cva.dim,
        "limits": {"T2": model.monitor.cl_T2, "SPE": model.monitor.cl_SPE,
                   "methods": list(model.monitor.limit_method)},
        "runtime_s": time.perf_counter() - t0,
    })
    _manifest(cfg, "train-reference", d, [_paths(cfg)["reference_csv"]])
    log.info("reference model: l=%d R=%d of %d, %d epochs", model.cva.lag.l, model.cva.R, model.cva.dim,
             history["epochs"])
    return EXIT_OK


def _load_reference(cfg: RunConfig, args) -> ReferenceModel:
    path = args.model or args.reference or _paths(cfg)["reference"]
    return ReferenceModel.load(_require(os.path.join(path, "reference.json"), "reference model") and path)


def cmd_evaluate(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    model = _load_reference(cfg, args)
    cycles = load_csv(args.input) if args.input else _reference_split(cfg)[2]
    rows, pairs = [], {}
    for c in cycles:
        idx, y = model.predict(c)
        truth = model.labels(c)
        pairs[c.cycle_id] = (truth, y)
        rows.extend((c.cycle_id, k, t, p) for k, t, p in zip(idx, truth, y))
    d = _outdir(cfg, "evaluate")
    _write_predictions(os.path.join(d, "predictions.csv"), rows)
    report = cycle_metrics(pairs, runtime_s=time.perf_counter() - t0)
    with open(os.path.join(d, "metrics.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    _manifest(cfg, "evaluate", d)
    log.info("evaluate: RMSE %.3f MAE %.3f over %d samples", report.rmse, report.mae, report.n_samples)
    return EXIT_OK


def cmd_monitor(cfg: RunConfig, args) -> int:
    model = _load_reference(cfg, args)
    cycles = load_csv(args.input) if args.input else load_csv(_require(_paths(cfg)["target_csv"], "target data"))
    d = _outdir(cfg, "monitor")
    summary = {}
    for c in cycles:
        res = model.monitor_cycle(c)
        write_verdicts(res, model.monitor, os.path.join(d, f"verdicts_{c.cycle_id}.csv"))
        summary[c.cycle_id] = {
            "decision": res.decision.value, "latched_at": res.latched_at, "warmup": res.warmup,
            "n_verdicts": len(res.verdicts),
            "t2_exceed_rate": float(np.mean([v.t2_exceeds for v in res.verdicts])) if res.verdicts else None,
            "spe_exceed_rate": float(np.mean([v.spe_exceeds for v in res.verdicts])) if res.verdicts else None,
        }
        log.info("monitor %s: %s (latched at %s)", c.cycle_id, res.decision.value, res.latched_at)
    _write_json(os.path.join(d, "summary.json"), summary)
    _manifest(cfg, "monitor", d)
    return EXIT_OK


def cmd_train_transfer(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    ref = _load_reference(cfg, args)
    ref_train, _, _ = _reference_split(cfg)
    if args.target:
        tgt_train = load_csv(args.target)[:cfg.n_target_train]
    else:
        tgt_train, _ = _target_split(cfg)
    model, sel = transfer_reference(ref, ref_train, tgt_train, cfg.shared_net, cfg.specific_net,
                                    cfg.train_config(transfer=True), cfg.eta, cfg.shared_input,
                                    cfg.significance, cfg.limit_method, cfg.seed)
    d = _paths(cfg)["transfer"]
    model.save(d)
    _write_json(os.path.join(d, "selection.json"), {
        "q": sel.q, "dim": ref.cva.dim, "similarity_H": model.similarity_H,
        "alpha1": model.alpha1, "alpha2": model.alpha2,
        "scan": sel.exceed_log, "runtime_s": time.perf_counter() - t0,
    })
    with open(os.path.join(d, "wavelet.json"), "w") as fh:
        json.dump({"levels": ref.wavelet.levels, "basis": ref.wavelet.basis, "causal": True}, fh)
    _manifest(cfg, "train-transfer", d, [_paths(cfg)["reference_csv"], args.target or _paths(cfg)["target_csv"]])
    log.info("transfer: q=%d of %d, H=%.3f, alpha=(%.3f, %.3f)", sel.q, ref.cva.dim, model.similarity_H,
             model.alpha1, model.alpha2)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    path = args.model or _paths(cfg)["transfer"]
    _require(os.path.join(path, "transfer.json"), "transfer model")
    model = TransferModel.load(path)
    with open(os.path.join(path, "wavelet.json")) as fh:
        wv = WaveletConfig(**json.load(fh))
    cycles = load_csv(args.input) if args.input else _target_split(cfg)[1]
    rows, pairs = [], {}
    lag = model.target_cva.lag.l
    for c in cycles:
        idx, y = predict_target(model, wv, zip(c.current_A, c.voltage_V))
        truth = cycle_labels(c, wv, lag)
        pairs[c.cycle_id] = (truth, y)
        rows.extend((c.cycle_id, k, t, p) for k, t, p in zip(idx, truth, y))
    d = _outdir(cfg, "predict")
    _write_predictions(os.path.join(d, "predictions.csv"), rows)
    report = cycle_metrics(pairs, model.similarity_H, time.perf_counter() - t0)
    with open(os.path.join(d, "metrics.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    _manifest(cfg, "predict", d)
    log.info("predict: RMSE %.3f MAE %.3f (first estimate at sample %d)", report.rmse, report.mae,
             first_estimate_index(wv, lag))
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    src = args.input or os.path.join(cfg.out, "predict", "predictions.csv")
    report = cycle_metrics(read_predictions(src))
    d = _outdir(cfg, "report")
    with open(os.path.join(d, "metrics.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    _manifest(cfg, "report", d, [src])
    print(f"RMSE {report.rmse:.4f}  MAE {report.mae:.4f}  samples {report.n_samples}")
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate, "train-reference": cmd_train_reference, "evaluate": cmd_evaluate,
    "monitor": cmd_monitor, "train-transfer": cmd_train_transfer, "predict": cmd_predict,
    "report": cmd_report,
}


# ---------------------------------------------------------------------- #
# entry point
# ---------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="thermosoc", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--wavelet-levels", type=int)
    ap.add_argument("--wavelet-basis")
    ap.add_argument("--lag", help="'auto' or an integer")
    ap.add_argument("--R", dest="R", help="'auto' or an integer")
    ap.add_argument("--eta", type=float)
    ap.add_argument("--model", help="model directory to use")
    ap.add_argument("--reference", help="reference model directory")
    ap.add_argument("--target", help="target cycles CSV (training portion is taken from the start)")
    ap.add_argument("--input", help="input cycles CSV (or predictions CSV for 'report')")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args) -> RunConfig:
    d = {}
    if args.config:
        d = RunConfig.from_file(_require(args.config, "config file")).to_dict()
    for key, attr in (("seed", "seed"), ("out", "out"), ("wavelet_levels", "wavelet_levels"),
                      ("wavelet_basis", "wavelet_basis"), ("eta", "eta")):
        v = getattr(args, attr)
        if v is not None:
            d[key] = v
    for key in ("lag", "R"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v if v == "auto" else _int(key, v)
    return RunConfig.from_dict(d)


def _int(name, v) -> int:
    try:
        return int(v)
    except ValueError:
        raise ConfigError(name, f"expected 'auto' or an integer, got {v!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.out, exist_ok=True)
        cfg.save(os.path.join(cfg.out, f"config.{args.command}.json"))
        return HANDLERS[args.command](cfg, args)
    except (MissingArtifact, FileNotFoundError, ArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (TrainingDiverged, DegenerateStatistic, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LagSelectionError as exc:
        curve = ", ".join(f"{v:.3f}" for v in exc.curve[:12])
        print(f"error: {exc} (autocorrelation curve starts {curve}); set 'lag' explicitly", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
