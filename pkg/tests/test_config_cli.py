import json
import os

import pytest

from thermosoc.cli import EXIT_ARTIFACT, EXIT_INVALID, EXIT_OK, main
from thermosoc.config import ConfigError, RunConfig

TINY = {
    "n_reference_cycles": 4, "n_target_cycles": 2, "duration_s": 300.0,
    "wavelet_levels": 2, "lag": 2,
    "reference_net": "L(4)N(4)", "shared_net": "L(4)N(4)", "specific_net": "L(4)N(4)",
    "train": {"max_epochs": 3, "seq_len": 50, "batch_size": 8},
    "transfer_train": {"max_epochs": 3, "seq_len": 50, "batch_size": 8},
}


def _config(tmp_path, **over):
    d = {**TINY, "out": str(tmp_path / "run"), **over}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return str(p)


# ---------------------------------------------------------------- config

def test_defaults_validate_and_round_trip(tmp_path):
    cfg = RunConfig().validate()
    cfg.save(tmp_path / "c.json")
    back = RunConfig.from_file(tmp_path / "c.json")
    assert back == cfg and back.digest() == cfg.digest()


def test_train_config_carries_seed():
    cfg = RunConfig(seed=7)
    assert cfg.train_config().seed == 7 and cfg.train_config(transfer=True).max_epochs == 100


@pytest.mark.parametrize("field,value", [
    ("wavelet_basis", "mexh"), ("lag", 0), ("R", "many"), ("significance", 1.0), ("eta", 2.0),
    ("shared_input", "both"), ("specific_net", "L(4,4)N(4)"), ("reference_net", "N(4)"),
    ("limit_method", "bootstrap"), ("n_target_train", 3),
])
def test_invalid_values_name_the_field(field, value):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({field: value})
    assert info.value.field == field


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"epochs": 3}})


def test_bad_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)


# ---------------------------------------------------------------- cli

def test_invalid_config_exits_one(tmp_path, capsys):
    assert main(["simulate", "--config", _config(tmp_path, eta=3.0)]) == EXIT_INVALID
    assert "eta" in capsys.readouterr().err
    assert main(["simulate", "--out", str(tmp_path), "--lag", "seven"]) == EXIT_INVALID


def test_missing_artifact_exits_two(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["train-reference", "--config", cfg]) == EXIT_ARTIFACT
    assert main(["predict", "--config", cfg]) == EXIT_ARTIFACT
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == EXIT_ARTIFACT
    assert "not found" in capsys.readouterr().err


def test_wrong_artifact_kind_exits_two(tmp_path):
    cfg = _config(tmp_path)
    d = tmp_path / "run" / "reference"
    d.mkdir(parents=True)
    (d / "reference.json").write_text(json.dumps({"kind": "transfer", "version": 1}))
    assert main(["evaluate", "--config", cfg]) == EXIT_ARTIFACT


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp)
    codes = {c: main([c, "--config", cfg]) for c in
             ("simulate", "train-reference", "evaluate", "monitor", "train-transfer", "predict", "report")}
    return tmp / "run", cfg, codes


def test_pipeline_exits_zero(pipeline_run):
    _, _, codes = pipeline_run
    assert codes == {c: EXIT_OK for c in codes}


def test_pipeline_artifacts(pipeline_run):
    out, _, _ = pipeline_run
    for rel in ("data/reference.csv", "data/target.csv", "reference/cva.npz", "reference/net.npz",
                "reference/monitor.json", "evaluate/metrics.json", "monitor/summary.json",
                "transfer/transfer.json", "transfer/selection.json", "predict/predictions.csv",
                "report/metrics.json", "config.predict.json"):
        assert (out / rel).is_file(), rel
    man = json.loads((out / "predict" / "manifest.json").read_text())
    assert man["command"] == "predict" and "predictions.csv" in man["artifacts"]
    header = (out / "predict" / "predictions.csv").read_text().splitlines()[0]
    assert header == "cycle_id,k,soc_true,soc_pred,error"
    first = os.listdir(out / "monitor")
    assert any(f.startswith("verdicts_") for f in first)


def test_report_is_reproducible(pipeline_run):
    out, cfg, _ = pipeline_run
    before = (out / "report" / "metrics.json").read_bytes()
    assert main(["report", "--config", cfg]) == EXIT_OK
    assert (out / "report" / "metrics.json").read_bytes() == before
    rep = json.loads(before)
    pred = json.loads((out / "predict" / "metrics.json").read_text())
    assert rep["rmse"] == pytest.approx(pred["rmse"], rel=1e-12)


def test_training_is_deterministic(pipeline_run, tmp_path):
    out, _, _ = pipeline_run
    cfg = _config(tmp_path)
    for c in ("simulate", "train-reference", "evaluate"):
        assert main([c, "--config", cfg]) == EXIT_OK
    a = json.loads((out / "evaluate" / "metrics.json").read_text())
    b = json.loads((tmp_path / "run" / "evaluate" / "metrics.json").read_text())
    assert (a["rmse"], a["mae"]) == (b["rmse"], b["mae"])
