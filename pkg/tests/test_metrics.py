import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermosoc.metrics import compute_metrics, cycle_metrics


def test_worked_example():
    r = compute_metrics([0, 1], [1, 1])
    assert r.rmse == pytest.approx(np.sqrt(0.5), abs=1e-12)
    assert r.rmse == pytest.approx(0.70711, abs=1e-5)
    assert r.mae == 0.5 and r.n_samples == 2


def test_perfect_prediction():
    r = compute_metrics(np.linspace(0, 100, 9), np.linspace(0, 100, 9))
    assert r.rmse == 0.0 and r.mae == 0.0


def test_errors():
    with pytest.raises(ValueError, match="length mismatch"):
        compute_metrics([1, 2], [1])
    with pytest.raises(ValueError, match="empty"):
        compute_metrics([], [])
    with pytest.raises(ValueError, match="empty"):
        cycle_metrics({})


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), min_size=1, max_size=50))
def test_rmse_bounds_mae(pairs):
    y, p = np.array(pairs).T
    r = compute_metrics(y, p)
    assert r.mae <= r.rmse + 1e-9
    assert r.rmse <= np.max(np.abs(p - y)) + 1e-9


def test_cycle_breakdown_pools_samples():
    r = cycle_metrics({"a": ([0, 1], [1, 1]), "b": ([5.0], [5.0])}, similarity_H=0.3, runtime_s=1.5)
    assert r.n_samples == 3
    assert r.rmse == pytest.approx(np.sqrt(1 / 3))
    assert r.per_cycle["a"]["mae"] == 0.5 and r.per_cycle["b"]["rmse"] == 0.0
    d = json.loads(r.to_json())
    assert d["similarity_H"] == 0.3 and d["runtime_s"] == 1.5
    assert r.to_json() == cycle_metrics({"a": ([0, 1], [1, 1]), "b": ([5.0], [5.0])}, 0.3, 1.5).to_json()
