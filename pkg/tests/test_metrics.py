import os

import pandas as pd
import pytest

from plasticity_control import constants
from plasticity_control.analysis import SUMMARY_COLUMNS, TABLE_COLUMNS
from plasticity_control.metrics import (
    MetricsRecord,
    aggregate_experiment,
    emit_metrics,
    read_records,
    summarise,
    records_frame,
    write_metrics_csv,
)


def _records(run_id="npc", strategy="npc"):
    return [
        MetricsRecord(run_id, 0, strategy, 1, 1, {1: 0.99}, 10),
        MetricsRecord(run_id, 0, strategy, 2, 1, {1: 0.8, 2: 0.6}, 20),
        MetricsRecord(run_id, 1, strategy, 1, 1, {1: 0.98}, 11),
        MetricsRecord(run_id, 1, strategy, 2, 1, {1: 0.9, 2: 0.7}, 21),
    ]


def test_average_accuracy():
    assert MetricsRecord("a", 0, "npc", 2, 3, {1: 0.5, 2: 1.0}).average_accuracy == 0.75


def test_empty_run_writes_headers(tmp_path):
    emit_metrics([], str(tmp_path))
    metrics = pd.read_csv(tmp_path / constants.METRICS_CSV)
    assert metrics.empty and list(metrics.columns) == constants.METRICS_COLUMNS
    assert pd.read_csv(tmp_path / constants.SUMMARY_CSV).empty
    assert list(pd.read_csv(tmp_path / constants.ACTIVATION_CHANGE_CSV).columns) == TABLE_COLUMNS
    assert list(pd.read_csv(tmp_path / constants.ACTIVATION_SUMMARY_CSV).columns) == SUMMARY_COLUMNS


def test_rows_per_evaluated_task():
    frame = records_frame(_records())
    assert len(frame) == 6
    assert frame.loc[frame["task"] == 2, "avg_accuracy"].round(6).tolist() == [0.7, 0.7, 0.8, 0.8]


def test_read_records(tmp_path):
    records = _records(run_id="npc_alpha_0.1")
    path = write_metrics_csv(records, str(tmp_path))
    assert read_records(path) == records


def test_summary_uses_final_point_of_each_seed():
    summary = summarise(records_frame(_records()))
    assert len(summary) == 1
    row = summary.iloc[0]
    assert row["seeds"] == 2
    assert row["task_1"] == pytest.approx(0.85)
    assert row["task_1_se"] == pytest.approx(0.05)
    assert row["task_2"] == pytest.approx(0.65)
    assert row["average"] == pytest.approx(0.75)
    assert row["average_se"] == pytest.approx(0.05)


def test_single_seed_has_zero_error():
    summary = summarise(records_frame(_records()[:2]))
    assert summary.iloc[0]["average_se"] == 0.0


def test_aggregate_experiment(tmp_path):
    for run_id in ("npc", "finetune"):
        leaf = tmp_path / run_id / "0"
        leaf.mkdir(parents=True)
        write_metrics_csv(_records(run_id=run_id, strategy=run_id), str(leaf))
    # a stale summary-level file at the root is not a run
    write_metrics_csv(_records(run_id="stale"), str(tmp_path))
    summary = aggregate_experiment(str(tmp_path))
    assert summary["run_id"].tolist() == ["finetune", "npc"]
    assert os.path.isfile(tmp_path / constants.SUMMARY_CSV)


def test_aggregate_empty_experiment(tmp_path):
    assert aggregate_experiment(str(tmp_path)).empty
