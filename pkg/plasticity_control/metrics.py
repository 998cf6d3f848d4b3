"""
Evaluation records and the CSV files written from them.

``metrics.csv`` holds one row per (evaluation point, evaluated task);
``summary.csv`` aggregates the final evaluation point of every run by
configuration with mean and standard error across seeds.
"""
import dataclasses
import glob
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from plasticity_control import constants
from plasticity_control.analysis import SUMMARY_COLUMNS, ActivationChange, empty_table

logger = logging.getLogger(__name__)

RUN_KEYS = ["run_id", "seed", "strategy"]


@dataclasses.dataclass
class MetricsRecord:
    """Accuracies of every task seen so far at one (task, epoch) point.

    Tasks and epochs are numbered from 1.
    """

    run_id: str
    seed: int
    strategy: str
    task: int
    epoch: int
    accuracies: Dict[int, float]
    wall_ms: int = 0

    @property
    def average_accuracy(self) -> float:
        return float(np.mean(list(self.accuracies.values())))

    def to_rows(self) -> List[Dict]:
        average = self.average_accuracy
        return [
            {
                "run_id": self.run_id,
                "seed": self.seed,
                "strategy": self.strategy,
                "task": self.task,
                "epoch": self.epoch,
                "eval_task": eval_task,
                "accuracy": accuracy,
                "avg_accuracy": average,
                "wall_ms": self.wall_ms,
            }
            for eval_task, accuracy in sorted(self.accuracies.items())
        ]


def records_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    rows = [row for record in records for row in record.to_rows()]
    return pd.DataFrame(rows, columns=constants.METRICS_COLUMNS)


def read_records(path: str) -> List[MetricsRecord]:
    """Rebuild records from a ``metrics.csv``."""
    frame = pd.read_csv(path, dtype={"run_id": str, "strategy": str})
    records = []
    for key, group in frame.groupby(RUN_KEYS + ["task", "epoch"], sort=False):
        run_id, seed, strategy, task, epoch = key
        records.append(
            MetricsRecord(
                run_id=run_id,
                seed=int(seed),
                strategy=strategy,
                task=int(task),
                epoch=int(epoch),
                accuracies={int(t): float(a) for t, a in zip(group["eval_task"], group["accuracy"])},
                wall_ms=int(group["wall_ms"].iloc[0]),
            )
        )
    return records


def _standard_error(values: pd.Series) -> float:
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(len(values)))


def final_points(frame: pd.DataFrame) -> pd.DataFrame:
    """Rows of the last (task, epoch) evaluation of every run."""
    if frame.empty:
        return frame
    last = frame.sort_values(["task", "epoch"]).groupby(RUN_KEYS)[["task", "epoch"]].last().reset_index()
    return frame.merge(last, on=RUN_KEYS + ["task", "epoch"])


def summarise(frame: pd.DataFrame) -> pd.DataFrame:
    """Per configuration: per-task accuracy and the average, mean ± SE over seeds."""
    final = final_points(frame)
    if final.empty:
        return pd.DataFrame(columns=["run_id", "strategy", "seeds", "average", "average_se"])
    eval_tasks = sorted(final["eval_task"].unique())
    rows = []
    for (run_id, strategy), group in final.groupby(["run_id", "strategy"], sort=True):
        row = {"run_id": run_id, "strategy": strategy, "seeds": group["seed"].nunique()}
        for eval_task in eval_tasks:
            values = group.loc[group["eval_task"] == eval_task, "accuracy"]
            row[f"task_{eval_task}"] = float(values.mean()) if len(values) else np.nan
            row[f"task_{eval_task}_se"] = _standard_error(values)
        averages = group.groupby("seed")["avg_accuracy"].first()
        row["average"] = float(averages.mean())
        row["average_se"] = _standard_error(averages)
        rows.append(row)
    return pd.DataFrame(rows)


def write_metrics_csv(records: Sequence[MetricsRecord], out_dir: str) -> str:
    path = os.path.join(out_dir, constants.METRICS_CSV)
    records_frame(records).to_csv(path, index=False)
    return path


def emit_metrics(
    records: Sequence[MetricsRecord], out_dir: str, activation: Optional[ActivationChange] = None
) -> None:
    """Write metrics, summary and activation-change files.

    An empty record set (or no activation analysis) produces header-only files.
    """
    os.makedirs(out_dir, exist_ok=True)
    frame = records_frame(records)
    frame.to_csv(os.path.join(out_dir, constants.METRICS_CSV), index=False)
    summarise(frame).to_csv(os.path.join(out_dir, constants.SUMMARY_CSV), index=False)
    if activation is None:
        empty_table().to_csv(os.path.join(out_dir, constants.ACTIVATION_CHANGE_CSV), index=False)
        pd.DataFrame(columns=SUMMARY_COLUMNS).to_csv(
            os.path.join(out_dir, constants.ACTIVATION_SUMMARY_CSV), index=False
        )
    else:
        activation.table.to_csv(os.path.join(out_dir, constants.ACTIVATION_CHANGE_CSV), index=False)
        activation.summary_frame().to_csv(
            os.path.join(out_dir, constants.ACTIVATION_SUMMARY_CSV), index=False
        )
    logger.info(f"Metrics for {len(records)} evaluation points written to {out_dir}")


def aggregate_experiment(experiment_path: str) -> pd.DataFrame:
    """Summarise every ``metrics.csv`` below ``experiment_path`` into one ``summary.csv``."""
    paths = sorted(
        glob.glob(os.path.join(experiment_path, "**", constants.METRICS_CSV), recursive=True)
    )
    paths = [path for path in paths if os.path.dirname(path) != os.path.normpath(experiment_path)]
    frames = [pd.read_csv(path, dtype={"run_id": str, "strategy": str}) for path in paths]
    frame = (
        pd.concat(frames, ignore_index=True)
        if frames
        else pd.DataFrame(columns=constants.METRICS_COLUMNS)
    )
    summary = summarise(frame)
    summary.to_csv(os.path.join(experiment_path, constants.SUMMARY_CSV), index=False)
    logger.info(f"Summary of {len(paths)} runs written to {experiment_path}")
    return summary
