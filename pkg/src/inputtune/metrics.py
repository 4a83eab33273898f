"""Average accuracy / average forgetting over a lower-triangular accuracy matrix.

Rows are indexed by the model (after training session ``t``), columns by the
task test set ``tau``. Both are 1-based in the public API, matching the way
results are usually reported; storage is a 0-based ``(T, T)`` float array with
NaN above the diagonal.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IncompleteMatrix, IncompleteRow


@dataclass
class AccuracyMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"accuracy matrix must be square, got {v.shape}")
        v[np.triu_indices(v.shape[0], k=1)] = np.nan
        self.values = v

    @classmethod
    def empty(cls, num_tasks: int) -> "AccuracyMatrix":
        return cls(np.full((num_tasks, num_tasks), np.nan))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def set(self, t: int, tau: int, accuracy: float) -> None:
        if not 1 <= tau <= t <= self.T:
            raise IndexError(f"(t={t}, tau={tau}) outside lower triangle of T={self.T}")
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        self.values[t - 1, tau - 1] = accuracy

    def get(self, t: int, tau: int) -> float:
        return float(self.values[t - 1, tau - 1])

    def row(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.T:
            raise IndexError(f"row {t} outside 1..{self.T}")
        r = self.values[t - 1, :t]
        if np.isnan(r).any():
            raise IncompleteRow(f"row {t} has unpopulated entries")
        return r.copy()

    def is_complete(self) -> bool:
        return not np.isnan(self.values[np.tril_indices(self.T)]).any()

    def completed_rows(self) -> int:
        """Number of leading fully populated rows."""
        n = 0
        for t in range(1, self.T + 1):
            if np.isnan(self.values[t - 1, :t]).any():
                break
            n = t
        return n

    # --- serialization -------------------------------------------------

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "tau", "accuracy"])
        for t in range(1, self.T + 1):
            for tau in range(1, t + 1):
                a = self.values[t - 1, tau - 1]
                if not np.isnan(a):
                    w.writerow([t, tau, repr(float(a))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "AccuracyMatrix":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "AccuracyMatrix":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise IncompleteMatrix("matrix file holds no entries")
        T = max(int(r["t"]) for r in rows)
        m = cls.empty(T)
        for r in rows:
            m.set(int(r["t"]), int(r["tau"]), float(r["accuracy"]))
        return m


def average_accuracy(M: AccuracyMatrix, t: int) -> float:
    """Mean of row ``t``: accuracy over all tasks seen so far."""
    return float(M.row(t).mean())


def average_forgetting(M: AccuracyMatrix, t: int) -> float:
    """Mean drop from each past task's best earlier accuracy to its accuracy after ``t``.

    The max over earlier models only ranges over defined entries, i.e. models
    trained after the task was introduced. ``t == 1`` returns 0.
    """
    for s in range(1, t + 1):
        M.row(s)  # raises IncompleteRow
    if t == 1:
        return 0.0
    past = M.values[: t - 1, : t - 1]
    best = np.nanmax(past, axis=0)
    drops = best - M.values[t - 1, : t - 1]
    return float(drops.mean())


def accuracy_trajectory(M: AccuracyMatrix) -> list[float]:
    return [average_accuracy(M, t) for t in range(1, M.T + 1)]


def metrics_report(M: AccuracyMatrix) -> dict:
    if not M.is_complete():
        raise IncompleteMatrix("metrics_report needs a fully populated matrix")
    T = M.T
    return {
        "T": T,
        "average_accuracy": average_accuracy(M, T),
        "average_forgetting": average_forgetting(M, T),
        "final_task_accuracies": [float(a) for a in M.row(T)],
        "accuracy_trajectory": accuracy_trajectory(M),
        "forgetting_trajectory": [average_forgetting(M, t) for t in range(1, T + 1)],
    }


def format_report(report: dict) -> str:
    lines = [
        f"tasks                : {report['T']}",
        f"average accuracy     : {100 * report['average_accuracy']:.2f}",
        f"average forgetting   : {100 * report['average_forgetting']:.2f}",
        "final task accuracy  : " + " ".join(f"{100 * a:.1f}" for a in report["final_task_accuracies"]),
        "accuracy trajectory  : " + " ".join(f"{100 * a:.1f}" for a in report["accuracy_trajectory"]),
    ]
    return "\n".join(lines)


def aggregate_reports(reports: list[dict]) -> dict:
    """Mean and population std of final accuracy/forgetting across seeds."""
    acc = np.array([r["average_accuracy"] for r in reports])
    fgt = np.array([r["average_forgetting"] for r in reports])
    return {
        "num_seeds": len(reports),
        "accuracy_mean": float(acc.mean()),
        "accuracy_std": float(acc.std()),
        "forgetting_mean": float(fgt.mean()),
        "forgetting_std": float(fgt.std()),
        "per_seed": reports,
    }


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2))
