"""Evaluation, per-round reports and communication-cost accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import LossBreakdown
from .models import ClassifierWeights, ClientModel, forward_features, predict

CSV_COLUMNS = (
    "round",
    "local_epochs",
    "mean_acc",
    "std_acc",
    "loss_ce",
    "loss_cl",
    "loss_pr",
    "loss_total",
    "bytes_up",
    "bytes_down",
    "participants",
    "per_client_accuracy",
)


@dataclass(frozen=True)
class CommModel:
    bytes_per_parameter: int = 4
    header_bytes: int = 0


@dataclass
class RoundReport:
    round: int
    per_client_accuracy: list[float]
    mean_acc: float
    std_acc: float
    loss_breakdown_means: LossBreakdown
    cumulative_bytes_up: int
    cumulative_bytes_down: int
    participants: list[int]
    local_epochs: int = 0  # cumulative local epochs run by a participating client

    def to_row(self) -> dict:
        lb = self.loss_breakdown_means
        return {
            "round": self.round,
            "local_epochs": self.local_epochs,
            "mean_acc": repr(self.mean_acc),
            "std_acc": repr(self.std_acc),
            "loss_ce": repr(lb.ce),
            "loss_cl": repr(lb.cl),
            "loss_pr": repr(lb.pr),
            "loss_total": repr(lb.total),
            "bytes_up": self.cumulative_bytes_up,
            "bytes_down": self.cumulative_bytes_down,
            "participants": ";".join(str(p) for p in self.participants),
            "per_client_accuracy": ";".join(repr(a) for a in self.per_client_accuracy),
        }

    @classmethod
    def from_row(cls, row: dict) -> "RoundReport":
        split = lambda s: [x for x in s.split(";") if x]  # noqa: E731
        return cls(
            round=int(row["round"]),
            per_client_accuracy=[float(a) for a in split(row["per_client_accuracy"])],
            mean_acc=float(row["mean_acc"]),
            std_acc=float(row["std_acc"]),
            loss_breakdown_means=LossBreakdown(
                float(row["loss_ce"]), float(row["loss_cl"]), float(row["loss_pr"]), float(row["loss_total"])
            ),
            cumulative_bytes_up=int(row["bytes_up"]),
            cumulative_bytes_down=int(row["bytes_down"]),
            participants=[int(p) for p in split(row["participants"])],
            local_epochs=int(row["local_epochs"]),
        )


def evaluate(m: ClientModel, test_x, test_y) -> float:
    """Fraction of correct argmax predictions on un-augmented inputs."""
    test_y = np.asarray(test_y)
    if len(test_y) == 0:
        raise ValueError("evaluate: empty test shard")
    return float(np.mean(predict(m, test_x) == test_y))


def summarize(accs) -> tuple[float, float]:
    """Mean and population standard deviation."""
    a = np.asarray(accs, dtype=np.float64)
    if a.size == 0:
        raise ValueError("summarize: no values")
    # shift by the first value so identical inputs give exactly zero spread
    d = a - a[0]
    md = d.mean()
    return float(a[0] + md), float(np.sqrt(np.mean((d - md) ** 2)))


def payload_bytes(c: ClassifierWeights, cm: CommModel = CommModel()) -> int:
    return parameter_bytes(c.num_parameters, cm)


def parameter_bytes(num_parameters: int, cm: CommModel = CommModel()) -> int:
    return int(num_parameters) * cm.bytes_per_parameter + cm.header_bytes


def mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    if not parts:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0)
    arr = np.array([[p.ce, p.cl, p.pr, p.total] for p in parts], dtype=np.float64)
    return LossBreakdown(*(float(v) for v in arr.mean(axis=0)))


def write_reports_csv(path, reports: list[RoundReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.to_row())


def read_reports_csv(path) -> list[RoundReport]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [RoundReport.from_row(row) for row in reader]


def write_feature_dump(path, models: list[ClientModel], shards: list[tuple[np.ndarray, np.ndarray]]) -> None:
    """One row per test sample: client_id, label, feature vector."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = models[0].arch.feature_dim if models else 0
        w.writerow(["client_id", "label", *(f"f{i}" for i in range(dim))])
        for cid, (m, (x, y)) in enumerate(zip(models, shards)):
            feats = forward_features(m, x).data
            for label, row in zip(y, feats):
                w.writerow([cid, int(label), *(repr(float(v)) for v in row)])
