"""Federated bias detection round.

Each (client, ADR) table trains a local logistic classifier predicting the
severe-outcome flag from the scaled features. Per ADR, the server averages
all clients' parameter vectors into an aggregated model, measures each local
model's Euclidean distance to it, and declares tables at or beyond the
threshold biased. The clean dataset is the concatenation of every unflagged
table.

Local training is full-batch gradient descent from zero weights for a fixed
number of steps, so a classifier is a deterministic function of its table:
no network, no scheduling effects, bit-identical results on reruns. The
aggregation sums contributions in ascending client id, making the mean exact
under any arrival order.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import AdrTable, Dataset, SplitDataset
from .errors import (
    AllTablesFlagged,
    DegenerateTableWarning,
    LengthMismatch,
    MixedAdr,
)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.5
    epochs: int = 150
    seed: int = 0


@dataclass(frozen=True)
class DetectionConfig:
    epsilon: float = 4.0
    training: TrainingConfig = field(default_factory=TrainingConfig)
    min_table_size: int = 5
    size_weighted: bool = False


@dataclass(frozen=True)
class LocalClassifier:
    client_id: int
    adr_id: int
    params: np.ndarray  # weights then bias, length n_features + 1
    train_size: int
    final_loss: float

    def __eq__(self, other):
        if not isinstance(other, LocalClassifier):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.adr_id == other.adr_id
            and self.train_size == other.train_size
            and self.final_loss == other.final_loss
            and np.array_equal(self.params, other.params)
        )


@dataclass(frozen=True, eq=False)
class AggregatedClassifier:
    adr_id: int
    params: np.ndarray
    contributor_ids: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class DetectionReport:
    distances: dict[tuple[int, int], float]
    flagged: frozenset[tuple[int, int]]
    aggregated_per_adr: tuple[AggregatedClassifier, ...]
    table_sizes: dict[tuple[int, int], int]
    epsilon: float


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce(p: np.ndarray, y: np.ndarray) -> float:
    eps = 1e-12
    return float(-np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))


def train_local(table: AdrTable, cfg: TrainingConfig) -> LocalClassifier:
    """Logistic regression by full-batch gradient descent from zero weights."""
    x = np.array([r.features for r in table.records], dtype=np.float64)
    y = np.array([r.outcome_severe for r in table.records], dtype=np.float64)
    n, d = x.shape

    if cfg.epochs > 0 and (y.min() == y.max()):
        warnings.warn(
            f"table (client {table.client_id}, adr {table.adr_id}): single-class labels",
            DegenerateTableWarning,
            stacklevel=2,
        )

    w = np.zeros(d)
    b = 0.0
    for _ in range(cfg.epochs):
        p = _sigmoid(x @ w + b)
        err = p - y
        w -= cfg.learning_rate * (x.T @ err) / n
        b -= cfg.learning_rate * float(err.mean())
    final_loss = _bce(_sigmoid(x @ w + b), y)
    params = np.concatenate([w, [b]])
    return LocalClassifier(
        client_id=table.client_id,
        adr_id=table.adr_id,
        params=params,
        train_size=n,
        final_loss=final_loss,
    )


def pre_aggregate(
    classifiers: list[LocalClassifier], size_weighted: bool = False
) -> AggregatedClassifier:
    """Elementwise mean of local parameters, reduced in ascending client id."""
    if not classifiers:
        raise LengthMismatch("no classifiers to aggregate")
    adr_ids = {c.adr_id for c in classifiers}
    if len(adr_ids) != 1:
        raise MixedAdr(f"classifiers span several ADRs: {sorted(adr_ids)}")
    lengths = {len(c.params) for c in classifiers}
    if len(lengths) != 1:
        raise LengthMismatch(f"parameter lengths differ: {sorted(lengths)}")

    ordered = sorted(classifiers, key=lambda c: c.client_id)
    total = np.zeros_like(ordered[0].params)
    denom = 0.0
    for c in ordered:
        weight = float(c.train_size) if size_weighted else 1.0
        total = total + weight * c.params
        denom += weight
    return AggregatedClassifier(
        adr_id=ordered[0].adr_id,
        params=total / denom,
        contributor_ids=tuple(c.client_id for c in ordered),
    )


def distance(lb: LocalClassifier, g: AggregatedClassifier) -> float:
    if len(lb.params) != len(g.params):
        raise LengthMismatch("parameter lengths differ")
    if lb.adr_id != g.adr_id:
        raise MixedAdr(f"classifier adr {lb.adr_id} vs aggregate adr {g.adr_id}")
    return float(np.linalg.norm(lb.params - g.params))


def flag_biased(
    distances: dict[tuple[int, int], float],
    table_sizes: dict[tuple[int, int], int],
    cfg: DetectionConfig,
) -> frozenset[tuple[int, int]]:
    """Tables at distance >= epsilon; tiny tables are exempt."""
    return frozenset(
        key
        for key, dist in distances.items()
        if dist >= cfg.epsilon and table_sizes[key] >= cfg.min_table_size
    )


def assemble_clean(
    split: SplitDataset, flagged: frozenset[tuple[int, int]] | set[tuple[int, int]]
) -> Dataset:
    """All unflagged tables, concatenated client-then-ADR-then-record order."""
    records = []
    for client in split.clients:
        for table in client.tables:
            if (table.client_id, table.adr_id) in flagged:
                continue
            records.extend(table.records)
    if not records:
        raise AllTablesFlagged("every table was flagged as biased")
    return Dataset(
        records=tuple(records),
        schema=split.schema,
        adr_universe=split.adr_universe,
        adr_names=split.adr_names,
        provenance="clean",
    )


def run_detection(
    split: SplitDataset, cfg: DetectionConfig
) -> tuple[Dataset, DetectionReport]:
    by_adr: dict[int, list[LocalClassifier]] = {}
    table_sizes: dict[tuple[int, int], int] = {}
    for table in split.tables():
        lb = train_local(table, cfg.training)
        by_adr.setdefault(table.adr_id, []).append(lb)
        table_sizes[(table.client_id, table.adr_id)] = len(table)

    aggregated = []
    distances: dict[tuple[int, int], float] = {}
    for adr_id in sorted(by_adr):
        agg = pre_aggregate(by_adr[adr_id], size_weighted=cfg.size_weighted)
        aggregated.append(agg)
        for lb in by_adr[adr_id]:
            distances[(lb.client_id, lb.adr_id)] = distance(lb, agg)

    flagged = flag_biased(distances, table_sizes, cfg)
    clean = assemble_clean(split, flagged)
    report = DetectionReport(
        distances=distances,
        flagged=flagged,
        aggregated_per_adr=tuple(aggregated),
        table_sizes=table_sizes,
        epsilon=cfg.epsilon,
    )
    return clean, report


def save_report(report: DetectionReport, json_path: Path | str) -> None:
    rows = [
        {
            "client_id": c,
            "adr_id": a,
            "distance": report.distances[(c, a)],
            "table_size": report.table_sizes[(c, a)],
            "flagged": (c, a) in report.flagged,
        }
        for c, a in sorted(report.distances)
    ]
    payload = {"epsilon": report.epsilon, "tables": rows}
    Path(json_path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def save_aggregates_csv(report: DetectionReport, csv_path: Path | str) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["adr_id", "contributors", "params"])
        for agg in report.aggregated_per_adr:
            writer.writerow(
                [
                    agg.adr_id,
                    " ".join(str(c) for c in agg.contributor_ids),
                    " ".join(repr(v) for v in agg.params),
                ]
            )
