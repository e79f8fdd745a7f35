"""Core data model: feature schema, records, datasets, split tables, seeded RNG.

All types are frozen dataclasses; pipeline stages never mutate, they build new
values. `validate_dataset` reports invariant violations as data rather than
raising, so callers can decide what is fatal.

On-disk form of a dataset is a pair of files sharing a stem:

    <stem>.csv        one row per record; reserved columns
                      patient_id,drug_code,event_date,adr_label,outcome_severe,quarter
                      followed by one column per schema feature
    <stem>.meta.json  schema (bounds, significance), ADR universe + names,
                      provenance, which value stage the CSV holds
                      ("raw" pre-normalization / "normalized" after),
                      and per-column min/max once normalization ran

Floats are written with `repr` so the round trip is bit-exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import FedpharmError

PROVENANCES = ("original", "washed", "preprocessed", "split-member", "clean")

RESERVED_COLUMNS = (
    "patient_id",
    "drug_code",
    "event_date",
    "adr_label",
    "outcome_severe",
    "quarter",
)


@dataclass(frozen=True)
class Quarter:
    """A reporting quarter, e.g. 2013Q2."""

    year: int
    q: int

    def __str__(self) -> str:
        return f"{self.year}Q{self.q}"

    @classmethod
    def parse(cls, text: str) -> "Quarter":
        year, _, q = text.partition("Q")
        return cls(int(year), int(q))

    def first_day(self) -> date:
        return date(self.year, 3 * (self.q - 1) + 1, 1)


@dataclass(frozen=True)
class FeatureColumn:
    name: str
    kind: str  # "numeric" | "categorical"
    lower: float
    upper: float
    significant: bool


@dataclass(frozen=True)
class FeatureSchema:
    columns: tuple[FeatureColumn, ...]

    def __len__(self) -> int:
        return len(self.columns)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def column(self, name: str) -> FeatureColumn:
        return self.columns[self.index(name)]


@dataclass(frozen=True)
class AdverseEventRecord:
    """One cleaned adverse-event report.

    `raw_features` holds values in schema units before normalization;
    `features` holds the [0, 1]-scaled values afterwards. Exactly one of the
    two is populated at any pipeline stage (normalization moves the record
    from raw to scaled form). Missing values are None.
    """

    patient_id: str
    drug_code: str
    event_date: date
    quarter: Quarter
    adr_label: int
    outcome_severe: bool
    raw_features: tuple[Optional[float], ...]
    features: tuple[Optional[float], ...] = ()

    @property
    def identity(self) -> tuple[str, int]:
        return (self.patient_id, self.adr_label)

    def values(self) -> tuple[Optional[float], ...]:
        return self.features if self.features else self.raw_features


@dataclass(frozen=True)
class Dataset:
    records: tuple[AdverseEventRecord, ...]
    schema: FeatureSchema
    adr_universe: tuple[int, ...]
    adr_names: tuple[str, ...]
    provenance: str
    # (min, max) per column once normalization ran; informational
    norm_stats: Optional[tuple[Optional[tuple[float, float]], ...]] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_adr(self) -> int:
        return len(self.adr_universe)

    def adr_name(self, adr_id: int) -> str:
        return self.adr_names[self.adr_universe.index(adr_id)]

    def drug_codes(self) -> tuple[str, ...]:
        return tuple(sorted({r.drug_code for r in self.records}))

    def feature_matrix(self) -> np.ndarray:
        """Dense feature matrix; requires complete scaled features."""
        return np.array([r.features for r in self.records], dtype=np.float64)

    def severe_labels(self) -> np.ndarray:
        return np.array([r.outcome_severe for r in self.records], dtype=np.float64)

    def adr_labels(self) -> np.ndarray:
        return np.array([r.adr_label for r in self.records], dtype=np.int64)


@dataclass(frozen=True)
class AdrTable:
    """All records of one simulated client for one ADR."""

    client_id: int
    adr_id: int
    records: tuple[AdverseEventRecord, ...]

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class ClientSplit:
    client_id: int
    tables: tuple[AdrTable, ...]


@dataclass(frozen=True)
class SplitDataset:
    clients: tuple[ClientSplit, ...]
    schema: FeatureSchema
    adr_universe: tuple[int, ...]
    adr_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return len(self.clients)

    @property
    def m(self) -> int:
        return len(self.adr_universe)

    def tables(self) -> Iterator[AdrTable]:
        for client in self.clients:
            yield from client.tables

    def table_map(self) -> dict[tuple[int, int], AdrTable]:
        return {(t.client_id, t.adr_id): t for t in self.tables()}

    def all_records(self) -> tuple[AdverseEventRecord, ...]:
        return tuple(r for t in self.tables() for r in t.records)


@dataclass(frozen=True)
class BiasAnnotation:
    """Ground truth of injected bias, for synthetic corpora."""

    biased_tables: frozenset[tuple[int, int]]
    biased_record_ids: frozenset[tuple[str, int]]

    @classmethod
    def empty(cls) -> "BiasAnnotation":
        return cls(frozenset(), frozenset())

    def to_json(self) -> str:
        return json.dumps(
            {
                "biased_tables": sorted(list(t) for t in self.biased_tables),
                "biased_record_ids": sorted(list(r) for r in self.biased_record_ids),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "BiasAnnotation":
        obj = json.loads(text)
        return cls(
            frozenset((int(c), int(a)) for c, a in obj["biased_tables"]),
            frozenset((str(p), int(a)) for p, a in obj["biased_record_ids"]),
        )


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    record_index: Optional[int] = None
    column: Optional[str] = None


class Rng:
    """Deterministic random source: a fixed seed drives a PCG64 stream.

    Identical seeds produce identical streams on every platform. Child
    streams are derived by hashing the parent seed with a label, so
    independent pipeline stages stay decoupled yet reproducible.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, label: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def validate_dataset(d: Dataset) -> list[Violation]:
    """Return every invariant violation; an empty list means valid."""
    out: list[Violation] = []
    n_cols = len(d.schema)

    if d.provenance not in PROVENANCES:
        out.append(Violation("provenance", f"unknown provenance {d.provenance!r}"))
    if len(d.adr_universe) != len(set(d.adr_universe)):
        out.append(Violation("universe", "adr_universe contains duplicates"))
    if len(d.adr_names) != len(d.adr_universe):
        out.append(Violation("universe", "adr_names length differs from adr_universe"))

    significant = [c for c in d.schema.columns if c.significant]
    if not significant:
        out.append(Violation("schema", "no column is marked significant"))
    for col in d.schema.columns:
        if col.kind == "numeric" and not col.lower < col.upper:
            out.append(
                Violation("schema", f"column {col.name}: lower must be < upper", column=col.name)
            )

    universe = set(d.adr_universe)
    for i, rec in enumerate(d.records):
        if rec.adr_label not in universe:
            out.append(
                Violation(
                    "universe",
                    f"record {i}: adr_label {rec.adr_label} not in adr_universe",
                    record_index=i,
                )
            )
        if rec.raw_features and len(rec.raw_features) != n_cols:
            out.append(
                Violation(
                    "feature_length",
                    f"record {i}: raw_features length {len(rec.raw_features)} != schema {n_cols}",
                    record_index=i,
                )
            )
        if rec.features:
            if len(rec.features) != n_cols:
                out.append(
                    Violation(
                        "feature_length",
                        f"record {i}: features length {len(rec.features)} != schema {n_cols}",
                        record_index=i,
                    )
                )
            else:
                for col, v in zip(d.schema.columns, rec.features):
                    if v is not None and not 0.0 <= v <= 1.0:
                        out.append(
                            Violation(
                                "feature_range",
                                f"record {i}: {col.name}={v!r} outside [0, 1]",
                                record_index=i,
                                column=col.name,
                            )
                        )
        if rec.features and rec.raw_features:
            out.append(
                Violation(
                    "feature_stage",
                    f"record {i}: both raw and scaled features populated",
                    record_index=i,
                )
            )
    return out


# -- serialization -----------------------------------------------------------


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def _parse_cell(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def meta_path(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.stem + ".meta.json")


def schema_to_obj(schema: FeatureSchema) -> list[dict]:
    return [
        {
            "name": c.name,
            "kind": c.kind,
            "lower": c.lower,
            "upper": c.upper,
            "significant": c.significant,
        }
        for c in schema.columns
    ]


def schema_from_obj(obj: list[dict]) -> FeatureSchema:
    return FeatureSchema(
        tuple(
            FeatureColumn(c["name"], c["kind"], float(c["lower"]), float(c["upper"]), bool(c["significant"]))
            for c in obj
        )
    )


def save_dataset(d: Dataset, csv_path: Path | str) -> None:
    csv_path = Path(csv_path)
    stage = "normalized" if any(r.features for r in d.records) else "raw"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(RESERVED_COLUMNS) + list(d.schema.names))
        for rec in d.records:
            vals = rec.features if stage == "normalized" else rec.raw_features
            writer.writerow(
                [
                    rec.patient_id,
                    rec.drug_code,
                    rec.event_date.isoformat(),
                    rec.adr_label,
                    int(rec.outcome_severe),
                    str(rec.quarter),
                ]
                + [_fmt(v) for v in vals]
            )
    meta = {
        "schema": schema_to_obj(d.schema),
        "adr_universe": list(d.adr_universe),
        "adr_names": list(d.adr_names),
        "provenance": d.provenance,
        "stage": stage,
        "norm_stats": None
        if d.norm_stats is None
        else [list(s) if s is not None else None for s in d.norm_stats],
    }
    meta_path(csv_path).write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_dataset(csv_path: Path | str) -> Dataset:
    csv_path = Path(csv_path)
    meta = json.loads(meta_path(csv_path).read_text(encoding="utf-8"))
    schema = schema_from_obj(meta["schema"])
    stage = meta["stage"]
    records = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = list(RESERVED_COLUMNS) + list(schema.names)
        if header != expected:
            raise FedpharmError(f"{csv_path}: header does not match schema meta")
        for row in reader:
            fixed, feats = row[: len(RESERVED_COLUMNS)], row[len(RESERVED_COLUMNS):]
            values = tuple(_parse_cell(v) for v in feats)
            records.append(
                AdverseEventRecord(
                    patient_id=fixed[0],
                    drug_code=fixed[1],
                    event_date=date.fromisoformat(fixed[2]),
                    quarter=Quarter.parse(fixed[5]),
                    adr_label=int(fixed[3]),
                    outcome_severe=bool(int(fixed[4])),
                    raw_features=values if stage == "raw" else (),
                    features=values if stage == "normalized" else (),
                )
            )
    norm_stats = meta.get("norm_stats")
    return Dataset(
        records=tuple(records),
        schema=schema,
        adr_universe=tuple(int(a) for a in meta["adr_universe"]),
        adr_names=tuple(meta["adr_names"]),
        provenance=meta["provenance"],
        norm_stats=None
        if norm_stats is None
        else tuple(tuple(s) if s is not None else None for s in norm_stats),
    )


def record_multiset(records) -> dict:
    """Multiset of full record values, for conservation checks."""
    counts: dict = {}
    for r in records:
        counts[r] = counts.get(r, 0) + 1
    return counts
