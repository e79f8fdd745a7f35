"""Corpus preparation: cleaning, normalization, feature deletion, client split.

The stages run in a fixed order:

    original --clean--> washed --normalize--> washed(scaled)
             --feature_delete--> preprocessed --split_uniform--> split tables

`clean` drops duplicate reports (same drug code, patient id, event date; first
occurrence wins) and records with out-of-bounds numeric values. `normalize`
min-max scales every column over its non-missing values; constant columns map
to 0. `feature_delete` drops insignificant columns and any record still
missing a significant value. `split_uniform` shuffles and deals records
round-robin so client sizes differ by at most one, then groups each client's
records into per-ADR tables.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .domain import (
    RESERVED_COLUMNS,
    AdrTable,
    AdverseEventRecord,
    ClientSplit,
    Dataset,
    FeatureSchema,
    Rng,
    SplitDataset,
    load_dataset,
    meta_path,
    save_dataset,
    schema_from_obj,
    schema_to_obj,
)
from .errors import AllRecordsRemoved, FedpharmError


@dataclass
class CleaningReport:
    duplicates_removed: int = 0
    out_of_bounds_removed: int = 0
    null_significant_removed: int = 0
    bound_hits: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "duplicates_removed": self.duplicates_removed,
                "out_of_bounds_removed": self.out_of_bounds_removed,
                "null_significant_removed": self.null_significant_removed,
                "bound_hits": dict(sorted(self.bound_hits.items())),
            },
            indent=2,
        )


def clean(d: Dataset) -> tuple[Dataset, CleaningReport]:
    """Deduplicate and bound-screen; idempotent on its own output."""
    report = CleaningReport()
    seen: set[tuple[str, str, str]] = set()
    kept: list[AdverseEventRecord] = []
    for rec in d.records:
        key = (rec.drug_code, rec.patient_id, rec.event_date.isoformat())
        if key in seen:
            report.duplicates_removed += 1
            continue
        seen.add(key)
        in_bounds = True
        for col, v in zip(d.schema.columns, rec.raw_features):
            if v is None:
                continue
            if not col.lower <= v <= col.upper:
                report.bound_hits[col.name] = report.bound_hits.get(col.name, 0) + 1
                in_bounds = False
        if not in_bounds:
            report.out_of_bounds_removed += 1
            continue
        kept.append(rec)
    washed = replace(d, records=tuple(kept), provenance="washed")
    return washed, report


def _scale(v: float, lo: float, hi: float) -> float:
    if hi == lo:
        return 0.0
    return (v - lo) / (hi - lo)


def normalize(d: Dataset) -> Dataset:
    """Min-max scale every column into [0, 1]; missing values stay missing."""
    n_cols = len(d.schema)
    stats: list[tuple[float, float] | None] = []
    for c in range(n_cols):
        observed = [r.raw_features[c] for r in d.records if r.raw_features[c] is not None]
        stats.append((min(observed), max(observed)) if observed else None)

    records = []
    for rec in d.records:
        scaled = tuple(
            None if v is None or stats[c] is None else _scale(v, *stats[c])
            for c, v in enumerate(rec.raw_features)
        )
        records.append(replace(rec, raw_features=(), features=scaled))
    return replace(d, records=tuple(records), norm_stats=tuple(stats))


def feature_delete(d: Dataset) -> Dataset:
    """Keep significant columns only; drop records missing any of them."""
    keep_idx = [i for i, c in enumerate(d.schema.columns) if c.significant]
    schema = FeatureSchema(tuple(d.schema.columns[i] for i in keep_idx))

    records = []
    for rec in d.records:
        vals = tuple(rec.features[i] for i in keep_idx)
        if any(v is None for v in vals):
            continue
        records.append(replace(rec, features=vals))
    if not records:
        raise AllRecordsRemoved("feature deletion removed every record")
    norm_stats = (
        tuple(d.norm_stats[i] for i in keep_idx) if d.norm_stats is not None else None
    )
    return Dataset(
        records=tuple(records),
        schema=schema,
        adr_universe=d.adr_universe,
        adr_names=d.adr_names,
        provenance="preprocessed",
        norm_stats=norm_stats,
    )


def preprocess(d: Dataset) -> tuple[Dataset, CleaningReport]:
    """clean + normalize + feature_delete, with a combined report."""
    washed, report = clean(d)
    scaled = normalize(washed)
    pre = feature_delete(scaled)
    report.null_significant_removed = len(scaled) - len(pre)
    return pre, report


def split_uniform(d: Dataset, n: int, rng: Rng) -> SplitDataset:
    """Shuffle, deal round-robin into n clients, table each client by ADR."""
    if n < 1:
        raise FedpharmError("client count must be >= 1")
    if not d.records:
        raise FedpharmError("cannot split an empty dataset")
    perm = rng.generator().permutation(len(d.records))
    dealt: list[list[AdverseEventRecord]] = [[] for _ in range(n)]
    for pos, rec_idx in enumerate(perm):
        dealt[pos % n].append(d.records[rec_idx])

    clients = []
    for i, records in enumerate(dealt, start=1):
        tables = []
        for adr in d.adr_universe:
            rows = tuple(r for r in records if r.adr_label == adr)
            if rows:
                tables.append(AdrTable(client_id=i, adr_id=adr, records=rows))
        clients.append(ClientSplit(client_id=i, tables=tuple(tables)))
    return SplitDataset(
        clients=tuple(clients),
        schema=d.schema,
        adr_universe=d.adr_universe,
        adr_names=d.adr_names,
    )


def flatten_split(split: SplitDataset, provenance: str = "preprocessed") -> Dataset:
    """Concatenate all tables (client order, ADR order, record order)."""
    return Dataset(
        records=split.all_records(),
        schema=split.schema,
        adr_universe=split.adr_universe,
        adr_names=split.adr_names,
        provenance=provenance,
    )


# -- split dataset on disk: client{i}/adr{j}.csv plus a shared meta file -----


def save_split(split: SplitDataset, out_dir: Path | str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema": schema_to_obj(split.schema),
        "adr_universe": list(split.adr_universe),
        "adr_names": list(split.adr_names),
        "n_clients": split.n,
    }
    (out_dir / "split.meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    for client in split.clients:
        client_dir = out_dir / f"client{client.client_id}"
        client_dir.mkdir(exist_ok=True)
        for table in client.tables:
            table_ds = Dataset(
                records=table.records,
                schema=split.schema,
                adr_universe=split.adr_universe,
                adr_names=split.adr_names,
                provenance="split-member",
            )
            save_dataset(table_ds, client_dir / f"adr{table.adr_id}.csv")


def load_split(out_dir: Path | str) -> SplitDataset:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "split.meta.json").read_text(encoding="utf-8"))
    schema = schema_from_obj(meta["schema"])
    universe = tuple(int(a) for a in meta["adr_universe"])
    clients = []
    for i in range(1, int(meta["n_clients"]) + 1):
        client_dir = out_dir / f"client{i}"
        tables = []
        for adr in universe:
            path = client_dir / f"adr{adr}.csv"
            if not path.exists():
                continue
            ds = load_dataset(path)
            tables.append(AdrTable(client_id=i, adr_id=adr, records=ds.records))
        clients.append(ClientSplit(client_id=i, tables=tuple(tables)))
    return SplitDataset(
        clients=tuple(clients),
        schema=schema,
        adr_universe=universe,
        adr_names=tuple(meta["adr_names"]),
    )
