"""Corpus acquisition: quarterly-file parsing, synthetic generation, bias injection.

Quarterly input mirrors the public adverse-event ASCII layout: four
``$``-delimited text files per quarter (DEMO / DRUG / REAC / OUTC), first line
a header, no quoting or escaping. Fields are kept verbatim as strings;
`assemble_dataset` joins them on ``primaryid`` into one record per
(report, reaction) pair.

`generate_synthetic` builds a seeded corpus whose per-ADR tables are
learnably distinct: each ADR gets its own mean vector on numeric features, a
drug with elevated co-occurrence, and a logistic severe-outcome model whose
rate is boosted when the associated drug is involved.

Bias injection has two surfaces. `inject_bias_tables` operates on an already
split corpus and is what the pipeline uses: round-robin splitting makes
client sizes differ by at most one, so a depleted table cannot be produced by
deleting records before the split. `inject_bias` honours the dataset-level
contract by simulating the split assignment and editing records in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Optional

import numpy as np

from .domain import (
    AdrTable,
    AdverseEventRecord,
    BiasAnnotation,
    ClientSplit,
    Dataset,
    FeatureColumn,
    FeatureSchema,
    Quarter,
    Rng,
    SplitDataset,
)
from .errors import (
    EmptyTarget,
    FedpharmError,
    MissingFile,
    NonUtf8Input,
    RaggedRow,
    SchemaMismatch,
)
from .preprocess import preprocess, split_uniform

DELIMITER = "$"

SEVERE_OUTCOME_CODES = {"DE", "LT", "HO", "DS"}  # death, life-threat, hosp., disability

_ADR_NAME_POOL = (
    "headache",
    "tachycardia",
    "sick",
    "pain",
    "cough",
    "fever",
    "rash",
    "nausea",
    "dizziness",
    "dyspnoea",
)


@dataclass(frozen=True)
class RawQuarter:
    """Verbatim string rows of one quarter's four files, keyed by primaryid."""

    quarter: Quarter
    demo_header: tuple[str, ...]
    drug_header: tuple[str, ...]
    reac_header: tuple[str, ...]
    outc_header: tuple[str, ...]
    demo_rows: tuple[tuple[str, ...], ...]
    drug_rows: tuple[tuple[str, ...], ...]
    reac_rows: tuple[tuple[str, ...], ...]
    outc_rows: tuple[tuple[str, ...], ...]


@dataclass(frozen=True)
class BiasSpec:
    """What to corrupt and how.

    targets: explicit table coordinates {(client_id, adr_id), ...} or a float
    fraction of tables to pick with the seeded stream.

    mode / intensity:
      label_flip    flip outcome_severe on round(intensity * len) records
      feature_shift add intensity to the named numeric columns of every record
      under_report  delete round(intensity * n_severe) severe records
    """

    mode: str
    targets: frozenset[tuple[int, int]] | float
    intensity: float
    rng_seed: int
    columns: tuple[str, ...] = ()


MODES = ("label_flip", "feature_shift", "under_report")


def validate_bias_spec(spec: BiasSpec, schema: FeatureSchema) -> None:
    if spec.mode not in MODES:
        raise FedpharmError(f"unknown bias mode {spec.mode!r}")
    if spec.mode in ("label_flip", "under_report") and not 0.0 <= spec.intensity <= 1.0:
        raise FedpharmError(f"{spec.mode} intensity must lie in [0, 1]")
    if spec.mode == "feature_shift":
        if not spec.columns:
            raise FedpharmError("feature_shift needs at least one column name")
        names = set(schema.names)
        for col in spec.columns:
            if col not in names:
                raise FedpharmError(f"feature_shift column {col!r} not in schema")
            if schema.column(col).kind != "numeric":
                raise FedpharmError(f"feature_shift column {col!r} is not numeric")


# -- quarterly file parsing ---------------------------------------------------


def _read_table(path: Path) -> tuple[tuple[str, ...], tuple[tuple[str, ...], ...]]:
    if not path.exists():
        raise MissingFile(str(path))
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise NonUtf8Input(f"{path}: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FedpharmError(f"{path}: empty file, header expected")
    header = tuple(lines[0].split(DELIMITER))
    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        fields = tuple(line.split(DELIMITER))
        if len(fields) != len(header):
            raise RaggedRow(str(path), line_no, len(header), len(fields))
        rows.append(fields)
    return header, tuple(rows)


def quarter_file_names(quarter: Quarter) -> dict[str, str]:
    tag = f"{quarter.year % 100:02d}Q{quarter.q}"
    return {kind: f"{kind}{tag}.txt" for kind in ("DEMO", "DRUG", "REAC", "OUTC")}


def parse_quarter(directory: Path | str, quarter: Quarter) -> RawQuarter:
    directory = Path(directory)
    names = quarter_file_names(quarter)
    demo_h, demo = _read_table(directory / names["DEMO"])
    drug_h, drug = _read_table(directory / names["DRUG"])
    reac_h, reac = _read_table(directory / names["REAC"])
    outc_h, outc = _read_table(directory / names["OUTC"])
    return RawQuarter(
        quarter=quarter,
        demo_header=demo_h,
        drug_header=drug_h,
        reac_header=reac_h,
        outc_header=outc_h,
        demo_rows=demo,
        drug_rows=drug,
        reac_rows=reac,
        outc_rows=outc,
    )


def serialize_quarter(raw: RawQuarter, directory: Path | str) -> None:
    """Write the four files back out, field-for-field."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = quarter_file_names(raw.quarter)
    for kind, header, rows in (
        ("DEMO", raw.demo_header, raw.demo_rows),
        ("DRUG", raw.drug_header, raw.drug_rows),
        ("REAC", raw.reac_header, raw.reac_rows),
        ("OUTC", raw.outc_header, raw.outc_rows),
    ):
        lines = [DELIMITER.join(header)] + [DELIMITER.join(r) for r in rows]
        (directory / names[kind]).write_text("\n".join(lines) + "\n", encoding="utf-8")


def validate_raw_quarter(raw: RawQuarter) -> list[str]:
    problems = []
    try:
        demo_ids = {row[raw.demo_header.index("primaryid")] for row in raw.demo_rows}
    except ValueError:
        return ["DEMO header lacks a primaryid field"]
    for kind, header, rows in (
        ("DRUG", raw.drug_header, raw.drug_rows),
        ("REAC", raw.reac_header, raw.reac_rows),
        ("OUTC", raw.outc_header, raw.outc_rows),
    ):
        if "primaryid" not in header:
            problems.append(f"{kind} header lacks a primaryid field")
            continue
        idx = header.index("primaryid")
        for row in rows:
            if row[idx] not in demo_ids:
                problems.append(f"{kind} row primaryid {row[idx]!r} has no DEMO row")
    return problems


# -- joining raw rows into records -------------------------------------------


def _parse_float(text: str) -> Optional[float]:
    try:
        return float(text)
    except ValueError:
        return None


def _parse_event_date(text: str, quarter: Quarter) -> date:
    if len(text) == 8 and text.isdigit():
        try:
            return date(int(text[:4]), int(text[4:6]), int(text[6:8]))
        except ValueError:
            pass
    return quarter.first_day()


def assemble_dataset(raw: RawQuarter, schema: FeatureSchema) -> Dataset:
    """One record per (primaryid, reaction); numeric junk becomes missing."""
    problems = validate_raw_quarter(raw)
    if problems:
        raise FedpharmError("raw quarter invalid: " + "; ".join(problems[:5]))

    demo_fields = {name: i for i, name in enumerate(raw.demo_header)}
    drug_fields = {name: i for i, name in enumerate(raw.drug_header)}

    # A schema column is sourced either from a DEMO field of the same name or,
    # for one-hot columns named <field>_is_<value>, from DEMO or DRUG.
    resolvers = []
    for col in schema.columns:
        if col.name in demo_fields:
            idx = demo_fields[col.name]
            resolvers.append(("demo_num", idx, None))
        elif "_is_" in col.name:
            fld, _, value = col.name.partition("_is_")
            if fld in demo_fields:
                resolvers.append(("demo_hot", demo_fields[fld], value))
            elif fld in drug_fields:
                resolvers.append(("drug_hot", drug_fields[fld], value))
            else:
                raise SchemaMismatch(f"column {col.name!r}: no source field {fld!r}")
        else:
            raise SchemaMismatch(f"column {col.name!r} has no source field")

    demo_by_id = {}
    for row in raw.demo_rows:
        demo_by_id.setdefault(row[demo_fields["primaryid"]], row)

    drug_by_id: dict[str, tuple[str, ...]] = {}
    pid_idx = raw.drug_header.index("primaryid")
    seq_idx = raw.drug_header.index("drug_seq") if "drug_seq" in raw.drug_header else None
    for row in raw.drug_rows:
        pid = row[pid_idx]
        if pid not in drug_by_id:
            drug_by_id[pid] = row
        elif seq_idx is not None:
            old = _parse_float(drug_by_id[pid][seq_idx])
            new = _parse_float(row[seq_idx])
            if old is not None and new is not None and new < old:
                drug_by_id[pid] = row

    severe_ids = set()
    outc_pid = raw.outc_header.index("primaryid")
    outc_cod = raw.outc_header.index("outc_cod") if "outc_cod" in raw.outc_header else None
    if outc_cod is not None:
        for row in raw.outc_rows:
            if row[outc_cod].strip().upper() in SEVERE_OUTCOME_CODES:
                severe_ids.add(row[outc_pid])

    reac_pid = raw.reac_header.index("primaryid")
    reac_pt = raw.reac_header.index("pt")
    adr_names = tuple(sorted({row[reac_pt].strip().lower() for row in raw.reac_rows}))
    adr_ids = {name: i for i, name in enumerate(adr_names)}

    drugname_idx = raw.drug_header.index("drugname") if "drugname" in raw.drug_header else None

    records = []
    for row in raw.reac_rows:
        pid = row[reac_pid]
        demo = demo_by_id[pid]
        drug_row = drug_by_id.get(pid)
        drug_code = (
            drug_row[drugname_idx].strip().lower()
            if drug_row is not None and drugname_idx is not None
            else "unknown"
        )
        raw_values = []
        for kind, idx, value in resolvers:
            if kind == "demo_num":
                raw_values.append(_parse_float(demo[idx]))
            elif kind == "demo_hot":
                raw_values.append(1.0 if demo[idx].strip().lower() == value else 0.0)
            else:  # drug_hot
                cell = drug_row[idx] if drug_row is not None else ""
                raw_values.append(1.0 if cell.strip().lower() == value else 0.0)
        event_idx = demo_fields.get("event_dt")
        records.append(
            AdverseEventRecord(
                patient_id=pid,
                drug_code=drug_code,
                event_date=_parse_event_date(
                    demo[event_idx] if event_idx is not None else "", raw.quarter
                ),
                quarter=raw.quarter,
                adr_label=adr_ids[row[reac_pt].strip().lower()],
                outcome_severe=pid in severe_ids,
                raw_features=tuple(raw_values),
            )
        )
    return Dataset(
        records=tuple(records),
        schema=schema,
        adr_universe=tuple(range(len(adr_names))),
        adr_names=adr_names,
        provenance="original",
    )


# -- schemas ------------------------------------------------------------------


def default_schema() -> FeatureSchema:
    """38-column synthetic schema: 27 numeric + 11 one-hot, 30 significant."""
    num = [
        # name, lower, upper, significant
        ("age", 0.0, 120.0, True),
        ("weight_kg", 0.5, 300.0, True),
        ("report_year", 2010.0, 2024.0, True),
        ("height_cm", 30.0, 250.0, True),
        ("bmi", 8.0, 80.0, True),
        ("systolic_bp", 50.0, 260.0, True),
        ("diastolic_bp", 30.0, 160.0, True),
        ("heart_rate", 20.0, 250.0, True),
        ("temperature_c", 30.0, 45.0, False),
        ("respiratory_rate", 4.0, 60.0, False),
        ("serum_creatinine", 0.1, 15.0, True),
        ("alt_u_l", 1.0, 3000.0, True),
        ("ast_u_l", 1.0, 3000.0, True),
        ("bilirubin_mg_dl", 0.05, 30.0, True),
        ("wbc_k_ul", 0.1, 200.0, True),
        ("hemoglobin_g_dl", 2.0, 25.0, True),
        ("platelet_k_ul", 1.0, 1500.0, True),
        ("glucose_mg_dl", 20.0, 900.0, True),
        ("sodium_mmol_l", 100.0, 180.0, True),
        ("potassium_mmol_l", 1.0, 9.0, True),
        ("qt_interval_ms", 200.0, 700.0, True),
        ("dose_mg", 0.01, 5000.0, True),
        ("therapy_days", 0.0, 3650.0, True),
        ("num_concomitant_drugs", 0.0, 60.0, True),
        ("prior_reaction_count", 0.0, 50.0, False),
        ("time_to_onset_days", 0.0, 3650.0, True),
        ("congenital_anomaly", 0.0, 1.0, True),
    ]
    cat = [
        ("sex_is_f", True),
        ("sex_is_m", True),
        ("sex_is_unknown", False),
        ("route_is_oral", True),
        ("route_is_intravenous", True),
        ("route_is_subcutaneous", True),
        ("route_is_intramuscular", True),
        ("route_is_topical", False),
        ("route_is_inhalation", False),
        ("route_is_rectal", False),
        ("route_is_other", False),
    ]
    columns = [FeatureColumn(n, "numeric", lo, hi, sig) for n, lo, hi, sig in num]
    columns += [FeatureColumn(n, "categorical", 0.0, 1.0, sig) for n, sig in cat]
    return FeatureSchema(tuple(columns))


def quarter_file_schema() -> FeatureSchema:
    """Small schema whose columns all resolve against the quarterly files."""
    return FeatureSchema(
        (
            FeatureColumn("age", "numeric", 0.0, 120.0, True),
            FeatureColumn("wt", "numeric", 0.5, 300.0, True),
            FeatureColumn("rept_yr", "numeric", 2010.0, 2024.0, True),
            FeatureColumn("cong_anom", "numeric", 0.0, 1.0, False),
            FeatureColumn("sex_is_f", "categorical", 0.0, 1.0, True),
            FeatureColumn("sex_is_m", "categorical", 0.0, 1.0, True),
            FeatureColumn("route_is_oral", "categorical", 0.0, 1.0, True),
            FeatureColumn("route_is_intravenous", "categorical", 0.0, 1.0, True),
            FeatureColumn("route_is_other", "categorical", 0.0, 1.0, False),
        )
    )


# -- synthetic corpus ---------------------------------------------------------


def _one_hot_groups(schema: FeatureSchema) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, col in enumerate(schema.columns):
        if col.kind == "categorical" and "_is_" in col.name:
            groups.setdefault(col.name.partition("_is_")[0], []).append(i)
    return groups


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of total * weights / sum(weights)."""
    quota = total * weights / weights.sum()
    counts = np.floor(quota).astype(int)
    remainder = quota - counts
    short = total - counts.sum()
    for idx in np.argsort(-remainder)[:short]:
        counts[idx] += 1
    return counts


def generate_synthetic(
    size: int,
    n_adr: int,
    schema: FeatureSchema,
    rng: Rng,
    adr_weights: Optional[list[float]] = None,
    duplicate_rate: float = 0.01,
    n_drugs: Optional[int] = None,
    drug_affinity: float = 0.45,
    severe_drug_boost: float = 1.6,
    missing_rate: float = 0.003,
    noise_scale: float = 0.12,
    outcome_weight: float = 2.2,
    severe_offset: float = -0.6,
) -> tuple[Dataset, BiasAnnotation]:
    """Seeded corpus with per-ADR feature and outcome structure.

    ADR counts follow adr_weights (near-balanced by default). Each record's
    severe-outcome probability is logistic in its latent feature values, with
    a boost when the ADR's associated drug is involved, so under-reporting of
    severe records preferentially removes signal-supporting reports.
    """
    if size < n_adr:
        raise FedpharmError("size must be >= n_adr")
    gen = rng.generator()
    n_cols = len(schema)
    numeric_idx = [i for i, c in enumerate(schema.columns) if c.kind == "numeric"]
    groups = _one_hot_groups(schema)

    weights = np.ones(n_adr) if adr_weights is None else np.asarray(adr_weights, float)
    if len(weights) != n_adr or np.any(weights <= 0):
        raise FedpharmError("adr_weights must be n_adr positive numbers")

    n_dups = int(round(size * duplicate_rate))
    counts = _apportion(size - n_dups, weights)

    n_drugs = n_drugs if n_drugs is not None else max(12, n_adr + 2)
    drug_names = tuple(f"d{k:02d}" for k in range(n_drugs))

    # Per-ADR structure: latent means on a grid, outcome model weights with a
    # shared magnitude pattern so local classifiers have comparable norms.
    grid = np.array([0.25, 0.40, 0.55, 0.70])
    latent_mean = grid[gen.integers(0, len(grid), size=(n_adr, len(numeric_idx)))]
    n_signal = min(6, len(numeric_idx))
    outcome_w = np.zeros((n_adr, len(numeric_idx)))
    for j in range(n_adr):
        picked = gen.choice(len(numeric_idx), size=n_signal, replace=False)
        signs = gen.choice([-1.0, 1.0], size=n_signal)
        outcome_w[j, picked] = outcome_weight * signs

    # Concentrated category mixes give each ADR a characteristic profile and
    # keep indicator variance (hence classifier noise) low inside a table.
    group_probs = {}
    for name, idxs in groups.items():
        alpha = np.ones(len(idxs)) * 0.25
        group_probs[name] = gen.dirichlet(alpha, size=n_adr)

    bernoulli_p = {}
    for i in numeric_idx:
        col = schema.columns[i]
        if col.lower == 0.0 and col.upper == 1.0:
            bernoulli_p[i] = gen.uniform(0.02, 0.15, size=n_adr)

    # Centre each ADR's outcome logit on its own generative mean so the
    # baseline severe rate sits near sigmoid(severe_offset) and the associated
    # drug lifts it towards sigmoid(severe_offset + severe_drug_boost).
    expected_latent = latent_mean.copy()
    for k, i in enumerate(numeric_idx):
        if i in bernoulli_p:
            expected_latent[:, k] = bernoulli_p[i]
    outcome_bias = severe_offset - np.einsum("jk,jk->j", outcome_w, expected_latent)

    int_like = {
        i
        for i in numeric_idx
        if schema.columns[i].name
        in ("report_year", "therapy_days", "num_concomitant_drugs", "prior_reaction_count", "time_to_onset_days")
    }

    adr_names = tuple(
        _ADR_NAME_POOL[j] if j < len(_ADR_NAME_POOL) else f"reaction_{j}" for j in range(n_adr)
    )

    nullable = [i for i, c in enumerate(schema.columns) if not c.significant][:4]
    nullable += [schema.index(c.name) for c in schema.columns if c.name in ("weight_kg", "height_cm")]

    records: list[AdverseEventRecord] = []
    adr_of_record = np.repeat(np.arange(n_adr), counts)
    gen.shuffle(adr_of_record)
    quarter_pool = [Quarter(y, q) for y in range(2010, 2025) for q in range(1, 4 if y == 2024 else 5)]

    for seq, j in enumerate(adr_of_record):
        j = int(j)
        latent = np.zeros(n_cols)
        raw = [0.0] * n_cols
        for k, i in enumerate(numeric_idx):
            col = schema.columns[i]
            if i in bernoulli_p:
                z = float(gen.random() < bernoulli_p[i][j])
            else:
                z = float(np.clip(latent_mean[j, k] + noise_scale * gen.standard_normal(), 0.0, 1.0))
            latent[i] = z
            value = col.lower + z * (col.upper - col.lower)
            if i in int_like:
                value = float(round(value))
                z = (value - col.lower) / (col.upper - col.lower)
                latent[i] = z
            raw[i] = value
        for name, idxs in groups.items():
            choice = gen.choice(len(idxs), p=group_probs[name][j])
            for k, i in enumerate(idxs):
                raw[i] = 1.0 if k == choice else 0.0
                latent[i] = raw[i]

        if gen.random() < drug_affinity:
            drug = drug_names[j % n_drugs]
        else:
            others = [d for k, d in enumerate(drug_names) if k != j % n_drugs]
            drug = others[gen.integers(0, len(others))]
        assoc = drug == drug_names[j % n_drugs]

        logit = outcome_bias[j] + float(outcome_w[j] @ latent[numeric_idx])
        if assoc:
            logit += severe_drug_boost
        severe = gen.random() < 1.0 / (1.0 + math.exp(-logit))

        quarter = quarter_pool[gen.integers(0, len(quarter_pool))]
        day = quarter.first_day() + timedelta(days=int(gen.integers(0, 89)))
        if "report_year" in schema.names:
            ri = schema.index("report_year")
            raw[ri] = float(quarter.year)
            latent[ri] = (quarter.year - schema.columns[ri].lower) / (
                schema.columns[ri].upper - schema.columns[ri].lower
            )
        if "rept_yr" in schema.names:
            ri = schema.index("rept_yr")
            raw[ri] = float(quarter.year)

        values: list[Optional[float]] = list(raw)
        for i in nullable:
            if gen.random() < missing_rate:
                values[i] = None

        records.append(
            AdverseEventRecord(
                patient_id=f"p{seq:07d}",
                drug_code=drug,
                event_date=day,
                quarter=quarter,
                adr_label=j,
                outcome_severe=bool(severe),
                raw_features=tuple(values),
            )
        )

    for _ in range(n_dups):
        records.append(records[int(gen.integers(0, len(records)))])

    dataset = Dataset(
        records=tuple(records),
        schema=schema,
        adr_universe=tuple(range(n_adr)),
        adr_names=adr_names,
        provenance="original",
    )
    return dataset, BiasAnnotation.empty()


def associated_drug(dataset: Dataset, adr_id: int) -> str:
    """Drug most frequently co-reported with an ADR."""
    counts: dict[str, int] = {}
    for r in dataset.records:
        if r.adr_label == adr_id:
            counts[r.drug_code] = counts.get(r.drug_code, 0) + 1
    return max(sorted(counts), key=counts.get)


# -- bias injection -----------------------------------------------------------


def _resolve_targets(
    spec: BiasSpec, available: list[tuple[int, int]], gen: np.random.Generator
) -> list[tuple[int, int]]:
    if isinstance(spec.targets, float):
        k = int(round(spec.targets * len(available)))
        if k == 0:
            raise EmptyTarget("target fraction resolves to zero tables")
        picked = gen.choice(len(available), size=k, replace=False)
        return sorted(available[i] for i in picked)
    explicit = sorted(spec.targets)
    if not explicit:
        raise EmptyTarget("no target tables given")
    missing = [t for t in explicit if t not in available]
    if missing:
        raise FedpharmError(f"target tables not present in split: {missing}")
    return explicit


def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, v))


def _bias_table_records(
    records: tuple[AdverseEventRecord, ...],
    spec: BiasSpec,
    schema: FeatureSchema,
    gen: np.random.Generator,
) -> tuple[tuple[AdverseEventRecord, ...], list[tuple[str, int]]]:
    """Apply one mode to one table; returns surviving records + touched ids."""
    touched: list[tuple[str, int]] = []
    if spec.mode == "label_flip":
        k = int(round(spec.intensity * len(records)))
        picked = set(gen.choice(len(records), size=k, replace=False)) if k else set()
        out = []
        for idx, rec in enumerate(records):
            if idx in picked:
                rec = replace(rec, outcome_severe=not rec.outcome_severe)
                touched.append(rec.identity)
            out.append(rec)
        return tuple(out), touched

    if spec.mode == "feature_shift":
        col_idx = [schema.index(c) for c in spec.columns]
        out = []
        for rec in records:
            if rec.features:
                feats = list(rec.features)
                for i in col_idx:
                    if feats[i] is not None:
                        feats[i] = _clamp01(feats[i] + spec.intensity)
                rec = replace(rec, features=tuple(feats))
            else:
                raws = list(rec.raw_features)
                for i in col_idx:
                    if raws[i] is not None:
                        raws[i] = raws[i] + spec.intensity
                rec = replace(rec, raw_features=tuple(raws))
            touched.append(rec.identity)
            out.append(rec)
        return tuple(out), touched

    # under_report
    severe_idx = [i for i, r in enumerate(records) if r.outcome_severe]
    k = int(round(spec.intensity * len(severe_idx)))
    picked = set(gen.choice(len(severe_idx), size=k, replace=False)) if k else set()
    doomed = {severe_idx[i] for i in picked}
    out = []
    for idx, rec in enumerate(records):
        if idx in doomed:
            touched.append(rec.identity)
        else:
            out.append(rec)
    return tuple(out), touched


def inject_bias_tables(
    split: SplitDataset, spec: BiasSpec
) -> tuple[SplitDataset, BiasAnnotation]:
    """Corrupt whole tables of an already split corpus (the pipeline path)."""
    validate_bias_spec(spec, split.schema)
    if spec.intensity == 0.0:
        return split, BiasAnnotation.empty()
    gen = Rng(spec.rng_seed).spawn("bias").generator()
    available = sorted(split.table_map().keys())
    targets = set(_resolve_targets(spec, available, gen))

    touched_all: list[tuple[str, int]] = []
    clients = []
    for client in split.clients:
        tables = []
        for table in client.tables:
            if (table.client_id, table.adr_id) in targets:
                new_records, touched = _bias_table_records(
                    table.records, spec, split.schema, gen
                )
                touched_all.extend(touched)
                if new_records:
                    tables.append(replace(table, records=new_records))
            else:
                tables.append(table)
        clients.append(replace(client, tables=tuple(tables)))
    annotation = BiasAnnotation(frozenset(targets), frozenset(touched_all))
    return replace(split, clients=tuple(clients)), annotation


def inject_bias(
    d: Dataset, split_plan: tuple[int, int], spec: BiasSpec
) -> tuple[Dataset, BiasAnnotation]:
    """Dataset-level injection: simulate the split assignment, edit in place.

    Records that the (n, m) split with this seed would deal into the target
    tables are modified or deleted; everything else, and the record order,
    is untouched.
    """
    validate_bias_spec(spec, d.schema)
    if spec.intensity == 0.0:
        return d, BiasAnnotation.empty()
    n, m = split_plan
    if m != len(d.adr_universe):
        raise FedpharmError(f"split plan m={m} != corpus ADR count {len(d.adr_universe)}")

    sim = d if d.provenance == "preprocessed" else preprocess(d)[0]
    split = split_uniform(sim, n, Rng(spec.rng_seed).spawn("split"))
    gen = Rng(spec.rng_seed).spawn("bias").generator()
    available = sorted(split.table_map().keys())
    targets = set(_resolve_targets(spec, available, gen))

    flipped: set[tuple[str, int]] = set()
    shifted: set[tuple[str, int]] = set()
    deleted: set[tuple[str, int]] = set()
    for table in split.tables():
        if (table.client_id, table.adr_id) not in targets:
            continue
        _, touched = _bias_table_records(table.records, spec, split.schema, gen)
        sink = {"label_flip": flipped, "feature_shift": shifted, "under_report": deleted}[spec.mode]
        sink.update(touched)

    col_idx = [d.schema.index(c) for c in spec.columns] if spec.columns else []
    out = []
    for rec in d.records:
        ident = rec.identity
        if ident in deleted:
            continue
        if ident in flipped:
            rec = replace(rec, outcome_severe=not rec.outcome_severe)
        if ident in shifted:
            raws = list(rec.raw_features)
            for i in col_idx:
                if raws[i] is not None:
                    raws[i] = raws[i] + spec.intensity
            rec = replace(rec, raw_features=tuple(raws))
        out.append(rec)

    annotation = BiasAnnotation(frozenset(targets), frozenset(flipped | shifted | deleted))
    return replace(d, records=tuple(out)), annotation
