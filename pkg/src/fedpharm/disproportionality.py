"""Reporting odds ratio and proportional reporting ratio on 2x2 counts.

For a (drug, reaction) pair the contingency cells over a dataset are

    a  target drug & target reaction     b  target drug & other reactions
    c  other drugs & target reaction     d  other drugs & other reactions

ROR = (a*d)/(b*c);  PRR = (a/(a+b)) / (c/(c+d)).

When any cell is zero, 0.5 is added to all four cells before computing the
point estimate and its confidence interval (Haldane-Anscombe), so every pair
stays reportable. 95% intervals are the usual log-scale Wald form:

    ROR: exp(ln ROR +- 1.96 * sqrt(1/a + 1/b + 1/c + 1/d))
    PRR: exp(ln PRR +- 1.96 * sqrt(1/a - 1/(a+b) + 1/c - 1/(c+d)))

The ratio formulas themselves are the standard pharmacovigilance
definitions; "other drugs" means every record in the same dataset with a
different drug code, no external background population.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

from .domain import Dataset
from .errors import SchemaMismatch, UnknownAdr, UnknownDrug

Z95 = 1.96


@dataclass(frozen=True)
class ContingencyTable:
    a: int
    b: int
    c: int
    d: int

    @property
    def total(self) -> int:
        return self.a + self.b + self.c + self.d


@dataclass(frozen=True)
class SignalStat:
    drug_code: str
    adr_id: int
    ror: float
    ror_ci95: tuple[float, float]
    prr: float
    prr_ci95: tuple[float, float]
    corrected: bool


def _count_cells(d: Dataset, drug: str, adr: int) -> ContingencyTable:
    a = b = c = dd = 0
    for rec in d.records:
        if rec.drug_code == drug:
            if rec.adr_label == adr:
                a += 1
            else:
                b += 1
        elif rec.adr_label == adr:
            c += 1
        else:
            dd += 1
    return ContingencyTable(a, b, c, dd)


def contingency(d: Dataset, drug: str, adr: int) -> ContingencyTable:
    if all(rec.drug_code != drug for rec in d.records):
        raise UnknownDrug(f"drug {drug!r} does not occur in the dataset")
    if adr not in d.adr_universe:
        raise UnknownAdr(f"adr {adr} not in the dataset universe")
    return _count_cells(d, drug, adr)


def _corrected(t: ContingencyTable) -> tuple[float, float, float, float, bool]:
    cells = (t.a, t.b, t.c, t.d)
    if 0 in cells:
        return (t.a + 0.5, t.b + 0.5, t.c + 0.5, t.d + 0.5, True)
    return (float(t.a), float(t.b), float(t.c), float(t.d), False)


def ror(t: ContingencyTable) -> tuple[float, tuple[float, float]]:
    a, b, c, d, _ = _corrected(t)
    value = (a * d) / (b * c)
    se = math.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
    log_v = math.log(value)
    return value, (math.exp(log_v - Z95 * se), math.exp(log_v + Z95 * se))


def prr(t: ContingencyTable) -> tuple[float, tuple[float, float]]:
    a, b, c, d, _ = _corrected(t)
    value = (a / (a + b)) / (c / (c + d))
    se = math.sqrt(1 / a - 1 / (a + b) + 1 / c - 1 / (c + d))
    log_v = math.log(value)
    return value, (math.exp(log_v - Z95 * se), math.exp(log_v + Z95 * se))


def signal_stat(d: Dataset, drug: str, adr: int) -> SignalStat:
    t = _count_cells(d, drug, adr)
    corrected = 0 in (t.a, t.b, t.c, t.d)
    ror_v, ror_ci = ror(t)
    prr_v, prr_ci = prr(t)
    return SignalStat(
        drug_code=drug,
        adr_id=adr,
        ror=ror_v,
        ror_ci95=ror_ci,
        prr=prr_v,
        prr_ci95=prr_ci,
        corrected=corrected,
    )


def compare(original: Dataset, clean: Dataset) -> list[tuple[SignalStat, SignalStat]]:
    """Paired stats for every (drug, adr) seen in either dataset.

    Sorted by ADR then drug for stable output.
    """
    if original.schema != clean.schema or original.adr_universe != clean.adr_universe:
        raise SchemaMismatch("datasets differ in schema or ADR universe")
    drugs = sorted(set(original.drug_codes()) | set(clean.drug_codes()))
    pairs = []
    for adr in original.adr_universe:
        for drug in drugs:
            pairs.append((signal_stat(original, drug, adr), signal_stat(clean, drug, adr)))
    return pairs


def save_comparison_csv(
    pairs: list[tuple[SignalStat, SignalStat]], csv_path: Path | str
) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "adr",
                "drug",
                "ror_orig",
                "ror_clean",
                "prr_orig",
                "prr_clean",
                "ror_ci_lo_orig",
                "ror_ci_hi_orig",
                "ror_ci_lo_clean",
                "ror_ci_hi_clean",
                "prr_ci_lo_orig",
                "prr_ci_hi_orig",
                "prr_ci_lo_clean",
                "prr_ci_hi_clean",
                "corrected",
            ]
        )
        for orig, cln in pairs:
            writer.writerow(
                [
                    orig.adr_id,
                    orig.drug_code,
                    repr(orig.ror),
                    repr(cln.ror),
                    repr(orig.prr),
                    repr(cln.prr),
                    repr(orig.ror_ci95[0]),
                    repr(orig.ror_ci95[1]),
                    repr(cln.ror_ci95[0]),
                    repr(cln.ror_ci95[1]),
                    repr(orig.prr_ci95[0]),
                    repr(orig.prr_ci95[1]),
                    repr(cln.prr_ci95[0]),
                    repr(cln.prr_ci95[1]),
                    int(orig.corrected or cln.corrected),
                ]
            )
