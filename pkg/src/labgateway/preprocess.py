"""Turns fetched lab records into classifier-ready feature rows.

Stages, in pipeline order: status filtering, splitting into per-test-type
tables, the optional pre-merge filter, the all-vs-all merge across required
test types, and per-feature value cleaning / unit conversion / categorical
encoding with a final sufficiency check. Every function here is pure and safe
for unrestricted concurrent use.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from itertools import product
from typing import Iterable, Mapping, Sequence

from .errors import CombinationCapExceeded
from .ehr import LabRecord, ReportStatus
from .registry import ClassifierSpec, PreMergeRule, StatusRule

logger = logging.getLogger(__name__)

# Everything outside this set is stripped from numeric fields before parsing.
_NUMERIC_CHARS = re.compile(r"[^0-9.+\-eE]")
_MICRO_SIGNS = str.maketrans({"µ": "u", "μ": "u"})


@dataclass(frozen=True)
class TestTable:
    """All records of one test type, sorted by (result_datetime, test_id)."""

    test_type: str
    records: tuple[LabRecord, ...]


@dataclass(frozen=True)
class CaseCombination:
    """One merge product: exactly one record per required test type."""

    picks: dict[str, LabRecord]

    @property
    def test_ids(self) -> list[str]:
        return sorted({record.test_id for record in self.picks.values()})


@dataclass(frozen=True)
class FeatureRow:
    classifier_id: str
    values: tuple[tuple[str, float | None], ...]  # (feature name, value), schema order
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class Insufficient:
    """A combination that cannot supply every required feature."""

    missing_feature: str
    test_ids: tuple[str, ...]


def filter_by_status(
    records: Iterable[LabRecord], rules: Mapping[str, StatusRule]
) -> list[LabRecord]:
    """Keep records whose report status satisfies their test type's rule.

    Finalized always passes; Requested passes only under
    finalized_or_requested; Pending never passes. Test types without an
    explicit rule default to finalized_only.
    """
    kept = []
    for record in records:
        rule = rules.get(record.test_type, StatusRule.FINALIZED_ONLY)
        if record.report_status is ReportStatus.FINALIZED:
            kept.append(record)
        elif (
            record.report_status is ReportStatus.REQUESTED
            and rule is StatusRule.FINALIZED_OR_REQUESTED
        ):
            kept.append(record)
    return kept


def split_by_test_type(records: Iterable[LabRecord]) -> list[TestTable]:
    """Partition records into per-test-type tables.

    Within a table records are sorted by (result_datetime, test_id) so "first"
    is well defined and ties break deterministically; tables are returned in
    test-type name order.
    """
    by_type: dict[str, list[LabRecord]] = {}
    for record in records:
        by_type.setdefault(record.test_type, []).append(record)
    return [
        TestTable(
            test_type=test_type,
            records=tuple(sorted(group, key=lambda r: (r.result_datetime, r.test_id))),
        )
        for test_type, group in sorted(by_type.items())
    ]


def apply_pre_merge_rule(tables: Sequence[TestTable], rule: PreMergeRule) -> list[TestTable]:
    """all_combinations keeps every record; first_per_type truncates each
    table to its earliest record."""
    if rule is PreMergeRule.ALL_COMBINATIONS:
        return list(tables)
    return [TestTable(t.test_type, t.records[:1]) for t in tables]


def merge_all_vs_all(
    tables: Sequence[TestTable],
    required_test_types: frozenset[str] | set[str],
    cap: int,
) -> list[CaseCombination]:
    """Cartesian product of record choices across the required test types.

    The combination count is the product of per-type record counts; if any
    required type has no records the product is empty. Combinations come out
    in lexicographic order of per-type record indices, with types ordered by
    name. A count above the cap raises CombinationCapExceeded before any
    combination is materialized.
    """
    by_type = {t.test_type: t for t in tables}
    ordered_types = sorted(required_test_types)
    per_type: list[tuple[LabRecord, ...]] = []
    for test_type in ordered_types:
        table = by_type.get(test_type)
        per_type.append(table.records if table else ())

    count = math.prod(len(records) for records in per_type)
    if count > cap:
        raise CombinationCapExceeded(count, cap)
    if count == 0:
        return []
    return [
        CaseCombination(picks=dict(zip(ordered_types, choice)))
        for choice in product(*per_type)
    ]


def clean_numeric(raw: str) -> float | None:
    """Extract a number from a free-text EHR result field.

    Strips every character outside [0-9 . + - e E] and parses what is left;
    anything unparseable (or empty) yields None. Comparator prefixes such as
    "<0.1" lose the comparator under this rule, which is logged because the
    censored-value semantics are not preserved.
    """
    if raw is None:
        return None
    if "<" in raw or ">" in raw:
        logger.warning("censored value %r: comparator stripped, bound retained", raw)
    stripped = _NUMERIC_CHARS.sub("", raw)
    if not stripped:
        return None
    try:
        value = float(stripped)
    except ValueError:
        return None
    if math.isnan(value) or math.isinf(value):
        return None
    return value


class UnitTable:
    """Explicit (from, to, factor) conversion triples from the config file.

    Inverse pairs are derived automatically unless declared. Unit strings are
    normalized only by trimming whitespace and unifying the two micro-sign
    codepoints with "u"; no dimensional analysis is attempted, so every
    clinically relevant pair must be spelled out.
    """

    def __init__(self, triples: Iterable[tuple[str, str, float]] = ()):
        self._factors: dict[tuple[str, str], float] = {}
        derived: dict[tuple[str, str], float] = {}
        for src, dst, factor in triples:
            key = (self._norm(src), self._norm(dst))
            self._factors[key] = factor
            derived.setdefault((key[1], key[0]), 1.0 / factor)
        for key, factor in derived.items():
            self._factors.setdefault(key, factor)

    @staticmethod
    def _norm(unit: str) -> str:
        return unit.strip().translate(_MICRO_SIGNS)

    def pairs(self) -> list[tuple[str, str]]:
        return sorted(self._factors)

    def convert(self, value: float, from_unit: str, to_unit: str) -> float:
        """Multiply by the table factor; identity when the units agree."""
        src, dst = self._norm(from_unit), self._norm(to_unit)
        if src == dst:
            return value
        factor = self._factors.get((src, dst))
        if factor is None:
            raise KeyError(f"no unit conversion from '{from_unit}' to '{to_unit}'")
        return value * factor


def convert_units(value: float, from_unit: str, to_unit: str, table: UnitTable) -> float:
    return table.convert(value, from_unit, to_unit)


def encode_categorical(raw: str, mapping: Mapping[str, float]) -> float | None:
    """Case-insensitive, whitespace-trimmed category lookup; unmapped -> None."""
    key = raw.strip().lower()
    if key in mapping:
        return mapping[key]
    logger.warning("unmapped categorical value %r", raw)
    return None


def _find_analyte(record: LabRecord, analyte_name: str):
    # Last occurrence wins when a test reports the same analyte twice.
    found = None
    duplicate = False
    for analyte in record.analytes:
        if analyte.name == analyte_name:
            if found is not None:
                duplicate = True
            found = analyte
    if duplicate:
        logger.warning(
            "test %s reports analyte %r more than once; using the last occurrence",
            record.test_id, analyte_name,
        )
    return found


def build_feature_row(
    combination: CaseCombination, spec: ClassifierSpec, units: UnitTable
) -> FeatureRow | Insufficient:
    """Resolve each feature of the classifier schema from the combination.

    Features resolve in schema order: locate the analyte by (source test
    type, analyte name), then clean and unit-convert numeric values or encode
    categorical ones. A required feature resolving to None makes the whole
    combination insufficient; optional features may stay None and are
    forwarded as nulls.
    """
    test_ids = tuple(combination.test_ids)
    values: list[tuple[str, float | None]] = []
    for feature in spec.features:
        value: float | None = None
        record = combination.picks.get(feature.source_test_type)
        analyte = _find_analyte(record, feature.source_analyte) if record else None
        if analyte is not None:
            if feature.is_categorical:
                value = encode_categorical(analyte.raw_value, feature.categories or {})
            else:
                value = clean_numeric(analyte.raw_value)
                if value is not None and feature.target_unit:
                    try:
                        value = units.convert(value, analyte.unit, feature.target_unit)
                    except KeyError:
                        logger.warning(
                            "feature %r: no conversion %r -> %r; treating as missing",
                            feature.name, analyte.unit, feature.target_unit,
                        )
                        value = None
        if value is None and feature.required:
            return Insufficient(missing_feature=feature.name, test_ids=test_ids)
        values.append((feature.name, value))
    return FeatureRow(
        classifier_id=spec.classifier_id,
        values=tuple(values),
        test_ids=test_ids,
    )


def prepare_rows(
    records_by_section: Mapping[str, Sequence[LabRecord]],
    spec: ClassifierSpec,
    units: UnitTable,
) -> tuple[list[FeatureRow], list[Insufficient]]:
    """Run the full preprocessing pipeline for one classifier.

    Returns the sufficient rows in combination order plus the insufficient
    combinations (dropped from dispatch but useful for logging).
    """
    pooled: list[LabRecord] = []
    for section in sorted(records_by_section):
        pooled.extend(records_by_section[section])
    filtered = filter_by_status(pooled, spec.status_rule)
    tables = split_by_test_type(filtered)
    tables = [t for t in tables if t.test_type in spec.required_test_types]
    tables = apply_pre_merge_rule(tables, spec.pre_merge_rule)
    combinations = merge_all_vs_all(tables, spec.required_test_types, spec.combination_cap)

    rows: list[FeatureRow] = []
    skipped: list[Insufficient] = []
    for combination in combinations:
        result = build_feature_row(combination, spec, units)
        if isinstance(result, FeatureRow):
            rows.append(result)
        else:
            skipped.append(result)
    return rows, skipped
