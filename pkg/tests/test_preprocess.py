"""Status filtering, test-type tables, the all-vs-all merge, and feature rows."""
from __future__ import annotations

import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labgateway.ehr import ReportStatus
from labgateway.errors import CombinationCapExceeded
from labgateway.preprocess import (
    CaseCombination,
    FeatureRow,
    Insufficient,
    TestTable as TypeTable,
    UnitTable,
    apply_pre_merge_rule,
    build_feature_row,
    clean_numeric,
    encode_categorical,
    filter_by_status,
    merge_all_vs_all,
    prepare_rows,
    split_by_test_type,
)
from labgateway.registry import FetchWindow, PreMergeRule, StatusRule

from conftest import make_analyte, make_feature, make_record, make_spec


class TestStatusFilter:
    def test_pending_always_dropped(self):
        records = [
            make_record("A", status=ReportStatus.FINALIZED),
            make_record("B", status=ReportStatus.PENDING),
        ]
        rules = {"CBC": StatusRule.FINALIZED_OR_REQUESTED}
        assert [r.test_id for r in filter_by_status(records, rules)] == ["A"]

    def test_requested_kept_only_under_relaxed_rule(self):
        requested = make_record("R", status=ReportStatus.REQUESTED)
        strict = {"CBC": StatusRule.FINALIZED_ONLY}
        relaxed = {"CBC": StatusRule.FINALIZED_OR_REQUESTED}
        assert filter_by_status([requested], strict) == []
        assert [r.test_id for r in filter_by_status([requested], relaxed)] == ["R"]

    def test_unmapped_test_type_defaults_to_finalized_only(self):
        records = [
            make_record("F", status=ReportStatus.FINALIZED),
            make_record("R", status=ReportStatus.REQUESTED),
        ]
        assert [r.test_id for r in filter_by_status(records, {})] == ["F"]


class TestSplit:
    def test_groups_by_type_and_sorts_within(self):
        records = [
            make_record("B", test_type="CBC", when="2024-06-27T09:00:00"),
            make_record("A", test_type="CBC", when="2024-06-27T09:00:00"),
            make_record("C", test_type="CBC", when="2024-06-26T09:00:00"),
            make_record("Z", test_type="ChemPanel"),
        ]
        tables = split_by_test_type(records)
        assert [t.test_type for t in tables] == ["CBC", "ChemPanel"]
        # earlier datetime first; same datetime breaks ties on test_id
        assert [r.test_id for r in tables[0].records] == ["C", "A", "B"]

    def test_empty_input(self):
        assert split_by_test_type([]) == []


class TestPreMergeRule:
    def test_first_per_type_truncates_to_earliest(self):
        tables = split_by_test_type(
            [
                make_record("L", when="2024-06-28T09:00:00"),
                make_record("E", when="2024-06-26T09:00:00"),
            ]
        )
        out = apply_pre_merge_rule(tables, PreMergeRule.FIRST_PER_TYPE)
        assert [r.test_id for r in out[0].records] == ["E"]

    def test_all_combinations_keeps_everything(self):
        tables = split_by_test_type([make_record("A"), make_record("B")])
        out = apply_pre_merge_rule(tables, PreMergeRule.ALL_COMBINATIONS)
        assert len(out[0].records) == 2


def _tables(counts: dict[str, int]) -> list[TypeTable]:
    records = [
        make_record(f"{test_type}-{i}", test_type=test_type)
        for test_type, n in counts.items()
        for i in range(n)
    ]
    return split_by_test_type(records)


class TestMerge:
    def test_two_by_two_yields_four_distinct_pairs(self):
        combos = merge_all_vs_all(
            _tables({"CBC": 2, "ChemPanel": 2}), {"CBC", "ChemPanel"}, cap=64
        )
        assert len(combos) == 4
        pairs = {tuple(c.test_ids) for c in combos}
        assert pairs == {
            ("CBC-0", "ChemPanel-0"),
            ("CBC-0", "ChemPanel-1"),
            ("CBC-1", "ChemPanel-0"),
            ("CBC-1", "ChemPanel-1"),
        }

    def test_single_type_passes_through(self):
        combos = merge_all_vs_all(_tables({"CBC": 3}), {"CBC"}, cap=64)
        assert [c.test_ids for c in combos] == [["CBC-0"], ["CBC-1"], ["CBC-2"]]

    def test_missing_required_type_yields_no_combinations(self):
        assert merge_all_vs_all(_tables({"CBC": 3}), {"CBC", "ChemPanel"}, cap=64) == []

    def test_extra_tables_are_ignored(self):
        combos = merge_all_vs_all(
            _tables({"CBC": 2, "Urinalysis": 5}), {"CBC"}, cap=64
        )
        assert len(combos) == 2

    def test_cap_boundary(self):
        tables = _tables({"CBC": 4, "ChemPanel": 4})
        assert len(merge_all_vs_all(tables, {"CBC", "ChemPanel"}, cap=16)) == 16
        with pytest.raises(CombinationCapExceeded) as err:
            merge_all_vs_all(tables, {"CBC", "ChemPanel"}, cap=15)
        assert err.value.count == 16
        assert err.value.cap == 15

    def test_matches_nested_loop_oracle_exhaustively(self):
        rng = random.Random(424242)
        for _ in range(300):
            n_types = rng.randint(1, 4)
            counts = {f"TT{k}": rng.randint(0, 5) for k in range(n_types)}
            tables = _tables({t: n for t, n in counts.items() if n})
            required = set(counts)

            oracle = set()
            per_type = [
                [f"{t}-{i}" for i in range(counts[t])] for t in sorted(required)
            ]
            for choice in itertools.product(*per_type):
                oracle.add(tuple(sorted(choice)))

            combos = merge_all_vs_all(tables, required, cap=10_000)
            assert {tuple(c.test_ids) for c in combos} == oracle
            assert len(combos) == math.prod(counts.values())

    @settings(max_examples=200, deadline=None)
    @given(counts=st.lists(st.integers(min_value=0, max_value=5), min_size=1, max_size=4))
    def test_combination_count_property(self, counts):
        named = {f"TT{k}": n for k, n in enumerate(counts)}
        tables = _tables({t: n for t, n in named.items() if n})
        combos = merge_all_vs_all(tables, set(named), cap=10_000)
        assert len(combos) == math.prod(counts)
        for combo in combos:
            assert set(combo.picks) == set(named)
            assert combo.test_ids == sorted(combo.test_ids)


CLEAN_CASES = [
    ("14.2", 14.2),
    (" 7 ", 7.0),
    ("<0.1", 0.1),  # comparator stripped, bound retained
    (">250", 250.0),
    ("1.2e3", 1200.0),
    ("5.0E-2", 0.05),
    ("-3.5", -3.5),
    ("TNP", None),
    ("hemolyzed", None),  # the two e's survive stripping but do not parse
    ("", None),
    ("   ", None),
    ("2.5 (slight lipemia)", None),  # stray letters poison the parse
    ("1e999", None),  # overflows to inf, rejected
    ("nan", None),
]


@pytest.mark.parametrize("raw, expected", CLEAN_CASES, ids=[c[0] or "blank" for c in CLEAN_CASES])
def test_clean_numeric(raw, expected):
    assert clean_numeric(raw) == expected


class TestUnitTable:
    def test_explicit_factor(self):
        table = UnitTable([("g/dL", "g/L", 10.0)])
        assert table.convert(1.5, "g/dL", "g/L") == 15.0

    def test_inverse_is_derived(self):
        table = UnitTable([("g/dL", "g/L", 10.0)])
        assert table.convert(15.0, "g/L", "g/dL") == pytest.approx(1.5)

    def test_declared_inverse_wins_over_derived(self):
        table = UnitTable([("a", "b", 4.0), ("b", "a", 0.5)])
        assert table.convert(1.0, "b", "a") == 0.5

    def test_identity_needs_no_entry(self):
        table = UnitTable()
        assert table.convert(3.3, "mmol/L", "mmol/L") == 3.3
        assert table.convert(3.3, " mmol/L ", "mmol/L") == 3.3

    def test_micro_sign_variants_normalize(self):
        table = UnitTable([("mg", "ug", 1000.0)])
        assert table.convert(2.0, "mg", "µg") == 2000.0
        assert table.convert(2.0, "mg", "μg") == 2000.0  # U+03BC spelling
        assert table.convert(2000.0, "µg", "mg") == pytest.approx(2.0)

    def test_unknown_pair_raises(self):
        table = UnitTable([("g/dL", "g/L", 10.0)])
        with pytest.raises(KeyError):
            table.convert(1.0, "g/dL", "mmol/L")

    def test_pairs_lists_both_directions(self):
        table = UnitTable([("g/dL", "g/L", 10.0)])
        assert table.pairs() == [("g/L", "g/dL"), ("g/dL", "g/L")]


def test_encode_categorical():
    mapping = {"none": 0.0, "mild": 1.0}
    assert encode_categorical("Mild", mapping) == 1.0
    assert encode_categorical("  NONE  ", mapping) == 0.0
    assert encode_categorical("marked", mapping) is None


def _combo(*records) -> CaseCombination:
    return CaseCombination(picks={r.test_type: r for r in records})


UNITS = UnitTable([("g/dL", "g/L", 10.0)])


class TestBuildFeatureRow:
    spec = make_spec(
        features=(
            make_feature("wbc", "CBC", "WBC", unit="10^9/L"),
            make_feature("hgb", "CBC", "HGB", unit="g/L"),
            make_feature("sediment", "Urinalysis", "Sediment", required=False,
                         categories={"clear": 0.0, "cloudy": 1.0}),
        ),
        required_test_types=("CBC",),
    )

    def test_resolves_cleans_and_converts(self):
        combo = _combo(
            make_record("T1", analytes=(
                make_analyte("WBC", "14.2", "10^9/L"),
                make_analyte("HGB", "1.5", "g/dL"),
            )),
            make_record("T2", test_type="Urinalysis",
                        analytes=(make_analyte("Sediment", "Cloudy"),)),
        )
        row = build_feature_row(combo, self.spec, UNITS)
        assert isinstance(row, FeatureRow)
        assert row.values == (("wbc", 14.2), ("hgb", 15.0), ("sediment", 1.0))
        assert row.test_ids == ("T1", "T2")

    def test_missing_required_feature_is_insufficient(self):
        combo = _combo(make_record("T1", analytes=(make_analyte("WBC", "14.2", "10^9/L"),)))
        result = build_feature_row(combo, self.spec, UNITS)
        assert isinstance(result, Insufficient)
        assert result.missing_feature == "hgb"
        assert result.test_ids == ("T1",)

    def test_unparseable_required_value_is_insufficient(self):
        combo = _combo(make_record("T1", analytes=(
            make_analyte("WBC", "TNP", "10^9/L"),
            make_analyte("HGB", "15.0", "g/L"),
        )))
        result = build_feature_row(combo, self.spec, UNITS)
        assert isinstance(result, Insufficient)
        assert result.missing_feature == "wbc"

    def test_optional_feature_missing_stays_null(self):
        combo = _combo(make_record("T1", analytes=(
            make_analyte("WBC", "14.2", "10^9/L"),
            make_analyte("HGB", "15.0", "g/L"),
        )))
        row = build_feature_row(combo, self.spec, UNITS)
        assert row.values[2] == ("sediment", None)

    def test_unknown_unit_pair_treated_as_missing(self):
        combo = _combo(make_record("T1", analytes=(
            make_analyte("WBC", "14.2", "10^9/L"),
            make_analyte("HGB", "15.0", "mmol/L"),  # no pair to g/L in UNITS
        )))
        result = build_feature_row(combo, self.spec, UNITS)
        assert isinstance(result, Insufficient)
        assert result.missing_feature == "hgb"

    def test_duplicate_analyte_uses_last_occurrence(self):
        combo = _combo(make_record("T1", analytes=(
            make_analyte("WBC", "1.0", "10^9/L"),
            make_analyte("WBC", "2.0", "10^9/L"),
            make_analyte("HGB", "15.0", "g/L"),
        )))
        row = build_feature_row(combo, self.spec, UNITS)
        assert row.values[0] == ("wbc", 2.0)

    def test_unmapped_category_on_required_feature_is_insufficient(self):
        spec = make_spec(
            features=(
                make_feature("sediment", "CBC", "Sediment",
                             categories={"clear": 0.0}),
            ),
        )
        combo = _combo(make_record("T1", analytes=(make_analyte("Sediment", "turbid"),)))
        result = build_feature_row(combo, spec, UNITS)
        assert isinstance(result, Insufficient)


class TestPrepareRows:
    spec = make_spec(
        sections={"Hematology": FetchWindow(2, 2), "Chemistry": FetchWindow(2, 2)},
        required_test_types=("CBC", "ChemPanel"),
        features=(
            make_feature("wbc", "CBC", "WBC"),
            make_feature("crea", "ChemPanel", "Creatinine"),
        ),
        status_rule={"ChemPanel": StatusRule.FINALIZED_OR_REQUESTED},
    )

    def _records(self):
        hematology = [
            make_record("H1", analytes=(make_analyte("WBC", "14.2"),)),
            make_record("H2", when="2024-06-27T14:00:00",
                        analytes=(make_analyte("WBC", "16.8"),)),
            make_record("H3", status=ReportStatus.PENDING,
                        analytes=(make_analyte("WBC", "9.9"),)),
        ]
        chemistry = [
            make_record("C1", section="Chemistry", test_type="ChemPanel",
                        analytes=(make_analyte("Creatinine", "2.4"),)),
            make_record("C2", section="Chemistry", test_type="ChemPanel",
                        status=ReportStatus.REQUESTED, when="2024-06-28T10:00:00",
                        analytes=(make_analyte("Creatinine", "2.1"),)),
            make_record("C3", section="Chemistry", test_type="Electrolytes",
                        analytes=(make_analyte("Sodium", "138.0"),)),
        ]
        return {"Hematology": hematology, "Chemistry": chemistry}

    def test_full_pipeline_two_by_two(self):
        rows, skipped = prepare_rows(self._records(), self.spec, UnitTable())
        assert skipped == []
        assert {row.test_ids for row in rows} == {
            ("C1", "H1"), ("C1", "H2"), ("C2", "H1"), ("C2", "H2"),
        }

    def test_first_per_type_collapses_to_one(self):
        spec = make_spec(
            sections=self.spec.windows,
            required_test_types=("CBC", "ChemPanel"),
            features=self.spec.features,
            status_rule=dict(self.spec.status_rule),
            pre_merge_rule=PreMergeRule.FIRST_PER_TYPE,
        )
        rows, _ = prepare_rows(self._records(), spec, UnitTable())
        assert [row.test_ids for row in rows] == [("C1", "H1")]

    def test_cap_propagates(self):
        spec = make_spec(
            sections=self.spec.windows,
            required_test_types=("CBC", "ChemPanel"),
            features=self.spec.features,
            status_rule=dict(self.spec.status_rule),
            combination_cap=3,
        )
        with pytest.raises(CombinationCapExceeded):
            prepare_rows(self._records(), spec, UnitTable())

    def test_insufficient_combinations_are_reported_not_dispatched(self):
        records = self._records()
        records["Hematology"].append(
            make_record("H4", when="2024-06-28T09:00:00",
                        analytes=(make_analyte("WBC", "see note"),))
        )
        rows, skipped = prepare_rows(records, self.spec, UnitTable())
        assert len(rows) == 4
        assert {s.test_ids for s in skipped} == {("C1", "H4"), ("C2", "H4")}
        assert all(s.missing_feature == "wbc" for s in skipped)
