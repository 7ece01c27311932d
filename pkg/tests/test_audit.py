"""Append-only audit store and first-run timestamp semantics."""
from __future__ import annotations

import datetime as dt
import json
import re
import threading

import pytest

from labgateway.audit import AUDIT_FIELDS, AuditRecord, AuditStore, utc_now


def make_store(tmp_path) -> AuditStore:
    return AuditStore(tmp_path / "audit.jsonl")


def test_utc_now_is_second_precision_rfc3339():
    stamp = utc_now()
    assert re.fullmatch(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\+00:00", stamp)
    assert "." not in stamp


def test_record_assigns_then_reuses_first_run(tmp_path):
    store = make_store(tmp_path)
    first = store.record("clf", "P1", ["T2", "T1"], "1", "000001", now="2024-06-27T10:00:00+00:00")
    assert first == "2024-06-27T10:00:00+00:00"
    again = store.record("clf", "P1", ["T1", "T2"], "1", "000002", now="2024-06-27T10:05:00+00:00")
    assert again == first
    # the log keeps both scoring events
    lines = [json.loads(l) for l in store.path.read_text().splitlines()]
    assert len(lines) == 2
    assert {l["first_run_timestamp"] for l in lines} == {first}
    assert lines[1]["recorded_at"] == "2024-06-27T10:05:00+00:00"


def test_key_is_order_insensitive_but_set_sensitive(tmp_path):
    store = make_store(tmp_path)
    a = store.record("clf", "P1", ["T1", "T2"], "1", "s", now="2024-01-01T00:00:00+00:00")
    b = store.record("clf", "P1", ["T2", "T1"], "1", "s", now="2024-01-02T00:00:00+00:00")
    c = store.record("clf", "P1", ["T1"], "1", "s", now="2024-01-03T00:00:00+00:00")
    assert a == b
    assert c == "2024-01-03T00:00:00+00:00"


def test_key_distinguishes_classifier_and_patient(tmp_path):
    store = make_store(tmp_path)
    store.record("clf_a", "P1", ["T1"], "1", "s", now="2024-01-01T00:00:00+00:00")
    other_clf = store.record("clf_b", "P1", ["T1"], "1", "s", now="2024-01-02T00:00:00+00:00")
    other_patient = store.record("clf_a", "P2", ["T1"], "1", "s", now="2024-01-03T00:00:00+00:00")
    assert other_clf == "2024-01-02T00:00:00+00:00"
    assert other_patient == "2024-01-03T00:00:00+00:00"


def test_index_survives_reopen(tmp_path):
    path = tmp_path / "audit.jsonl"
    AuditStore(path).record("clf", "P1", ["T1"], "1", "s", now="2024-01-01T00:00:00+00:00")
    reopened = AuditStore(path)
    assert reopened.lookup_first_run("clf", "P1", ["T1"]) == "2024-01-01T00:00:00+00:00"
    assert (
        reopened.record("clf", "P1", ["T1"], "1", "s", now="2024-06-01T00:00:00+00:00")
        == "2024-01-01T00:00:00+00:00"
    )


def test_rebuild_skips_corrupt_lines(tmp_path):
    path = tmp_path / "audit.jsonl"
    store = AuditStore(path)
    store.record("clf", "P1", ["T1"], "1", "s", now="2024-01-01T00:00:00+00:00")
    with path.open("a") as handle:
        handle.write("{torn line\n")
    store.record("clf", "P2", ["T9"], "0", "s", now="2024-01-02T00:00:00+00:00")

    reopened = AuditStore(path)
    assert reopened.lookup_first_run("clf", "P1", ["T1"]) == "2024-01-01T00:00:00+00:00"
    assert reopened.lookup_first_run("clf", "P2", ["T9"]) == "2024-01-02T00:00:00+00:00"


def test_rebuild_keeps_earliest_first_run_per_key(tmp_path):
    path = tmp_path / "audit.jsonl"
    entries = [
        {"classifier_id": "clf", "patient_id": "P1", "test_ids": ["T1"], "prediction": "1",
         "first_run_timestamp": "2024-01-05T00:00:00+00:00", "session_id": "s",
         "recorded_at": "2024-01-05T00:00:00+00:00"},
        {"classifier_id": "clf", "patient_id": "P1", "test_ids": ["T1"], "prediction": "1",
         "first_run_timestamp": "2024-01-01T00:00:00+00:00", "session_id": "s",
         "recorded_at": "2024-01-06T00:00:00+00:00"},
    ]
    path.write_text("".join(json.dumps(e) + "\n" for e in entries))
    store = AuditStore(path)
    assert store.lookup_first_run("clf", "P1", ["T1"]) == "2024-01-01T00:00:00+00:00"


def test_store_result_enforces_closed_field_set(tmp_path):
    store = make_store(tmp_path)
    good = {
        "classifier_id": "clf", "patient_id": "P1", "test_ids": ["T1"],
        "prediction": "1", "first_run_timestamp": "2024-01-01T00:00:00+00:00",
        "session_id": "s", "recorded_at": "2024-01-01T00:00:00+00:00",
    }
    store.store_result(good)

    with pytest.raises(ValueError, match="species"):
        store.store_result({**good, "species": "Canine"})
    with pytest.raises(ValueError, match="unexpected"):
        store.store_result({**good, "analyte_values": [1.0]})
    incomplete = dict(good)
    del incomplete["prediction"]
    with pytest.raises(ValueError, match="prediction"):
        store.store_result(incomplete)

    # failed writes never reached the log
    lines = store.path.read_text().splitlines()
    assert len(lines) == 1


def test_stored_lines_contain_exactly_the_declared_fields(tmp_path):
    store = make_store(tmp_path)
    store.record("clf", "P1", ["T2", "T1"], "1", "000042")
    entry = json.loads(store.path.read_text())
    assert tuple(entry) == AUDIT_FIELDS
    assert entry["test_ids"] == ["T1", "T2"]


def test_audit_record_roundtrip(tmp_path):
    record = AuditRecord(
        classifier_id="clf", patient_id="P1", test_ids=("T1",), prediction="0",
        first_run_timestamp="2024-01-01T00:00:00+00:00", session_id="s",
        recorded_at="2024-01-01T00:00:00+00:00",
    )
    store = make_store(tmp_path)
    store.store_result(record)
    assert list(store.export()) == [record.to_dict()]


def test_export_since_filters_by_recorded_date(tmp_path):
    store = make_store(tmp_path)
    store.record("clf", "P1", ["T1"], "1", "s", now="2024-01-01T08:00:00+00:00")
    store.record("clf", "P2", ["T2"], "1", "s", now="2024-03-01T08:00:00+00:00")
    assert len(list(store.export())) == 2
    kept = list(store.export(since=dt.date(2024, 2, 1)))
    assert [e["patient_id"] for e in kept] == ["P2"]


def test_concurrent_stores_are_not_torn_and_agree_on_first_run(tmp_path):
    store = make_store(tmp_path)
    n_threads, per_thread = 20, 50
    barrier = threading.Barrier(n_threads)
    first_runs: list[str] = [""] * n_threads

    def worker(thread_no: int) -> None:
        barrier.wait()
        for i in range(per_thread):
            ts = store.record(
                "clf", f"P{i % 5}", [f"T{i}"], "1", f"{thread_no:06d}"
            )
            if i == 0:
                first_runs[thread_no] = ts

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(n_threads)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    lines = store.path.read_text().splitlines()
    assert len(lines) == n_threads * per_thread
    parsed = [json.loads(line) for line in lines]  # every line intact
    # all threads that raced on ("clf", "P0", ["T0"]) saw one first-run value
    zero_key = [e for e in parsed if e["patient_id"] == "P0" and e["test_ids"] == ["T0"]]
    assert len({e["first_run_timestamp"] for e in zero_key}) == 1
    assert len(set(first_runs)) == 1
