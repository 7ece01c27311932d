"""Durable, patient-data-free retention of classifier results.

Classifier results can influence clinical decisions, so they are kept as part
of the medical record. The backend is an append-only JSON-lines log with an
in-memory index rebuilt on startup; the field set is closed and contains no
analyte names, values, units, or species. The first store of a given
(classifier, patient, test-ID set) key fixes its first-run timestamp; later
stores of the same key append but never change it.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

logger = logging.getLogger(__name__)

AUDIT_FIELDS = (
    "classifier_id",
    "patient_id",
    "test_ids",
    "prediction",
    "first_run_timestamp",
    "session_id",
    "recorded_at",
)


def utc_now() -> str:
    """RFC 3339 UTC timestamp at second precision."""
    return dt.datetime.now(dt.timezone.utc).replace(microsecond=0).isoformat()


@dataclass(frozen=True)
class AuditRecord:
    classifier_id: str
    patient_id: str
    test_ids: tuple[str, ...]  # sorted ascending
    prediction: str
    first_run_timestamp: str
    session_id: str
    recorded_at: str

    def to_dict(self) -> dict:
        return {
            "classifier_id": self.classifier_id,
            "patient_id": self.patient_id,
            "test_ids": list(self.test_ids),
            "prediction": self.prediction,
            "first_run_timestamp": self.first_run_timestamp,
            "session_id": self.session_id,
            "recorded_at": self.recorded_at,
        }


class AuditStore:
    """Append-only result log keyed by (classifier_id, patient_id, test-ID set).

    Writes are serialized through one lock; lookups read the index under the
    same lock so they always see a consistent snapshot.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._first_runs: dict[tuple[str, str, tuple[str, ...]], str] = {}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            self._rebuild_index()

    def _rebuild_index(self) -> None:
        with self.path.open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("audit store %s: skipping corrupt line %d", self.path, line_no)
                    continue
                key = self._key(entry["classifier_id"], entry["patient_id"], entry["test_ids"])
                ts = entry["first_run_timestamp"]
                if key not in self._first_runs or ts < self._first_runs[key]:
                    self._first_runs[key] = ts

    @staticmethod
    def _key(classifier_id: str, patient_id: str, test_ids) -> tuple[str, str, tuple[str, ...]]:
        return (classifier_id, patient_id, tuple(sorted(test_ids)))

    def lookup_first_run(self, classifier_id: str, patient_id: str, test_ids) -> str | None:
        """Earliest stored first-run timestamp for the exact key, or None.

        The key canonicalizes the test-ID set, so query order does not matter.
        """
        with self._lock:
            return self._first_runs.get(self._key(classifier_id, patient_id, test_ids))

    def _append_locked(self, entry: dict) -> None:
        """Validate against the closed field set and append; caller holds the lock."""
        unexpected = set(entry) - set(AUDIT_FIELDS)
        if unexpected:
            raise ValueError(f"audit record has unexpected field '{sorted(unexpected)[0]}'")
        missing = set(AUDIT_FIELDS) - set(entry)
        if missing:
            raise ValueError(f"audit record missing field '{sorted(missing)[0]}'")
        entry["test_ids"] = sorted(entry["test_ids"])
        line = json.dumps({name: entry[name] for name in AUDIT_FIELDS})
        key = self._key(entry["classifier_id"], entry["patient_id"], entry["test_ids"])
        self._first_runs.setdefault(key, entry["first_run_timestamp"])
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(line + "\n")

    def store_result(self, record: AuditRecord | Mapping) -> None:
        """Validate and append one record.

        An existing key keeps its original first-run timestamp in the index;
        the new line is still appended so the log retains every scoring event.
        """
        entry = record.to_dict() if isinstance(record, AuditRecord) else dict(record)
        with self._lock:
            self._append_locked(entry)

    def record(
        self,
        classifier_id: str,
        patient_id: str,
        test_ids,
        prediction: str,
        session_id: str,
        now: str | None = None,
    ) -> str:
        """Store one result and return its effective first-run timestamp.

        New keys are stamped with the current time; existing keys reuse their
        stored timestamp. A write failure is logged but the timestamp is still
        returned so an already-scored response can go back to the EHR.
        """
        now = now or utc_now()
        with self._lock:
            key = self._key(classifier_id, patient_id, test_ids)
            first_run = self._first_runs.get(key, now)
            record = AuditRecord(
                classifier_id=classifier_id,
                patient_id=patient_id,
                test_ids=tuple(sorted(test_ids)),
                prediction=prediction,
                first_run_timestamp=first_run,
                session_id=session_id,
                recorded_at=now,
            )
            try:
                self._append_locked(record.to_dict())
            except OSError as exc:
                logger.error("audit store write failed: %s", exc)
        return first_run

    def export(self, since: dt.date | None = None) -> Iterator[dict]:
        """Yield stored records, optionally only those recorded on/after a date."""
        if not self.path.exists():
            return
        with self.path.open("r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if since is not None:
                    recorded = dt.datetime.fromisoformat(entry["recorded_at"]).date()
                    if recorded < since:
                        continue
                yield entry
