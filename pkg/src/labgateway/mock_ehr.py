"""Hermetic stand-in for the EHR lab-data endpoint.

Serves lab records loaded from XML fixture files, filtered by patient,
section, and inclusive date range, over the same wire contract the real
client speaks. Tests can inject per-section latency and fault rules and read
per-section hit counters (also exposed at GET /__stats).
"""
from __future__ import annotations

import datetime as dt
import logging
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .ehr import AUTH_HEADER, LabRecord
from .httpd import HttpRequest, HttpResponse, HttpService, error_response, json_response

logger = logging.getLogger(__name__)


def serialize_lab_xml(patient_id: str, species: str, records: Sequence[LabRecord]) -> bytes:
    """Inverse of ehr.parse_lab_xml for the in-scope fields."""
    root = ET.Element("LabResults", patient_id=patient_id, species=species)
    for record in records:
        test = ET.SubElement(
            root,
            "Test",
            test_id=record.test_id,
            section=record.section,
            test_type=record.test_type,
            status=record.report_status.value,
            datetime=record.result_datetime.isoformat(),
        )
        for analyte in record.analytes:
            element = ET.SubElement(test, "Analyte", name=analyte.name, unit=analyte.unit)
            element.text = analyte.raw_value
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


@dataclass
class FaultRule:
    """Override one section's response: an HTTP status or a malformed body."""

    status: int | None = None
    malformed_body: bool = False


@dataclass
class FixtureSet:
    records: list[LabRecord] = field(default_factory=list)
    latency_ms: dict[str, int] = field(default_factory=dict)  # section -> delay
    default_latency_ms: int = 0
    faults: dict[str, FaultRule] = field(default_factory=dict)

    @classmethod
    def from_dir(cls, fixture_dir: str | Path, default_latency_ms: int = 0) -> "FixtureSet":
        """Load every *.xml file in a directory via the real parser."""
        from .ehr import parse_lab_xml

        records: list[LabRecord] = []
        for path in sorted(Path(fixture_dir).glob("*.xml")):
            records.extend(parse_lab_xml(path.read_bytes()))
        return cls(records=records, default_latency_ms=default_latency_ms)

    def matching(
        self, patient_id: str, section: str, start: dt.date, end: dt.date
    ) -> list[LabRecord]:
        return [
            record
            for record in self.records
            if record.patient_id == patient_id
            and record.section == section
            and start <= record.result_datetime.date() <= end
        ]


class MockEhrServer:
    """Serves the lab-data contract plus a GET /__stats introspection endpoint."""

    def __init__(self, fixtures: FixtureSet, auth_code: str, port: int = 0):
        self.fixtures = fixtures
        self.auth_code = auth_code
        self.service = HttpService(port=port)
        self.service.add_route("GET", "/labdata", self._serve_labdata)
        self.service.add_route("GET", "/__stats", self._serve_stats)
        self._hits: dict[str, int] = {}
        self._hits_lock = threading.Lock()

    @property
    def port(self) -> int:
        return self.service.port

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> int:
        return self.service.start()

    def stop(self) -> None:
        self.service.stop()

    def hit_count(self, section: str | None = None) -> int:
        with self._hits_lock:
            if section is None:
                return sum(self._hits.values())
            return self._hits.get(section, 0)

    def _serve_labdata(self, request: HttpRequest, _params: dict[str, str]) -> HttpResponse:
        provided = next(
            (v for k, v in request.headers.items() if k.lower() == AUTH_HEADER.lower()),
            None,
        )
        if provided != self.auth_code:
            return error_response(401, "missing or invalid authorization code")
        try:
            patient_id = request.query["patient_id"]
            section = request.query["section"]
            start = dt.date.fromisoformat(request.query["start"])
            end = dt.date.fromisoformat(request.query["end"])
        except (KeyError, ValueError):
            return error_response(400, "expected patient_id, section, start, end")

        with self._hits_lock:
            self._hits[section] = self._hits.get(section, 0) + 1

        delay_ms = self.fixtures.latency_ms.get(section, self.fixtures.default_latency_ms)
        if delay_ms:
            time.sleep(delay_ms / 1000)

        fault = self.fixtures.faults.get(section)
        if fault is not None:
            if fault.malformed_body:
                return HttpResponse(200, b"<LabResults", content_type="application/xml")
            if fault.status is not None:
                return error_response(fault.status, "injected fault")

        records = self.fixtures.matching(patient_id, section, start, end)
        species = records[0].species if records else "Unknown"
        body = serialize_lab_xml(patient_id, species, records)
        return HttpResponse(200, body, content_type="application/xml")

    def _serve_stats(self, request: HttpRequest, _params: dict[str, str]) -> HttpResponse:
        with self._hits_lock:
            hits = dict(sorted(self._hits.items()))
        return json_response(200, {"hits": hits, "total": sum(hits.values())})
