"""EHR lab-data client: window arithmetic, concurrent section fetches, XML parsing.

Fetched patient data lives in memory for the duration of one request and is
never written anywhere; the gateway persists classifier results only.
"""
from __future__ import annotations

import datetime as dt
import logging
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import requests

from .errors import EhrFetchError, XmlParseError
from .registry import EhrEndpoint, FetchWindow

logger = logging.getLogger(__name__)

AUTH_HEADER = "X-EHR-Auth"


class ReportStatus(str, Enum):
    FINALIZED = "Finalized"
    REQUESTED = "Requested"
    PENDING = "Pending"


@dataclass(frozen=True)
class AnalyteValue:
    name: str
    raw_value: str  # verbatim from the EHR, may contain comments/symbols
    unit: str = ""


@dataclass(frozen=True)
class LabRecord:
    test_id: str
    patient_id: str
    section: str
    test_type: str
    report_status: ReportStatus
    result_datetime: dt.datetime
    species: str
    analytes: tuple[AnalyteValue, ...]


@dataclass(frozen=True)
class DateRange:
    """Inclusive calendar date range."""

    start: dt.date
    end: dt.date

    def __contains__(self, day: dt.date) -> bool:
        return self.start <= day <= self.end


def compute_fetch_window(query_date: dt.date, window: FetchWindow) -> DateRange:
    """Inclusive range of window.days_before before to window.days_after after
    the query date; plain calendar arithmetic, so month and year rollovers are
    handled by the date type."""
    return DateRange(
        start=query_date - dt.timedelta(days=window.days_before),
        end=query_date + dt.timedelta(days=window.days_after),
    )


def parse_lab_xml(document: bytes) -> list[LabRecord]:
    """Parse a lab-results XML document.

    Expected shape::

        <LabResults patient_id="..." species="...">
          <Test test_id="..." section="..." test_type="..." status="..." datetime="...">
            <Analyte name="..." unit="...">raw value</Analyte>
          </Test>
        </LabResults>

    Analyte raw values are preserved verbatim. Unknown elements are ignored so
    the schema can grow without breaking older clients. Missing mandatory
    attributes raise XmlParseError naming the element path.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise XmlParseError("/", f"not well-formed XML: {exc}") from exc
    if root.tag != "LabResults":
        raise XmlParseError("/", f"expected root element LabResults, got {root.tag}")

    patient_id = root.get("patient_id")
    if patient_id is None:
        raise XmlParseError("/LabResults", "missing mandatory attribute patient_id")
    species = root.get("species")
    if species is None:
        raise XmlParseError("/LabResults", "missing mandatory attribute species")

    records: list[LabRecord] = []
    seen_ids: set[str] = set()
    for test in root:
        if test.tag != "Test":
            continue
        test_id = test.get("test_id")
        if test_id is None:
            raise XmlParseError("/LabResults/Test", "missing mandatory attribute test_id")
        path = f"/LabResults/Test[@test_id='{test_id}']"
        if test_id in seen_ids:
            raise XmlParseError(path, "duplicate test_id in one response")
        seen_ids.add(test_id)

        attrs = {}
        for name in ("section", "test_type", "status", "datetime"):
            value = test.get(name)
            if value is None:
                raise XmlParseError(path, f"missing mandatory attribute {name}")
            attrs[name] = value
        try:
            status = ReportStatus(attrs["status"])
        except ValueError:
            raise XmlParseError(
                path, f"unknown status '{attrs['status']}'"
            ) from None
        try:
            result_dt = dt.datetime.fromisoformat(attrs["datetime"])
        except ValueError:
            raise XmlParseError(
                path, f"datetime '{attrs['datetime']}' is not ISO 8601"
            ) from None

        analytes: list[AnalyteValue] = []
        for child in test:
            if child.tag != "Analyte":
                continue
            name = child.get("name")
            if not name:
                raise XmlParseError(f"{path}/Analyte", "missing mandatory attribute name")
            analytes.append(
                AnalyteValue(name=name, raw_value=child.text or "", unit=child.get("unit") or "")
            )

        records.append(
            LabRecord(
                test_id=test_id,
                patient_id=patient_id,
                section=attrs["section"],
                test_type=attrs["test_type"],
                report_status=status,
                result_datetime=result_dt,
                species=species,
                analytes=tuple(analytes),
            )
        )
    return records


def _fetch_one(
    patient_id: str, section: str, window: DateRange, endpoint: EhrEndpoint
) -> list[LabRecord]:
    url = f"{endpoint.base_url}/labdata"
    params = {
        "patient_id": patient_id,
        "section": section,
        "start": window.start.isoformat(),
        "end": window.end.isoformat(),
    }
    try:
        response = requests.get(
            url,
            params=params,
            headers={AUTH_HEADER: endpoint.auth_code},
            timeout=endpoint.timeout_ms / 1000,
        )
    except requests.RequestException as exc:
        raise EhrFetchError(section, f"request failed: {exc}") from exc
    if response.status_code != 200:
        raise EhrFetchError(section, f"EHR returned HTTP {response.status_code}")
    try:
        records = parse_lab_xml(response.content)
    except XmlParseError as exc:
        raise EhrFetchError(section, f"unparseable response: {exc}") from exc

    # The EHR filters server-side; re-check here to guard against a
    # misbehaving implementation.
    kept = []
    for record in records:
        if record.result_datetime.date() in window:
            kept.append(record)
        else:
            logger.warning(
                "dropping record %s dated %s outside window %s..%s for section %s",
                record.test_id, record.result_datetime.date(), window.start, window.end, section,
            )
    return kept


def fetch_sections(
    patient_id: str,
    windows: Mapping[str, DateRange],
    endpoint: EhrEndpoint,
) -> dict[str, list[LabRecord]]:
    """Fetch all sections concurrently; returns records keyed by section.

    Section fetches are I/O bound, so they fan out to one task each and join
    before returning; the result does not depend on completion order. Any
    section failing (non-200, timeout, unparseable body) fails the whole
    fetch with EhrFetchError naming that section.
    """
    if not windows:
        raise ValueError("windows must be non-empty")
    sections = sorted(windows)
    with ThreadPoolExecutor(max_workers=len(sections)) as pool:
        futures = {
            section: pool.submit(_fetch_one, patient_id, section, windows[section], endpoint)
            for section in sections
        }
        return {section: futures[section].result() for section in sections}
