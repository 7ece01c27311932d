"""Shared builders: lab records, classifier specs, and a full wired stack."""
from __future__ import annotations

import dataclasses
import datetime as dt
import random
import socket
from pathlib import Path

import pytest

from labgateway.ehr import AnalyteValue, LabRecord, ReportStatus
from labgateway.gateway import GatewayServer
from labgateway.mock_ehr import FixtureSet, MockEhrServer
from labgateway.ref_classifier import RefClassifierServer, RuleModel
from labgateway.registry import (
    ClassifierSpec,
    EhrEndpoint,
    FeatureSpec,
    FetchWindow,
    GatewayConfig,
    PredictionKind,
    SidecarEndpoint,
    StatusRule,
)

AUTH = "test-auth"


def make_analyte(name: str, raw: str, unit: str = "") -> AnalyteValue:
    return AnalyteValue(name=name, raw_value=raw, unit=unit)


def make_record(
    test_id: str,
    *,
    patient_id: str = "P1",
    section: str = "Hematology",
    test_type: str = "CBC",
    status: ReportStatus = ReportStatus.FINALIZED,
    when: str = "2024-06-27T09:00:00",
    species: str = "Canine",
    analytes: tuple[AnalyteValue, ...] = (),
) -> LabRecord:
    return LabRecord(
        test_id=test_id,
        patient_id=patient_id,
        section=section,
        test_type=test_type,
        report_status=status,
        result_datetime=dt.datetime.fromisoformat(when),
        species=species,
        analytes=tuple(analytes),
    )


def make_feature(
    name: str,
    test_type: str,
    analyte: str,
    *,
    unit: str = "",
    required: bool = True,
    categories: dict[str, float] | None = None,
) -> FeatureSpec:
    return FeatureSpec(
        name=name,
        source_test_type=test_type,
        source_analyte=analyte,
        target_unit=unit,
        categories=categories,
        required=required,
    )


def make_spec(
    classifier_id: str = "clf",
    *,
    route_path: str | None = None,
    species: tuple[str, ...] = ("Canine",),
    labels: tuple[str, ...] | None = None,
    sections: dict[str, FetchWindow] | None = None,
    status_rule: dict[str, StatusRule] | None = None,
    required_test_types: tuple[str, ...] = ("CBC",),
    features: tuple[FeatureSpec, ...] | None = None,
    sidecar_port: int = 1,
    pre_merge_rule=None,
    combination_cap: int = 64,
    timeout_ms: int = 2000,
) -> ClassifierSpec:
    from labgateway.registry import PreMergeRule

    windows = sections or {"Hematology": FetchWindow(2, 2)}
    return ClassifierSpec(
        classifier_id=classifier_id,
        route_path=route_path or classifier_id.replace("_", "-"),
        species=frozenset(species),
        prediction_kind=(
            PredictionKind.binary() if labels is None else PredictionKind(tuple(labels))
        ),
        sections=frozenset(windows),
        windows=dict(windows),
        status_rule=dict(status_rule or {}),
        required_test_types=frozenset(required_test_types),
        sidecar=SidecarEndpoint("127.0.0.1", sidecar_port, "/predict"),
        features=features
        or (make_feature("wbc", "CBC", "WBC", unit="10^9/L"),),
        pre_merge_rule=pre_merge_rule or PreMergeRule.ALL_COMBINATIONS,
        combination_cap=combination_cap,
        timeout_ms=timeout_ms,
    )


def free_port() -> int:
    """A port that was just free; nothing listens on it afterwards."""
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class Stack:
    """Mock EHR + rule sidecars + gateway, wired over ephemeral ports.

    Pass (spec, model) pairs; a None model leaves that spec pointing at a
    dead port so sidecar-down behavior can be exercised.
    """

    def __init__(
        self,
        tmp: Path,
        pairs: list[tuple[ClassifierSpec, RuleModel | None]],
        fixtures: FixtureSet,
        *,
        allowed_ips: tuple[str, ...] = ("127.0.0.1",),
        conversions: tuple[tuple[str, str, float], ...] = (),
        seed: int = 1234,
    ):
        self.ehr = MockEhrServer(fixtures, auth_code=AUTH)
        ehr_port = self.ehr.start()
        self.sidecars: dict[str, RefClassifierServer] = {}
        specs = []
        for spec, model in pairs:
            if model is None:
                port = free_port()
            else:
                server = RefClassifierServer(model)
                port = server.start()
                self.sidecars[spec.classifier_id] = server
            specs.append(
                dataclasses.replace(spec, sidecar=SidecarEndpoint("127.0.0.1", port, "/predict"))
            )
        self.config = GatewayConfig(
            listen_host="127.0.0.1",
            listen_port=0,
            allowed_ips=tuple(allowed_ips),
            ehr=EhrEndpoint(f"http://127.0.0.1:{ehr_port}", AUTH, 5000),
            audit_store=tmp / "audit.jsonl",
            log_dir=tmp / "logs",
            classifiers=tuple(specs),
            unit_conversions=tuple(conversions),
        )
        self.gateway = GatewayServer(self.config, rng=random.Random(seed), port=0)
        self.port = self.gateway.start()

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def run_url(self, route_path: str) -> str:
        return f"{self.base_url}/ml_classifier_run/{route_path}"

    def admin_url(self, classifier_id: str) -> str:
        return f"{self.base_url}/admin/route/{classifier_id}"

    def stop(self) -> None:
        self.gateway.stop()
        self.ehr.stop()
        for server in self.sidecars.values():
            server.stop()


# (label, passed) tuples appended by the acceptance suite's criterion wrapper
ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(("PASS " if ok else "FAIL ") + label)


@pytest.fixture
def stack_factory(tmp_path):
    stacks: list[Stack] = []

    def factory(pairs, fixtures, **kwargs) -> Stack:
        stack = Stack(tmp_path, pairs, fixtures, **kwargs)
        stacks.append(stack)
        return stack

    yield factory
    for stack in stacks:
        stack.stop()
