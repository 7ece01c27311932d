"""HTTP ingress: security gate, session handling, and the prediction pipeline.

Transport and security faults end the HTTP exchange (403 unlisted IP, 404
unknown route, 503 disabled route, 400 malformed body). Once the pipeline
starts, failures stay in-band: the response carries a single "-1" entry with
an error code, and every stage transition is logged under the session ID.
"""
from __future__ import annotations

import datetime as dt
import ipaddress
import json
import logging
import random
import threading
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import dispatch as dispatch_mod
from .audit import AuditStore
from .ehr import DateRange, compute_fetch_window, fetch_sections
from .errors import ErrorCode, PipelineError, UnknownClassifierError
from .httpd import HttpRequest, HttpResponse, HttpService, error_response, json_response
from .preprocess import FeatureRow, UnitTable, prepare_rows
from .registry import ClassifierSpec, GatewayConfig, Registry
from .sessions import Session, SessionLog, new_session

logger = logging.getLogger(__name__)

FORWARDED_FOR = "x-forwarded-for"
ERROR_PREDICTION = "-1"


@dataclass(frozen=True)
class PredictionRequest:
    patient_id: str
    query_date: dt.date
    species: str


def parse_prediction_request(body: bytes) -> PredictionRequest:
    """Validate the EHR request body; raises ValueError on any malformation."""
    try:
        raw = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ValueError(f"body is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValueError("body must be a JSON object")
    patient_id = raw.get("patient_id")
    if not isinstance(patient_id, str) or not patient_id:
        raise ValueError("patient_id must be a non-empty string")
    query_date = raw.get("query_date")
    if not isinstance(query_date, str):
        raise ValueError("query_date must be a YYYY-MM-DD string")
    try:
        parsed_date = dt.date.fromisoformat(query_date)
    except ValueError as exc:
        raise ValueError(f"query_date is not a valid date: {exc}") from exc
    species = raw.get("species")
    if not isinstance(species, str):
        raise ValueError("species must be a string")
    return PredictionRequest(patient_id=patient_id, query_date=parsed_date, species=species)


def security_gate(
    client_ip: str, headers: Mapping[str, str], allowed_ips: Sequence[str]
) -> bool:
    """Allow iff the effective client IP is on the allowlist.

    The effective IP is the first forwarded-for entry when the header is
    present (that is what the upstream VPN reports), otherwise the transport
    peer. Anything malformed denies: the gate fails closed.
    """
    forwarded = None
    for name, value in headers.items():
        if name.lower() == FORWARDED_FOR:
            forwarded = value
            break
    effective = forwarded.split(",")[0].strip() if forwarded is not None else client_ip
    try:
        candidate = ipaddress.ip_address(effective)
    except ValueError:
        return False
    return str(candidate) in set(allowed_ips)


def classify_error(failure: Exception) -> ErrorCode:
    """Map a pipeline-stage failure onto the closed error-code set.

    Stages raise PipelineError with an explicit code; anything unexpected is
    reported as a failed prediction rather than leaking a 5xx to the EHR.
    """
    if isinstance(failure, PipelineError):
        return failure.code
    return ErrorCode.CLASSIFIER_FAILURE


def _is_loopback(ip: str) -> bool:
    try:
        return ipaddress.ip_address(ip).is_loopback
    except ValueError:
        return False


def _error_entry(code: ErrorCode, test_ids: Sequence[str] = ()) -> dict:
    return {
        "prediction": ERROR_PREDICTION,
        "test_ids": sorted(test_ids),
        "error_code": code.value,
    }


class GatewayApp:
    """Request orchestration behind the HTTP layer."""

    def __init__(
        self,
        config: GatewayConfig,
        registry: Registry | None = None,
        rng: random.Random | None = None,
    ):
        self.config = config
        self.registry = registry or Registry(config)
        self.audit = AuditStore(config.audit_store)
        self.session_log = SessionLog(config.log_dir)
        self.units = UnitTable(config.unit_conversions)
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()

    def _new_session(self) -> Session:
        with self._rng_lock:
            return new_session(self._rng)

    def handle_prediction(self, request: HttpRequest, route_path: str) -> HttpResponse:
        if not security_gate(request.client_ip, request.headers, self.config.allowed_ips):
            return error_response(403, "client address is not authorized")
        spec = self.registry.spec_for_route(route_path)
        if spec is None:
            return error_response(404, "unknown classifier route")
        if not self.registry.is_enabled(spec.classifier_id):
            return error_response(503, "classifier route is disabled")
        try:
            prediction_request = parse_prediction_request(request.body)
        except ValueError as exc:
            return error_response(400, str(exc))

        session = self._new_session()
        self.session_log.log(session, "request", f"classifier={spec.classifier_id}")
        entries = self._run_pipeline(session, spec, prediction_request)
        eligible = any(e["prediction"] != ERROR_PREDICTION for e in entries)
        response = {
            "classifier_id": spec.classifier_id,
            "session_id": session.session_id,
            "eligible": eligible,
            "results": entries,
        }
        self.session_log.log(
            session, "respond", f"entries={len(entries)} eligible={eligible}"
        )
        return json_response(200, response)

    def _run_pipeline(
        self, session: Session, spec: ClassifierSpec, request: PredictionRequest
    ) -> list[dict]:
        """Stages fetch -> preprocess -> dispatch -> audit; each is logged.

        A stage failure short-circuits to a single "-1" entry; later stages
        are logged as skipped so every session trace has the same shape.
        """
        log = self.session_log

        if request.species not in spec.species:
            log.log(session, "fetch", "skipped: species not eligible")
            log.log(session, "preprocess", "skipped")
            log.log(session, "dispatch", "skipped")
            log.log(session, "audit", "skipped")
            return [_error_entry(ErrorCode.INSUFFICIENT_DATA)]

        try:
            windows: dict[str, DateRange] = {
                section: compute_fetch_window(request.query_date, spec.windows[section])
                for section in sorted(spec.sections)
            }
            records = fetch_sections(request.patient_id, windows, self.config.ehr)
        except Exception as exc:  # all fetch failures stay in-band
            code = classify_error(exc)
            log.log(session, "fetch", f"failed: {code.value}")
            log.log(session, "preprocess", "skipped")
            log.log(session, "dispatch", "skipped")
            log.log(session, "audit", "skipped")
            return [_error_entry(code)]
        fetched = sum(len(r) for r in records.values())
        log.log(session, "fetch", f"sections={len(records)} records={fetched}")

        try:
            rows, insufficient = prepare_rows(records, spec, self.units)
        except Exception as exc:
            code = classify_error(exc)
            log.log(session, "preprocess", f"failed: {code.value}")
            log.log(session, "dispatch", "skipped")
            log.log(session, "audit", "skipped")
            return [_error_entry(code)]
        log.log(
            session, "preprocess", f"rows={len(rows)} insufficient={len(insufficient)}"
        )
        if not rows:
            log.log(session, "dispatch", "skipped: no sufficient rows")
            log.log(session, "audit", "skipped")
            return [_error_entry(ErrorCode.INSUFFICIENT_DATA)]

        outcomes = dispatch_mod.dispatch(spec, rows)
        failures = sum(1 for o in outcomes if not o.ok)
        log.log(session, "dispatch", f"rows={len(outcomes)} failures={failures}")

        entries = self._assemble_entries(session, spec, request, rows, outcomes)
        return entries

    def _assemble_entries(
        self,
        session: Session,
        spec: ClassifierSpec,
        request: PredictionRequest,
        rows: Sequence[FeatureRow],
        outcomes: Sequence[dispatch_mod.PredictionOutcome],
    ) -> list[dict]:
        entries: list[dict] = []
        stored = 0
        for row, outcome in zip(rows, outcomes):
            if not outcome.ok:
                code = outcome.error_code or ErrorCode.CLASSIFIER_FAILURE
                entries.append(_error_entry(code, row.test_ids))
                continue
            first_run = self.audit.record(
                classifier_id=spec.classifier_id,
                patient_id=request.patient_id,
                test_ids=row.test_ids,
                prediction=outcome.prediction or "",
                session_id=session.session_id,
            )
            stored += 1
            entries.append(
                {
                    "prediction": outcome.prediction,
                    "test_ids": sorted(row.test_ids),
                    "first_run_timestamp": first_run,
                }
            )
        self.session_log.log(session, "audit", f"stored={stored}")
        return entries

    def handle_admin(self, request: HttpRequest, classifier_id: str) -> HttpResponse:
        if not _is_loopback(request.client_ip):
            return error_response(403, "admin endpoint accepts loopback connections only")
        try:
            raw = json.loads(request.body)
        except json.JSONDecodeError:
            return error_response(400, "body is not valid JSON")
        if not isinstance(raw, dict) or not isinstance(raw.get("enabled"), bool):
            return error_response(400, 'expected {"enabled": true|false}')
        try:
            state = self.registry.set_route_enabled(classifier_id, raw["enabled"])
        except UnknownClassifierError:
            return error_response(404, "unknown classifier")
        logger.info("route for %s set to enabled=%s", classifier_id, state)
        return json_response(200, {"classifier_id": classifier_id, "enabled": state})


class GatewayServer:
    """Binds the app to its two routes on the configured listen address."""

    def __init__(self, config: GatewayConfig, rng: random.Random | None = None, port: int | None = None):
        self.app = GatewayApp(config, rng=rng)
        listen_port = config.listen_port if port is None else port
        self.service = HttpService(host=config.listen_host, port=listen_port)
        self.service.add_route(
            "POST",
            "/ml_classifier_run/{route_path}",
            lambda req, params: self.app.handle_prediction(req, params["route_path"]),
        )
        self.service.add_route(
            "POST",
            "/admin/route/{classifier_id}",
            lambda req, params: self.app.handle_admin(req, params["classifier_id"]),
        )

    @property
    def port(self) -> int:
        return self.service.port

    def start(self) -> int:
        return self.service.start()

    def stop(self) -> None:
        self.service.stop()
