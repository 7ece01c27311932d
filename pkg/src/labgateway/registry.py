"""Classifier specifications and gateway configuration.

The config file is a single YAML document describing the gateway (listen
address, IP allowlist, EHR endpoint, storage paths, unit conversions) and one
entry per classifier. Everything is validated at load time; error messages
name the offending field. After load the only mutable state is the per-route
enabled flag, owned by the Registry.
"""
from __future__ import annotations

import ipaddress
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

import yaml

from .errors import ConfigError, UnknownClassifierError

DEFAULT_MAX_WINDOW_DAYS = 30
DEFAULT_COMBINATION_CAP = 64
DEFAULT_TIMEOUT_MS = 2000
DEFAULT_FETCH_TIMEOUT_MS = 5000


class StatusRule(str, Enum):
    FINALIZED_ONLY = "finalized_only"
    FINALIZED_OR_REQUESTED = "finalized_or_requested"


class PreMergeRule(str, Enum):
    ALL_COMBINATIONS = "all_combinations"
    FIRST_PER_TYPE = "first_per_type"


@dataclass(frozen=True)
class FetchWindow:
    days_before: int
    days_after: int


@dataclass(frozen=True)
class PredictionKind:
    """Binary (labels "0"/"1") or multi-class with a declared label set."""

    labels: tuple[str, ...]

    @classmethod
    def binary(cls) -> "PredictionKind":
        return cls(("0", "1"))

    @property
    def is_binary(self) -> bool:
        return self.labels == ("0", "1")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    source_test_type: str
    source_analyte: str
    target_unit: str = ""
    categories: dict[str, float] | None = None  # None means numeric
    required: bool = True

    @property
    def is_categorical(self) -> bool:
        return self.categories is not None


@dataclass(frozen=True)
class SidecarEndpoint:
    host: str
    port: int
    path: str = "/predict"

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}{self.path}"


@dataclass(frozen=True)
class ClassifierSpec:
    classifier_id: str
    route_path: str
    species: frozenset[str]
    prediction_kind: PredictionKind
    sections: frozenset[str]
    windows: dict[str, FetchWindow]
    status_rule: dict[str, StatusRule]
    required_test_types: frozenset[str]
    sidecar: SidecarEndpoint
    features: tuple[FeatureSpec, ...]
    pre_merge_rule: PreMergeRule = PreMergeRule.ALL_COMBINATIONS
    combination_cap: int = DEFAULT_COMBINATION_CAP
    enabled: bool = True
    timeout_ms: int = DEFAULT_TIMEOUT_MS


@dataclass(frozen=True)
class EhrEndpoint:
    base_url: str
    auth_code: str
    timeout_ms: int = DEFAULT_FETCH_TIMEOUT_MS


@dataclass(frozen=True)
class GatewayConfig:
    listen_host: str
    listen_port: int
    allowed_ips: tuple[str, ...]
    ehr: EhrEndpoint
    audit_store: Path
    log_dir: Path
    classifiers: tuple[ClassifierSpec, ...]
    unit_conversions: tuple[tuple[str, str, float], ...] = ()
    max_window_days: int = DEFAULT_MAX_WINDOW_DAYS


def _require(mapping: dict[str, Any], key: str, where: str) -> Any:
    if key not in mapping:
        raise ConfigError(f"{where}: missing required field '{key}'")
    return mapping[key]


def _check_keys(mapping: dict[str, Any], allowed: Iterable[str], where: str) -> None:
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown field '{sorted(unknown)[0]}'")


def _is_loopback_host(host: str) -> bool:
    if host == "localhost":
        return True
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return False


def _parse_window(raw: Any, where: str, max_days: int) -> FetchWindow:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping with days_before/days_after")
    _check_keys(raw, {"days_before", "days_after"}, where)
    before = _require(raw, "days_before", where)
    after = _require(raw, "days_after", where)
    for label, days in (("days_before", before), ("days_after", after)):
        if not isinstance(days, int) or days < 0:
            raise ConfigError(f"{where}.{label}: must be a non-negative integer")
        if days > max_days:
            raise ConfigError(f"{where}.{label}: {days} exceeds maximum of {max_days} days")
    return FetchWindow(before, after)


def _parse_prediction_kind(raw: Any, where: str) -> PredictionKind:
    if raw == "binary":
        return PredictionKind.binary()
    if isinstance(raw, dict) and set(raw) == {"multiclass"}:
        labels = raw["multiclass"]
        if not isinstance(labels, list) or not labels:
            raise ConfigError(f"{where}: multiclass label set must be a non-empty list")
        if len(set(labels)) != len(labels):
            raise ConfigError(f"{where}: multiclass labels must be unique")
        if "-1" in labels:
            raise ConfigError(f"{where}: label '-1' is reserved for error results")
        return PredictionKind(tuple(str(label) for label in labels))
    raise ConfigError(f"{where}: expected 'binary' or {{multiclass: [labels]}}")


def _parse_feature(raw: Any, where: str) -> FeatureSpec:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    allowed = {"name", "source_test_type", "source_analyte", "target_unit", "encoding", "required"}
    _check_keys(raw, allowed, where)
    name = _require(raw, "name", where)
    encoding = raw.get("encoding", "numeric")
    categories: dict[str, float] | None = None
    if encoding != "numeric":
        if not (isinstance(encoding, dict) and set(encoding) == {"categorical"}):
            raise ConfigError(f"{where}.encoding: expected 'numeric' or {{categorical: {{...}}}}")
        mapping = encoding["categorical"]
        if not isinstance(mapping, dict) or not mapping:
            raise ConfigError(f"{where}.encoding: categorical map must be non-empty")
        categories = {}
        for key, value in mapping.items():
            norm = str(key).strip().lower()
            if norm in categories:
                raise ConfigError(f"{where}.encoding: category '{key}' collides after normalization")
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}.encoding: category '{key}' must map to a number")
            categories[norm] = float(value)
    return FeatureSpec(
        name=str(name),
        source_test_type=str(_require(raw, "source_test_type", where)),
        source_analyte=str(_require(raw, "source_analyte", where)),
        target_unit=str(raw.get("target_unit", "")),
        categories=categories,
        required=bool(raw.get("required", True)),
    )


def _parse_classifier(raw: Any, max_days: int) -> ClassifierSpec:
    if not isinstance(raw, dict):
        raise ConfigError("classifiers: each entry must be a mapping")
    cid = str(_require(raw, "classifier_id", "classifier"))
    where = f"classifier '{cid}'"
    allowed = {
        "classifier_id", "route_path", "species", "prediction_kind", "sections",
        "windows", "status_rule", "required_test_types", "pre_merge_rule",
        "combination_cap", "features", "sidecar", "enabled", "timeout_ms",
    }
    _check_keys(raw, allowed, where)

    route_path = str(_require(raw, "route_path", where))
    if not route_path or "/" in route_path:
        raise ConfigError(f"{where}.route_path: must be a single non-empty path segment")

    species = _require(raw, "species", where)
    if not isinstance(species, list) or not species:
        raise ConfigError(f"{where}.species: must be a non-empty list")

    sections_raw = _require(raw, "sections", where)
    if not isinstance(sections_raw, list) or not sections_raw:
        raise ConfigError(f"{where}.sections: must be a non-empty list")
    sections = frozenset(str(s) for s in sections_raw)

    windows_raw = _require(raw, "windows", where)
    if not isinstance(windows_raw, dict):
        raise ConfigError(f"{where}.windows: must map section names to windows")
    windows = {
        str(section): _parse_window(win, f"{where}.windows.{section}", max_days)
        for section, win in windows_raw.items()
    }
    if set(windows) != sections:
        missing = sections - set(windows)
        extra = set(windows) - sections
        offender = sorted(missing or extra)[0]
        raise ConfigError(
            f"{where}.windows: sections and windows must name the same sections "
            f"(mismatch on '{offender}')"
        )

    status_rule: dict[str, StatusRule] = {}
    for test_type, rule in (raw.get("status_rule") or {}).items():
        try:
            status_rule[str(test_type)] = StatusRule(rule)
        except ValueError:
            raise ConfigError(
                f"{where}.status_rule.{test_type}: expected one of "
                f"{[r.value for r in StatusRule]}"
            ) from None

    required_raw = _require(raw, "required_test_types", where)
    if not isinstance(required_raw, list) or not required_raw:
        raise ConfigError(f"{where}.required_test_types: must be a non-empty list")
    required_test_types = frozenset(str(t) for t in required_raw)

    features_raw = _require(raw, "features", where)
    if not isinstance(features_raw, list) or not features_raw:
        raise ConfigError(f"{where}.features: must be a non-empty list")
    features = tuple(
        _parse_feature(f, f"{where}.features[{i}]") for i, f in enumerate(features_raw)
    )
    seen_names: set[str] = set()
    for feature in features:
        if feature.name in seen_names:
            raise ConfigError(f"{where}.features: duplicate feature name '{feature.name}'")
        seen_names.add(feature.name)
        if feature.required and feature.source_test_type not in required_test_types:
            raise ConfigError(
                f"{where}.features: required feature '{feature.name}' sources from "
                f"'{feature.source_test_type}' which is not in required_test_types"
            )

    sidecar_raw = _require(raw, "sidecar", where)
    if not isinstance(sidecar_raw, dict):
        raise ConfigError(f"{where}.sidecar: expected a mapping")
    _check_keys(sidecar_raw, {"host", "port", "path"}, f"{where}.sidecar")
    host = str(_require(sidecar_raw, "host", f"{where}.sidecar"))
    if not _is_loopback_host(host):
        raise ConfigError(
            f"{where}.sidecar.host: '{host}' is not a loopback address; "
            "classifier sidecars must bind to loopback only"
        )
    port = _require(sidecar_raw, "port", f"{where}.sidecar")
    if not isinstance(port, int) or not (0 < port < 65536):
        raise ConfigError(f"{where}.sidecar.port: must be a valid TCP port")
    sidecar = SidecarEndpoint(host, port, str(sidecar_raw.get("path", "/predict")))

    try:
        pre_merge = PreMergeRule(raw.get("pre_merge_rule", PreMergeRule.ALL_COMBINATIONS))
    except ValueError:
        raise ConfigError(
            f"{where}.pre_merge_rule: expected one of {[r.value for r in PreMergeRule]}"
        ) from None

    cap = raw.get("combination_cap", DEFAULT_COMBINATION_CAP)
    if not isinstance(cap, int) or cap < 1:
        raise ConfigError(f"{where}.combination_cap: must be a positive integer")
    timeout_ms = raw.get("timeout_ms", DEFAULT_TIMEOUT_MS)
    if not isinstance(timeout_ms, int) or timeout_ms < 1:
        raise ConfigError(f"{where}.timeout_ms: must be a positive integer")

    return ClassifierSpec(
        classifier_id=cid,
        route_path=route_path,
        species=frozenset(str(s) for s in species),
        prediction_kind=_parse_prediction_kind(_require(raw, "prediction_kind", where), where),
        sections=sections,
        windows=windows,
        status_rule=status_rule,
        required_test_types=required_test_types,
        sidecar=sidecar,
        features=features,
        pre_merge_rule=pre_merge,
        combination_cap=cap,
        enabled=bool(raw.get("enabled", True)),
        timeout_ms=timeout_ms,
    )


def parse_config(raw: Any, base_dir: Path | None = None) -> GatewayConfig:
    """Validate an already-deserialized config document."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    allowed = {
        "listen", "allowed_ips", "ehr", "audit_store", "log_dir",
        "unit_conversions", "max_window_days", "classifiers",
    }
    _check_keys(raw, allowed, "config")

    listen = str(_require(raw, "listen", "config"))
    host, _, port_str = listen.rpartition(":")
    if not host or not port_str.isdigit():
        raise ConfigError("config.listen: expected 'host:port'")

    allowed_ips_raw = _require(raw, "allowed_ips", "config")
    if not isinstance(allowed_ips_raw, list) or not allowed_ips_raw:
        raise ConfigError("config.allowed_ips: must be a non-empty list")
    allowed_ips = []
    for entry in allowed_ips_raw:
        try:
            allowed_ips.append(str(ipaddress.ip_address(str(entry))))
        except ValueError:
            raise ConfigError(f"config.allowed_ips: '{entry}' is not a valid IP address") from None

    ehr_raw = _require(raw, "ehr", "config")
    if not isinstance(ehr_raw, dict):
        raise ConfigError("config.ehr: expected a mapping")
    _check_keys(ehr_raw, {"base_url", "auth_code", "timeout_ms"}, "config.ehr")
    auth_code = str(_require(ehr_raw, "auth_code", "config.ehr"))
    if not auth_code:
        raise ConfigError("config.ehr.auth_code: must be non-empty")
    fetch_timeout = ehr_raw.get("timeout_ms", DEFAULT_FETCH_TIMEOUT_MS)
    if not isinstance(fetch_timeout, int) or fetch_timeout < 1:
        raise ConfigError("config.ehr.timeout_ms: must be a positive integer")
    ehr = EhrEndpoint(
        base_url=str(_require(ehr_raw, "base_url", "config.ehr")).rstrip("/"),
        auth_code=auth_code,
        timeout_ms=fetch_timeout,
    )

    max_days = raw.get("max_window_days", DEFAULT_MAX_WINDOW_DAYS)
    if not isinstance(max_days, int) or max_days < 0:
        raise ConfigError("config.max_window_days: must be a non-negative integer")

    conversions: list[tuple[str, str, float]] = []
    for i, entry in enumerate(raw.get("unit_conversions") or []):
        where = f"config.unit_conversions[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where}: expected a mapping with from/to/factor")
        _check_keys(entry, {"from", "to", "factor"}, where)
        factor = _require(entry, "factor", where)
        if not isinstance(factor, (int, float)) or isinstance(factor, bool) or factor == 0:
            raise ConfigError(f"{where}.factor: must be a non-zero number")
        conversions.append(
            (str(_require(entry, "from", where)), str(_require(entry, "to", where)), float(factor))
        )

    classifiers_raw = _require(raw, "classifiers", "config")
    if not isinstance(classifiers_raw, list) or not classifiers_raw:
        raise ConfigError("config.classifiers: must be a non-empty list")
    classifiers = tuple(_parse_classifier(c, max_days) for c in classifiers_raw)

    seen_routes: set[str] = set()
    seen_ids: set[str] = set()
    for spec in classifiers:
        if spec.route_path in seen_routes:
            raise ConfigError(f"config.classifiers: duplicate route_path '{spec.route_path}'")
        if spec.classifier_id in seen_ids:
            raise ConfigError(f"config.classifiers: duplicate classifier_id '{spec.classifier_id}'")
        seen_routes.add(spec.route_path)
        seen_ids.add(spec.classifier_id)

    base = base_dir or Path.cwd()

    def _resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else base / path

    return GatewayConfig(
        listen_host=host,
        listen_port=int(port_str),
        allowed_ips=tuple(allowed_ips),
        ehr=ehr,
        audit_store=_resolve(str(_require(raw, "audit_store", "config"))),
        log_dir=_resolve(str(_require(raw, "log_dir", "config"))),
        classifiers=classifiers,
        unit_conversions=tuple(conversions),
        max_window_days=max_days,
    )


def load_config(path: str | Path) -> GatewayConfig:
    """Load and validate the gateway config file. Relative storage paths are
    resolved against the config file's directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    return parse_config(raw, base_dir=path.parent)


class Registry:
    """Serves classifier specs; owns the mutable per-route enabled switches.

    Specs are immutable after load. The enabled flags are read by every
    request handler and written by the admin path, guarded by a lock so
    readers never observe a torn update.
    """

    def __init__(self, config: GatewayConfig):
        self.config = config
        self._by_route = {spec.route_path: spec for spec in config.classifiers}
        self._by_id = {spec.classifier_id: spec for spec in config.classifiers}
        self._enabled = {spec.classifier_id: spec.enabled for spec in config.classifiers}
        self._lock = threading.Lock()

    def spec_for_route(self, route_path: str) -> ClassifierSpec | None:
        return self._by_route.get(route_path)

    def spec_for_id(self, classifier_id: str) -> ClassifierSpec | None:
        return self._by_id.get(classifier_id)

    def is_enabled(self, classifier_id: str) -> bool:
        with self._lock:
            if classifier_id not in self._enabled:
                raise UnknownClassifierError(classifier_id)
            return self._enabled[classifier_id]

    def set_route_enabled(self, classifier_id: str, enabled: bool) -> bool:
        """Flip the runtime switch for one classifier; returns the new state.

        Runtime toggles are ephemeral: only the config file state survives a
        restart.
        """
        with self._lock:
            if classifier_id not in self._enabled:
                raise UnknownClassifierError(classifier_id)
            self._enabled[classifier_id] = bool(enabled)
            return self._enabled[classifier_id]

    def match_eligible_classifiers(self, species: str, viewed_test_type: str) -> list[ClassifierSpec]:
        """Enabled specs that accept this species and require the viewed test type."""
        with self._lock:
            enabled = dict(self._enabled)
        return [
            spec
            for spec in self.config.classifiers
            if enabled[spec.classifier_id]
            and species in spec.species
            and viewed_test_type in spec.required_test_types
        ]
