"""Deterministic rule-based classifier sidecar.

Stands in for real ML models so the gateway stack can run and be tested
end-to-end. A model is an ordered decision list: each rule compares named
features against fixed bounds and yields its label when its thresholds
combine true; the first matching rule wins, otherwise the default label
applies. A single-rule model with a default acts as a plain binary
threshold classifier; several rules give multi-class labels. Scoring is a
pure function of (request, model), so identical requests produce identical
responses.
"""
from __future__ import annotations

import json
import logging
import operator
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import yaml

from .dispatch import PROTOCOL_VERSION
from .httpd import HttpRequest, HttpResponse, HttpService, error_response

logger = logging.getLogger(__name__)

_COMPARATORS = {
    "gt": operator.gt,
    "ge": operator.ge,
    "lt": operator.lt,
    "le": operator.le,
    "eq": operator.eq,
}


@dataclass(frozen=True)
class Threshold:
    feature: str
    comparator: str  # gt | ge | lt | le | eq
    bound: float

    def holds(self, value: float) -> bool:
        return _COMPARATORS[self.comparator](value, self.bound)


@dataclass(frozen=True)
class Rule:
    label: str
    thresholds: tuple[Threshold, ...]
    combine: str = "all"  # all | any

    def matches(self, values: dict[str, float]) -> bool:
        results = (t.holds(values[t.feature]) for t in self.thresholds)
        return all(results) if self.combine == "all" else any(results)


@dataclass(frozen=True)
class RuleModel:
    model_id: str
    rules: tuple[Rule, ...]
    default_label: str

    @property
    def labels(self) -> list[str]:
        seen = {rule.label for rule in self.rules}
        seen.add(self.default_label)
        return sorted(seen)

    def referenced_features(self) -> set[str]:
        return {t.feature for rule in self.rules for t in rule.thresholds}


def load_model(path: str | Path) -> RuleModel:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError("model file: top level must be a mapping")
    try:
        rules = tuple(
            Rule(
                label=str(rule["label"]),
                combine=str(rule.get("combine", "all")),
                thresholds=tuple(
                    Threshold(
                        feature=str(t["feature"]),
                        comparator=str(t["comparator"]),
                        bound=float(t["bound"]),
                    )
                    for t in rule["thresholds"]
                ),
            )
            for rule in raw["rules"]
        )
        model = RuleModel(
            model_id=str(raw["model_id"]),
            rules=rules,
            default_label=str(raw["default_label"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"model file: {exc}") from exc
    for rule in model.rules:
        if rule.combine not in ("all", "any"):
            raise ValueError(f"model file: unknown combine mode '{rule.combine}'")
        for threshold in rule.thresholds:
            if threshold.comparator not in _COMPARATORS:
                raise ValueError(f"model file: unknown comparator '{threshold.comparator}'")
    return model


def predict(body: dict, model: RuleModel) -> dict:
    """Score every row of a protocol request against the decision list.

    A null in any feature position a rule references makes that row an error
    entry instead of a prediction; the gateway maps it to "-1".
    """
    features = body["features"]
    if not isinstance(features, list):
        raise ValueError("features must be a list")
    referenced = model.referenced_features()
    missing = referenced - set(features)
    if missing:
        raise ValueError(f"request lacks feature '{sorted(missing)[0]}' referenced by the model")

    predictions = []
    for row in body["rows"]:
        index = row["row_index"]
        values = dict(zip(features, row["values"]))
        if any(values[name] is None for name in referenced):
            predictions.append({"row_index": index, "error": "null value in scored feature"})
            continue
        label = model.default_label
        for rule in model.rules:
            if rule.matches(values):
                label = rule.label
                break
        predictions.append({"row_index": index, "prediction": label})
    return {"protocol_version": PROTOCOL_VERSION, "predictions": predictions}


class RefClassifierServer:
    """Loopback HTTP sidecar speaking the shared classifier wire protocol."""

    def __init__(self, model: RuleModel, port: int = 0, path: str = "/predict"):
        self.model = model
        self.service = HttpService(port=port)
        self.service.add_route("POST", path, self._serve_predict)
        self._hits = 0

    @property
    def port(self) -> int:
        return self.service.port

    @property
    def hit_count(self) -> int:
        return self._hits

    def start(self) -> int:
        return self.service.start()

    def stop(self) -> None:
        self.service.stop()

    def _serve_predict(self, request: HttpRequest, _params: dict[str, str]) -> HttpResponse:
        self._hits += 1
        try:
            body = json.loads(request.body)
        except json.JSONDecodeError:
            return error_response(400, "body is not valid JSON")
        if not isinstance(body, dict):
            return error_response(400, "body must be a JSON object")
        if body.get("protocol_version") != PROTOCOL_VERSION:
            return error_response(400, "unsupported protocol version")
        try:
            response = predict(body, self.model)
        except (KeyError, TypeError, ValueError) as exc:
            return error_response(400, f"malformed request: {exc}")
        return HttpResponse(200, json.dumps(response).encode("utf-8"))
