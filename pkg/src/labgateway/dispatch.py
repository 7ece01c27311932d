"""Sends feature rows to a classifier sidecar and interprets predictions.

One POST carries the whole batch for a request; per-row round trips would pay
the sidecar's startup cost once per row. The wire protocol is versioned and
shared verbatim by every sidecar implementation:

Request::

    POST http://127.0.0.1:{port}{path}
    {"protocol_version": "1", "classifier_id": "...", "features": ["name", ...],
     "rows": [{"row_index": 0, "values": [num|null, ...], "test_ids": ["..."]}]}

Response (200)::

    {"protocol_version": "1",
     "predictions": [{"row_index": 0, "prediction": "0"|"1"|"<label>"}]}

A prediction entry may carry "error" instead of "prediction" to flag one row
the sidecar could not score (for example a null in a position its model
needs); the gateway reports such rows as "-1".
"""
from __future__ import annotations

import ipaddress
import json
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import requests

from .errors import ErrorCode
from .preprocess import FeatureRow
from .registry import ClassifierSpec

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = "1"


@dataclass(frozen=True)
class PredictionOutcome:
    row_index: int
    prediction: str | None  # None when the row failed
    error_code: ErrorCode | None = None

    @property
    def ok(self) -> bool:
        return self.prediction is not None


def build_request(spec: ClassifierSpec, rows: Sequence[FeatureRow]) -> dict:
    return {
        "protocol_version": PROTOCOL_VERSION,
        "classifier_id": spec.classifier_id,
        "features": [feature.name for feature in spec.features],
        "rows": [
            {
                "row_index": index,
                "values": [value for _, value in row.values],
                "test_ids": list(row.test_ids),
            }
            for index, row in enumerate(rows)
        ],
    }


def _all_rows(rows: Sequence[FeatureRow], code: ErrorCode) -> list[PredictionOutcome]:
    return [PredictionOutcome(i, None, code) for i in range(len(rows))]


def dispatch(
    spec: ClassifierSpec,
    rows: Sequence[FeatureRow],
    post: Callable[..., requests.Response] | None = None,
) -> list[PredictionOutcome]:
    """POST the batch to the sidecar; outcomes come back in request row order.

    Connection failures and timeouts yield CLASSIFIER_TIMEOUT for every row;
    a malformed response or a missing/duplicated row_index yields
    CLASSIFIER_FAILURE for every row; a label outside the spec's declared set
    fails only that row. `post` is injectable for tests.
    """
    if not rows:
        raise ValueError("dispatch requires at least one row")
    host = spec.sidecar.host
    if host != "localhost" and not ipaddress.ip_address(host).is_loopback:
        raise ValueError(f"sidecar host {host!r} is not loopback")

    payload = build_request(spec, rows)
    poster = post or requests.post
    try:
        response = poster(
            spec.sidecar.url, json=payload, timeout=spec.timeout_ms / 1000
        )
    except (requests.ConnectionError, requests.Timeout) as exc:
        logger.warning("sidecar %s unreachable: %s", spec.classifier_id, exc)
        return _all_rows(rows, ErrorCode.CLASSIFIER_TIMEOUT)
    except requests.RequestException as exc:
        logger.warning("sidecar %s request failed: %s", spec.classifier_id, exc)
        return _all_rows(rows, ErrorCode.CLASSIFIER_FAILURE)

    if response.status_code != 200:
        logger.warning(
            "sidecar %s returned HTTP %s", spec.classifier_id, response.status_code
        )
        return _all_rows(rows, ErrorCode.CLASSIFIER_FAILURE)
    try:
        body = response.json()
    except (json.JSONDecodeError, ValueError):
        return _all_rows(rows, ErrorCode.CLASSIFIER_FAILURE)

    if not isinstance(body, dict) or body.get("protocol_version") != PROTOCOL_VERSION:
        return _all_rows(rows, ErrorCode.CLASSIFIER_FAILURE)
    predictions = body.get("predictions")
    if not isinstance(predictions, list):
        return _all_rows(rows, ErrorCode.CLASSIFIER_FAILURE)

    by_index: dict[int, dict] = {}
    for entry in predictions:
        if not isinstance(entry, dict) or not isinstance(entry.get("row_index"), int):
            return _all_rows(rows, ErrorCode.CLASSIFIER_FAILURE)
        if entry["row_index"] in by_index:
            return _all_rows(rows, ErrorCode.CLASSIFIER_FAILURE)
        by_index[entry["row_index"]] = entry
    if set(by_index) != set(range(len(rows))):
        return _all_rows(rows, ErrorCode.CLASSIFIER_FAILURE)

    allowed = set(spec.prediction_kind.labels)
    outcomes: list[PredictionOutcome] = []
    for index in range(len(rows)):
        entry = by_index[index]
        if "error" in entry:
            outcomes.append(PredictionOutcome(index, None, ErrorCode.CLASSIFIER_FAILURE))
            continue
        label = entry.get("prediction")
        if not isinstance(label, str) or label not in allowed:
            logger.warning(
                "sidecar %s returned label %r outside the declared set for row %d",
                spec.classifier_id, label, index,
            )
            outcomes.append(PredictionOutcome(index, None, ErrorCode.CLASSIFIER_FAILURE))
        else:
            outcomes.append(PredictionOutcome(index, label))
    return outcomes
