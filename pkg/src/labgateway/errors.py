"""Error codes and exception types shared across the gateway pipeline.

Transport and security faults surface as HTTP statuses; everything that goes
wrong inside the clinical pipeline is reported in-band as a "-1" result entry
carrying one of the closed set of error codes below.
"""
from __future__ import annotations

from enum import Enum


class ErrorCode(str, Enum):
    INSUFFICIENT_DATA = "INSUFFICIENT_DATA"
    CLASSIFIER_FAILURE = "CLASSIFIER_FAILURE"
    CLASSIFIER_TIMEOUT = "CLASSIFIER_TIMEOUT"
    EHR_FETCH_FAILURE = "EHR_FETCH_FAILURE"
    COMBINATION_CAP_EXCEEDED = "COMBINATION_CAP_EXCEEDED"


class ConfigError(ValueError):
    """Configuration file is malformed or violates an invariant."""


class UnknownClassifierError(KeyError):
    """A classifier_id that is not present in the registry."""


class PipelineError(Exception):
    """A pipeline stage failed; carries the in-band error code."""

    def __init__(self, code: ErrorCode, detail: str = ""):
        super().__init__(detail or code.value)
        self.code = code
        self.detail = detail


class EhrFetchError(PipelineError):
    """A section fetch failed; the whole fetch is abandoned."""

    def __init__(self, section: str, detail: str = ""):
        super().__init__(ErrorCode.EHR_FETCH_FAILURE, detail)
        self.section = section


class CombinationCapExceeded(PipelineError):
    def __init__(self, count: int, cap: int):
        super().__init__(
            ErrorCode.COMBINATION_CAP_EXCEEDED,
            f"{count} combinations exceed cap {cap}",
        )
        self.count = count
        self.cap = cap


class XmlParseError(ValueError):
    """Lab-data XML could not be parsed; names the offending element path."""

    def __init__(self, path: str, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = path
        self.detail = detail
