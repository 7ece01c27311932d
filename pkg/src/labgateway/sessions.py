"""Per-request sessions and the structured session log.

Every request gets a random 6-digit session ID so one request's log lines can
be found quickly; IDs scope log lines, not storage, so collisions are
harmless. The log is one JSON-lines file per day with exactly the fields
session_id / ts / step / detail per line.
"""
from __future__ import annotations

import datetime as dt
import json
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .audit import utc_now

SESSION_ID_DIGITS = 6


@dataclass
class Session:
    session_id: str
    started_at: str
    events: list[tuple[str, str, str]] = field(default_factory=list)  # (step, ts, detail)


def new_session(rng: random.Random) -> Session:
    """Fresh session with a zero-padded 6-digit decimal ID."""
    draw = rng.randrange(10**SESSION_ID_DIGITS)
    return Session(session_id=f"{draw:0{SESSION_ID_DIGITS}d}", started_at=utc_now())


class SessionLog:
    """Append-only daily session log; safe for concurrent writers.

    Log lines must stay free of patient data: steps and details may name
    stages, sections, error codes, and test IDs, never analyte values or
    species.
    """

    def __init__(self, log_dir: str | Path):
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path_for_today(self) -> Path:
        return self.log_dir / f"sessions-{dt.date.today().isoformat()}.jsonl"

    def log(self, session: Session, step: str, detail: str = "") -> None:
        ts = utc_now()
        session.events.append((step, ts, detail))
        line = json.dumps(
            {"session_id": session.session_id, "ts": ts, "step": step, "detail": detail}
        )
        with self._lock:
            with self._path_for_today().open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")
