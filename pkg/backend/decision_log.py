#!/usr/bin/env python3
"""
Decision Log
Append-only JSON Lines record of a router session: a session header, pool
churn and every finalized decision, in the order the learning path applied
them. Replaying the file rebuilds the policy's per-arm statistics.
"""

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

from ml_engine.bandits import BanditPolicy, init_policy
from ml_engine.errors import InvalidInputError
from ml_engine.reward import DecisionRecord

logger = logging.getLogger(__name__)


class DecisionLog:
    """One JSON object per line; `event` is session, pool or decision."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._tail_checked = False

    def _terminate_torn_tail(self) -> None:
        """Appends must start on a fresh line even after a crash mid-write."""
        if not self.path.exists() or self.path.stat().st_size == 0:
            return
        with open(self.path, "rb") as f:
            f.seek(-1, os.SEEK_END)
            last = f.read(1)
        if last != b"\n":
            with open(self.path, "a") as f:
                f.write("\n")

    def _write(self, event: str, payload: Dict) -> None:
        record = {"event": event, "timestamp": datetime.now().isoformat(), **payload}
        line = json.dumps(record)
        with self._lock:
            if not self._tail_checked:
                self._terminate_torn_tail()
                self._tail_checked = True
            with open(self.path, "a") as f:
                f.write(line + "\n")
                f.flush()

    def log_session(
        self,
        arms: Sequence[str],
        d: int,
        policy_config: Dict,
        lam: float,
        state: Optional[Dict] = None,
    ) -> None:
        """`state` is a policy checkpoint the session resumes from."""
        payload = {"arms": list(arms), "d": d, "policy": policy_config, "lam": lam}
        if state is not None:
            payload["state"] = state
        self._write("session", payload)

    def has_session(self) -> bool:
        return any(ev.get("event") == "session" for ev in self.events())

    def log_pool(self, op: str, model_id: str, entry: Optional[Dict] = None) -> None:
        self._write("pool", {"op": op, "model_id": model_id, "entry": entry})

    def log_decision(self, request_id: str, record: DecisionRecord) -> None:
        self._write("decision", {"request_id": request_id, "record": record.to_dict()})

    def events(self) -> Iterator[Dict]:
        if not self.path.exists():
            return
        with open(self.path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as e:
                    # A torn final line after a crash is tolerated
                    logger.warning(f"Skipping unreadable log line {lineno} in {self.path}: {e}")

    def decisions(self) -> List[DecisionRecord]:
        return [DecisionRecord.from_dict(ev["record"]) for ev in self.events()
                if ev.get("event") == "decision"]


@dataclass
class LoggedSession:
    """Policy and pool churn of the most recent session, plus every finalized request id."""

    policy: BanditPolicy
    pool_events: List[Dict] = field(default_factory=list)
    request_ids: List[str] = field(default_factory=list)
    decisions: int = 0


def restore_session(path: Union[str, Path]) -> LoggedSession:
    """
    Rebuild the most recent session. A header carrying `state` starts from that
    checkpoint; otherwise from fresh arms. Request ids are collected from every
    session in the file.
    """
    events = list(DecisionLog(path).events())
    starts = [i for i, ev in enumerate(events) if ev.get("event") == "session"]
    if not starts:
        raise InvalidInputError(f"{path}: no session header to replay from")

    header = events[starts[-1]]
    if header.get("state"):
        policy = BanditPolicy.from_checkpoint(header["state"])
    else:
        policy = init_policy(header["policy"], header["arms"], int(header["d"]))
    session = LoggedSession(policy)
    for ev in events[: starts[-1]]:
        if ev.get("event") == "decision":
            session.request_ids.append(ev["request_id"])
    for ev in events[starts[-1] + 1:]:
        kind = ev.get("event")
        if kind == "pool":
            if ev["op"] == "add":
                policy.add_arm(ev["model_id"])
            elif ev["op"] == "deactivate":
                policy.remove_arm(ev["model_id"])
            session.pool_events.append(ev)
        elif kind == "decision":
            record = ev["record"]
            policy.update(record["arm_id"], record["context"], record["reward"], allow_archived=True)
            session.request_ids.append(ev["request_id"])
            session.decisions += 1
    # Each finalized decision consumed one selection
    policy.t += session.decisions
    logger.info(f"Replayed {session.decisions} decisions from {path}")
    return session


def replay_decision_log(path: Union[str, Path]) -> BanditPolicy:
    """Rebuild the policy of the most recent session in the log."""
    return restore_session(path).policy
