"""
Durable run state: append-only event log, crash recovery, audit export.

Every externally visible step of a run is one JSON record on its own line
(UTF-8): sequence number, timestamp, event kind, kind-specific payload.
Records are flushed on every append and fsynced at task boundaries, so a
crash can lose at most the line being written. Recovery therefore accepts
a torn final line (dropped, with a warning) but treats any damaged
earlier record as a hard error — the log is the source of truth and is
never silently repaired.

The run_started payload embeds the fully resolved workflow document, the
run configuration, and the run seed, which makes a log self-describing:
resume needs nothing but the log path. Completed tasks are restored with
their verified outputs; in_progress is deliberately not durable (redoing
an interrupted task is safe because reasoning is pure and tool calls are
idempotency-keyed), so everything else recovers to pending.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .executor import ToolInvocation
from .graph import VerifiedOutput, WorkflowGraph, load_workflow

logger = logging.getLogger(__name__)


# =====================================================================
# Errors
# =====================================================================


class StorageError(RuntimeError):
    """The event log could not be read or durably written."""


class LogCorruptionError(StorageError):
    """A non-final log record is damaged; recovery refuses to guess."""


# =====================================================================
# Domain types
# =====================================================================


class EventKind(str, Enum):
    RUN_STARTED = "run_started"
    TASK_STARTED = "task_started"
    SAMPLES_COLLECTED = "samples_collected"
    JUDGE_ROUND = "judge_round"
    ESCALATED = "escalated"
    TASK_COMPLETED = "task_completed"
    TOOL_INVOKED = "tool_invoked"
    RUN_COMPLETED = "run_completed"
    RUN_ABORTED = "run_aborted"


# Kinds that close a durability boundary: the log is fsynced after these so
# the engine never proceeds past a completion that could be lost.
BOUNDARY_KINDS = frozenset(
    {
        EventKind.RUN_STARTED,
        EventKind.TASK_COMPLETED,
        EventKind.TOOL_INVOKED,
        EventKind.RUN_COMPLETED,
        EventKind.RUN_ABORTED,
    }
)


@dataclass(frozen=True)
class RunEvent:
    seq: int
    timestamp: float
    kind: EventKind
    payload: dict[str, Any]

    def __post_init__(self) -> None:
        if self.seq < 0:
            raise ValueError("seq must be >= 0")

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "ts": self.timestamp,
                "kind": self.kind.value,
                "payload": self.payload,
            },
            ensure_ascii=False,
            sort_keys=True,
        )


# =====================================================================
# Event log writer
# =====================================================================


class EventLog:
    """Single-writer append-only log; one JSON record per line."""

    def __init__(self, path: str, next_seq: int = 0):
        self.path = path
        self.next_seq = next_seq
        try:
            parent = os.path.dirname(path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            self._handle = open(path, "a", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot open event log {path!r}: {exc}") from exc

    def emit(self, kind: EventKind, payload: dict[str, Any]) -> RunEvent:
        """Build the next-in-sequence event and append it."""
        event = RunEvent(seq=self.next_seq, timestamp=time.time(), kind=kind, payload=payload)
        self.append(event)
        return event

    def append(self, event: RunEvent) -> None:
        if event.seq != self.next_seq:
            raise StorageError(
                f"append out of sequence: expected seq {self.next_seq}, got {event.seq}"
            )
        try:
            self._handle.write(event.to_json() + "\n")
            self._handle.flush()
            if event.kind in BOUNDARY_KINDS:
                os.fsync(self._handle.fileno())
        except OSError as exc:
            raise StorageError(f"event log write failed: {exc}") from exc
        self.next_seq += 1

    def close(self) -> None:
        try:
            self._handle.close()
        except OSError as exc:
            raise StorageError(f"event log close failed: {exc}") from exc

    def __enter__(self) -> "EventLog":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


# =====================================================================
# Recovery
# =====================================================================


@dataclass
class RecoveredRun:
    """Everything a resume needs, reconstructed from the log alone."""

    events: list[RunEvent] = field(default_factory=list)
    next_seq: int = 0
    run_id: Optional[str] = None
    run_seed: Optional[int] = None
    workflow_doc: Optional[dict[str, Any]] = None
    config_doc: Optional[dict[str, Any]] = None
    graph: Optional[WorkflowGraph] = None
    completed: dict[str, VerifiedOutput] = field(default_factory=dict)
    tool_records: dict[str, ToolInvocation] = field(default_factory=dict)
    finished: bool = False
    aborted: bool = False
    final_answer: Optional[str] = None


def recover(path: str) -> RecoveredRun:
    """Rebuild run state from a log file.

    Tasks with a durable task_completed record come back completed with
    their verified outputs; all other tasks reset to pending. Tool
    idempotency records are restored so resumed runs reuse recorded
    results instead of re-invoking side effects.
    """
    events = read_events(path)
    recovered = RecoveredRun(events=events, next_seq=len(events))
    for event in events:
        if event.kind is EventKind.RUN_STARTED:
            payload = event.payload
            recovered.run_id = payload.get("run_id")
            recovered.run_seed = payload.get("run_seed")
            recovered.workflow_doc = payload.get("workflow")
            recovered.config_doc = payload.get("config")
            if recovered.workflow_doc is not None:
                # run_started embeds the fully resolved document, so default
                # sampling parameters cannot leak into reconstruction.
                recovered.graph = load_workflow(json.dumps(recovered.workflow_doc))
        elif event.kind is EventKind.TASK_COMPLETED:
            verified = verified_from_payload(event.payload)
            recovered.completed[verified.task_id] = verified
        elif event.kind is EventKind.TOOL_INVOKED:
            record = ToolInvocation(
                key=event.payload["key"],
                task_id=event.payload["task_id"],
                tool=event.payload["tool"],
                canonical_args=event.payload["canonical_args"],
                result=event.payload["result"],
            )
            recovered.tool_records[record.key] = record
        elif event.kind is EventKind.RUN_COMPLETED:
            recovered.finished = True
            recovered.final_answer = event.payload.get("answer")
        elif event.kind is EventKind.RUN_ABORTED:
            recovered.aborted = True
    if recovered.graph is not None:
        for verified in recovered.completed.values():
            recovered.graph.restore_completed(verified)
    return recovered


def read_events(path: str) -> list[RunEvent]:
    """Parse the log, tolerating only a torn final line."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = handle.read()
    except FileNotFoundError as exc:
        raise StorageError(f"event log {path!r} does not exist") from exc
    except OSError as exc:
        raise StorageError(f"cannot read event log {path!r}: {exc}") from exc

    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    events: list[RunEvent] = []
    for index, line in enumerate(lines):
        final = index == len(lines) - 1
        try:
            event = _parse_line(line)
        except ValueError as exc:
            if final:
                logger.warning("dropping torn final log record: %s", exc)
                break
            raise LogCorruptionError(
                f"log record {index} is damaged mid-file: {exc}"
            ) from exc
        if event.seq != index:
            raise LogCorruptionError(
                f"log record {index} has sequence {event.seq}; the log has gaps"
            )
        events.append(event)
    return events


def _parse_line(line: str) -> RunEvent:
    data = json.loads(line)
    if not isinstance(data, dict):
        raise ValueError("record is not an object")
    missing = {"seq", "ts", "kind", "payload"} - set(data)
    if missing:
        raise ValueError(f"record missing fields {sorted(missing)}")
    try:
        kind = EventKind(data["kind"])
    except ValueError:
        raise ValueError(f"unknown event kind {data['kind']!r}") from None
    if not isinstance(data["payload"], dict):
        raise ValueError("payload is not an object")
    if not isinstance(data["seq"], int):
        raise ValueError("seq is not an integer")
    return RunEvent(seq=data["seq"], timestamp=data["ts"], kind=kind, payload=data["payload"])


def verified_from_payload(payload: dict[str, Any]) -> VerifiedOutput:
    return VerifiedOutput(
        task_id=payload["task_id"],
        answer=payload["answer"],
        confidence=payload["confidence"],
        samples_used=payload["samples_used"],
        elapsed=payload["elapsed"],
        judge_trace_ref=payload["judge_trace_ref"],
    )


def verified_to_payload(verified: VerifiedOutput) -> dict[str, Any]:
    return {
        "task_id": verified.task_id,
        "answer": verified.answer,
        "confidence": verified.confidence,
        "samples_used": verified.samples_used,
        "elapsed": verified.elapsed,
        "judge_trace_ref": verified.judge_trace_ref,
    }


# =====================================================================
# Audit export
# =====================================================================

def export_audit(events: list[RunEvent]) -> str:
    """Human-readable provenance report: every sample, vote, and decision."""
    lines: list[str] = []
    for event in events:
        payload = event.payload
        kind = event.kind
        if kind is EventKind.RUN_STARTED:
            lines.append(f"run {payload.get('run_id', '?')} started (seed {payload.get('run_seed')})")
        elif kind is EventKind.TASK_STARTED:
            lines.append(f"[{payload.get('task_id')}] started")
        elif kind is EventKind.SAMPLES_COLLECTED:
            lines.append(
                f"[{payload.get('task_id')}] round {payload.get('round')}: "
                f"{len(payload.get('texts', []))} samples in {payload.get('wall_time', 0.0):.3f}s"
            )
            for text, backend in zip(payload.get("texts", []), payload.get("backends", [])):
                lines.append(f"    sample ({backend}): {text}")
            for failure in payload.get("failures", []):
                lines.append(f"    FAILED sample {failure.get('sample_index')}: {failure.get('error')}")
        elif kind is EventKind.JUDGE_ROUND:
            sizes = payload.get("sizes", [])
            lines.append(
                f"[{payload.get('task_id')}] judge round {payload.get('round')}: "
                f"clusters {sizes}, confidence {payload.get('confidence', 0.0):.3f}"
                + (" CONTESTED" if payload.get("contested") else "")
            )
        elif kind is EventKind.ESCALATED:
            lines.append(
                f"[{payload.get('task_id')}] escalated: +{payload.get('add')} samples "
                f"(round {payload.get('round')})"
            )
        elif kind is EventKind.TASK_COMPLETED:
            lines.append(
                f"[{payload.get('task_id')}] completed: {payload.get('answer')!r} "
                f"(confidence {payload.get('confidence', 0.0):.3f}, "
                f"{payload.get('samples_used')} samples, "
                f"{payload.get('elapsed', 0.0):.3f}s)"
            )
        elif kind is EventKind.TOOL_INVOKED:
            reused = " (recorded result reused)" if not payload.get("invoked", True) else ""
            lines.append(
                f"[{payload.get('task_id')}] tool {payload.get('tool')!r} -> "
                f"{payload.get('result')}{reused}"
            )
        elif kind is EventKind.RUN_COMPLETED:
            lines.append(f"run completed: final answer {payload.get('answer')!r}")
        elif kind is EventKind.RUN_ABORTED:
            lines.append(f"run aborted: {payload.get('cause')}")
    return "\n".join(lines)
