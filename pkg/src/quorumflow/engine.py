"""
The run loop: schedule ready tasks, sample, judge, escalate, persist.

Scheduling is level-synchronous: every ready task of a wave is started
(and its task_started event appended, in id order) before any completion
of that wave is processed. That makes independent-task concurrency — for
example the two lookup tasks of the demo workflow starting together —
directly observable in the event log, and keeps the log deterministic
even though wave members execute on worker threads.

Each task runs the redundant-sampling / voting loop: collect n samples,
judge them, escalate by the judge's requested increment while confidence
stays below theta, and force a decision at n_max. A task's intermediate
events are buffered in its trace and appended atomically at commit time,
so events of concurrent tasks never interleave. TOOL tasks vote on
arguments concurrently like any other task, but the single side-effecting
invocation happens in the serial commit phase, guarded by the idempotency
record map, and is durably logged before the task completes.

Verified answers are a function of (run seed, workflow) only — never of
thread timing — which is what makes crash-resume byte-identical: a
resumed run replays interrupted tasks from the same derived seeds and
reuses recorded tool results.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

from .backends import AgentBackend, BackendError, Embedder
from .executor import (
    IdempotencyError,
    SampleSet,
    SamplingError,
    ToolError,
    ToolInvocation,
    ToolRegistry,
    execute_tool_action,
    sample_task,
    to_candidates,
)
from .graph import ActionType, TaskSpec, VerifiedOutput, WorkflowGraph, serialize_workflow
from .judge import EscalationRequest, Selector, Verdict, judge_round
from .state import (
    EventKind,
    EventLog,
    RecoveredRun,
    recover,
    verified_to_payload,
)

logger = logging.getLogger(__name__)

# Independent ready tasks of one wave execute concurrently up to this cap;
# within each task, sampling has its own concurrency budget.
MAX_CONCURRENT_TASKS = 8


class EngineError(RuntimeError):
    """The engine reached a state a valid workflow cannot produce."""


class RunAbortedError(RuntimeError):
    """The run hit a task-level error; state was persisted before raising."""

    def __init__(self, cause: str):
        super().__init__(cause)
        self.cause = cause


@dataclass(frozen=True)
class RunResult:
    run_id: str
    final_answer: str
    verified: dict[str, VerifiedOutput]
    log_path: str
    events_written: int


@dataclass
class TaskTrace:
    """Buffered events and outcome of one task's sampling/voting loop."""

    task_id: str
    events: list[tuple[EventKind, dict]] = field(default_factory=list)
    verdict: Optional[Verdict] = None
    deciding_index: int = -1  # index in `events` of the deciding judge round
    wall_time: float = 0.0


class Engine:
    """Single-run orchestrator over an open event log.

    The caller owns the log handle and the backend/tool wiring; the engine
    owns scheduling, persistence order, and abort semantics.
    """

    def __init__(
        self,
        graph: WorkflowGraph,
        backends: Mapping[str, AgentBackend],
        registry: ToolRegistry,
        log: EventLog,
        run_id: str,
        run_seed: int,
        config_doc: Optional[dict] = None,
        tool_records: Optional[dict[str, ToolInvocation]] = None,
        embedder: Optional[Embedder] = None,
        selector: Optional[Selector] = None,
        after_task_completed: Optional[Callable[[str, int], None]] = None,
    ):
        self.graph = graph
        self.backends = backends
        self.registry = registry
        self.log = log
        self.run_id = run_id
        self.run_seed = run_seed
        self.config_doc = config_doc or {}
        self.tool_records = tool_records if tool_records is not None else {}
        self.embedder = embedder
        self.selector = selector
        self.after_task_completed = after_task_completed

    # ---- run loop ------------------------------------------------------

    def run(self) -> RunResult:
        if self.log.next_seq == 0:
            self.log.emit(
                EventKind.RUN_STARTED,
                {
                    "run_id": self.run_id,
                    "run_seed": self.run_seed,
                    "workflow": json.loads(serialize_workflow(self.graph)),
                    "config": self.config_doc,
                },
            )
        try:
            while not self.graph.is_complete():
                wave = self.graph.ready_tasks()
                if not wave:
                    raise EngineError(
                        "workflow incomplete but no task is ready; "
                        "the dependency graph cannot make progress"
                    )
                for task_id in wave:
                    self.graph.start(task_id)
                    self.log.emit(EventKind.TASK_STARTED, {"task_id": task_id})
                traces = self._execute_wave(wave)
                for task_id in wave:
                    self._commit(task_id, traces[task_id])
        except (SamplingError, ToolError, IdempotencyError, BackendError) as exc:
            cause = f"{type(exc).__name__}: {exc}"
            logger.error("run %s aborted: %s", self.run_id, cause)
            self.log.emit(EventKind.RUN_ABORTED, {"cause": cause})
            raise RunAbortedError(cause) from exc

        final = self.graph.verified[self.graph.sink_id].answer
        self.log.emit(EventKind.RUN_COMPLETED, {"answer": final})
        return RunResult(
            run_id=self.run_id,
            final_answer=final,
            verified=dict(self.graph.verified),
            log_path=self.log.path,
            events_written=self.log.next_seq,
        )

    def _execute_wave(self, wave: list[str]) -> dict[str, TaskTrace]:
        contexts = {task_id: self.graph.context_inputs(task_id) for task_id in wave}
        traces: dict[str, TaskTrace] = {}
        with ThreadPoolExecutor(max_workers=min(len(wave), MAX_CONCURRENT_TASKS)) as pool:
            futures = {
                task_id: pool.submit(
                    execute_task,
                    self.graph.tasks[task_id],
                    contexts[task_id],
                    self.backends,
                    self.run_seed,
                    self.embedder,
                    self.selector,
                )
                for task_id in wave
            }
            for task_id in wave:
                # Commit order is id order; .result() re-raises task errors
                # here so the abort path sees the first failure in that order.
                traces[task_id] = futures[task_id].result()
        return traces

    def _commit(self, task_id: str, trace: TaskTrace) -> None:
        base_seq = self.log.next_seq
        for kind, payload in trace.events:
            self.log.emit(kind, payload)
        assert trace.verdict is not None
        task = self.graph.tasks[task_id]
        answer = trace.verdict.answer

        if task.action_type is ActionType.TOOL:
            record, invoked = execute_tool_action(
                task, answer, self.registry, self.run_id, self.tool_records
            )
            self.log.emit(
                EventKind.TOOL_INVOKED,
                {
                    "key": record.key,
                    "task_id": record.task_id,
                    "tool": record.tool,
                    "canonical_args": record.canonical_args,
                    "result": record.result,
                    "invoked": invoked,
                },
            )

        verified = VerifiedOutput(
            task_id=task_id,
            answer=answer,
            confidence=trace.verdict.confidence,
            samples_used=trace.verdict.total_samples,
            elapsed=trace.wall_time,
            judge_trace_ref=base_seq + trace.deciding_index,
        )
        self.graph.complete(task_id, verified)
        self.log.emit(EventKind.TASK_COMPLETED, verified_to_payload(verified))
        if self.after_task_completed is not None:
            self.after_task_completed(task_id, len(self.graph.verified))


# =====================================================================
# Per-task sampling / voting loop
# =====================================================================

def execute_task(
    task: TaskSpec,
    context: list[tuple[str, str]],
    backends: Mapping[str, AgentBackend],
    run_seed: int,
    embedder: Optional[Embedder] = None,
    selector: Optional[Selector] = None,
) -> TaskTrace:
    """Sample, judge, and escalate one task to a verdict.

    Pure with respect to engine state: all events are buffered in the
    returned trace, and nothing here touches the log, the graph, or tools.
    """
    trace = TaskTrace(task_id=task.id)
    cumulative: Optional[SampleSet] = None
    requested = 0
    round_index = 0
    count = task.sampling.n
    while True:
        increment = sample_task(
            task,
            context,
            backends,
            run_seed,
            count=count,
            round=round_index,
            collected=0 if cumulative is None else len(cumulative.outputs),
            pool_offset=requested,
        )
        requested += count
        trace.events.append(
            (
                EventKind.SAMPLES_COLLECTED,
                {
                    "task_id": task.id,
                    "round": round_index,
                    "texts": [output.text for output in increment.outputs],
                    "backends": [output.backend for output in increment.outputs],
                    "failures": [
                        {
                            "sample_index": failure.sample_index,
                            "round": failure.round,
                            "backend": failure.backend,
                            "error": failure.error,
                        }
                        for failure in increment.failures
                    ],
                    "wall_time": increment.wall_time,
                },
            )
        )
        cumulative = increment if cumulative is None else cumulative.merge(increment)

        candidates = to_candidates(cumulative, task)
        outcome = judge_round(
            candidates,
            theta=task.sampling.theta,
            tau=task.sampling.tau,
            n_max=task.sampling.n_max,
            embedder=embedder,
            selector=selector,
        )
        decided = isinstance(outcome, Verdict)
        report = outcome.report if decided else None
        trace.events.append(
            (
                EventKind.JUDGE_ROUND,
                {
                    "task_id": task.id,
                    "round": round_index,
                    "total_samples": len(candidates.texts),
                    "sizes": list(report.sizes) if decided else None,
                    "confidence": outcome.confidence if decided else None,
                    "contested": report.contested if decided else True,
                    "decision": (
                        ("forced" if outcome.forced else "decide") if decided else "escalate"
                    ),
                },
            )
        )
        if decided:
            trace.verdict = outcome
            trace.deciding_index = len(trace.events) - 1
            trace.wall_time = cumulative.wall_time
            return trace

        assert isinstance(outcome, EscalationRequest)
        trace.events.append(
            (
                EventKind.ESCALATED,
                {"task_id": task.id, "round": round_index, "add": outcome.add},
            )
        )
        count = outcome.add
        round_index += 1


# =====================================================================
# Entry points
# =====================================================================

def run_workflow(
    graph: WorkflowGraph,
    backends: Mapping[str, AgentBackend],
    registry: ToolRegistry,
    log_path: str,
    run_seed: int,
    run_id: Optional[str] = None,
    config_doc: Optional[dict] = None,
    embedder: Optional[Embedder] = None,
    selector: Optional[Selector] = None,
    after_task_completed: Optional[Callable[[str, int], None]] = None,
) -> RunResult:
    """Execute a fresh run end to end, owning the log handle."""
    if run_id is None:
        run_id = f"run-{run_seed:016x}"
    log = EventLog(log_path)
    try:
        engine = Engine(
            graph=graph,
            backends=backends,
            registry=registry,
            log=log,
            run_id=run_id,
            run_seed=run_seed,
            config_doc=config_doc,
            embedder=embedder,
            selector=selector,
            after_task_completed=after_task_completed,
        )
        return engine.run()
    finally:
        log.close()


def continue_run(
    log_path: str,
    recovered: RecoveredRun,
    backends: Mapping[str, AgentBackend],
    registry: ToolRegistry,
    embedder: Optional[Embedder] = None,
    selector: Optional[Selector] = None,
    after_task_completed: Optional[Callable[[str, int], None]] = None,
) -> RunResult:
    """Resume a recovered run in place; completed work is never redone.

    A log that already holds run_completed returns its recorded result
    without executing anything.
    """
    if recovered.graph is None or recovered.run_id is None or recovered.run_seed is None:
        raise EngineError(f"log {log_path!r} holds no resumable run")
    if recovered.finished:
        return RunResult(
            run_id=recovered.run_id,
            final_answer=recovered.final_answer or "",
            verified=dict(recovered.completed),
            log_path=log_path,
            events_written=recovered.next_seq,
        )
    log = EventLog(log_path, next_seq=recovered.next_seq)
    try:
        engine = Engine(
            graph=recovered.graph,
            backends=backends,
            registry=registry,
            log=log,
            run_id=recovered.run_id,
            run_seed=recovered.run_seed,
            config_doc=recovered.config_doc,
            tool_records=dict(recovered.tool_records),
            embedder=embedder,
            selector=selector,
            after_task_completed=after_task_completed,
        )
        return engine.run()
    finally:
        log.close()


def resume_workflow(
    log_path: str,
    backends: Mapping[str, AgentBackend],
    registry: ToolRegistry,
    embedder: Optional[Embedder] = None,
    selector: Optional[Selector] = None,
    after_task_completed: Optional[Callable[[str, int], None]] = None,
) -> RunResult:
    """Recover a log and continue it (convenience over recover + continue_run)."""
    return continue_run(
        log_path,
        recover(log_path),
        backends,
        registry,
        embedder=embedder,
        selector=selector,
        after_task_completed=after_task_completed,
    )
