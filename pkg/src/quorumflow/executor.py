"""
Parallel n-way sampling and exactly-once tool invocation.

sample_task fans one task's redundant executions out over a thread pool
(bounded by MAX_CONCURRENT_SAMPLES), assigning backends round-robin from
the task's model pool and deriving one stable seed per (run, task, sample,
round). Failed samples are recorded and excluded from voting; a round in
which every sample fails is a task-level error. Results come back in
sample-index order regardless of completion order, so sampling is
reproducible in simulation mode.

TOOL actions follow vote-then-invoke: agents vote on the tool arguments,
and only the judge-selected winner is executed — exactly once, guarded by
an idempotency key hashed from (run id, task id, canonical arguments).
Re-invocation under the same key returns the recorded result without
touching the tool again, which is what makes crash-resume safe; the same
key with different arguments is a hard error, never silently resolved.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

from .backends import AgentBackend, AgentConfig, AgentOutput, BackendError, derive_seed, round_robin
from .graph import ActionType, TaskSpec
from .judge import CandidateSet

logger = logging.getLogger(__name__)

# =====================================================================
# Constants
# =====================================================================

# Per-round concurrency ceiling; bounds resource use without changing
# semantics (results are ordered by sample index, not completion).
MAX_CONCURRENT_SAMPLES = 16

DEFAULT_ROLE = "Specialist micro-agent"
DEFAULT_INSTRUCTIONS = (
    "Complete the task exactly as described. Treat the verified facts from "
    "completed dependencies as established ground truth. Reply with the "
    "answer only."
)


# =====================================================================
# Errors
# =====================================================================


class SamplingError(RuntimeError):
    """Every sample in a round failed; the task cannot proceed."""


class ToolError(RuntimeError):
    """A tool adapter failed or was misused; a task-level error."""


class IdempotencyError(RuntimeError):
    """An idempotency key was reused with different arguments."""


# =====================================================================
# Domain types
# =====================================================================


@dataclass(frozen=True)
class SampleFailure:
    """One failed sample: which slot, which backend, and why."""

    sample_index: int
    round: int
    backend: str
    error: str


@dataclass(frozen=True)
class SampleSet:
    """Cumulative sampled outputs for one task, ordered (round, index)."""

    task_id: str
    outputs: tuple[AgentOutput, ...]
    failures: tuple[SampleFailure, ...] = ()
    round: int = 0
    wall_time: float = 0.0

    def merge(self, increment: "SampleSet") -> "SampleSet":
        """Fold an escalation round into the cumulative set."""
        if increment.task_id != self.task_id:
            raise ValueError("cannot merge sample sets of different tasks")
        if increment.round <= self.round:
            raise ValueError("escalation rounds must be appended in order")
        return SampleSet(
            task_id=self.task_id,
            outputs=self.outputs + increment.outputs,
            failures=self.failures + increment.failures,
            round=increment.round,
            wall_time=self.wall_time + increment.wall_time,
        )


@dataclass(frozen=True)
class ToolInvocation:
    """Durable record of one side-effecting tool call."""

    key: str
    task_id: str
    tool: str
    canonical_args: str
    result: str  # JSON text of the tool's return value


# =====================================================================
# Sampling
# =====================================================================

def sample_task(
    task: TaskSpec,
    context: list[tuple[str, str]],
    backends: Mapping[str, AgentBackend],
    run_seed: int,
    count: int,
    round: int = 0,
    collected: int = 0,
    pool_offset: Optional[int] = None,
    max_workers: int = MAX_CONCURRENT_SAMPLES,
) -> SampleSet:
    """Collect `count` concurrent samples for one task round.

    `collected` is how many outputs earlier rounds already delivered (the
    ceiling check is against the task's n_max); `pool_offset` is how many
    samples were ever requested, so round-robin assignment continues where
    the previous round stopped.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    ceiling = task.sampling.n_max
    if collected + count > ceiling:
        raise ValueError(
            f"task {task.id!r}: {collected} collected + {count} requested "
            f"exceeds n_max {ceiling}"
        )
    if pool_offset is None:
        pool_offset = collected
    assignments = round_robin(task.sampling.model_pool, pool_offset, count)
    missing = sorted(set(assignments) - set(backends))
    if missing:
        raise SamplingError(f"model pool names {missing} have no registered backend")

    def run_one(index: int) -> AgentOutput:
        name = assignments[index]
        config = AgentConfig(
            role=DEFAULT_ROLE,
            goal=task.description,
            instructions=DEFAULT_INSTRUCTIONS,
            tools=task.tools,
            model=name,
            temperature=task.sampling.temperature,
            seed=derive_seed(run_seed, task.id, index, round),
        )
        return backends[name].execute(task, context, config)

    start = time.monotonic()
    outputs: list[AgentOutput] = []
    failures: list[SampleFailure] = []
    with ThreadPoolExecutor(max_workers=min(count, max_workers)) as pool:
        futures = [pool.submit(run_one, index) for index in range(count)]
        for index, future in enumerate(futures):
            try:
                outputs.append(future.result())
            except BackendError as exc:
                failure = SampleFailure(
                    sample_index=index,
                    round=round,
                    backend=assignments[index],
                    error=f"{type(exc).__name__}: {exc}",
                )
                failures.append(failure)
                logger.warning(
                    "task %s sample %d (round %d, backend %s) failed: %s",
                    task.id, index, round, assignments[index], failure.error,
                )
    wall_time = time.monotonic() - start
    if not outputs:
        raise SamplingError(
            f"task {task.id!r}: all {count} samples of round {round} failed "
            f"({'; '.join(f.error for f in failures)})"
        )
    return SampleSet(
        task_id=task.id,
        outputs=tuple(outputs),
        failures=tuple(failures),
        round=round,
        wall_time=wall_time,
    )


def to_candidates(samples: SampleSet, task: TaskSpec) -> CandidateSet:
    """Strip samples to judge-visible text; measurement metadata stays here."""
    return CandidateSet(
        task_id=samples.task_id,
        task_description=task.description,
        texts=tuple(output.text for output in samples.outputs),
        round=samples.round,
    )


# =====================================================================
# Tool registry
# =====================================================================

# A tool adapter takes a JSON-compatible argument mapping and returns a
# JSON-serializable result.
ToolFn = Callable[[dict], Any]


class ToolRegistry:
    """Named local tool adapters plus a call log for exactly-once audits."""

    def __init__(self) -> None:
        self._tools: dict[str, ToolFn] = {}
        self.call_log: list[tuple[str, str]] = []  # (tool name, canonical args)

    def register(self, name: str, fn: ToolFn) -> None:
        if name in self._tools:
            raise ValueError(f"tool {name!r} is already registered")
        self._tools[name] = fn

    def names(self) -> list[str]:
        return sorted(self._tools)

    def calls_for(self, tool: str) -> int:
        return sum(1 for name, _ in self.call_log if name == tool)

    def invoke(self, name: str, args: dict, canonical: str) -> Any:
        if name not in self._tools:
            raise ToolError(f"tool {name!r} is not registered")
        self.call_log.append((name, canonical))
        try:
            return self._tools[name](args)
        except ToolError:
            raise
        except Exception as exc:
            raise ToolError(f"tool {name!r} failed: {exc!r}") from exc


def canonical_args(winning_args: str) -> tuple[str, dict]:
    """Canonical text form of voted tool arguments, plus the parsed mapping.

    JSON argument objects canonicalize with sorted keys and tight separators
    so semantically identical votes hash identically; non-JSON text is kept
    verbatim and handed to the tool as {"text": ...}.
    """
    try:
        parsed = json.loads(winning_args)
    except ValueError:
        return winning_args, {"text": winning_args}
    canonical = json.dumps(parsed, sort_keys=True, separators=(",", ":"))
    args = parsed if isinstance(parsed, dict) else {"value": parsed}
    return canonical, args


def idempotency_key(run_id: str, task_id: str, canonical: str) -> str:
    material = f"{run_id}|{task_id}|{canonical}".encode()
    return hashlib.blake2b(material, digest_size=16).hexdigest()


def execute_tool_action(
    task: TaskSpec,
    winning_args: str,
    registry: ToolRegistry,
    run_id: str,
    records: dict[str, ToolInvocation],
) -> tuple[ToolInvocation, bool]:
    """Invoke the voted tool call exactly once.

    Returns (record, invoked); invoked is False when the idempotency record
    already existed and the stored result was reused. `records` is the
    durable key -> invocation map restored by crash recovery.
    """
    if task.action_type is not ActionType.TOOL:
        raise ToolError(f"task {task.id!r} is not a TOOL action")
    tool = task.tools[0]
    canonical, args = canonical_args(winning_args)
    key = idempotency_key(run_id, task.id, canonical)

    existing = records.get(key)
    if existing is not None:
        if existing.canonical_args != canonical:
            raise IdempotencyError(
                f"idempotency key {key} already bound to different arguments"
            )
        return existing, False
    for record in records.values():
        if record.task_id == task.id:
            # One winning vote per task per run; a second distinct argument
            # set can only mean nondeterminism or a corrupted record.
            raise IdempotencyError(
                f"task {task.id!r} already invoked {record.tool!r} with "
                f"different arguments"
            )

    result = registry.invoke(tool, args, canonical)
    try:
        result_text = json.dumps(result, sort_keys=True)
    except TypeError as exc:
        raise ToolError(f"tool {tool!r} returned a non-serializable result") from exc
    record = ToolInvocation(
        key=key, task_id=task.id, tool=tool, canonical_args=canonical, result=result_text
    )
    records[key] = record
    return record, True


# =====================================================================
# Built-in mock tools
# =====================================================================

def make_record_tool(ledger: list) -> ToolFn:
    """Append-only recorder; the refund tool of the demo workflow."""

    def record(args: dict) -> dict:
        entry = dict(args)
        ledger.append(entry)
        return {"status": "recorded", "sequence": len(ledger)}

    return record


def arithmetic_tool(args: dict) -> dict:
    """Four-function arithmetic over {"op", "a", "b"}."""
    try:
        op = args["op"]
        a = float(args["a"])
        b = float(args["b"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ToolError(f"arithmetic needs op/a/b: {exc!r}") from exc
    if op == "add":
        return {"result": a + b}
    if op == "subtract":
        return {"result": a - b}
    if op == "multiply":
        return {"result": a * b}
    if op == "divide":
        if b == 0:
            raise ToolError("division by zero")
        return {"result": a / b}
    raise ToolError(f"unknown arithmetic op {op!r}")


def make_lookup_tool(table: Mapping[str, Any]) -> ToolFn:
    """Fixed-table lookup over {"key"}."""
    frozen = dict(table)

    def lookup(args: dict) -> dict:
        key = args.get("key")
        if key not in frozen:
            raise ToolError(f"lookup key {key!r} not found")
        return {"value": frozen[key]}

    return lookup


def builtin_registry(ledger: Optional[list] = None, lookup_table: Optional[Mapping[str, Any]] = None) -> ToolRegistry:
    """Registry with the stock simulation tools installed."""
    registry = ToolRegistry()
    registry.register("record_refund", make_record_tool(ledger if ledger is not None else []))
    registry.register("arithmetic", arithmetic_tool)
    registry.register("lookup", make_lookup_tool(lookup_table or {}))
    return registry
