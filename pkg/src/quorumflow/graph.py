"""
Workflow dependency graphs: task storage, validation, and scheduling.

A workflow is a DAG of atomic tasks. Each task carries an action type
(REASONING or TOOL), an ordered dependency list, and a sampling
configuration for redundant execution. The graph tracks per-task status
(pending / in_progress / completed) and the verified output of every
completed task; downstream tasks receive exactly their direct
dependencies' verified answers as context.

Structural rules enforced at load time
======================================
- ids unique, dependencies resolve, no self-dependencies
- acyclic
- exactly one sink task (so the workflow has a well-defined final answer)
- TOOL tasks declare at least one tool; REASONING tasks declare none

Mutations (start / complete) must be serialized through a single owner;
readers may snapshot freely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional

# =====================================================================
# Errors
# =====================================================================


class WorkflowValidationError(ValueError):
    """The workflow document violates a structural rule."""


class TaskStateError(RuntimeError):
    """An illegal status transition was attempted."""


# =====================================================================
# Domain types
# =====================================================================


class ActionType(str, Enum):
    REASONING = "REASONING"
    TOOL = "TOOL"


class TaskStatus(str, Enum):
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"


@dataclass(frozen=True)
class SamplingConfig:
    """Per-task redundant-sampling parameters.

    n initial samples, scaling cap n_max, sampling temperature, judge
    confidence threshold theta, similarity threshold tau, and the ordered
    backend pool samples are assigned from round-robin.
    """

    n: int = 5
    n_max: int = 13
    temperature: float = 0.7
    theta: float = 0.6
    tau: float = 0.85
    model_pool: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 1 <= self.n <= self.n_max:
            raise WorkflowValidationError(
                f"need 1 <= n <= n_max, got n={self.n}, n_max={self.n_max}"
            )
        if not 0.5 < self.theta <= 1.0:
            raise WorkflowValidationError(f"theta must be in (0.5, 1], got {self.theta}")
        if not 0.0 < self.tau < 1.0:
            raise WorkflowValidationError(f"tau must be in (0, 1), got {self.tau}")
        if self.temperature < 0.0:
            raise WorkflowValidationError(f"temperature must be >= 0, got {self.temperature}")
        object.__setattr__(self, "model_pool", tuple(self.model_pool))


@dataclass(frozen=True)
class TaskSpec:
    """One atomic task: what to do, what it needs, and how to sample it."""

    id: str
    description: str
    action_type: ActionType
    dependencies: tuple[str, ...] = ()
    output_schema: Optional[Any] = None
    tools: tuple[str, ...] = ()
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "dependencies", tuple(self.dependencies))
        object.__setattr__(self, "tools", tuple(self.tools))
        if not self.id:
            raise WorkflowValidationError("task id must be nonempty")
        if self.id in self.dependencies:
            raise WorkflowValidationError(f"task {self.id!r} depends on itself")
        if len(set(self.dependencies)) != len(self.dependencies):
            raise WorkflowValidationError(f"task {self.id!r} has duplicate dependencies")
        if self.action_type is ActionType.TOOL and not self.tools:
            raise WorkflowValidationError(f"TOOL task {self.id!r} declares no tools")
        if self.action_type is ActionType.REASONING and self.tools:
            raise WorkflowValidationError(f"REASONING task {self.id!r} declares tools")


@dataclass(frozen=True)
class VerifiedOutput:
    """The judge-selected answer for a completed task, with provenance."""

    task_id: str
    answer: str
    confidence: float
    samples_used: int
    elapsed: float
    judge_trace_ref: int

    def __post_init__(self) -> None:
        if self.samples_used < 1:
            raise WorkflowValidationError("samples_used must be >= 1")
        if not 0.0 < self.confidence <= 1.0:
            raise WorkflowValidationError(f"confidence must be in (0, 1], got {self.confidence}")
        if self.elapsed < 0.0:
            raise WorkflowValidationError("elapsed must be >= 0")


class WorkflowGraph:
    """Validated task DAG with statuses and verified outputs.

    Construct through load_workflow / from_tasks; both validate the full
    structural rule set.
    """

    def __init__(self, tasks: dict[str, TaskSpec]):
        self.tasks = tasks
        self.status: dict[str, TaskStatus] = {tid: TaskStatus.PENDING for tid in tasks}
        self.verified: dict[str, VerifiedOutput] = {}
        self._sink = _validate_structure(tasks)

    # ---- queries -----------------------------------------------------

    @property
    def sink_id(self) -> str:
        return self._sink

    def ready_tasks(self) -> list[str]:
        """Pending tasks whose dependencies are all completed, id-sorted."""
        return sorted(
            tid
            for tid, status in self.status.items()
            if status is TaskStatus.PENDING
            and all(self.status[dep] is TaskStatus.COMPLETED for dep in self.tasks[tid].dependencies)
        )

    def is_complete(self) -> bool:
        return all(status is TaskStatus.COMPLETED for status in self.status.values())

    def context_inputs(self, task_id: str) -> list[tuple[str, str]]:
        """(dependency id, verified answer) pairs in declared dependency order."""
        task = self._task(task_id)
        pairs = []
        for dep in task.dependencies:
            if self.status[dep] is not TaskStatus.COMPLETED:
                raise TaskStateError(f"dependency {dep!r} of {task_id!r} is not completed")
            pairs.append((dep, self.verified[dep].answer))
        return pairs

    # ---- transitions (single-owner) -----------------------------------

    def start(self, task_id: str) -> None:
        task = self._task(task_id)
        if self.status[task_id] is not TaskStatus.PENDING:
            raise TaskStateError(f"cannot start {task_id!r} from {self.status[task_id].value}")
        for dep in task.dependencies:
            if self.status[dep] is not TaskStatus.COMPLETED:
                raise TaskStateError(f"cannot start {task_id!r}: dependency {dep!r} incomplete")
        self.status[task_id] = TaskStatus.IN_PROGRESS

    def complete(self, task_id: str, verified: VerifiedOutput) -> None:
        self._task(task_id)
        if self.status[task_id] is not TaskStatus.IN_PROGRESS:
            raise TaskStateError(
                f"cannot complete {task_id!r} from {self.status[task_id].value}"
            )
        if verified.task_id != task_id:
            raise TaskStateError(
                f"verified output is for {verified.task_id!r}, not {task_id!r}"
            )
        self.status[task_id] = TaskStatus.COMPLETED
        self.verified[task_id] = verified

    def restore_completed(self, verified: VerifiedOutput) -> None:
        """Recovery path: mark a task completed directly from a durable record."""
        self._task(verified.task_id)
        self.status[verified.task_id] = TaskStatus.COMPLETED
        self.verified[verified.task_id] = verified

    def _task(self, task_id: str) -> TaskSpec:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise WorkflowValidationError(f"unknown task id {task_id!r}") from None


# =====================================================================
# Loading and serialization
# =====================================================================

_TASK_FIELDS = {"id", "description", "type", "dependencies", "output_schema", "tools", "sampling"}
_SAMPLING_FIELDS = {"n", "n_max", "temperature", "theta", "tau", "model_pool"}


def load_workflow(document: str, defaults: Optional[SamplingConfig] = None) -> WorkflowGraph:
    """Parse and validate a workflow document (JSON with a top-level tasks array).

    Each entry carries id, description, type, dependencies, and optionally
    output_schema, tools, and sampling overrides. `defaults` supplies the
    base sampling configuration that per-task overrides are applied to.
    """
    try:
        data = json.loads(document)
    except json.JSONDecodeError as exc:
        raise WorkflowValidationError(f"workflow document is not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("tasks"), list):
        raise WorkflowValidationError("workflow document must be an object with a tasks array")
    base = defaults if defaults is not None else SamplingConfig()

    tasks: dict[str, TaskSpec] = {}
    for entry in data["tasks"]:
        spec = _parse_task(entry, base)
        if spec.id in tasks:
            raise WorkflowValidationError(f"duplicate task id {spec.id!r}")
        tasks[spec.id] = spec
    return WorkflowGraph(tasks)


def from_tasks(specs: list[TaskSpec]) -> WorkflowGraph:
    tasks: dict[str, TaskSpec] = {}
    for spec in specs:
        if spec.id in tasks:
            raise WorkflowValidationError(f"duplicate task id {spec.id!r}")
        tasks[spec.id] = spec
    return WorkflowGraph(tasks)


def serialize_workflow(graph: WorkflowGraph) -> str:
    """Inverse of load_workflow for the task definitions (statuses are not
    part of the workflow document; persistence lives in the event log)."""
    entries = []
    for task in graph.tasks.values():
        entry: dict[str, Any] = {
            "id": task.id,
            "description": task.description,
            "type": task.action_type.value,
            "dependencies": list(task.dependencies),
        }
        if task.output_schema is not None:
            entry["output_schema"] = task.output_schema
        if task.tools:
            entry["tools"] = list(task.tools)
        entry["sampling"] = {
            "n": task.sampling.n,
            "n_max": task.sampling.n_max,
            "temperature": task.sampling.temperature,
            "theta": task.sampling.theta,
            "tau": task.sampling.tau,
            "model_pool": list(task.sampling.model_pool),
        }
        entries.append(entry)
    return json.dumps({"tasks": entries}, indent=2, sort_keys=False)


def _parse_task(entry: Any, base: SamplingConfig) -> TaskSpec:
    if not isinstance(entry, dict):
        raise WorkflowValidationError(f"task entry must be an object, got {type(entry).__name__}")
    unknown = set(entry) - _TASK_FIELDS
    if unknown:
        raise WorkflowValidationError(f"unknown task fields {sorted(unknown)}")
    for required in ("id", "description", "type"):
        if required not in entry:
            raise WorkflowValidationError(f"task entry missing {required!r}")
    try:
        action_type = ActionType(entry["type"])
    except ValueError:
        raise WorkflowValidationError(
            f"task {entry['id']!r}: type must be REASONING or TOOL, got {entry['type']!r}"
        ) from None

    sampling = base
    overrides = entry.get("sampling", {})
    if overrides:
        if not isinstance(overrides, dict):
            raise WorkflowValidationError(f"task {entry['id']!r}: sampling must be an object")
        unknown = set(overrides) - _SAMPLING_FIELDS
        if unknown:
            raise WorkflowValidationError(
                f"task {entry['id']!r}: unknown sampling fields {sorted(unknown)}"
            )
        if "model_pool" in overrides:
            overrides = dict(overrides, model_pool=tuple(overrides["model_pool"]))
        sampling = replace(base, **overrides)

    return TaskSpec(
        id=str(entry["id"]),
        description=str(entry["description"]),
        action_type=action_type,
        dependencies=tuple(entry.get("dependencies", ())),
        output_schema=entry.get("output_schema"),
        tools=tuple(entry.get("tools", ())),
        sampling=sampling,
    )


def _validate_structure(tasks: dict[str, TaskSpec]) -> str:
    """Check dependency resolution, acyclicity, and the unique-sink rule.

    Returns the sink task id.
    """
    if not tasks:
        raise WorkflowValidationError("workflow has no tasks")
    for task in tasks.values():
        for dep in task.dependencies:
            if dep not in tasks:
                raise WorkflowValidationError(
                    f"task {task.id!r} depends on unknown task {dep!r}"
                )

    # Kahn's algorithm; leftovers mean a cycle.
    indegree = {tid: len(task.dependencies) for tid, task in tasks.items()}
    dependents: dict[str, list[str]] = {tid: [] for tid in tasks}
    for task in tasks.values():
        for dep in task.dependencies:
            dependents[dep].append(task.id)
    frontier = [tid for tid, deg in indegree.items() if deg == 0]
    visited = 0
    while frontier:
        current = frontier.pop()
        visited += 1
        for child in dependents[current]:
            indegree[child] -= 1
            if indegree[child] == 0:
                frontier.append(child)
    if visited != len(tasks):
        cyclic = sorted(tid for tid, deg in indegree.items() if deg > 0)
        raise WorkflowValidationError(f"dependency cycle involving {cyclic}")

    sinks = sorted(tid for tid, deps in dependents.items() if not deps)
    if len(sinks) != 1:
        raise WorkflowValidationError(
            f"workflow must have exactly one sink task, found {sinks}"
        )
    return sinks[0]
