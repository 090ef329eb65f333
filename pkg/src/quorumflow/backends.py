"""
Agent and embedder backends.

Three families of agent backend share one calling convention:

- SimBackend: seeded stochastic simulation agents. Each call errs with
  probability p; an erring call emits one of K distinct wrong answers
  ("WRONG::<task>::<j>") chosen uniformly, otherwise the task's canonical
  answer from the scenario. Fully deterministic in the derived seed, which
  makes whole runs replayable. An optional common-cause draw forces every
  agent in a trial to emit one shared output, realizing pairwise error
  correlation as a per-trial mixture.
- ScriptedBackend: fixed per-task answers for fixtures and loopback tests.
- HttpChatBackend: messages-style completion endpoint with bounded retries,
  exponential backoff, and a per-sample deadline. Credentials come only
  from environment variables named in the configuration.

Embedders map answer text to unit vectors: MockEmbedder (deterministic
token-hash bag-of-words), ScriptedEmbedder (fixture-pinned vectors), and
HttpEmbedder (batched endpoint). All vectors are L2-normalized.

Backends are safe to call concurrently; no call mutates shared state.
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol

import httpx
import numpy as np

from .graph import TaskSpec

logger = logging.getLogger(__name__)

# =====================================================================
# Constants
# =====================================================================

# Per-sample wall clock budget for remote backends.
SAMPLE_DEADLINE_SECONDS = 60.0

# Transient-transport retry policy for HTTP backends.
DEFAULT_MAX_RETRIES = 3
DEFAULT_BACKOFF_SECONDS = 0.25

EMBED_DIM = 64
_TOKEN_BUCKETS = EMBED_DIM - 1   # axis 63 is reserved for the empty string
_EMPTY_AXIS = EMBED_DIM - 1

WRONG_PREFIX = "WRONG::"

TRUTH_CORRECT = "correct"


def truth_error(j: int) -> str:
    return f"error_{j}"


# =====================================================================
# Errors
# =====================================================================


class BackendError(Exception):
    """Base for agent/embedder backend failures."""


class MissingAnswerError(BackendError):
    """A simulated task has no canonical answer registered."""


class BackendTimeoutError(BackendError):
    """The per-sample deadline elapsed. Carries the elapsed seconds."""

    def __init__(self, message: str, elapsed: float):
        super().__init__(message)
        self.elapsed = elapsed


class BackendAuthError(BackendError):
    """Authentication/authorization failure; never retried."""


class BackendProtocolError(BackendError):
    """The endpoint answered with something other than the expected shape."""


class BackendTransportError(BackendError):
    """Retryable transport-level failure that exhausted its retries."""


# =====================================================================
# Domain types
# =====================================================================


@dataclass(frozen=True)
class AgentConfig:
    """Configuration of one micro-agent invocation."""

    role: str
    goal: str
    instructions: str
    tools: tuple[str, ...] = ()
    model: str = ""
    temperature: float = 0.7
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tools", tuple(self.tools))


@dataclass(frozen=True)
class SimAgentModel:
    """Error behavior of a simulated agent."""

    p: float
    error_space: int = 9
    rho: float = 0.0
    family: str = "default"

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if self.error_space < 1:
            raise ValueError(f"error_space must be >= 1, got {self.error_space}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")


@dataclass(frozen=True)
class AgentOutput:
    """One sample: the answer text plus measurement metadata.

    truth_tag exists only for simulation measurement and is stripped before
    anything reaches the judge.
    """

    text: str
    backend: str
    seed: int
    latency: float = 0.0
    truth_tag: Optional[str] = None


@dataclass(frozen=True)
class Scenario:
    """Ground truth for simulated runs: canonical answer per task id."""

    answers: dict[str, str] = field(default_factory=dict)

    def canonical(self, task_id: str) -> str:
        try:
            return self.answers[task_id]
        except KeyError:
            raise MissingAnswerError(
                f"no canonical answer registered for task {task_id!r}"
            ) from None


# =====================================================================
# Seed derivation
# =====================================================================

def derive_seed(run_seed: int, task_id: str, sample_index: int, rescale_round: int) -> int:
    """Stable 64-bit sample seed.

    Hash-derived so that resume replays identical draws and dynamic-scaling
    rounds never reuse earlier ones.
    """
    material = f"{run_seed}|{task_id}|{sample_index}|{rescale_round}".encode()
    return int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "big")


# =====================================================================
# Simulated execution
# =====================================================================

def sim_execute(
    task_id: str,
    model: SimAgentModel,
    seed: int,
    scenario: Scenario,
    backend_name: str = "sim",
    shared_draw: Optional[tuple[str, str]] = None,
) -> AgentOutput:
    """One simulated agent invocation, deterministic in (seed, task_id).

    When a common-cause draw is supplied the agent emits it verbatim;
    otherwise it errs with probability p, choosing uniformly among the K
    distinct wrong answers for this task.
    """
    canonical = scenario.canonical(task_id)
    if shared_draw is not None:
        text, tag = shared_draw
        return AgentOutput(text=text, backend=backend_name, seed=seed, truth_tag=tag)
    rng = random.Random(seed ^ _task_salt(task_id))
    if rng.random() < model.p:
        j = rng.randrange(model.error_space) + 1
        return AgentOutput(
            text=wrong_answer(task_id, j),
            backend=backend_name,
            seed=seed,
            truth_tag=truth_error(j),
        )
    return AgentOutput(text=canonical, backend=backend_name, seed=seed, truth_tag=TRUTH_CORRECT)


def draw_common_cause(
    model: SimAgentModel,
    trial_seed: int,
    task_id: str,
    scenario: Scenario,
) -> Optional[tuple[str, str]]:
    """Per-trial common-cause mixture: with probability rho, one shared draw.

    The shared draw itself is correct with probability 1-p, else uniform over
    the K wrong answers. Absent (None) with probability 1-rho, leaving the
    trial in the independent regime.
    """
    rng = random.Random(trial_seed ^ _task_salt(task_id) ^ 0x5EED)
    if rng.random() >= model.rho:
        return None
    if rng.random() < model.p:
        j = rng.randrange(model.error_space) + 1
        return (wrong_answer(task_id, j), truth_error(j))
    return (scenario.canonical(task_id), TRUTH_CORRECT)


def wrong_answer(task_id: str, j: int) -> str:
    """The j-th distinct wrong answer for a task (j in 1..K)."""
    return f"{WRONG_PREFIX}{task_id}::{j}"


def _task_salt(task_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(task_id.encode(), digest_size=8).digest(), "big")


# =====================================================================
# Agent backend protocol and implementations
# =====================================================================


class AgentBackend(Protocol):
    name: str

    def execute(
        self, task: TaskSpec, context: list[tuple[str, str]], config: AgentConfig
    ) -> AgentOutput: ...


class SimBackend:
    """Seeded stochastic simulation agent bound to a scenario."""

    def __init__(self, name: str, model: SimAgentModel, scenario: Scenario):
        self.name = name
        self.model = model
        self.scenario = scenario

    def execute(
        self, task: TaskSpec, context: list[tuple[str, str]], config: AgentConfig
    ) -> AgentOutput:
        return sim_execute(
            task.id, self.model, config.seed, self.scenario, backend_name=self.name
        )


class ScriptedBackend:
    """Returns a fixed answer per task id; raises on unscripted tasks."""

    def __init__(self, name: str, script: dict[str, str]):
        self.name = name
        self.script = dict(script)

    def execute(
        self, task: TaskSpec, context: list[tuple[str, str]], config: AgentConfig
    ) -> AgentOutput:
        if task.id not in self.script:
            raise MissingAnswerError(f"no scripted answer for task {task.id!r}")
        return AgentOutput(
            text=self.script[task.id], backend=self.name, seed=config.seed
        )


class HttpChatBackend:
    """Messages-style completion client with retries and a sample deadline.

    Transient transport failures and 5xx/429 responses are retried with
    exponential backoff up to max_retries; nothing is ever retried after a
    2xx. Auth and protocol errors are terminal.
    """

    def __init__(
        self,
        name: str,
        base_url: str,
        model: str,
        api_key_env: Optional[str] = None,
        deadline: float = SAMPLE_DEADLINE_SECONDS,
        max_retries: int = DEFAULT_MAX_RETRIES,
        backoff: float = DEFAULT_BACKOFF_SECONDS,
        transport: Optional[httpx.BaseTransport] = None,
        sleep=time.sleep,
    ):
        self.name = name
        self.model = model
        self.api_key_env = api_key_env
        self.deadline = deadline
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(
            base_url=base_url, timeout=deadline, transport=transport
        )
        self.retries_used = 0  # cumulative, for observability

    def execute(
        self, task: TaskSpec, context: list[tuple[str, str]], config: AgentConfig
    ) -> AgentOutput:
        payload = {
            "model": self.model or config.model,
            "temperature": config.temperature,
            "seed": config.seed,
            "messages": build_messages(task, context, config),
        }
        start = time.monotonic()
        data = self._post_with_retries("/chat/completions", payload, start)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendProtocolError(f"malformed completion response: {exc!r}") from exc
        if not isinstance(text, str):
            raise BackendProtocolError("completion content is not text")
        return AgentOutput(
            text=text,
            backend=self.name,
            seed=config.seed,
            latency=time.monotonic() - start,
        )

    def _post_with_retries(self, path: str, payload: dict, start: float) -> dict:
        headers = {}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise BackendAuthError(
                    f"credential environment variable {self.api_key_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        attempt = 0
        while True:
            elapsed = time.monotonic() - start
            if elapsed > self.deadline:
                raise BackendTimeoutError(
                    f"sample deadline of {self.deadline}s exceeded", elapsed=elapsed
                )
            try:
                response = self._client.post(
                    path, json=payload, headers=headers,
                    timeout=max(0.001, self.deadline - elapsed),
                )
            except httpx.TimeoutException as exc:
                elapsed = time.monotonic() - start
                raise BackendTimeoutError(
                    f"request timed out after {elapsed:.3f}s", elapsed=elapsed
                ) from exc
            except httpx.TransportError as exc:
                attempt = self._retry_or_raise(attempt, f"transport failure: {exc!r}")
                continue

            if response.status_code in (401, 403):
                raise BackendAuthError(f"endpoint rejected credentials ({response.status_code})")
            if response.status_code >= 500 or response.status_code == 429:
                attempt = self._retry_or_raise(
                    attempt, f"retryable status {response.status_code}"
                )
                continue
            if response.status_code != 200:
                raise BackendProtocolError(f"unexpected status {response.status_code}")
            try:
                return response.json()
            except ValueError as exc:
                # A 2xx was received; a broken body is terminal, not retryable.
                raise BackendProtocolError(f"response body is not JSON: {exc}") from exc

    def _retry_or_raise(self, attempt: int, reason: str) -> int:
        if attempt >= self.max_retries:
            raise BackendTransportError(f"{reason} (after {attempt} retries)")
        self.retries_used += 1
        delay = self.backoff * (2**attempt)
        logger.info("retrying %s [%d/%d] in %.3fs: %s",
                    self.name, attempt + 1, self.max_retries, delay, reason)
        self._sleep(delay)
        return attempt + 1

    def close(self) -> None:
        self._client.close()


def build_messages(
    task: TaskSpec, context: list[tuple[str, str]], config: AgentConfig
) -> list[dict[str, str]]:
    """Assemble the completion request from agent config, task, and context."""
    system = "\n".join(
        part
        for part in (
            f"Role: {config.role}" if config.role else "",
            f"Goal: {config.goal}" if config.goal else "",
            config.instructions,
        )
        if part
    )
    user_lines = [f"Task: {task.description}"]
    if context:
        user_lines.append("Verified facts from completed dependencies:")
        user_lines.extend(f"- [{dep}] {answer}" for dep, answer in context)
    messages = []
    if system:
        messages.append({"role": "system", "content": system})
    messages.append({"role": "user", "content": "\n".join(user_lines)})
    return messages


# =====================================================================
# Embedders
# =====================================================================


class Embedder(Protocol):
    def embed(self, texts: list[str]) -> list[np.ndarray]: ...


def mock_embed(text: str) -> np.ndarray:
    """Deterministic token-hash bag-of-words embedding, L2-normalized.

    Identical strings map to identical vectors; strings sharing most tokens
    land close in cosine similarity. The empty string gets the reserved
    final axis so it is orthogonal to every token bucket.
    """
    vec = np.zeros(EMBED_DIM, dtype=np.float64)
    tokens = text.lower().split()
    if not tokens:
        vec[_EMPTY_AXIS] = 1.0
        return vec
    for token in tokens:
        digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
        bucket = int.from_bytes(digest[:4], "big") % _TOKEN_BUCKETS
        sign = 1.0 if digest[4] & 1 else -1.0
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # Signed counts can cancel exactly; fall back to the reserved axis
        # rather than return a zero vector.
        vec[_EMPTY_AXIS] = 1.0
        return vec
    return vec / norm


class MockEmbedder:
    def embed(self, texts: list[str]) -> list[np.ndarray]:
        return [mock_embed(text) for text in texts]


class ScriptedEmbedder:
    """Fixture embedder returning pinned unit vectors per exact text."""

    def __init__(self, table: dict[str, np.ndarray | list[float]]):
        self.table = {}
        for text, raw in table.items():
            vec = np.asarray(raw, dtype=np.float64)
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise ValueError(f"scripted vector for {text!r} is zero")
            self.table[text] = vec / norm

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        missing = [t for t in texts if t not in self.table]
        if missing:
            raise KeyError(f"no scripted vectors for {missing}")
        return [self.table[t] for t in texts]


class HttpEmbedder:
    """Batch embedding client; one request per batch, order-preserving."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: Optional[str] = None,
        deadline: float = SAMPLE_DEADLINE_SECONDS,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.model = model
        self.api_key_env = api_key_env
        self._client = httpx.Client(base_url=base_url, timeout=deadline, transport=transport)

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        if not texts:
            return []
        headers = {}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise BackendAuthError(
                    f"credential environment variable {self.api_key_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        try:
            response = self._client.post(
                "/embeddings", json={"model": self.model, "input": texts}, headers=headers
            )
        except httpx.TimeoutException as exc:
            raise BackendTimeoutError(f"embedding request timed out: {exc!r}", elapsed=0.0) from exc
        except httpx.TransportError as exc:
            raise BackendTransportError(f"embedding transport failure: {exc!r}") from exc
        if response.status_code in (401, 403):
            raise BackendAuthError(f"endpoint rejected credentials ({response.status_code})")
        if response.status_code != 200:
            raise BackendProtocolError(f"unexpected status {response.status_code}")
        try:
            rows = response.json()["data"]
            vectors = [np.asarray(row["embedding"], dtype=np.float64) for row in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendProtocolError(f"malformed embedding response: {exc!r}") from exc
        if len(vectors) != len(texts):
            # No silent truncation: a partial batch fails the whole batch.
            raise BackendProtocolError(
                f"requested {len(texts)} embeddings, received {len(vectors)}"
            )
        normalized = []
        for vec in vectors:
            norm = float(np.linalg.norm(vec))
            if norm == 0.0 or not np.isfinite(norm):
                raise BackendProtocolError("endpoint returned a zero or non-finite vector")
            normalized.append(vec / norm)
        return normalized

    def close(self) -> None:
        self._client.close()


# =====================================================================
# Pool assignment
# =====================================================================

def round_robin(pool: Iterable[str], start: int, count: int) -> list[str]:
    """Backend names for `count` samples beginning at global sample index
    `start`, cycling the pool so reuse happens only when count exceeds it."""
    names = list(pool)
    if not names:
        raise ValueError("model pool is empty")
    return [names[(start + offset) % len(names)] for offset in range(count)]
