"""
Run configuration: one JSON document wires a whole reproducible run.

The document carries everything except credentials — backend pool
definitions, sampling/judge parameters, the scenario ground truth for
simulated runs, tool tables, the embedder choice, and run settings (seed,
log path). Credentials are never written to config files; HTTP backends
name the environment variable that holds their key and read it at call
time. The same document is embedded into the run_started event, which is
how a resumed run rebuilds its backends without any external input.

Backend kinds
=============
- "sim":      seeded stochastic agent (p, error_space, rho, family)
- "scripted": fixed answer per task id
- "http":     chat-completions endpoint (base_url, model, api_key_env)

Embedder choices: "exact" (identical text <=> same cluster; the default
and the simulation mode), "mock" (token-hash vectors), or an object
{"kind": "http", ...} for a live embeddings endpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Optional

from .backends import (
    AgentBackend,
    Embedder,
    HttpChatBackend,
    HttpEmbedder,
    MockEmbedder,
    Scenario,
    ScriptedBackend,
    SimAgentModel,
    SimBackend,
)
from .executor import ToolRegistry, arithmetic_tool, make_lookup_tool, make_record_tool
from .graph import SamplingConfig, WorkflowValidationError


class ConfigError(ValueError):
    """The run configuration document is invalid."""


_RUN_FIELDS = {"seed", "log_path", "run_id"}
_TOP_FIELDS = {"run", "sampling", "backends", "scenario", "tools", "embedder"}
_SIM_FIELDS = {"name", "kind", "p", "error_space", "rho", "family"}
_SCRIPTED_FIELDS = {"name", "kind", "script"}
_HTTP_FIELDS = {"name", "kind", "base_url", "model", "api_key_env", "deadline", "max_retries", "backoff"}
_SAMPLING_FIELDS = {"n", "n_max", "temperature", "theta", "tau", "model_pool"}


@dataclass
class RunConfig:
    """Parsed configuration plus the raw document for persistence."""

    seed: int
    log_path: Optional[str]
    run_id: Optional[str]
    sampling: SamplingConfig
    document: dict[str, Any]


def parse_config(document: dict[str, Any]) -> RunConfig:
    """Validate a configuration document (already JSON-parsed)."""
    if not isinstance(document, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(document) - _TOP_FIELDS
    if unknown:
        raise ConfigError(f"unknown configuration fields {sorted(unknown)}")

    run = document.get("run", {})
    if not isinstance(run, dict):
        raise ConfigError("run section must be an object")
    unknown = set(run) - _RUN_FIELDS
    if unknown:
        raise ConfigError(f"unknown run fields {sorted(unknown)}")
    seed = run.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"run.seed must be an integer, got {seed!r}")

    sampling_doc = document.get("sampling", {})
    if not isinstance(sampling_doc, dict):
        raise ConfigError("sampling section must be an object")
    unknown = set(sampling_doc) - _SAMPLING_FIELDS
    if unknown:
        raise ConfigError(f"unknown sampling fields {sorted(unknown)}")
    if "model_pool" in sampling_doc:
        sampling_doc = dict(sampling_doc, model_pool=tuple(sampling_doc["model_pool"]))
    try:
        sampling = SamplingConfig(**sampling_doc)
    except (TypeError, WorkflowValidationError) as exc:
        raise ConfigError(f"invalid sampling configuration: {exc}") from exc

    # Fail early on malformed backend entries; construction happens later.
    for entry in document.get("backends", []):
        _validate_backend_entry(entry)

    return RunConfig(
        seed=seed,
        log_path=run.get("log_path"),
        run_id=run.get("run_id"),
        sampling=sampling,
        document=document,
    )


def load_config(text: str) -> RunConfig:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
    return parse_config(document)


def _validate_backend_entry(entry: Any) -> None:
    if not isinstance(entry, dict):
        raise ConfigError("backend entries must be objects")
    name = entry.get("name")
    kind = entry.get("kind")
    if not name or not isinstance(name, str):
        raise ConfigError("backend entry needs a nonempty string name")
    allowed = {"sim": _SIM_FIELDS, "scripted": _SCRIPTED_FIELDS, "http": _HTTP_FIELDS}.get(kind)
    if allowed is None:
        raise ConfigError(f"backend {name!r}: kind must be sim, scripted, or http, got {kind!r}")
    unknown = set(entry) - allowed
    if unknown:
        raise ConfigError(f"backend {name!r}: unknown fields {sorted(unknown)}")
    if kind == "http" and not entry.get("base_url"):
        raise ConfigError(f"backend {name!r}: http backends need base_url")
    if kind == "scripted" and not isinstance(entry.get("script"), dict):
        raise ConfigError(f"backend {name!r}: scripted backends need a script object")


def build_scenario(document: dict[str, Any]) -> Scenario:
    section = document.get("scenario", {})
    if not isinstance(section, dict) or not isinstance(section.get("answers", {}), dict):
        raise ConfigError("scenario section must be an object with an answers mapping")
    answers = {str(k): str(v) for k, v in section.get("answers", {}).items()}
    return Scenario(answers=answers)


def build_backends(document: dict[str, Any], scenario: Optional[Scenario] = None) -> dict[str, AgentBackend]:
    """Instantiate the backend pool; sim backends bind to the scenario."""
    if scenario is None:
        scenario = build_scenario(document)
    backends: dict[str, AgentBackend] = {}
    for entry in document.get("backends", []):
        _validate_backend_entry(entry)
        name = entry["name"]
        if name in backends:
            raise ConfigError(f"duplicate backend name {name!r}")
        kind = entry["kind"]
        if kind == "sim":
            try:
                model = SimAgentModel(
                    p=entry.get("p", 0.05),
                    error_space=entry.get("error_space", 9),
                    rho=entry.get("rho", 0.0),
                    family=entry.get("family", name),
                )
            except ValueError as exc:
                raise ConfigError(f"backend {name!r}: {exc}") from exc
            backends[name] = SimBackend(name, model, scenario)
        elif kind == "scripted":
            backends[name] = ScriptedBackend(name, {str(k): str(v) for k, v in entry["script"].items()})
        else:
            backends[name] = HttpChatBackend(
                name=name,
                base_url=entry["base_url"],
                model=entry.get("model", ""),
                api_key_env=entry.get("api_key_env"),
                deadline=entry.get("deadline", 60.0),
                max_retries=entry.get("max_retries", 3),
                backoff=entry.get("backoff", 0.25),
            )
    return backends


def build_registry(document: dict[str, Any], ledger: Optional[list] = None) -> tuple[ToolRegistry, list]:
    """Tool registry with the stock tools; returns the recorder's ledger."""
    section = document.get("tools", {})
    if not isinstance(section, dict):
        raise ConfigError("tools section must be an object")
    if ledger is None:
        ledger = []
    registry = ToolRegistry()
    registry.register("record_refund", make_record_tool(ledger))
    registry.register("arithmetic", arithmetic_tool)
    registry.register("lookup", make_lookup_tool(section.get("lookup_table", {})))
    return registry, ledger


def build_embedder(document: dict[str, Any]) -> Optional[Embedder]:
    """None means exact clustering (identical text <=> one cluster)."""
    choice = document.get("embedder", "exact")
    if choice == "exact":
        return None
    if choice == "mock":
        return MockEmbedder()
    if isinstance(choice, dict) and choice.get("kind") == "http":
        if not choice.get("base_url"):
            raise ConfigError("http embedder needs base_url")
        return HttpEmbedder(
            base_url=choice["base_url"],
            model=choice.get("model", ""),
            api_key_env=choice.get("api_key_env"),
            deadline=choice.get("deadline", 60.0),
        )
    raise ConfigError(f"embedder must be 'exact', 'mock', or an http object, got {choice!r}")
