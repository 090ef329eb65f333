"""
Tests for the run-configuration loader.

One JSON document must round-trip into a validated RunConfig and then
materialize into live objects: the backend pool, the scenario, the tool
registry, and the embedder. Unknown fields are rejected loudly at every
level so a typo never silently falls back to a default.
"""

import json

import pytest

from quorumflow.backends import (
    HttpChatBackend,
    HttpEmbedder,
    MockEmbedder,
    ScriptedBackend,
    SimBackend,
    TRUTH_CORRECT,
    AgentConfig,
)
from quorumflow.config import (
    ConfigError,
    build_backends,
    build_embedder,
    build_registry,
    build_scenario,
    load_config,
    parse_config,
)
from quorumflow.graph import ActionType, TaskSpec


FULL_DOC = {
    "run": {"seed": 42, "log_path": "runs/demo.jsonl", "run_id": "demo-1"},
    "sampling": {"n": 3, "n_max": 7, "theta": 0.7, "tau": 0.9,
                 "temperature": 0.2, "model_pool": ["sim-a", "sim-b"]},
    "backends": [
        {"name": "sim-a", "kind": "sim", "p": 0.1, "error_space": 4, "rho": 0.2},
        {"name": "sim-b", "kind": "sim"},
        {"name": "fixed", "kind": "scripted", "script": {"1": "answer one"}},
        {"name": "live", "kind": "http", "base_url": "https://example.test/v1",
         "model": "medium", "api_key_env": "EXAMPLE_API_KEY"},
    ],
    "scenario": {"answers": {"1": "answer one", "2": "answer two"}},
    "tools": {"lookup_table": {"invoice": "INV-2024-0847"}},
    "embedder": "exact",
}


# =====================================================================
# Parsing and validation
# =====================================================================


def test_full_document_round_trips():
    config = load_config(json.dumps(FULL_DOC))
    assert config.seed == 42
    assert config.log_path == "runs/demo.jsonl"
    assert config.run_id == "demo-1"
    assert config.sampling.n == 3
    assert config.sampling.n_max == 7
    assert config.sampling.theta == 0.7
    assert config.sampling.tau == 0.9
    assert config.sampling.model_pool == ("sim-a", "sim-b")
    assert config.document == FULL_DOC


def test_empty_document_uses_defaults():
    config = parse_config({})
    assert config.seed == 0
    assert config.log_path is None
    assert config.run_id is None
    assert config.sampling.n == 5
    assert config.sampling.n_max == 13
    assert config.sampling.theta == 0.6
    assert config.sampling.tau == 0.85


def test_invalid_json_is_a_config_error():
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config("{not json")


def test_non_object_document_is_rejected():
    with pytest.raises(ConfigError, match="JSON object"):
        load_config("[1, 2]")


def test_unknown_top_level_field_is_rejected():
    with pytest.raises(ConfigError, match="unknown configuration fields.*'samplign'"):
        parse_config({"samplign": {}})


def test_unknown_run_field_and_bad_seed_are_rejected():
    with pytest.raises(ConfigError, match="unknown run fields"):
        parse_config({"run": {"sede": 1}})
    with pytest.raises(ConfigError, match="seed must be an integer"):
        parse_config({"run": {"seed": "forty-two"}})


def test_sampling_validation_is_enforced_at_parse_time():
    with pytest.raises(ConfigError, match="unknown sampling fields"):
        parse_config({"sampling": {"samples": 5}})
    # theta = 0.5 cannot certify a majority, so the loader refuses it.
    with pytest.raises(ConfigError, match="invalid sampling"):
        parse_config({"sampling": {"theta": 0.5}})
    with pytest.raises(ConfigError, match="invalid sampling"):
        parse_config({"sampling": {"n": 9, "n_max": 5}})


def test_backend_entries_are_validated_at_parse_time():
    with pytest.raises(ConfigError, match="kind must be sim, scripted, or http"):
        parse_config({"backends": [{"name": "x", "kind": "quantum"}]})
    with pytest.raises(ConfigError, match="nonempty string name"):
        parse_config({"backends": [{"kind": "sim"}]})
    with pytest.raises(ConfigError, match="unknown fields"):
        parse_config({"backends": [{"name": "x", "kind": "sim", "pp": 0.1}]})
    with pytest.raises(ConfigError, match="need base_url"):
        parse_config({"backends": [{"name": "x", "kind": "http"}]})
    with pytest.raises(ConfigError, match="need a script object"):
        parse_config({"backends": [{"name": "x", "kind": "scripted"}]})


# =====================================================================
# Materialization
# =====================================================================


def test_build_backends_constructs_each_kind():
    backends = build_backends(FULL_DOC)
    assert set(backends) == {"sim-a", "sim-b", "fixed", "live"}
    assert isinstance(backends["sim-a"], SimBackend)
    assert isinstance(backends["fixed"], ScriptedBackend)
    assert isinstance(backends["live"], HttpChatBackend)
    assert backends["sim-a"].model.p == 0.1
    assert backends["sim-a"].model.error_space == 4
    assert backends["sim-a"].model.rho == 0.2
    # Defaults: p=0.05, error_space=9, rho=0, family=name.
    assert backends["sim-b"].model.p == 0.05
    assert backends["sim-b"].model.error_space == 9
    assert backends["sim-b"].model.rho == 0.0
    assert backends["sim-b"].model.family == "sim-b"


def test_sim_backend_answers_from_the_scenario():
    doc = {
        "backends": [{"name": "oracle", "kind": "sim", "p": 0.0}],
        "scenario": {"answers": {"1": "answer one"}},
    }
    backend = build_backends(doc)["oracle"]
    task = TaskSpec(id="1", description="d", action_type=ActionType.REASONING)
    out = backend.execute(task, [], AgentConfig(role="r", goal="g", instructions="i", tools=(), model="m", seed=7))
    assert out.text == "answer one"
    assert out.truth_tag == TRUTH_CORRECT


def test_duplicate_backend_names_are_rejected():
    doc = {"backends": [{"name": "a", "kind": "sim"}, {"name": "a", "kind": "sim"}],
           "scenario": {"answers": {}}}
    with pytest.raises(ConfigError, match="duplicate backend name"):
        build_backends(doc)


def test_sim_model_parameter_errors_carry_the_backend_name():
    doc = {"backends": [{"name": "bad", "kind": "sim", "p": 1.5}],
           "scenario": {"answers": {}}}
    with pytest.raises(ConfigError, match="'bad'"):
        build_backends(doc)


def test_build_scenario_coerces_to_strings_and_rejects_bad_shapes():
    scenario = build_scenario({"scenario": {"answers": {"1": 5}}})
    assert scenario.answers == {"1": "5"}
    with pytest.raises(ConfigError):
        build_scenario({"scenario": {"answers": ["not", "a", "mapping"]}})
    with pytest.raises(ConfigError):
        build_scenario({"scenario": "nope"})


def test_build_registry_wires_stock_tools_and_the_ledger():
    registry, ledger = build_registry(FULL_DOC)
    assert registry.names() == ["arithmetic", "lookup", "record_refund"]
    result = registry.invoke("record_refund", {"amount": "1.00"}, '{"amount":"1.00"}')
    assert result == {"status": "recorded", "sequence": 1}
    assert ledger == [{"amount": "1.00"}]
    looked = registry.invoke("lookup", {"key": "invoice"}, '{"key":"invoice"}')
    assert looked == {"value": "INV-2024-0847"}


def test_build_registry_rejects_a_non_object_tools_section():
    with pytest.raises(ConfigError, match="tools section"):
        build_registry({"tools": ["lookup"]})


def test_build_embedder_choices():
    assert build_embedder({}) is None
    assert build_embedder({"embedder": "exact"}) is None
    assert isinstance(build_embedder({"embedder": "mock"}), MockEmbedder)
    http = build_embedder({"embedder": {"kind": "http", "base_url": "https://example.test/embed"}})
    assert isinstance(http, HttpEmbedder)
    with pytest.raises(ConfigError, match="needs base_url"):
        build_embedder({"embedder": {"kind": "http"}})
    with pytest.raises(ConfigError, match="embedder must be"):
        build_embedder({"embedder": "cosine"})
