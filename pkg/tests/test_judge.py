"""
Tests for semantic-cluster voting: clustering, gating, escalation, selection.

Frozen oracle notes
-------------------
Cosine geometry for the hand-built scripted vectors (computed by hand):
  [1, 0.2, 0] . [1, 0, 0]       -> cos = 1/sqrt(1.04)   = 0.980580...
  [1, 0.2, 0] . [1, -0.2, 0]    -> cos = 0.96/1.04      = 0.923076...
  chain test: cos(a,b) = 0.9, cos(b,c) = 0.9, cos(a,c) = 2*0.81 - 1 = 0.62
    average linkage of {a,b} to c = mean(0.38, 0.10) = 0.24 > 0.15 = 1 - tau,
    so the chain must NOT collapse into one cluster (single linkage would).
"""

import dataclasses
import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import quorumflow.judge as judge_module
from quorumflow.backends import MockEmbedder, ScriptedEmbedder
from quorumflow.judge import (
    CandidateSet,
    ClusterReport,
    EscalationRequest,
    Verdict,
    build_report,
    build_selection_prompt,
    cluster_outputs,
    decomposition_template,
    default_selection_template,
    exact_clusters,
    judge_round,
    select_best,
)

TAU = 0.85
THETA = 0.6


def unit(*coords: float) -> np.ndarray:
    vec = np.asarray(coords, dtype=np.float64)
    return vec / np.linalg.norm(vec)


# =====================================================================
# Clustering
# =====================================================================


def test_exact_clusters_group_identical_texts_in_first_occurrence_order():
    texts = ["b", "a", "a", "c", "b"]
    assert exact_clusters(texts) == [[0, 4], [1, 2], [3]]


def test_identical_vectors_form_one_cluster():
    vecs = [unit(1, 0, 0)] * 4
    assert cluster_outputs(vecs, TAU) == [[0, 1, 2, 3]]


def test_orthogonal_vectors_stay_separate():
    vecs = [unit(1, 0, 0), unit(0, 1, 0), unit(0, 0, 1)]
    assert cluster_outputs(vecs, TAU) == [[0], [1], [2]]


def test_paraphrase_cluster_beats_distinct_amount():
    # Three phrasings of the same amount sit within cosine 0.92 of each
    # other; a different amount is orthogonal. The paraphrases must merge
    # and win 3-2 over the exact-duplicate minority.
    embedder = ScriptedEmbedder(
        {
            "$5M": [1.0, 0.0, 0.0],
            "$5,000,000": [1.0, 0.2, 0.0],
            "5 million": [1.0, -0.2, 0.0],
            "$4.2M": [0.0, 0.0, 1.0],
        }
    )
    texts = ["$5M", "$4.2M", "$5,000,000", "5 million", "$4.2M"]
    report = build_report(texts, TAU, THETA, embedder=embedder)
    assert [list(members) for members, _ in report.clusters] == [[0, 2, 3], [1, 4]]
    assert report.winner == 0
    assert report.confidence == pytest.approx(0.6)
    assert not report.contested


def test_average_linkage_stops_chain_growth():
    # a-b and b-c are each within threshold but a-c is far; average linkage
    # must refuse the second merge (single linkage would chain all three).
    a = unit(1.0, 0.0)
    b = unit(0.9, math.sqrt(1 - 0.81))
    c = unit(0.62, math.sqrt(1 - 0.62**2))
    assert cluster_outputs([a, b, c], TAU) == [[0, 1], [2]]


def test_cluster_centroids_are_unit_norm():
    embedder = ScriptedEmbedder({"x": [1.0, 0.0], "y": [0.8, 0.6]})
    report = build_report(["x", "y", "x"], TAU, THETA, embedder=embedder)
    for _, centroid in report.clusters:
        assert centroid is not None
        assert np.linalg.norm(centroid) == pytest.approx(1.0)


def test_mock_embedder_clusters_identical_texts_and_splits_disjoint_ones():
    texts = ["alpha beta gamma delta", "omega psi chi phi", "alpha beta gamma delta"]
    report = build_report(texts, TAU, THETA, embedder=MockEmbedder())
    assert [list(m) for m, _ in report.clusters] == [[0, 2], [1]]


def test_cluster_outputs_rejects_bad_tau_and_empty_input():
    with pytest.raises(ValueError):
        cluster_outputs([unit(1, 0)], 0.0)
    with pytest.raises(ValueError):
        cluster_outputs([unit(1, 0)], 1.0)
    with pytest.raises(ValueError):
        cluster_outputs([], TAU)


@given(
    labels=st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=13)
)
@settings(max_examples=200, deadline=None)
def test_exact_vectors_reproduce_text_grouping_and_modal_winner(labels):
    # With one-hot vectors per distinct text, embedding-space clustering,
    # text grouping, and plain modal vote counting must agree exactly.
    basis = {"a": [1, 0, 0, 0], "b": [0, 1, 0, 0], "c": [0, 0, 1, 0], "d": [0, 0, 0, 1]}
    embedder = ScriptedEmbedder({k: basis[k] for k in set(labels)})
    vectors = embedder.embed(labels)
    assert cluster_outputs(vectors, TAU) == exact_clusters(labels)

    embedded = build_report(labels, TAU, THETA, embedder=embedder)
    exact = build_report(labels, TAU, THETA, embedder=None)
    assert [m for m, _ in embedded.clusters] == [m for m, _ in exact.clusters]
    assert embedded.winner == exact.winner
    assert embedded.confidence == exact.confidence

    counts = {}
    for text in labels:
        counts[text] = counts.get(text, 0) + 1
    top = max(counts.values())
    modal_first_index = min(
        labels.index(text) for text, count in counts.items() if count == top
    )
    winner_members = exact.clusters[exact.winner][0]
    assert winner_members[0] == modal_first_index
    assert exact.confidence == pytest.approx(top / len(labels))


# =====================================================================
# Gating and escalation
# =====================================================================


def candidates(texts, round=0):
    return CandidateSet(
        task_id="t1", task_description="compute the total", texts=tuple(texts), round=round
    )


def test_three_two_split_meets_default_threshold():
    result = judge_round(candidates(["x", "x", "y", "x", "y"]), THETA, TAU, n_max=13)
    assert isinstance(result, Verdict)
    assert result.answer == "x"
    assert result.confidence == pytest.approx(0.6)
    assert result.total_samples == 5
    assert result.rounds == 1
    assert not result.forced


def test_two_two_one_split_escalates_by_four():
    result = judge_round(candidates(["x", "x", "y", "y", "z"]), THETA, TAU, n_max=13)
    assert result == EscalationRequest(add=4)


def test_low_confidence_majority_escalates():
    # 2-1-1-1: an untied winner at confidence 0.4 still falls below theta.
    result = judge_round(candidates(["x", "x", "y", "z", "w"]), THETA, TAU, n_max=13)
    assert result == EscalationRequest(add=4)


def test_escalation_is_clipped_to_remaining_headroom():
    eleven = ["x"] * 6 + ["y"] * 5
    result = judge_round(candidates(eleven), 0.99, TAU, n_max=13)
    assert result == EscalationRequest(add=2)


def test_forced_decision_at_sample_ceiling():
    thirteen = ["x"] * 6 + ["y"] * 5 + ["z"] * 2
    result = judge_round(candidates(thirteen, round=2), THETA, TAU, n_max=13)
    assert isinstance(result, Verdict)
    assert result.forced
    assert result.answer == "x"
    assert result.total_samples == 13
    assert result.rounds == 3
    assert result.confidence == pytest.approx(6 / 13)


def test_tie_below_ceiling_escalates_but_is_broken_at_ceiling():
    tied = ["x", "y", "y", "x"]
    assert judge_round(candidates(tied), THETA, TAU, n_max=13) == EscalationRequest(add=4)

    forced = judge_round(candidates(tied), THETA, TAU, n_max=4)
    assert isinstance(forced, Verdict)
    assert forced.forced
    # Equal-size clusters: the one whose lowest member index is smallest wins.
    assert forced.answer == "x"


def test_confident_verdict_is_not_marked_forced_even_at_ceiling():
    result = judge_round(candidates(["x", "x", "x", "y"]), THETA, TAU, n_max=4)
    assert isinstance(result, Verdict)
    assert not result.forced


def test_candidate_count_above_ceiling_is_rejected():
    with pytest.raises(ValueError):
        judge_round(candidates(["x"] * 5), THETA, TAU, n_max=4)


def test_theta_outside_half_open_interval_is_rejected():
    with pytest.raises(ValueError):
        judge_round(candidates(["x"]), 0.5, TAU, n_max=13)
    with pytest.raises(ValueError):
        judge_round(candidates(["x"]), 1.01, TAU, n_max=13)
    assert isinstance(judge_round(candidates(["x"]), 1.0, TAU, n_max=13), Verdict)


def test_judging_is_deterministic():
    texts = ["x", "y", "x", "z", "x"]
    first = judge_round(candidates(texts), THETA, TAU, n_max=13)
    second = judge_round(candidates(texts), THETA, TAU, n_max=13)
    assert first == second


@given(
    labels=st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=10),
    theta_low=st.floats(min_value=0.51, max_value=1.0),
    theta_high=st.floats(min_value=0.51, max_value=1.0),
)
@settings(max_examples=200, deadline=None)
def test_raising_theta_never_creates_decisions(labels, theta_low, theta_high):
    # Below the ceiling, a verdict reached at a strict threshold must also be
    # reached at any laxer one, and with the same answer.
    if theta_low > theta_high:
        theta_low, theta_high = theta_high, theta_low
    n_max = len(labels) + 10
    strict = judge_round(candidates(labels), theta_high, TAU, n_max=n_max)
    lax = judge_round(candidates(labels), theta_low, TAU, n_max=n_max)
    if isinstance(strict, Verdict):
        assert isinstance(lax, Verdict)
        assert lax.answer == strict.answer
        assert not strict.forced and not lax.forced


# =====================================================================
# Selection
# =====================================================================


def test_deterministic_selection_takes_lexicographic_minimum():
    answer, rationale = select_best(["bb", "a", "ccc"], "pick one")
    assert answer == "a"
    assert "deterministic" in rationale


def test_selector_backend_choice_is_honored():
    answer, rationale = select_best(
        ["bb", "a", "ccc"], "pick one", selector=lambda prompt, pool: max(pool, key=len)
    )
    assert answer == "ccc"
    assert "selector" in rationale


def test_failing_selector_falls_back_deterministically(caplog):
    def broken(prompt, pool):
        raise RuntimeError("backend down")

    with caplog.at_level("WARNING", logger="quorumflow.judge"):
        answer, rationale = select_best(["bb", "a"], "pick one", selector=broken)
    assert answer == "a"
    assert "deterministic" in rationale
    assert any("selector backend failed" in rec.message for rec in caplog.records)


def test_off_list_selector_answer_falls_back(caplog):
    with caplog.at_level("WARNING", logger="quorumflow.judge"):
        answer, _ = select_best(["bb", "a"], "pick one", selector=lambda p, c: "zzz")
    assert answer == "a"
    assert any("outside the winning cluster" in rec.message for rec in caplog.records)


def test_selection_prompt_lists_candidates_and_criteria():
    prompt = build_selection_prompt("Compute the refund", ["first", "second"])
    assert "Compute the refund" in prompt
    assert "[Output 1]: first" in prompt
    assert "[Output 2]: second" in prompt
    for criterion in ("Correctness", "Completeness", "Reasoning", "Task Alignment"):
        assert criterion in prompt


def test_packaged_templates_expose_their_placeholders():
    selection = default_selection_template()
    assert "{task_description}" in selection and "{candidates}" in selection
    decomposition = decomposition_template()
    assert "{task_description}" in decomposition and "{tool_list}" in decomposition
    assert "Output as JSON." in decomposition


def test_verdict_carries_selection_rationale_from_selector():
    result = judge_round(
        candidates(["x", "x", "y"]),
        THETA,
        TAU,
        n_max=13,
        selector=lambda prompt, pool: pool[0],
    )
    assert isinstance(result, Verdict)
    assert "selector" in result.selection_rationale


# =====================================================================
# Type boundary and validation
# =====================================================================


def test_judge_types_carry_no_ground_truth_metadata():
    # The judge must be unable to peek at simulation truth: no field of any
    # judge-facing type exposes it, and the module never imports backends.
    for cls in (CandidateSet, ClusterReport, Verdict, EscalationRequest):
        names = {f.name for f in dataclasses.fields(cls)}
        assert "truth_tag" not in names
    source = inspect.getsource(judge_module)
    assert "from .backends" not in source
    assert "from quorumflow.backends" not in source


def test_candidate_set_validation():
    with pytest.raises(ValueError):
        CandidateSet(task_id="t", task_description="d", texts=())
    with pytest.raises(ValueError):
        CandidateSet(task_id="t", task_description="d", texts=("x",), round=-1)


def test_cluster_report_validation():
    with pytest.raises(ValueError):  # indices must partition 0..total-1
        ClusterReport(clusters=(((0, 2), None),), winner=0, confidence=1.0, contested=False)
    with pytest.raises(ValueError):  # winner must be maximal
        ClusterReport(
            clusters=(((0,), None), ((1, 2), None)),
            winner=0,
            confidence=1 / 3,
            contested=True,
        )
    with pytest.raises(ValueError):  # winner must index a cluster
        ClusterReport(clusters=(((0,), None),), winner=1, confidence=1.0, contested=False)


def test_escalation_request_must_add_at_least_one_sample():
    with pytest.raises(ValueError):
        EscalationRequest(add=0)


def test_verdict_requires_positive_counts():
    report = build_report(["x"], TAU, THETA)
    with pytest.raises(ValueError):
        Verdict(
            answer="x",
            confidence=1.0,
            total_samples=0,
            rounds=1,
            forced=False,
            selection_rationale="",
            report=report,
        )
