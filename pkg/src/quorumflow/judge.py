"""
Voting judge: embed, cluster, count, gate on confidence, select best.

Given the candidate answers sampled for one task, the judge groups them
into semantic clusters (agglomerative, average linkage, cosine distance,
merging while the minimum inter-cluster distance stays within 1 - tau),
takes the largest cluster as the winner, and computes

    confidence = |winner| / |candidates|

If confidence reaches the threshold theta the judge selects the best
member of the winning cluster and returns a Verdict. Otherwise it asks
for min(4, n_max - current) more samples; once the sample count reaches
n_max the decision is forced over the largest cluster. A tie between
equal-size largest clusters escalates below n_max and is broken at n_max
by the cluster whose lowest member index is smallest.

This module deliberately sees only candidate text. Simulation metadata
such as truth tags lives in the backend/executor types and is stripped
before judging, so nothing here can peek at ground truth.

In simulation mode (no embedder) identical texts form exact clusters,
which makes the winner precisely the modal answer; that equivalence is
what ties the judge to the binomial consensus-error analysis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

# Escalation step: "scale up by 4", clipped to the remaining headroom.
ESCALATION_STEP = 4

# A selector receives the filled selection prompt and the candidate texts and
# returns the chosen candidate text.
Selector = Callable[[str, list[str]], str]


# =====================================================================
# Domain types
# =====================================================================


@dataclass(frozen=True)
class CandidateSet:
    """Judge-facing view of a task's sampled outputs: text only."""

    task_id: str
    task_description: str
    texts: tuple[str, ...]
    round: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "texts", tuple(self.texts))
        if not self.texts:
            raise ValueError("candidate set must not be empty")
        if self.round < 0:
            raise ValueError("round must be >= 0")


@dataclass(frozen=True)
class ClusterReport:
    """Semantic clusters of one judge round.

    clusters: per cluster, (member indices ascending, centroid or None);
    ordered by lowest member index. winner indexes into clusters; confidence
    is winner size over total candidates; contested marks confidence < theta.
    """

    clusters: tuple[tuple[tuple[int, ...], Optional[tuple[float, ...]]], ...]
    winner: int
    confidence: float
    contested: bool

    def __post_init__(self) -> None:
        total = sum(len(members) for members, _ in self.clusters)
        seen = sorted(i for members, _ in self.clusters for i in members)
        if seen != list(range(total)):
            raise ValueError("clusters must partition the candidate indices")
        if not 0 <= self.winner < len(self.clusters):
            raise ValueError("winner must index a cluster")
        sizes = [len(members) for members, _ in self.clusters]
        if sizes[self.winner] != max(sizes):
            raise ValueError("winner must be a maximal-size cluster")
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError(f"confidence must be in (0, 1], got {self.confidence}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(members) for members, _ in self.clusters)


@dataclass(frozen=True)
class Verdict:
    """The judge's decision for one task."""

    answer: str
    confidence: float
    total_samples: int
    rounds: int
    forced: bool
    selection_rationale: str
    report: ClusterReport

    def __post_init__(self) -> None:
        if self.total_samples < 1 or self.rounds < 1:
            raise ValueError("total_samples and rounds must be >= 1")


@dataclass(frozen=True)
class EscalationRequest:
    """Ask the executor for `add` more samples before judging again."""

    add: int

    def __post_init__(self) -> None:
        if self.add < 1:
            raise ValueError("escalation must request at least one sample")


# =====================================================================
# Clustering
# =====================================================================

def cluster_outputs(vectors: Sequence[np.ndarray], tau: float) -> list[list[int]]:
    """Agglomerative clustering of unit vectors under cosine distance.

    Average linkage; clusters merge while the minimum inter-cluster distance
    is <= 1 - tau and the procedure stops when it exceeds that. Deterministic
    given input order: among equally close pairs, the one with the lowest
    cluster indices (which track lowest member index) merges first. Returns
    clusters as ascending member-index lists, ordered by lowest member.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    count = len(vectors)
    if count == 0:
        raise ValueError("need at least one vector")
    matrix = np.asarray(vectors, dtype=np.float64)
    # Pairwise cosine distances between the original points; average linkage
    # is then a mean over cross-cluster entries of this fixed matrix.
    distances = 1.0 - matrix @ matrix.T

    clusters: list[list[int]] = [[i] for i in range(count)]
    threshold = 1.0 - tau
    while len(clusters) > 1:
        best = None
        best_dist = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                link = float(
                    np.mean(distances[np.ix_(clusters[a], clusters[b])])
                )
                if best_dist is None or link < best_dist - 1e-15:
                    best, best_dist = (a, b), link
        if best_dist is None or best_dist > threshold:
            break
        a, b = best
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
        clusters.sort(key=lambda members: members[0])
    clusters.sort(key=lambda members: members[0])
    return clusters


def exact_clusters(texts: Sequence[str]) -> list[list[int]]:
    """Group identical texts; the simulation-mode stand-in for embedding.

    Identical strings belong together and distinct strings never merge,
    which is exactly what embedding does when vectors are exact. Cluster
    order follows first occurrence, so ordering semantics match
    cluster_outputs.
    """
    groups: dict[str, list[int]] = {}
    for index, text in enumerate(texts):
        groups.setdefault(text, []).append(index)
    return sorted(groups.values(), key=lambda members: members[0])


def _centroid(members: list[int], vectors: Sequence[np.ndarray]) -> tuple[float, ...]:
    mean = np.mean([vectors[i] for i in members], axis=0)
    norm = float(np.linalg.norm(mean))
    if norm > 0.0:
        mean = mean / norm
    return tuple(float(x) for x in mean)


def build_report(
    texts: Sequence[str],
    tau: float,
    theta: float,
    embedder=None,
) -> ClusterReport:
    """Cluster texts (embedding or exact mode) and score the winner."""
    if embedder is None:
        clusters = exact_clusters(texts)
        entries = tuple((tuple(members), None) for members in clusters)
    else:
        vectors = embedder.embed(list(texts))
        clusters = cluster_outputs(vectors, tau)
        entries = tuple(
            (tuple(members), _centroid(members, vectors)) for members in clusters
        )
    sizes = [len(members) for members in clusters]
    top = max(sizes)
    # Clusters are ordered by lowest member index, so the first maximal one
    # is the deterministic tie-break winner.
    winner = next(i for i, size in enumerate(sizes) if size == top)
    confidence = top / len(texts)
    return ClusterReport(
        clusters=entries,
        winner=winner,
        confidence=confidence,
        contested=confidence < theta,
    )


# =====================================================================
# Judge rounds
# =====================================================================

def judge_round(
    candidates: CandidateSet,
    theta: float,
    tau: float,
    n_max: int,
    embedder=None,
    selector: Optional[Selector] = None,
    template: Optional[str] = None,
) -> Union[Verdict, EscalationRequest]:
    """One pass of the voting loop: decide, escalate, or force a decision.

    Decides when the winner's confidence meets theta and the winner is
    untied; escalates by min(4, n_max - current) otherwise; at n_max the
    decision is forced over the (tie-broken) largest cluster.
    """
    if not 0.5 < theta <= 1.0:
        raise ValueError(f"theta must be in (0.5, 1], got {theta}")
    total = len(candidates.texts)
    if total > n_max:
        raise ValueError(f"candidate count {total} exceeds n_max {n_max}")
    report = build_report(candidates.texts, tau, theta, embedder=embedder)
    sizes = report.sizes
    tied = sizes.count(max(sizes)) > 1

    if (report.contested or tied) and total < n_max:
        return EscalationRequest(add=min(ESCALATION_STEP, n_max - total))

    winner_members = report.clusters[report.winner][0]
    pool = [candidates.texts[i] for i in winner_members]
    answer, rationale = select_best(
        pool, candidates.task_description, selector=selector, template=template
    )
    return Verdict(
        answer=answer,
        confidence=report.confidence,
        total_samples=total,
        rounds=candidates.round + 1,
        forced=(report.contested or tied),
        selection_rationale=rationale,
        report=report,
    )


def select_best(
    pool: list[str],
    task_description: str,
    selector: Optional[Selector] = None,
    template: Optional[str] = None,
) -> tuple[str, str]:
    """Choose the best answer within the winning cluster.

    With a selector backend, the selection prompt is issued and the returned
    candidate used (falling back deterministically if the selector fails or
    answers off-list). Without one, the lexicographically smallest candidate
    is returned; members of an exact cluster are identical anyway, so this
    only matters for near-duplicate embedding clusters.
    """
    if not pool:
        raise ValueError("select_best needs at least one candidate")
    if selector is not None:
        prompt = build_selection_prompt(task_description, pool, template=template)
        try:
            choice = selector(prompt, list(pool))
        except Exception as exc:  # selector backends may fail arbitrarily
            logger.warning("selector backend failed (%r); using deterministic selection", exc)
        else:
            if choice in pool:
                return choice, f"selector backend chose 1 of {len(pool)} candidates"
            logger.warning(
                "selector returned text outside the winning cluster; using deterministic selection"
            )
    return min(pool), f"deterministic: lexicographically smallest of {len(pool)} candidates"


def build_selection_prompt(
    task_description: str, pool: Sequence[str], template: Optional[str] = None
) -> str:
    """Fill the selection prompt template with the candidate listing."""
    body = template if template is not None else default_selection_template()
    listing = "\n".join(f"[Output {i + 1}]: {text}" for i, text in enumerate(pool))
    return body.format(task_description=task_description, candidates=listing)


@lru_cache(maxsize=None)
def default_selection_template() -> str:
    return (
        resources.files("quorumflow.templates")
        .joinpath("selection_prompt.txt")
        .read_text(encoding="utf-8")
    )


@lru_cache(maxsize=None)
def decomposition_template() -> str:
    """Prompt template for decomposing a complex task into atomic actions.

    Shipped for operators who generate workflow documents with an LLM; the
    engine itself consumes explicit workflow files.
    """
    return (
        resources.files("quorumflow.templates")
        .joinpath("decomposition_prompt.txt")
        .read_text(encoding="utf-8")
    )
