"""
Monte Carlo verification of the consensus-reliability math.

Each simulation draws agent-level errors from the fault model the closed
forms describe — independent per-agent error probability p, optionally a
per-trial common cause shared by all agents — and counts the aligned-error
event the binomial form bounds: at least ceil(n/2) of n agents erring in
the same trial. That event's frequency equals consensus_error(n, p)
exactly (the bound's worst case, where all wrong answers coincide), so
estimates must land inside their confidence bands, not merely below them.

When wrong answers are spread over K distinct values instead, a plurality
judge errs strictly less often than the aligned-error bound; that
measured frequency is reported alongside the headline as the
plurality-vote error so the gap is visible rather than hidden.

simulate_dynamic runs the real voting judge per trial — sample n0, judge,
escalate while contested, force at n_max — and pairs every trial against
a fixed-n0 judgment of the same initial draws, which makes the "dynamic
never does worse" comparison a paired statistic rather than a two-run
race.

All estimators chunk their draws, reduce to plain counts, and derive 99%
confidence half-widths from the normal approximation; identical seeds
give identical counts.
"""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass

import numpy as np

from .judge import CandidateSet, Verdict, judge_round
from .reliability import ReliabilityResult

logger = logging.getLogger(__name__)

# 99% two-sided normal quantile for confidence half-widths.
Z_99 = statistics.NormalDist().inv_cdf(0.995)

# Chunked drawing keeps peak memory flat regardless of trial count.
CHUNK_TRIALS = 1 << 16
WORKFLOW_CHUNK_TRIALS = 1 << 13

MIN_TRIALS = 1

_CORRECT = "OK"


THREE_SIGMA = 3.0


def ci_halfwidth(p_hat: float, trials: int, z: float = Z_99) -> float:
    """Normal-approximation confidence half-width for a frequency."""
    return z * math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / trials)


def three_sigma_band(target: float, trials: int) -> float:
    """Half-width of the 3-sigma acceptance band around a known target."""
    return ci_halfwidth(target, trials, z=THREE_SIGMA)


def _check_common(n: int, p: float, trials: int) -> None:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}, got {trials}")


# =====================================================================
# Consensus error (aligned-error event)
# =====================================================================

def simulate_consensus(
    n: int, p: float, error_space: int = 9, trials: int = 1_000_000, seed: int = 0
) -> ReliabilityResult:
    """Estimate the probability that >= ceil(n/2) of n agents err together.

    error_space is accepted for interface symmetry; the aligned-error event
    counts erring agents regardless of which wrong answer each one picked,
    which is precisely the worst case the closed form prices.
    """
    _check_common(n, p, trials)
    k_min = math.ceil(n / 2)
    rng = np.random.default_rng(seed)
    failures = 0
    remaining = trials
    while remaining > 0:
        chunk = min(remaining, CHUNK_TRIALS)
        errors = (rng.random((chunk, n)) < p).sum(axis=1)
        failures += int((errors >= k_min).sum())
        remaining -= chunk
    p_hat = failures / trials
    return ReliabilityResult.monte_carlo(
        p_sys=p_hat, ci_halfwidth=ci_halfwidth(p_hat, trials), trials=trials
    )


def simulate_plurality(
    n: int, p: float, error_space: int = 9, trials: int = 1_000_000, seed: int = 0
) -> ReliabilityResult:
    """Measured error of a plurality vote when wrong answers split K ways.

    The supplementary statistic: with error_space > 1 this sits below the
    aligned-error headline because disagreeing wrong answers rarely
    out-vote the truth. Ties between the top wrong mode and the correct
    count are counted as errors here — the pessimistic reading; the
    engine's judge breaks such ties by lowest sample index instead.
    """
    _check_common(n, p, trials)
    if error_space < 1:
        raise ValueError(f"error_space must be >= 1, got {error_space}")
    rng = np.random.default_rng(seed)
    failures = 0
    remaining = trials
    while remaining > 0:
        chunk = min(remaining, CHUNK_TRIALS)
        errs = rng.random((chunk, n)) < p
        modes = rng.integers(0, error_space, size=(chunk, n))
        correct_counts = (~errs).sum(axis=1)
        # Per-trial histogram of wrong-answer modes, then the largest one.
        wrong_hist = np.zeros((chunk, error_space), dtype=np.int64)
        rows = np.repeat(np.arange(chunk), n)
        flat_modes = modes.ravel()
        flat_errs = errs.ravel()
        np.add.at(wrong_hist, (rows[flat_errs], flat_modes[flat_errs]), 1)
        top_wrong = wrong_hist.max(axis=1)
        failures += int((top_wrong >= correct_counts).sum())
        remaining -= chunk
    p_hat = failures / trials
    return ReliabilityResult.monte_carlo(
        p_sys=p_hat, ci_halfwidth=ci_halfwidth(p_hat, trials), trials=trials
    )


# =====================================================================
# Correlated errors (common-cause mixture)
# =====================================================================

def simulate_correlated(
    n: int,
    p: float,
    rho: float,
    error_space: int = 9,
    trials: int = 1_000_000,
    seed: int = 0,
) -> ReliabilityResult:
    """Aligned-error frequency under the per-trial common-cause mixture.

    With probability rho every agent in a trial emits one shared draw
    (wrong with probability p); otherwise agents err independently. The
    estimate must equal rho*p + (1-rho)*P_independent because this is the
    mixture the closed form integrates, not an approximation of it.
    """
    _check_common(n, p, trials)
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    k_min = math.ceil(n / 2)
    rng = np.random.default_rng(seed)
    failures = 0
    remaining = trials
    while remaining > 0:
        chunk = min(remaining, CHUNK_TRIALS)
        common = rng.random(chunk) < rho
        shared_err = rng.random(chunk) < p
        indep_counts = (rng.random((chunk, n)) < p).sum(axis=1)
        # Common-cause trials fail iff the one shared draw is wrong (all n
        # agents err together); independent trials need a k_min majority.
        failed = np.where(common, shared_err, indep_counts >= k_min)
        failures += int(failed.sum())
        remaining -= chunk
    p_hat = failures / trials
    return ReliabilityResult.monte_carlo(
        p_sys=p_hat, ci_halfwidth=ci_halfwidth(p_hat, trials), trials=trials
    )


# =====================================================================
# Workflow chains
# =====================================================================


@dataclass(frozen=True)
class WorkflowSim:
    """End-to-end success frequency of an m-action chain."""

    success: float
    ci_halfwidth: float
    trials: int
    m: int


def simulate_workflow(
    m: int,
    n: int,
    p: float,
    error_space: int = 9,
    trials: int = 100_000,
    seed: int = 0,
) -> WorkflowSim:
    """Chain m judged actions per trial; success means zero failed actions."""
    _check_common(n, p, trials)
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    k_min = math.ceil(n / 2)
    rng = np.random.default_rng(seed)
    successes = 0
    remaining = trials
    while remaining > 0:
        chunk = min(remaining, WORKFLOW_CHUNK_TRIALS)
        errors = (rng.random((chunk, m, n)) < p).sum(axis=2, dtype=np.int16)
        action_failed = errors >= k_min
        successes += int((~action_failed.any(axis=1)).sum())
        remaining -= chunk
    s_hat = successes / trials
    return WorkflowSim(
        success=s_hat, ci_halfwidth=ci_halfwidth(s_hat, trials), trials=trials, m=m
    )


# =====================================================================
# Dynamic scaling (real judge loop)
# =====================================================================


@dataclass(frozen=True)
class DynamicSim:
    """Measured behavior of confidence-gated escalation, with a paired
    fixed-n0 baseline judged from the same initial draws."""

    error: float
    escalation_rate: float
    mean_samples: float
    baseline_error: float
    forced_rate: float
    ci_halfwidth: float
    trials: int


def simulate_dynamic(
    n0: int,
    n_max: int,
    theta: float,
    p: float,
    error_space: int = 9,
    trials: int = 100_000,
    seed: int = 0,
    tau: float = 0.85,
) -> DynamicSim:
    """Run the full voting-judge loop per trial and measure its behavior.

    Every trial pre-draws n_max agent outputs; the dynamic arm judges the
    first n0 and follows escalation requests into the remaining draws,
    while the baseline arm judges the same first n0 with the ceiling at n0
    (a forced fixed-n vote). Errors count verdicts whose answer is not the
    correct text.
    """
    _check_common(n0, p, trials)
    if error_space < 1:
        raise ValueError(f"error_space must be >= 1, got {error_space}")
    if n_max < n0:
        raise ValueError(f"n_max ({n_max}) must be >= n0 ({n0})")
    rng = np.random.default_rng(seed)
    errs = rng.random((trials, n_max)) < p
    modes = rng.integers(1, error_space + 1, size=(trials, n_max))

    errors = 0
    baseline_errors = 0
    escalated_trials = 0
    forced_decisions = 0
    total_samples = 0
    for trial in range(trials):
        texts = [
            f"W{modes[trial, j]}" if errs[trial, j] else _CORRECT
            for j in range(n_max)
        ]
        baseline = judge_round(
            CandidateSet(task_id="sim", task_description="sim", texts=tuple(texts[:n0])),
            theta=theta,
            tau=tau,
            n_max=n0,
        )
        assert isinstance(baseline, Verdict)
        if baseline.answer != _CORRECT:
            baseline_errors += 1

        collected = n0
        round_index = 0
        while True:
            outcome = judge_round(
                CandidateSet(
                    task_id="sim",
                    task_description="sim",
                    texts=tuple(texts[:collected]),
                    round=round_index,
                ),
                theta=theta,
                tau=tau,
                n_max=n_max,
            )
            if isinstance(outcome, Verdict):
                break
            collected += outcome.add
            round_index += 1
        if outcome.answer != _CORRECT:
            errors += 1
        if round_index > 0:
            escalated_trials += 1
        if outcome.forced:
            forced_decisions += 1
        total_samples += collected

    error = errors / trials
    return DynamicSim(
        error=error,
        escalation_rate=escalated_trials / trials,
        mean_samples=total_samples / trials,
        baseline_error=baseline_errors / trials,
        forced_rate=forced_decisions / trials,
        ci_halfwidth=ci_halfwidth(error, trials),
        trials=trials,
    )
