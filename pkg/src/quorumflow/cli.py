"""
Command-line entry point: calculator, Monte Carlo runner, engine runner.

Four subcommands cover the operator surface:

  calc      closed-form reliability quantities (error rates, DPMO, agent
            counts, correlation and chain-length bounds), the reporting
            grid, and the quoted-figure cross-check table
  simulate  Monte Carlo estimators with 3-sigma band checks against the
            closed forms; a missed band is a nonzero exit
  run       execute a workflow file against a config file, print the sink
            task's verified answer, persist the event log
  resume    continue a run from its event log; an empty log starts fresh,
            a finished log prints its recorded answer without executing

Every number this module prints is produced by the reliability or
simulator module — the CLI layer owns argument parsing, record
formatting (table/csv/jsonl), and exit codes only.

Exit codes
==========
0  success
2  validation failure (arguments, workflow, or configuration)
3  execution failure (aborted run, missed simulation band)
4  storage failure (missing, torn, or corrupt event log)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from typing import Any, Optional, Sequence, TextIO

from .config import (
    ConfigError,
    build_backends,
    build_embedder,
    build_registry,
    load_config,
)
from .engine import EngineError, RunAbortedError, RunResult, continue_run, run_workflow
from .graph import SamplingConfig, WorkflowValidationError, load_workflow
from .reliability import (
    SIX_SIGMA_TARGET,
    consensus_error,
    correlated_error,
    compound_success,
    dpmo,
    max_correlation,
    max_workflow_length,
    min_agents_for_target,
    reference_claim_report,
)
from .simulator import (
    simulate_consensus,
    simulate_correlated,
    simulate_dynamic,
    simulate_plurality,
    simulate_workflow,
    three_sigma_band,
)
from .state import StorageError, recover

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ABORT = 3
EXIT_STORAGE = 4

FORMATS = ("table", "csv", "jsonl")

# Reporting-grid axes (ensemble sizes x per-agent error rates). Axes are
# interface inputs; every cell value is computed by the reliability module.
GRID_AGENTS = (1, 3, 5, 7, 9, 11, 13)
GRID_ERROR_RATES = (0.01, 0.02, 0.05, 0.10)

_DEFAULTS = SamplingConfig()


class CliValidationError(ValueError):
    """Bad argument combination caught before any work starts."""


# =====================================================================
# Record emission
# =====================================================================


def _format_cell(value: Any) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return format(value, ".12g")
    if value is None:
        return ""
    return str(value)


def emit_records(records: list[dict[str, Any]], fmt: str, out: TextIO) -> None:
    """Render result records as an aligned table, CSV, or JSON lines."""
    if not records:
        return
    columns: list[str] = []
    for record in records:
        for key in record:
            if key not in columns:
                columns.append(key)
    if fmt == "jsonl":
        for record in records:
            out.write(json.dumps(record, sort_keys=True) + "\n")
    elif fmt == "csv":
        writer = csv.DictWriter(out, fieldnames=columns, restval="")
        writer.writeheader()
        for record in records:
            writer.writerow({key: _format_cell(value) for key, value in record.items()})
    else:
        rows = [[_format_cell(record.get(col)) for col in columns] for record in records]
        widths = [
            max(len(col), *(len(row[i]) for row in rows)) for i, col in enumerate(columns)
        ]
        out.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip() + "\n")
        for row in rows:
            out.write("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n")


# =====================================================================
# calc
# =====================================================================


def cmd_calc(args: argparse.Namespace) -> int:
    records: list[dict[str, Any]] = []

    if args.n is not None and args.p is not None:
        p_sys = consensus_error(args.n, args.p)
        records.append({"quantity": "p_sys", "n": args.n, "p": args.p, "value": p_sys})
        records.append({"quantity": "dpmo", "n": args.n, "p": args.p, "value": dpmo(p_sys)})

    if args.target is not None and args.p is not None:
        records.append(
            {
                "quantity": "n_star",
                "p": args.p,
                "target": args.target,
                "value": min_agents_for_target(args.p, args.target),
            }
        )
        if args.n is not None:
            bound = max_correlation(args.n, args.p, args.target)
            records.append(
                {
                    "quantity": "rho_max",
                    "n": args.n,
                    "p": args.p,
                    "target": args.target,
                    "value": bound.rho_max,
                    "saturated": bound.saturated,
                }
            )

    if args.reliability is not None:
        if args.n is not None and args.p is not None:
            action_error = consensus_error(args.n, args.p)
        elif args.target is not None:
            action_error = args.target
        else:
            raise CliValidationError(
                "--reliability needs --n/--p (ensemble action error) or --target"
            )
        records.append(
            {
                "quantity": "m_max",
                "reliability": args.reliability,
                "action_error": action_error,
                "value": max_workflow_length(args.reliability, action_error),
            }
        )

    if args.grid:
        for p in GRID_ERROR_RATES:
            for n in GRID_AGENTS:
                p_sys = consensus_error(n, p)
                records.append(
                    {"quantity": "p_sys", "n": n, "p": p, "value": p_sys, "dpmo": dpmo(p_sys)}
                )

    if args.claims:
        target = args.target if args.target is not None else SIX_SIGMA_TARGET
        for row in reference_claim_report(target):
            record: dict[str, Any] = {"quantity": row["quantity"]}
            record.update(row["args"])
            record["claimed"] = row["claimed"]
            record["computed"] = row["computed"]
            record["flag"] = "DISCREPANT" if row["discrepant"] else ""
            records.append(record)

    if not records:
        raise CliValidationError(
            "nothing to compute: pass --n/--p, --p/--target, --grid, or --claims"
        )
    emit_records(records, args.format, sys.stdout)
    return EXIT_OK


# =====================================================================
# simulate
# =====================================================================


def _mc_kwargs(args: argparse.Namespace) -> dict[str, Any]:
    kwargs: dict[str, Any] = {}
    if args.trials is not None:
        kwargs["trials"] = args.trials
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if getattr(args, "error_space", None) is not None:
        kwargs["error_space"] = args.error_space
    return kwargs


def _banded(record: dict[str, Any], estimate: float, target: float, trials: int) -> bool:
    """Attach the 3-sigma band columns; returns True when the band is missed."""
    band = three_sigma_band(target, trials)
    within = abs(estimate - target) <= band
    record["target"] = target
    record["band_3sigma"] = band
    record["within_band"] = within
    return not within


def cmd_simulate(args: argparse.Namespace) -> int:
    kwargs = _mc_kwargs(args)
    records: list[dict[str, Any]] = []
    missed = False

    if args.op == "consensus":
        result = simulate_consensus(args.n, args.p, **kwargs)
        record = {
            "op": "consensus",
            "n": args.n,
            "p": args.p,
            "trials": result.trials,
            "estimate": result.p_sys,
            "ci99": result.ci_halfwidth,
        }
        missed = _banded(record, result.p_sys, consensus_error(args.n, args.p), result.trials)
        records.append(record)
    elif args.op == "plurality":
        result = simulate_plurality(args.n, args.p, **kwargs)
        record = {
            "op": "plurality",
            "n": args.n,
            "p": args.p,
            "error_space": kwargs.get("error_space"),
            "trials": result.trials,
            "estimate": result.p_sys,
            "ci99": result.ci_halfwidth,
            "aligned_headline": consensus_error(args.n, args.p),
        }
        # A closed-form target exists only when every wrong answer collides.
        if kwargs.get("error_space") == 1:
            missed = _banded(
                record, result.p_sys, consensus_error(args.n, args.p), result.trials
            )
        records.append(record)
    elif args.op == "correlated":
        result = simulate_correlated(args.n, args.p, args.rho, **kwargs)
        record = {
            "op": "correlated",
            "n": args.n,
            "p": args.p,
            "rho": args.rho,
            "trials": result.trials,
            "estimate": result.p_sys,
            "ci99": result.ci_halfwidth,
        }
        missed = _banded(
            record, result.p_sys, correlated_error(args.n, args.p, args.rho), result.trials
        )
        records.append(record)
    elif args.op == "workflow":
        result = simulate_workflow(args.m, args.n, args.p, **kwargs)
        record = {
            "op": "workflow",
            "m": args.m,
            "n": args.n,
            "p": args.p,
            "trials": result.trials,
            "estimate": result.success,
            "ci99": result.ci_halfwidth,
        }
        target = compound_success(consensus_error(args.n, args.p), args.m)
        missed = _banded(record, result.success, target, result.trials)
        records.append(record)
    else:  # dynamic
        if args.tau is not None:
            kwargs["tau"] = args.tau
        result = simulate_dynamic(args.n0, args.nmax, args.theta, args.p, **kwargs)
        records.append(
            {
                "op": "dynamic",
                "n0": args.n0,
                "n_max": args.nmax,
                "theta": args.theta,
                "p": args.p,
                "trials": result.trials,
                "error": result.error,
                "baseline_error": result.baseline_error,
                "escalation_rate": result.escalation_rate,
                "forced_rate": result.forced_rate,
                "mean_samples": result.mean_samples,
                "ci99": result.ci_halfwidth,
            }
        )

    emit_records(records, args.format, sys.stdout)
    if missed:
        print(
            "simulation estimate missed its 3-sigma band around the closed form",
            file=sys.stderr,
        )
        return EXIT_ABORT
    return EXIT_OK


# =====================================================================
# run / resume
# =====================================================================


def _read_file(path: str, what: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return handle.read()
    except OSError as exc:
        raise CliValidationError(f"cannot read {what} file {path!r}: {exc}") from exc


def _execute_fresh(
    workflow_path: Optional[str],
    config_path: Optional[str],
    seed_flag: Optional[int],
    log_flag: Optional[str],
    run_id_flag: Optional[str],
) -> RunResult:
    if not workflow_path or not config_path:
        raise CliValidationError("a fresh run needs both a workflow file and a config file")
    config = load_config(_read_file(config_path, "config"))
    log_path = log_flag or config.log_path
    if not log_path:
        raise CliValidationError("no log path: pass --log or set run.log_path in the config")
    seed = seed_flag if seed_flag is not None else config.seed
    graph = load_workflow(_read_file(workflow_path, "workflow"), defaults=config.sampling)
    backends = build_backends(config.document)
    registry, _ = build_registry(config.document)
    embedder = build_embedder(config.document)
    return run_workflow(
        graph,
        backends,
        registry,
        log_path,
        run_seed=seed,
        run_id=run_id_flag or config.run_id,
        config_doc=config.document,
        embedder=embedder,
    )


def _report_run(result: RunResult) -> int:
    print(
        f"run {result.run_id}: {len(result.verified)} tasks verified, "
        f"{result.events_written} events -> {result.log_path}",
        file=sys.stderr,
    )
    print(result.final_answer)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    result = _execute_fresh(args.workflow, args.config, args.seed, args.log, args.run_id)
    return _report_run(result)


def cmd_resume(args: argparse.Namespace) -> int:
    recovered = recover(args.log)
    if recovered.next_seq == 0:
        # Nothing durable yet: behave exactly like a fresh run on this path.
        result = _execute_fresh(args.workflow, args.config, args.seed, args.log, None)
        return _report_run(result)
    if args.workflow:
        print(
            "note: log already holds a run; ignoring --workflow "
            "(the task graph comes from the log)",
            file=sys.stderr,
        )
    # --config may override the embedded document so an aborted run can be
    # resumed against repaired backend wiring; run state stays log-derived.
    if args.config:
        document = load_config(_read_file(args.config, "config")).document
    else:
        document = recovered.config_doc or {}
    backends = build_backends(document)
    registry, _ = build_registry(document)
    embedder = build_embedder(document)
    result = continue_run(args.log, recovered, backends, registry, embedder=embedder)
    return _report_run(result)


# =====================================================================
# Parser
# =====================================================================


def _trials_arg(text: str) -> int:
    try:
        value = int(float(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid trial count {text!r}") from exc
    if value < 1:
        raise argparse.ArgumentTypeError("trials must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quorumflow",
        description="Redundant-execution workflow engine and reliability calculator.",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log progress details to stderr"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    calc = sub.add_parser("calc", help="closed-form reliability quantities")
    calc.add_argument("--n", type=int, help="ensemble size (odd)")
    calc.add_argument("--p", type=float, help="per-agent error rate")
    calc.add_argument("--target", type=float, help="system error target (for n*, rho_max)")
    calc.add_argument(
        "--reliability", type=float, help="workflow reliability floor (for m_max)"
    )
    calc.add_argument("--grid", action="store_true", help="emit the n x p reporting grid")
    calc.add_argument(
        "--claims", action="store_true", help="cross-check quoted figures, flag discrepancies"
    )
    calc.add_argument("--format", choices=FORMATS, default="table")
    calc.set_defaults(handler=cmd_calc)

    simulate = sub.add_parser("simulate", help="Monte Carlo estimators with band checks")
    mc_parent = argparse.ArgumentParser(add_help=False)
    mc_parent.add_argument("--trials", type=_trials_arg, help="trial count (accepts 1e6)")
    mc_parent.add_argument("--seed", type=int, help="deterministic stream seed")
    mc_parent.add_argument("--format", choices=FORMATS, default="table")
    ops = simulate.add_subparsers(dest="op", required=True)

    consensus = ops.add_parser("consensus", parents=[mc_parent], help="aligned-error frequency")
    consensus.add_argument("--n", type=int, default=_DEFAULTS.n)
    consensus.add_argument("--p", type=float, required=True)
    consensus.add_argument("--error-space", dest="error_space", type=int)

    plurality = ops.add_parser(
        "plurality", parents=[mc_parent], help="plurality-vote error with split wrong answers"
    )
    plurality.add_argument("--n", type=int, default=_DEFAULTS.n)
    plurality.add_argument("--p", type=float, required=True)
    plurality.add_argument("--error-space", dest="error_space", type=int)

    correlated = ops.add_parser(
        "correlated", parents=[mc_parent], help="common-cause mixture error"
    )
    correlated.add_argument("--n", type=int, default=_DEFAULTS.n)
    correlated.add_argument("--p", type=float, required=True)
    correlated.add_argument("--rho", type=float, required=True)
    correlated.add_argument("--error-space", dest="error_space", type=int)

    workflow = ops.add_parser(
        "workflow", parents=[mc_parent], help="m-action chain success frequency"
    )
    workflow.add_argument("--m", type=int, required=True)
    workflow.add_argument("--n", type=int, default=_DEFAULTS.n)
    workflow.add_argument("--p", type=float, required=True)
    workflow.add_argument("--error-space", dest="error_space", type=int)

    dynamic = ops.add_parser(
        "dynamic", parents=[mc_parent], help="confidence-gated escalation behavior"
    )
    dynamic.add_argument("--n0", type=int, default=_DEFAULTS.n)
    dynamic.add_argument("--nmax", type=int, default=_DEFAULTS.n_max)
    dynamic.add_argument("--theta", type=float, default=_DEFAULTS.theta)
    dynamic.add_argument("--tau", type=float)
    dynamic.add_argument("--p", type=float, required=True)
    dynamic.add_argument("--error-space", dest="error_space", type=int)
    simulate.set_defaults(handler=cmd_simulate)

    run = sub.add_parser("run", help="execute a workflow file against a config file")
    run.add_argument("workflow", help="workflow JSON file")
    run.add_argument("config", help="run configuration JSON file")
    run.add_argument("--seed", type=int, help="override the config's run seed")
    run.add_argument("--log", help="override the config's event-log path")
    run.add_argument("--run-id", dest="run_id", help="override the generated run id")
    run.set_defaults(handler=cmd_run)

    resume = sub.add_parser("resume", help="continue a run from its event log")
    resume.add_argument("log", help="event-log path")
    resume.add_argument(
        "--workflow", help="workflow file (only used when the log is empty)"
    )
    resume.add_argument(
        "--config",
        help="config file (fresh start on an empty log, or backend override on resume)",
    )
    resume.add_argument("--seed", type=int, help="seed for a fresh start on an empty log")
    resume.set_defaults(handler=cmd_resume)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except StorageError as exc:
        print(f"storage error: {exc}", file=sys.stderr)
        return EXIT_STORAGE
    except (RunAbortedError, EngineError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (CliValidationError, ConfigError, WorkflowValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
