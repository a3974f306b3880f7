"""
Command-line entry point: python -m src.main <command> [flags]

Exit codes: 0 success, 1 domain or runtime failure, 2 usage or configuration error.
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from src.config import ConfigError, LoggingConfig, Objective, Settings, Slice, configure_logging, load_settings
from src.evaluation.evaluate import FrontierTable, RunLabels, generate_all, summarize, sweep, tier_breakdown
from src.evaluation.report import (
    aggregate_seeds,
    emit_aggregate,
    emit_report,
    ordering_checks,
    orderings_path_for,
    parse_report,
    report_stem,
)
from src.metrics import PrometheusLocalRegistry
from src.model.checkpoint import load_checkpoint
from src.model.transformer import RelayTransformer, allocated_parameters, parameter_count
from src.sudoku.board import PuzzleRecord
from src.sudoku.dataset import (
    annotate_file,
    basic_only_filter,
    cohort_filter,
    load_records,
    sidecar_path_for,
    write_cohort,
)
from src.training.gradcheck import grad_check
from src.training.trainer import run_training

METRICS_FILE_NAME = "metrics.prom"
DEFAULT_EVAL_TAU = 0.15


def _bool_flag(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered not in ("true", "false"):
        raise argparse.ArgumentTypeError("expected true or false")
    return lowered == "true"


def _tau_list(value: str) -> list[float]:
    try:
        taus = [float(part) for part in value.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid threshold list {value!r}") from e
    if not taus:
        raise argparse.ArgumentTypeError("threshold list is empty")
    return taus


def _slice_list(value: str) -> list[Slice]:
    try:
        slices = [Slice(part.strip()) for part in value.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid slice list {value!r}") from e
    if not slices:
        raise argparse.ArgumentTypeError("slice list is empty")
    return list(dict.fromkeys(slices))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or flat key = value config file")
    common.add_argument("--seed", type=int, help="Seed of every random stream")
    common.add_argument("--objective", choices=[o.value for o in Objective])
    common.add_argument("--tied", type=_bool_flag, help="Tie embedding and unembedding (true/false)")
    common.add_argument("--K", type=int, help="Unroll horizon of a rollout window")
    common.add_argument("--tau", type=float, help="Decoding threshold (eval)")
    common.add_argument("--taus", type=_tau_list, help="Comma-separated thresholds (sweep)")
    common.add_argument("--data", type=Path, help="Puzzle file")
    common.add_argument("--annotations", type=Path, help="Annotation sidecar of --data")
    common.add_argument("--checkpoint", type=Path)
    common.add_argument("--out", type=Path, help="Output file or directory")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--slice", type=_slice_list,
                        help=f"Comma-separated evaluation slices ({', '.join(s.value for s in Slice)})")
    common.add_argument("--n", type=int, help="Records taken in dataset order")

    parser = argparse.ArgumentParser(prog="relay-mdm", description="Relay masked diffusion on Sudoku")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("annotate", parents=[common], help="Solve puzzles and write the annotation sidecar")
    cohort = commands.add_parser("cohort", parents=[common], help="Write the deduction-only cohort")
    cohort.add_argument("--basic-only", action="store_true", help="Write the Basic-strategies slice instead")
    train = commands.add_parser("train", parents=[common], help="Train one objective")
    train.add_argument("--resume", action="store_true", help="Continue from the checkpoint in --out")
    commands.add_parser("eval", parents=[common], help="Evaluate a checkpoint at one threshold")
    commands.add_parser("sweep", parents=[common], help="Evaluate a checkpoint over a threshold set")
    commands.add_parser("gradcheck", parents=[common], help="Finite-difference check of the rollout gradients")
    commands.add_parser("inspect", parents=[common], help="Report the parameter count")
    aggregate = commands.add_parser("aggregate", parents=[common], help="Mean and sd of report files over seeds")
    aggregate.add_argument("reports", nargs="+", type=Path)
    return parser


def resolve_settings(args: argparse.Namespace) -> Settings:
    """ Config file first, flags win """
    settings = load_settings(args.config)
    evaluation = {"n": args.n, "slice": args.slice[0] if args.slice else None}
    if args.taus is not None:
        evaluation["taus"] = args.taus
    return settings.with_overrides(
        model={"tie_embeddings": args.tied},
        train={"objective": args.objective, "K": args.K, "seed": args.seed},
        evaluation=evaluation,
    )


def _require(parser: argparse.ArgumentParser, args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{name}" for name in names if getattr(args, name) is None]
    if missing:
        parser.error(f"{args.command} requires {', '.join(missing)}")


def _annotations_for(args: argparse.Namespace) -> Path | None:
    if args.annotations is not None:
        return args.annotations
    sidecar = sidecar_path_for(args.data)
    return sidecar if sidecar.is_file() else None


def _write_metrics(out_dir: Path) -> None:
    PrometheusLocalRegistry.write_textfile(out_dir / METRICS_FILE_NAME)


# ---- Commands ----
def annotate_cmd(args: argparse.Namespace, settings: Settings) -> int:
    out = args.out or sidecar_path_for(args.data)
    summary = annotate_file(args.data, out, workers=args.workers)
    print(f"records: {summary.total} annotated: {summary.annotated} reused: {summary.reused} "
          f"skipped: {summary.skipped}")
    return 0


def cohort_cmd(args: argparse.Namespace, settings: Settings) -> int:
    records = load_records(args.data, _annotations_for(args))
    if args.basic_only:
        selected = basic_only_filter(records, args.n)
    else:
        selected = cohort_filter(records, args.n if args.n is not None else settings.evaluation.n)
    path, sidecar = write_cohort(args.out, selected)
    print(f"cohort: {len(selected)} of {len(records)} records -> {path} ({sidecar.name})")
    return 0


def train_cmd(args: argparse.Namespace, settings: Settings) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    summary = run_training(settings, args.data, args.out, _annotations_for(args), resume=args.resume)
    _write_metrics(args.out)
    print(f"step: {summary.step} checkpoint: {summary.checkpoint}")
    if summary.validation is not None:
        for row in summary.validation.rows:
            print(f"tau={row.tau:.2f} exact_match={row.exact_match:.6f} mean_nfe={row.mean_nfe:.6f}")
    return 0


def _evaluation_records(args: argparse.Namespace, settings: Settings, slice_: Slice) -> list[PuzzleRecord]:
    n = settings.evaluation.n
    if slice_ is Slice.DEDUCTION_ONLY:
        return cohort_filter(load_records(args.data, _annotations_for(args)), n)
    return load_records(args.data, _annotations_for(args), limit=n)


def decodes_with_relay(model: RelayTransformer, objective: str) -> bool:
    """ Checkpoints of mlm and rollout runs decode without the relay term """
    try:
        return model.cfg.relay_enabled and Objective(objective).uses_relay
    except ValueError:
        return model.cfg.relay_enabled


def _evaluate_slice(args: argparse.Namespace, settings: Settings, model: RelayTransformer, labels: RunLabels,
                    taus: list[float], use_relay: bool, out: Path) -> FrontierTable:
    records = _evaluation_records(args, settings, Slice(labels.slice))
    batch_size = settings.evaluation.batch_size
    stem = report_stem(labels.objective, labels.tied, labels.slice)

    annotated = all(record.annotation is not None for record in records)
    if len(taus) == 1 and annotated:
        results = generate_all(model, records, taus[0], batch_size, use_relay=use_relay)
        table = FrontierTable([summarize(results, records, taus[0], labels)])
        tiers = tier_breakdown(results, records, taus[0], labels)
        strata = FrontierTable([dataclasses.replace(report, slice=f"tier_{tier}") for tier, report in tiers.items()])
        emit_report(strata, out / f"{stem}_tiers.csv")
    else:
        table = sweep(model, records, taus, labels, batch_size, use_relay=use_relay)

    emit_report(table, out / f"{stem}.csv")
    emit_report(table, out / f"{stem}.json")
    return table


def _evaluate(args: argparse.Namespace, settings: Settings, taus: list[float]) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    model = model.to(settings.train.device).eval()
    objective = str(meta.get("objective", settings.train.objective.value))
    use_relay = decodes_with_relay(model, objective)
    seed = args.seed if args.seed is not None else int(meta.get("seed", settings.train.seed))
    out = args.out or Path("results")
    out.mkdir(parents=True, exist_ok=True)

    for slice_ in args.slice or [settings.evaluation.slice]:
        labels = RunLabels(objective=objective, tied=model.cfg.tie_embeddings, slice=slice_.value, seed=seed)
        table = _evaluate_slice(args, settings, model, labels, taus, use_relay, out)
        for row in table.rows:
            print(f"{row.slice} tau={row.tau:.2f} n={row.n} exact_match={row.exact_match:.6f} "
                  f"mean_nfe={row.mean_nfe:.6f} legal_final_rate={row.legal_final_rate:.6f} "
                  f"mean_rollout_violations={row.mean_rollout_violations:.6f}")
    _write_metrics(out)
    return 0


def eval_cmd(args: argparse.Namespace, settings: Settings) -> int:
    return _evaluate(args, settings, [args.tau if args.tau is not None else DEFAULT_EVAL_TAU])


def sweep_cmd(args: argparse.Namespace, settings: Settings) -> int:
    return _evaluate(args, settings, settings.evaluation.taus)


def gradcheck_cmd(args: argparse.Namespace, settings: Settings) -> int:
    cfg = settings.train
    K = args.K if args.K is not None else cfg.K
    report = grad_check(cfg.objective, K, seed=cfg.seed, tied=settings.model.tie_embeddings)
    print(f"objective: {report.objective} K: {report.K} coordinates: {report.coordinates}")
    print(f"max relative error: {report.max_relative_error:.3e} ({report.worst_parameter})")
    if report.bptt_error is not None:
        print(f"bptt decomposition error: {report.bptt_error:.3e}")
        print(f"adjoint error: {report.adjoint_error:.3e}")
    return 0 if report.passed else 1


def inspect_cmd(args: argparse.Namespace, settings: Settings) -> int:
    if args.checkpoint is not None:
        model, meta = load_checkpoint(args.checkpoint)
        print(f"params: {allocated_parameters(model)}")
        for key in sorted(meta):
            print(f"{key}: {meta[key]}")
    else:
        print(f"params: {parameter_count(settings.model)}")
    return 0


def aggregate_cmd(args: argparse.Namespace, settings: Settings) -> int:
    frame = aggregate_seeds([parse_report(path) for path in args.reports])
    if args.out is not None:
        emit_aggregate(frame, args.out)
    print(frame.to_string(index=False))
    if not frame.empty and frame["objective"].nunique() > 1:
        checks = ordering_checks(frame)
        if args.out is not None:
            emit_aggregate(checks, orderings_path_for(args.out))
        for row in checks.itertuples(index=False):
            print(f"orderings {row.slice} tied={row.tied} tau={row.tau:.2f}: "
                  f"exact_match {'holds' if row.exact_match_order else 'violated'}, "
                  f"mean_nfe {'holds' if row.nfe_order else 'violated'}")
            if not (row.exact_match_order and row.nfe_order):
                logging.warning(f"Objective ordering violated at slice={row.slice} tied={row.tied} tau={row.tau}")
    return 0


COMMANDS = {
    "annotate": (annotate_cmd, ("data",)),
    "cohort": (cohort_cmd, ("data", "out")),
    "train": (train_cmd, ("data", "out")),
    "eval": (eval_cmd, ("checkpoint", "data")),
    "sweep": (sweep_cmd, ("checkpoint", "data")),
    "gradcheck": (gradcheck_cmd, ()),
    "inspect": (inspect_cmd, ()),
    "aggregate": (aggregate_cmd, ()),
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        command, required = COMMANDS[args.command]
        _require(parser, args, *required)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(LoggingConfig())
    try:
        settings = resolve_settings(args)
    except (ConfigError, ValidationError) as e:
        logging.error(f"Configuration error: {e}")
        return 2
    configure_logging(settings.logging)

    try:
        return command(args, settings)
    except (ConfigError, ValidationError) as e:
        logging.error(f"Configuration error: {e}")
        return 2
    except Exception as e:
        logging.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
