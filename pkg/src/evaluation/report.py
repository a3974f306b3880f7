"""
Frontier table files: CSV / JSON emission, parsing and multi-seed aggregation.
"""
import json
import logging
from pathlib import Path
from typing import Literal

import pandas as pd

from src.evaluation.evaluate import EvalReport, FrontierTable
from src.io_utils import atomic_write_text

ReportFormat = Literal["csv", "json"]

CSV_COLUMNS = [
    "objective", "tied", "slice", "tau", "n", "exact_match", "mean_nfe",
    "legal_final_rate", "mean_rollout_violations", "seed",
]
METRIC_COLUMNS = ["exact_match", "mean_nfe", "legal_final_rate", "mean_rollout_violations"]
FLOAT_COLUMNS = ["tau", *METRIC_COLUMNS]
GROUP_COLUMNS = ["objective", "tied", "slice", "tau"]


class ReportFormatError(ValueError):
    """ Raised when a report file cannot be read back """


def report_stem(objective: str, tied: bool, slice: str) -> str:
    return f"{objective}_{'tied' if tied else 'untied'}_{slice}"


def _format_of(path: Path, fmt: ReportFormat | None) -> ReportFormat:
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in ("csv", "json"):
        raise ReportFormatError(f"Unknown report format for {path}")
    return fmt


def to_frame(table: FrontierTable) -> pd.DataFrame:
    frame = pd.DataFrame([{c: getattr(row, c) for c in CSV_COLUMNS} for row in table.rows], columns=CSV_COLUMNS)
    frame["tied"] = frame["tied"].map(lambda v: "true" if v else "false")
    return frame


def table_to_csv(table: FrontierTable) -> str:
    return to_frame(table).to_csv(index=False, float_format="%.6f", lineterminator="\n")


def table_to_json(table: FrontierTable) -> str:
    rows = []
    for row in table.rows:
        item = {c: getattr(row, c) for c in CSV_COLUMNS}
        for column in (*FLOAT_COLUMNS, "mean_cells_per_step"):
            item[column] = round(float(getattr(row, column)), 6)
        rows.append(item)
    return json.dumps({"rows": rows}, indent=2, sort_keys=True) + "\n"


def emit_report(table: FrontierTable, path: Path, fmt: ReportFormat | None = None) -> Path:
    fmt = _format_of(path, fmt)
    content = table_to_csv(table) if fmt == "csv" else table_to_json(table)
    atomic_write_text(path, content)
    logging.info(f"Wrote {len(table)} report rows to {path}")
    return path


def _row_from_mapping(item: dict) -> EvalReport:
    tied = item["tied"]
    if isinstance(tied, str):
        tied = tied.strip().lower() == "true"
    return EvalReport(
        objective=str(item["objective"]),
        tied=bool(tied),
        slice=str(item["slice"]),
        tau=float(item["tau"]),
        n=int(item["n"]),
        exact_match=float(item["exact_match"]),
        mean_nfe=float(item["mean_nfe"]),
        legal_final_rate=float(item["legal_final_rate"]),
        mean_rollout_violations=float(item["mean_rollout_violations"]),
        seed=int(item["seed"]),
        mean_cells_per_step=float(item.get("mean_cells_per_step", 0.0)),
    )


def parse_report(path: Path) -> FrontierTable:
    fmt = _format_of(path, None)
    try:
        if fmt == "csv":
            frame = pd.read_csv(path, dtype={"objective": str, "tied": str, "slice": str})
            missing = set(CSV_COLUMNS) - set(frame.columns)
            if missing:
                raise ReportFormatError(f"{path}: missing columns {sorted(missing)}")
            items = frame.to_dict(orient="records")
        else:
            items = json.loads(path.read_text(encoding="utf-8"))["rows"]
        return FrontierTable([_row_from_mapping(item) for item in items])
    except ReportFormatError:
        raise
    except (KeyError, ValueError) as e:
        raise ReportFormatError(f"{path}: {e}") from e


def aggregate_seeds(tables: list[FrontierTable]) -> pd.DataFrame:
    """
    Mean and sample standard deviation (n - 1) over seeds for every (objective, tied, slice, tau).
    Each metric gets `<metric>_mean`, `<metric>_sd` and a `<metric>` column holding "mean ± sd".
    A single seed has no sample deviation; its sd is NaN.
    """
    frames = [to_frame(table) for table in tables if len(table)]
    if not frames:
        return pd.DataFrame(columns=[*GROUP_COLUMNS, "seeds"])
    frame = pd.concat(frames, ignore_index=True)
    grouped = frame.groupby(GROUP_COLUMNS, sort=True)
    out = grouped.size().rename("seeds").reset_index()
    for metric in METRIC_COLUMNS:
        stats = grouped[metric].agg(["mean", "std"]).reset_index(drop=True)
        out[f"{metric}_mean"] = stats["mean"]
        out[f"{metric}_sd"] = stats["std"]
        out[metric] = [f"{m:.6f} ± {s:.6f}" for m, s in zip(stats["mean"], stats["std"])]
    return out


def emit_aggregate(frame: pd.DataFrame, path: Path) -> Path:
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.6f", lineterminator="\n"))
    return path


# strongest first: exact match should not increase along this chain
EXACT_MATCH_ORDER = ("relay", "relay_sg", "rollout", "mlm")
# fewest forwards first
NFE_ORDER = ("relay", "relay_sg")
ORDERING_COLUMNS = ["tied", "slice", "tau", "objectives", "exact_match_order", "nfe_order"]


def _holds(values: pd.Series, order: tuple[str, ...], descending: bool) -> bool:
    chain = [values[objective] for objective in order if objective in values.index]
    pairs = list(zip(chain, chain[1:]))
    return all(a >= b for a, b in pairs) if descending else all(a <= b for a, b in pairs)


def ordering_checks(frame: pd.DataFrame) -> pd.DataFrame:
    """
    Compares objectives within every (tied, slice, tau) group of an aggregate frame:
    whether mean exact match falls along relay, relay_sg, rollout, mlm, and whether relay
    needs no more forwards than relay_sg. Ties count as holding, absent objectives are skipped.
    """
    if frame.empty:
        return pd.DataFrame(columns=ORDERING_COLUMNS)
    rows = []
    for (tied, slice_, tau), group in frame.groupby(["tied", "slice", "tau"], sort=True):
        by_objective = group.set_index("objective")
        rows.append({
            "tied": tied,
            "slice": slice_,
            "tau": tau,
            "objectives": len(by_objective),
            "exact_match_order": _holds(by_objective["exact_match_mean"], EXACT_MATCH_ORDER, descending=True),
            "nfe_order": _holds(by_objective["mean_nfe_mean"], NFE_ORDER, descending=False),
        })
    return pd.DataFrame(rows, columns=ORDERING_COLUMNS)


def orderings_path_for(aggregate_path: Path) -> Path:
    return aggregate_path.with_name(f"{aggregate_path.stem}_orderings.csv")
