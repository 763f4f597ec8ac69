"""Comparison reports recomputed from round streams.

Every number in the CSV is a pure fold over rounds.jsonl files: best round by
validation loss, ledger totals by summing deltas. Nothing is read from
summary.json, so reports stay exactly recomputable from the per-round logs.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .runio import ROUNDS_FILE, load_run_lines

CSV_COLUMNS = [
    "method",
    "seeds",
    "communications_mean",
    "communications_std",
    "best_val_loss_mean",
    "best_val_loss_std",
    "best_val_accuracy_mean",
    "best_val_accuracy_std",
    "final_val_loss_mean",
    "final_val_loss_std",
    "final_val_accuracy_mean",
    "final_val_accuracy_std",
    "config_hash",
]


@dataclass(frozen=True)
class RunStats:
    method: str
    seed: int
    config_hash: str
    rounds_run: int
    best_round: int | None
    best_val_loss: float | None
    best_val_accuracy: float | None
    final_val_loss: float | None
    final_val_accuracy: float | None
    communications_total: int
    communications_to_best: int


def stats_from_records(header: dict, records: list[dict]) -> RunStats:
    ordinary = [r for r in records if not r["is_intermediate"]]
    best = None
    for rec in ordinary:
        if rec["val_loss"] is None:
            continue
        if best is None or rec["val_loss"] < best["val_loss"]:
            best = rec

    comms_total = sum(r["ledger_delta"] for r in records)
    comms_to_best = 0
    if best is not None:
        for rec in records:
            comms_to_best += rec["ledger_delta"]
            if not rec["is_intermediate"] and rec["round"] == best["round"]:
                break

    last = ordinary[-1] if ordinary else None
    return RunStats(
        method=header["method"],
        seed=header["seed"],
        config_hash=header["config_hash"],
        rounds_run=len(ordinary),
        best_round=best["round"] if best else None,
        best_val_loss=best["val_loss"] if best else None,
        best_val_accuracy=best["val_accuracy"] if best else None,
        final_val_loss=last["val_loss"] if last else None,
        final_val_accuracy=last["val_accuracy"] if last else None,
        communications_total=comms_total,
        communications_to_best=comms_to_best,
    )


def find_run_files(paths: list[str | Path]) -> list[Path]:
    found: list[Path] = []
    for p in paths:
        p = Path(p)
        if p.is_file() and p.name == ROUNDS_FILE:
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(p.rglob(ROUNDS_FILE)))
        else:
            raise ConfigurationError(f"no run data at {p}")
    if not found:
        raise ConfigurationError("no rounds.jsonl files found under the given paths")
    return found


def collect_stats(paths: list[str | Path]) -> list[RunStats]:
    return [stats_from_records(*load_run_lines(f)) for f in find_run_files(paths)]


def _mean_std(values: list[float]) -> tuple[str, str]:
    clean = [v for v in values if v is not None]
    if not clean:
        return "", ""
    mean = f"{statistics.mean(clean):.6f}"
    std = f"{statistics.stdev(clean):.6f}" if len(clean) >= 2 else ""
    return mean, std


def build_report(stats: list[RunStats], comms_mode: str = "best") -> list[dict[str, str]]:
    """One row per method with mean +- std over its seeds.

    `comms_mode` selects whether the communications columns count exchanges up
    to the best validation round ("best") or over the whole run ("total").
    """
    if comms_mode not in ("best", "total"):
        raise ConfigurationError("comms_mode must be 'best' or 'total'")

    by_method: dict[str, list[RunStats]] = {}
    for s in stats:
        by_method.setdefault(s.method, []).append(s)

    rows: list[dict[str, str]] = []
    for method in sorted(by_method):
        group = sorted(by_method[method], key=lambda s: s.seed)
        comms = [
            float(s.communications_to_best if comms_mode == "best" else s.communications_total)
            for s in group
        ]
        row: dict[str, str] = {"method": method, "seeds": str(len(group))}
        row["communications_mean"], row["communications_std"] = _mean_std(comms)
        for column, attr in [
            ("best_val_loss", "best_val_loss"),
            ("best_val_accuracy", "best_val_accuracy"),
            ("final_val_loss", "final_val_loss"),
            ("final_val_accuracy", "final_val_accuracy"),
        ]:
            mean, std = _mean_std([getattr(s, attr) for s in group])
            row[f"{column}_mean"] = mean
            row[f"{column}_std"] = std
        hashes = sorted({s.config_hash for s in group})
        row["config_hash"] = hashes[0] if len(hashes) == 1 else ";".join(hashes)
        rows.append(row)
    return rows


def write_report_csv(rows: list[dict[str, str]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path
