"""Run artifacts on disk.

One run directory holds `rounds.jsonl` (a config-echo line followed by one
line per round record, intermediate collections included) and `summary.json`.
Serialization is canonical -- sorted keys, compact separators, shortest float
repr -- so identical runs produce byte-identical files.

JSONL line schema (version 1):
  {"type": "config", "schema_version": 1, "method": str, "seed": int,
   "config_hash": str, "config": {...}}
  {"type": "round", "round": int, "m": int, "participants": [int],
   "train_loss": float, "val_loss": float|null, "val_accuracy": float|null,
   "ledger_delta": int, "is_solve_round": bool, "is_intermediate": bool,
   "solve": {...}|null}
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import DataFormatError
from .orchestrator import RoundRecord, RunResult

SCHEMA_VERSION = 1

ROUNDS_FILE = "rounds.jsonl"
SUMMARY_FILE = "summary.json"


def dumps_canonical(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _clean_float(value: float | None) -> float | None:
    if value is None:
        return None
    value = float(value)
    if value != value:  # NaN never enters the stream
        return None
    return value


def record_to_dict(rec: RoundRecord) -> dict:
    solve = None
    if rec.solve is not None:
        solve = {
            "round": rec.solve.round_index,
            "participants": [int(i) for i in rec.solve.participant_ids],
            "baseline": _clean_float(rec.solve.baseline),
            "candidates": [[int(m), _clean_float(df)] for m, df in rec.solve.candidates],
            "inner_m": rec.solve.inner_m,
            "chosen_m": rec.solve.chosen_m,
        }
    return {
        "type": "round",
        "round": rec.round_index,
        "m": rec.m,
        "participants": [int(i) for i in rec.participant_ids],
        "train_loss": _clean_float(rec.train_loss),
        "val_loss": _clean_float(rec.val_loss),
        "val_accuracy": _clean_float(rec.val_accuracy),
        "ledger_delta": rec.ledger_delta,
        "is_solve_round": rec.is_solve_round,
        "is_intermediate": rec.is_intermediate,
        "solve": solve,
    }


def round_lines(result: RunResult) -> list[str]:
    return [dumps_canonical(record_to_dict(rec)) for rec in result.records]


def write_run(
    out_dir: str | Path,
    result: RunResult,
    method: str,
    config: dict,
    config_hash: str,
) -> tuple[Path, Path]:
    """Write rounds.jsonl and summary.json; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    header = {
        "type": "config",
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "seed": result.seed,
        "config_hash": config_hash,
        "config": config,
    }
    lines = [dumps_canonical(header)] + round_lines(result)
    rounds_path = out / ROUNDS_FILE
    rounds_path.write_text("\n".join(lines) + "\n")

    ordinary = [r for r in result.records if not r.is_intermediate]
    last = ordinary[-1] if ordinary else None
    best = None
    if result.best_round is not None:
        best = next(r for r in ordinary if r.round_index == result.best_round)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "seed": result.seed,
        "config_hash": config_hash,
        "config": config,
        "rounds_run": len(ordinary),
        "best_round": result.best_round,
        "best_val_loss": _clean_float(best.val_loss) if best else None,
        "best_val_accuracy": _clean_float(best.val_accuracy) if best else None,
        "final_val_loss": _clean_float(last.val_loss) if last else None,
        "final_val_accuracy": _clean_float(last.val_accuracy) if last else None,
        "communications_total": result.communications_total(),
        "communications_to_best": result.communications_to_best(),
    }
    summary_path = out / SUMMARY_FILE
    summary_path.write_text(dumps_canonical(summary) + "\n")
    return rounds_path, summary_path


def load_run_lines(path: str | Path) -> tuple[dict, list[dict]]:
    """Parse a rounds.jsonl file into (config header, round records)."""
    path = Path(path)
    rows: list[dict] = []
    header: dict | None = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if lineno == 1:
                if obj.get("type") != "config":
                    raise DataFormatError(f"{path}: first line must be the config echo")
                header = obj
            else:
                if obj.get("type") != "round":
                    raise DataFormatError(f"{path}:{lineno}: expected a round record")
                rows.append(obj)
    if header is None:
        raise DataFormatError(f"{path}: empty run file")
    return header, rows
