"""Per-round wall-clock measurements and their CSV schema.

Six intervals describe one federation round, all measured at the
controller so a single clock covers the whole timeline:

* train_task_dispatch — last training acknowledgment minus round start
* train_round         — last completed training task minus round start
* aggregation         — averaging call duration
* eval_task_dispatch  — last evaluation request issued minus aggregation end
* eval_round          — last evaluation reply minus aggregation end
* federation_round    — last evaluation reply minus round start

The normative CSV columns are run_id, framework, model_params, learners,
round, metric, seconds; a trailing free-text note column carries error
strings for failed benchmark cells.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

__all__ = [
    "CSV_COLUMNS",
    "IncompleteRound",
    "METRIC_NAMES",
    "MetricSummary",
    "RoundMetrics",
    "SchemaError",
    "aggregate_run",
    "compute_round_metrics",
    "eval_losses_by_round",
    "metric_rows",
    "read_metrics_csv",
    "timeline_monotone",
    "write_metrics_csv",
]

METRIC_NAMES = (
    "train_task_dispatch",
    "train_round",
    "aggregation",
    "eval_task_dispatch",
    "eval_round",
    "federation_round",
)

CSV_COLUMNS = (
    "run_id",
    "framework",
    "model_params",
    "learners",
    "round",
    "metric",
    "seconds",
    "note",
)

_NORMATIVE_COLUMNS = CSV_COLUMNS[:-1]


class IncompleteRound(ValueError):
    """The event log does not contain every event the round requires."""


class SchemaError(ValueError):
    """A metrics CSV is empty or lacks the normative columns."""


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    train_task_dispatch_s: float
    train_round_s: float
    aggregation_s: float
    eval_task_dispatch_s: float
    eval_round_s: float
    federation_round_s: float

    def by_metric(self) -> dict[str, float]:
        return {
            "train_task_dispatch": self.train_task_dispatch_s,
            "train_round": self.train_round_s,
            "aggregation": self.aggregation_s,
            "eval_task_dispatch": self.eval_task_dispatch_s,
            "eval_round": self.eval_round_s,
            "federation_round": self.federation_round_s,
        }

    def is_consistent(self, tol: float = 1e-6) -> bool:
        """Sub-interval containment: the full round dominates the sum of its
        training, aggregation and evaluation legs, and each dispatch fits
        inside its leg."""
        return (
            self.federation_round_s
            >= self.train_round_s + self.aggregation_s + self.eval_round_s - tol
            and self.train_task_dispatch_s <= self.train_round_s + tol
            and self.eval_task_dispatch_s <= self.eval_round_s + tol
            and min(
                self.train_task_dispatch_s,
                self.train_round_s,
                self.aggregation_s,
                self.eval_task_dispatch_s,
                self.eval_round_s,
                self.federation_round_s,
            )
            >= -tol
        )


def _round_events(events: Iterable[dict], round_number: int) -> list[dict]:
    return [e for e in events if e.get("round") == round_number]


def _last_ts(events: Sequence[dict], name: str) -> float | None:
    ts = [e["ts"] for e in events if e["event"] == name]
    return max(ts) if ts else None


def _only_ts(events: Sequence[dict], name: str) -> float | None:
    ts = [e["ts"] for e in events if e["event"] == name]
    return ts[0] if ts else None


def compute_round_metrics(events: Iterable[dict], round_number: int) -> RoundMetrics:
    """Derive the six intervals of one round from an ordered event log.

    Raises IncompleteRound when a required event is missing.
    """
    evs = _round_events(events, round_number)
    round_start = _only_ts(evs, "round_start")
    last_ack = _last_ts(evs, "train_ack")
    last_completed = _last_ts(evs, "task_completed")
    agg_start = _only_ts(evs, "aggregation_start")
    agg_end = _only_ts(evs, "aggregation_end")
    last_eval_sent = _last_ts(evs, "eval_request_sent")
    last_eval_reply = _last_ts(evs, "eval_reply")
    missing = [
        name
        for name, value in [
            ("round_start", round_start),
            ("train_ack", last_ack),
            ("task_completed", last_completed),
            ("aggregation_start", agg_start),
            ("aggregation_end", agg_end),
            ("eval_request_sent", last_eval_sent),
            ("eval_reply", last_eval_reply),
        ]
        if value is None
    ]
    if missing:
        raise IncompleteRound(f"round {round_number} is missing: {', '.join(missing)}")
    return RoundMetrics(
        round=round_number,
        train_task_dispatch_s=last_ack - round_start,
        train_round_s=last_completed - round_start,
        aggregation_s=agg_end - agg_start,
        eval_task_dispatch_s=last_eval_sent - agg_end,
        eval_round_s=last_eval_reply - agg_end,
        federation_round_s=last_eval_reply - round_start,
    )


def timeline_monotone(events: Iterable[dict], round_number: int, tol: float = 1e-9) -> bool:
    """Check the round's marker timestamps are ordered: start, dispatch end,
    training end, aggregation, evaluation dispatch end, evaluation end."""
    evs = _round_events(events, round_number)
    points = [
        _only_ts(evs, "round_start"),
        _last_ts(evs, "train_ack"),
        _last_ts(evs, "task_completed"),
        _only_ts(evs, "aggregation_start"),
        _only_ts(evs, "aggregation_end"),
        _last_ts(evs, "eval_request_sent"),
        _last_ts(evs, "eval_reply"),
    ]
    if any(p is None for p in points):
        return False
    return all(b >= a - tol for a, b in zip(points, points[1:]))


def eval_losses_by_round(events: Iterable[dict]) -> dict[int, dict[str, float]]:
    """Collect per-learner evaluation losses keyed by round."""
    out: dict[int, dict[str, float]] = {}
    for e in events:
        if e.get("event") == "eval_reply" and e.get("round") is not None:
            out.setdefault(e["round"], {})[e.get("learner_id")] = e.get("loss")
    return out


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    median: float
    p95: float


def _p95(values: Sequence[float]) -> float:
    if len(values) == 1:
        return values[0]
    ordered = sorted(values)
    # linear interpolation between closest ranks
    pos = 0.95 * (len(ordered) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(ordered) - 1)
    frac = pos - lo
    return ordered[lo] * (1 - frac) + ordered[hi] * frac


def aggregate_run(
    rounds: Sequence[RoundMetrics], exclude_warmup: bool = False
) -> dict[str, MetricSummary]:
    """Summarize a run's rounds per metric.

    With exclude_warmup the first round is dropped (cold caches, lazy
    imports) unless it is the only one.
    """
    if not rounds:
        raise ValueError("no rounds to aggregate")
    kept = list(rounds)
    if exclude_warmup and len(kept) > 1:
        kept = kept[1:]
    out = {}
    for name in METRIC_NAMES:
        values = [rm.by_metric()[name] for rm in kept]
        out[name] = MetricSummary(
            mean=statistics.fmean(values),
            median=statistics.median(values),
            p95=_p95(values),
        )
    return out


def metric_rows(
    run_id: str,
    framework: str,
    model_params: int,
    learners: int,
    rounds: Sequence[RoundMetrics],
) -> list[dict]:
    """One CSV row per (round, metric)."""
    rows = []
    for rm in rounds:
        for name, value in rm.by_metric().items():
            rows.append(
                {
                    "run_id": run_id,
                    "framework": framework,
                    "model_params": model_params,
                    "learners": learners,
                    "round": rm.round,
                    "metric": name,
                    "seconds": value,
                    "note": "",
                }
            )
    return rows


def write_metrics_csv(path: str | Path, rows: Iterable[dict], append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists() and path.stat().st_size > 0
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if mode == "w" or not exists:
            writer.writeheader()
        for row in rows:
            writer.writerow({col: row.get(col, "") for col in CSV_COLUMNS})


def read_metrics_csv(path: str | Path) -> list[dict]:
    """Load rows, coercing the numeric columns. Raises SchemaError when the
    normative columns are missing or the file holds no data rows."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in _NORMATIVE_COLUMNS if c not in header]
            if missing:
                raise SchemaError(f"CSV lacks columns: {', '.join(missing)}")
            rows = []
            for raw in reader:
                row = dict(raw)
                row["model_params"] = int(raw["model_params"])
                row["learners"] = int(raw["learners"])
                row["round"] = int(raw["round"])
                row["seconds"] = float(raw["seconds"]) if raw["seconds"] else float("nan")
                row.setdefault("note", "")
                rows.append(row)
    except FileNotFoundError as exc:
        raise SchemaError(f"no such CSV: {path}") from exc
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"malformed CSV {path}: {exc}") from exc
    if not rows:
        raise SchemaError(f"CSV {path} holds no data rows")
    return rows
