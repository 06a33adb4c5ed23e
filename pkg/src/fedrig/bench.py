"""Benchmark harness: sweep learner counts x model sizes x aggregation
parallelism, collect per-round timings into a CSV, and render log-scale
figures plus a text table from that CSV.

The CSV is the normative artifact; figures are conveniences rendered next
to it. Cells run strictly sequentially so timings do not contend, and
every cell gets a cold, fresh federation. Failed cells land in the CSV as
metric="failed" rows with the error in the note column, and the sweep
moves on.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .driver import FederationEnvironment, run_federation
from .engine import MODEL_SIZES, parameter_count
from .metrics import (
    METRIC_NAMES,
    SchemaError,
    metric_rows,
    read_metrics_csv,
    write_metrics_csv,
)

__all__ = ["SweepSpec", "plot_results", "run_sweep"]

_PARAMS_TO_LABEL = {parameter_count(arch): name for name, arch in MODEL_SIZES.items()}


@dataclass
class SweepSpec:
    """The cartesian product of these lists defines the run set."""

    learner_counts: tuple[int, ...] = (4, 8, 16)
    model_sizes: tuple[str, ...] = ("100k", "1M")
    rounds: int = 5
    parallel_agg: tuple[str, ...] = ("on", "off")
    seed: int = 7
    spawn: str = "subprocess"
    out_dir: str | Path = "bench-out"
    epochs: int = 1
    batch_size: int = 100
    learning_rate: float = 0.01
    cell_train_timeout_s: float = 180.0
    cell_eval_timeout_s: float = 180.0

    def __post_init__(self) -> None:
        if not self.learner_counts or any(n < 1 for n in self.learner_counts):
            raise ValueError("learner_counts must be positive")
        if any(p not in ("on", "off") for p in self.parallel_agg):
            raise ValueError("parallel_agg entries must be 'on' or 'off'")
        if self.rounds < 1:
            raise ValueError("rounds must be positive")


def _label(parallel: str) -> str:
    return "fedrig[parallel-agg]" if parallel == "on" else "fedrig[serial-agg]"


def run_sweep(spec: SweepSpec) -> Path:
    """Run every cell and write <out_dir>/metrics.csv; returns its path.

    parallel_agg=off pins the aggregation worker pool to a single worker;
    on lets it use every core. Model bytes are identical either way, only
    the aggregation interval moves.
    """
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    rows: list[dict] = []
    for size in spec.model_sizes:
        for count in spec.learner_counts:
            for parallel in spec.parallel_agg:
                run_id = f"{size}-{count:03d}l-agg_{parallel}"
                label = _label(parallel)
                params = parameter_count(MODEL_SIZES[size]) if size in MODEL_SIZES else 0
                env = FederationEnvironment(
                    mode="synchronous",
                    rounds=spec.rounds,
                    learners=count,
                    model_size=size,
                    epochs=spec.epochs,
                    batch_size=spec.batch_size,
                    learning_rate=spec.learning_rate,
                    seed=spec.seed,
                    spawn=spec.spawn,
                    run_dir=str(out_dir / "runs" / run_id),
                    agg_workers=1 if parallel == "off" else (os.cpu_count() or 1),
                    framework_label=label,
                    train_timeout_s=spec.cell_train_timeout_s,
                    eval_timeout_s=spec.cell_eval_timeout_s,
                )
                try:
                    result = run_federation(env)
                    rows += metric_rows(run_id, label, params, count, result.metrics)
                except Exception as exc:
                    rows.append(
                        {
                            "run_id": run_id,
                            "framework": label,
                            "model_params": params,
                            "learners": count,
                            "round": 0,
                            "metric": "failed",
                            "seconds": float("nan"),
                            "note": repr(exc),
                        }
                    )
                # rewrite after every cell so a crashed sweep keeps its rows
                write_metrics_csv(csv_path, rows)
    return csv_path


def _mean_excluding_warmup(cell_rows: list[dict]) -> float:
    rounds = sorted({r["round"] for r in cell_rows})
    keep = rounds[1:] if len(rounds) > 1 else rounds
    return fmean(r["seconds"] for r in cell_rows if r["round"] in keep)


def size_label(model_params: int) -> str:
    return _PARAMS_TO_LABEL.get(model_params, str(model_params))


def plot_results(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Render one log-scale SVG per (model size, metric) plus a text table
    of federation-round means for the largest model.

    x axis: learner count; y axis: seconds (log); one series per
    framework label. Raises SchemaError on an empty or malformed CSV.
    """
    rows = [r for r in read_metrics_csv(csv_path) if r["metric"] in METRIC_NAMES]
    if not rows:
        raise SchemaError(f"{csv_path} holds no metric rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    sizes = sorted({r["model_params"] for r in rows})
    frameworks = sorted({r["framework"] for r in rows})
    outputs: list[Path] = []
    for params in sizes:
        for metric in METRIC_NAMES:
            fig, ax = plt.subplots(figsize=(5.0, 3.4))
            plotted = False
            for framework in frameworks:
                counts = sorted(
                    {
                        r["learners"]
                        for r in rows
                        if r["model_params"] == params
                        and r["framework"] == framework
                        and r["metric"] == metric
                    }
                )
                ys = []
                for count in counts:
                    cell = [
                        r
                        for r in rows
                        if r["model_params"] == params
                        and r["framework"] == framework
                        and r["metric"] == metric
                        and r["learners"] == count
                    ]
                    ys.append(_mean_excluding_warmup(cell))
                if counts:
                    ax.plot(counts, ys, marker="o", label=framework)
                    plotted = True
            if not plotted:
                plt.close(fig)
                continue
            ax.set_yscale("log")
            ax.set_xlabel("learners")
            ax.set_ylabel("seconds")
            ax.set_title(f"{metric} — {size_label(params)} params")
            ax.grid(True, which="both", alpha=0.3)
            ax.legend(fontsize=8)
            fig.tight_layout()
            path = out_dir / f"{size_label(params)}_{metric}.svg"
            fig.savefig(path)
            plt.close(fig)
            outputs.append(path)

    outputs.append(_write_table(rows, max(sizes), out_dir))
    return outputs


def _write_table(rows: list[dict], params: int, out_dir: Path) -> Path:
    """Text table of mean federation-round seconds for the given size."""
    frameworks = sorted({r["framework"] for r in rows if r["model_params"] == params})
    counts = sorted({r["learners"] for r in rows if r["model_params"] == params})
    lines = [
        f"Federation round time (s), {size_label(params)}-parameter model "
        f"({params} params), mean over rounds (round 1 excluded as warm-up)",
        "",
        "\t".join(["learners"] + frameworks),
    ]
    for count in counts:
        cells = [str(count)]
        for framework in frameworks:
            cell = [
                r
                for r in rows
                if r["model_params"] == params
                and r["framework"] == framework
                and r["learners"] == count
                and r["metric"] == "federation_round"
            ]
            cells.append(f"{_mean_excluding_warmup(cell):.6f}" if cell else "N/A")
        lines.append("\t".join(cells))
    path = out_dir / "federation_round_table.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
