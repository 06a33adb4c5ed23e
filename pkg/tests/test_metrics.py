import math

import pytest

from fedrig.metrics import (
    CSV_COLUMNS,
    IncompleteRound,
    METRIC_NAMES,
    RoundMetrics,
    SchemaError,
    aggregate_run,
    compute_round_metrics,
    eval_losses_by_round,
    metric_rows,
    read_metrics_csv,
    timeline_monotone,
    write_metrics_csv,
)


def ev(ts, event, round=1, learner_id=None, **extra):
    return {"ts": ts, "event": event, "round": round, "learner_id": learner_id, **extra}


def synthetic_round(start=0.0, ack=1.0, completed=5.0, agg=(5.0, 6.0), sent=6.5, reply=9.0):
    return [
        ev(start, "round_start"),
        ev(start + 0.2, "run_task_sent", learner_id="L1"),
        ev(ack, "train_ack", learner_id="L1"),
        ev(completed, "task_completed", learner_id="L1"),
        ev(agg[0], "aggregation_start"),
        ev(agg[1], "aggregation_end"),
        ev(sent, "eval_request_sent", learner_id="L1"),
        ev(reply, "eval_reply", learner_id="L1", loss=0.5),
    ]


class TestComputeRoundMetrics:
    def test_hand_computed_example(self):
        # timestamps (0, 1, 5, 6, 6.5, 9) -> (1, 5, 1, 0.5, 3, 9)
        rm = compute_round_metrics(synthetic_round(), 1)
        assert rm == RoundMetrics(1, 1.0, 5.0, 1.0, 0.5, 3.0, 9.0)
        assert rm.is_consistent()

    def test_zero_duration_round(self):
        rm = compute_round_metrics(
            synthetic_round(start=0, ack=0, completed=0, agg=(0, 0), sent=0, reply=0), 1
        )
        assert all(v == 0.0 for v in rm.by_metric().values())

    def test_missing_eval_reply(self):
        events = [e for e in synthetic_round() if e["event"] != "eval_reply"]
        with pytest.raises(IncompleteRound):
            compute_round_metrics(events, 1)

    def test_other_rounds_ignored(self):
        events = synthetic_round() + [
            {**e, "round": 2, "ts": e["ts"] + 100} for e in synthetic_round()
        ]
        assert compute_round_metrics(events, 1).federation_round_s == 9.0
        assert compute_round_metrics(events, 2).federation_round_s == 9.0

    def test_last_timestamp_wins_across_learners(self):
        events = synthetic_round() + [
            ev(2.5, "train_ack", learner_id="L2"),
            ev(4.0, "task_completed", learner_id="L2"),
            ev(6.6, "eval_request_sent", learner_id="L2"),
            ev(8.0, "eval_reply", learner_id="L2", loss=0.1),
        ]
        rm = compute_round_metrics(events, 1)
        assert rm.train_task_dispatch_s == 2.5
        assert rm.train_round_s == 5.0
        assert rm.eval_task_dispatch_s == pytest.approx(0.6)
        assert rm.federation_round_s == 9.0


class TestTimeline:
    def test_monotone_on_well_formed_round(self):
        assert timeline_monotone(synthetic_round(), 1)

    def test_out_of_order_detected(self):
        events = synthetic_round(agg=(5.0, 4.5))  # aggregation ends before it starts
        assert not timeline_monotone(events, 1)

    def test_losses_by_round(self):
        events = synthetic_round() + [ev(9.5, "eval_reply", round=2, learner_id="L9", loss=1.5)]
        losses = eval_losses_by_round(events)
        assert losses == {1: {"L1": 0.5}, 2: {"L9": 1.5}}


def rm_for(round_number, federation=1.0):
    return RoundMetrics(round_number, 0.1, 0.4, 0.1, 0.05, 0.3, federation)


class TestAggregateRun:
    def test_single_round_summaries_collapse(self):
        out = aggregate_run([rm_for(1, federation=2.0)])
        s = out["federation_round"]
        assert s.mean == s.median == s.p95 == 2.0

    def test_two_round_mean(self):
        out = aggregate_run([rm_for(1, 2.0), rm_for(2, 4.0)])
        assert out["federation_round"].mean == 3.0

    def test_warmup_exclusion(self):
        rounds = [rm_for(i, float(i)) for i in range(1, 6)]
        out = aggregate_run(rounds, exclude_warmup=True)
        # recomputed by hand over rounds 2..5
        assert out["federation_round"].mean == pytest.approx((2 + 3 + 4 + 5) / 4)
        assert out["federation_round"].median == pytest.approx(3.5)

    def test_warmup_kept_when_single_round(self):
        out = aggregate_run([rm_for(1, 7.0)], exclude_warmup=True)
        assert out["federation_round"].mean == 7.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_run([])


class TestCsv:
    def test_roundtrip(self, tmp_path):
        rows = metric_rows("run1", "fedrig", 105_025, 4, [rm_for(1), rm_for(2)])
        assert len(rows) == 2 * len(METRIC_NAMES)
        path = tmp_path / "m.csv"
        write_metrics_csv(path, rows)
        back = read_metrics_csv(path)
        assert len(back) == len(rows)
        assert back[0]["model_params"] == 105_025
        assert back[0]["learners"] == 4
        assert {r["metric"] for r in back} == set(METRIC_NAMES)

    def test_append(self, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv(path, metric_rows("a", "f", 1, 1, [rm_for(1)]))
        write_metrics_csv(path, metric_rows("b", "f", 1, 2, [rm_for(1)]), append=True)
        assert len(read_metrics_csv(path)) == 2 * len(METRIC_NAMES)

    def test_failed_row_carries_note(self, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv(
            path,
            [
                {
                    "run_id": "x",
                    "framework": "f",
                    "model_params": 1,
                    "learners": 2,
                    "round": 0,
                    "metric": "failed",
                    "seconds": float("nan"),
                    "note": "boom",
                }
            ],
        )
        row = read_metrics_csv(path)[0]
        assert row["metric"] == "failed"
        assert row["note"] == "boom"
        assert math.isnan(row["seconds"])

    def test_schema_error_on_empty(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text(",".join(CSV_COLUMNS) + "\n")
        with pytest.raises(SchemaError):
            read_metrics_csv(path)

    def test_schema_error_on_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(SchemaError):
            read_metrics_csv(path)

    def test_schema_error_on_absent_file(self, tmp_path):
        with pytest.raises(SchemaError):
            read_metrics_csv(tmp_path / "nope.csv")
