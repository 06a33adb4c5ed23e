"""Command-line entry points.

fedrig controller --listen EP [...]      run a controller service
fedrig learner --controller EP --listen EP --index N [...]
fedrig driver run --env FILE             run a whole federation
fedrig bench run --learners 4,8,16 --sizes 100k,1M --rounds 5 \
                 --parallel on,off --out DIR
fedrig bench plot --csv FILE --out DIR
"""

from __future__ import annotations

import argparse
import sys

from .controller import Controller, FederationConfig
from .learner import JoinRejected, Learner, LearnerConfig
from .transport import TlsClient, TlsServer


def _mode(value: str) -> str:
    return {"sync": "synchronous", "async": "asynchronous"}.get(value, value)


def _cmd_controller(args: argparse.Namespace) -> int:
    config = FederationConfig(
        mode=_mode(args.mode),
        max_rounds=args.rounds,
        max_wall_clock_s=args.wall_clock_s,
        participation=args.participation,
    )
    tls_server = TlsServer(args.cert, args.key) if args.cert and args.key else None
    controller = Controller(
        args.listen,
        config,
        expected_learners=args.expected_learners,
        seed=args.seed,
        agg_workers=args.agg_workers,
        train_timeout_s=args.train_timeout_s,
        eval_timeout_s=args.eval_timeout_s,
        log_path=args.log,
        tls_server=tls_server,
        tls_client=TlsClient() if args.tls_dial else None,
    )
    controller.serve()
    return 0


def _cmd_learner(args: argparse.Namespace) -> int:
    config = LearnerConfig(
        index=args.index,
        controller=args.controller,
        listen=args.listen,
        num_samples=args.samples,
        input_dim=args.input_dim,
        train_delay_s=args.train_delay,
        drain_on_shutdown=args.drain_on_shutdown,
        log_path=args.log,
        tls_server=TlsServer(args.cert, args.key) if args.cert and args.key else None,
        tls_client=TlsClient(ca_file=args.ca) if args.ca else None,
    )
    learner = Learner(config)
    try:
        learner.run()
    except JoinRejected as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ConnectionError, OSError, TimeoutError) as exc:
        print(f"learner failed to start: {exc}", file=sys.stderr)
        return 1
    return 0


def _cmd_driver_run(args: argparse.Namespace) -> int:
    from .driver import FederationEnvironment, StartupFailure, run_federation

    env = FederationEnvironment.from_yaml(args.env)
    if args.run_dir:
        env.run_dir = args.run_dir
    try:
        result = run_federation(env)
    except (StartupFailure, TimeoutError) as exc:
        print(f"federation failed: {exc}", file=sys.stderr)
        return 1
    print(f"run dir: {result.run_dir}")
    for rm in result.metrics:
        print(
            f"round {rm.round}: federation_round={rm.federation_round_s:.3f}s "
            f"(train={rm.train_round_s:.3f}s agg={rm.aggregation_s:.3f}s "
            f"eval={rm.eval_round_s:.3f}s)"
        )
    if result.csv_path:
        print(f"metrics csv: {result.csv_path}")
    return 0


def _csv_ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v)


def _csv_strs(value: str) -> tuple[str, ...]:
    return tuple(v for v in value.split(",") if v)


def _cmd_bench_run(args: argparse.Namespace) -> int:
    from .bench import SweepSpec, plot_results, run_sweep

    spec = SweepSpec(
        learner_counts=args.learners,
        model_sizes=args.sizes,
        rounds=args.rounds,
        parallel_agg=args.parallel,
        seed=args.seed,
        spawn=args.spawn,
        out_dir=args.out,
    )
    csv_path = run_sweep(spec)
    print(f"metrics csv: {csv_path}")
    if not args.no_plots:
        for path in plot_results(csv_path, args.out):
            print(f"wrote {path}")
    return 0


def _cmd_bench_plot(args: argparse.Namespace) -> int:
    from .bench import plot_results

    for path in plot_results(args.csv, args.out):
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrig", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("controller", help="run a federation controller")
    p.add_argument("--listen", required=True, help="endpoint, host:port or mem://name")
    p.add_argument("--mode", default="synchronous", help="synchronous|asynchronous")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--wall-clock-s", type=float, default=None)
    p.add_argument("--participation", type=float, default=1.0)
    p.add_argument("--expected-learners", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--agg-workers", type=int, default=None)
    p.add_argument("--train-timeout-s", type=float, default=600.0)
    p.add_argument("--eval-timeout-s", type=float, default=300.0)
    p.add_argument("--log", default=None, help="JSONL event log path")
    p.add_argument("--cert", default=None)
    p.add_argument("--key", default=None)
    p.add_argument("--tls-dial", action="store_true", help="dial learners over TLS")
    p.set_defaults(func=_cmd_controller)

    p = sub.add_parser("learner", help="run a federation learner")
    p.add_argument("--controller", required=True, help="controller endpoint")
    p.add_argument("--listen", required=True)
    p.add_argument("--index", type=int, required=True, help="dataset seed index")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--input-dim", type=int, default=13)
    p.add_argument("--train-delay", type=float, default=0.0, help="artificial training delay (s)")
    p.add_argument("--drain-on-shutdown", action="store_true")
    p.add_argument("--log", default=None)
    p.add_argument("--cert", default=None)
    p.add_argument("--key", default=None)
    p.add_argument("--ca", default=None, help="certificate to trust when dialing the controller")
    p.set_defaults(func=_cmd_learner)

    p = sub.add_parser("driver", help="federation lifecycle driver")
    dsub = p.add_subparsers(dest="driver_command", required=True)
    p = dsub.add_parser("run", help="run a federation from an environment file")
    p.add_argument("--env", required=True, help="YAML federation environment file")
    p.add_argument("--run-dir", default=None)
    p.set_defaults(func=_cmd_driver_run)

    p = sub.add_parser("bench", help="benchmark harness")
    bsub = p.add_subparsers(dest="bench_command", required=True)
    p = bsub.add_parser("run", help="run a sweep")
    p.add_argument("--learners", type=_csv_ints, default=(4, 8, 16))
    p.add_argument("--sizes", type=_csv_strs, default=("100k", "1M"))
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--parallel", type=_csv_strs, default=("on", "off"))
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--spawn", default="subprocess")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=_cmd_bench_run)
    p = bsub.add_parser("plot", help="render figures and table from a metrics CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
