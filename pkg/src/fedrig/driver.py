"""Federation driver: initialization, monitoring and ordered shutdown.

The driver builds the initial model, brings up the controller and the
learners (three spawn modes: threads in this process over in-memory
queues, subprocesses on localhost sockets, or attaching to pre-started
endpoints), ships the initial model, heartbeats every component, and
tears the federation down learners-first.

The federation environment file is YAML with normative field names:
mode, rounds, wall_clock_s, learners, model_size, epochs, batch_size,
learning_rate, seed, tls, spawn, metrics_out. See FederationEnvironment
for the optional extras.
"""

from __future__ import annotations

import itertools
import json
import math
import queue
import subprocess
import sys
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import yaml

from .controller import Controller, FederationConfig, INIT_TASK_ID
from .engine import MODEL_SIZES, MlpArchitecture, build_mlp, parameter_count
from .eventlog import read_events
from .learner import Learner, LearnerConfig
from .metrics import RoundMetrics, compute_round_metrics, eval_losses_by_round, metric_rows, write_metrics_csv
from .protocol import EvalReply, EvaluateModel, Hyperparams, Ack, Ping, Pong, RunTask, ShutDown
from .transport import TlsClient, TlsServer, connect, request

__all__ = [
    "FederationEnvironment",
    "FederationHandle",
    "HealthEvent",
    "StartupFailure",
    "generate_tls_material",
    "initialize_federation",
    "monitor",
    "run_federation",
    "shutdown",
]

_RUN_COUNTER = itertools.count()

SPAWN_MODES = ("in_process", "subprocess", "attach")
TLS_MODES = ("off", "self_signed", "provided")


class StartupFailure(RuntimeError):
    """A component failed to come up; already-started ones were torn down."""

    def __init__(self, component: str, reason: str) -> None:
        super().__init__(f"{component}: {reason}")
        self.component = component
        self.reason = reason


@dataclass
class FederationEnvironment:
    """Everything needed to run one federation."""

    mode: str = "synchronous"
    rounds: int | None = None
    wall_clock_s: float | None = None
    learners: int = 1
    model_size: str | MlpArchitecture = "100k"
    epochs: int = 1
    batch_size: int = 100
    learning_rate: float = 0.01
    seed: int = 0
    tls: str = "off"
    spawn: str = "subprocess"
    metrics_out: str | None = None

    participation: float = 1.0
    samples_per_learner: int = 100
    train_delays: list[float] | None = None
    run_dir: str | None = None
    train_timeout_s: float = 600.0
    eval_timeout_s: float = 300.0
    heartbeat_interval_s: float = 5.0
    heartbeat_threshold: int = 3
    shutdown_grace_s: float = 10.0
    agg_workers: int | None = None
    framework_label: str = "fedrig"
    controller_endpoint: str | None = None
    learner_endpoints: list[str] | None = None
    tls_cert_dir: str | None = None

    def __post_init__(self) -> None:
        if self.learners < 1:
            raise ValueError("at least one learner is required")
        if self.rounds is None and self.wall_clock_s is None:
            raise ValueError("set rounds and/or wall_clock_s")
        if self.spawn not in SPAWN_MODES:
            raise ValueError(f"spawn must be one of {SPAWN_MODES}")
        if self.tls not in TLS_MODES:
            raise ValueError(f"tls must be one of {TLS_MODES}")
        if self.tls == "provided" and not self.tls_cert_dir:
            raise ValueError("tls=provided requires tls_cert_dir")
        if self.spawn == "attach":
            if not self.controller_endpoint or not self.learner_endpoints:
                raise ValueError("attach mode requires controller_endpoint and learner_endpoints")
            if len(self.learner_endpoints) != self.learners:
                raise ValueError("learner_endpoints length must equal learners")
        if self.learner_endpoints is not None:
            if len(set(self.learner_endpoints)) != len(self.learner_endpoints):
                raise ValueError("learner endpoints must be pairwise distinct")
        if self.train_delays is not None and len(self.train_delays) < self.learners:
            # pad with zeros so per-learner lookup is total
            self.train_delays = list(self.train_delays) + [0.0] * (
                self.learners - len(self.train_delays)
            )

    @classmethod
    def from_mapping(cls, raw: dict) -> "FederationEnvironment":
        data = dict(raw)
        # YAML 1.1 reads a bare `off` as boolean False
        if data.get("tls") in (False, None):
            data["tls"] = "off"
        elif data.get("tls") is True:
            data["tls"] = "self_signed"
        mode = data.get("mode", "synchronous")
        data["mode"] = {"sync": "synchronous", "async": "asynchronous"}.get(mode, mode)
        size = data.get("model_size", "100k")
        if isinstance(size, dict):
            data["model_size"] = MlpArchitecture(**size)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown environment fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "FederationEnvironment":
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"environment file {path} must hold a mapping")
        return cls.from_mapping(raw)

    def arch(self) -> MlpArchitecture:
        if isinstance(self.model_size, MlpArchitecture):
            return self.model_size
        try:
            return MODEL_SIZES[self.model_size]
        except KeyError:
            raise ValueError(
                f"model_size must be an architecture or one of {sorted(MODEL_SIZES)}"
            ) from None

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate
        )

    def federation_config(self) -> FederationConfig:
        return FederationConfig(
            mode=self.mode,
            max_rounds=self.rounds,
            max_wall_clock_s=self.wall_clock_s,
            participation=self.participation,
            hyperparams=self.hyperparams(),
        )

    def manifest(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if isinstance(value, MlpArchitecture):
                value = value.__dict__
            out[name] = value
        out["model_params"] = parameter_count(self.arch())
        return out


@dataclass(frozen=True)
class HealthEvent:
    kind: str  # "healthy" | "unhealthy"
    component: str
    ts: float
    latency_ms: float | None = None
    missed: int = 0


@dataclass
class _Component:
    name: str
    kind: str  # "controller" | "learner"
    endpoint: str
    dial_tls: TlsClient | None = None
    log_path: Path | None = None
    proc: subprocess.Popen | None = None
    obj: object | None = None
    stderr_fh: object | None = None
    exit_code: int | None = None
    forced_kill: bool = False


def _free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def generate_tls_material(run_dir: str | Path, component_names: list[str]) -> dict[str, tuple[Path, Path]]:
    """Write one self-signed EC key pair per component under run_dir/tls.

    Returns {component: (cert_path, key_path)}.
    """
    import datetime
    import ipaddress

    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import ec
    from cryptography.x509.oid import NameOID

    tls_dir = Path(run_dir) / "tls"
    tls_dir.mkdir(parents=True, exist_ok=True)
    now = datetime.datetime.now(datetime.timezone.utc)
    out = {}
    for name in component_names:
        key = ec.generate_private_key(ec.SECP256R1())
        subject = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, name)])
        cert = (
            x509.CertificateBuilder()
            .subject_name(subject)
            .issuer_name(subject)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + datetime.timedelta(days=7))
            .add_extension(
                x509.SubjectAlternativeName(
                    [x509.DNSName("localhost"), x509.IPAddress(ipaddress.IPv4Address("127.0.0.1"))]
                ),
                critical=False,
            )
            .sign(key, hashes.SHA256())
        )
        cert_path = tls_dir / f"{name}.crt"
        key_path = tls_dir / f"{name}.key"
        cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        key_path.write_bytes(
            key.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            )
        )
        out[name] = (cert_path, key_path)
    return out


class FederationHandle:
    """Live federation: endpoints, processes, health stream and results."""

    def __init__(self, env: FederationEnvironment, run_dir: Path) -> None:
        self.env = env
        self.run_dir = run_dir
        self.controller: _Component | None = None
        self.learners: list[_Component] = []
        self.health_events: queue.Queue[HealthEvent] = queue.Queue()
        self.health_history: list[HealthEvent] = []
        self.shutdown_report: dict | None = None
        self._monitor_stop = threading.Event()
        self._monitor_thread: threading.Thread | None = None
        self._shutdown_lock = threading.Lock()
        self._shutdown_done = False

    @property
    def components(self) -> list[_Component]:
        return ([self.controller] if self.controller else []) + self.learners

    def controller_events(self) -> list[dict]:
        ctrl = self.controller
        if ctrl and ctrl.obj is not None:
            return ctrl.obj.log.events()
        if ctrl and ctrl.log_path is not None:
            return read_events(ctrl.log_path)
        return []

    def wait_complete(self, timeout: float) -> bool:
        """Block until the controller reports the federation finished."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if any(e.get("event") == "federation_complete" for e in self.controller_events()):
                return True
            ctrl = self.controller
            if ctrl and ctrl.proc is not None and ctrl.proc.poll() is not None:
                return False  # controller died
            time.sleep(0.1)
        return False

    def round_metrics(self) -> list[RoundMetrics]:
        events = self.controller_events()
        rounds = sorted(
            {e["round"] for e in events if e.get("event") == "round_metrics"}
        )
        return [compute_round_metrics(events, r) for r in rounds]

    def eval_losses(self) -> dict[int, dict[str, float]]:
        return eval_losses_by_round(self.controller_events())

    def shutdown(self) -> dict:
        return shutdown(self)


def _wait_alive(
    component: str,
    endpoint: str,
    tls: TlsClient | None,
    deadline_s: float,
    proc: subprocess.Popen | None = None,
) -> None:
    deadline = time.monotonic() + deadline_s
    last = "no attempt"
    while time.monotonic() < deadline:
        if proc is not None and proc.poll() is not None:
            raise StartupFailure(component, f"process exited with code {proc.returncode}")
        try:
            reply = request(endpoint, Ping(), tls=tls, dial_timeout=1.0, reply_timeout=2.0)
        except (ConnectionError, OSError, TimeoutError) as exc:
            last = repr(exc)
            time.sleep(0.1)
            continue
        if isinstance(reply, Pong):
            return
        last = f"unexpected reply {type(reply).__name__}"
        time.sleep(0.1)
    raise StartupFailure(component, f"no Pong within {deadline_s:.0f}s ({last})")


def _controller_argv(env: FederationEnvironment, endpoint: str, log_path: Path,
                     cert: Path | None, key: Path | None, tls_dial: bool) -> list[str]:
    argv = [
        sys.executable, "-m", "fedrig", "controller",
        "--listen", endpoint,
        "--mode", env.mode,
        "--expected-learners", str(env.learners),
        "--participation", str(env.participation),
        "--seed", str(env.seed),
        "--train-timeout-s", str(env.train_timeout_s),
        "--eval-timeout-s", str(env.eval_timeout_s),
        "--log", str(log_path),
    ]
    if env.rounds is not None:
        argv += ["--rounds", str(env.rounds)]
    if env.wall_clock_s is not None:
        argv += ["--wall-clock-s", str(env.wall_clock_s)]
    if env.agg_workers is not None:
        argv += ["--agg-workers", str(env.agg_workers)]
    if cert and key:
        argv += ["--cert", str(cert), "--key", str(key)]
    if tls_dial:
        argv += ["--tls-dial"]
    return argv


def _learner_argv(env: FederationEnvironment, index: int, controller_ep: str, endpoint: str,
                  log_path: Path, cert: Path | None, key: Path | None, ca: Path | None) -> list[str]:
    argv = [
        sys.executable, "-m", "fedrig", "learner",
        "--controller", controller_ep,
        "--listen", endpoint,
        "--index", str(index),
        "--samples", str(env.samples_per_learner),
        "--input-dim", str(env.arch().input_dim),
        "--log", str(log_path),
    ]
    delay = (env.train_delays or [])[index] if env.train_delays else 0.0
    if delay:
        argv += ["--train-delay", str(delay)]
    if cert and key:
        argv += ["--cert", str(cert), "--key", str(key)]
    if ca:
        argv += ["--ca", str(ca)]
    return argv


def initialize_federation(env: FederationEnvironment) -> FederationHandle:
    """Bring the federation up: controller, initial model, learners, probes.

    Order: controller alive -> initial model shipped to it -> learners up
    -> model probe shipped to each learner -> registration confirmed by
    liveness -> heartbeat monitor running. Any failure tears down whatever
    already started and raises StartupFailure.
    """
    run_id = f"{time.strftime('%Y%m%d-%H%M%S')}-{next(_RUN_COUNTER):03d}"
    run_dir = Path(env.run_dir) if env.run_dir else Path("runs") / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    handle = FederationHandle(env, run_dir)

    learner_ids = [f"learner_{i:03d}" for i in range(env.learners)]
    names = ["controller"] + learner_ids
    tls_paths: dict[str, tuple[Path, Path]] = {}
    if env.tls == "self_signed":
        tls_paths = generate_tls_material(run_dir, names)
    elif env.tls == "provided":
        base = Path(env.tls_cert_dir)
        for name in names:
            cert, key = base / f"{name}.crt", base / f"{name}.key"
            if not cert.exists() or not key.exists():
                raise StartupFailure(name, f"missing provided TLS material under {base}")
            tls_paths[name] = (cert, key)
    tls_on = env.tls != "off"

    arch = env.arch()
    initial_model = build_mlp(arch, env.seed)
    (run_dir / "manifest.json").write_text(
        json.dumps({"run_id": run_id, **env.manifest()}, indent=2, default=str)
    )

    mem_prefix = f"fed{run_id}"
    try:
        handle.controller = _start_controller(env, handle, run_dir, tls_paths, tls_on, mem_prefix)
        _ship_initial_model(env, handle, initial_model)
        _start_learners(env, handle, run_dir, tls_paths, tls_on, mem_prefix, learner_ids)
        _probe_learners(env, handle, initial_model)
    except StartupFailure:
        _teardown_partial(handle)
        raise
    except Exception as exc:
        _teardown_partial(handle)
        raise StartupFailure("driver", repr(exc)) from exc

    handle._monitor_thread = threading.Thread(
        target=_monitor_loop, args=(handle,), daemon=True, name="heartbeat"
    )
    handle._monitor_thread.start()
    return handle


def _start_controller(env, handle, run_dir, tls_paths, tls_on, mem_prefix) -> _Component:
    log_path = run_dir / "controller.events.jsonl"
    cert, key = tls_paths.get("controller", (None, None))
    dial_tls = TlsClient(ca_file=str(cert)) if tls_on else None
    if env.spawn == "attach":
        comp = _Component("controller", "controller", env.controller_endpoint, dial_tls=dial_tls)
        _wait_alive("controller", comp.endpoint, dial_tls, deadline_s=5.0)
        return comp
    if env.spawn == "in_process" and not tls_on:
        endpoint = f"mem://{mem_prefix}/controller"
    else:
        endpoint = env.controller_endpoint or f"127.0.0.1:{_free_port()}"
    if env.spawn == "in_process":
        ctrl = Controller(
            endpoint,
            env.federation_config(),
            expected_learners=env.learners,
            seed=env.seed,
            agg_workers=env.agg_workers,
            train_timeout_s=env.train_timeout_s,
            eval_timeout_s=env.eval_timeout_s,
            log_path=log_path,
            tls_server=TlsServer(str(cert), str(key)) if tls_on else None,
            tls_client=TlsClient() if tls_on else None,
        )
        ctrl.start()
        comp = _Component("controller", "controller", ctrl.endpoint, dial_tls=dial_tls,
                          log_path=log_path, obj=ctrl)
    else:
        stderr = open(run_dir / "controller.stderr", "w")
        argv = _controller_argv(env, endpoint, log_path, cert, key, tls_on)
        proc = subprocess.Popen(argv, stdout=stderr, stderr=stderr)
        comp = _Component("controller", "controller", endpoint, dial_tls=dial_tls,
                          log_path=log_path, proc=proc, stderr_fh=stderr)
    _wait_alive("controller", comp.endpoint, dial_tls, deadline_s=30.0, proc=comp.proc)
    return comp


def _ship_initial_model(env, handle, initial_model) -> None:
    # Tensors only; the controller never needs the architecture.
    try:
        reply = request(
            handle.controller.endpoint,
            RunTask(task_id=INIT_TASK_ID, model=initial_model, hyperparams=env.hyperparams()),
            tls=handle.controller.dial_tls,
            dial_timeout=5.0,
            reply_timeout=60.0,
        )
    except (ConnectionError, OSError, TimeoutError) as exc:
        raise StartupFailure("controller", f"initial model rejected: {exc!r}") from exc
    if not (isinstance(reply, Ack) and reply.status):
        raise StartupFailure("controller", "initial model not acknowledged")


def _start_learners(env, handle, run_dir, tls_paths, tls_on, mem_prefix, learner_ids) -> None:
    controller_cert = tls_paths.get("controller", (None, None))[0]
    for i, learner_id in enumerate(learner_ids):
        cert, key = tls_paths.get(learner_id, (None, None))
        dial_tls = TlsClient(ca_file=str(cert)) if tls_on else None
        log_path = run_dir / f"{learner_id}.events.jsonl"
        if env.spawn == "attach":
            handle.learners.append(
                _Component(learner_id, "learner", env.learner_endpoints[i], dial_tls=dial_tls)
            )
            continue
        if env.spawn == "in_process" and not tls_on:
            endpoint = f"mem://{mem_prefix}/{learner_id}"
        else:
            endpoint = (env.learner_endpoints or [None] * env.learners)[i] or f"127.0.0.1:{_free_port()}"
        delay = (env.train_delays or [])[i] if env.train_delays else 0.0
        if env.spawn == "in_process":
            cfg = LearnerConfig(
                index=i,
                controller=handle.controller.endpoint,
                listen=endpoint,
                num_samples=env.samples_per_learner,
                input_dim=env.arch().input_dim,
                train_delay_s=delay,
                log_path=str(log_path),
                tls_server=TlsServer(str(cert), str(key)) if tls_on else None,
                tls_client=TlsClient(ca_file=str(controller_cert)) if tls_on else None,
            )
            learner = Learner(cfg)
            try:
                learner.start()
            except Exception as exc:
                raise StartupFailure(learner_id, repr(exc)) from exc
            handle.learners.append(
                _Component(learner_id, "learner", learner.endpoint, dial_tls=dial_tls,
                           log_path=log_path, obj=learner)
            )
        else:
            stderr = open(run_dir / f"{learner_id}.stderr", "w")
            argv = _learner_argv(env, i, handle.controller.endpoint, endpoint, log_path,
                                 cert, key, controller_cert)
            proc = subprocess.Popen(argv, stdout=stderr, stderr=stderr)
            handle.learners.append(
                _Component(learner_id, "learner", endpoint, dial_tls=dial_tls,
                           log_path=log_path, proc=proc, stderr_fh=stderr)
            )
    for comp in handle.learners:
        _wait_alive(comp.name, comp.endpoint, comp.dial_tls, deadline_s=30.0, proc=comp.proc)


def _probe_learners(env, handle, initial_model) -> None:
    # Tensors and, implicitly in their shapes, the architecture: the probe
    # proves each learner can execute the model before rounds begin.
    for comp in handle.learners:
        try:
            reply = request(
                comp.endpoint,
                EvaluateModel(task_id=f"{INIT_TASK_ID}:{comp.name}", model=initial_model),
                tls=comp.dial_tls,
                dial_timeout=5.0,
                reply_timeout=env.eval_timeout_s,
            )
        except (ConnectionError, OSError, TimeoutError) as exc:
            raise StartupFailure(comp.name, f"model probe failed: {exc!r}") from exc
        if not isinstance(reply, EvalReply) or not math.isfinite(reply.loss):
            raise StartupFailure(comp.name, "model probe returned no usable loss")


def _teardown_partial(handle: FederationHandle) -> None:
    try:
        shutdown(handle)
    except Exception:
        pass


def _monitor_loop(handle: FederationHandle) -> None:
    env = handle.env
    misses: dict[str, int] = {c.name: 0 for c in handle.components}
    unhealthy: set[str] = set()
    interval = env.heartbeat_interval_s
    while not handle._monitor_stop.is_set():
        results: dict[str, float | None] = {}

        def ping(comp: _Component) -> None:
            t0 = time.monotonic()
            try:
                reply = request(comp.endpoint, Ping(), tls=comp.dial_tls,
                                dial_timeout=min(2.0, interval), reply_timeout=min(2.0, interval))
                results[comp.name] = (
                    (time.monotonic() - t0) * 1000.0 if isinstance(reply, Pong) else None
                )
            except (ConnectionError, OSError, TimeoutError):
                results[comp.name] = None

        threads = [threading.Thread(target=ping, args=(c,), daemon=True) for c in handle.components]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        now = time.monotonic()
        for comp in handle.components:
            latency = results.get(comp.name)
            if latency is not None:
                misses[comp.name] = 0
                if comp.name in unhealthy:
                    unhealthy.discard(comp.name)
                event = HealthEvent("healthy", comp.name, now, latency_ms=latency)
                handle.health_history.append(event)
                handle.health_events.put(event)
            else:
                misses[comp.name] += 1
                if misses[comp.name] >= env.heartbeat_threshold and comp.name not in unhealthy:
                    unhealthy.add(comp.name)
                    event = HealthEvent("unhealthy", comp.name, now, missed=misses[comp.name])
                    handle.health_history.append(event)
                    handle.health_events.put(event)
        handle._monitor_stop.wait(timeout=interval)


def monitor(handle: FederationHandle) -> Iterator[HealthEvent]:
    """Stream health events until the federation is shut down."""
    while not handle._shutdown_done or not handle.health_events.empty():
        try:
            yield handle.health_events.get(timeout=0.2)
        except queue.Empty:
            continue


def _send_shutdown(comp: _Component, grace_s: float) -> None:
    try:
        with connect(comp.endpoint, tls=comp.dial_tls, timeout=2.0) as conn:
            conn.send_message(ShutDown())
    except (ConnectionError, OSError, TimeoutError):
        pass  # dead components still get reaped below
    if comp.proc is not None:
        try:
            comp.exit_code = comp.proc.wait(timeout=grace_s)
        except subprocess.TimeoutExpired:
            comp.proc.kill()
            comp.exit_code = comp.proc.wait(timeout=5.0)
            comp.forced_kill = True
        if comp.stderr_fh is not None:
            comp.stderr_fh.close()
    elif comp.obj is not None:
        obj = comp.obj
        stopped = (obj._shutdown if isinstance(obj, Learner) else obj._stop).wait(timeout=grace_s)
        if not stopped:
            comp.forced_kill = True
            obj.stop()
        if isinstance(obj, Learner):
            obj._close_down()
        else:
            for t in obj._threads:
                t.join(timeout=2.0)
            obj.log.close()
        comp.exit_code = 0 if not comp.forced_kill else None


def shutdown(handle: FederationHandle) -> dict:
    """Deliver ShutDown to every learner, wait for their exits (grace
    period, then force-kill), then shut the controller down. Idempotent."""
    with handle._shutdown_lock:
        if handle._shutdown_done:
            return handle.shutdown_report or {}
        handle._shutdown_done = True
    handle._monitor_stop.set()
    if handle._monitor_thread is not None:
        handle._monitor_thread.join(timeout=5.0)
    grace = handle.env.shutdown_grace_s
    threads = [
        threading.Thread(target=_send_shutdown, args=(comp, grace), daemon=True)
        for comp in handle.learners
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if handle.controller is not None:
        _send_shutdown(handle.controller, grace)
    report = {
        comp.name: {"exit_code": comp.exit_code, "forced_kill": comp.forced_kill}
        for comp in handle.components
    }
    handle.shutdown_report = report
    try:
        (handle.run_dir / "shutdown.json").write_text(json.dumps(report, indent=2))
    except OSError:
        pass
    return report


@dataclass
class FederationResult:
    run_dir: Path
    run_id: str
    metrics: list[RoundMetrics]
    eval_losses: dict[int, dict[str, float]]
    events: list[dict]
    csv_path: Path | None
    shutdown_report: dict


def run_federation(env: FederationEnvironment, wait_timeout: float | None = None) -> FederationResult:
    """Full driver run: initialize, wait for completion, shut down, report.

    Writes the per-round metrics CSV to env.metrics_out when set.
    """
    if wait_timeout is None:
        if env.wall_clock_s is not None:
            wait_timeout = env.wall_clock_s + 60.0
        else:
            wait_timeout = (env.rounds or 1) * (env.train_timeout_s + env.eval_timeout_s + 30.0) + 60.0
    handle = initialize_federation(env)
    try:
        finished = handle.wait_complete(wait_timeout)
        events = handle.controller_events()
        metrics = handle.round_metrics()
        losses = handle.eval_losses()
    finally:
        report = shutdown(handle)
    if not finished:
        raise TimeoutError(
            f"federation did not complete within {wait_timeout:.0f}s (see {handle.run_dir})"
        )
    csv_path = None
    if env.metrics_out:
        csv_path = Path(env.metrics_out)
        rows = metric_rows(
            run_id=handle.run_dir.name,
            framework=env.framework_label,
            model_params=parameter_count(env.arch()),
            learners=env.learners,
            rounds=metrics,
        )
        write_metrics_csv(csv_path, rows)
    return FederationResult(
        run_dir=handle.run_dir,
        run_id=handle.run_dir.name,
        metrics=metrics,
        eval_losses=losses,
        events=events,
        csv_path=csv_path,
        shutdown_report=report,
    )
