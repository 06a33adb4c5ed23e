"""Federation controller service.

Owns the learner registry, schedules and dispatches training and
evaluation tasks, stores incoming local models, and aggregates them into
the next global model. Training tasks are dispatched as fire-and-forget
calls acknowledged immediately by the learner; evaluation calls are
synchronous, the connection stays open until the reply arrives.

All round/state mutations happen on a single event stream consumed by the
federation thread; connection handlers only validate, enqueue and answer.
Dispatch and evaluation I/O fan out across short-lived threads.
"""

from __future__ import annotations

import os
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregationPlan, ModelStore, fedavg, normalized_weights
from .eventlog import EventLogger
from .metrics import RoundMetrics
from .protocol import (
    Ack,
    EvalReply,
    EvaluateModel,
    Hyperparams,
    JoinAck,
    JoinFederation,
    MarkTaskCompleted,
    Message,
    Ping,
    Pong,
    RunTask,
    ShutDown,
)
from .tensors import ModelState
from .transport import (
    Connection,
    ConnectionClosed,
    TlsClient,
    TlsServer,
    connect,
    listen,
)

__all__ = ["Controller", "FederationConfig", "LearnerDescriptor", "INIT_TASK_ID"]

INIT_TASK_ID = "init"

SYNCHRONOUS = "synchronous"
ASYNCHRONOUS = "asynchronous"


@dataclass
class FederationConfig:
    """What to run: protocol mode, termination criteria, participation and
    the hyperparameters shipped with every training task."""

    mode: str = SYNCHRONOUS
    max_rounds: int | None = None
    max_wall_clock_s: float | None = None
    participation: float = 1.0
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self) -> None:
        if self.mode not in (SYNCHRONOUS, ASYNCHRONOUS):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_rounds is None and self.max_wall_clock_s is None:
            raise ValueError("set max_rounds and/or max_wall_clock_s")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise ValueError("max_rounds must be positive")
        if self.max_wall_clock_s is not None and self.max_wall_clock_s < 0:
            raise ValueError("max_wall_clock_s must be non-negative")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must be in (0, 1]")


@dataclass
class LearnerDescriptor:
    learner_id: str
    endpoint: str
    num_samples: int
    public_cert: bytes | None = None


class Controller:
    """One federation's coordinating service.

    Startup order: ``start()`` binds the listener and spins up the accept
    and federation threads. Rounds begin once an initial model has been
    shipped (a RunTask with task id "init") and at least
    ``expected_learners`` learners have registered.
    """

    def __init__(
        self,
        listen_endpoint: str,
        config: FederationConfig,
        *,
        expected_learners: int = 1,
        seed: int = 0,
        agg_workers: int | None = None,
        train_timeout_s: float = 600.0,
        eval_timeout_s: float = 300.0,
        dial_timeout_s: float = 5.0,
        ack_timeout_s: float = 30.0,
        log_path=None,
        tls_server: TlsServer | None = None,
        tls_client: TlsClient | None = None,
    ) -> None:
        self.config = config
        self.expected_learners = expected_learners
        self.agg_workers = agg_workers
        self.train_timeout_s = train_timeout_s
        self.eval_timeout_s = eval_timeout_s
        self.dial_timeout_s = dial_timeout_s
        self.ack_timeout_s = ack_timeout_s
        self._tls_server = tls_server
        self._tls_client = tls_client
        self._listen_endpoint = listen_endpoint
        self._listener = None

        self.registry: dict[str, LearnerDescriptor] = {}
        self.store = ModelStore()
        self.global_model: ModelState | None = None
        self.hyperparams: Hyperparams = config.hyperparams
        self.round_metrics: list[RoundMetrics] = []
        self.eval_losses: dict[int, dict[str, float]] = {}
        self.completion_counts: dict[str, int] = {}

        self.log = EventLogger(log_path)
        self._rng = np.random.default_rng(seed)
        self._state = threading.Lock()
        self._events: queue.Queue = queue.Queue()
        self._pending_train: dict[str, str] = {}  # task_id -> learner_id
        self._round = 0
        self._started = False  # federation loop passed its gate
        self._finished = False
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # ------------------------------------------------------------------
    # lifecycle
    # ------------------------------------------------------------------

    def start(self) -> None:
        self._listener = listen(self._listen_endpoint, tls=self._tls_server)
        for target in (self._accept_loop, self._federation_loop):
            t = threading.Thread(target=target, daemon=True, name=target.__name__)
            t.start()
            self._threads.append(t)

    @property
    def endpoint(self) -> str:
        if self._listener is None:
            return self._listen_endpoint
        return self._listener.endpoint

    def stop(self) -> None:
        if self._stop.is_set():
            return
        self._stop.set()
        self._events.put(("wake", None))
        if self._listener is not None:
            self._listener.close()

    def serve(self) -> None:
        """Run until a ShutDown message (or ``stop()``) arrives."""
        self.start()
        self._stop.wait()
        for t in self._threads:
            t.join(timeout=2.0)
        self.log.close()

    def wait_complete(self, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._finished:
            if self._stop.is_set():
                return self._finished
            if deadline is not None and time.monotonic() >= deadline:
                return False
            time.sleep(0.02)
        return True

    # ------------------------------------------------------------------
    # connection handling
    # ------------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn = self._listener.accept(timeout=0.5)
            except TimeoutError:
                continue
            except OSError:
                break
            threading.Thread(
                target=self._handle_conn, args=(conn,), daemon=True
            ).start()

    def _handle_conn(self, conn: Connection) -> None:
        try:
            while not self._stop.is_set():
                try:
                    msg = conn.recv_message(timeout=30.0)
                except TimeoutError:
                    break
                reply = self._dispatch_message(msg)
                if reply is not None:
                    conn.send_message(reply)
                if isinstance(msg, ShutDown):
                    break
        except (ConnectionClosed, ConnectionError, OSError, ValueError) as exc:
            if not isinstance(exc, ConnectionClosed):
                self.log.log("connection_error", error=repr(exc))
        finally:
            conn.close()

    def _dispatch_message(self, msg: Message) -> Message | None:
        if isinstance(msg, Ping):
            return Pong()
        if isinstance(msg, JoinFederation):
            return self.register_learner(msg)
        if isinstance(msg, RunTask):
            return self._handle_initial_model(msg)
        if isinstance(msg, MarkTaskCompleted):
            return Ack(task_id=msg.task_id, status=self._accept_completion(msg))
        if isinstance(msg, ShutDown):
            self.log.log("shutdown_received")
            self.stop()
            return None
        self.log.log("unexpected_message", error=type(msg).__name__)
        return None

    def register_learner(self, msg: JoinFederation) -> JoinAck:
        """Upsert the learner's registry entry; re-registration replaces it."""
        if not msg.learner_id or not msg.endpoint or ":" not in msg.endpoint.replace("mem://", "m:"):
            self.log.log(
                "registration_rejected",
                learner_id=msg.learner_id or None,
                error="malformed descriptor",
            )
            return JoinAck(accepted=False)
        if msg.num_samples <= 0:
            self.log.log(
                "registration_rejected", learner_id=msg.learner_id, error="num_samples <= 0"
            )
            return JoinAck(accepted=False)
        with self._state:
            self.registry[msg.learner_id] = LearnerDescriptor(
                learner_id=msg.learner_id,
                endpoint=msg.endpoint,
                num_samples=msg.num_samples,
                public_cert=msg.public_cert,
            )
            size = len(self.registry)
        self.log.log("learner_registered", learner_id=msg.learner_id, registry_size=size)
        return JoinAck(accepted=True)

    def _handle_initial_model(self, msg: RunTask) -> Ack:
        if msg.task_id != INIT_TASK_ID:
            self.log.log("unexpected_message", error=f"RunTask {msg.task_id!r} at controller")
            return Ack(task_id=msg.task_id, status=False)
        with self._state:
            if self._started:
                self.log.log("initial_model_rejected", error="federation already running")
                return Ack(task_id=msg.task_id, status=False)
            self.global_model = msg.model
            self.hyperparams = msg.hyperparams
        self.log.log("initial_model", version=msg.model.version, tensors=len(msg.model.tensors))
        return Ack(task_id=msg.task_id, status=True)

    def _accept_completion(self, msg: MarkTaskCompleted) -> bool:
        with self._state:
            if self._finished or self._stop.is_set():
                ok = False
            elif self.config.mode == SYNCHRONOUS:
                ok = msg.task_id in self._pending_train
            else:
                ok = msg.learner_id in self.registry
        if not ok:
            self.log.log("stale_completion", learner_id=msg.learner_id, task_id=msg.task_id)
            return False
        self._events.put(("completed", msg))
        return True

    # ------------------------------------------------------------------
    # federation rounds
    # ------------------------------------------------------------------

    def check_termination(self) -> bool:
        if self.config.max_rounds is not None and self._round >= self.config.max_rounds:
            return True
        if self.config.max_wall_clock_s is not None:
            if time.monotonic() - self._fed_started >= self.config.max_wall_clock_s:
                return True
        return False

    def select_participants(self) -> list[str]:
        """Seeded uniform sampling without replacement, stable order by id.

        Full participation consumes no randomness, so growing registries do
        not perturb later draws.
        """
        with self._state:
            ids = sorted(self.registry)
        if not ids:
            return []
        if self.config.participation >= 1.0:
            return ids
        k = max(1, round(self.config.participation * len(ids)))
        picked = self._rng.choice(len(ids), size=k, replace=False)
        return sorted(ids[i] for i in picked)

    def _federation_loop(self) -> None:
        while not self._stop.is_set():
            with self._state:
                ready = self.global_model is not None and len(self.registry) >= self.expected_learners
            if ready:
                break
            time.sleep(0.02)
        if self._stop.is_set():
            return
        with self._state:
            self._started = True
        self._fed_started = time.monotonic()
        self.log.log(
            "federation_start",
            learners=len(self.registry),
            version=self.global_model.version,
            mode=self.config.mode,
        )
        try:
            if self.config.mode == SYNCHRONOUS:
                while not self._stop.is_set() and not self.check_termination():
                    self._round += 1
                    self._run_sync_round(self._round)
            else:
                self._run_async()
        finally:
            with self._state:
                self._finished = True
                version = self.global_model.version if self.global_model else 0
            self.log.log(
                "federation_complete",
                round=self._round,
                version=version,
                completions=sum(self.completion_counts.values()),
            )

    # -- synchronous ----------------------------------------------------

    def _dispatch_train(self, round_number: int, learner_id: str, task_id: str, model, results):
        """Send one RunTask and collect the immediate acknowledgment."""
        endpoint = self.registry[learner_id].endpoint
        try:
            with connect(endpoint, tls=self._tls_client, timeout=self.dial_timeout_s) as conn:
                conn.send_message(RunTask(task_id=task_id, model=model, hyperparams=self.hyperparams))
                sent_ts = self.log.log("run_task_sent", round=round_number, learner_id=learner_id)
                reply = conn.recv_message(timeout=self.ack_timeout_s)
            ok = isinstance(reply, Ack) and reply.status and reply.task_id == task_id
        except (ConnectionError, OSError, TimeoutError, ValueError) as exc:
            results[learner_id] = (False, None)
            self.log.log(
                "dispatch_failure", round=round_number, learner_id=learner_id, error=repr(exc)
            )
            with self._state:
                self._pending_train.pop(task_id, None)
            return
        if ok:
            ack_ts = self.log.log(
                "train_ack",
                round=round_number,
                learner_id=learner_id,
                duration_ms=(time.monotonic() - sent_ts) * 1000.0,
            )
            results[learner_id] = (True, ack_ts)
        else:
            results[learner_id] = (False, None)
            self.log.log(
                "dispatch_failure", round=round_number, learner_id=learner_id, error="nack"
            )
            with self._state:
                self._pending_train.pop(task_id, None)

    def _dispatch_eval(self, round_number: int, learner_id: str, model, replies):
        task_id = f"r{round_number}:{learner_id}:eval"
        endpoint = self.registry[learner_id].endpoint
        try:
            with connect(endpoint, tls=self._tls_client, timeout=self.dial_timeout_s) as conn:
                conn.send_message(EvaluateModel(task_id=task_id, model=model))
                sent_ts = self.log.log(
                    "eval_request_sent", round=round_number, learner_id=learner_id
                )
                reply = conn.recv_message(timeout=self.eval_timeout_s)
            if isinstance(reply, EvalReply) and reply.task_id == task_id:
                self.log.log(
                    "eval_reply",
                    round=round_number,
                    learner_id=learner_id,
                    duration_ms=(time.monotonic() - sent_ts) * 1000.0,
                    loss=reply.loss,
                )
                replies[learner_id] = reply.loss
            else:
                self.log.log(
                    "eval_failure", round=round_number, learner_id=learner_id, error="bad reply"
                )
        except (ConnectionError, OSError, TimeoutError, ValueError) as exc:
            self.log.log(
                "eval_failure", round=round_number, learner_id=learner_id, error=repr(exc)
            )

    def _run_sync_round(self, round_number: int) -> None:
        participants = self.select_participants()
        if not participants:
            self.log.log("round_aborted", round=round_number, error="no registered learners")
            time.sleep(0.2)
            return
        model = self.global_model
        task_ids = {f"r{round_number}:{lid}:train": lid for lid in participants}
        with self._state:
            self._pending_train = dict(task_ids)
        round_start = self.log.log("round_start", round=round_number, participants=len(participants))

        ack_results: dict[str, tuple[bool, float | None]] = {}
        threads = [
            threading.Thread(
                target=self._dispatch_train,
                args=(round_number, lid, tid, model, ack_results),
                daemon=True,
            )
            for tid, lid in task_ids.items()
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        dispatch_end = time.monotonic()

        with self._state:
            outstanding = len(self._pending_train)
        if outstanding == 0:
            self.log.log("round_aborted", round=round_number, error="no dispatch succeeded")
            time.sleep(0.2)
            return

        # Wait for completions; stragglers are abandoned at the timeout and
        # the round aggregates whatever arrived (quorum of one).
        completed: list[str] = []
        last_completed_ts = None
        deadline = dispatch_end + self.train_timeout_s
        while not self._stop.is_set():
            with self._state:
                if not self._pending_train:
                    break
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                with self._state:
                    stragglers = sorted(self._pending_train.values())
                    self._pending_train = {}
                self.log.log("round_timeout", round=round_number, stragglers=stragglers)
                break
            try:
                kind, payload = self._events.get(timeout=min(0.25, remaining))
            except queue.Empty:
                continue
            if kind != "completed":
                continue
            msg: MarkTaskCompleted = payload
            with self._state:
                if msg.task_id not in self._pending_train:
                    known = False
                else:
                    del self._pending_train[msg.task_id]
                    known = True
            if not known:
                self.log.log(
                    "stale_completion", learner_id=msg.learner_id, task_id=msg.task_id
                )
                continue
            self.store.insert(msg.learner_id, msg.model, msg.stats.num_training_samples)
            self.completion_counts[msg.learner_id] = (
                self.completion_counts.get(msg.learner_id, 0) + 1
            )
            completed.append(msg.learner_id)
            last_completed_ts = self.log.log(
                "task_completed",
                round=round_number,
                learner_id=msg.learner_id,
                duration_ms=msg.stats.time_per_batch_ms * msg.stats.completed_steps,
            )

        if not completed:
            self.log.log("round_aborted", round=round_number, error="no model received")
            return

        new_model, agg_start_ts, agg_end_ts = self._aggregate(sorted(completed), round_number)
        with self._state:
            self.global_model = new_model

        replies: dict[str, float] = {}
        eval_threads = [
            threading.Thread(
                target=self._dispatch_eval,
                args=(round_number, lid, new_model, replies),
                daemon=True,
            )
            for lid in participants
        ]
        for t in eval_threads:
            t.start()
        for t in eval_threads:
            t.join()
        self.eval_losses[round_number] = dict(replies)

        acks = [ts for ok, ts in ack_results.values() if ok and ts is not None]
        round_events = [e for e in self.log.events() if e.get("round") == round_number]
        eval_sent = [e["ts"] for e in round_events if e["event"] == "eval_request_sent"]
        eval_replies = [e["ts"] for e in round_events if e["event"] == "eval_reply"]
        self.log.log("round_end", round=round_number, losses=len(replies))
        if acks and last_completed_ts and eval_sent and eval_replies:
            rm = RoundMetrics(
                round=round_number,
                train_task_dispatch_s=max(acks) - round_start,
                train_round_s=last_completed_ts - round_start,
                aggregation_s=agg_end_ts - agg_start_ts,
                eval_task_dispatch_s=max(eval_sent) - agg_end_ts,
                eval_round_s=max(eval_replies) - agg_end_ts,
                federation_round_s=max(eval_replies) - round_start,
            )
            self.round_metrics.append(rm)
            self.log.log("round_metrics", round=round_number, **rm.by_metric())
        else:
            self.log.log("round_metrics_incomplete", round=round_number)

    def _aggregate(
        self, participant_ids: list[str], round_number: int
    ) -> tuple[ModelState, float, float]:
        """Weighted-average the named learners' stored models.

        Weights are training-sample counts normalized across participants;
        the controller owns versioning, so the result is re-stamped at
        current global version + 1. Returns the model and the start/end
        timestamps of the averaging call.
        """
        entries = self.store.select(participant_ids)
        weights = normalized_weights([samples for _, samples in entries])
        plan = AggregationPlan(
            participant_ids=tuple(participant_ids),
            weights=tuple(weights),
            worker_count=self.agg_workers or os.cpu_count() or 1,
        )
        t0 = self.log.log("aggregation_start", round=round_number, participants=len(entries))
        result = fedavg(
            [(model, w) for (model, _), w in zip(entries, plan.weights)],
            worker_count=plan.worker_count,
        )
        with self._state:
            base = self.global_model.version if self.global_model else 0
        stamped = ModelState(version=base + 1, tensors=result.tensors)
        t1 = self.log.log(
            "aggregation_end",
            round=round_number,
            duration_ms=(time.monotonic() - t0) * 1000.0,
            version=stamped.version,
        )
        return stamped, t0, t1

    # -- asynchronous ---------------------------------------------------

    def _redispatch(self, learner_id: str, task_number: int) -> None:
        task_id = f"a{task_number}:{learner_id}:train"
        with self._state:
            if learner_id not in self.registry:
                return
            model = self.global_model
            endpoint = self.registry[learner_id].endpoint
            self._pending_train[task_id] = learner_id
        try:
            with connect(endpoint, tls=self._tls_client, timeout=self.dial_timeout_s) as conn:
                conn.send_message(RunTask(task_id=task_id, model=model, hyperparams=self.hyperparams))
                self.log.log("run_task_sent", round=task_number, learner_id=learner_id)
                reply = conn.recv_message(timeout=self.ack_timeout_s)
            if isinstance(reply, Ack) and reply.status:
                self.log.log("train_ack", round=task_number, learner_id=learner_id)
            else:
                self.log.log("dispatch_failure", round=task_number, learner_id=learner_id, error="nack")
        except (ConnectionError, OSError, TimeoutError, ValueError) as exc:
            self.log.log(
                "dispatch_failure", round=task_number, learner_id=learner_id, error=repr(exc)
            )

    def _run_async(self) -> None:
        """Per-completion community updates, no global barrier.

        Every completion immediately re-aggregates over the latest stored
        model of every learner that has ever reported, then hands the new
        global model back to the reporting learner as its next task.
        """
        participants = self.select_participants()
        for lid in participants:
            threading.Thread(target=self._redispatch, args=(lid, 0), daemon=True).start()
        completions = 0
        deadline = (
            self._fed_started + self.config.max_wall_clock_s
            if self.config.max_wall_clock_s is not None
            else None
        )
        while not self._stop.is_set():
            if deadline is not None and time.monotonic() >= deadline:
                break
            if self.config.max_rounds is not None and completions >= self.config.max_rounds:
                break
            timeout = 0.25
            if deadline is not None:
                timeout = min(timeout, max(deadline - time.monotonic(), 0.01))
            try:
                kind, payload = self._events.get(timeout=timeout)
            except queue.Empty:
                continue
            if kind != "completed":
                continue
            msg: MarkTaskCompleted = payload
            with self._state:
                self._pending_train.pop(msg.task_id, None)
            self.store.insert(msg.learner_id, msg.model, msg.stats.num_training_samples)
            completions += 1
            self.completion_counts[msg.learner_id] = (
                self.completion_counts.get(msg.learner_id, 0) + 1
            )
            self._round = completions
            self.log.log("task_completed", round=completions, learner_id=msg.learner_id)
            new_model, _, _ = self._aggregate(sorted(self.store.ids()), completions)
            with self._state:
                self.global_model = new_model
            self.log.log("community_update", round=completions, version=new_model.version)
            threading.Thread(
                target=self._redispatch, args=(msg.learner_id, completions), daemon=True
            ).start()
