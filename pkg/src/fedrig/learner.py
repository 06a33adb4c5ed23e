"""Learner service.

Receives training tasks, acknowledges them immediately, trains in the
background on its private synthetic dataset, and delivers the trained
model back to the controller over a fresh connection. Evaluation requests
are served synchronously on the requesting connection, queued behind any
running task: one executor slot means training and evaluation never
interleave.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

from .engine import Dataset, evaluate, generate_dataset, sgd_train
from .eventlog import EventLogger
from .protocol import (
    Ack,
    EvalReply,
    EvaluateModel,
    JoinAck,
    JoinFederation,
    MarkTaskCompleted,
    Message,
    Ping,
    Pong,
    RunTask,
    ShutDown,
)
from .transport import (
    Connection,
    ConnectionClosed,
    TlsClient,
    TlsServer,
    listen,
    request,
)

__all__ = ["JoinRejected", "Learner", "LearnerConfig", "TASK_QUEUE_BOUND"]

TASK_QUEUE_BOUND = 16
JOIN_ATTEMPTS = 5


class JoinRejected(RuntimeError):
    """The controller refused this learner's registration."""


@dataclass
class LearnerConfig:
    index: int
    controller: str
    listen: str
    learner_id: str = ""
    num_samples: int = 100
    input_dim: int = 13
    train_delay_s: float = 0.0
    drain_on_shutdown: bool = False
    queue_bound: int = TASK_QUEUE_BOUND
    completion_backoff_s: tuple[float, ...] = (1.0, 2.0, 4.0)
    dial_timeout_s: float = 5.0
    log_path: str | None = None
    tls_server: TlsServer | None = None
    tls_client: TlsClient | None = None

    def __post_init__(self) -> None:
        if not self.learner_id:
            self.learner_id = f"learner_{self.index:03d}"


class _EvalBox:
    """Hand-off slot between a connection handler and the executor."""

    __slots__ = ("done", "loss", "error")

    def __init__(self) -> None:
        self.done = threading.Event()
        self.loss: float | None = None
        self.error: str | None = None


@dataclass
class _TrainTask:
    msg: RunTask


@dataclass
class _EvalTask:
    msg: EvaluateModel
    box: _EvalBox = field(default_factory=_EvalBox)


class Learner:
    def __init__(self, config: LearnerConfig) -> None:
        self.config = config
        self.log = EventLogger(config.log_path)
        # Train and test sets are equal-sized but come from disjoint seed
        # streams, both fixed by the learner index alone.
        self.train_data: Dataset = generate_dataset(
            config.num_samples, config.input_dim, seed=2 * config.index
        )
        self.test_data: Dataset = generate_dataset(
            config.num_samples, config.input_dim, seed=2 * config.index + 1
        )
        self._tasks: queue.Queue = queue.Queue(maxsize=config.queue_bound)
        self._completions: queue.Queue = queue.Queue()
        self._listener = None
        self._shutdown = threading.Event()
        self._threads: list[threading.Thread] = []
        self.completions_sent = 0

    # ------------------------------------------------------------------
    # lifecycle
    # ------------------------------------------------------------------

    @property
    def endpoint(self) -> str:
        return self._listener.endpoint if self._listener else self.config.listen

    def start(self) -> None:
        """Bind, join the federation (or raise JoinRejected), then serve."""
        self._listener = listen(self.config.listen, tls=self.config.tls_server)
        cert_bytes = None
        if self.config.tls_server is not None:
            with open(self.config.tls_server.cert_file, "rb") as fh:
                cert_bytes = fh.read()
        self._join(cert_bytes)
        for target in (self._executor_loop, self._sender_loop, self._accept_loop):
            t = threading.Thread(target=target, daemon=True, name=target.__name__)
            t.start()
            self._threads.append(t)

    def _join(self, cert_bytes: bytes | None) -> None:
        msg = JoinFederation(
            learner_id=self.config.learner_id,
            endpoint=self.endpoint,
            num_samples=self.config.num_samples,
            public_cert=cert_bytes,
        )
        last_exc: Exception | None = None
        for attempt in range(JOIN_ATTEMPTS):
            try:
                reply = request(
                    self.config.controller,
                    msg,
                    tls=self.config.tls_client,
                    dial_timeout=self.config.dial_timeout_s,
                )
            except (ConnectionError, OSError, TimeoutError) as exc:
                last_exc = exc
                time.sleep(0.5)
                continue
            if isinstance(reply, JoinAck) and reply.accepted:
                self.log.log("joined", learner_id=self.config.learner_id)
                return
            self._listener.close()
            raise JoinRejected(f"controller rejected {self.config.learner_id}")
        self._listener.close()
        raise ConnectionError(f"cannot reach controller: {last_exc!r}")

    def run(self) -> None:
        """Start and serve until a ShutDown message arrives."""
        self.start()
        self._shutdown.wait()
        self._close_down()

    def stop(self) -> None:
        self._shutdown.set()

    def _close_down(self) -> None:
        if self._listener is not None:
            self._listener.close()
        for t in self._threads:
            t.join(timeout=5.0 + self.config.train_delay_s)
        self.log.log("stopped")
        self.log.close()

    # ------------------------------------------------------------------
    # serving
    # ------------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._shutdown.is_set():
            try:
                conn = self._listener.accept(timeout=0.5)
            except TimeoutError:
                continue
            except OSError:
                break
            threading.Thread(target=self._handle_conn, args=(conn,), daemon=True).start()

    def _handle_conn(self, conn: Connection) -> None:
        try:
            while not self._shutdown.is_set():
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
        if isinstance(msg, RunTask):
            return self.handle_run_task(msg)
        if isinstance(msg, EvaluateModel):
            return self.handle_evaluate_model(msg)
        if isinstance(msg, ShutDown):
            self._initiate_shutdown()
            return None
        self.log.log("unexpected_message", error=type(msg).__name__)
        return None

    def handle_run_task(self, msg: RunTask) -> Ack:
        """Enqueue the task and acknowledge before any training happens.

        A false status means the task was not submitted: the executor queue
        is full (bound 16) or the model is unusable on its face.
        """
        if not msg.model.tensors:
            self.log.log("task_rejected", task_id=msg.task_id, error="empty model")
            return Ack(task_id=msg.task_id, status=False)
        try:
            self._tasks.put_nowait(_TrainTask(msg))
        except queue.Full:
            self.log.log("task_rejected", task_id=msg.task_id, error="queue full")
            return Ack(task_id=msg.task_id, status=False)
        self.log.log("task_accepted", task_id=msg.task_id)
        return Ack(task_id=msg.task_id, status=True)

    def handle_evaluate_model(self, msg: EvaluateModel) -> Message:
        """Queue the evaluation behind any running task and block this
        connection until the loss is ready (the caller holds it open)."""
        task = _EvalTask(msg)
        try:
            self._tasks.put_nowait(task)
        except queue.Full:
            self.log.log("eval_rejected", task_id=msg.task_id, error="queue full")
            return Ack(task_id=msg.task_id, status=False)
        while not task.box.done.wait(timeout=0.1):
            if self._shutdown.is_set():
                return Ack(task_id=msg.task_id, status=False)
        if task.box.error is not None:
            self.log.log("eval_failed", task_id=msg.task_id, error=task.box.error)
            return Ack(task_id=msg.task_id, status=False)
        return EvalReply(task_id=msg.task_id, loss=task.box.loss)

    def _initiate_shutdown(self) -> None:
        self.log.log("shutdown_received", drain=self.config.drain_on_shutdown)
        if not self.config.drain_on_shutdown:
            dropped = 0
            while True:
                try:
                    item = self._tasks.get_nowait()
                except queue.Empty:
                    break
                if isinstance(item, _EvalTask):
                    item.box.error = "abandoned at shutdown"
                    item.box.done.set()
                dropped += 1
            if dropped:
                self.log.log("tasks_abandoned", abandoned=dropped)
        self._shutdown.set()

    # ------------------------------------------------------------------
    # executor: one slot, training and evaluation strictly serialized
    # ------------------------------------------------------------------

    def _executor_loop(self) -> None:
        while True:
            if self._shutdown.is_set():
                if not self.config.drain_on_shutdown or self._tasks.empty():
                    break
            try:
                item = self._tasks.get(timeout=0.1)
            except queue.Empty:
                continue
            if isinstance(item, _TrainTask):
                self._run_training(item.msg)
            else:
                self._run_evaluation(item)

    def _run_training(self, msg: RunTask) -> None:
        if self.config.train_delay_s > 0:
            time.sleep(self.config.train_delay_s)  # simulated extra compute
        hp = msg.hyperparams
        try:
            model, stats = sgd_train(
                msg.model, self.train_data, hp.epochs, hp.batch_size, hp.learning_rate
            )
        except Exception as exc:  # broken model chains surface here
            self.log.log("task_failed", task_id=msg.task_id, error=repr(exc))
            return
        self.log.log(
            "task_trained",
            task_id=msg.task_id,
            duration_ms=stats.time_per_batch_ms * stats.completed_steps,
        )
        self._completions.put(
            MarkTaskCompleted(
                task_id=msg.task_id,
                learner_id=self.config.learner_id,
                model=model,
                stats=stats,
            )
        )

    def _run_evaluation(self, task: _EvalTask) -> None:
        try:
            task.box.loss = evaluate(task.msg.model, self.test_data)
        except Exception as exc:
            task.box.error = repr(exc)
        else:
            self.log.log("eval_served", task_id=task.msg.task_id, loss=task.box.loss)
        task.box.done.set()

    # ------------------------------------------------------------------
    # completion delivery, decoupled from the executor so a slow
    # controller cannot block the next task
    # ------------------------------------------------------------------

    def _sender_loop(self) -> None:
        while not (self._shutdown.is_set() and self._completions.empty()):
            try:
                msg = self._completions.get(timeout=0.1)
            except queue.Empty:
                continue
            self._deliver_completion(msg)

    def _deliver_completion(self, msg: MarkTaskCompleted) -> None:
        delays = (0.0,) + tuple(self.config.completion_backoff_s)
        for attempt, delay in enumerate(delays):
            if delay:
                if self._shutdown.wait(timeout=delay):
                    break
            try:
                reply = request(
                    self.config.controller,
                    msg,
                    tls=self.config.tls_client,
                    dial_timeout=self.config.dial_timeout_s,
                )
            except (ConnectionError, OSError, TimeoutError) as exc:
                self.log.log(
                    "completion_retry", task_id=msg.task_id, error=repr(exc), attempt=attempt
                )
                continue
            if isinstance(reply, Ack) and not reply.status:
                self.log.log("completion_stale", task_id=msg.task_id)
            else:
                self.log.log("completion_sent", task_id=msg.task_id)
            self.completions_sent += 1
            return
        self.log.log("completion_dropped", task_id=msg.task_id)
