"""Shared fixtures: unique in-process endpoints and a scripted peer stub."""

from __future__ import annotations

import itertools
import threading

import pytest

from fedrig.protocol import (
    Ack,
    EvalReply,
    EvaluateModel,
    JoinAck,
    JoinFederation,
    MarkTaskCompleted,
    Ping,
    Pong,
    RunTask,
    ShutDown,
)
from fedrig.transport import ConnectionClosed, listen

_EP_COUNTER = itertools.count()


@pytest.fixture
def mem_ep():
    """Factory for unique mem:// endpoint names within the test process."""

    def make(tag: str = "ep") -> str:
        return f"mem://test/{tag}-{next(_EP_COUNTER)}"

    return make


class ScriptedPeer:
    """A minimal wire-speaking peer for exercising controller or learner
    counterparts: records everything received, answers from a fixed script."""

    def __init__(self, endpoint: str, *, accept_join=True, ack_status=True, eval_loss=0.25):
        self.accept_join = accept_join
        self.ack_status = ack_status
        self.eval_loss = eval_loss
        self.received = []
        self.received_event = threading.Condition()
        self.listener = listen(endpoint)
        self._stop = False
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    @property
    def endpoint(self) -> str:
        return self.listener.endpoint

    def _serve(self) -> None:
        while not self._stop:
            try:
                conn = self.listener.accept(timeout=0.2)
            except TimeoutError:
                continue
            except OSError:
                return
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn) -> None:
        try:
            while True:
                msg = conn.recv_message(timeout=5.0)
                with self.received_event:
                    self.received.append(msg)
                    self.received_event.notify_all()
                if isinstance(msg, Ping):
                    conn.send_message(Pong())
                elif isinstance(msg, JoinFederation):
                    conn.send_message(JoinAck(accepted=self.accept_join))
                elif isinstance(msg, (MarkTaskCompleted, RunTask)):
                    conn.send_message(Ack(task_id=msg.task_id, status=self.ack_status))
                elif isinstance(msg, EvaluateModel):
                    conn.send_message(EvalReply(task_id=msg.task_id, loss=self.eval_loss))
                elif isinstance(msg, ShutDown):
                    break
        except (ConnectionClosed, ConnectionError, OSError, TimeoutError):
            pass
        finally:
            conn.close()

    def wait_for(self, predicate, timeout: float = 10.0) -> bool:
        with self.received_event:
            return self.received_event.wait_for(
                lambda: any(predicate(m) for m in self.received), timeout=timeout
            )

    def count(self, msg_type) -> int:
        with self.received_event:
            return sum(isinstance(m, msg_type) for m in self.received)

    def close(self) -> None:
        self._stop = True
        self.listener.close()


@pytest.fixture
def scripted_peer(mem_ep):
    peers = []

    def make(**kwargs) -> ScriptedPeer:
        peer = ScriptedPeer(mem_ep("peer"), **kwargs)
        peers.append(peer)
        return peer

    yield make
    for peer in peers:
        peer.close()


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        print(f"\n[acceptance] {name}: {report.outcome.upper()}", flush=True)
    elif report.when == "setup" and report.skipped:
        print(f"\n[acceptance] {name}: SKIPPED", flush=True)
