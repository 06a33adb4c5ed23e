import threading

import numpy as np
import pytest

from fedrig.engine import MlpArchitecture, build_mlp
from fedrig.protocol import Ack, Ping, Pong, RunTask
from fedrig.transport import (
    ConnectionClosed,
    connect,
    listen,
    request,
)


def echo_server(listener, replies=1):
    def serve():
        conn = listener.accept(timeout=5.0)
        try:
            for _ in range(replies):
                msg = conn.recv_message(timeout=5.0)
                conn.send_message(msg)
        finally:
            conn.close()

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    return t


class TestTcp:
    def test_roundtrip(self):
        listener = listen("127.0.0.1:0")
        echo_server(listener)
        with connect(listener.endpoint) as conn:
            conn.send_message(Ack(task_id="x", status=True))
            assert conn.recv_message(timeout=5.0) == Ack(task_id="x", status=True)
        listener.close()

    def test_large_message_across_fragments(self):
        listener = listen("127.0.0.1:0")
        echo_server(listener)
        model = build_mlp(MlpArchitecture(input_dim=13, hidden_layers=10, hidden_units=64), seed=0)
        msg = RunTask(task_id="big", model=model)
        with connect(listener.endpoint) as conn:
            conn.send_message(msg)
            assert conn.recv_message(timeout=10.0) == msg
        listener.close()

    def test_recv_timeout(self):
        listener = listen("127.0.0.1:0")
        with connect(listener.endpoint) as conn:
            with pytest.raises(TimeoutError):
                conn.recv_message(timeout=0.1)
        listener.close()

    def test_peer_close_raises_connection_closed(self):
        listener = listen("127.0.0.1:0")

        def close_fast():
            listener.accept(timeout=5.0).close()

        threading.Thread(target=close_fast, daemon=True).start()
        with connect(listener.endpoint) as conn:
            with pytest.raises(ConnectionClosed):
                conn.recv_message(timeout=5.0)
        listener.close()

    def test_refused(self):
        with pytest.raises(OSError):
            connect("127.0.0.1:1", timeout=0.5)


class TestMem:
    def test_roundtrip(self, mem_ep):
        listener = listen(mem_ep("echo"))
        echo_server(listener)
        with connect(listener.endpoint) as conn:
            conn.send_message(Ping())
            assert conn.recv_message(timeout=5.0) == Ping()
        listener.close()

    def test_unbound_name_refused(self):
        with pytest.raises(ConnectionRefusedError):
            connect("mem://test/never-bound")

    def test_closed_listener_unregisters(self, mem_ep):
        ep = mem_ep("gone")
        listener = listen(ep)
        listener.close()
        with pytest.raises(ConnectionRefusedError):
            connect(ep)

    def test_duplicate_bind_rejected(self, mem_ep):
        ep = mem_ep("dup")
        listener = listen(ep)
        with pytest.raises(OSError):
            listen(ep)
        listener.close()

    def test_close_propagates(self, mem_ep):
        listener = listen(mem_ep("close"))

        def close_fast():
            listener.accept(timeout=5.0).close()

        threading.Thread(target=close_fast, daemon=True).start()
        with connect(listener.endpoint) as conn:
            with pytest.raises(ConnectionClosed):
                conn.recv_message(timeout=5.0)
        listener.close()


class TestRequest:
    def test_one_shot_exchange(self, scripted_peer):
        peer = scripted_peer()
        assert request(peer.endpoint, Ping(), reply_timeout=5.0) == Pong()
