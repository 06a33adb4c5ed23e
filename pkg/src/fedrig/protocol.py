"""Framed binary message catalog spoken by driver, controller and learners.

Every message is one self-delimiting frame: a 4-byte big-endian payload
length, a 1-byte message type, then the payload. Payload fields are packed
in a fixed canonical order: strings as u32-BE length + UTF-8 bytes,
integers as fixed-width big-endian, booleans as one byte, reals as
IEEE-754 f64 big-endian, optional fields behind a presence byte, lists as
a u32-BE count followed by the elements.

Tensor records embed the codec's byte representation verbatim:
name (string), dtype (1 byte, 0x01 = F32), byte order (1 byte, 0x00 = LE,
0x01 = BE), rank (u8), shape dims (u32-BE each), then the raw data behind
a u64-BE length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .engine import TrainStats
from .tensors import ByteOrder, Dtype, ModelState, SerializedTensor

__all__ = [
    "Ack",
    "EvalReply",
    "EvaluateModel",
    "FrameDecoder",
    "HEADER_SIZE",
    "Hyperparams",
    "JoinAck",
    "JoinFederation",
    "MAX_PAYLOAD",
    "MalformedPayload",
    "MarkTaskCompleted",
    "Message",
    "MsgType",
    "OversizeMessage",
    "Ping",
    "Pong",
    "RunTask",
    "ShutDown",
    "TruncatedFrame",
    "UnknownMessageType",
    "decode_message",
    "encode_message",
    "frame_size",
]

HEADER_SIZE = 5
MAX_PAYLOAD = 2**31  # corruption guard on the length field


class OversizeMessage(ValueError):
    """Encoded payload would exceed the frame length guard."""


class TruncatedFrame(ValueError):
    """Fewer bytes available than the frame header promises."""


class UnknownMessageType(ValueError):
    """The frame's message-type byte is not in the catalog."""


class MalformedPayload(ValueError):
    """The payload does not parse as the fields of its message type."""


class MsgType(IntEnum):
    JOIN_FEDERATION = 0x01
    JOIN_ACK = 0x02
    RUN_TASK = 0x03
    ACK = 0x04
    MARK_TASK_COMPLETED = 0x05
    EVALUATE_MODEL = 0x06
    PING = 0x07
    EVAL_REPLY = 0x08
    PONG = 0x09
    SHUT_DOWN = 0x0A


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 1
    batch_size: int = 100
    learning_rate: float = 0.01


@dataclass(frozen=True)
class JoinFederation:
    learner_id: str
    endpoint: str
    num_samples: int
    public_cert: bytes | None = None


@dataclass(frozen=True)
class JoinAck:
    accepted: bool


@dataclass(frozen=True)
class RunTask:
    task_id: str
    model: ModelState
    hyperparams: Hyperparams = field(default_factory=Hyperparams)


@dataclass(frozen=True)
class Ack:
    task_id: str
    status: bool


@dataclass(frozen=True)
class MarkTaskCompleted:
    task_id: str
    learner_id: str
    model: ModelState
    stats: TrainStats


@dataclass(frozen=True)
class EvaluateModel:
    task_id: str
    model: ModelState


@dataclass(frozen=True)
class EvalReply:
    task_id: str
    loss: float


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class Pong:
    pass


@dataclass(frozen=True)
class ShutDown:
    pass


Message = (
    JoinFederation
    | JoinAck
    | RunTask
    | Ack
    | MarkTaskCompleted
    | EvaluateModel
    | EvalReply
    | Ping
    | Pong
    | ShutDown
)


class _Writer:
    __slots__ = ("buf",)

    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, v: int) -> None:
        self.buf.append(v)

    def u32(self, v: int) -> None:
        self.buf += v.to_bytes(4, "big")

    def u64(self, v: int) -> None:
        self.buf += v.to_bytes(8, "big")

    def f64(self, v: float) -> None:
        self.buf += struct.pack(">d", v)

    def boolean(self, v: bool) -> None:
        self.buf.append(1 if v else 0)

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf += raw

    def opt_bytes(self, b: bytes | None) -> None:
        if b is None:
            self.u8(0)
        else:
            self.u8(1)
            self.u32(len(b))
            self.buf += b


class _Reader:
    __slots__ = ("view", "pos")

    def __init__(self, view: memoryview) -> None:
        self.view = view
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.view):
            raise MalformedPayload("payload ends mid-field")
        out = bytes(self.view[self.pos : self.pos + n])
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def f64(self) -> float:
        return struct.unpack(">d", self.take(8))[0]

    def boolean(self) -> bool:
        v = self.u8()
        if v not in (0, 1):
            raise MalformedPayload(f"boolean byte must be 0 or 1, got {v}")
        return v == 1

    def string(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload("string field is not valid UTF-8") from exc

    def opt_bytes(self) -> bytes | None:
        present = self.u8()
        if present == 0:
            return None
        if present != 1:
            raise MalformedPayload(f"presence byte must be 0 or 1, got {present}")
        return self.take(self.u32())

    def expect_end(self) -> None:
        if self.pos != len(self.view):
            raise MalformedPayload(
                f"{len(self.view) - self.pos} trailing bytes in payload"
            )


def _write_tensor(w: _Writer, t: SerializedTensor) -> None:
    if len(t.shape) > 255:
        raise ValueError(f"tensor rank {len(t.shape)} exceeds the wire limit of 255")
    w.string(t.name)
    w.u8(t.dtype.value)
    w.u8(t.byte_order.value)
    w.u8(len(t.shape))
    for dim in t.shape:
        w.u32(dim)
    w.u64(len(t.data))
    w.buf += t.data


def _read_tensor(r: _Reader) -> SerializedTensor:
    name = r.string()
    dtype_tag = r.u8()
    try:
        dtype = Dtype(dtype_tag)
    except ValueError:
        raise MalformedPayload(f"unknown dtype tag 0x{dtype_tag:02x}") from None
    order_tag = r.u8()
    try:
        order = ByteOrder(order_tag)
    except ValueError:
        raise MalformedPayload(f"unknown byte-order tag 0x{order_tag:02x}") from None
    rank = r.u8()
    shape = tuple(r.u32() for _ in range(rank))
    data = r.take(r.u64())
    return SerializedTensor(name=name, dtype=dtype, byte_order=order, shape=shape, data=data)


def _write_model(w: _Writer, m: ModelState) -> None:
    w.u64(m.version)
    w.u32(len(m.tensors))
    for t in m.tensors:
        _write_tensor(w, t)


def _read_model(r: _Reader) -> ModelState:
    version = r.u64()
    count = r.u32()
    tensors = [_read_tensor(r) for _ in range(count)]
    try:
        return ModelState(version=version, tensors=tensors)
    except ValueError as exc:
        raise MalformedPayload(str(exc)) from None


def _write_hyperparams(w: _Writer, hp: Hyperparams) -> None:
    w.u32(hp.epochs)
    w.u32(hp.batch_size)
    w.f64(hp.learning_rate)


def _read_hyperparams(r: _Reader) -> Hyperparams:
    return Hyperparams(epochs=r.u32(), batch_size=r.u32(), learning_rate=r.f64())


def _write_stats(w: _Writer, s: TrainStats) -> None:
    w.f64(s.time_per_batch_ms)
    w.u32(s.completed_steps)
    w.u32(s.completed_epochs)
    w.u32(s.num_training_samples)


def _read_stats(r: _Reader) -> TrainStats:
    return TrainStats(
        time_per_batch_ms=r.f64(),
        completed_steps=r.u32(),
        completed_epochs=r.u32(),
        num_training_samples=r.u32(),
    )


def _enc_join(w: _Writer, m: JoinFederation) -> None:
    w.string(m.learner_id)
    w.string(m.endpoint)
    w.u32(m.num_samples)
    w.opt_bytes(m.public_cert)


def _dec_join(r: _Reader) -> JoinFederation:
    return JoinFederation(
        learner_id=r.string(),
        endpoint=r.string(),
        num_samples=r.u32(),
        public_cert=r.opt_bytes(),
    )


_ENCODERS = {
    JoinFederation: (MsgType.JOIN_FEDERATION, _enc_join),
    JoinAck: (MsgType.JOIN_ACK, lambda w, m: w.boolean(m.accepted)),
    RunTask: (
        MsgType.RUN_TASK,
        lambda w, m: (w.string(m.task_id), _write_model(w, m.model), _write_hyperparams(w, m.hyperparams)),
    ),
    Ack: (MsgType.ACK, lambda w, m: (w.string(m.task_id), w.boolean(m.status))),
    MarkTaskCompleted: (
        MsgType.MARK_TASK_COMPLETED,
        lambda w, m: (
            w.string(m.task_id),
            w.string(m.learner_id),
            _write_model(w, m.model),
            _write_stats(w, m.stats),
        ),
    ),
    EvaluateModel: (
        MsgType.EVALUATE_MODEL,
        lambda w, m: (w.string(m.task_id), _write_model(w, m.model)),
    ),
    EvalReply: (MsgType.EVAL_REPLY, lambda w, m: (w.string(m.task_id), w.f64(m.loss))),
    Ping: (MsgType.PING, lambda w, m: None),
    Pong: (MsgType.PONG, lambda w, m: None),
    ShutDown: (MsgType.SHUT_DOWN, lambda w, m: None),
}

_DECODERS = {
    MsgType.JOIN_FEDERATION: _dec_join,
    MsgType.JOIN_ACK: lambda r: JoinAck(accepted=r.boolean()),
    MsgType.RUN_TASK: lambda r: RunTask(
        task_id=r.string(), model=_read_model(r), hyperparams=_read_hyperparams(r)
    ),
    MsgType.ACK: lambda r: Ack(task_id=r.string(), status=r.boolean()),
    MsgType.MARK_TASK_COMPLETED: lambda r: MarkTaskCompleted(
        task_id=r.string(), learner_id=r.string(), model=_read_model(r), stats=_read_stats(r)
    ),
    MsgType.EVALUATE_MODEL: lambda r: EvaluateModel(task_id=r.string(), model=_read_model(r)),
    MsgType.EVAL_REPLY: lambda r: EvalReply(task_id=r.string(), loss=r.f64()),
    MsgType.PING: lambda r: Ping(),
    MsgType.PONG: lambda r: Pong(),
    MsgType.SHUT_DOWN: lambda r: ShutDown(),
}


def encode_message(message: Message) -> bytes:
    """Encode a message as one frame. Deterministic for equal inputs."""
    try:
        msg_type, enc = _ENCODERS[type(message)]
    except KeyError:
        raise TypeError(f"not a wire message: {type(message).__name__}") from None
    w = _Writer()
    enc(w, message)
    if len(w.buf) > MAX_PAYLOAD:
        raise OversizeMessage(f"payload of {len(w.buf)} bytes exceeds 2^31")
    return struct.pack(">IB", len(w.buf), msg_type.value) + bytes(w.buf)


def frame_size(data: bytes | memoryview) -> int:
    """Total byte length of the frame starting at data[0].

    Raises TruncatedFrame if even the header is incomplete.
    """
    if len(data) < HEADER_SIZE:
        raise TruncatedFrame(f"{len(data)} bytes, header needs {HEADER_SIZE}")
    (length,) = struct.unpack_from(">I", data)
    if length > MAX_PAYLOAD:
        raise MalformedPayload(f"frame length {length} exceeds the 2^31 guard")
    return HEADER_SIZE + length


def decode_message(data: bytes | memoryview) -> Message:
    """Decode the first complete frame in ``data``; trailing bytes are ignored.

    Raises:
        TruncatedFrame: fewer bytes than the header promises.
        UnknownMessageType: message-type byte outside the catalog.
        MalformedPayload: payload does not parse, or fails field invariants.
    """
    total = frame_size(data)
    if len(data) < total:
        raise TruncatedFrame(f"frame needs {total} bytes, {len(data)} available")
    type_byte = data[4]
    try:
        msg_type = MsgType(type_byte)
    except ValueError:
        raise UnknownMessageType(f"unknown message type 0x{type_byte:02x}") from None
    view = memoryview(data)[HEADER_SIZE:total]
    r = _Reader(view)
    message = _DECODERS[msg_type](r)
    r.expect_end()
    return message


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, get complete messages out.

    Chunk boundaries are irrelevant; a concatenation of frames decodes to
    the same message list however it is sliced.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[Message]:
        self._buf += chunk
        out = []
        while len(self._buf) >= HEADER_SIZE:
            total = frame_size(self._buf)
            if len(self._buf) < total:
                break
            out.append(decode_message(bytes(self._buf[:total])))
            del self._buf[:total]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
