import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fedrig.protocol as protocol
from fedrig.engine import MODEL_SIZES, TrainStats, build_mlp
from fedrig.protocol import (
    Ack,
    EvalReply,
    EvaluateModel,
    FrameDecoder,
    Hyperparams,
    JoinAck,
    JoinFederation,
    MalformedPayload,
    MarkTaskCompleted,
    MsgType,
    OversizeMessage,
    Ping,
    Pong,
    RunTask,
    ShutDown,
    TruncatedFrame,
    UnknownMessageType,
    decode_message,
    encode_message,
)
from fedrig.tensors import ByteOrder, ModelState, Tensor, encode_tensor


def small_model(version=0, n=3):
    tensors = [
        encode_tensor(Tensor(f"t{i}", (2,), np.array([i, i + 0.5], dtype=np.float32)))
        for i in range(n)
    ]
    return ModelState(version=version, tensors=tensors)


SAMPLES = [
    JoinFederation(learner_id="L1", endpoint="127.0.0.1:9", num_samples=100),
    JoinFederation(learner_id="L1", endpoint="mem://x", num_samples=1, public_cert=b"\x00cert"),
    JoinAck(accepted=True),
    JoinAck(accepted=False),
    RunTask(task_id="r1:L1:train", model=small_model(), hyperparams=Hyperparams(2, 50, 0.5)),
    Ack(task_id="t1", status=True),
    MarkTaskCompleted(
        task_id="r1:L1:train",
        learner_id="L1",
        model=small_model(version=3),
        stats=TrainStats(1.25, 10, 5, 100),
    ),
    EvaluateModel(task_id="r1:L1:eval", model=small_model()),
    EvalReply(task_id="r1:L1:eval", loss=0.125),
    Ping(),
    Pong(),
    ShutDown(),
]


class TestFrameLayout:
    def test_ping_is_the_documented_five_bytes(self):
        assert encode_message(Ping()) == bytes.fromhex("0000000007")

    def test_type_byte_assignments(self):
        expected = {
            JoinFederation: 0x01,
            JoinAck: 0x02,
            RunTask: 0x03,
            Ack: 0x04,
            MarkTaskCompleted: 0x05,
            EvaluateModel: 0x06,
            Ping: 0x07,
            EvalReply: 0x08,
            Pong: 0x09,
            ShutDown: 0x0A,
        }
        for msg in SAMPLES:
            assert encode_message(msg)[4] == expected[type(msg)]
        assert {m.value for m in MsgType} == set(expected.values())

    def test_header_is_big_endian_payload_length(self):
        frame = encode_message(Ack(task_id="ab", status=True))
        assert int.from_bytes(frame[:4], "big") == len(frame) - 5

    def test_encoding_is_deterministic(self):
        msg = Ack(task_id="t1", status=True)
        assert encode_message(msg) == encode_message(msg)


class TestRoundtrip:
    @pytest.mark.parametrize("msg", SAMPLES, ids=lambda m: type(m).__name__)
    def test_every_variant(self, msg):
        assert decode_message(encode_message(msg)) == msg

    def test_full_sized_model_roundtrip(self):
        model = build_mlp(MODEL_SIZES["100k"], seed=3)
        msg = RunTask(task_id="big", model=model)
        back = decode_message(encode_message(msg))
        assert back == msg
        assert len(back.model.tensors) == 202

    def test_trailing_bytes_beyond_frame_ignored(self):
        msg = EvalReply(task_id="x", loss=1.5)
        assert decode_message(encode_message(msg) + b"garbage") == msg


class TestErrors:
    def test_unknown_message_type(self):
        with pytest.raises(UnknownMessageType):
            decode_message(bytes([0, 0, 0, 0, 0xFF]))

    def test_truncated_frame(self):
        # header promises 10 payload bytes, only 4 present
        with pytest.raises(TruncatedFrame):
            decode_message(bytes([0, 0, 0, 10, 0x04]) + b"abcd")

    def test_truncated_header(self):
        with pytest.raises(TruncatedFrame):
            decode_message(b"\x00\x00")

    def test_payload_trailing_bytes_rejected(self):
        frame = bytearray(encode_message(Ack(task_id="t", status=True)))
        frame += b"\x00"
        frame[:4] = (len(frame) - 5).to_bytes(4, "big")
        with pytest.raises(MalformedPayload):
            decode_message(bytes(frame))

    def test_payload_ending_mid_field_rejected(self):
        frame = bytearray(encode_message(Ack(task_id="t", status=True)))
        del frame[-1]  # drop the status byte
        frame[:4] = (len(frame) - 5).to_bytes(4, "big")
        with pytest.raises(MalformedPayload):
            decode_message(bytes(frame))

    def test_length_guard(self):
        header = (2**31 + 1).to_bytes(4, "big") + b"\x07"
        with pytest.raises(MalformedPayload):
            decode_message(header)

    def test_oversize_on_encode(self, monkeypatch):
        monkeypatch.setattr(protocol, "MAX_PAYLOAD", 8)
        with pytest.raises(OversizeMessage):
            encode_message(Ack(task_id="long-task-id", status=True))

    def test_duplicate_tensor_names_rejected_at_decode(self):
        dup = encode_tensor(Tensor("t", (1,), np.zeros(1, np.float32)))
        model = ModelState(version=0, tensors=[dup])
        model.tensors.append(dup)  # bypass construction validation
        frame = encode_message(EvaluateModel(task_id="e", model=model))
        with pytest.raises(MalformedPayload):
            decode_message(frame)


texts = st.text(max_size=20)


@st.composite
def wire_tensors(draw):
    shape = tuple(draw(st.lists(st.integers(0, 4), max_size=3)))
    n = int(np.prod(shape)) if shape else 1
    values = np.array(
        draw(st.lists(st.integers(0, 2**32 - 1), min_size=n, max_size=n)), dtype=np.uint32
    ).view(np.float32)
    name = draw(st.text(min_size=1, max_size=8))
    order = draw(st.sampled_from(list(ByteOrder)))
    return encode_tensor(Tensor(name, shape, values), order)


@st.composite
def wire_models(draw):
    count = draw(st.integers(0, 4))
    tensors, names = [], set()
    while len(tensors) < count:
        t = draw(wire_tensors())
        if t.name not in names:
            names.add(t.name)
            tensors.append(t)
    return ModelState(version=draw(st.integers(0, 2**40)), tensors=tensors)


@st.composite
def messages(draw):
    kind = draw(st.integers(0, 9))
    if kind == 0:
        return JoinFederation(
            learner_id=draw(texts),
            endpoint=draw(texts),
            num_samples=draw(st.integers(0, 2**32 - 1)),
            public_cert=draw(st.none() | st.binary(max_size=64)),
        )
    if kind == 1:
        return JoinAck(accepted=draw(st.booleans()))
    if kind == 2:
        return RunTask(
            task_id=draw(texts),
            model=draw(wire_models()),
            hyperparams=Hyperparams(
                epochs=draw(st.integers(0, 2**32 - 1)),
                batch_size=draw(st.integers(0, 2**32 - 1)),
                learning_rate=draw(st.floats(allow_nan=False)),
            ),
        )
    if kind == 3:
        return Ack(task_id=draw(texts), status=draw(st.booleans()))
    if kind == 4:
        return MarkTaskCompleted(
            task_id=draw(texts),
            learner_id=draw(texts),
            model=draw(wire_models()),
            stats=TrainStats(
                time_per_batch_ms=draw(st.floats(min_value=0, allow_nan=False)),
                completed_steps=draw(st.integers(0, 2**32 - 1)),
                completed_epochs=draw(st.integers(0, 2**32 - 1)),
                num_training_samples=draw(st.integers(0, 2**32 - 1)),
            ),
        )
    if kind == 5:
        return EvaluateModel(task_id=draw(texts), model=draw(wire_models()))
    if kind == 6:
        return EvalReply(task_id=draw(texts), loss=draw(st.floats(allow_nan=False)))
    return draw(st.sampled_from([Ping(), Pong(), ShutDown()]))


class TestPropertyRoundtrip:
    @settings(max_examples=120, deadline=None)
    @given(messages())
    def test_roundtrip(self, msg):
        assert decode_message(encode_message(msg)) == msg

    @settings(max_examples=40, deadline=None)
    @given(st.lists(messages(), min_size=1, max_size=5), st.data())
    def test_chunk_boundaries_do_not_matter(self, msgs, data):
        stream = b"".join(encode_message(m) for m in msgs)
        cuts = sorted(
            data.draw(
                st.lists(st.integers(0, len(stream)), max_size=6), label="cuts"
            )
        )
        decoder = FrameDecoder()
        out = []
        prev = 0
        for cut in cuts + [len(stream)]:
            out += decoder.feed(stream[prev:cut])
            prev = cut
        assert out == msgs
        assert decoder.pending_bytes == 0
