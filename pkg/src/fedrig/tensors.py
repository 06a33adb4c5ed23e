"""Tensor byte codec.

Models travel, and are stored, as an ordered sequence of named tensors.
Each tensor is flattened row-major and dumped to raw bytes next to the
metadata needed to rebuild it: dtype, byte order and shape. Only 32-bit
IEEE-754 floats are implemented; the dtype tag is carried on every record
so further element types can be added without changing the byte layout.

Encoding and decoding go through an unsigned-integer view of the float
bits, so every bit pattern (including NaN payloads and infinities) is
preserved exactly in both byte orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "ByteOrder",
    "Dtype",
    "MalformedTensor",
    "ModelState",
    "SerializedTensor",
    "ShapeMismatch",
    "Tensor",
    "UnsupportedDtype",
    "decode_tensor",
    "element_count",
    "encode_tensor",
]


class MalformedTensor(ValueError):
    """A serialized tensor's byte length contradicts its shape and dtype."""


class UnsupportedDtype(ValueError):
    """A serialized tensor carries a dtype tag this codec cannot decode."""


class ShapeMismatch(ValueError):
    """Tensors that must line up structurally (a model chain, or the tensor
    lists of models being averaged) do not."""


class Dtype(Enum):
    F32 = 0x01

    @property
    def itemsize(self) -> int:
        return 4


class ByteOrder(Enum):
    LITTLE = 0x00
    BIG = 0x01


def element_count(shape: tuple[int, ...]) -> int:
    """Number of elements implied by a shape; the empty shape holds one."""
    return math.prod(shape)


@dataclass(frozen=True, eq=False)
class Tensor:
    """An in-memory tensor: a name, a shape and flat float32 values.

    ``values`` is normalised to a contiguous 1-D float32 array in row-major
    element order. Equality is bit-exact on the values (NaNs included).
    """

    name: str
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("tensor name must be non-empty")
        shape = tuple(int(d) for d in self.shape)
        if any(d < 0 for d in shape):
            raise ValueError(f"negative dimension in shape {shape}")
        flat = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        if flat.size != element_count(shape):
            raise ValueError(
                f"{flat.size} values do not fill shape {shape} "
                f"({element_count(shape)} elements)"
            )
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", flat)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True)
class SerializedTensor:
    """One tensor as opaque bytes plus the metadata to reconstruct it.

    Deliberately not validated on construction: malformed records can
    arrive off the wire, and ``decode_tensor`` is where they are rejected.
    """

    name: str
    dtype: Dtype
    byte_order: ByteOrder
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))


@dataclass
class ModelState:
    """An ordered list of serialized tensors plus a version counter.

    The unit shipped over the wire, kept in the model store and produced
    by aggregation. Tensor order is significant and preserved everywhere.
    """

    version: int
    tensors: list[SerializedTensor]

    def __post_init__(self) -> None:
        if self.version < 0:
            raise ValueError("model version must be non-negative")
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            raise ValueError("tensor names within a model must be distinct")

    def total_elements(self) -> int:
        return sum(element_count(t.shape) for t in self.tensors)


def _wire_dtype(order: ByteOrder) -> str:
    return "<u4" if order is ByteOrder.LITTLE else ">u4"


def encode_tensor(t: Tensor, order: ByteOrder = ByteOrder.LITTLE) -> SerializedTensor:
    """Serialize a tensor's values element-by-element in the requested byte order.

    Deterministic: equal inputs yield identical bytes.
    """
    bits = t.values.view(np.uint32).astype(_wire_dtype(order), copy=True)
    return SerializedTensor(
        name=t.name,
        dtype=Dtype.F32,
        byte_order=order,
        shape=t.shape,
        data=bits.tobytes(),
    )


def decode_tensor(s: SerializedTensor) -> Tensor:
    """Rebuild a tensor from its byte representation, bit-exactly.

    Raises:
        UnsupportedDtype: unknown dtype tag.
        MalformedTensor: data length does not match shape x element size.
    """
    if s.dtype is not Dtype.F32:
        raise UnsupportedDtype(f"cannot decode dtype {s.dtype!r}")
    expected = element_count(s.shape) * s.dtype.itemsize
    if len(s.data) != expected:
        raise MalformedTensor(
            f"tensor {s.name!r}: {len(s.data)} data bytes, "
            f"shape {s.shape} requires {expected}"
        )
    bits = np.frombuffer(s.data, dtype=_wire_dtype(s.byte_order))
    values = bits.astype(np.uint32).view(np.float32)
    return Tensor(name=s.name, shape=s.shape, values=values)
