"""In-memory model store and weighted model averaging.

Averaging is parallelized across tensors, never within one: each tensor's
cross-model reduction is owned end-to-end by a single worker, and elements
are accumulated in float64 in participant order before rounding back to
float32. The result is therefore byte-identical for any worker count.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensors import (
    ByteOrder,
    ModelState,
    SerializedTensor,
    ShapeMismatch,
    Tensor,
    decode_tensor,
    encode_tensor,
)

__all__ = [
    "AggregationPlan",
    "EmptyInput",
    "MissingModel",
    "ModelStore",
    "fedavg",
    "fedavg_sequential",
    "normalized_weights",
]

WEIGHT_SUM_TOL = 1e-9


class EmptyInput(ValueError):
    """Aggregation was asked to average zero models."""


class MissingModel(KeyError):
    """A store selection referenced a learner id with no stored model."""

    def __init__(self, learner_id: str) -> None:
        super().__init__(learner_id)
        self.learner_id = learner_id


class ModelStore:
    """Map from learner id to that learner's latest model and sample count.

    Insert overwrites, select returns entries in request order; both are
    O(1) per id. Unbounded: the working assumption is that every local
    model fits in memory. Safe for concurrent inserts with an exclusive
    select-and-aggregate phase.
    """

    def __init__(self) -> None:
        self._entries: dict[str, tuple[ModelState, int]] = {}
        self._lock = threading.Lock()

    def insert(self, learner_id: str, model: ModelState, samples: int) -> None:
        if samples <= 0:
            raise ValueError("samples must be positive")
        with self._lock:
            self._entries[learner_id] = (model, samples)

    def select(self, ids: Sequence[str]) -> list[tuple[ModelState, int]]:
        with self._lock:
            out = []
            for learner_id in ids:
                try:
                    out.append(self._entries[learner_id])
                except KeyError:
                    raise MissingModel(learner_id) from None
            return out

    def ids(self) -> list[str]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def __contains__(self, learner_id: str) -> bool:
        with self._lock:
            return learner_id in self._entries


def normalized_weights(sample_counts: Sequence[int]) -> list[float]:
    """Sample counts to averaging weights that sum to 1."""
    if not sample_counts:
        raise EmptyInput("no sample counts")
    if any(c <= 0 for c in sample_counts):
        raise ValueError("sample counts must be positive")
    total = float(sum(sample_counts))
    return [c / total for c in sample_counts]


@dataclass(frozen=True)
class AggregationPlan:
    """Who participates in one aggregation, with what weights, on how many
    workers."""

    participant_ids: tuple[str, ...]
    weights: tuple[float, ...]
    worker_count: int

    def __post_init__(self) -> None:
        if len(self.participant_ids) != len(self.weights):
            raise ValueError("participant_ids and weights lengths differ")
        if any(w <= 0 for w in self.weights):
            raise ValueError("weights must be positive")
        if self.weights and abs(sum(self.weights) - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError("weights must sum to 1")
        if self.worker_count < 1:
            raise ValueError("worker_count must be positive")


def _check_aligned(models: Sequence[tuple[ModelState, float]]) -> None:
    if not models:
        raise EmptyInput("no models to aggregate")
    first = models[0][0]
    ref = [(t.name, t.shape, t.dtype) for t in first.tensors]
    for state, _ in models[1:]:
        got = [(t.name, t.shape, t.dtype) for t in state.tensors]
        if got != ref:
            raise ShapeMismatch("models carry different tensor lists")
    weights = [w for _, w in models]
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive")
    if abs(sum(weights) - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"weights must sum to 1, got {sum(weights)!r}")


def _reduce_tensor(
    models: Sequence[tuple[ModelState, float]], index: int
) -> SerializedTensor:
    """Weighted mean of tensor ``index`` across all models.

    float64 accumulation in participant order, rounded to float32 at the
    end; this fixed order is what makes the output independent of how
    tensors are distributed over workers.
    """
    template = models[0][0].tensors[index]
    acc = np.zeros(len(template.data) // 4, dtype=np.float64)
    for state, weight in models:
        values = decode_tensor(state.tensors[index]).values
        acc += np.multiply(values, weight, dtype=np.float64)
    out = acc.astype(np.float32)
    return encode_tensor(
        Tensor(template.name, template.shape, out), ByteOrder.LITTLE
    )


def fedavg(
    models: Sequence[tuple[ModelState, float]], worker_count: int | None = None
) -> ModelState:
    """Weighted-average models across min(worker_count, k) workers.

    Tensors sit in a shared queue and each worker pulls whole tensors until
    it drains, so no tensor's accumulation is ever split. Output version is
    max(input versions) + 1.

    Raises EmptyInput on an empty model list and ShapeMismatch when the
    models' tensor lists differ in names, shapes, order or dtype.
    """
    models = list(models)
    _check_aligned(models)
    k = len(models[0][0].tensors)
    if worker_count is None:
        import os

        worker_count = os.cpu_count() or 1
    workers = max(1, min(worker_count, k)) if k else 1
    version = max(state.version for state, _ in models) + 1
    if k == 0:
        return ModelState(version=version, tensors=[])
    if workers == 1:
        tensors = [_reduce_tensor(models, j) for j in range(k)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tensors = list(pool.map(lambda j: _reduce_tensor(models, j), range(k)))
    return ModelState(version=version, tensors=tensors)


def fedavg_sequential(models: Sequence[tuple[ModelState, float]]) -> ModelState:
    """Single-threaded reference path; same contract and bytes as ``fedavg``."""
    models = list(models)
    _check_aligned(models)
    k = len(models[0][0].tensors)
    version = max(state.version for state, _ in models) + 1
    return ModelState(
        version=version, tensors=[_reduce_tensor(models, j) for j in range(k)]
    )
