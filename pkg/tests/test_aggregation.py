import numpy as np
import pytest

from fedrig.aggregation import (
    AggregationPlan,
    EmptyInput,
    MissingModel,
    ModelStore,
    fedavg,
    fedavg_sequential,
    normalized_weights,
)
from fedrig.engine import MlpArchitecture, build_mlp
from fedrig.tensors import ModelState, ShapeMismatch, Tensor, decode_tensor, encode_tensor


def flat_model(values, version=0, name="t"):
    arr = np.asarray(values, dtype=np.float32)
    return ModelState(version=version, tensors=[encode_tensor(Tensor(name, arr.shape, arr))])


def random_model(rng, dims=((4, 8), (8, 2)), version=0):
    tensors = []
    for i, shape in enumerate(dims):
        vals = rng.uniform(-1, 1, size=shape).astype(np.float32)
        tensors.append(encode_tensor(Tensor(f"t{i}", shape, vals.reshape(-1))))
    return ModelState(version=version, tensors=tensors)


def model_bytes(model):
    return b"".join(t.data for t in model.tensors)


def ulp_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Order-preserving integer keys for float32; |key(a)-key(b)| is the
    distance in representable values."""

    def key(x):
        u = x.view(np.uint32).astype(np.int64)
        return np.where(u & 0x80000000, 0x80000000 - (u & 0x7FFFFFFF), u + 0x80000000)

    return np.abs(key(np.ascontiguousarray(a)) - key(np.ascontiguousarray(b)))


class TestModelStore:
    def test_insert_select_identity(self):
        store = ModelStore()
        m = flat_model([1, 2, 3])
        store.insert("L1", m, 100)
        assert store.select(["L1"]) == [(m, 100)]

    def test_insert_overwrites(self):
        store = ModelStore()
        store.insert("L1", flat_model([1.0]), 100)
        second = flat_model([2.0], version=1)
        store.insert("L1", second, 50)
        assert store.select(["L1"]) == [(second, 50)]
        assert len(store) == 1

    def test_two_hundred_distinct_ids(self):
        store = ModelStore()
        m = flat_model([0.0])
        for i in range(200):
            store.insert(f"L{i:03d}", m, 100)
        assert len(store) == 200

    def test_select_empty(self):
        assert ModelStore().select([]) == []

    def test_select_missing(self):
        store = ModelStore()
        with pytest.raises(MissingModel):
            store.select(["nope"])

    def test_select_preserves_request_order(self):
        store = ModelStore()
        inserted = {}
        rng = np.random.default_rng(0)
        for i in rng.permutation(10):
            m = flat_model([float(i)], version=int(i))
            inserted[f"L{i}"] = m
            store.insert(f"L{i}", m, 1 + int(i))
        ids = [f"L{i}" for i in [7, 0, 3, 9, 3]]
        got = store.select(ids)
        # oracle: a naive scan over the same mapping
        expected = [(inserted[i], 1 + int(i[1:])) for i in ids]
        assert got == expected


class TestWeights:
    def test_normalized(self):
        assert normalized_weights([100, 100]) == [0.5, 0.5]
        assert sum(normalized_weights([3, 5, 9])) == pytest.approx(1.0, abs=1e-12)

    def test_rejects_empty_and_nonpositive(self):
        with pytest.raises(EmptyInput):
            normalized_weights([])
        with pytest.raises(ValueError):
            normalized_weights([1, 0])

    def test_plan_invariants(self):
        AggregationPlan(("a", "b"), (0.5, 0.5), worker_count=2)
        with pytest.raises(ValueError):
            AggregationPlan(("a",), (0.5, 0.5), worker_count=1)
        with pytest.raises(ValueError):
            AggregationPlan(("a", "b"), (0.7, 0.5), worker_count=1)
        with pytest.raises(ValueError):
            AggregationPlan(("a", "b"), (1.5, -0.5), worker_count=1)
        with pytest.raises(ValueError):
            AggregationPlan(("a",), (1.0,), worker_count=0)


class TestFedavg:
    def test_single_model_identity(self):
        m = flat_model([1.5, -2.25, 3e-7], version=4)
        out = fedavg([(m, 1.0)], worker_count=4)
        assert model_bytes(out) == model_bytes(m)
        assert out.version == 5

    def test_hand_computed_mean(self):
        a = flat_model([1.0, 3.0])
        b = flat_model([3.0, 5.0])
        out = fedavg([(a, 0.5), (b, 0.5)], worker_count=2)
        assert decode_tensor(out.tensors[0]).values.tolist() == [2.0, 4.0]

    def test_identical_models_fixed_point(self):
        rng = np.random.default_rng(3)
        m = random_model(rng)
        out = fedavg([(m, 0.2), (m, 0.3), (m, 0.5)], worker_count=3)
        assert model_bytes(out) == model_bytes(m)

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            fedavg([], worker_count=1)
        with pytest.raises(EmptyInput):
            fedavg_sequential([])

    def test_unnormalized_weights_rejected(self):
        m = flat_model([1.0])
        with pytest.raises(ValueError):
            fedavg([(m, 0.4), (m, 0.4)], worker_count=1)
        with pytest.raises(ValueError):
            fedavg([(m, 1.5), (m, -0.5)], worker_count=1)

    def test_shape_mismatch(self):
        a = flat_model([1.0, 2.0])
        b = flat_model([1.0], name="other")
        with pytest.raises(ShapeMismatch):
            fedavg([(a, 0.5), (b, 0.5)], worker_count=1)

    def test_version_is_max_plus_one(self):
        a = flat_model([1.0], version=3)
        b = flat_model([2.0], version=9)
        assert fedavg([(a, 0.5), (b, 0.5)], worker_count=1).version == 10

    def test_parallel_equals_sequential_bitwise(self):
        rng = np.random.default_rng(7)
        models = [(random_model(rng, version=i), w) for i, w in enumerate(normalized_weights([3, 4, 5, 8]))]
        reference = fedavg_sequential(models)
        for workers in (1, 2, 5, 16):
            assert model_bytes(fedavg(models, worker_count=workers)) == model_bytes(reference)

    def test_weighted_mean_bounds(self):
        rng = np.random.default_rng(11)
        models = [(random_model(rng), w) for w in normalized_weights([1, 2, 3])]
        out = fedavg(models, worker_count=2)
        for j in range(len(out.tensors)):
            stack = np.stack([decode_tensor(m.tensors[j]).values for m, _ in models])
            got = decode_tensor(out.tensors[j]).values
            eps = 1e-6
            assert np.all(got >= stack.min(axis=0) - eps)
            assert np.all(got <= stack.max(axis=0) + eps)

    def test_permutation_changes_at_most_one_ulp(self):
        rng = np.random.default_rng(13)
        models = [(random_model(rng), w) for w in normalized_weights([2, 3, 5, 7])]
        out_a = fedavg(models, worker_count=2)
        out_b = fedavg(list(reversed(models)), worker_count=2)
        for ta, tb in zip(out_a.tensors, out_b.tensors):
            dist = ulp_distance(decode_tensor(ta).values, decode_tensor(tb).values)
            assert dist.size == 0 or dist.max() <= 1

    def test_against_independent_oracle_within_one_ulp(self):
        arch = MlpArchitecture(input_dim=5, hidden_layers=3, hidden_units=6)
        models = [build_mlp(arch, seed=i) for i in range(4)]
        weights = normalized_weights([10, 20, 30, 40])
        out = fedavg(list(zip(models, weights)), worker_count=3)
        for j in range(len(out.tensors)):
            stack = np.stack(
                [decode_tensor(m.tensors[j]).values.astype(np.float64) for m in models]
            )
            oracle = (np.asarray(weights)[:, None] * stack).sum(axis=0).astype(np.float32)
            dist = ulp_distance(decode_tensor(out.tensors[j]).values, oracle)
            assert dist.size == 0 or dist.max() <= 1

    def test_mixed_byte_orders_average_identically(self):
        from fedrig.tensors import ByteOrder

        vals = np.array([1.0, 2.0, 3.0], np.float32)
        le = ModelState(0, [encode_tensor(Tensor("t", (3,), vals), ByteOrder.LITTLE)])
        be = ModelState(0, [encode_tensor(Tensor("t", (3,), vals), ByteOrder.BIG)])
        out = fedavg([(le, 0.5), (be, 0.5)], worker_count=1)
        assert decode_tensor(out.tensors[0]).values.tolist() == [1.0, 2.0, 3.0]
