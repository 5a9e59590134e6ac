from __future__ import annotations

import math
import struct

import numpy as np
import pytest

from fedloc.errors import AggregationError, WireFormatError
from fedloc.federation import (
    ClientUpdate,
    FederatedServer,
    HParam,
    SparseUpdate,
    decode_dense,
    decode_sparse,
    dense_record_size,
    densify,
    encode_dense,
    encode_sparse,
    fedavg_aggregate,
    fedhil_aggregate,
    fedsgd_aggregate,
    select_top_h,
    sparse_record_size,
    uplink_latency,
)
from fedloc.nn_core import NetworkShape, TrainConfig, WeightVector, flatten, gradient, init_network, sgd_train


def _wv(values) -> WeightVector:
    values = np.asarray(values, dtype=np.float64)
    return WeightVector(values=values, shape=NetworkShape(dims=(values.size - 1, 1), activations=("linear",)))


def _weights_update(client_id: str, values, samples: int = 1) -> ClientUpdate:
    return ClientUpdate(client_id=client_id, kind="weights", payload=_wv(values), sample_count=samples)


def _sparse_update(client_id: str, sparse: SparseUpdate) -> ClientUpdate:
    return ClientUpdate(client_id=client_id, kind="sparse", payload=sparse, sample_count=1)


@pytest.mark.parametrize(
    ("h", "total", "expected"),
    [(20.0, 1000, 200), (10.0, 7, 1), (100.0, 9, 9), (0.1, 3, 1), (33.3, 10, 4), (50.0, 70845, 35423)],
)
def test_selected_count_is_ceiling(h: float, total: int, expected: int) -> None:
    assert HParam(h).selected_count(total) == expected


@pytest.mark.parametrize("h", [0.0, -5.0, 100.5])
def test_h_outside_range_is_rejected(h: float) -> None:
    with pytest.raises(ValueError):
        HParam(h)


def test_fedavg_matches_weighted_mean_oracle() -> None:
    rng = np.random.default_rng(0)
    for _ in range(100):
        clients = int(rng.integers(1, 6))
        length = int(rng.integers(2, 12))
        vectors = rng.normal(size=(clients, length))
        counts = rng.integers(1, 50, size=clients)
        updates = [_weights_update(f"c{i}", vectors[i], int(counts[i])) for i in range(clients)]
        expected = np.zeros(length)
        for i in range(clients):
            expected += counts[i] / counts.sum() * vectors[i]
        assert np.allclose(fedavg_aggregate(updates).values, expected, atol=1e-12, rtol=0)


def test_fedavg_single_client_is_identity() -> None:
    values = np.array([0.5, -1.0, 2.0])
    assert np.allclose(fedavg_aggregate([_weights_update("only", values, 7)]).values, values, atol=1e-12, rtol=0)


def test_fedavg_rejects_sparse_and_empty() -> None:
    with pytest.raises(AggregationError):
        fedavg_aggregate([])
    sparse = SparseUpdate(indices=[0], values=[1.0], total_len=3)
    with pytest.raises(AggregationError):
        fedavg_aggregate([_sparse_update("s", sparse)])


def test_fedsgd_applies_mean_gradient() -> None:
    gm = _wv([1.0, 2.0, 3.0])
    result = fedsgd_aggregate(gm, [_wv([1.0, 0.0, -1.0]), _wv([3.0, 0.0, 1.0])], 0.5)
    assert np.allclose(result.values, [0.0, 2.0, 3.0])
    with pytest.raises(AggregationError):
        fedsgd_aggregate(gm, [_wv([1.0, 2.0])], 0.1)


def test_fedsgd_opposite_gradients_cancel() -> None:
    rng = np.random.default_rng(4)
    gm = _wv(rng.normal(size=6))
    g = rng.normal(size=6)
    result = fedsgd_aggregate(gm, [_wv(g), _wv(-g)], 0.3)
    assert np.array_equal(result.values, gm.values)


def test_fedsgd_equals_one_pooled_sgd_step_for_linear_model() -> None:
    rng = np.random.default_rng(6)
    net = init_network((3, 1), ("linear",), 2)
    batches = [(rng.uniform(0, 1, size=(4, 3)), rng.normal(size=(4, 1))) for _ in range(3)]
    grads = [gradient(net, x, y, "mse") for x, y in batches]
    merged = fedsgd_aggregate(flatten(net), grads, 0.2)

    pooled_x = np.vstack([x for x, _ in batches])
    pooled_y = np.vstack([y for _, y in batches])
    step = sgd_train(net, pooled_x, pooled_y, TrainConfig(learning_rate=0.2, epochs=1, batch_size=len(pooled_x)))
    assert np.allclose(merged.values, flatten(step.network).values, atol=1e-12, rtol=0)


def test_top_h_matches_sort_oracle_with_ties() -> None:
    rng = np.random.default_rng(1)
    for _ in range(50):
        length = int(rng.integers(2, 40))
        gm = rng.integers(-3, 4, size=length).astype(float)
        client = gm + rng.integers(-2, 3, size=length)
        h = HParam(float(rng.integers(1, 101)))
        count = h.selected_count(length)
        oracle = sorted(range(length), key=lambda i: (-abs(gm[i] - client[i]), i))[:count]
        picked = select_top_h(client, gm, h)
        assert picked.indices.tolist() == sorted(oracle)
        assert np.array_equal(picked.values, client[picked.indices])
        assert picked.total_len == length


def test_top_h_all_ties_take_lowest_indices() -> None:
    picked = select_top_h(np.ones(10), np.zeros(10), HParam(30.0))
    assert picked.indices.tolist() == [0, 1, 2]


def test_top_h_rejects_length_mismatch() -> None:
    with pytest.raises(AggregationError):
        select_top_h(np.zeros(3), np.zeros(4), HParam(50.0))


def test_top_h_ignores_positive_rescaling_of_differences() -> None:
    rng = np.random.default_rng(3)
    for _ in range(30):
        length = int(rng.integers(2, 60))
        gm = rng.integers(-50, 51, size=length).astype(float)
        diff = rng.integers(-20, 21, size=length).astype(float)
        h = HParam(float(rng.integers(1, 101)))
        base = select_top_h(gm + diff, gm, h).indices
        for scale in (0.5, 2.0, 8.0):
            assert np.array_equal(select_top_h(gm + scale * diff, gm, h).indices, base)


def test_top_h_count_is_ceiling_for_random_lengths() -> None:
    rng = np.random.default_rng(8)
    for total in rng.integers(1, 100_001, size=12):
        total = int(total)
        client = rng.normal(size=total)
        for h in range(10, 101, 10):
            picked = select_top_h(client, np.zeros(total), HParam(float(h)))
            assert len(picked) == math.ceil(h * total / 100) == -(-h * total // 100)


def _fedhil_reference(gm: np.ndarray, updates: list[SparseUpdate]) -> np.ndarray:
    out = gm.copy()
    for i in range(gm.size):
        picks = [u.values[list(u.indices).index(i)] for u in updates if i in u.indices]
        if picks:
            out[i] = (sum(picks) + gm[i]) / (len(picks) + 1)
    return out


def test_fedhil_matches_scalar_reference() -> None:
    rng = np.random.default_rng(2)
    for _ in range(30):
        length = int(rng.integers(2, 25))
        gm = rng.normal(size=length)
        updates = [
            select_top_h(gm + rng.normal(size=length), gm, HParam(float(rng.integers(1, 101))))
            for _ in range(int(rng.integers(1, 5)))
        ]
        assert np.allclose(fedhil_aggregate(_wv(gm), updates).values, _fedhil_reference(gm, updates))


def test_fedhil_untouched_indices_keep_global_value() -> None:
    gm = _wv([1.0, 2.0, 3.0, 4.0])
    update = SparseUpdate(indices=[1], values=[10.0], total_len=4)
    result = fedhil_aggregate(gm, [update]).values
    assert result.tolist() == [1.0, 6.0, 3.0, 4.0]


def test_fedhil_full_h_single_client_is_midpoint() -> None:
    gm = np.array([0.0, 2.0, -4.0])
    client = np.array([2.0, 2.0, 4.0])
    update = select_top_h(client, gm, HParam(100.0))
    assert np.allclose(fedhil_aggregate(_wv(gm), [update]).values, (gm + client) / 2)


def test_fedhil_literal_mode_adds_dense_mean() -> None:
    gm = _wv([1.0, 1.0, 1.0])
    a = SparseUpdate(indices=[0], values=[4.0], total_len=3)
    b = SparseUpdate(indices=[0, 2], values=[2.0, 6.0], total_len=3)
    result = fedhil_aggregate(gm, [a, b], literal=True).values
    assert result.tolist() == [4.0, 1.0, 4.0]
    assert densify(b).tolist() == [2.0, 0.0, 6.0]


def test_fedhil_rejects_wrong_length() -> None:
    with pytest.raises(AggregationError):
        fedhil_aggregate(_wv([1.0, 2.0]), [SparseUpdate(indices=[0], values=[1.0], total_len=3)])


def test_sparse_update_validates_indices() -> None:
    with pytest.raises(AggregationError):
        SparseUpdate(indices=[2, 1], values=[0.0, 0.0], total_len=3)
    with pytest.raises(AggregationError):
        SparseUpdate(indices=[3], values=[0.0], total_len=3)
    with pytest.raises(AggregationError):
        SparseUpdate(indices=[0, 1], values=[0.0], total_len=3)


def test_client_update_kind_must_match_payload() -> None:
    with pytest.raises(AggregationError):
        ClientUpdate(client_id="x", kind="sparse", payload=_wv([1.0, 2.0]), sample_count=1)
    with pytest.raises(AggregationError):
        ClientUpdate(client_id="x", kind="weights", payload=_wv([1.0, 2.0]), sample_count=0)


def test_record_sizes_for_thousand_weights() -> None:
    gm = np.zeros(1000)
    client = np.arange(1000, dtype=float)
    sparse = select_top_h(client, gm, HParam(20.0))
    size, record = encode_sparse(sparse)
    assert size == len(record) == 2416 == sparse_record_size(200)
    dense_size, dense_record = encode_dense(client)
    assert dense_size == len(dense_record) == 8016 == dense_record_size(1000)
    assert _sparse_update("c", sparse).wire_bytes() == 2416


def test_sparse_bytes_grow_with_h() -> None:
    rng = np.random.default_rng(3)
    gm = rng.normal(size=500)
    client = gm + rng.normal(size=500)
    sizes = [encode_sparse(select_top_h(client, gm, HParam(h)))[0] for h in range(10, 101, 10)]
    assert sizes == sorted(sizes)
    assert len(set(sizes)) == len(sizes)


def test_decoded_records_match_encoded_values() -> None:
    sparse = SparseUpdate(indices=[1, 4], values=[0.25, -3.5], total_len=6)
    decoded = decode_sparse(encode_sparse(sparse)[1])
    assert decoded.indices.tolist() == [1, 4]
    assert decoded.values.tolist() == [0.25, -3.5]
    assert decoded.total_len == 6
    assert decode_dense(encode_dense(np.array([1.5, 2.5]))[1]).tolist() == [1.5, 2.5]


def test_sparse_header_layout() -> None:
    _, record = encode_sparse(SparseUpdate(indices=[2], values=[1.0], total_len=9))
    assert record[:4] == b"FHIL"
    assert struct.unpack_from("<III", record, 4) == (1, 9, 1)


def test_decode_rejects_corrupt_records() -> None:
    _, record = encode_sparse(SparseUpdate(indices=[0, 1], values=[1.0, 2.0], total_len=4))
    with pytest.raises(WireFormatError):
        decode_sparse(b"XXXX" + record[4:])
    with pytest.raises(WireFormatError):
        decode_sparse(record[:-1])
    with pytest.raises(WireFormatError):
        decode_sparse(record[:10])
    bad_version = record[:4] + struct.pack("<I", 9) + record[8:]
    with pytest.raises(WireFormatError):
        decode_sparse(bad_version)
    _, dense = encode_dense(np.zeros(3))
    with pytest.raises(WireFormatError):
        decode_dense(dense[:-8])
    with pytest.raises(WireFormatError):
        decode_dense(record)


def test_decode_rejects_out_of_range_index() -> None:
    header = b"FHIL" + struct.pack("<III", 1, 2, 1)
    record = header + struct.pack("<I", 5) + struct.pack("<d", 1.0)
    with pytest.raises(WireFormatError):
        decode_sparse(record)


def test_uplink_latency() -> None:
    assert uplink_latency(250_000, 125_000) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        uplink_latency(1, 0)


def test_server_rejects_raw_vectors() -> None:
    server = FederatedServer(_wv([0.0, 0.0]), "fedavg")
    with pytest.raises(AggregationError):
        server.aggregate([_wv([1.0, 1.0])])  # type: ignore[list-item]
    with pytest.raises(AggregationError):
        server.aggregate([_weights_update("c", [1.0, 1.0, 1.0])])


def test_server_runs_each_aggregator() -> None:
    gm = _wv([0.0, 0.0])
    fedavg = FederatedServer(gm, "fedavg")
    assert fedavg.aggregate([_weights_update("a", [2.0, 4.0])]).values.tolist() == [2.0, 4.0]

    fedsgd = FederatedServer(gm, "fedsgd", learning_rate=0.5)
    grad = ClientUpdate(client_id="a", kind="gradient", payload=_wv([2.0, -2.0]), sample_count=1)
    assert fedsgd.aggregate([grad]).values.tolist() == [-1.0, 1.0]

    fedhil = FederatedServer(gm, "fedhil")
    sparse = _sparse_update("a", SparseUpdate(indices=[1], values=[4.0], total_len=2))
    assert fedhil.aggregate([sparse]).values.tolist() == [0.0, 2.0]


def test_frozen_server_never_moves() -> None:
    gm = _wv([1.0, 2.0])
    server = FederatedServer(gm, "frozen")
    after = server.aggregate([_weights_update("a", [9.0, 9.0])])
    assert after.values.tolist() == [1.0, 2.0]
    assert server.aggregate([]).values.tolist() == [1.0, 2.0]


def test_server_weights_are_copies() -> None:
    server = FederatedServer(_wv([1.0, 2.0]), "fedavg")
    view = server.global_weights
    view.values[0] = 99.0
    assert server.global_weights.values[0] == 1.0


def test_server_rejects_unknown_aggregator() -> None:
    server = FederatedServer(_wv([1.0, 2.0]), "median")
    with pytest.raises(AggregationError):
        server.aggregate([_weights_update("a", [1.0, 1.0])])
