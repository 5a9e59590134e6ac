"""Aggregation strategies and the uplink wire format.

FedAvg averages client weights by sample count, FedSGD averages client
gradients into one global step, and FedHIL merges each client's top-H% most
changed weights back into the global model.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import AggregationError, WireFormatError
from .nn_core import WeightVector

logger = logging.getLogger(__name__)

SPARSE_MAGIC = b"FHIL"
DENSE_MAGIC = b"FDNS"
WIRE_VERSION = 1
HEADER_BYTES = 16
INDEX_BYTES = 4
VALUE_BYTES = 8

UpdateKind = Literal["weights", "gradient", "sparse"]


@dataclass(frozen=True)
class HParam:
    h_percent: float = 20.0

    def __post_init__(self) -> None:
        if not 0.0 < self.h_percent <= 100.0:
            raise ValueError(f"H must lie in (0, 100], got {self.h_percent}")

    def selected_count(self, total_len: int) -> int:
        """ceil(H/100 * total_len), computed on integers at micro-percent resolution."""
        micro = round(self.h_percent * 1_000_000)
        return -(-micro * total_len // 100_000_000)


@dataclass(frozen=True)
class SparseUpdate:
    indices: np.ndarray
    values: np.ndarray
    total_len: int

    def __post_init__(self) -> None:
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indices.ndim != 1 or values.shape != indices.shape:
            raise AggregationError("sparse update needs equally long index and value vectors")
        if indices.size:
            if np.any(np.diff(indices) <= 0):
                raise AggregationError("sparse indices must be strictly increasing")
            if indices[0] < 0 or indices[-1] >= self.total_len:
                raise AggregationError(f"sparse indices must lie in [0, {self.total_len})")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.indices.shape[0])


@dataclass(frozen=True)
class ClientUpdate:
    """Everything a client is allowed to send to the server."""

    client_id: str
    kind: UpdateKind
    payload: WeightVector | SparseUpdate
    sample_count: int

    def __post_init__(self) -> None:
        if self.sample_count < 1:
            raise AggregationError(f"{self.client_id}: sample_count must be >= 1")
        is_sparse = isinstance(self.payload, SparseUpdate)
        if is_sparse != (self.kind == "sparse"):
            raise AggregationError(f"{self.client_id}: payload type does not match update kind {self.kind}")

    @property
    def payload_length(self) -> int:
        if isinstance(self.payload, SparseUpdate):
            return self.payload.total_len
        return len(self.payload)

    def wire_bytes(self) -> int:
        if isinstance(self.payload, SparseUpdate):
            return sparse_record_size(len(self.payload))
        return dense_record_size(len(self.payload))


def _values(vector: WeightVector | np.ndarray) -> np.ndarray:
    return vector.values if isinstance(vector, WeightVector) else np.asarray(vector, dtype=np.float64)


def _check_lengths(expected: int, vectors: Sequence[np.ndarray], what: str) -> None:
    for i, values in enumerate(vectors):
        if values.shape != (expected,):
            raise AggregationError(f"{what} {i} has length {values.size}, expected {expected}")


# Aggregators ------------------------------------------------------------------------


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> WeightVector:
    """W_global = sum_i (K_i / K) * W_client(i)."""

    if not updates:
        raise AggregationError("FedAvg needs at least one client update")
    payloads = [u.payload for u in updates]
    if any(not isinstance(p, WeightVector) for p in payloads):
        raise AggregationError("FedAvg aggregates full weight vectors only")
    vectors = [p.values for p in payloads]  # type: ignore[union-attr]
    _check_lengths(vectors[0].shape[0], vectors, "client weight vector")
    counts = np.array([u.sample_count for u in updates], dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise AggregationError("FedAvg needs a positive total sample count")
    merged = np.sum((counts / total)[:, np.newaxis] * np.vstack(vectors), axis=0)
    return payloads[0].replace(merged)  # type: ignore[union-attr]


def fedsgd_aggregate(
    gm: WeightVector, gradients: Sequence[WeightVector | ClientUpdate], learning_rate: float
) -> WeightVector:
    """W_global = W_T - eta * mean_i(G_client(i))."""

    if not gradients:
        raise AggregationError("FedSGD needs at least one client gradient")
    vectors = [_values(g.payload if isinstance(g, ClientUpdate) else g) for g in gradients]  # type: ignore[arg-type]
    _check_lengths(len(gm), vectors, "client gradient")
    g_avg = np.mean(np.vstack(vectors), axis=0)
    return gm.replace(gm.values - learning_rate * g_avg)


def select_top_h(w_client: WeightVector | np.ndarray, w_global: WeightVector | np.ndarray, h: HParam) -> SparseUpdate:
    """Keep the ceil(H% * P) client weights that moved furthest from the global model.

    Ties go to the lower index.
    """

    client = _values(w_client)
    global_ = _values(w_global)
    if client.shape != global_.shape:
        raise AggregationError(f"client has {client.size} weights, global model {global_.size}")
    total = int(client.shape[0])
    w_abs = np.abs(global_ - client)
    count = h.selected_count(total)
    order = np.argsort(-w_abs, kind="stable")
    indices = np.sort(order[:count])
    return SparseUpdate(indices=indices, values=client[indices], total_len=total)


def densify(update: SparseUpdate) -> np.ndarray:
    """Zero-filled dense form of a sparse update."""
    dense = np.zeros(update.total_len)
    dense[update.indices] = update.values
    return dense


def fedhil_aggregate(
    gm: WeightVector, updates: Sequence[SparseUpdate | ClientUpdate], *, literal: bool = False
) -> WeightVector:
    """Average every selected client value with the global value, index by index.

    An index picked by ``n`` clients becomes ``(sum of their values + gm) / (n + 1)``;
    an index nobody picked keeps the global value. ``literal=True`` instead applies
    the plain sum ``mean_i(dense W_high_i) + gm``.
    """

    sparse = [u.payload if isinstance(u, ClientUpdate) else u for u in updates]
    for i, update in enumerate(sparse):
        if not isinstance(update, SparseUpdate):
            raise AggregationError(f"update {i} is not a sparse update")
        if update.total_len != len(gm):
            raise AggregationError(f"update {i} covers {update.total_len} weights, global model has {len(gm)}")
    if not sparse:
        return gm.replace(gm.values.copy())

    if literal:
        mean_high = np.mean(np.vstack([densify(u) for u in sparse]), axis=0)  # type: ignore[arg-type]
        return gm.replace(mean_high + gm.values)

    sums = np.zeros(len(gm))
    counts = np.zeros(len(gm))
    for update in sparse:
        sums[update.indices] += update.values  # type: ignore[union-attr]
        counts[update.indices] += 1.0  # type: ignore[union-attr]
    merged = gm.values.copy()
    touched = counts > 0
    merged[touched] = (sums[touched] + gm.values[touched]) / (counts[touched] + 1.0)
    return gm.replace(merged)


# Wire format ------------------------------------------------------------------------


def sparse_record_size(count: int) -> int:
    return HEADER_BYTES + count * (INDEX_BYTES + VALUE_BYTES)


def dense_record_size(length: int) -> int:
    return HEADER_BYTES + length * VALUE_BYTES


def encode_sparse(update: SparseUpdate) -> tuple[int, bytes]:
    """``FHIL`` + version + total_len + count, then u32 indices, then f64 values (little-endian)."""

    header = SPARSE_MAGIC + struct.pack("<III", WIRE_VERSION, update.total_len, len(update))
    record = header + update.indices.astype("<u4").tobytes() + update.values.astype("<f8").tobytes()
    return len(record), record


def decode_sparse(record: bytes) -> SparseUpdate:
    if record[:4] != SPARSE_MAGIC:
        raise WireFormatError("not a sparse update record (bad magic)")
    if len(record) < HEADER_BYTES:
        raise WireFormatError("truncated sparse update header")
    version, total_len, count = struct.unpack_from("<III", record, 4)
    if version != WIRE_VERSION:
        raise WireFormatError(f"unsupported sparse record version {version}")
    if len(record) != sparse_record_size(count):
        raise WireFormatError(f"sparse record is {len(record)} bytes, expected {sparse_record_size(count)}")
    split = HEADER_BYTES + count * INDEX_BYTES
    indices = np.frombuffer(record[HEADER_BYTES:split], dtype="<u4").astype(np.int64)
    values = np.frombuffer(record[split:], dtype="<f8").astype(np.float64)
    try:
        return SparseUpdate(indices=indices, values=values, total_len=total_len)
    except AggregationError as exc:
        raise WireFormatError(f"invalid sparse record: {exc}") from exc


def encode_dense(vector: WeightVector | np.ndarray) -> tuple[int, bytes]:
    """``FDNS`` + version + length + reserved word, then f64 values (little-endian)."""

    values = _values(vector)
    header = DENSE_MAGIC + struct.pack("<III", WIRE_VERSION, values.shape[0], 0)
    record = header + values.astype("<f8").tobytes()
    return len(record), record


def decode_dense(record: bytes) -> np.ndarray:
    if record[:4] != DENSE_MAGIC:
        raise WireFormatError("not a dense record (bad magic)")
    if len(record) < HEADER_BYTES:
        raise WireFormatError("truncated dense record header")
    version, length, _ = struct.unpack_from("<III", record, 4)
    if version != WIRE_VERSION:
        raise WireFormatError(f"unsupported dense record version {version}")
    if len(record) != dense_record_size(length):
        raise WireFormatError(f"dense record is {len(record)} bytes, expected {dense_record_size(length)}")
    return np.frombuffer(record[HEADER_BYTES:], dtype="<f8").astype(np.float64)


def uplink_latency(byte_count: int, bandwidth_bytes_per_s: float) -> float:
    if bandwidth_bytes_per_s <= 0:
        raise ValueError("bandwidth must be > 0")
    return byte_count / bandwidth_bytes_per_s


# Server --------------------------------------------------------------------------------


class FederatedServer:
    """Holds the global weight vector; it only ever sees ClientUpdate payloads."""

    def __init__(
        self,
        gm: WeightVector,
        aggregator: str,
        *,
        learning_rate: float = 0.1,
        literal_sum: bool = False,
    ) -> None:
        self._gm = gm.replace(gm.values.copy())
        self.aggregator = aggregator
        self.learning_rate = learning_rate
        self.literal_sum = literal_sum

    @property
    def global_weights(self) -> WeightVector:
        return self._gm.replace(self._gm.values.copy())

    def aggregate(self, updates: Sequence[ClientUpdate]) -> WeightVector:
        for update in updates:
            if not isinstance(update, ClientUpdate):
                raise AggregationError(f"server accepts ClientUpdate objects only, got {type(update).__name__}")
            if update.payload_length != len(self._gm):
                raise AggregationError(
                    f"{update.client_id} sent {update.payload_length} weights, global model has {len(self._gm)}"
                )
        if self.aggregator == "frozen" or not updates:
            return self.global_weights
        if self.aggregator == "fedavg":
            self._gm = fedavg_aggregate(updates)
        elif self.aggregator == "fedsgd":
            self._gm = fedsgd_aggregate(self._gm, updates, self.learning_rate)
        elif self.aggregator == "fedhil":
            self._gm = fedhil_aggregate(self._gm, updates, literal=self.literal_sum)
        else:
            raise AggregationError(f"unknown aggregator {self.aggregator}")
        logger.debug("aggregated %d %s updates", len(updates), self.aggregator)
        return self.global_weights
