from __future__ import annotations

import numpy as np
import pytest

from fedloc.errors import ConfigError, ShapeError, TrainingDivergedError, WireFormatError
from fedloc.nn_core import (
    DenseLayer,
    Network,
    NetworkShape,
    TrainConfig,
    decode_network,
    encode_network,
    flatten,
    forward,
    gradient,
    init_network,
    loss_value,
    param_count,
    sgd_train,
    unflatten,
)

SCE = "sparse_categorical_crossentropy"


def test_snn_parameter_counts_match_reference() -> None:
    shape = NetworkShape(dims=(172, 128, 256, 61), activations=("relu", "relu", "sigmoid"))
    assert shape.layer_param_counts() == [22144, 33024, 15677]
    assert shape.param_count == 70845


def test_single_dense_layer_parameter_count() -> None:
    net = init_network((172, 86), ("relu",), 0)
    assert param_count(net) == 14878


def test_flatten_order_is_weights_then_bias_per_layer() -> None:
    net = init_network((3, 2, 1), ("relu", "linear"), 1)
    values = flatten(net).values
    shape = net.shape
    assert values[shape.weight_index(0, 1, 2)] == net.layers[0].weights[1, 2]
    assert values[shape.bias_index(0, 1)] == net.layers[0].bias[1]
    assert values[shape.weight_index(1, 0, 1)] == net.layers[1].weights[0, 1]
    assert shape.layer_offset(1) == 8


def test_unflatten_inverts_flatten() -> None:
    net = init_network((5, 4, 3), ("sigmoid", "softmax"), 2)
    rebuilt = unflatten(flatten(net), net.shape)
    for a, b in zip(net.layers, rebuilt.layers):
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)
        assert a.activation == b.activation


def test_unflatten_rejects_wrong_length() -> None:
    net = init_network((2, 2), ("linear",), 0)
    with pytest.raises(ShapeError):
        unflatten(np.zeros(5), net.shape)


def test_network_rejects_unchained_layers() -> None:
    a = DenseLayer(weights=np.zeros((3, 2)), bias=np.zeros(3))
    b = DenseLayer(weights=np.zeros((1, 4)), bias=np.zeros(1))
    with pytest.raises(ShapeError):
        Network(layers=[a, b])


def test_forward_keeps_vector_inputs_one_dimensional() -> None:
    net = init_network((4, 3), ("sigmoid",), 0)
    out = forward(net, np.ones(4))
    assert out.shape == (3,)
    assert forward(net, np.ones((2, 4))).shape == (2, 3)


def _numeric_gradient(net: Network, x: np.ndarray, y: np.ndarray, loss: str, eps: float = 1e-6) -> np.ndarray:
    base = flatten(net).values
    shape = net.shape
    grad = np.zeros_like(base)
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += eps
        minus[i] -= eps
        grad[i] = (
            loss_value(unflatten(plus, shape), x, y, loss) - loss_value(unflatten(minus, shape), x, y, loss)
        ) / (2 * eps)
    return grad


@pytest.mark.parametrize("case", range(20))
def test_gradient_matches_finite_differences(case: int) -> None:
    rng = np.random.default_rng(1000 + case)
    depth = int(rng.integers(1, 5))
    dims = [int(rng.integers(2, 7)) for _ in range(depth + 1)]
    hidden = [str(rng.choice(["relu", "sigmoid", "linear"])) for _ in range(depth - 1)]
    loss = "mse" if case % 2 == 0 else SCE
    if loss == "mse":
        output = str(rng.choice(["sigmoid", "linear"]))
    else:
        output = str(rng.choice(["sigmoid", "softmax"]))
    net = init_network(dims, (*hidden, output), rng)
    x = rng.uniform(0.0, 1.0, size=(5, dims[0]))
    if loss == "mse":
        y = rng.uniform(0.0, 1.0, size=(5, dims[-1]))
    else:
        y = rng.integers(0, dims[-1], size=5)

    analytic = gradient(net, x, y, loss).values
    numeric = _numeric_gradient(net, x, y, loss)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    assert np.linalg.norm(analytic - numeric) / denom < 1e-4


def test_sparse_cross_entropy_needs_probabilistic_output() -> None:
    net = init_network((3, 2), ("linear",), 0)
    with pytest.raises(ConfigError):
        loss_value(net, np.ones((1, 3)), np.array([0]), SCE)


def test_train_config_validation() -> None:
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss="hinge")
    assert TrainConfig().with_overrides(epochs=3).epochs == 3


def test_sgd_train_reduces_loss_and_leaves_input_untouched() -> None:
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(40, 4))
    labels = (x[:, 0] > 0.5).astype(np.int64)
    net = init_network((4, 8, 2), ("relu", "softmax"), 3)
    before = flatten(net).values.copy()

    result = sgd_train(net, x, labels, TrainConfig(learning_rate=0.5, epochs=60, batch_size=8, loss=SCE))

    assert np.array_equal(flatten(net).values, before)
    assert len(result.losses) == 60
    assert result.losses[-1] < result.losses[0]


def test_zero_epochs_leave_weights_unchanged() -> None:
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, size=(10, 3))
    net = init_network((3, 4, 2), ("relu", "softmax"), 1)
    result = sgd_train(net, x, np.zeros(10, dtype=np.int64), TrainConfig(epochs=0, loss=SCE))
    assert result.losses == []
    assert result.network is not net
    assert np.array_equal(flatten(result.network).values, flatten(net).values)


def test_single_step_moves_weights_by_scaled_gradient() -> None:
    x = np.array([[0.2, 0.7, 0.4]])
    y = np.array([[0.9, 0.1]])
    net = init_network((3, 4, 2), ("relu", "sigmoid"), 5)
    expected = flatten(net).values - 0.3 * gradient(net, x, y, "mse").values
    stepped = sgd_train(net, x, y, TrainConfig(learning_rate=0.3, epochs=1, batch_size=1)).network
    assert np.array_equal(flatten(stepped).values, expected)


def test_linear_regression_recovers_slope() -> None:
    x = np.linspace(0.0, 1.0, 50)[:, np.newaxis]
    net = init_network((1, 1), ("linear",), 0)
    trained = sgd_train(net, x, 2.0 * x, TrainConfig(learning_rate=0.5, epochs=300, batch_size=10)).network
    assert abs(trained.layers[0].weights[0, 0] - 2.0) < 1e-2
    assert abs(trained.layers[0].bias[0]) < 1e-2


def test_sgd_train_is_deterministic_for_a_seed() -> None:
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, size=(20, 3))
    net = init_network((3, 4, 3), ("relu", "sigmoid"), 0)
    cfg = TrainConfig(epochs=5, batch_size=4, seed=9)
    a = sgd_train(net, x, x, cfg)
    b = sgd_train(net, x, x, cfg)
    assert np.array_equal(flatten(a.network).values, flatten(b.network).values)
    assert a.losses == b.losses


def test_frozen_layers_are_not_updated() -> None:
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, size=(16, 3))
    net = init_network((3, 4, 3), ("relu", "sigmoid"), 0)
    trained = sgd_train(net, x, x, TrainConfig(epochs=5, batch_size=4, frozen_layers=(0,))).network
    assert np.array_equal(trained.layers[0].weights, net.layers[0].weights)
    assert not np.array_equal(trained.layers[1].weights, net.layers[1].weights)


def test_frozen_layer_index_out_of_range() -> None:
    net = init_network((2, 2), ("linear",), 0)
    with pytest.raises(ConfigError):
        sgd_train(net, np.ones((2, 2)), np.ones((2, 2)), TrainConfig(frozen_layers=(3,)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_epoch_and_batch() -> None:
    rng = np.random.default_rng(0)
    x = rng.uniform(1, 2, size=(32, 4))
    net = init_network((4, 4, 4), ("linear", "linear"), 0)
    with pytest.raises(TrainingDivergedError) as excinfo:
        sgd_train(net, x, x * 10, TrainConfig(learning_rate=1e6, epochs=50, batch_size=4))
    assert excinfo.value.epoch >= 0
    assert excinfo.value.batch >= 0


def test_network_snapshot_roundtrip() -> None:
    net = init_network((6, 5, 4), ("relu", "softmax"), 7)
    payload = encode_network(net)
    decoded, used = decode_network(payload + b"trailing")
    assert used == len(payload)
    assert decoded.shape == net.shape
    assert np.array_equal(flatten(decoded).values, flatten(net).values)


def test_network_snapshot_rejects_bad_magic() -> None:
    with pytest.raises(WireFormatError):
        decode_network(b"XXXX" + bytes(12))
