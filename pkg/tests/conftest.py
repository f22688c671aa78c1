import numpy as np
import pytest

from fedmeta.autodiff import ComputationGraph, Layer
from fedmeta.models import ModelSpec, build_standard_cnn
from fedmeta.params import BlockPartition, ParameterSet


def small_cnn(seed=0, input_shape=(1, 8, 8), channels=(2, 3, 4), kernel=3, width=5, dtype=np.float32):
    spec = ModelSpec(input_shape=input_shape, conv_channels=channels, kernel_size=kernel, dense_width=width)
    graph, params = build_standard_cnn(spec, seed)
    return graph.copy(dtype=dtype), params


def randomize(params: ParameterSet, seed: int, scale: float = 0.5) -> ParameterSet:
    """Nonzero random values everywhere, biases included."""
    rng = np.random.default_rng(seed)
    return ParameterSet({k: rng.normal(0, scale, v.shape) for k, v in params.items()}, params.partition)


def finite_difference(graph: ComputationGraph, params, x, y, step=1e-3):
    """Central differences of the mean BCE loss, evaluated in float64."""
    g64 = graph.copy(dtype=np.float64)
    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name, value in base.items():
        grad = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            orig = value[i]
            value[i] = orig + step
            g64.forward(base, x)
            up = g64.loss(y).value[0]
            value[i] = orig - step
            g64.forward(base, x)
            down = g64.loss(y).value[0]
            value[i] = orig
            grad[i] = (up - down) / (2 * step)
        out[name] = grad
    return out


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def dense_logistic(n_features: int):
    graph = ComputationGraph([Layer("dense", "fc"), Layer("sigmoid")], (n_features,))
    partition = BlockPartition((), ("fc.weight", "fc.bias"))
    params = ParameterSet({"fc.weight": np.zeros((n_features, 1)), "fc.bias": np.zeros(1)}, partition)
    return graph, params


@pytest.fixture
def cnn():
    return small_cnn()
