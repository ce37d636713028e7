"""Shared fixtures: a tiny network configuration and matching data."""
import numpy as np
import pytest

from autodiff import Graph, Tensor
from config import TrainConfig
from network import build_model
from pda_data import SyntheticSpec, generate_synthetic


def tiny_train_config(**overrides) -> TrainConfig:
    """12x12 images, 2x2 puzzles, two conv blocks 12 -> 10 -> 5 -> 4 -> 2."""
    values = dict(image_side=12, grid_side=2, num_permutations=6, num_classes=3,
                  conv_channels=(3, 4), conv_kernels=(3, 2), pool_window=2,
                  batch_source=4, batch_target=4, epochs=1, lr=0.01)
    values.update(overrides)
    return TrainConfig(**values)


def relative_error(analytic, numeric) -> float:
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_grad(fn, values: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar fn() with respect to `values`, perturbed in place."""
    grad = np.zeros_like(values)
    flat, flat_grad = values.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn()
        flat[i] = original - step
        minus = fn()
        flat[i] = original
        flat_grad[i] = (plus - minus) / (2.0 * step)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return tiny_train_config()


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(num_classes=3, target_classes=2, image_side=12, grid_side=2,
                         samples_per_class=8, seed=0)


@pytest.fixture
def tiny_domains(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def scalarize():
    """Reduce an op output to a scalar through a fixed random projection."""
    def reduce(graph: Graph, out: Tensor, projection: np.ndarray) -> Tensor:
        return graph.sum(graph.multiply(out, Tensor(projection)))
    return reduce
