import numpy as np
import pytest

from pimforge.model import Layer, Model, build_network


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model(seed, input_shape=(1, 10, 10), conv=((4, 3), (6, 2)), n_classes=5, bias_scale=0.1):
    model = build_network(input_shape, list(conv), n_classes, seed=seed)
    r = np.random.default_rng(seed + 1)
    for layer in model.layers:
        layer.biases = r.normal(0, bias_scale, size=layer.biases.shape)
    return model


@pytest.fixture
def small_model():
    return random_model(7)


@pytest.fixture
def one_layer_model():
    return Model([Layer(np.full((1, 1, 1, 1), 0.5), np.zeros(1))], (1, 1, 1))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number} {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
