import json

import numpy as np
import pytest

from fairsqueeze.network import Model

import acceptance_log


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES):
            terminalreporter.write_line(line)


TINY_ARCH = {
    "input_shape": [8, 8, 1],
    "num_classes": 3,
    "layers": [
        {"kind": "Conv2D", "filters": 4, "kernel_size": 3},
        {"kind": "BatchNorm"},
        {"kind": "Activation", "function": "relu"},
        {"kind": "MaxPool"},
        {"kind": "Dropout", "rate": 0.25},
        {"kind": "Flatten"},
        {"kind": "Dense", "units": 6},
        {"kind": "Activation", "function": "tanh"},
        {"kind": "Dense", "units": 3},
        {"kind": "Softmax"},
    ],
}

SMALL_ARCH = {
    "input_shape": [16, 16, 1],
    "num_classes": 3,
    "layers": [
        {"kind": "Conv2D", "filters": 8, "kernel_size": 3},
        {"kind": "BatchNorm"},
        {"kind": "Activation", "function": "relu"},
        {"kind": "MaxPool"},
        {"kind": "Conv2D", "filters": 16, "kernel_size": 3},
        {"kind": "BatchNorm"},
        {"kind": "Activation", "function": "relu"},
        {"kind": "MaxPool"},
        {"kind": "Flatten"},
        {"kind": "Dense", "units": 32},
        {"kind": "BatchNorm"},
        {"kind": "Activation", "function": "relu"},
        {"kind": "Dropout", "rate": 0.25},
        {"kind": "Dense", "units": 3},
        {"kind": "Softmax"},
    ],
}


@pytest.fixture
def tiny_model():
    return Model.from_config(TINY_ARCH, seed=1)


@pytest.fixture
def small_arch_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_ARCH))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
