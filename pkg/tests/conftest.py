import numpy as np
import pytest

from cahfp.nn import Architecture, Conv2d, Dense, Flatten, init_params, mlp

ACCEPTANCE_LINES = []


def record_acceptance(number, name, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def conv_net():
    # 1x6x6 input -> two 3x3 filters -> 2x4x4 -> flatten 32 -> 5 -> 3
    return Architecture((1, 6, 6), (Conv2d(1, 2, 3, 3, 1, "relu"), Flatten(),
                                    Dense(32, 5, "relu"), Dense(5, 3)))


def strided_conv_net():
    return Architecture((2, 7, 7), (Conv2d(2, 3, 3, 3, 2, "relu"), Conv2d(3, 2, 2, 2, 1, "identity"),
                                    Flatten(), Dense(8, 4)))


ARCH_MATRIX = {
    "softmax": lambda: mlp(5, [], 3),
    "mlp1": lambda: mlp(6, [7], 4),
    "mlp2": lambda: mlp(4, [5, 3], 2),
    "linear_hidden": lambda: Architecture((3,), (Dense(3, 4), Dense(4, 2))),
    "conv": conv_net,
    "conv_strided": strided_conv_net,
}


def batch_for(arch, n, rng):
    x = rng.normal(size=(n,) + arch.input_shape)
    y = rng.integers(0, arch.num_classes, size=n)
    return x, y


@pytest.fixture(params=sorted(ARCH_MATRIX))
def any_arch(request):
    return ARCH_MATRIX[request.param]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_dense():
    """Dense(4->3, relu) followed by Dense(3->2): 15 + 8 = 23 parameters."""
    return Architecture((4,), (Dense(4, 3, "relu"), Dense(3, 2)))


def random_params(arch, seed):
    return init_params(arch, np.random.default_rng(seed))
