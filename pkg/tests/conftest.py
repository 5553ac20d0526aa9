import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hapm_accel.reference_nn import Activation, Add, Conv, ConvParams, NetworkSpec, Pool
from hapm_accel.tensor_core import Tensor3, Tensor4

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_tensor3(rng, x, y, c, lo=-128, hi=128):
    return Tensor3(rng.integers(lo, hi, (x, y, c)))


def random_tensor4(rng, k, n_in, n_out, lo=-128, hi=128):
    return Tensor4(rng.integers(lo, hi, (k, k, n_in, n_out)))


def toy_net(size=8, channels=(2, 4, 4), kernel=3, stride=1, padding=1):
    """Chain of convs with ReLU between them and a residual add at the end."""
    layers = []
    prev = "input"
    for n, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
        layers.append(Conv(f"conv{n}", (prev,), kernel, stride if n == 0 else 1, padding, c_in, c_out))
        layers.append(Activation(f"relu{n}", (f"conv{n}",)))
        prev = f"relu{n}"
    if len(channels) > 2 and channels[-1] == channels[-2]:
        layers.append(Add("add", (prev, f"relu{len(channels) - 3}")))
        prev = "add"
    layers.append(Pool("pool", (prev,), 2, 2, "max"))
    return NetworkSpec("toy", "input", (size, size, channels[0]), layers)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def params(kernel_codes, bias=None):
    return ConvParams(Tensor4(np.asarray(kernel_codes)), bias)
