import math

import numpy as np
import pytest
import torch

from contracert.interval import IntervalVector
from contracert.metric import NeuralContractionMetric
from contracert.nn import Activation, FeedforwardNetwork, ZeroAnchoredBoundedController
from contracert.plant import InvertedPendulum
from contracert.verifier import ContractionProblem

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_net(rng, sizes, hidden=None, output=None, bias_scale=0.5):
    """Random network with nonzero biases so that bounds are not centred at 0."""
    net = FeedforwardNetwork.init(sizes, rng, hidden=hidden, output=output)
    layers = [(W * rng.uniform(0.5, 2.0), rng.normal(0.0, bias_scale, size=b.shape)) for W, b in net.layers]
    return FeedforwardNetwork(layers, net.hidden, net.output)


def random_box(rng, n, center_scale=1.0, width_scale=0.5):
    c = rng.uniform(-center_scale, center_scale, n)
    h = rng.uniform(0.0, width_scale, n)
    return IntervalVector(c - h, c + h)


def sample_box(rng, box, k):
    lo, hi = box.numpy()
    return lo + (hi - lo) * rng.uniform(0.0, 1.0, size=(k, len(lo)))


def pendulum_problem(rng, ctrl_hidden=(16, 16), metric_hidden=(32, 32), rate=0.0, scale=None):
    plant = InvertedPendulum()
    cnet = random_net(rng, [2, *ctrl_hidden, 1])
    mnet = random_net(rng, [2, *metric_hidden, 4])
    ctrl = ZeroAnchoredBoundedController(cnet, plant.input_bound if scale is None else scale)
    return ContractionProblem(plant, ctrl, NeuralContractionMetric(mnet, 0.1), rate)


def rel_close(a, b, tol):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return bool(np.all(np.abs(a - b) <= tol * np.maximum(1.0, np.abs(b))))


HALF_PI = 0.5 * math.pi

ACTIVATIONS = [Activation.softplus(), Activation.smooth_leaky_relu(0.2), Activation.scaled_tanh(1.5)]


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    outcome = "FAIL" if call.excinfo is not None else "PASS"
    item.config._criteria = getattr(item.config, "_criteria", {})
    item.config._criteria[number] = f"{outcome} criterion {number}: {title}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_criteria", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
