import numpy as np
import pytest

from tsclab import nn
from tsclab.kernels import available_backends
from tsclab.taskgen import StreamConfig, make_generator

BACKENDS = sorted(available_backends())


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per kernel backend by rebinding ``tsclab.kernels``."""
    from tsclab import kernels

    mod = available_backends()[request.param]
    for name in ("forward", "embed", "loss_grad", "vjp", "adam_update"):
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


@pytest.fixture
def small_net():
    spec = nn.NetworkSpec(4, ((5, "relu"), (3, "tanh")), 3, seed=7)
    return nn.init_weights(spec), spec


@pytest.fixture
def tiny_stream():
    cfg = StreamConfig(T=3, N=3, K=4, input_dim=12, latent_dim=4, test_shots=10,
                       support_classes=12, probe_classes=6, seed=3)
    return make_generator(cfg)


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-5))


TINY_RUN = {
    "stream.T": 3, "stream.N": 3, "stream.K": 4, "stream.input_dim": 12,
    "stream.latent_dim": 4, "stream.support_classes": 12, "stream.probe_classes": 6,
    "stream.test_shots": 10, "net.hidden": "8", "pretrain.epochs": 3, "pretrain.shots": 5,
    "method.epochs": 5, "tsc.k": 5, "tsc.max_epochs": 5, "probe.epochs": 5,
    "run.seeds": "0-1",
}


@pytest.fixture
def tiny_cfg():
    from tsclab.config import RunConfig

    return RunConfig(TINY_RUN)


# acceptance criteria report one line each; printed after the run
CRITERIA: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
