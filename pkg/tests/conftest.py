import numpy as np
import pytest

from gzsl_moe import _kernels_py, kernels

try:
    from gzsl_moe import _ckernels
except ImportError:  # extension not built
    _ckernels = None

KERNEL_NAMES = ("topk_select", "knn_descriptors", "gelu", "gelu_backward", "adam_step")
BACKENDS = ["python"] + (["cython"] if _ckernels is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    mod = _kernels_py if request.param == "python" else _ckernels
    for name in KERNEL_NAMES:
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    monkeypatch.setattr(kernels, "BACKEND", request.param)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = []


@pytest.fixture(scope="session")
def verdict():
    """``verdict(id, passed, detail)`` prints and records one criterion line."""
    def record(cid, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
