import numpy as np
import pytest
import torch

from jstegrl.jpeg_model import JpegImage, compress, quality_to_quant_table


def random_image(rng, h=32, w=32, qf=75, spread=20):
    """Random coefficient grid with a plausible magnitude profile."""
    table = quality_to_quant_table(qf)
    coef = np.rint(rng.laplace(0, spread / np.tile(table.steps, (h // 8, w // 8)))).astype(np.int32)
    return JpegImage(coef, table)


def pixel_image(rng, h=32, w=32, qf=75):
    return compress(rng.uniform(0, 255, (h, w)), quality_to_quant_table(qf))


def central_fd(fn, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of a float64 tensor."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(x).item()
        flat[i] = old - h
        down = fn(x).item()
        flat[i] = old
        g.view(-1)[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


_criteria: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    label = dict(report.user_properties).get("criterion")
    if label is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _criteria.append(("PASS" if report.passed else "FAIL", label))


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.write_sep("=", "acceptance criteria")
        for status, label in _criteria:
            terminalreporter.write_line(f"{status}  {label}")
