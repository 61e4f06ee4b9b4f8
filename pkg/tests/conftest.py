import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sdform import _kernels
from sdform.quant import ExponentSet, Pow2Matrix
from sdform.tensor_io import WeightTensor

settings.register_profile("sdform", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sdform")


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    """Run a test once per kernel implementation."""
    if request.param == "numba" and not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setattr(_kernels, "USE_NUMBA", request.param == "numba")
    return request.param


def random_pow2(rng, shape, P=ExponentSet(), density=0.6):
    sign = rng.choice(np.array([-1, 1], np.int8), size=shape)
    sign[rng.random(shape) >= density] = 0
    exp = rng.integers(P.p_min, P.p_max + 1, size=shape).astype(np.int8)
    exp[sign == 0] = 0
    return Pow2Matrix(sign, exp)


@pytest.fixture
def small_model_tensors():
    rng = np.random.default_rng(7)
    return [
        WeightTensor.from_array("fc1", rng.standard_normal((10, 14)) * 0.2),
        WeightTensor.from_array("conv1", rng.standard_normal((4, 3, 3, 3)) * 0.2),
        WeightTensor.from_array("pw", rng.standard_normal((5, 6, 1, 1)) * 0.2),
        WeightTensor.from_array("head", rng.standard_normal((3, 10)) * 0.2),
    ]


# --------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion
# --------------------------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when == "call" or report.outcome != "passed":
        marks = getattr(report, "_criterion", None)
        if marks is not None:
            prev = _criteria.get(marks[0], (marks[1], "PASS"))
            ok = prev[1] == "PASS" and report.outcome == "passed"
            _criteria[marks[0]] = (marks[1], "PASS" if ok else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result()._criterion = (mark.kwargs["number"], mark.kwargs["title"])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}")
