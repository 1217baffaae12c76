import re
import sys
from pathlib import Path

import pytest

from coexplore.core import CONV, CONV_CHAIN, FpgaPool, FpgaSpec, LayerSpec, SearchSpace, TensorShape, XC7Z015

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

_acceptance: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    _acceptance[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    match = re.match(r"test_c(\d+)_", item.name)
    # a criterion that crashed before reporting still gets a FAIL line
    if match and report.when == "call" and report.failed and int(match[1]) not in _acceptance:
        record_criterion(int(match[1]), False, f"error: {call.excinfo.typename}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_acceptance):
            terminalreporter.write_line(_acceptance[number])


@pytest.fixture
def conv():
    def make(filters, kernel, stride=1):
        return LayerSpec(CONV, filters, kernel, stride)
    return make


@pytest.fixture
def xc7z015():
    return XC7Z015


@pytest.fixture
def pool2():
    return FpgaPool.homogeneous(XC7Z015, 2)


@pytest.fixture
def tiny_space():
    return SearchSpace(CONV_CHAIN, 4, (24, 64), (3, 7), (1, 2), input_shape=TensorShape(32, 32, 3))


@pytest.fixture
def python_exe():
    return sys.executable


def stub_device(name="dev"):
    return FpgaSpec(name, 1, 1, 1, 1, 1)
