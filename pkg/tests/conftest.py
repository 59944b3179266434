import pytest

from sontagdelay import demos
from sontagdelay.clkf import parse_clkf
from sontagdelay.dsl import parse_model
from sontagdelay.experiments import read_config

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


DEMO_SYSTEM = """
system { n=1 m=1 delta=1.0 f = -x[0](0) + 0.5*x[0](-1.0) g = 1.0 }
"""

DEMO_CLKF = """
clkf {
    P = [1.0]
    term(tau=1.0, mu=0.25, Q=[1.0])
    alpha1 = pow(0.4, 2)
    alpha2 = pow(1.5, 2)
    alpha3 = pow(0.1, 2)
    r = 0.5
    p = 1.0
}
"""


@pytest.fixture
def demo_model():
    return parse_model(DEMO_SYSTEM)


@pytest.fixture
def demo_clkf():
    return parse_clkf(DEMO_CLKF)


@pytest.fixture
def demo_config():
    return read_config(demos.text("demo.dyn"))
