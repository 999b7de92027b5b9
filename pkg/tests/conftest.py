import numpy as np
import pytest

from smolsim.material import (
    ConstantMatrix,
    ConstantVelocity,
    FragTable,
    SpeciesTable,
    ZeroVelocity,
    shattering_table,
)


def binary_table(a=1.0, C_a=5.0, sigma=(0.5, 0.5), velocity=None, d=1):
    """m=(1,2); species 2 shatters into two monomers in every channel."""
    vel = velocity or (ZeroVelocity(d), ZeroVelocity(d))
    return SpeciesTable((1, 2), tuple(sigma), tuple(vel), ConstantMatrix(np.full((2, 2), a)),
                        shattering_table((1, 2)), C_a, d)


def elastic_table(a=0.0, sigma=1.0, C_a=1.0, d=1, velocity=None):
    return SpeciesTable((1,), (sigma,), (velocity or ZeroVelocity(d),), ConstantMatrix(np.full((1, 1), a)),
                        FragTable(np.ones((1, 1, 1), dtype=np.int64)), C_a, d)


@pytest.fixture
def binary():
    return binary_table()


@pytest.fixture
def drifting_binary():
    return binary_table(sigma=(1.0, 0.5), velocity=(ZeroVelocity(1), ConstantVelocity((0.5,))))


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
