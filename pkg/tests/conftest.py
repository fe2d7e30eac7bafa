import numpy as np
import pytest

from udaseg.taxonomy import ClassTaxonomy, resolve_taxonomy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_taxonomy():
    return resolve_taxonomy("toy")


@pytest.fixture
def cityscapes():
    return resolve_taxonomy("cityscapes")


@pytest.fixture
def six_class():
    """Six classes, construction = {2, 3}, nature = {4, 5}."""
    return ClassTaxonomy(
        names=("road", "sky", "building", "wall", "vegetation", "terrain"),
        coarse_groups={"construction": frozenset({2, 3}), "nature": frozenset({4, 5})},
        active_groups=frozenset({"construction", "nature"}),
    )


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, text, ok)`` records the outcome, prints it and asserts it."""

    def record(number: int, text: str, ok: bool):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
