from __future__ import annotations

import functools

import pytest

from upo_control.catalog import HALO_TARGET_ID, LYAPUNOV_TARGET_ID, bundled_catalog_path, load_catalog
from upo_control.sections import get_section
from upo_control.stability import classify_floquet, monodromy_at

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


@functools.lru_cache(maxsize=None)
def catalog():
    return load_catalog(bundled_catalog_path())


@functools.lru_cache(maxsize=None)
def monodromy(section: str):
    sec = get_section(section)
    target = LYAPUNOV_TARGET_ID if sec.planar else HALO_TARGET_ID
    r = monodromy_at(catalog()[target], sec)
    return r, classify_floquet(r)


@pytest.fixture(scope="session")
def cat():
    return catalog()


@pytest.fixture(scope="session")
def lyap(cat):
    return cat[LYAPUNOV_TARGET_ID]


@pytest.fixture(scope="session")
def halo(cat):
    return cat[HALO_TARGET_ID]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
