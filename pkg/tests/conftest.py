from pathlib import Path

import numpy as np
import pytest

from ranloop.twin import CellConfig, TwinParams, TwinState

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def make_twin(cells, positions, load=0.0, seed=0, sigma=0.0, speed=None, n_subbands=4, **kw):
    params = TwinParams(bounds=kw.pop("bounds", (0.0, 0.0, 2000.0, 2000.0)), n_subbands=n_subbands,
                        shadowing_sigma=sigma, speed_range=speed, **kw)
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    return TwinState(cells, list(range(len(pos))), pos, load, params, seed)


def two_cells(**kw):
    return [CellConfig(0, (500.0, 1000.0), **kw), CellConfig(1, (1500.0, 1000.0), **kw)]


@pytest.fixture
def twin_factory():
    return make_twin


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
