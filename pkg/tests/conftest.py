import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from spreadcast.data import SynthConfig, synth_ensemble  # noqa: E402
from spreadcast.model import default_arch  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


TINY_SHAPE = (16, 8, 16, 1)


@pytest.fixture(scope="session")
def tiny_arch():
    return default_arch(TINY_SHAPE, width=0.0625, ceil_mode=True)


@pytest.fixture(scope="session")
def tiny_synth():
    return SynthConfig(grid_h=8, grid_w=16, members=5)


@pytest.fixture(scope="session")
def tiny_runs(tiny_synth):
    import datetime as dt
    dates = [dt.date(2012, 1, 1) + dt.timedelta(days=i) for i in range(6)]
    return [synth_ensemble(tiny_synth, d) for d in dates]


def tiny_samples(runs):
    from spreadcast.training import Samples
    return Samples([r.init_date for r in runs],
                   np.stack([r.control.values for r in runs]),
                   np.stack([r.spread.values for r in runs]))
