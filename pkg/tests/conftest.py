import numpy as np
import pytest

from dipforge.data import ingest_dataset
from dipforge.toyset import write_toyset


@pytest.fixture(scope="session")
def tiny_dirs(tmp_path_factory):
    return write_toyset(tmp_path_factory.mktemp("tiny"), count=4, val_count=2, size=48, seed=3)


@pytest.fixture(scope="session")
def tiny_ds(tiny_dirs):
    """Four 48 px toy images at x4 with a mildly brightened stand-in for enhanced GT."""
    ds = ingest_dataset(tiny_dirs["train"], 4)
    return ds.with_enh([np.clip(h * 1.02, 0, 1) for h in ds.hr])


@pytest.fixture(scope="session")
def tiny_val(tiny_dirs):
    return ingest_dataset(tiny_dirs["val"], 4)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS, key=lambda k: int(k[1:])):
            terminalreporter.write_line(RESULTS[key])
