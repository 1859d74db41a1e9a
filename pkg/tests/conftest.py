import numpy as np
import pytest
import torch

from swintempo.volume_io import CTVolume, PhantomConfig, generate_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_volume(rng):
    vox = rng.normal(-500, 300, size=(4, 8, 8)).astype(np.float32)
    return CTVolume("vol-a", vox, (2.5, 0.7, 0.7), (-10.0, 5.0, 3.0))


@pytest.fixture(scope="session")
def phantom_items():
    cfg = PhantomConfig(n_volumes=2, shape=(16, 64, 64), nodules_per_volume=(1, 2), seed=11)
    return generate_phantom(cfg)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# acceptance criteria report: (number, title, passed, detail), printed once at the end of the run
ACCEPTANCE_RESULTS = []


@pytest.fixture
def criterion():
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = (number, title, bool(passed), detail)
        ACCEPTANCE_RESULTS.append(line)
        print(_format(line))
        return bool(passed)

    return record


def _format(line):
    number, title, passed, detail = line
    return f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
            terminalreporter.write_line(_format(line))
