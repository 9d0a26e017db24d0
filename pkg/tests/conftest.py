import functools

import pytest
import torch

from lensforge.lens import LensModel, builtin_lens, system_from_prescription
from lensforge.raytrace import SamplingConfig, spot_diagrams

BASELINES = ("doublet", "cooke", "tessar")

# verdict lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE = []
SMALL = SamplingConfig(n_h=5, n_p=256, n_rings=8)


@functools.lru_cache(maxsize=None)
def baseline_model(name: str) -> LensModel:
    return LensModel(builtin_lens(name))


@functools.lru_cache(maxsize=None)
def baseline_system(name: str):
    with torch.no_grad():
        return baseline_model(name).system().detach()


@functools.lru_cache(maxsize=None)
def baseline_spots(name: str, sampling: SamplingConfig = SamplingConfig()):
    with torch.no_grad():
        return spot_diagrams(baseline_system(name), sampling)


@functools.lru_cache(maxsize=None)
def raw_system(name: str):
    return system_from_prescription(builtin_lens(name))


@pytest.fixture
def small_sampling():
    return SMALL


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
