"""
Shared fixtures for the thz_processing test suites
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add repository root to path
sys.path.append(str(Path(__file__).parent.parent.parent))

from thz_processing.data import NoiseSpec, ParamRanges, sample_truth, synthesize_volume  # noqa: E402
from thz_processing.model import AcquisitionConfig  # noqa: E402


@pytest.fixture
def cfg():
    return AcquisitionConfig.default()


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def ranges():
    return ParamRanges()


@pytest.fixture
def noiseless_volume(cfg, ranges):
    truth = sample_truth(3, ranges, 8, 8)
    return truth, synthesize_volume(truth, cfg, NoiseSpec(sigma_noise=0.0, seed=3))


@pytest.fixture
def noisy_volume(cfg, ranges):
    truth = sample_truth(5, ranges, 8, 8)
    return truth, synthesize_volume(truth, cfg, NoiseSpec(sigma_noise=0.05, seed=5))


def random_params(rng, ranges: ParamRanges, n: int) -> np.ndarray:
    return rng.uniform(ranges.lower, ranges.upper, size=(n, 4))
