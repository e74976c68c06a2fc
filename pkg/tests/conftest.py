from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nmadetect.data import load_dataset
from nmadetect.mcmc import SamplerConfig

SMOKING_CSV = Path(__file__).parent.parent / "src" / "nmadetect" / "datasets" / "smoking.csv"


@pytest.fixture(scope="session")
def smoking():
    return load_dataset(SMOKING_CSV)


@pytest.fixture(scope="session")
def fast_cfg():
    """Small sampler budget for unit tests."""
    return SamplerConfig(iterations=3000, burn_in=1000, chains=2, thin=1, seed=42)


@pytest.fixture(scope="session")
def desk_cfg():
    """Desk-scale budget used by the experiment harness defaults."""
    return SamplerConfig(iterations=10_000, burn_in=2000, chains=2, thin=1, seed=42)
