from __future__ import annotations

import os
import random

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng() -> random.Random:
    return random.Random(12345)


@pytest.fixture(scope="session")
def synthetic_db():
    from mmptgen.synthetic import synthetic_mmpt_database

    return synthetic_mmpt_database()


@pytest.fixture(scope="session")
def synthetic_split(synthetic_db):
    from mmptgen.mmp import split_dataset

    return split_dataset(synthetic_db, 0.9, 0)
