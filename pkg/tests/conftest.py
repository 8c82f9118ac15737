import pytest
from hypothesis import HealthCheck, settings

import helpers

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def example1_state():
    return helpers.example1_state()


@pytest.fixture
def ledger():
    return helpers.small_ledger()
