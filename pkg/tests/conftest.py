from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from twostage_inference import designs as D
from twostage_inference import population as P
from twostage_inference import twostage as T

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

TINY_VALUES = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.5], [2.0, 2.0, 9.0], [7.0, 1.0, 3.0]]


@pytest.fixture
def tiny_pop():
    return P.build_population(TINY_VALUES)


@pytest.fixture(params=["srswor", "rejective"])
def tiny_design(request, tiny_pop):
    if request.param == "srswor":
        first = D.srswor(4, 2)
    else:
        first = D.rejective(target_pi=D.pps_probabilities([1.0, 2.0, 3.0, 4.0], 2))
    return T.TwoStageDesign(first, T.srswor_second_stage(tiny_pop, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
