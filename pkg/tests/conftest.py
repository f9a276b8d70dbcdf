import numpy as np
import pytest

from mrfrecon import spin_sim


@pytest.fixture(scope="session")
def short_schedule():
    return spin_sim.default_schedule(60)


@pytest.fixture(scope="session")
def small_dictionary(short_schedule):
    t1 = spin_sim.GridSpec(((200.0, 2000.0, 150.0),))
    t2 = spin_sim.GridSpec(((20.0, 300.0, 20.0),))
    return spin_sim.build_dictionary(t1, t2, short_schedule)


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
