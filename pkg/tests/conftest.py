"""Shared fixtures: the reference states and cached branch tables."""

import numpy as np
import pytest

from hypwave.states import (
    BumpAmplitude,
    GeodesicArc,
    HypersurfaceData,
    MonochromaticState,
    TrigProfile,
)

# reference observation point: interior, away from the octagon symmetry axes
X0 = -0.293 + 0.450j

PROFILE = ((-0.12, 1.7, 0.4), (-0.05, 2.9, float(np.pi / 2)))


def _mono_state(speed=1.0):
    arc = GeodesicArc(half_length=1.2)
    data = HypersurfaceData(arc, TrigProfile(PROFILE))
    amp = BumpAmplitude(complex(np.tanh(0.05)), 0.85, 1.0)
    return MonochromaticState(data, amp, speed, 0.95)


@pytest.fixture(scope="session")
def mono_state():
    return _mono_state()


@pytest.fixture(scope="session")
def fast_state():
    """Same geometry at speed 2.5 (arc budget reached at earlier times)."""
    return _mono_state(speed=2.5)


@pytest.fixture(scope="session")
def small_state():
    """Light state for cheap unit tests."""
    arc = GeodesicArc(half_length=0.6)
    data = HypersurfaceData(arc, TrigProfile(PROFILE))
    amp = BumpAmplitude(complex(np.tanh(0.04)), 0.22, 1.0)
    return MonochromaticState(data, amp, 1.0, 0.3)


@pytest.fixture(scope="session")
def tables(mono_state):
    """Branch tables of the reference state at the acceptance times."""
    from hypwave.wkb import find_branches
    return {t: find_branches(mono_state, X0, float(t)) for t in (6.0, 8.0, 10.0, 12.0)}
