import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lobesim.phantom import PhantomSpec, downsample, generate_phantom


@pytest.fixture(scope="session")
def default_phantom():
    """Generated default phantom shared across the suite: (cloud, volume, model)."""
    return generate_phantom(PhantomSpec.default(seed=0))


@pytest.fixture(scope="session")
def planner_cloud(default_phantom):
    cloud, _, _ = default_phantom
    return downsample(cloud, 10_000)


@pytest.fixture(scope="session")
def plan_bundle(default_phantom, planner_cloud):
    """(model, axis, troughs, fit, plan) for the default phantom."""
    from lobesim.anatomy import find_channel_axis, find_troughs, fit_capsule_surface
    from lobesim.cutplan import plan_resection

    _, _, model = default_phantom
    axis = find_channel_axis(planner_cloud, seed=0)
    troughs = find_troughs(planner_cloud, axis, instrument_y=[0.0, 0.0, 1.0], seed=0)
    fit = fit_capsule_surface(planner_cloud, axis, troughs, margin=1.0)
    plan = plan_resection(planner_cloud, axis, troughs, fit)
    return model, axis, troughs, fit, plan
