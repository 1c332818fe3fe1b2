import warnings

import numpy as np
import pytest

from nutbot import rigidbody as rb
from nutbot.harness import ExperimentConfig, nominal_configuration
from nutbot.planner import select_grasp_direction
from nutbot.world import World, WorldConfig


@pytest.fixture(scope="session")
def model():
    return rb.default_model()


@pytest.fixture(scope="session")
def scene(model):
    """Default bolt, the nominal start configuration and a grasp solution."""
    cfg = ExperimentConfig()
    q_nom = nominal_configuration(model, cfg.gripper_start)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        k, q_grasp = select_grasp_direction(cfg.bolt, 0.0, q_nom, model)
    return dict(bolt=cfg.bolt, q_nominal=q_nom, face=k, q_grasp=q_grasp, config=cfg)


@pytest.fixture
def world(model, scene):
    return World(model, scene["bolt"], WorldConfig())


@pytest.fixture
def grasped_state(world, scene):
    """Gripper closed on the nut at rest."""
    s = world.initial_state(scene["q_grasp"], aperture=world.bolt.flat_width)
    g = rb.gravity_torque(world.model, s.q)
    s = world.step(s, g, 0.0)
    assert s.grasped
    return s
