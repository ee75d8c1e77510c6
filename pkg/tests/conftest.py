import numpy as np
import pytest

from regolith.config import Config
from regolith.dataset import SampleSet
from regolith.dynamics import create_dynamics_model
from regolith.localized import StepModels
from regolith.oracle import build_scene, generate_trajectories
from regolith.planner import random_action_sampler
from regolith.roi import RoiProposer


def tiny_config() -> Config:
    cfg = Config()
    cfg.terrain.grid_n = 9
    cfg.terrain.base_height = 0.032
    cfg.terrain.roughness = 0.012
    cfg.terrain.target_particles = 260
    cfg.oracle.particle_radius = 0.0065
    cfg.planner.drag_lo = 0.04
    cfg.planner.drag_hi = 0.07
    cfg.planner.depth_hi = 0.03
    return cfg


@pytest.fixture(scope="session")
def tiny_cfg() -> Config:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg):
    sampler = random_action_sampler(tiny_cfg, kinds=("scoop", "push"),
                                    weights=(0.6, 0.4))
    trajs = generate_trajectories(3, tiny_cfg, sampler, base_seed=500)
    assert trajs, "tiny dataset generation produced no trajectories"
    return trajs


@pytest.fixture(scope="session")
def tiny_samples(tiny_cfg, tiny_dataset):
    return SampleSet(tiny_dataset, tiny_cfg.graph, tiny_cfg.roi)


@pytest.fixture(scope="session")
def tiny_models(tiny_cfg):
    model = create_dynamics_model(tiny_cfg.model, tiny_cfg.graph, seed=7)
    proposer = RoiProposer(tiny_cfg.roi, history=tiny_cfg.graph.history)
    proposer.init_weights(np.random.default_rng(8))
    return StepModels(dynamics=model, proposer=proposer)


@pytest.fixture(scope="session")
def tiny_scene(tiny_cfg):
    return build_scene(tiny_cfg, seed=42)
