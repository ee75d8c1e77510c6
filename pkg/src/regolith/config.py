"""Central configuration for data generation, models, training, and planning.

Every tunable lives here so a run can be reproduced from its echoed config.
Configs are plain dataclasses with JSON round-trip helpers; unknown keys in
a JSON file are rejected to catch typos early.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class TerrainConfig:
    grid_n: int = 33              # diamond-square grid nodes per side (2^k + 1)
    roughness: float = 0.012      # initial noise amplitude, meters
    base_height: float = 0.045    # mean surface height above the floor, meters
    cube_size: float = 0.02      # quantization cube edge, meters
    particles_min: int = 5        # particles per occupied cube (inclusive range)
    particles_max: int = 10
    target_particles: int = 3000  # farthest-point-sample budget (0 = keep all)
    floor_z: float | None = 0.0   # fill down to this height; None = 2 cube layers
    seed: int = 0


@dataclass
class OracleConfig:
    particle_radius: float = 0.007
    friction: float = 0.5
    ground_friction: float = 0.6
    restitution: float = 0.0
    solver_iters: int = 4
    substeps: int = 20
    dt: float = 0.1
    gravity: float = 9.81
    damping: float = 0.9          # per-substep velocity retention (contacts only)
    relaxation: float = 0.8       # Jacobi constraint under-relaxation
    static_friction_scale: float = 4.0  # static-regime multiplier on friction
    sleep_displacement: float = 3e-4    # per-substep freeze threshold, meters
    max_speed: float = 1.2        # velocity clamp, m/s (blow-up guard)


@dataclass
class ToolConfig:
    width: float = 0.08           # scoop width (y extent)
    length: float = 0.09          # bottom plate length (x extent, tip at x=0)
    wall_height: float = 0.045
    thickness: float = 0.01
    sample_spacing: float = 0.016  # tool surface particle spacing


@dataclass
class GraphConfig:
    history: int = 3
    knn_k: int = 8
    knn_radius: float = 0.032
    normal_radius: float = 0.028
    embed_dim: int = 8


@dataclass
class ModelConfig:
    latent: int = 32
    hidden: int = 32
    rounds: int = 4
    include_normals: bool = True
    include_z: bool = False
    displacement_scale: float = 0.01   # meters; target and velocity normalization
    abs_z_scale: float = 0.05          # meters; ablation-only height feature


@dataclass
class TrainConfig:
    steps: int = 20000
    batch: int = 2
    lr: float = 1e-3
    lr_final_frac: float = 0.1    # cosine-free linear decay floor
    optimizer: str = "adam"       # "adam" | "sgd"
    momentum: float = 0.9
    noise_std: float = 4e-4       # random-walk input noise, meters
    seed: int = 0
    log_every: int = 500


@dataclass
class RoiConfig:
    crop: float = 0.4             # square crop side, meters, centered on the tool
    in_cells: int = 32            # input heightmap resolution
    out_cells: int = 16           # proposed depth-surface resolution
    v_thresh: float = 0.001      # moving-particle label threshold, m/step
    min_component: int = 5        # connected-component noise filter
    rim: float = 0.025            # bowl inflation added to the static surface
    hinge: float = 0.5            # empty-cell hinge target, meters above the tip
    margin: float = 0.01          # proposal-time safety margin subtracted from the surface
    ctrl_latent: int = 16
    cnn_base: int = 8             # U-Net base channel count


@dataclass
class PlannerConfig:
    batch: int = 32
    iterations: int = 4
    temperature: float = 0.1
    elite_frac: float = 0.25
    explore_frac: float = 0.3     # fraction resampled from the prior each iteration
    max_step: float = 0.015       # per-step displacement clamp, meters
    settle_steps: int = 10        # oracle settling after executing an action
    # PDS bounds: entry handled from goal extent; the rest are global.
    depth_lo: float = 0.012
    depth_hi: float = 0.045
    drag_lo: float = 0.05
    drag_hi: float = 0.18
    slope_lo: float = -0.08
    slope_hi: float = 0.08
    radius_lo: float = 0.04
    radius_hi: float = 0.12
    speed_lo: float = 0.04
    speed_hi: float = 0.10
    dump_pre_lo: float = -0.35
    dump_pre_hi: float = 0.15
    dump_post_lo: float = 1.0
    dump_post_hi: float = 1.5
    release_lo: float = 0.05
    release_hi: float = 0.12
    carry_threshold: int = 12     # particles in the scoop that force a dump


@dataclass
class BenchConfig:
    batches: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)
    steps: int = 3                # rollout steps per timing measurement
    reps: int = 3                 # repetitions; medians are reported
    mem_safety: float = 0.75      # fraction of available RAM before OoM is declared


@dataclass
class Config:
    """Top-level bundle; subsections stay independently overridable."""

    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    tool: ToolConfig = field(default_factory=ToolConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, default=_jsonify)

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "Config":
        cfg = Config()
        for section, payload in data.items():
            if not hasattr(cfg, section):
                raise KeyError(f"unknown config section: {section!r}")
            current = getattr(cfg, section)
            if dataclasses.is_dataclass(current):
                names = {f.name for f in dataclasses.fields(current)}
                for key, value in payload.items():
                    if key not in names:
                        raise KeyError(f"unknown key {key!r} in section {section!r}")
                    if key == "batches":
                        value = tuple(int(v) for v in value)
                    setattr(current, key, value)
            else:
                setattr(cfg, section, payload)
        return cfg

    @staticmethod
    def load(path: str | Path) -> "Config":
        return Config.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _jsonify(obj: Any) -> Any:
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def desk_config() -> Config:
    """A small-scene configuration sized for single-core training runs."""
    cfg = Config()
    cfg.terrain.grid_n = 17
    cfg.terrain.base_height = 0.035
    cfg.terrain.roughness = 0.014
    cfg.terrain.target_particles = 750
    cfg.oracle.particle_radius = 0.0062
    return cfg


def bench_config() -> Config:
    """The standard benchmark scene: ~0.5 m square, 3,000 tracked particles."""
    cfg = Config()
    cfg.terrain.grid_n = 27
    cfg.terrain.base_height = 0.042
    cfg.terrain.roughness = 0.012
    cfg.terrain.target_particles = 3000
    cfg.oracle.particle_radius = 0.0075
    return cfg
