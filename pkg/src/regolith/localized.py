"""Localized dynamics stepping.

One step: align a planar frame with the scoop tip, propose the active
region, run the message-passing dynamics on the induced subgraph (tool
nodes always included), and restore world coordinates. Particles outside
the region are carried through bit-identically; the tool advances
kinematically. Batched candidates are fused into one large disjoint graph
so a single aggregation pass serves the whole batch, with transparent
sub-batching to bound peak memory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import GraphConfig, RoiConfig
from .core import ControlInput, Frame2D, Vec3
from .dynamics import DynamicsModel, fuse_graphs
from .graph import CLASS_TOOL, ParticleState
from .oracle import SimScene, tool_impulses
from .roi import RoiProposer, control_vector, geo_propose, in_crop_mask
from .dataset import LocalSample, build_model_graph

MAX_FUSED_EDGES = 2_500_000


class UnknownProposer(ValueError):
    pass


@dataclass
class StepModels:
    """Everything a localized step needs: the dynamics net, the proposer,
    and the shared graph/crop configuration."""

    dynamics: DynamicsModel
    proposer: RoiProposer | None = None
    roi_cfg: RoiConfig | None = None

    def __post_init__(self) -> None:
        if self.roi_cfg is None:
            self.roi_cfg = self.proposer.cfg if self.proposer else RoiConfig()

    @property
    def graph_cfg(self) -> GraphConfig:
        return self.dynamics.graph_cfg


@dataclass
class StepReport:
    active: int
    total: int
    wall_time: float
    proposer_kind: str

    def to_json(self) -> str:
        import json
        return json.dumps({"active": self.active, "total": self.total,
                           "wall_time": self.wall_time,
                           "proposer": self.proposer_kind})


def parse_proposer(kind: str):
    """'learned' | 'geo-<cm>' | 'full' -> (mode, cylinder diameter in m)."""
    if kind == "learned" or kind == "full":
        return kind, 0.0
    if kind.startswith("geo-"):
        return "geo", float(kind[4:]) / 100.0
    raise UnknownProposer(f"unknown proposer kind {kind!r}")


def _local_sample(scene: SimScene, u: ControlInput) -> LocalSample:
    state = scene.state
    pose = scene.pose
    frame = Frame2D(Vec3(pose.pos[0], pose.pos[1], pose.pos[2]), pose.yaw)
    local_frames = frame.to_local(state.frames())
    imp_world = tool_impulses(scene.tool, pose, u)
    return LocalSample(
        frame=frame,
        local_frames=local_frames,
        local_next=None,  # type: ignore[arg-type]
        tool_impulse_local=frame.rotate_to_local(imp_world),
        u=u,
        ctrl_vec=control_vector(u, frame),
        tip_world_z=frame.origin.z,
        n_tool=state.n_tool,
    )


def _select_indices(mode: str, diameter: float, sample: LocalSample,
                    models: StepModels, surface: np.ndarray | None):
    terrain_local = sample.terrain_now
    if mode == "full":
        return np.arange(terrain_local.shape[0])
    if mode == "geo":
        return geo_propose(terrain_local, np.zeros(2), diameter)
    from .roi import surface_indices
    assert surface is not None
    return surface_indices(terrain_local, surface,
                           np.ones_like(surface, dtype=bool),
                           models.roi_cfg, margin=models.roi_cfg.margin)


def step_batch(scenes: list[SimScene], controls: list[ControlInput],
               models: StepModels, proposer: str = "learned",
               max_fused_edges: int = MAX_FUSED_EDGES):
    """Advance a batch of scenes one step each. Returns (scenes, reports)."""
    mode, diameter = parse_proposer(proposer)
    t0 = time.perf_counter()
    b = len(scenes)
    samples = [_local_sample(sc, u) for sc, u in zip(scenes, controls)]

    surfaces = [None] * b
    if mode == "learned":
        if models.proposer is None:
            raise UnknownProposer("learned proposer requested but none loaded")
        stacks = np.stack([
            models.proposer.input_stack(s.local_frames[:, :s.n_terrain])
            for s in samples])
        ctrls = np.stack([s.ctrl_vec for s in samples])
        pred = models.proposer.forward(stacks, ctrls).astype(np.float64)
        surfaces = [pred[i] for i in range(b)]

    graphs = []
    roi_idx = []
    for s, surf in zip(samples, surfaces):
        idx = _select_indices(mode, diameter, s, models, surf)
        roi_idx.append(idx)
        g, _ = build_model_graph(s, idx, models.dynamics, models.graph_cfg)
        graphs.append(g)

    # Fused forward in memory-bounded groups.
    deltas: list[np.ndarray] = [None] * b  # type: ignore[list-item]
    start = 0
    while start < b:
        end = start
        edges = 0
        while end < b and (end == start or
                           edges + graphs[end].n_edges <= max_fused_edges):
            edges += graphs[end].n_edges
            end += 1
        fused, counts = fuse_graphs(graphs[start:end])
        out = models.dynamics.forward(fused)
        offs = np.cumsum([0] + counts)
        for i in range(start, end):
            deltas[i] = out[offs[i - start]:offs[i - start + 1]]
        start = end

    next_scenes = []
    reports = []
    for scene, s, idx, delta in zip(scenes, samples, roi_idx, deltas):
        state = scene.state
        nt = state.n_terrain
        new_pose = scene.pose.advance(s.u)
        new_positions = state.positions.copy()
        if idx.size:
            world_delta = s.frame.rotate_to_world(delta[:idx.size])
            new_positions[idx] += world_delta
        new_positions[nt:] = new_pose.to_world(scene.tool.local_points)
        new_state = ParticleState(
            positions=new_positions,
            history=np.concatenate([state.history[1:], state.positions[None]]),
            classes=state.classes,
            impulses=np.zeros_like(new_positions),
        )
        next_scenes.append(SimScene(state=new_state, pose=new_pose,
                                    tool=scene.tool))
        reports.append(StepReport(active=int(idx.size), total=nt,
                                  wall_time=0.0, proposer_kind=proposer))
    wall = time.perf_counter() - t0
    for r in reports:
        r.wall_time = wall / b
    return next_scenes, reports


def step(scene: SimScene, u: ControlInput, models: StepModels,
         proposer: str = "learned"):
    """Single-scene localized step; see :func:`step_batch`."""
    scenes, reports = step_batch([scene], [u], models, proposer)
    return scenes[0], reports[0]


def rollout(scene: SimScene, controls: list[ControlInput], models: StepModels,
            proposer: str = "learned", record: bool = False):
    """Autoregressive localized rollout of one control sequence."""
    frames = [scene] if record else None
    reports = []
    for u in controls:
        scene, rep = step(scene, u, models, proposer)
        reports.append(rep)
        if record:
            frames.append(scene)
    return scene, (frames if record else reports)


def rollout_batch(scene: SimScene, control_seqs: list[list[ControlInput]],
                  models: StepModels, proposer: str = "learned",
                  max_fused_edges: int = MAX_FUSED_EDGES) -> list[SimScene]:
    """Roll candidate control sequences from a shared start state.

    Sequences may have different lengths; finished candidates stop stepping
    and keep their final state.
    """
    b = len(control_seqs)
    states = [scene] * b
    horizon = max((len(cs) for cs in control_seqs), default=0)
    for t in range(horizon):
        active = [i for i in range(b) if t < len(control_seqs[i])]
        if not active:
            break
        stepped, _ = step_batch([states[i] for i in active],
                                [control_seqs[i][t] for i in active],
                                models, proposer, max_fused_edges)
        for j, i in enumerate(active):
            states[i] = stepped[j]
    return states
