"""Sample extraction from recorded trajectories.

A SampleSet wraps trajectories and serves localized training/evaluation
samples: tool-frame particle windows, oracle motion labels, proposed-region
targets, and the graph snippets the dynamics model trains on. Per-step
labels are cached on first use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import GraphConfig, RoiConfig
from .core import ControlInput, Frame2D, Vec3
from .graph import (
    CLASS_TOOL, ParticleState, build_knn_graph, edge_features,
    estimate_normals, make_scene_graph, node_features,
)
from .roi import (
    control_vector, make_roi_target, moving_mask, proposer_input_stack,
    surface_indices,
)
from .trajio import Trajectory


@dataclass
class LocalSample:
    """One localized time step of a trajectory."""

    frame: Frame2D
    local_frames: np.ndarray        # (H+1, N, 3) tool-frame positions
    local_next: np.ndarray          # (Nt, 3) next-step terrain positions
    tool_impulse_local: np.ndarray  # (n_tool, 3)
    u: ControlInput
    ctrl_vec: np.ndarray            # (CTRL_DIM,)
    tip_world_z: float
    n_tool: int

    @property
    def n_terrain(self) -> int:
        return self.local_frames.shape[1] - self.n_tool

    @property
    def terrain_now(self) -> np.ndarray:
        return self.local_frames[-1, :self.n_terrain]


@dataclass
class SampleSet:
    trajs: list[Trajectory]
    graph_cfg: GraphConfig
    roi_cfg: RoiConfig
    _labels: dict = field(default_factory=dict)

    def pairs(self, min_active: int = 3) -> list[tuple[int, int]]:
        """All usable (trajectory, step) pairs with a non-trivial moving set."""
        out = []
        for ti in range(len(self.trajs)):
            for t in range(self.trajs[ti].n_frames - 1):
                movers, _, _ = self.labels(ti, t)
                if movers.sum() >= min_active:
                    out.append((ti, t))
        return out

    def all_pairs(self) -> list[tuple[int, int]]:
        return [(ti, t) for ti in range(len(self.trajs))
                for t in range(self.trajs[ti].n_frames - 1)]

    def control(self, ti: int, t: int) -> ControlInput:
        row = self.trajs[ti].controls[t]
        return ControlInput(Vec3(float(row[0]), float(row[1]), float(row[2])),
                            float(row[3]), float(row[4]), int(round(float(row[5]))))

    def frame(self, ti: int, t: int, world_shift=None) -> Frame2D:
        pose = self.trajs[ti].poses[t].astype(np.float64)
        if world_shift is not None:
            pose = pose.copy()
            pose[:3] += np.asarray(world_shift, dtype=np.float64)
        return Frame2D(Vec3(pose[0], pose[1], pose[2]), float(pose[3]))

    def local(self, ti: int, t: int, world_shift=None) -> LocalSample:
        traj = self.trajs[ti]
        h = self.graph_cfg.history
        pos = traj.positions.astype(np.float64)
        if world_shift is not None:
            pos = pos + np.asarray(world_shift, dtype=np.float64)[None, None, :]
        idx = [max(t - h + k, 0) for k in range(h)] + [t]
        frame = self.frame(ti, t, world_shift)
        local_frames = frame.to_local(pos[idx])
        local_next = frame.to_local(pos[t + 1, :traj.n_terrain])
        tool_delta = pos[t + 1, traj.n_terrain:] - pos[t, traj.n_terrain:]
        u = self.control(ti, t)
        return LocalSample(
            frame=frame,
            local_frames=local_frames,
            local_next=local_next,
            tool_impulse_local=frame.rotate_to_local(tool_delta),
            u=u,
            ctrl_vec=control_vector(u, frame),
            tip_world_z=frame.origin.z,
            n_tool=traj.n_tool,
        )

    def labels(self, ti: int, t: int):
        """(movers, target surface, valid) for step t, cached.

        Labels are built in the tool frame of step t from the oracle's
        before/after positions.
        """
        key = (ti, t)
        if key not in self._labels:
            s = self.local(ti, t)
            movers = moving_mask(s.terrain_now, s.local_next,
                                 self.roi_cfg.v_thresh,
                                 self.roi_cfg.min_component,
                                 self.graph_cfg.knn_radius)
            target, valid = make_roi_target(s.terrain_now, s.local_next,
                                            self.roi_cfg,
                                            self.graph_cfg.knn_radius,
                                            movers=movers)
            self._labels[key] = (movers, target, valid)
        return self._labels[key]

    def roi_indices(self, ti: int, t: int) -> np.ndarray:
        s = self.local(ti, t)
        _, target, valid = self.labels(ti, t)
        return surface_indices(s.terrain_now, target, valid, self.roi_cfg)

    # -- ready-to-train samples ---------------------------------------------

    def proposer_sample(self, ti: int, t: int):
        s = self.local(ti, t)
        _, target, valid = self.labels(ti, t)
        stack = proposer_input_stack(s.local_frames[:, :s.n_terrain], self.roi_cfg)
        return stack, s.ctrl_vec, target, valid

    def dynamics_sample(self, ti: int, t: int, model, rng=None,
                        noise_std: float = 0.0, world_shift=None):
        """Tool-frame RoI subgraph plus normalized displacement targets.

        Returns (graph, target_n (K, 3), terrain_rows) where terrain_rows
        indexes the graph rows carrying a loss.
        """
        s = self.local(ti, t, world_shift)
        _, target, valid = self.labels(ti, t)
        sub_t = surface_indices(s.terrain_now, target, valid, self.roi_cfg)
        return build_model_graph(s, sub_t, model, self.graph_cfg,
                                 rng=rng, noise_std=noise_std,
                                 target_next=s.local_next)


def scene_at(traj: Trajectory, t: int, tool, history: int):
    """Reconstruct a SimScene at frame t of a recorded trajectory."""
    from .oracle import SimScene, ToolPose

    pos = traj.positions.astype(np.float64)
    idx = [max(t - history + k, 0) for k in range(history)]
    classes = np.concatenate([
        np.zeros(traj.n_terrain, np.uint8),
        np.ones(traj.n_tool, np.uint8)])
    state = ParticleState(
        positions=pos[t],
        history=pos[idx],
        classes=classes,
        impulses=np.zeros_like(pos[t]),
    )
    p = traj.poses[t].astype(np.float64)
    return SimScene(state=state,
                    pose=ToolPose(p[:3], float(p[3]), float(p[4])),
                    tool=tool)


def build_model_graph(s: LocalSample, roi_terrain: np.ndarray, model,
                      graph_cfg: GraphConfig, rng=None,
                      noise_std: float = 0.0, target_next=None):
    """Assemble the induced subgraph over RoI terrain + tool particles.

    Features are built in the tool frame (float64 assembly, cast by the
    model). With ``target_next`` the normalized displacement targets and
    the terrain row indices are returned alongside.
    """
    nt = s.n_terrain
    n_sub_t = roi_terrain.shape[0]
    sub = np.concatenate([roi_terrain, nt + np.arange(s.n_tool)])
    frames = s.local_frames[:, sub].copy()

    if noise_std > 0.0 and rng is not None and n_sub_t:
        h = frames.shape[0] - 1
        inc = rng.normal(0.0, noise_std / np.sqrt(max(h, 1)),
                         size=(h, n_sub_t, 3))
        walk = np.cumsum(inc, axis=0)
        frames[1:, :n_sub_t] += walk

    positions = frames[-1]
    classes = np.zeros(sub.shape[0], dtype=np.uint8)
    classes[n_sub_t:] = CLASS_TOOL
    impulses = np.zeros_like(positions)
    impulses[n_sub_t:] = s.tool_impulse_local

    state = ParticleState(positions=positions, history=frames[:-1],
                          classes=classes, impulses=impulses)
    src, dst = build_knn_graph(positions, graph_cfg.knn_k, graph_cfg.knn_radius)

    normals = np.zeros((sub.shape[0], 3))
    if model.model_cfg.include_normals and n_sub_t:
        normals[:n_sub_t] = estimate_normals(
            positions[:n_sub_t], s.terrain_now, graph_cfg.normal_radius,
            tip_xy=np.zeros(2))

    abs_z = None
    if model.model_cfg.include_z:
        abs_z = positions[:, 2] + s.tip_world_z

    vel_scale = model.model_cfg.displacement_scale
    nf = node_features(state, normals, model.embed.astype(np.float64),
                       vel_scale=vel_scale)
    if abs_z is not None:
        nf = np.concatenate(
            [nf, abs_z[:, None] / model.model_cfg.abs_z_scale], axis=1)
    ef = edge_features(state, src, dst, model.embed.astype(np.float64),
                       rel_scale=graph_cfg.knn_radius)
    graph = make_scene_graph(sub.shape[0], nf, src, dst, ef, classes)

    if target_next is None:
        return graph, sub
    delta = target_next[roi_terrain] - positions[:n_sub_t]
    target_n = delta / model.model_cfg.displacement_scale
    return graph, target_n, np.arange(n_sub_t)
