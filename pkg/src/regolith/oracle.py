"""Ground-truth granular physics: position-based dynamics with Coulomb-style
friction against particles, the ground plane, and a kinematic scoop.

The solver is unconditionally stable at the 0.1 s frame step by substepping:
symplectic Euler prediction, a few Jacobi projection iterations per substep
(particle-particle non-penetration with positional friction, ground contact,
sphere-vs-plate tool contact), then velocity reconstruction with damping.
The tool is infinitely stiff and moves kinematically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .config import Config, OracleConfig, ToolConfig
from .core import ControlInput, Vec3, wrap_angle
from .graph import CLASS_TERRAIN, CLASS_TOOL, ParticleState, static_history
from .terrain import diamond_square, farthest_point_sample, instantiate_particles
from .trajio import Trajectory


class Diverged(RuntimeError):
    """A particle moved implausibly far in one step."""


@dataclass(frozen=True)
class ToolPose:
    """Scoop tip pose: world position plus yaw (about z) and pitch (about the
    tool's lateral axis; positive pitch tips the open front downward)."""

    pos: np.ndarray
    yaw: float
    pitch: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=np.float64))

    def rotation(self) -> np.ndarray:
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
        return rz @ ry

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return np.asarray(local, dtype=np.float64) @ self.rotation().T + self.pos

    def to_local(self, world: np.ndarray) -> np.ndarray:
        return (np.asarray(world, dtype=np.float64) - self.pos) @ self.rotation()

    def advance(self, u: ControlInput) -> "ToolPose":
        return ToolPose(
            pos=self.pos + u.delta_pos.as_array(),
            yaw=wrap_angle(self.yaw + u.delta_yaw),
            pitch=self.pitch + u.delta_pitch,
        )

    def lerp(self, other: "ToolPose", t: float) -> "ToolPose":
        return ToolPose(
            pos=self.pos + (other.pos - self.pos) * t,
            yaw=self.yaw + wrap_angle(other.yaw - self.yaw) * t,
            pitch=self.pitch + (other.pitch - self.pitch) * t,
        )


@dataclass
class ToolModel:
    """An open-front, open-top scoop built from five plates.

    The local frame has its origin at the scoop tip (front edge of the
    bottom plate); the bottom plate extends toward -x, walls rise toward +z.
    ``local_points`` are surface samples used as tool particles.
    """

    cfg: ToolConfig
    plates: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    local_points: np.ndarray = None  # type: ignore[assignment]
    bound_radius: float = 0.0

    def __post_init__(self) -> None:
        c = self.cfg
        t, w, ln, hw = c.thickness, c.width, c.length, c.wall_height
        self.plates = [
            # (center, half extents) in local coordinates
            (np.array([-ln / 2, 0.0, -t / 2]), np.array([ln / 2, w / 2 + t, t / 2])),       # bottom
            (np.array([-ln - t / 2, 0.0, hw / 2]), np.array([t / 2, w / 2 + t, hw / 2])),   # back
            (np.array([-ln / 2, w / 2 + t / 2, hw / 2]), np.array([ln / 2, t / 2, hw / 2])),
            (np.array([-ln / 2, -w / 2 - t / 2, hw / 2]), np.array([ln / 2, t / 2, hw / 2])),
        ]
        if self.local_points is None:
            self.local_points = self._sample_surface(c)
        self.bound_radius = float(math.sqrt((ln + t) ** 2 + (w / 2 + t) ** 2 + hw ** 2))

    def _sample_surface(self, c: ToolConfig) -> np.ndarray:
        s = c.sample_spacing
        pts = []
        nx = max(2, int(round(c.length / s)) + 1)
        ny = max(2, int(round(c.width / s)) + 1)
        nz = max(2, int(round(c.wall_height / s)) + 1)
        xs = np.linspace(-c.length, 0.0, nx)
        ys = np.linspace(-c.width / 2, c.width / 2, ny)
        zs = np.linspace(0.0, c.wall_height, nz)
        for x in xs:                      # bottom plate, inner face
            for y in ys:
                pts.append((x, y, 0.0))
        for y in ys:                      # back wall
            for z in zs[1:]:
                pts.append((-c.length, y, z))
        for x in xs:                      # side walls
            for z in zs[1:]:
                pts.append((x, -c.width / 2, z))
                pts.append((x, c.width / 2, z))
        return np.array(pts, dtype=np.float64)

    @property
    def n_points(self) -> int:
        return self.local_points.shape[0]

    def interior_mask(self, pose: ToolPose, positions: np.ndarray) -> np.ndarray:
        """Particles inside the scoop bowl (used as the carried-material set)."""
        local = pose.to_local(positions)
        c = self.cfg
        return (
            (local[:, 0] >= -c.length) & (local[:, 0] <= 0.0)
            & (np.abs(local[:, 1]) <= c.width / 2)
            & (local[:, 2] >= 0.0) & (local[:, 2] <= c.wall_height)
        )


def tool_impulses(tool: ToolModel, pose: ToolPose, u: ControlInput) -> np.ndarray:
    """World-frame displacement of each tool particle under control ``u``."""
    return pose.advance(u).to_world(tool.local_points) - pose.to_world(tool.local_points)


@dataclass
class SimScene:
    """A particle state bound to the tool that produced its tool particles."""

    state: ParticleState
    pose: ToolPose
    tool: ToolModel

    @property
    def terrain_positions(self) -> np.ndarray:
        return self.state.positions[:self.state.n_terrain]

    def carried_indices(self) -> np.ndarray:
        mask = self.tool.interior_mask(self.pose, self.terrain_positions)
        return np.nonzero(mask)[0]

    def shifted(self, delta) -> "SimScene":
        d = np.asarray(delta, dtype=np.float64)
        return SimScene(
            state=self.state.shifted(d),
            pose=ToolPose(self.pose.pos + d, self.pose.yaw, self.pose.pitch),
            tool=self.tool,
        )


def _friction_scale(tlen: np.ndarray, pen: np.ndarray, friction: float,
                    static_scale: float) -> np.ndarray:
    """Positional Coulomb friction factor in [0, 1].

    Tangential slip below static_scale * friction * penetration is cancelled
    entirely (static regime); larger slip is reduced proportionally to the
    penetration (kinetic regime).
    """
    budget = friction * pen
    scale = np.minimum(1.0, budget / np.maximum(tlen, 1e-12))
    static = tlen < static_scale * budget
    return np.where(static, 1.0, scale)


def _pair_solve(x: np.ndarray, x_prev: np.ndarray, pairs: np.ndarray,
                pen0: np.ndarray, radius: float, friction: float, relax: float,
                static_scale: float, touched: np.ndarray) -> None:
    if pairs.shape[0] == 0:
        return
    i, j = pairs[:, 0], pairs[:, 1]
    d = x[i] - x[j]
    dist = np.linalg.norm(d, axis=1)
    pen = 2.0 * radius - dist
    hit = (pen > 0.0) | (pen0 > 0.0)
    if not hit.any():
        return
    i, j, d, dist = i[hit], j[hit], d[hit], dist[hit]
    pen, load = np.maximum(pen[hit], 0.0), np.maximum(pen0[hit], 0.0)
    touched[i] = True
    touched[j] = True
    safe = np.maximum(dist, 1e-9)
    n = d / safe[:, None]
    n[dist < 1e-9] = (0.0, 0.0, 1.0)
    # Cap depenetration per iteration: deep spawn overlaps resolve over a few
    # substeps instead of ejecting particles at reconstruction-velocity scale.
    push = (0.5 * relax * np.minimum(pen, 0.4 * radius))[:, None] * n

    # The friction budget uses the pre-projection penetration (a proxy for
    # the normal impulse carried by the contact this substep), so loaded
    # contacts keep their static hold across solver iterations.
    rel = (x[i] - x_prev[i]) - (x[j] - x_prev[j])
    reln = np.sum(rel * n, axis=1)
    tang = rel - reln[:, None] * n
    tlen = np.linalg.norm(tang, axis=1)
    scale = _friction_scale(tlen, load, friction, static_scale)
    fcorr = (-0.5 * relax * scale)[:, None] * tang

    total = push + fcorr
    nobj = x.shape[0]
    for c in range(3):
        x[:, c] += np.bincount(i, weights=total[:, c], minlength=nobj)
        x[:, c] -= np.bincount(j, weights=total[:, c], minlength=nobj)


def _ground_solve(x: np.ndarray, x_prev: np.ndarray, pen0: np.ndarray,
                  radius: float, friction: float, static_scale: float,
                  touched: np.ndarray) -> None:
    pen = radius - x[:, 2]
    hit = (pen > 0.0) | (pen0 > 0.0)
    if not hit.any():
        return
    touched[hit] = True
    x[hit, 2] = np.maximum(x[hit, 2], radius)
    tang = x[hit, :2] - x_prev[hit, :2]
    tlen = np.linalg.norm(tang, axis=1)
    scale = _friction_scale(tlen, np.maximum(pen0[hit], 0.0), friction, static_scale)
    x[hit, :2] -= scale[:, None] * tang


def _tool_solve(x: np.ndarray, x_prev: np.ndarray, tool: ToolModel,
                pose0: ToolPose, pose1: ToolPose, radius: float,
                friction: float, static_scale: float,
                touched: np.ndarray, tool_touched: np.ndarray) -> None:
    near = np.linalg.norm(x - pose1.pos, axis=1) < tool.bound_radius + 4.0 * radius
    idx = np.nonzero(near)[0]
    if idx.size == 0:
        return
    rot = pose1.rotation()
    local = (x[idx] - pose1.pos) @ rot
    for center, half in tool.plates:
        lo, hi = center - half, center + half
        q = np.clip(local, lo, hi)
        d = local - q
        dist = np.linalg.norm(d, axis=1)
        outside = dist > 1e-12
        pen = radius - dist
        hit_out = outside & (pen > 0.0)
        # Deep (center-inside-plate) contacts: push out along the thinnest axis.
        inside = ~outside & np.all((local > lo) & (local < hi), axis=1)
        if not (hit_out.any() or inside.any()):
            continue
        n_local = np.zeros_like(local)
        depth = np.zeros(local.shape[0])
        if hit_out.any():
            n_local[hit_out] = d[hit_out] / dist[hit_out, None]
            depth[hit_out] = pen[hit_out]
        if inside.any():
            gaps = half - np.abs(local[inside] - center)   # (K, 3), all >= 0
            axis = np.argmin(gaps, axis=1)
            rows = np.arange(gaps.shape[0])
            sign = np.sign(local[inside] - center)[rows, axis]
            k = np.nonzero(inside)[0]
            n_local[k] = 0.0
            n_local[k, axis] = np.where(sign == 0.0, 1.0, sign)
            depth[inside] = gaps[rows, axis] + radius
        hit = hit_out | inside
        n_world = n_local[hit] @ rot.T
        gi = idx[hit]
        touched[gi] = True
        tool_touched[gi] = True
        # Cap per-iteration depenetration so a deep squeeze (tool vs ground)
        # resolves over several substeps instead of flinging the particle.
        x[gi] += np.minimum(depth[hit], 0.6 * radius)[:, None] * n_world
        # Friction against the moving tool surface.
        contact_local = q[hit]
        tool_delta = pose1.to_world(contact_local) - pose0.to_world(contact_local)
        rel = (x[gi] - x_prev[gi]) - tool_delta
        reln = np.sum(rel * n_world, axis=1)
        tang = rel - reln[:, None] * n_world
        tlen = np.linalg.norm(tang, axis=1)
        scale = _friction_scale(tlen, depth[hit], friction, static_scale)
        x[gi] -= scale[:, None] * tang
        local = (x[idx] - pose1.pos) @ rot


def oracle_step(scene: SimScene, u: ControlInput, params: OracleConfig) -> SimScene:
    """Advance the scene one frame (params.dt) under end-effector control u.

    Terrain particles follow the projected dynamics; tool particles move
    rigidly with the commanded pose. Raises Diverged when any terrain
    particle travels further than the control plus free-fall bound allows.
    """
    state = scene.state
    nt = state.n_terrain
    x = state.positions[:nt].copy()
    x_old = state.positions[:nt].copy()
    v = (state.positions[:nt] - state.history[-1, :nt]) / params.dt
    vmax_in = float(np.max(np.linalg.norm(v, axis=1))) if nt else 0.0

    pose0 = scene.pose
    pose1 = pose0.advance(u)
    h = params.dt / params.substeps
    gdt = params.gravity * h
    r = params.particle_radius

    # Kick-drift-kick integration keeps free fall on the closed-form parabola;
    # dissipation (damping) only applies to particles that were in contact.
    for s in range(params.substeps):
        sub0 = pose0.lerp(pose1, s / params.substeps)
        sub1 = pose0.lerp(pose1, (s + 1) / params.substeps)
        v[:, 2] -= 0.5 * gdt
        speed = np.linalg.norm(v, axis=1)
        fast = speed > params.max_speed
        if fast.any():
            v[fast] *= (params.max_speed / speed[fast])[:, None]
        x_prev = x.copy()
        x += v * h
        touched = np.zeros(nt, dtype=bool)
        tool_touched = np.zeros(nt, dtype=bool)
        pairs = cKDTree(x).query_pairs(2.0 * r, output_type="ndarray")
        if pairs.shape[0]:
            gap = np.linalg.norm(x[pairs[:, 0]] - x[pairs[:, 1]], axis=1)
            pen0 = 2.0 * r - gap
        else:
            pen0 = np.zeros(0)
        pen0_ground = r - x[:, 2]
        for _ in range(params.solver_iters):
            _pair_solve(x, x_prev, pairs, pen0, r, params.friction,
                        params.relaxation, params.static_friction_scale, touched)
            _ground_solve(x, x_prev, pen0_ground, r, params.ground_friction,
                          params.static_friction_scale, touched)
            _tool_solve(x, x_prev, scene.tool, sub0, sub1, r, params.friction,
                        params.static_friction_scale, touched, tool_touched)
        # Supported particles that barely moved are frozen in place: this is
        # what lets piles hold a slope instead of creeping flat. Particles in
        # tool contact stay live so a tilting scoop sheds its load.
        asleep = touched & ~tool_touched & (
            np.linalg.norm(x - x_prev, axis=1) < params.sleep_displacement)
        x[asleep] = x_prev[asleep]
        v = (x - x_prev) / h
        v[touched] *= params.damping
        v[:, 2] -= 0.5 * gdt

    disp = np.linalg.norm(x - x_old, axis=1)
    bound = (10.0 * u.delta_pos.norm()
             + vmax_in * params.dt
             + 0.5 * params.gravity * params.dt ** 2
             + 10.0 * r)
    if nt and float(disp.max()) > bound:
        raise Diverged(f"max displacement {disp.max():.3f} m exceeds bound {bound:.3f} m")

    new_tool = pose1.to_world(scene.tool.local_points)
    new_positions = np.concatenate([x, new_tool], axis=0)
    new_history = np.concatenate([state.history[1:], state.positions[None]], axis=0)
    new_state = ParticleState(
        positions=new_positions,
        history=new_history,
        classes=state.classes,
        impulses=np.zeros_like(new_positions),
    )
    return SimScene(state=new_state, pose=pose1, tool=scene.tool)


def kinetic_proxy(before: ParticleState, after: ParticleState) -> float:
    """Sum of squared per-step terrain displacements (m^2)."""
    nt = before.n_terrain
    d = after.positions[:nt] - before.positions[:nt]
    return float(np.sum(d * d))


def settle(scene: SimScene, params: OracleConfig, max_steps: int = 60,
           tol: float = 1e-8) -> SimScene:
    """Run zero-control steps until the kinetic proxy drops below tol."""
    from .core import ZERO_CONTROL
    for _ in range(max_steps):
        nxt = oracle_step(scene, ZERO_CONTROL, params)
        if kinetic_proxy(scene.state, nxt.state) < tol:
            return nxt
        scene = nxt
    return scene


def park_pose(terrain_positions: np.ndarray) -> ToolPose:
    top = float(terrain_positions[:, 2].max()) if terrain_positions.size else 0.0
    return ToolPose(pos=np.array([0.0, 0.0, top + 0.3]), yaw=0.0, pitch=0.0)


def build_scene(cfg: Config, seed: int | None = None, history: int | None = None,
                settle_steps: int = 50) -> SimScene:
    """Generate, fill, thin, and settle a terrain, then park the tool."""
    tspec = replace(cfg.terrain, seed=cfg.terrain.seed if seed is None else seed)
    hmap = diamond_square(tspec)
    rng = np.random.default_rng(tspec.seed + 1)
    pts = instantiate_particles(hmap, tspec, rng)
    if tspec.target_particles and tspec.target_particles < pts.shape[0]:
        pts = pts[farthest_point_sample(pts, tspec.target_particles)]
    tool = ToolModel(cfg.tool)
    pose = park_pose(pts)
    h = history if history is not None else cfg.graph.history
    positions = np.concatenate([pts, pose.to_world(tool.local_points)], axis=0)
    classes = np.concatenate([
        np.full(pts.shape[0], CLASS_TERRAIN, dtype=np.uint8),
        np.full(tool.n_points, CLASS_TOOL, dtype=np.uint8),
    ])
    scene = SimScene(
        state=ParticleState.at_rest(positions, classes, h),
        pose=pose, tool=tool,
    )
    return settle(scene, cfg.oracle, max_steps=settle_steps)


def teleport_tool(scene: SimScene, pose: ToolPose) -> SimScene:
    """Place the tool at a new pose and reset histories to rest."""
    nt = scene.state.n_terrain
    positions = np.concatenate([
        scene.state.positions[:nt], pose.to_world(scene.tool.local_points)], axis=0)
    return SimScene(
        state=ParticleState.at_rest(positions, scene.state.classes, scene.state.h),
        pose=pose, tool=scene.tool,
    )


def surface_height(scene: SimScene, xy: np.ndarray, radius: float = 0.03) -> float:
    """Max terrain height within ``radius`` of a query point (floor if empty)."""
    pts = scene.terrain_positions
    d = np.linalg.norm(pts[:, :2] - np.asarray(xy, dtype=np.float64)[None], axis=1)
    near = d < radius
    if not near.any():
        return 0.0
    return float(pts[near, 2].max())


def run_controls(scene: SimScene, controls: list[ControlInput],
                 params: OracleConfig, record: bool = False):
    """Apply a control sequence; optionally record every frame."""
    frames = [scene] if record else None
    for u in controls:
        scene = oracle_step(scene, u, params)
        if record:
            frames.append(scene)
    return (scene, frames) if record else (scene, None)


def generate_trajectories(count: int, cfg: Config, action_sampler,
                          base_seed: int = 0, log=None) -> list[Trajectory]:
    """Simulate ``count`` interaction trajectories with recorded correspondence.

    ``action_sampler(rng, scene) -> (meta, start_pose, controls)`` supplies the
    parameterized action; diverged runs are dropped and logged.
    """
    out: list[Trajectory] = []
    for i in range(count):
        seed = base_seed + i
        scene = build_scene(cfg, seed=seed)
        rng = np.random.default_rng(seed ^ 0x5EED)
        meta, start_pose, controls = action_sampler(rng, scene)
        scene = teleport_tool(scene, start_pose)
        try:
            _, frames = run_controls(scene, controls, cfg.oracle, record=True)
        except Diverged as exc:
            if log:
                log(f"trajectory {i} dropped: {exc}")
            continue
        positions = np.stack([f.state.positions for f in frames]).astype(np.float32)
        poses = np.array(
            [[*f.pose.pos, f.pose.yaw, f.pose.pitch] for f in frames],
            dtype=np.float32)
        ctrl = np.array(
            [[*u.delta_pos.as_array(), u.delta_yaw, u.delta_pitch, u.phase]
             for u in controls], dtype=np.float32)
        out.append(Trajectory(
            positions=positions, n_tool=scene.tool.n_points, poses=poses,
            controls=ctrl, dt=cfg.oracle.dt, seed=seed,
            meta={"action": meta,
                  "material": {"friction": cfg.oracle.friction,
                               "radius": cfg.oracle.particle_radius}},
        ))
    return out
