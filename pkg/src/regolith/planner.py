"""Sampling-based terrain manipulation planning.

Actions are parameterized trajectories: a 9D penetrate-drag-scoop (or push)
template and a 6D dump template, expanded into per-step end-effector
controls at the simulation step. Planning rolls batches of candidates
through the localized dynamics model, scores final states by heightmap
distance to the goal, and refines by exponential-weighted resampling around
the elite, keeping the best-so-far candidate. A dynamic-programming
volume-maximization baseline provides a classical comparison point.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import Config, PlannerConfig
from .core import (
    ControlInput, Heightmap, PHASE_DRAG, PHASE_DUMP, PHASE_MOVE,
    PHASE_PENETRATE, PHASE_SCOOP, Vec3, heightmap_l1, wrap_angle,
)
from .localized import StepModels, rollout_batch
from .oracle import SimScene, ToolPose, run_controls, settle, surface_height, teleport_tool
from .terrain import surface_heightmap


class OutOfBounds(ValueError):
    pass


class NoFeasibleCandidate(RuntimeError):
    pass


class NoExcess(ValueError):
    pass


PEN_PITCH = 0.55
DRAG_PITCH = 0.25
EXIT_PITCH = -0.3
SCOOP_ARC = 1.25          # radians of exit curl
APPROACH_HEIGHT = 0.05
SCOOP_DIM = 9
DUMP_DIM = 6


@dataclass(frozen=True)
class TrajectoryParams:
    """A parameterized action.

    scoop/push: [entry_x, entry_y, entry_yaw, depth, drag_len, depth_slope,
    scoop_radius, v_pen, v_drag]. dump: [x, y, yaw, pre_pitch, post_pitch,
    release_height]. Roll is fixed at zero throughout.
    """

    kind: str
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values",
                           np.asarray(self.values, dtype=np.float64))
        want = DUMP_DIM if self.kind == "dump" else SCOOP_DIM
        if self.kind not in ("scoop", "push", "dump"):
            raise OutOfBounds(f"unknown action kind {self.kind!r}")
        if self.values.shape != (want,):
            raise OutOfBounds(
                f"{self.kind} expects {want} parameters, got {self.values.shape}")


@dataclass
class PlanResult:
    params: TrajectoryParams
    start_pose: ToolPose
    controls: list[ControlInput]
    score: float
    rollouts: int
    wall_time: float


def _clamped_steps(delta: np.ndarray, speed: float, dt: float, max_step: float,
                   dyaw_total: float = 0.0, dpitch_total: float = 0.0,
                   phase: int = PHASE_MOVE) -> list[ControlInput]:
    """Straight segment sampled at dt with per-step displacement clamping."""
    dist = float(np.linalg.norm(delta))
    step_len = min(speed * dt, max_step)
    n = max(1, int(math.ceil(dist / step_len))) if dist > 1e-9 else 1
    out = []
    for i in range(n):
        frac = 1.0 / n
        d = delta * frac
        out.append(ControlInput(Vec3(d[0], d[1], d[2]),
                                dyaw_total * frac, dpitch_total * frac, phase))
    return out


def expand(params: TrajectoryParams, scene: SimScene, cfg: PlannerConfig,
           dt: float = 0.1):
    """Expand action parameters into (start_pose, control sequence).

    Scoop/push sequences begin from a hover pose above the entry point
    (reaching it is free-space motion); dumps continue from the scene's
    current pose since the scoop is loaded.
    """
    if params.kind == "dump":
        return _expand_dump(params, scene, cfg, dt)
    return _expand_pds(params, scene, cfg, dt)


def _expand_pds(params: TrajectoryParams, scene: SimScene, cfg: PlannerConfig,
                dt: float):
    ex, ey, yaw, depth, drag, slope, radius, v_pen, v_drag = params.values
    surf = surface_height(scene, np.array([ex, ey]))
    if abs(depth) <= 1e-9 and abs(drag) <= 1e-9:
        # Degenerate no-op motion: a minimum-length all-zero sequence.
        start = ToolPose(np.array([ex, ey, surf + APPROACH_HEIGHT]),
                         wrap_angle(yaw), PEN_PITCH)
        return start, [ControlInput(Vec3(0.0, 0.0, 0.0), 0.0, 0.0, PHASE_MOVE)]
    _check_bounds(params, cfg)
    start = ToolPose(np.array([ex, ey, surf + APPROACH_HEIGHT]),
                     wrap_angle(yaw), PEN_PITCH)
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    controls: list[ControlInput] = []

    # Penetrate: slant the tip down-forward to the target depth.
    pen_target = np.array([ex, ey, surf - depth]) + 0.3 * APPROACH_HEIGHT * fwd
    controls += _clamped_steps(pen_target - start.pos, v_pen, dt, cfg.max_step,
                               phase=PHASE_PENETRATE)
    # Drag: level out while moving along the entry yaw; depth follows the
    # linear profile.
    drag_delta = fwd * drag + np.array([0.0, 0.0, -slope * drag])
    controls += _clamped_steps(drag_delta, v_drag, dt, cfg.max_step,
                               dpitch_total=DRAG_PITCH - PEN_PITCH,
                               phase=PHASE_DRAG)
    if params.kind == "scoop":
        # Exit curl: tip follows a circular arc in the vertical plane of the
        # drag while the bowl rotates up to hold material.
        n_arc = max(2, int(math.ceil(radius * SCOOP_ARC / (v_drag * dt))))
        prev = np.zeros(3)
        for i in range(1, n_arc + 1):
            phi = SCOOP_ARC * i / n_arc
            offset = radius * (math.sin(phi) * fwd
                               + (1.0 - math.cos(phi)) * np.array([0, 0, 1.0]))
            d = offset - prev
            prev = offset
            controls.append(ControlInput(
                Vec3(d[0], d[1], d[2]), 0.0,
                (EXIT_PITCH - DRAG_PITCH) / n_arc, PHASE_SCOOP))
    else:
        # Push: ramp straight out, keeping the blade angle.
        ramp = fwd * 0.05 + np.array([0.0, 0.0, 0.05])
        controls += _clamped_steps(ramp, v_drag, dt, cfg.max_step,
                                   phase=PHASE_DRAG)
    controls += _clamped_steps(np.array([0.0, 0.0, 0.04]), 0.10, dt,
                               cfg.max_step, phase=PHASE_MOVE)
    for u in controls:
        u.validate(cfg.max_step)
    return start, controls


def _expand_dump(params: TrajectoryParams, scene: SimScene, cfg: PlannerConfig,
                 dt: float):
    x, y, yaw, pre_pitch, post_pitch, release = params.values
    if not (cfg.dump_pre_lo - 1e-9 <= pre_pitch <= cfg.dump_pre_hi + 1e-9
            and cfg.dump_post_lo - 1e-9 <= post_pitch <= cfg.dump_post_hi + 1e-9
            and cfg.release_lo - 1e-9 <= release <= cfg.release_hi + 1e-9):
        raise OutOfBounds("dump parameters outside configured bounds")
    pose = scene.pose
    start = ToolPose(pose.pos.copy(), pose.yaw, pose.pitch)
    controls: list[ControlInput] = []
    surf = surface_height(scene, np.array([x, y]))
    carry_z = max(pose.pos[2], surf + release) + 0.02
    controls += _clamped_steps(np.array([0, 0, carry_z - pose.pos[2]]), 0.10,
                               dt, cfg.max_step, phase=PHASE_MOVE)
    goal_pos = np.array([x, y, surf + release])
    move = goal_pos - np.array([pose.pos[0], pose.pos[1], carry_z])
    move[2] = 0.0
    controls += _clamped_steps(move, 0.10, dt, cfg.max_step,
                               dyaw_total=wrap_angle(yaw - pose.yaw),
                               dpitch_total=pre_pitch - pose.pitch,
                               phase=PHASE_MOVE)
    controls += _clamped_steps(np.array([0, 0, goal_pos[2] - carry_z]), 0.10,
                               dt, cfg.max_step, phase=PHASE_MOVE)
    n_rot = max(6, int(math.ceil(abs(post_pitch - pre_pitch) / 0.12)))
    for _ in range(n_rot):
        controls.append(ControlInput(Vec3(0, 0, 0), 0.0,
                                     (post_pitch - pre_pitch) / n_rot,
                                     PHASE_DUMP))
    controls += [ControlInput(Vec3(0, 0, 0), 0.0, 0.0, PHASE_DUMP)] * 4
    for u in controls:
        u.validate(cfg.max_step)
    return start, controls


def _check_bounds(params: TrajectoryParams, cfg: PlannerConfig) -> None:
    _, _, _, depth, drag, slope, radius, v_pen, v_drag = params.values
    eps = 1e-9

    def inside(v, lo, hi, zero_ok=False):
        return (zero_ok and abs(v) <= eps) or (lo - eps <= v <= hi + eps)

    ok = (inside(depth, cfg.depth_lo, cfg.depth_hi, zero_ok=True)
          and inside(drag, cfg.drag_lo, cfg.drag_hi, zero_ok=True)
          and inside(slope, cfg.slope_lo, cfg.slope_hi)
          and inside(radius, cfg.radius_lo, cfg.radius_hi)
          and inside(v_pen, cfg.speed_lo, cfg.speed_hi)
          and inside(v_drag, cfg.speed_lo, cfg.speed_hi))
    if not ok:
        raise OutOfBounds("scoop/push parameters outside configured bounds")


# ---------------------------------------------------------------------------
# Candidate sampling
# ---------------------------------------------------------------------------

def sample_params(rng: np.random.Generator, kind: str, cfg: PlannerConfig,
                  entry_box: tuple[float, float, float, float]) -> TrajectoryParams:
    x0, y0, x1, y1 = entry_box
    if kind == "dump":
        vals = [rng.uniform(x0, x1), rng.uniform(y0, y1),
                rng.uniform(-math.pi, math.pi),
                rng.uniform(cfg.dump_pre_lo, cfg.dump_pre_hi),
                rng.uniform(cfg.dump_post_lo, cfg.dump_post_hi),
                rng.uniform(cfg.release_lo, cfg.release_hi)]
    else:
        vals = [rng.uniform(x0, x1), rng.uniform(y0, y1),
                rng.uniform(-math.pi, math.pi),
                rng.uniform(cfg.depth_lo, cfg.depth_hi),
                rng.uniform(cfg.drag_lo, cfg.drag_hi),
                rng.uniform(cfg.slope_lo, cfg.slope_hi),
                rng.uniform(cfg.radius_lo, cfg.radius_hi),
                rng.uniform(cfg.speed_lo, cfg.speed_hi),
                rng.uniform(cfg.speed_lo, cfg.speed_hi)]
    return TrajectoryParams(kind, np.array(vals))


def _perturb(rng, base: TrajectoryParams, sigma: np.ndarray,
             cfg: PlannerConfig, entry_box) -> TrajectoryParams:
    vals = base.values + rng.normal(0.0, 1.0, base.values.shape) * sigma
    x0, y0, x1, y1 = entry_box
    vals[0] = np.clip(vals[0], x0, x1)
    vals[1] = np.clip(vals[1], y0, y1)
    vals[2] = wrap_angle(vals[2])
    if base.kind == "dump":
        lo = [x0, y0, -math.pi, cfg.dump_pre_lo, cfg.dump_post_lo, cfg.release_lo]
        hi = [x1, y1, math.pi, cfg.dump_pre_hi, cfg.dump_post_hi, cfg.release_hi]
    else:
        lo = [x0, y0, -math.pi, cfg.depth_lo, cfg.drag_lo, cfg.slope_lo,
              cfg.radius_lo, cfg.speed_lo, cfg.speed_lo]
        hi = [x1, y1, math.pi, cfg.depth_hi, cfg.drag_hi, cfg.slope_hi,
              cfg.radius_hi, cfg.speed_hi, cfg.speed_hi]
    return TrajectoryParams(base.kind, np.clip(vals, lo, hi))


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def observed_heightmap(scene: SimScene, goal: Heightmap,
                       exclude_carried: bool = True) -> Heightmap:
    """Project the scene's loose terrain onto the goal's grid."""
    pts = scene.terrain_positions
    if exclude_carried:
        carried = scene.carried_indices()
        if carried.size:
            keep = np.ones(pts.shape[0], dtype=bool)
            keep[carried] = False
            pts = pts[keep]
    return surface_heightmap(pts, (goal.origin.x, goal.origin.y),
                             goal.cell_size, goal.values.shape)


def goal_error(scene: SimScene, goal: Heightmap) -> float:
    return heightmap_l1(observed_heightmap(scene, goal), goal)


# ---------------------------------------------------------------------------
# MPPI-style planning
# ---------------------------------------------------------------------------

def plan(scene: SimScene, goal: Heightmap, models: StepModels,
         config: Config, rng: np.random.Generator,
         batch: int | None = None, iterations: int | None = None,
         budget_s: float | None = None, proposer: str = "learned",
         entry_box=None, candidate_fn=None, rollout_fn=None,
         log=None) -> PlanResult:
    """Iterated sampling planner (exponential-weighted refinement plus
    best-of-all argmin).

    The budget is either an iteration count (deterministic) or a wall-clock
    allowance checked before each iteration (at least one iteration runs).
    Scoop/push candidates are sampled only while the scoop is empty;
    a loaded scoop forces dump candidates.
    """
    cfg = config.planner
    batch = batch or cfg.batch
    if iterations is None and budget_s is None:
        iterations = cfg.iterations
    if entry_box is None:
        half = goal.cell_size * goal.values.shape[0] / 2.0
        cx = goal.origin.x + half
        cy = goal.origin.y + half
        entry_box = (cx - half, cy - half, cx + half, cy + half)

    carrying = len(scene.carried_indices()) >= cfg.carry_threshold
    kinds = ["dump"] if carrying else ["scoop", "push"]

    best: PlanResult | None = None
    elite: TrajectoryParams | None = None
    sigma = None
    rollouts = 0
    t_start = time.perf_counter()
    it = 0
    while True:
        if iterations is not None and it >= iterations:
            break
        if budget_s is not None and it > 0 and (
                time.perf_counter() - t_start) >= budget_s:
            break
        if candidate_fn is not None:
            candidates = candidate_fn(rng, kinds, it)
        else:
            candidates = []
            for b in range(batch):
                if elite is None or rng.random() < cfg.explore_frac:
                    kind = kinds[int(rng.integers(len(kinds)))]
                    candidates.append(sample_params(rng, kind, cfg, entry_box))
                else:
                    candidates.append(_perturb(rng, elite, sigma, cfg, entry_box))
        expanded = []
        for cand in candidates:
            try:
                expanded.append((cand, *expand(cand, scene, cfg,
                                               config.oracle.dt)))
            except OutOfBounds:
                continue
        if not expanded:
            raise NoFeasibleCandidate("every sampled candidate was infeasible")

        starts = []
        for cand, start_pose, controls in expanded:
            if cand.kind == "dump":
                starts.append(scene)
            else:
                starts.append(teleport_tool(scene, start_pose))
        # Rollout per start state; batch across candidates.
        roll = rollout_fn or _rollout_candidates
        finals = roll(starts, [e[2] for e in expanded], models, proposer)
        rollouts += len(expanded)
        scores = np.array([goal_error(f, goal) for f in finals])
        order = np.argsort(scores, kind="stable")
        top = order[0]
        if best is None or scores[top] < best.score:
            cand, start_pose, controls = expanded[top]
            best = PlanResult(cand, start_pose, controls,
                              float(scores[top]), 0, 0.0)
        # Exponential-weighted mean over same-kind candidates drives the
        # next iteration's sampling distribution.
        elite_kind = expanded[top][0].kind
        same = [i for i, e in enumerate(expanded) if e[0].kind == elite_kind]
        w = np.exp(-(scores[same] - scores[top]) / cfg.temperature)
        w /= w.sum()
        stack = np.stack([expanded[i][0].values for i in same])
        mean = (w[:, None] * stack).sum(axis=0)
        elite = TrajectoryParams(elite_kind, mean)
        spread = np.sqrt((w[:, None] * (stack - mean) ** 2).sum(axis=0))
        base_sigma = np.maximum(np.abs(stack).std(axis=0), 1e-3)
        sigma = np.maximum(spread, 0.25 * base_sigma) if sigma is None \
            else 0.7 * sigma + 0.3 * spread
        if log:
            log(f"plan iter {it}: best {best.score:.5f} "
                f"(batch best {scores[top]:.5f}, {len(expanded)} cands)")
        it += 1

    assert best is not None
    # Re-simulate the stored best so the returned score cannot go stale.
    start = scene if best.params.kind == "dump" else teleport_tool(
        scene, best.start_pose)
    roll = rollout_fn or _rollout_candidates
    final = roll([start], [best.controls], models, proposer)[0]
    best.score = goal_error(final, goal)
    best.rollouts = rollouts
    best.wall_time = time.perf_counter() - t_start
    return best


def _rollout_candidates(starts, control_seqs, models: StepModels,
                        proposer: str):
    """Advance each (start, controls) pair; batches across candidates even
    when start states differ."""
    from .localized import step_batch

    b = len(starts)
    states = list(starts)
    horizon = max((len(c) for c in control_seqs), default=0)
    for t in range(horizon):
        active = [i for i in range(b) if t < len(control_seqs[i])]
        if not active:
            break
        stepped, _ = step_batch([states[i] for i in active],
                                [control_seqs[i][t] for i in active],
                                models, proposer)
        for j, i in enumerate(active):
            states[i] = stepped[j]
    return states


def execute_on_oracle(scene: SimScene, result: PlanResult,
                      config: Config) -> SimScene:
    """Run the planned controls through the ground-truth simulator."""
    if result.params.kind != "dump":
        scene = teleport_tool(scene, result.start_pose)
    scene, _ = run_controls(scene, result.controls, config.oracle)
    return settle(scene, config.oracle, max_steps=config.planner.settle_steps)


def closed_loop(scene: SimScene, goal: Heightmap, n_actions: int,
                models: StepModels, config: Config, rng: np.random.Generator,
                batch: int | None = None, iterations: int | None = None,
                proposer: str = "learned", log=None):
    """Plan, execute on the oracle, re-observe; returns (scene, error trace).

    The trace holds the heightmap error after each executed action.
    """
    errors = []
    for a in range(n_actions):
        result = plan(scene, goal, models, config, rng, batch=batch,
                      iterations=iterations, proposer=proposer, log=log)
        scene = execute_on_oracle(scene, result, config)
        err = goal_error(scene, goal)
        errors.append(err)
        if log:
            log(f"action {a} ({result.params.kind}): executed error {err:.5f}")
    return scene, errors


def pose_after(start: ToolPose, controls: list[ControlInput]) -> ToolPose:
    pose = start
    for u in controls:
        pose = pose.advance(u)
    return pose


def scene_entry_box(scene: SimScene, margin: float = 0.06):
    pts = scene.terrain_positions
    return (float(pts[:, 0].min()) + margin, float(pts[:, 1].min()) + margin,
            float(pts[:, 0].max()) - margin, float(pts[:, 1].max()) - margin)


def random_action_sampler(config: Config, kinds=("scoop", "push", "scoop_dump"),
                          weights=(0.4, 0.3, 0.3)):
    """Action sampler for dataset generation.

    ``scoop_dump`` chains a scoop with a dump (the dump expansion continues
    from the kinematically-predicted post-scoop pose), so training data
    covers carried-material transport and release.
    """
    cfg = config.planner

    def sampler(rng: np.random.Generator, scene: SimScene):
        box = scene_entry_box(scene)
        p = list(weights) if weights is not None else None
        kind = str(rng.choice(list(kinds), p=p))
        if kind in ("scoop", "push"):
            params = sample_params(rng, kind, cfg, box)
            start, controls = expand(params, scene, cfg, config.oracle.dt)
            meta = {"kind": kind, "values": params.values.tolist()}
            return meta, start, controls
        scoop = sample_params(rng, "scoop", cfg, box)
        start, controls = expand(scoop, scene, cfg, config.oracle.dt)
        dump = sample_params(rng, "dump", cfg, box)
        mid = pose_after(start, controls)
        carrier = SimScene(state=scene.state,
                           pose=mid, tool=scene.tool)
        _, dump_controls = _expand_dump(dump, carrier, cfg, config.oracle.dt)
        meta = {"kind": kind, "values": scoop.values.tolist(),
                "dump_values": dump.values.tolist()}
        return meta, start, controls + dump_controls

    return sampler


# ---------------------------------------------------------------------------
# Greedy volume-maximization baseline
# ---------------------------------------------------------------------------

def _dp_search(excess: np.ndarray, cell: float, tool_cfg, cfg: PlannerConfig):
    """Max swept-excess volume over (orientation, band, depth, start, length)
    via prefix sums. Returns (volume, choice)."""
    width_cells = max(1, int(round(tool_cfg.width / cell)))
    capacity = tool_cfg.width * tool_cfg.length * tool_cfg.wall_height * 0.7
    depths = np.linspace(cfg.depth_lo, cfg.depth_hi, 6)
    max_len = int(cfg.drag_hi / cell)
    min_len = max(2, int(cfg.drag_lo / cell))

    best = (-1.0, None)
    for orient in range(2):             # 0: drag along +x, 1: along +y
        field_arr = excess if orient == 0 else excess.T
        rows, cols = field_arr.shape
        for r0 in range(0, rows - width_cells + 1):
            band = field_arr[r0:r0 + width_cells]
            for d in depths:
                cap = np.minimum(band, d).sum(axis=0) * cell * cell
                csum = np.concatenate([[0.0], np.cumsum(cap)])
                for start in range(cols - min_len):
                    stop = min(cols, start + max_len)
                    vols = csum[start + min_len:stop + 1] - csum[start]
                    vols = np.minimum(vols, capacity)
                    li = int(np.argmax(vols))
                    vol = float(vols[li])
                    if vol > best[0] + 1e-12:
                        best = (vol, (orient, r0, d, start, min_len + li))
    return best


def greedy_volume_baseline(scene: SimScene, goal: Heightmap,
                           config: Config) -> TrajectoryParams:
    """Axis-aligned scoop maximizing swept excess volume, by dynamic
    programming over (band, direction, depth, start, length) with prefix
    sums. Ignores settling behavior by design."""
    cfg = config.planner
    cur = observed_heightmap(scene, goal)
    both = cur.valid & goal.valid
    excess = np.where(both, cur.values - goal.values, 0.0)
    excess = np.maximum(excess, 0.0)
    if excess.max() <= 1e-4:
        raise NoExcess("terrain does not exceed the goal anywhere")

    cell = goal.cell_size
    vol, choice = _dp_search(excess, cell, scene.tool.cfg, cfg)
    if choice is None:
        raise NoExcess("no feasible axis-aligned scoop")
    orient, r0, d, start, length = choice
    width_cells = max(1, int(round(scene.tool.cfg.width / cell)))
    band_center = (r0 + width_cells / 2.0) * cell
    line_start = start * cell
    if orient == 0:
        entry = (goal.origin.x + line_start, goal.origin.y + band_center, 0.0)
    else:
        entry = (goal.origin.x + band_center, goal.origin.y + line_start, math.pi / 2)
    drag = np.clip(length * cell, cfg.drag_lo, cfg.drag_hi)
    vals = [entry[0], entry[1], entry[2], float(np.clip(d, cfg.depth_lo, cfg.depth_hi)),
            float(drag), 0.0, 0.5 * (cfg.radius_lo + cfg.radius_hi),
            0.5 * (cfg.speed_lo + cfg.speed_hi),
            0.5 * (cfg.speed_lo + cfg.speed_hi)]
    return TrajectoryParams("scoop", np.array(vals))
