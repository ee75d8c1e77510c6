"""Command-line entry points.

Every subcommand reads a JSON config (defaults when omitted), writes its
outputs into a run directory, and echoes the resolved configuration there
so the run is reproducible. Figures are rendered alongside the delimited
outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import report
from .config import Config
from .core import Heightmap, Vec3
from .dataset import SampleSet, scene_at
from .dynamics import (create_dynamics_model, load_dynamics, one_step_mse,
                       save_dynamics, train_dynamics)
from .localized import StepModels, step_batch
from .oracle import ToolModel, build_scene, generate_trajectories
from .planner import (closed_loop, goal_error, greedy_volume_baseline,
                      observed_heightmap, plan, random_action_sampler)
from .roi import RoiProposer, load_proposer, save_proposer, train_proposer
from .terrain import diamond_square, farthest_point_sample, instantiate_particles
from .trajio import (graph_debug_json, load_dataset, resolve_run_dir,
                     save_dataset, save_ply)


def _load_config(path: str | None) -> Config:
    return Config.load(path) if path else Config()


def _run_dir(args, name: str) -> Path:
    out = resolve_run_dir(args.out, name)
    return out


def _echo_config(cfg: Config, out: Path) -> None:
    cfg.save(out / "config.json")


def cmd_gen_terrain(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.terrain.seed = args.seed
    out = _run_dir(args, "terrain")
    _echo_config(cfg, out)
    hmap = diamond_square(cfg.terrain)
    rng = np.random.default_rng(cfg.terrain.seed + 1)
    pts = instantiate_particles(hmap, cfg.terrain, rng)
    if cfg.terrain.target_particles and cfg.terrain.target_particles < len(pts):
        pts = pts[farthest_point_sample(pts, cfg.terrain.target_particles)]
    (out / "heightmap.json").write_text(hmap.to_json())
    save_ply(out / "particles.ply", pts)
    report.fig_heightmaps([("generated terrain", hmap)], out / "terrain.png")
    print(f"terrain: {pts.shape[0]} particles -> {out}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    out = _run_dir(args, "dataset")
    _echo_config(cfg, out)
    sampler = random_action_sampler(cfg, kinds=tuple(args.kinds.split(",")),
                                    weights=None if args.kinds != "scoop,push,scoop_dump"
                                    else (0.4, 0.3, 0.3))
    trajs = generate_trajectories(args.count, cfg, sampler,
                                  base_seed=args.seed, log=print)
    save_dataset(out, trajs, config_echo=cfg.to_dict())
    print(f"dataset: {len(trajs)} trajectories -> {out}")
    return 0


def cmd_train_gbnd(args) -> int:
    cfg = _load_config(args.config)
    if args.variant == "plain":
        cfg.model.include_normals = False
    elif args.variant == "z":
        cfg.model.include_normals = False
        cfg.model.include_z = True
    out = _run_dir(args, f"gbnd-{args.variant}")
    _echo_config(cfg, out)
    trajs = load_dataset(args.data)
    samples = SampleSet(trajs, cfg.graph, cfg.roi)
    model = create_dynamics_model(cfg.model, cfg.graph, seed=cfg.train.seed)
    curve = train_dynamics(samples, model, cfg.train, log=print)
    save_dynamics(out / "dynamics.rgw", model, {"variant": args.variant})
    with open(out / "loss.csv", "w") as f:
        f.write("# schema=loss_v1\nstep,loss\n")
        for s, l in curve:
            f.write(f"{s},{l:.6e}\n")
    report.fig_loss_curve(curve, out / "loss.png", "normalized MSE")
    print(f"model -> {out / 'dynamics.rgw'}")
    return 0


def cmd_train_roi(args) -> int:
    cfg = _load_config(args.config)
    out = _run_dir(args, "roi")
    _echo_config(cfg, out)
    trajs = load_dataset(args.data)
    samples = SampleSet(trajs, cfg.graph, cfg.roi)
    pairs = samples.pairs()
    proposer = RoiProposer(cfg.roi, history=cfg.graph.history)
    proposer.init_weights(np.random.default_rng(cfg.train.seed))

    def sample_fn(rng):
        ti, t = pairs[rng.integers(len(pairs))]
        return samples.proposer_sample(ti, t)

    curve = train_proposer(sample_fn, len(pairs), proposer, cfg.train,
                           log=print)
    save_proposer(out / "proposer.rgw", proposer)
    report.fig_loss_curve(curve, out / "loss.png", "L1 + hinge")
    print(f"proposer -> {out / 'proposer.rgw'}")
    return 0


def _load_models(args, cfg: Config) -> StepModels:
    dynamics = load_dynamics(args.model)
    proposer = load_proposer(args.roi) if args.roi else None
    return StepModels(dynamics=dynamics, proposer=proposer,
                      roi_cfg=cfg.roi if proposer is None else None)


def cmd_rollout(args) -> int:
    cfg = _load_config(args.config)
    out = _run_dir(args, "rollout")
    _echo_config(cfg, out)
    trajs = load_dataset(args.data)
    samples = SampleSet(trajs, cfg.graph, cfg.roi)
    models = _load_models(args, cfg)
    tool = ToolModel(cfg.tool)
    ti = args.traj
    traj = trajs[ti]
    h = cfg.graph.history
    scene = scene_at(traj, h, tool, h)
    frames = [scene.state.positions.copy()]
    reports = []
    with open(out / "steps.jsonl", "w") as rep_file:
        for t in range(h, traj.n_frames - 1):
            scenes, reps = step_batch([scene], [samples.control(ti, t)],
                                      models, args.proposer)
            scene = scenes[0]
            reports.append(reps[0])
            rep_file.write(reps[0].to_json() + "\n")
            frames.append(scene.state.positions.copy())
            if args.dump_graph and t == h:
                from .dataset import build_model_graph
                from .localized import _local_sample
                s = _local_sample(scene, samples.control(ti, t))
                g, _ = build_model_graph(
                    s, np.arange(scene.state.n_terrain), models.dynamics,
                    cfg.graph)
                (out / "graph_debug.json").write_text(graph_debug_json(g))
    pred = np.stack(frames)
    truth = traj.positions[h:h + pred.shape[0], :traj.n_terrain].astype(np.float64)
    mse = float(np.mean((pred[:, :traj.n_terrain] - truth) ** 2))
    np.save(out / "predicted_positions.npy", pred.astype(np.float32))
    save_ply(out / "final_cloud.ply", scene.terrain_positions)
    summary = {"proposer": args.proposer, "mse_m2": mse,
               "mean_active": float(np.mean([r.active for r in reports]))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return 0


def make_goal(scene, cell: float, cells: int, hole_center, hole_size: float,
              hole_depth: float) -> Heightmap:
    """A dig-a-hole goal: current surface with a square depression."""
    half = cell * cells / 2.0
    hm = observed_heightmap(scene, Heightmap(
        Vec3(hole_center[0] - half, hole_center[1] - half, 0.0), cell,
        np.zeros((cells, cells))))
    vals = hm.values.copy()
    xs = hm.origin.x + (np.arange(cells) + 0.5) * cell
    ys = hm.origin.y + (np.arange(cells) + 0.5) * cell
    in_x = np.abs(xs - hole_center[0]) <= hole_size / 2.0
    in_y = np.abs(ys - hole_center[1]) <= hole_size / 2.0
    box = np.outer(in_y, in_x)
    vals[box] -= hole_depth
    return Heightmap(hm.origin, cell, vals, hm.valid)


def cmd_plan(args) -> int:
    cfg = _load_config(args.config)
    out = _run_dir(args, "plan")
    _echo_config(cfg, out)
    models = _load_models(args, cfg)
    scene = build_scene(cfg, seed=args.seed)
    if args.goal:
        goal = Heightmap.from_json(Path(args.goal).read_text())
    else:
        goal = make_goal(scene, cfg.roi.crop / cfg.roi.in_cells, 24,
                         (0.0, 0.0), 0.10, 0.04)
    (out / "goal.json").write_text(goal.to_json())
    rng = np.random.default_rng(args.seed)
    before = observed_heightmap(scene, goal)
    err0 = goal_error(scene, goal)
    scene, errors = closed_loop(scene, goal, args.actions, models, cfg, rng,
                                batch=args.batch, iterations=args.iterations,
                                proposer=args.proposer, log=print)
    after = observed_heightmap(scene, goal)
    with open(out / "trace.csv", "w") as f:
        f.write("# schema=plan_trace_v1\naction,l1_m\n")
        f.write(f"0,{err0:.6e}\n")
        for i, e in enumerate(errors):
            f.write(f"{i + 1},{e:.6e}\n")
    report.fig_error_trace({"planned": [err0] + errors}, out / "trace.png")
    report.fig_heightmaps([("before", before), ("goal", goal),
                           ("after", after)], out / "heightmaps.png")
    save_ply(out / "final_cloud.ply", scene.terrain_positions)
    print(f"initial {err0:.5f} -> final {errors[-1]:.5f} ({out})")
    return 0


def cmd_bench_batch(args) -> int:
    cfg = _load_config(args.config)
    out = _run_dir(args, "bench-batch")
    _echo_config(cfg, out)
    models = _load_models(args, cfg)
    scene = _bench_scene(cfg, args.seed)
    controls = bench_mod.drag_controls(cfg.bench.steps)
    proposers = args.proposers.split(",")
    records = bench_mod.bench_batch_sweep(scene, controls, models, proposers,
                                          cfg.bench)
    bench_mod.write_batch_csv(out / "batch_sweep.csv", records)
    report.fig_batch_sweep(records, out / "batch_sweep.png")
    for r in records:
        print(r)
    return 0


def _bench_scene(cfg: Config, seed: int):
    from .oracle import ToolPose, teleport_tool

    scene = build_scene(cfg, seed=seed)
    surf = float(np.percentile(scene.terrain_positions[:, 2], 85))
    return teleport_tool(scene, ToolPose(
        np.array([-0.08, 0.0, surf - 0.02]), 0.0, 0.35))


def cmd_bench_roi(args) -> int:
    cfg = _load_config(args.config)
    out = _run_dir(args, "bench-roi")
    _echo_config(cfg, out)
    models = _load_models(args, cfg)
    trajs = load_dataset(args.data)
    samples = SampleSet(trajs, cfg.graph, cfg.roi)
    tool = ToolModel(cfg.tool)
    proposers = args.proposers.split(",")
    records = bench_mod.bench_roi_tradeoff(samples, models, tool, proposers)
    bench_mod.write_tradeoff_csv(out / "tradeoff.csv", records)
    report.fig_tradeoff(records, out / "tradeoff.png")
    for r in records:
        print(r)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    out = _run_dir(args, "eval")
    _echo_config(cfg, out)
    models = _load_models(args, cfg)
    trajs = load_dataset(args.data)
    samples = SampleSet(trajs, cfg.graph, cfg.roi)
    pairs = samples.pairs()
    mse = one_step_mse(samples, models.dynamics, pairs)
    zero = 0.0
    cnt = 0
    for ti, t in pairs:
        s = samples.local(ti, t)
        idx = samples.roi_indices(ti, t)
        d = s.local_next[idx] - s.terrain_now[idx]
        zero += float(np.sum(d * d))
        cnt += d.size
    zero /= max(cnt, 1)
    tool = ToolModel(cfg.tool)
    roll_mse, frac = bench_mod.rollout_mse_against_oracle(
        samples, models, args.proposer, tool, start=cfg.graph.history,
        window=10)
    metrics = {"one_step_mse_m2": mse, "zero_motion_mse_m2": zero,
               "ratio": mse / zero, "rollout10_mse_m2": roll_mse,
               "mean_roi_frac": frac}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    print(json.dumps(metrics, indent=2))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="regolith",
        description="Localized graph-based neural dynamics for granular "
                    "terrain manipulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, data=False):
        p.add_argument("--config", help="JSON config file (defaults if omitted)")
        p.add_argument("--out", help="run directory (default: $REGOLITH_RUNS/<cmd>)")
        p.add_argument("--seed", type=int, default=0)
        if model:
            p.add_argument("--model", required=True, help="dynamics checkpoint")
            p.add_argument("--roi", help="proposer checkpoint")
            p.add_argument("--proposer", default="learned",
                           help="learned | geo-<cm> | full")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("gen-terrain", help="generate a terrain heightmap + particles")
    common(p)
    p.set_defaults(func=cmd_gen_terrain)

    p = sub.add_parser("gen-data", help="simulate interaction trajectories")
    common(p)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--kinds", default="scoop,push,scoop_dump")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-gbnd", help="train the particle dynamics model")
    common(p, data=True)
    p.add_argument("--variant", default="normals",
                   choices=["normals", "plain", "z"])
    p.set_defaults(func=cmd_train_gbnd)

    p = sub.add_parser("train-roi", help="train the region proposer")
    common(p, data=True)
    p.set_defaults(func=cmd_train_roi)

    p = sub.add_parser("rollout", help="roll the model along a recorded trajectory")
    common(p, model=True, data=True)
    p.add_argument("--traj", type=int, default=0)
    p.add_argument("--dump-graph", action="store_true",
                   help="write the first step's scene graph as JSON")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("plan", help="closed-loop terrain shaping on the oracle")
    common(p, model=True)
    p.add_argument("--goal", help="goal heightmap JSON (default: dig-a-hole)")
    p.add_argument("--actions", type=int, default=3)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("bench-batch", help="batch-size throughput sweep")
    common(p, model=True)
    p.add_argument("--proposers", default="learned,geo-6,geo-12,geo-18,full")
    p.set_defaults(func=cmd_bench_batch)

    p = sub.add_parser("bench-roi", help="proposer accuracy/speed trade-off")
    common(p, model=True, data=True)
    p.add_argument("--proposers", default="learned,geo-6,geo-12,geo-18,full")
    p.set_defaults(func=cmd_bench_roi)

    p = sub.add_parser("eval", help="model-vs-oracle error metrics")
    common(p, model=True, data=True)
    p.set_defaults(func=cmd_eval)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
