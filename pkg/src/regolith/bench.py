"""Benchmark harness: batched-throughput sweeps and the accuracy/speed
trade-off across region proposers, with CSV output.

Timing covers the whole localized step (projection, proposal, graph build,
fused network forward, state update) and excludes file I/O. Memory columns
report process resident set size; runs whose estimated working set exceeds
the available-memory budget are recorded as OoM instead of thrashing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import psutil

from .config import BenchConfig, Config
from .core import ControlInput, Vec3
from .dataset import SampleSet, scene_at
from .localized import StepModels, step_batch
from .oracle import SimScene

BATCH_CSV_SCHEMA = "bench_batch_v1"
TRADEOFF_CSV_SCHEMA = "bench_roi_v1"


@dataclass
class BenchRecord:
    proposer: str
    batch: int
    per_sample_ms: float
    peak_rss_mb: float
    mse: float | None = None
    roi_frac: float | None = None
    oom: bool = False


def _rss_mb() -> float:
    return psutil.Process().memory_info().rss / (1024 * 1024)


def probe_active_count(scene: SimScene, controls, models: StepModels,
                       proposer: str) -> int:
    _, reports = step_batch([scene], [controls[0]], models, proposer)
    return reports[0].active + scene.state.n_tool


def estimate_working_set(active: int, models: StepModels, batch: int) -> float:
    """Approximate bytes held across a batched step (per-element graphs plus
    one bounded fused group)."""
    edges = active * models.graph_cfg.knn_k * 2
    de = 3 * (models.graph_cfg.history + 1) + 2 * models.graph_cfg.embed_dim
    lat = models.dynamics.model_cfg.latent
    per_elem = edges * (de + 8) * 4 + active * 200
    fused = min(edges * batch, 2_500_000) * (3 * lat + 2 *
                                             models.dynamics.model_cfg.hidden
                                             + lat) * 4
    return batch * per_elem + fused


def time_stepper(scene: SimScene, controls, models: StepModels, proposer: str,
                 batch: int, steps: int, reps: int):
    """Median per-sample step time (ms) plus RSS and mean active fraction."""
    times = []
    fracs = []
    for _ in range(reps):
        scenes = [scene] * batch
        t0 = time.perf_counter()
        for t in range(steps):
            scenes, reports = step_batch(scenes, [controls[t]] * batch, models,
                                         proposer)
        times.append((time.perf_counter() - t0) / (batch * steps))
        fracs.append(np.mean([r.active / max(r.total, 1) for r in reports]))
    return float(np.median(times) * 1e3), _rss_mb(), float(np.mean(fracs))


def bench_batch_sweep(scene: SimScene, controls, models: StepModels,
                      proposers, cfg: BenchConfig) -> list[BenchRecord]:
    """Per-sample prediction time as the batch size varies, per proposer."""
    records = []
    budget = psutil.virtual_memory().available * cfg.mem_safety
    for proposer in proposers:
        active = probe_active_count(scene, controls, models, proposer)
        for batch in cfg.batches:
            est = estimate_working_set(active, models, batch)
            if est > budget:
                records.append(BenchRecord(proposer, batch, float("nan"),
                                           float("nan"), oom=True))
                continue
            ms, rss, frac = time_stepper(scene, controls, models, proposer,
                                         batch, cfg.steps, cfg.reps)
            records.append(BenchRecord(proposer, batch, ms, rss,
                                       roi_frac=frac))
    return records


def rollout_mse_against_oracle(samples: SampleSet, models: StepModels,
                               proposer: str, tool, start: int,
                               window: int) -> tuple[float, float]:
    """Per-particle MSE of an autoregressive localized rollout vs recorded
    frames, averaged over trajectories; also returns the mean active
    fraction."""
    total = 0.0
    count = 0
    fracs = []
    h = samples.graph_cfg.history
    for ti, traj in enumerate(samples.trajs):
        t0 = min(start, max(traj.n_frames - window - 2, 0))
        scene = scene_at(traj, t0, tool, h)
        for w in range(min(window, traj.n_frames - 1 - t0)):
            u = samples.control(ti, t0 + w)
            scenes, reports = step_batch([scene], [u], models, proposer)
            scene = scenes[0]
            fracs.append(reports[0].active / max(reports[0].total, 1))
            truth = traj.positions[t0 + w + 1, :traj.n_terrain].astype(np.float64)
            err = scene.terrain_positions - truth
            total += float(np.sum(err * err))
            count += err.size
    return total / max(count, 1), float(np.mean(fracs))


def bench_roi_tradeoff(samples: SampleSet, models: StepModels, tool,
                       proposers, start: int = 4,
                       window: int = 10) -> list[BenchRecord]:
    """Accuracy/speed table across proposers on held-out trajectories."""
    records = []
    for proposer in proposers:
        t0 = time.perf_counter()
        mse, frac = rollout_mse_against_oracle(samples, models, proposer,
                                               tool, start, window)
        steps = sum(min(window, tr.n_frames - 1) for tr in samples.trajs)
        ms = (time.perf_counter() - t0) / max(steps, 1) * 1e3
        records.append(BenchRecord(proposer, 1, ms, _rss_mb(), mse=mse,
                                   roi_frac=frac))
    return records


def drag_controls(n: int, speed: float = 0.06, dt: float = 0.1):
    """A simple straight drag used as the timing workload."""
    return [ControlInput(Vec3(speed * dt, 0.0, 0.0), 0.0, 0.0, 2)
            for _ in range(n)]


def write_batch_csv(path: str | Path, records: list[BenchRecord]) -> None:
    lines = [f"# schema={BATCH_CSV_SCHEMA}",
             "proposer,batch,per_sample_ms,peak_rss_mb,roi_frac,oom"]
    for r in records:
        frac = "" if r.roi_frac is None else f"{r.roi_frac:.4f}"
        lines.append(f"{r.proposer},{r.batch},{r.per_sample_ms:.4f},"
                     f"{r.peak_rss_mb:.1f},{frac},{int(r.oom)}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_tradeoff_csv(path: str | Path, records: list[BenchRecord]) -> None:
    lines = [f"# schema={TRADEOFF_CSV_SCHEMA}",
             "proposer,per_sample_ms,mse_m2,roi_frac"]
    for r in records:
        lines.append(f"{r.proposer},{r.per_sample_ms:.4f},{r.mse:.6e},"
                     f"{r.roi_frac:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_records_csv(path: str | Path) -> list[BenchRecord]:
    lines = Path(path).read_text().strip().splitlines()
    schema = lines[0].split("=", 1)[1]
    header = lines[1].split(",")
    out = []
    for line in lines[2:]:
        vals = dict(zip(header, line.split(",")))
        out.append(BenchRecord(
            proposer=vals["proposer"], batch=int(vals.get("batch", 1)),
            per_sample_ms=float(vals["per_sample_ms"]),
            peak_rss_mb=float(vals.get("peak_rss_mb", "nan")),
            mse=float(vals["mse_m2"]) if "mse_m2" in vals else None,
            roi_frac=float(vals["roi_frac"]) if vals.get("roi_frac") else None,
            oom=bool(int(vals.get("oom", "0"))),
        ))
    return out
