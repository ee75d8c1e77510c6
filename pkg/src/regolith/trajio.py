"""File formats: trajectory datasets, weight checkpoints, PLY point clouds.

Trajectories are one binary file each (fixed little-endian header, JSON
metadata block, then frame-major float32 arrays) plus a dataset-level JSON
manifest. Weight checkpoints are a JSON manifest followed by a float32
blob. All formats carry an explicit version tag.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAJ_MAGIC = b"RGTRJ001"
WEIGHTS_MAGIC = b"RGWTS001"
DATASET_VERSION = 1


@dataclass
class Trajectory:
    """One recorded robot-terrain interaction.

    positions: (T, N, 3) float32, terrain particles first, then tool.
    poses:     (T, 5) float32 tool tip pose rows [x, y, z, yaw, pitch].
    controls:  (T-1, 6) float32 rows [dx, dy, dz, dyaw, dpitch, phase].
    """

    positions: np.ndarray
    n_tool: int
    poses: np.ndarray
    controls: np.ndarray
    dt: float
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def n_terrain(self) -> int:
        return self.n_particles - self.n_tool


_HEADER = struct.Struct("<8sIIIfQI")  # magic, T, N, n_tool, dt, seed, meta_len


def save_trajectory(path: str | Path, traj: Trajectory) -> None:
    meta_bytes = json.dumps(traj.meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(
            TRAJ_MAGIC, traj.n_frames, traj.n_particles, traj.n_tool,
            float(traj.dt), traj.seed & 0xFFFFFFFFFFFFFFFF, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(np.ascontiguousarray(traj.poses, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(traj.controls, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(traj.positions, dtype="<f4").tobytes())


def load_trajectory(path: str | Path) -> Trajectory:
    raw = Path(path).read_bytes()
    magic, t, n, n_tool, dt, seed, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != TRAJ_MAGIC:
        raise ValueError(f"{path}: not a trajectory file")
    off = _HEADER.size
    meta = json.loads(raw[off:off + meta_len].decode()) if meta_len else {}
    off += meta_len
    poses = np.frombuffer(raw, dtype="<f4", count=t * 5, offset=off).reshape(t, 5)
    off += t * 5 * 4
    controls = np.frombuffer(raw, dtype="<f4", count=(t - 1) * 6, offset=off).reshape(t - 1, 6)
    off += (t - 1) * 6 * 4
    positions = np.frombuffer(raw, dtype="<f4", count=t * n * 3, offset=off).reshape(t, n, 3)
    return Trajectory(positions=positions.copy(), n_tool=n_tool, poses=poses.copy(),
                      controls=controls.copy(), dt=dt, seed=seed, meta=meta)


def save_dataset(out_dir: str | Path, trajectories: list[Trajectory],
                 config_echo: dict | None = None, notes: dict | None = None) -> Path:
    """Write one file per trajectory plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, traj in enumerate(trajectories):
        name = f"traj_{i:04d}.bin"
        save_trajectory(out / name, traj)
        entries.append({
            "file": name,
            "n_frames": traj.n_frames,
            "n_particles": traj.n_particles,
            "n_tool": traj.n_tool,
            "seed": traj.seed,
            "action": traj.meta.get("action"),
        })
    manifest = {
        "version": DATASET_VERSION,
        "dt": trajectories[0].dt if trajectories else 0.1,
        "config": config_echo or {},
        "notes": notes or {},
        "trajectories": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(dirname: str | Path) -> list[Trajectory]:
    root = Path(dirname)
    manifest = json.loads((root / "manifest.json").read_text())
    return [load_trajectory(root / e["file"]) for e in manifest["trajectories"]]


# ---------------------------------------------------------------------------
# Weight checkpoints
# ---------------------------------------------------------------------------

def save_weights(path: str | Path, store, meta: dict | None = None) -> None:
    """Checkpoint a ParamStore: JSON manifest + little-endian float32 blob."""
    names = sorted(store.keys())
    manifest = {
        "version": 1,
        "names": names,
        "shapes": {n: list(store[n].value.shape) for n in names},
        "meta": meta or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        for n in names:
            f.write(np.ascontiguousarray(store[n].value, dtype="<f4").tobytes())


def load_weights(path: str | Path):
    """Returns (dict name -> float32 array, meta dict)."""
    raw = Path(path).read_bytes()
    if raw[:8] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    (mlen,) = struct.unpack_from("<I", raw, 8)
    manifest = json.loads(raw[12:12 + mlen].decode())
    off = 12 + mlen
    arrays = {}
    for n in manifest["names"]:
        shape = tuple(manifest["shapes"][n])
        count = int(np.prod(shape)) if shape else 1
        arrays[n] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += count * 4
    return arrays, manifest["meta"]


# ---------------------------------------------------------------------------
# PLY point clouds (ascii)
# ---------------------------------------------------------------------------

def save_ply(path: str | Path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {pts.shape[0]}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for p in pts:
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def load_ply(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    n = 0
    body = 0
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.strip() == "end_header":
            body = i + 1
            break
    return np.array([[float(v) for v in lines[body + j].split()[:3]] for j in range(n)],
                    dtype=np.float64)


def graph_debug_json(graph) -> str:
    """Dump a scene graph (nodes, edges, features) for inspection."""
    return json.dumps({
        "n_nodes": graph.n_nodes,
        "edges": np.stack([graph.src, graph.dst], axis=1).tolist(),
        "node_features": np.asarray(graph.node_features, dtype=float).tolist(),
        "edge_features": np.asarray(graph.edge_features, dtype=float).tolist(),
    })


RUN_ROOT_ENV = "REGOLITH_RUNS"


def resolve_run_dir(out: str | Path | None, name: str) -> Path:
    """Run directory under --out, $REGOLITH_RUNS, or ./runs (in that order)."""
    if out is not None:
        path = Path(out)
    else:
        path = Path(os.environ.get(RUN_ROOT_ENV, "runs")) / name
    path.mkdir(parents=True, exist_ok=True)
    return path
