"""Procedural terrain generation and particle instantiation.

A fractal surface is produced by midpoint displacement (diamond-square),
quantized into cube columns, and each occupied cube is filled with a small
random number of particles. Farthest-point sampling then thins the cloud to
the working particle budget.
"""

from __future__ import annotations

import math

import numpy as np

from .config import TerrainConfig
from .core import Heightmap, Vec3


class BadGrid(ValueError):
    """Grid side is not of the form 2^k + 1."""


class TooFew(ValueError):
    """Requested more sample points than are available."""


def _check_grid(n: int) -> None:
    if n < 3 or ((n - 1) & (n - 2)) != 0:
        raise BadGrid(f"grid_n must be 2^k + 1 with k >= 1, got {n}")


def diamond_square(spec: TerrainConfig, rng=None) -> Heightmap:
    """Generate a fractal heightmap, deterministic for a fixed seed.

    Draw order (part of the reproducibility contract): the four corners are
    seeded first from uniform(-roughness, roughness) noise around
    ``base_height``, then each level runs a diamond pass followed by a
    square pass, visiting cells in row-major order and drawing one uniform
    per cell. The noise amplitude halves at each level. Border cells in the
    square pass average their three existing neighbors.
    """
    n = spec.grid_n
    _check_grid(n)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.roughness < 0:
        raise ValueError("roughness must be >= 0")

    g = np.zeros((n, n), dtype=np.float64)
    amp = spec.roughness
    for iy, ix in ((0, 0), (0, n - 1), (n - 1, 0), (n - 1, n - 1)):
        g[iy, ix] = spec.base_height + rng.uniform(-amp, amp)

    step = n - 1
    while step >= 2:
        half = step // 2
        # Diamond pass: square centers from the four corners.
        for iy in range(half, n, step):
            for ix in range(half, n, step):
                corners = (
                    g[iy - half, ix - half]
                    + g[iy - half, ix + half]
                    + g[iy + half, ix - half]
                    + g[iy + half, ix + half]
                )
                g[iy, ix] = corners / 4.0 + rng.uniform(-amp, amp)
        # Square pass: edge midpoints from their diamond neighbors.
        for iy in range(0, n, half):
            x0 = half if (iy // half) % 2 == 0 else 0
            for ix in range(x0, n, step):
                total = 0.0
                count = 0
                if iy - half >= 0:
                    total += g[iy - half, ix]
                    count += 1
                if iy + half < n:
                    total += g[iy + half, ix]
                    count += 1
                if ix - half >= 0:
                    total += g[iy, ix - half]
                    count += 1
                if ix + half < n:
                    total += g[iy, ix + half]
                    count += 1
                g[iy, ix] = total / count + rng.uniform(-amp, amp)
        amp *= 0.5
        step //= 2

    half_extent = 0.5 * n * spec.cube_size
    origin = Vec3(-half_extent, -half_extent, 0.0)
    return Heightmap(origin=origin, cell_size=spec.cube_size, values=g)


def column_floor(h: Heightmap, spec: TerrainConfig) -> float:
    """Bottom of the volumetric fill for this terrain."""
    if spec.floor_z is not None:
        return spec.floor_z
    return float(h.values.min()) - 2.0 * spec.cube_size


def column_layers(h: Heightmap, spec: TerrainConfig) -> np.ndarray:
    """Number of cube layers per column (ceil of fill depth / cube size)."""
    floor = column_floor(h, spec)
    depth = h.values - floor
    layers = np.ceil(depth / spec.cube_size - 1e-9).astype(np.int64)
    return np.maximum(layers, 0)


def count_cubes(h: Heightmap, spec: TerrainConfig) -> int:
    """Total occupied cubes after quantizing the surface into columns."""
    return int(column_layers(h, spec).sum())


def instantiate_particles(h: Heightmap, spec: TerrainConfig, rng=None) -> np.ndarray:
    """Fill the terrain volume with particles, cube by cube.

    Each occupied cube receives a uniform random count in
    [particles_min, particles_max], placed on jittered subcells of the
    cube's AABB (keeps initial overlap small enough for the solver). The top
    cube of a column is clipped to the surface so no particle sits above its
    column height. Returns an (N, 3) float64 position array.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed + 1)
    floor = column_floor(h, spec)
    layers = column_layers(h, spec)
    c = spec.cube_size
    sub = c / 3.0
    centers = (np.stack(np.meshgrid(*[np.arange(3)] * 3, indexing="ij"), axis=-1)
               .reshape(27, 3) + 0.5) * sub
    chunks: list[np.ndarray] = []
    for iy in range(h.height):
        for ix in range(h.width):
            n_layers = layers[iy, ix]
            if n_layers == 0:
                continue
            surface = h.values[iy, ix]
            x0 = h.origin.x + ix * c
            y0 = h.origin.y + iy * c
            for layer in range(n_layers):
                z0 = floor + layer * c
                z1 = min(z0 + c, surface)
                if z1 - z0 < 1e-6:
                    continue
                count = int(rng.integers(spec.particles_min, spec.particles_max + 1))
                cells = rng.choice(27, size=count, replace=False)
                pts = centers[cells] + rng.uniform(-0.3 * sub, 0.3 * sub, size=(count, 3))
                pts[:, 0] += x0
                pts[:, 1] += y0
                pts[:, 2] = z0 + pts[:, 2] / c * (z1 - z0)
                chunks.append(pts)
    if not chunks:
        return np.zeros((0, 3), dtype=np.float64)
    return np.concatenate(chunks, axis=0)


def farthest_point_sample(points: np.ndarray, m: int) -> np.ndarray:
    """Indices of a greedy max-min-distance subset of ``points``.

    The first selected point is index 0 and distance ties are broken toward
    the lowest index, so the result is deterministic. Raises TooFew when
    more points are requested than exist.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if m > n:
        raise TooFew(f"requested {m} of {n} points")
    if m == n:
        return np.arange(n, dtype=np.int64)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = 0
    dists = np.linalg.norm(pts - pts[0], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dists))  # argmax returns the first (lowest) index on ties
        chosen[i] = nxt
        np.minimum(dists, np.linalg.norm(pts - pts[nxt], axis=1), out=dists)
    return chosen


def surface_heightmap(
    positions: np.ndarray,
    origin_xy: tuple[float, float],
    cell_size: float,
    shape: tuple[int, int],
) -> Heightmap:
    """Top-down max-height raster of a particle cloud on a fixed grid."""
    hgt, wid = shape
    grid = np.full((hgt, wid), -np.inf, dtype=np.float64)
    if positions.shape[0]:
        ix = np.floor((positions[:, 0] - origin_xy[0]) / cell_size).astype(np.int64)
        iy = np.floor((positions[:, 1] - origin_xy[1]) / cell_size).astype(np.int64)
        ok = (ix >= 0) & (ix < wid) & (iy >= 0) & (iy < hgt)
        np.maximum.at(grid, (iy[ok], ix[ok]), positions[ok, 2])
    valid = np.isfinite(grid)
    vals = np.where(valid, grid, 0.0)
    return Heightmap(
        origin=Vec3(origin_xy[0], origin_xy[1], 0.0),
        cell_size=cell_size,
        values=vals,
        valid=valid,
    )
