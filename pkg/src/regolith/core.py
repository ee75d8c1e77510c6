"""Geometric primitives shared across the terrain stack.

World frame convention: z is up, gravity acts along -z, units are SI
(meters, seconds, radians). One simulation step is 0.1 s. All types here
are immutable values and safe to share between workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class GridMismatch(ValueError):
    """Two heightmaps do not share the same grid geometry."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Vec3:
    """A 3D point or displacement in meters (or meters/step for velocities)."""

    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite Vec3 components: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_array(a: np.ndarray) -> "Vec3":
        return Vec3(float(a[0]), float(a[1]), float(a[2]))

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True)
class Frame2D:
    """A planar reference frame: translation by ``origin`` plus rotation by ``yaw``.

    Only the yaw component rotates; z is handled as a pure offset. Used to
    express particle positions relative to the tool tip.
    """

    origin: Vec3
    yaw: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into this frame.

        Applies translation by -origin, then planar rotation by -yaw.
        """
        p = np.asarray(points, dtype=np.float64)
        out = p - self.origin.as_array()
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = out[..., 0] * c + out[..., 1] * s
        y = -out[..., 0] * s + out[..., 1] * c
        res = np.empty_like(out)
        res[..., 0] = x
        res[..., 1] = y
        res[..., 2] = out[..., 2]
        return res

    def to_world(self, points: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_local`."""
        p = np.asarray(points, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        res = np.empty_like(p)
        res[..., 0] = p[..., 0] * c - p[..., 1] * s
        res[..., 1] = p[..., 0] * s + p[..., 1] * c
        res[..., 2] = p[..., 2]
        return res + self.origin.as_array()

    def rotate_to_local(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors into the frame (no translation)."""
        v = np.asarray(vectors, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        res = np.empty_like(v)
        res[..., 0] = v[..., 0] * c + v[..., 1] * s
        res[..., 1] = -v[..., 0] * s + v[..., 1] * c
        res[..., 2] = v[..., 2]
        return res

    def rotate_to_world(self, vectors: np.ndarray) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        res = np.empty_like(v)
        res[..., 0] = v[..., 0] * c - v[..., 1] * s
        res[..., 1] = v[..., 0] * s + v[..., 1] * c
        res[..., 2] = v[..., 2]
        return res


def transform_to_frame(p: Vec3, f: Frame2D) -> Vec3:
    """Express a world point in frame ``f`` (planar rotation, z offset)."""
    return Vec3.from_array(f.to_local(p.as_array()))


def transform_from_frame(p: Vec3, f: Frame2D) -> Vec3:
    """Inverse of :func:`transform_to_frame`."""
    return Vec3.from_array(f.to_world(p.as_array()))


# Action phases attached to expanded control sequences. The neutral phase is
# used for free moves between interactions.
PHASE_MOVE = 0
PHASE_PENETRATE = 1
PHASE_DRAG = 2
PHASE_SCOOP = 3
PHASE_DUMP = 4
N_PHASES = 5


@dataclass(frozen=True)
class ControlInput:
    """One step of end-effector motion.

    ``delta_pos`` is the tip displacement over the step, ``delta_yaw`` and
    ``delta_pitch`` the orientation increments (roll is fixed at zero).
    ``phase`` labels which part of a parameterized trajectory the step
    belongs to; it conditions the region proposer but not the rigid motion.
    """

    delta_pos: Vec3
    delta_yaw: float = 0.0
    delta_pitch: float = 0.0
    phase: int = PHASE_MOVE

    def __post_init__(self) -> None:
        if not (math.isfinite(self.delta_yaw) and math.isfinite(self.delta_pitch)):
            raise ValueError("non-finite control angles")

    def validate(self, max_step: float) -> None:
        if self.delta_pos.norm() > max_step + 1e-12:
            raise ValueError(
                f"control displacement {self.delta_pos.norm():.4f} m exceeds "
                f"max step {max_step:.4f} m"
            )

    def as_vector(self) -> np.ndarray:
        """[dx, dy, dz, dyaw, dpitch] as float64."""
        return np.array(
            [self.delta_pos.x, self.delta_pos.y, self.delta_pos.z,
             self.delta_yaw, self.delta_pitch],
            dtype=np.float64,
        )


ZERO_CONTROL = ControlInput(Vec3(0.0, 0.0, 0.0))


@dataclass(frozen=True)
class Heightmap:
    """A raster of surface heights on a regular grid.

    ``values[iy, ix]`` is the height (meters) of the cell whose center is at
    ``(origin.x + (ix + 0.5) * cell_size, origin.y + (iy + 0.5) * cell_size)``.
    Cells with no supporting material are EMPTY, tracked by an explicit
    boolean ``valid`` mask rather than a sentinel float.
    """

    origin: Vec3
    cell_size: float
    values: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if self.valid is None:
            object.__setattr__(self, "valid", np.ones(vals.shape, dtype=bool))
        else:
            object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))
        if self.valid.shape != vals.shape:
            raise ValueError("valid mask shape differs from values shape")
        if not np.all(np.isfinite(vals[self.valid])):
            raise ValueError("non-finite heights in valid cells")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def same_grid(self, other: "Heightmap") -> bool:
        return (
            self.values.shape == other.values.shape
            and abs(self.cell_size - other.cell_size) < 1e-12
            and abs(self.origin.x - other.origin.x) < 1e-9
            and abs(self.origin.y - other.origin.y) < 1e-9
        )

    def cell_index(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map coordinates to (ix, iy) cell indices (may fall outside the grid)."""
        ix = np.floor((np.asarray(x) - self.origin.x) / self.cell_size).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin.y) / self.cell_size).astype(np.int64)
        return ix, iy

    def to_json(self) -> str:
        """Serialize as a JSON header plus row-major values, EMPTY as null."""
        flat = [
            float(v) if ok else None
            for v, ok in zip(self.values.ravel(), self.valid.ravel())
        ]
        return json.dumps(
            {
                "origin": [self.origin.x, self.origin.y, self.origin.z],
                "cell_size": self.cell_size,
                "width": self.width,
                "height": self.height,
                "values": flat,
            }
        )

    @staticmethod
    def from_json(text: str) -> "Heightmap":
        obj = json.loads(text)
        h, w = obj["height"], obj["width"]
        raw = obj["values"]
        if len(raw) != h * w:
            raise ValueError("heightmap payload length mismatch")
        vals = np.zeros(h * w, dtype=np.float64)
        valid = np.zeros(h * w, dtype=bool)
        for i, v in enumerate(raw):
            if v is not None:
                vals[i] = float(v)
                valid[i] = True
        o = obj["origin"]
        return Heightmap(
            origin=Vec3(o[0], o[1], o[2]),
            cell_size=float(obj["cell_size"]),
            values=vals.reshape(h, w),
            valid=valid.reshape(h, w),
        )


def heightmap_l1(a: Heightmap, b: Heightmap) -> float:
    """Mean absolute height difference over cells valid in both maps.

    Raises GridMismatch if the two maps do not share grid geometry, and
    ValueError if the shared valid mask is empty.
    """
    if not a.same_grid(b):
        raise GridMismatch("heightmap grids differ")
    both = a.valid & b.valid
    if not both.any():
        raise ValueError("no cells are valid in both heightmaps")
    return float(np.mean(np.abs(a.values[both] - b.values[both])))
