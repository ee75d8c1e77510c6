"""Particle state and scene-graph construction.

Node and edge features are built exclusively from relative quantities
(finite-difference velocities, relative positions, per-particle control
impulses, class embeddings, and local surface normals), which makes every
downstream prediction invariant to global translation of the scene. An
optional absolute-height feature exists only for ablation studies.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

CLASS_TERRAIN = 0
CLASS_TOOL = 1


class HistoryIncomplete(ValueError):
    """Particle history does not hold the expected number of frames."""


@dataclass
class ParticleState:
    """Positions plus H previous frames for terrain and tool particles.

    ``classes`` must be blocked: all terrain indices first, then all tool
    indices. ``impulses`` holds the per-particle displacement directly
    commanded for the current step; it is zero for terrain particles.
    """

    positions: np.ndarray          # (N, 3) float64
    history: np.ndarray            # (H, N, 3) float64, oldest frame first
    classes: np.ndarray            # (N,) uint8
    impulses: np.ndarray           # (N, 3) float64

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.history = np.asarray(self.history, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        self.impulses = np.asarray(self.impulses, dtype=np.float64)
        n = self.positions.shape[0]
        if self.history.ndim != 3 or self.history.shape[1] != n:
            raise HistoryIncomplete(
                f"history shape {self.history.shape} does not match {n} particles")
        if self.classes.shape != (n,) or self.impulses.shape != (n, 3):
            raise ValueError("classes/impulses shape mismatch")
        tool = self.classes == CLASS_TOOL
        if tool.any():
            first_tool = int(np.argmax(tool))
            if not tool[first_tool:].all() or tool[:first_tool].any():
                raise ValueError("classes must be [terrain..., tool...] blocked")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def n_tool(self) -> int:
        return int(np.count_nonzero(self.classes == CLASS_TOOL))

    @property
    def n_terrain(self) -> int:
        return self.n - self.n_tool

    @property
    def h(self) -> int:
        return self.history.shape[0]

    def frames(self) -> np.ndarray:
        """All position frames, oldest first, current last: (H+1, N, 3)."""
        return np.concatenate([self.history, self.positions[None]], axis=0)

    def shifted(self, delta) -> "ParticleState":
        d = np.asarray(delta, dtype=np.float64)
        return replace(
            self,
            positions=self.positions + d,
            history=self.history + d,
            impulses=self.impulses.copy(),
            classes=self.classes.copy(),
        )

    def take(self, idx: np.ndarray) -> "ParticleState":
        return ParticleState(
            positions=self.positions[idx],
            history=self.history[:, idx],
            classes=self.classes[idx],
            impulses=self.impulses[idx],
        )

    @staticmethod
    def at_rest(positions: np.ndarray, classes: np.ndarray, history: int) -> "ParticleState":
        """A static state whose history repeats the current frame."""
        p = np.asarray(positions, dtype=np.float64)
        return ParticleState(
            positions=p,
            history=np.repeat(p[None], history, axis=0),
            classes=classes,
            impulses=np.zeros_like(p),
        )


def static_history(positions: np.ndarray, h: int) -> np.ndarray:
    return np.repeat(np.asarray(positions, dtype=np.float64)[None], h, axis=0)


# ---------------------------------------------------------------------------
# kNN graph
# ---------------------------------------------------------------------------

_BRUTE_LIMIT = 700
_DIST2_QUANTUM = 1e-12  # m^2; regular tool grids produce exact distance ties


def build_knn_graph(positions: np.ndarray, k: int, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Directed edge list: each node is linked with its <=k nearest neighbors
    within ``radius``, then symmetric closure adds the reverse direction.

    Returns (src, dst) arrays sorted by (dst, src). Deterministic given
    positions; squared distances are snapped to a fixed quantum before the
    stable sort so ties resolve toward the lower index even under
    float-epsilon coordinate perturbations (e.g. after a global
    translation). Isolated nodes are allowed.
    """
    pts = np.asarray(positions, dtype=np.float64)
    n = pts.shape[0]
    if n <= 1 or k < 1 or radius <= 0.0:
        e = np.zeros(0, dtype=np.int64)
        return e, e.copy()

    kq = min(k, n - 1)
    r2 = np.round(radius * radius / _DIST2_QUANTUM)
    if n <= _BRUTE_LIMIT:
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        d2 = np.round(d2 / _DIST2_QUANTUM)
        np.fill_diagonal(d2, np.inf)
        order = np.argsort(d2, axis=1, kind="stable")[:, :kq]
        nd2 = np.take_along_axis(d2, order, axis=1)
        ok = nd2 <= r2
        centers = np.repeat(np.arange(n, dtype=np.int64), kq)[ok.ravel()]
        nbrs = order.ravel()[ok.ravel()].astype(np.int64)
    else:
        # Query a few extra neighbors so quantized re-sorting can break ties
        # by index across the whole tie group at the cut boundary.
        pad = min(n - 1, kq + 4)
        tree = cKDTree(pts)
        dist, idx = tree.query(pts, k=pad + 1)
        d2 = np.round((dist * dist) / _DIST2_QUANTUM)
        d2[idx == np.arange(n)[:, None]] = np.inf
        rank = np.lexsort((idx, d2), axis=1)[:, :kq]
        nd2 = np.take_along_axis(d2, rank, axis=1)
        nidx = np.take_along_axis(idx, rank, axis=1)
        ok = nd2 <= r2
        centers = np.repeat(np.arange(n, dtype=np.int64), kq)[ok.ravel()]
        nbrs = nidx.ravel()[ok.ravel()].astype(np.int64)

    src = np.concatenate([nbrs, centers])
    dst = np.concatenate([centers, nbrs])
    key = dst * np.int64(n) + src
    key = np.unique(key)
    return key % n, key // n


@dataclass
class SceneGraph:
    """A feature graph plus the index structures for message aggregation."""

    n_nodes: int
    node_features: np.ndarray      # (N, Dv)
    src: np.ndarray                # (M,) sorted by (dst, src)
    dst: np.ndarray
    edge_features: np.ndarray      # (M, De)
    classes: np.ndarray            # (N,) uint8
    # Segment descriptors for deterministic sum aggregation.
    dst_unique: np.ndarray
    dst_starts: np.ndarray
    src_perm: np.ndarray           # permutation of edges into src-sorted order
    src_unique: np.ndarray
    src_starts: np.ndarray

    @property
    def n_edges(self) -> int:
        return self.src.shape[0]


def make_scene_graph(n_nodes, node_features, src, dst, edge_features,
                     classes=None) -> SceneGraph:
    if src.shape != dst.shape:
        raise ValueError("src/dst length mismatch")
    dst_unique, dst_starts = np.unique(dst, return_index=True)
    src_perm = np.argsort(src, kind="stable")
    src_unique, src_starts = np.unique(src[src_perm], return_index=True)
    if classes is None:
        classes = np.zeros(n_nodes, dtype=np.uint8)
    return SceneGraph(
        n_nodes=n_nodes,
        node_features=node_features,
        src=src, dst=dst,
        edge_features=edge_features,
        classes=np.asarray(classes, dtype=np.uint8),
        dst_unique=dst_unique, dst_starts=dst_starts,
        src_perm=src_perm, src_unique=src_unique, src_starts=src_starts,
    )


def segment_sum(values: np.ndarray, unique_ids: np.ndarray, starts: np.ndarray,
                n_segments: int) -> np.ndarray:
    """Sum rows by contiguous segment (deterministic index order)."""
    out = np.zeros((n_segments, values.shape[1]), dtype=values.dtype)
    if unique_ids.size:
        out[unique_ids] = np.add.reduceat(values, starts, axis=0)
    return out


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def node_features(state: ParticleState, normals: np.ndarray,
                  embed: np.ndarray, include_z: bool = False,
                  vel_scale: float = 1.0, z_scale: float = 1.0) -> np.ndarray:
    """Per-node feature rows.

    Layout: [H finite-difference velocities (m/step), control impulse,
    class embedding, unit normal]. Velocity and impulse blocks are divided
    by ``vel_scale`` so they land on the same numeric range as the embedding
    and normal blocks. With ``include_z`` the absolute height (over
    ``z_scale``) is appended; this breaks translation invariance and exists
    only for the feature-ablation study.
    """
    if state.h < 1:
        raise HistoryIncomplete("at least one history frame is required")
    frames = state.frames()
    vel = np.diff(frames, axis=0)              # (H, N, 3)
    vel = vel.transpose(1, 0, 2).reshape(state.n, 3 * state.h)
    parts = [vel / vel_scale, state.impulses / vel_scale,
             embed[state.classes], normals]
    if include_z:
        parts.append(state.positions[:, 2:3] / z_scale)
    return np.concatenate(parts, axis=1)


def edge_features(state: ParticleState, src: np.ndarray, dst: np.ndarray,
                  embed: np.ndarray, rel_scale: float = 1.0) -> np.ndarray:
    """Per-edge feature rows: relative positions over all H+1 frames (over
    ``rel_scale``) plus both endpoint class embeddings. Strictly relative;
    no absolute positions enter the feature."""
    frames = state.frames()                    # (H+1, N, 3)
    rel = frames[:, src, :] - frames[:, dst, :]
    m = src.shape[0]
    rel = rel.transpose(1, 0, 2).reshape(m, 3 * (state.h + 1)) / rel_scale
    return np.concatenate([rel, embed[state.classes[src]], embed[state.classes[dst]]], axis=1)


def node_feature_dim(history: int, embed_dim: int, include_z: bool = False) -> int:
    return 3 * history + 3 + embed_dim + 3 + (1 if include_z else 0)


def edge_feature_dim(history: int, embed_dim: int) -> int:
    return 3 * (history + 1) + 2 * embed_dim


# ---------------------------------------------------------------------------
# Surface normals
# ---------------------------------------------------------------------------

FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


_NORMAL_QUANTUM = 1e-6


def estimate_normals(query_positions: np.ndarray, support_positions: np.ndarray,
                     radius: float, tip_xy: np.ndarray | None = None,
                     min_neighbors: int = 3) -> np.ndarray:
    """Classical PCA normals of the query points against a support cloud.

    The normal is the smallest-covariance eigenvector of the neighborhood
    within ``radius``. Orientation: flipped so n.z >= 0; horizontal normals
    are flipped toward the tool tip when ``tip_xy`` is given. Queries with
    fewer than ``min_neighbors`` support points fall back to +z.

    Centered neighbor offsets are snapped to a 1 um grid before the
    covariance: near-isotropic neighborhoods have degenerate eigenvectors,
    and without the snap a float-epsilon global translation could swing
    them arbitrarily, breaking translation invariance downstream.
    """
    q = np.asarray(query_positions, dtype=np.float64)
    s = np.asarray(support_positions, dtype=np.float64)
    nq = q.shape[0]
    out = np.repeat(FALLBACK_NORMAL[None], nq, axis=0)
    if nq == 0 or s.shape[0] == 0:
        return out

    tree = cKDTree(s)
    neighborhoods = tree.query_ball_point(q, r=radius)
    counts = np.fromiter((len(nb) for nb in neighborhoods), dtype=np.int64, count=nq)
    good = counts >= min_neighbors
    if not good.any():
        return out

    good_rows = np.nonzero(good)[0]
    flat = np.concatenate([neighborhoods[i] for i in good_rows])
    pts = s[flat]
    gcounts = counts[good]
    starts = np.zeros(gcounts.shape[0], dtype=np.int64)
    np.cumsum(gcounts[:-1], out=starts[1:])

    centers = np.repeat(q[good_rows], gcounts, axis=0)
    rel = pts - centers
    rel = np.round(rel / _NORMAL_QUANTUM) * _NORMAL_QUANTUM

    sums = np.add.reduceat(rel, starts, axis=0)
    means = sums / gcounts[:, None]
    outer = rel[:, :, None] * rel[:, None, :]
    second = np.add.reduceat(outer.reshape(-1, 9), starts, axis=0).reshape(-1, 3, 3)
    cov = second / gcounts[:, None, None] - means[:, :, None] * means[:, None, :]

    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.where(norms > 0, norms, 1.0)

    # Orientation convention: prefer upward; break horizontal ties toward the
    # tool tip so opposite hole walls get distinguishable features.
    flip = normals[:, 2] < 0.0
    horizontal = np.abs(normals[:, 2]) < 1e-8
    if tip_xy is not None and horizontal.any():
        to_tip = np.asarray(tip_xy, dtype=np.float64)[None, :] - q[good][:, :2]
        dots = np.sum(normals[:, :2] * to_tip, axis=1)
        flip = np.where(horizontal, dots < 0.0, flip)
    normals[flip] *= -1.0

    out[good] = normals
    return out
