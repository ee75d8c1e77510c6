"""Region-of-interest machinery.

The active region around the tool is the super-level set of a depth surface
g(x, y) expressed in the tool frame: particles whose height reaches g at
their (x, y) cell are allowed to move. A small U-Net predicts g from a
stack of tool-centered heightmaps plus an embedded control input; training
targets are built from simulation labels (velocity-thresholded movers with
connected-component noise filtering, combined with an inflated static
surface). A vertical-cylinder proposer and a heightmap-space dynamics
baseline live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.ndimage import maximum_filter
from scipy.spatial import cKDTree

from .config import RoiConfig, TrainConfig
from .core import ControlInput, Frame2D, Heightmap, N_PHASES, Vec3
from .graph import ParticleState
from .nn import Mlp, ParamStore, UNet, optimizer_step

CTRL_DIM = 5 + N_PHASES


class DataEmpty(ValueError):
    """A training routine received no samples."""


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_points(points: np.ndarray, crop: float, cells: int):
    """Max-height raster of tool-frame points over the square crop.

    Returns (grid, valid); grid holds -inf where no point landed.
    """
    grid = np.full((cells, cells), -np.inf, dtype=np.float64)
    if points.shape[0]:
        half = crop / 2.0
        cell = crop / cells
        ix = np.floor((points[:, 0] + half) / cell).astype(np.int64)
        iy = np.floor((points[:, 1] + half) / cell).astype(np.int64)
        ok = (ix >= 0) & (ix < cells) & (iy >= 0) & (iy < cells)
        np.maximum.at(grid, (iy[ok], ix[ok]), points[ok, 2])
    return grid, np.isfinite(grid)


def project_heightmap(state: ParticleState, frame: Frame2D,
                      cfg: RoiConfig | None = None) -> Heightmap:
    """Tool-centered crop heightmap of the current terrain particles."""
    cfg = cfg or RoiConfig()
    local = frame.to_local(state.positions[:state.n_terrain])
    grid, valid = project_points(local, cfg.crop, cfg.in_cells)
    half = cfg.crop / 2.0
    return Heightmap(origin=Vec3(-half, -half, 0.0),
                     cell_size=cfg.crop / cfg.in_cells,
                     values=np.where(valid, grid, 0.0), valid=valid)


def in_crop_mask(points: np.ndarray, crop: float) -> np.ndarray:
    half = crop / 2.0
    return (np.abs(points[:, 0]) <= half) & (np.abs(points[:, 1]) <= half)


def cell_of(points: np.ndarray, crop: float, cells: int):
    half = crop / 2.0
    cell = crop / cells
    ix = np.clip(np.floor((points[:, 0] + half) / cell).astype(np.int64), 0, cells - 1)
    iy = np.clip(np.floor((points[:, 1] + half) / cell).astype(np.int64), 0, cells - 1)
    return ix, iy


# ---------------------------------------------------------------------------
# Training targets
# ---------------------------------------------------------------------------

def moving_mask(cur: np.ndarray, nxt: np.ndarray, v_thresh: float,
                min_component: int, cc_radius: float) -> np.ndarray:
    """Velocity-thresholded movers with small connected components removed.

    Components are taken on the proximity graph (radius ``cc_radius``) of
    the moving particles only; isolated jitter does not survive.
    """
    disp = np.linalg.norm(nxt - cur, axis=1)
    moving = disp > v_thresh
    idx = np.nonzero(moving)[0]
    if idx.size == 0 or min_component <= 1:
        return moving
    pts = cur[idx]
    pairs = cKDTree(pts).query_pairs(cc_radius, output_type="ndarray")
    n = idx.size
    adj = sparse.coo_matrix(
        (np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_comp, labels = sparse.csgraph.connected_components(adj, directed=False)
    sizes = np.bincount(labels, minlength=n_comp)
    keep = sizes[labels] >= min_component
    out = np.zeros_like(moving)
    out[idx[keep]] = True
    return out


def make_roi_target(cur_local: np.ndarray, nxt_local: np.ndarray,
                    cfg: RoiConfig, cc_radius: float,
                    movers: np.ndarray | None = None):
    """Target depth surface for the proposer, in the tool frame.

    In cells where material moves, the surface is the movers' bottom capped
    by the inflated (dilated + rim) static surface, so the super-level set
    contains every mover plus a thin supporting skin. Cells with no moving
    particles are flagged empty; an all-static frame flags every cell and
    the hinge keeps the learned surface above all matter there.
    Returns (target, valid).
    """
    if movers is None:
        movers = moving_mask(cur_local, nxt_local, cfg.v_thresh,
                             cfg.min_component, cc_radius)
    cells = cfg.out_cells
    inside = in_crop_mask(cur_local, cfg.crop)

    static_grid, static_valid = project_points(
        cur_local[inside & ~movers], cfg.crop, cells)
    moving_pts = cur_local[inside & movers]
    bottom = np.full((cells, cells), np.inf)
    if moving_pts.shape[0]:
        ix, iy = cell_of(moving_pts, cfg.crop, cells)
        np.minimum.at(bottom, (iy, ix), moving_pts[:, 2])
    has_movers = np.isfinite(bottom)

    dilated = maximum_filter(np.where(static_valid, static_grid, -np.inf),
                             size=3, mode="constant", cval=-np.inf) + cfg.rim
    # A cell whose whole column moves has no static support; the movers'
    # bottom alone defines the surface there.
    cap = np.where(np.isfinite(dilated), dilated, np.inf)
    target = np.where(has_movers, np.minimum(bottom, cap), np.inf)
    valid = has_movers
    return np.where(valid, target, 0.0), valid


def surface_indices(cur_local: np.ndarray, surface: np.ndarray,
                    valid: np.ndarray, cfg: RoiConfig,
                    margin: float = 0.0) -> np.ndarray:
    """Particles in the super-level set of a depth surface (tool frame).

    Out-of-crop particles are excluded; invalid (empty) cells select
    nothing. Lowering the surface only ever adds indices.
    """
    inside = in_crop_mask(cur_local, cfg.crop)
    ix, iy = cell_of(cur_local, cfg.crop, cfg.out_cells)
    level = np.where(valid, surface, np.inf)[iy, ix] - margin
    return np.nonzero(inside & (cur_local[:, 2] >= level))[0]


# ---------------------------------------------------------------------------
# Learned proposer
# ---------------------------------------------------------------------------

def control_vector(u: ControlInput, frame: Frame2D) -> np.ndarray:
    """Control features in the tool frame: displacement, angle increments,
    one-hot phase."""
    d = frame.rotate_to_local(u.delta_pos.as_array())
    phase = np.zeros(N_PHASES)
    phase[int(u.phase) % N_PHASES] = 1.0
    return np.concatenate([d, [u.delta_yaw, u.delta_pitch], phase])


def proposer_input_stack(local_frames_terrain: np.ndarray,
                         cfg: RoiConfig) -> np.ndarray:
    """(H+2, 32, 32): cropped heightmaps of every frame plus the valid mask
    of the current frame; empty cells filled with the crop minimum."""
    maps = []
    valids = []
    for k in range(local_frames_terrain.shape[0]):
        grid, valid = project_points(local_frames_terrain[k], cfg.crop,
                                     cfg.in_cells)
        maps.append(grid)
        valids.append(valid)
    stack = np.stack(maps)
    finite = np.isfinite(stack)
    fill = float(stack[finite].min()) if finite.any() else 0.0
    filled = np.where(finite, stack, fill)
    return np.concatenate([filled, valids[-1][None].astype(np.float64)], axis=0)


@dataclass
class RoiProposer:
    """U-Net depth-surface predictor with a dense control embedding."""

    cfg: RoiConfig
    history: int
    store: ParamStore = field(default_factory=ParamStore)
    dtype: type = np.float32

    @property
    def c_in(self) -> int:
        return (self.history + 1) + 1 + self.cfg.ctrl_latent

    def init_weights(self, rng: np.random.Generator) -> None:
        self.ctrl = Mlp(self.store, "ctrl", [CTRL_DIM, 32, self.cfg.ctrl_latent],
                        rng, self.dtype)
        self.unet = UNet(self.store, "unet", c_in=self.c_in,
                         c_base=self.cfg.cnn_base, c_out=1, n_down=3, n_up=2,
                         rng=rng, dtype=self.dtype)

    def bind(self) -> None:
        rng = np.random.default_rng(0)
        view = Mlp(ParamStore(), "ctrl", [CTRL_DIM, 32, self.cfg.ctrl_latent],
                   rng, self.dtype)
        view.store = self.store
        self.ctrl = view
        unet = UNet(ParamStore(), "unet", c_in=self.c_in,
                    c_base=self.cfg.cnn_base, c_out=1, n_down=3, n_up=2,
                    rng=rng, dtype=self.dtype)
        unet.store = self.store
        self.unet = unet

    def input_stack(self, local_frames_terrain: np.ndarray) -> np.ndarray:
        return proposer_input_stack(local_frames_terrain, self.cfg)

    def forward_cached(self, stacks: np.ndarray, ctrls: np.ndarray):
        stacks = np.ascontiguousarray(stacks, dtype=self.dtype)
        ctrls = np.ascontiguousarray(ctrls, dtype=self.dtype)
        lat, ctrl_cache = self.ctrl.forward_cached(ctrls)
        b, _, h, w = stacks.shape
        lat_maps = np.broadcast_to(lat[:, :, None, None], (b, lat.shape[1], h, w))
        x = np.concatenate([stacks, lat_maps], axis=1)
        y, unet_cache = self.unet.forward_cached(x)
        return y[:, 0], {"ctrl": ctrl_cache, "unet": unet_cache,
                         "n_maps": stacks.shape[1]}

    def forward(self, stacks: np.ndarray, ctrls: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(stacks, ctrls)
        return y

    def backward(self, cache, dy: np.ndarray) -> None:
        dx = self.unet.backward(cache["unet"], dy[:, None].astype(self.dtype))
        dlat = dx[:, cache["n_maps"]:].sum(axis=(2, 3))
        self.ctrl.backward(cache["ctrl"], dlat)

    def propose(self, local_frames_terrain: np.ndarray, u_vec: np.ndarray,
                margin: float | None = None) -> np.ndarray:
        """Indices of current-frame terrain particles inside the proposed
        region."""
        stack = self.input_stack(local_frames_terrain)
        surface = self.forward(stack[None], u_vec[None])[0].astype(np.float64)
        m = self.cfg.margin if margin is None else margin
        return surface_indices(local_frames_terrain[-1], surface,
                               np.ones_like(surface, dtype=bool), self.cfg,
                               margin=m)


def proposer_loss_grad(pred: np.ndarray, target: np.ndarray,
                       valid: np.ndarray, hinge: float):
    """L1 on valid cells plus hinge-below-``hinge`` on empty cells.

    Returns (loss, dpred), both normalized per cell so batches of different
    valid coverage are comparable.
    """
    n = pred.size
    diff = pred - target
    l1 = np.where(valid, np.abs(diff), 0.0)
    hinge_gap = np.where(~valid, np.maximum(0.0, hinge - pred), 0.0)
    loss = float(l1.sum() + hinge_gap.sum()) / n
    dpred = np.where(valid, np.sign(diff), 0.0)
    dpred = dpred - np.where((~valid) & (hinge_gap > 0.0), 1.0, 0.0)
    return loss, dpred / n


def train_proposer(sample_fn, n_samples: int, proposer: RoiProposer,
                   train_cfg: TrainConfig, log=None):
    """Generic proposer training loop over ``sample_fn(rng) -> (stack, ctrl,
    target, valid)`` minibatches."""
    if n_samples <= 0:
        raise DataEmpty("no proposer training samples")
    rng = np.random.default_rng(train_cfg.seed)
    names = list(proposer.store.keys())
    curve = []
    for step in range(train_cfg.steps):
        batch = [sample_fn(rng) for _ in range(train_cfg.batch)]
        stacks = np.stack([b[0] for b in batch])
        ctrls = np.stack([b[1] for b in batch])
        targets = np.stack([b[2] for b in batch])
        valids = np.stack([b[3] for b in batch])
        pred, cache = proposer.forward_cached(stacks, ctrls)
        loss, dpred = proposer_loss_grad(pred.astype(np.float64), targets,
                                         valids, proposer.cfg.hinge)
        proposer.store.zero_grad()
        for p in proposer.store.values():
            p.ensure_grad()
        proposer.backward(cache, dpred)
        frac = step / max(1, train_cfg.steps - 1)
        lr = train_cfg.lr * (1.0 - (1.0 - train_cfg.lr_final_frac) * frac)
        optimizer_step(proposer.store, train_cfg.optimizer, lr,
                       train_cfg.momentum, names)
        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            curve.append((step, loss))
            if log:
                log(f"proposer step {step}: loss {loss:.5f}")
    return curve


def save_proposer(path, proposer: RoiProposer, extra_meta=None) -> None:
    from dataclasses import asdict

    from .trajio import save_weights

    meta = {"roi": asdict(proposer.cfg), "history": proposer.history}
    meta.update(extra_meta or {})
    save_weights(path, proposer.store, meta)


def load_proposer(path) -> RoiProposer:
    from .trajio import load_weights

    arrays, meta = load_weights(path)
    prop = RoiProposer(cfg=RoiConfig(**meta["roi"]), history=meta["history"])
    for name, value in arrays.items():
        prop.store.add(name, value)
    prop.bind()
    return prop


# ---------------------------------------------------------------------------
# Geometric baseline proposer
# ---------------------------------------------------------------------------

def geo_propose(terrain_positions: np.ndarray, tip_xy: np.ndarray,
                diameter: float) -> np.ndarray:
    """Vertical cylinder of the given diameter centered at the scoop tip."""
    if diameter <= 0:
        raise ValueError("cylinder diameter must be positive")
    d = np.linalg.norm(terrain_positions[:, :2] - tip_xy[None], axis=1)
    return np.nonzero(d <= diameter / 2.0)[0]


# ---------------------------------------------------------------------------
# 2D heightmap dynamics baseline
# ---------------------------------------------------------------------------

@dataclass
class HeightmapDynamics:
    """U-Net that autoregressively predicts the next scene heightmap.

    Inputs are past heightmaps on a fixed world-frame grid (empty cells
    filled and masked), a tool-tip occupancy channel, and the embedded
    control. Reuses the proposer's CNN engine at full output resolution.
    """

    cells: int
    cell_size: float
    origin_xy: tuple[float, float]
    history: int
    ctrl_latent: int = 16
    cnn_base: int = 8
    store: ParamStore = field(default_factory=ParamStore)
    dtype: type = np.float32

    @property
    def c_in(self) -> int:
        return (self.history + 1) + 2 + self.ctrl_latent

    def init_weights(self, rng: np.random.Generator) -> None:
        self.ctrl = Mlp(self.store, "ctrl", [CTRL_DIM, 32, self.ctrl_latent],
                        rng, self.dtype)
        self.unet = UNet(self.store, "unet", c_in=self.c_in,
                         c_base=self.cnn_base, c_out=1, n_down=3, n_up=3,
                         rng=rng, dtype=self.dtype)

    def grid_maps(self, positions_frames: np.ndarray):
        """Project (K, N, 3) world positions onto the model grid."""
        maps = []
        valids = []
        for k in range(positions_frames.shape[0]):
            pts = positions_frames[k]
            grid = np.full((self.cells, self.cells), -np.inf)
            ix = np.floor((pts[:, 0] - self.origin_xy[0]) / self.cell_size).astype(int)
            iy = np.floor((pts[:, 1] - self.origin_xy[1]) / self.cell_size).astype(int)
            ok = (ix >= 0) & (ix < self.cells) & (iy >= 0) & (iy < self.cells)
            np.maximum.at(grid, (iy[ok], ix[ok]), pts[ok, 2])
            maps.append(grid)
            valids.append(np.isfinite(grid))
        return np.stack(maps), np.stack(valids)

    def input_stack(self, maps: np.ndarray, valids: np.ndarray,
                    tip_xy: np.ndarray) -> np.ndarray:
        finite = np.isfinite(maps)
        fill = float(maps[finite].min()) if finite.any() else 0.0
        filled = np.where(finite, maps, fill)
        tip = np.zeros((self.cells, self.cells))
        ix = int((tip_xy[0] - self.origin_xy[0]) / self.cell_size)
        iy = int((tip_xy[1] - self.origin_xy[1]) / self.cell_size)
        if 0 <= ix < self.cells and 0 <= iy < self.cells:
            tip[iy, ix] = 1.0
        return np.concatenate([
            filled, valids[-1][None].astype(np.float64), tip[None]], axis=0)

    def forward_cached(self, stacks: np.ndarray, ctrls: np.ndarray):
        stacks = np.ascontiguousarray(stacks, dtype=self.dtype)
        ctrls = np.ascontiguousarray(ctrls, dtype=self.dtype)
        lat, ctrl_cache = self.ctrl.forward_cached(ctrls)
        b, _, h, w = stacks.shape
        lat_maps = np.broadcast_to(lat[:, :, None, None], (b, lat.shape[1], h, w))
        x = np.concatenate([stacks, lat_maps], axis=1)
        y, unet_cache = self.unet.forward_cached(x)
        return y[:, 0], {"ctrl": ctrl_cache, "unet": unet_cache,
                         "n_maps": stacks.shape[1]}

    def forward(self, stacks: np.ndarray, ctrls: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(stacks, ctrls)
        return y

    def backward(self, cache, dy: np.ndarray) -> None:
        dx = self.unet.backward(cache["unet"], dy[:, None].astype(self.dtype))
        dlat = dx[:, cache["n_maps"]:].sum(axis=(2, 3))
        self.ctrl.backward(cache["ctrl"], dlat)


def train_heightmap_dynamics(sample_fn, n_samples: int,
                             model: HeightmapDynamics,
                             train_cfg: TrainConfig, log=None):
    """Per-cell L1 regression onto the observed next heightmap."""
    if n_samples <= 0:
        raise DataEmpty("no heightmap training samples")
    rng = np.random.default_rng(train_cfg.seed)
    names = list(model.store.keys())
    curve = []
    for step in range(train_cfg.steps):
        batch = [sample_fn(rng) for _ in range(train_cfg.batch)]
        stacks = np.stack([b[0] for b in batch])
        ctrls = np.stack([b[1] for b in batch])
        targets = np.stack([b[2] for b in batch])
        valids = np.stack([b[3] for b in batch])
        pred, cache = model.forward_cached(stacks, ctrls)
        pred64 = pred.astype(np.float64)
        n_valid = max(1, int(valids.sum()))
        loss = float(np.where(valids, np.abs(pred64 - targets), 0.0).sum()) / n_valid
        dpred = np.where(valids, np.sign(pred64 - targets), 0.0) / n_valid
        model.store.zero_grad()
        for p in model.store.values():
            p.ensure_grad()
        model.backward(cache, dpred)
        frac = step / max(1, train_cfg.steps - 1)
        lr = train_cfg.lr * (1.0 - (1.0 - train_cfg.lr_final_frac) * frac)
        optimizer_step(model.store, train_cfg.optimizer, lr,
                       train_cfg.momentum, names)
        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            curve.append((step, loss))
            if log:
                log(f"heightmap model step {step}: loss {loss:.5f}")
    return curve
