import numpy as np
import pytest

from regolith.config import RoiConfig, TrainConfig
from regolith.core import ControlInput, Frame2D, Vec3
from regolith.graph import ParticleState, static_history
from regolith.roi import (
    DataEmpty, RoiProposer, control_vector, geo_propose, make_roi_target,
    moving_mask, project_heightmap, project_points, proposer_input_stack,
    surface_indices, train_proposer,
)

CFG = RoiConfig()


def test_project_empty_crop():
    pts = np.zeros((0, 3))
    grid, valid = project_points(pts, CFG.crop, CFG.in_cells)
    assert not valid.any()


def test_project_single_particle_cell():
    cell = CFG.crop / CFG.in_cells
    # place the particle at the center of cell (ix=17, iy=16)
    x = -CFG.crop / 2 + 17.5 * cell
    y = -CFG.crop / 2 + 16.5 * cell
    pts = np.array([[x, y, 0.03]])
    grid, valid = project_points(pts, CFG.crop, CFG.in_cells)
    assert valid.sum() == 1
    assert valid[16, 17]
    assert grid[16, 17] == 0.03


def test_project_max_semantics():
    pts = np.array([[0.0, 0.0, 0.03]])
    both = np.array([[0.0, 0.0, 0.03], [0.0, 0.0, 0.01]])
    a, _ = project_points(pts, CFG.crop, CFG.in_cells)
    b, _ = project_points(both, CFG.crop, CFG.in_cells)
    assert np.array_equal(np.nan_to_num(a, neginf=0.0),
                          np.nan_to_num(b, neginf=0.0))


def test_project_heightmap_contract():
    pts = np.array([[0.35, 0.2, 0.05], [0.36, 0.2, 0.02]])
    state = ParticleState(positions=pts, history=static_history(pts, 1),
                          classes=np.zeros(2, np.uint8), impulses=np.zeros((2, 3)))
    frame = Frame2D(Vec3(0.35, 0.2, 0.0), 0.0)
    hm = project_heightmap(state, frame, CFG)
    assert hm.values.shape == (32, 32)
    assert hm.valid.sum() == 1


def test_all_static_flags_every_cell_empty():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.15, 0.15, (200, 3))
    pts[:, 2] = rng.uniform(0.0, 0.04, 200)
    target, valid = make_roi_target(pts, pts.copy(), CFG, 0.03)
    assert not valid.any()


def test_two_layer_column_target_is_interface():
    # Bottom layer static, top layer moves: the target in that cell is the
    # moving layer's bottom height (capped by the inflated static surface).
    rng = np.random.default_rng(1)
    xs = np.linspace(-0.05, 0.05, 8)
    grid = np.stack(np.meshgrid(xs, xs, indexing="ij"), -1).reshape(-1, 2)
    bottom = np.column_stack([grid, np.full(64, 0.01)])
    top = np.column_stack([grid, np.full(64, 0.025)])
    cur = np.concatenate([bottom, top])
    nxt = cur.copy()
    nxt[64:, 0] += 0.01  # top layer slides
    target, valid = make_roi_target(cur, nxt, CFG, 0.05)
    center = valid[7:9, 7:9]
    assert center.all()
    assert np.allclose(target[7:9, 7:9], 0.025, atol=1e-6)


def test_isolated_mover_removed_by_component_filter():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.1, 0.1, (120, 3))
    pts[:, 2] = rng.uniform(0.0, 0.03, 120)
    nxt = pts.copy()
    nxt[5] += 0.02  # a single spurious mover far from any other mover
    movers = moving_mask(pts, nxt, CFG.v_thresh, CFG.min_component, 0.02)
    assert not movers.any()
    # A compact blob of five movers survives.
    blob = np.argsort(np.linalg.norm(pts[:, :2] - pts[5, :2], axis=1))[:5]
    nxt2 = pts.copy()
    nxt2[blob] += 0.02
    movers2 = moving_mask(pts, nxt2, CFG.v_thresh, CFG.min_component, 0.2)
    assert movers2.sum() == 5


def test_movers_lie_on_or_above_target_surface():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.15, 0.15, (300, 3))
    pts[:, 2] = rng.uniform(0.0, 0.05, 300)
    nxt = pts.copy()
    blob = np.argsort(np.linalg.norm(pts[:, :2] - np.array([0.02, 0.0]), axis=1))[:40]
    nxt[blob] += rng.normal(0.0, 0.004, (40, 3)) + np.array([0.006, 0, 0])
    movers = moving_mask(pts, nxt, CFG.v_thresh, CFG.min_component, 0.05)
    target, valid = make_roi_target(pts, nxt, CFG, 0.05, movers=movers)
    idx = surface_indices(pts, target, valid, CFG)
    assert np.isin(np.nonzero(movers)[0], idx).all()


def test_surface_selection_monotone_in_surface():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-0.15, 0.15, (200, 3))
    pts[:, 2] = rng.uniform(0.0, 0.05, 200)
    surface = rng.uniform(0.0, 0.05, (CFG.out_cells, CFG.out_cells))
    valid = np.ones_like(surface, dtype=bool)
    base = set(surface_indices(pts, surface, valid, CFG).tolist())
    lower = surface.copy()
    lower[3:9, 4:10] -= 0.02
    more = set(surface_indices(pts, lower, valid, CFG).tolist())
    assert base <= more


def test_surface_extremes():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-0.15, 0.15, (100, 3))
    pts[:, 2] = rng.uniform(0.0, 0.05, 100)
    high = np.full((CFG.out_cells, CFG.out_cells), 10.0)
    low = np.full_like(high, -10.0)
    valid = np.ones_like(high, dtype=bool)
    assert surface_indices(pts, high, valid, CFG).size == 0
    from regolith.roi import in_crop_mask
    assert (surface_indices(pts, low, valid, CFG).size
            == in_crop_mask(pts, CFG.crop).sum())


def test_geo_propose_membership_and_nesting():
    pts = np.array([[0.05, 0.0, 0.0], [0.07, 0.0, 0.01], [3.0, 0.0, 0.0]])
    tip = np.zeros(2)
    inside = geo_propose(pts, tip, 0.12)
    assert 0 in inside and 1 not in inside
    small = set(geo_propose(pts, tip, 0.06).tolist())
    large = set(geo_propose(pts, tip, 0.18).tolist())
    assert small <= large
    everything = geo_propose(pts, tip, 1e9)
    assert everything.size == 3
    with pytest.raises(ValueError):
        geo_propose(pts, tip, 0.0)


def test_control_vector_rotates_into_frame():
    u = ControlInput(Vec3(0.01, 0.0, 0.0), 0.02, -0.01, 2)
    frame = Frame2D(Vec3(0, 0, 0), np.pi / 2)
    v = control_vector(u, frame)
    assert np.allclose(v[:3], [0.0, -0.01, 0.0], atol=1e-12)
    assert v[3] == 0.02 and v[4] == -0.01
    assert v[5 + 2] == 1.0  # phase one-hot


def test_proposer_trains_to_constant_target():
    cfg = RoiConfig(cnn_base=4)
    prop = RoiProposer(cfg, history=1)
    prop.init_weights(np.random.default_rng(0))

    rng0 = np.random.default_rng(1)
    base_stack = rng0.normal(size=(3, 32, 32)) * 0.01
    valid = np.zeros((16, 16), dtype=bool)
    valid[4:12, 4:12] = True
    target = np.where(valid, 0.1, 0.0)

    def sample_fn(rng):
        stack = base_stack + rng.normal(0, 0.001, base_stack.shape)
        ctrl = rng.normal(0, 0.01, 10)
        return stack, ctrl, target, valid

    tc = TrainConfig(steps=1500, batch=4, lr=3e-3, log_every=500)
    train_proposer(sample_fn, 100, prop, tc)
    pred = prop.forward(base_stack[None].astype(np.float32),
                        np.zeros((1, 10), np.float32))[0]
    err = np.abs(pred[valid] - 0.1)
    assert err.mean() < 0.01
    # Empty cells satisfy the hinge: predictions pushed up to the margin.
    hinge_gap = np.maximum(0.0, cfg.hinge - pred[~valid])
    assert hinge_gap.mean() < 0.02
    assert pred[~valid].mean() > 0.45
    with pytest.raises(DataEmpty):
        train_proposer(sample_fn, 0, prop, tc)


def test_heightmap_dynamics_static_identity():
    from regolith.roi import HeightmapDynamics, train_heightmap_dynamics

    model = HeightmapDynamics(cells=32, cell_size=0.0125,
                              origin_xy=(-0.2, -0.2), history=1, cnn_base=4)
    model.init_weights(np.random.default_rng(0))
    rng0 = np.random.default_rng(1)
    pts = np.column_stack([rng0.uniform(-0.18, 0.18, (400, 2)),
                           rng0.uniform(0.0, 0.04, 400)])
    maps, valids = model.grid_maps(np.repeat(pts[None], 2, axis=0))
    stack = model.input_stack(maps, valids, np.zeros(2))
    target = np.where(valids[-1], maps[-1], 0.0)

    def sample_fn(rng):
        return stack, rng.normal(0, 0.002, 10), target, valids[-1]

    tc = TrainConfig(steps=900, batch=4, lr=3e-3, log_every=300)
    train_heightmap_dynamics(sample_fn, 10, model, tc)
    pred = model.forward(stack[None].astype(np.float32),
                         np.zeros((1, 10), np.float32))[0]
    l1 = np.abs(pred[valids[-1]] - target[valids[-1]]).mean()
    assert l1 < 1e-3


def test_proposer_input_stack_layout():
    rng = np.random.default_rng(6)
    frames = rng.uniform(-0.15, 0.15, (4, 50, 3))
    frames[..., 2] = rng.uniform(0.0, 0.05, (4, 50))
    stack = proposer_input_stack(frames, CFG)
    assert stack.shape == (5, 32, 32)      # H+1 maps + validity mask
    assert set(np.unique(stack[-1])) <= {0.0, 1.0}
    assert np.isfinite(stack).all()
