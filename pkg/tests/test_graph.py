import numpy as np
import pytest

from regolith.graph import (
    CLASS_TERRAIN, CLASS_TOOL, HistoryIncomplete, ParticleState,
    build_knn_graph, edge_feature_dim, edge_features, estimate_normals,
    make_scene_graph, node_feature_dim, node_features, segment_sum,
    static_history,
)


def _state(positions, history=None, classes=None, impulses=None, h=3):
    p = np.asarray(positions, dtype=float)
    n = p.shape[0]
    return ParticleState(
        positions=p,
        history=static_history(p, h) if history is None else np.asarray(history, float),
        classes=np.zeros(n, np.uint8) if classes is None else np.asarray(classes, np.uint8),
        impulses=np.zeros((n, 3)) if impulses is None else np.asarray(impulses, float),
    )


def test_knn_single_particle_no_edges():
    src, dst = build_knn_graph(np.zeros((1, 3)), k=4, radius=1.0)
    assert src.size == 0 and dst.size == 0


def test_knn_equilateral_triangle():
    # Unit triangle, k=2, radius 1.5: all pairs connected both ways -> 6 edges.
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.5, np.sqrt(3) / 2, 0]])
    src, dst = build_knn_graph(pts, k=2, radius=1.5)
    assert src.size == 6
    pairs = set(zip(src.tolist(), dst.tolist()))
    assert pairs == {(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)}


def test_knn_radius_below_min_distance():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    src, dst = build_knn_graph(pts, k=2, radius=1e-12)
    assert src.size == 0


def test_knn_deterministic_and_translation_invariant_topology():
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(50, 3))
    a = build_knn_graph(pts, k=4, radius=0.4)
    b = build_knn_graph(pts + np.array([100.0, -3.0, 7.0]), k=4, radius=0.4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_knn_symmetric_closure():
    # The far satellite 3 is nearest-neighbor *of* nobody, but its own knn
    # edge (to 1) must appear in both directions.
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.0, 0.1, 0], [1.0, 0, 0]])
    src, dst = build_knn_graph(pts, k=1, radius=2.0)
    pairs = set(zip(src.tolist(), dst.tolist()))
    assert (3, 1) in pairs and (1, 3) in pairs


def test_node_features_static_particles():
    st = _state([[0.0, 0, 0], [1.0, 0, 0]])
    embed = np.zeros((2, 8))
    nf = node_features(st, np.zeros((2, 3)), embed)
    assert nf.shape == (2, node_feature_dim(3, 8))
    assert np.allclose(nf[:, :9], 0.0)


def test_node_features_constant_velocity():
    # Per-step displacement (0.01, 0, 0) over H=3 frames.
    cur = np.array([[0.03, 0.0, 0.0]])
    hist = np.array([[[0.0, 0, 0]], [[0.01, 0, 0]], [[0.02, 0, 0]]])
    st = _state(cur, history=hist)
    nf = node_features(st, np.zeros((1, 3)), np.zeros((2, 8)))
    assert np.allclose(nf[0, :9].reshape(3, 3), [[0.01, 0, 0]] * 3)


def test_terrain_impulse_block_zero_tool_nonzero():
    imp = np.array([[0.0, 0, 0], [0.005, 0, 0]])
    st = _state([[0.0, 0, 0], [1.0, 0, 0]], classes=[CLASS_TERRAIN, CLASS_TOOL],
                impulses=imp)
    embed = np.arange(16, dtype=float).reshape(2, 8)
    nf = node_features(st, np.zeros((2, 3)), embed)
    assert np.allclose(nf[0, 9:12], 0.0)
    assert np.allclose(nf[1, 9:12], [0.005, 0, 0])
    assert np.allclose(nf[0, 12:20], embed[0])
    assert np.allclose(nf[1, 12:20], embed[1])


def test_edge_features_coincident_and_hand_case():
    embed = np.arange(16, dtype=float).reshape(2, 8)
    st = _state([[1.0, 0, 0], [0.0, 0, 0]], classes=[0, 1], h=1)
    src = np.array([0])
    dst = np.array([1])
    ef = edge_features(st, src, dst, embed)
    assert ef.shape == (1, edge_feature_dim(1, 8))
    assert np.allclose(ef[0, :6], [1, 0, 0, 1, 0, 0])
    assert np.allclose(ef[0, 6:14], embed[0])
    assert np.allclose(ef[0, 14:], embed[1])
    same = _state([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]], h=1)
    ef2 = edge_features(same, src, dst, np.zeros((2, 8)))
    assert np.allclose(ef2, 0.0)


def test_features_translation_invariant():
    rng = np.random.default_rng(3)
    pts = rng.uniform(size=(10, 3))
    hist = np.stack([pts - 0.01 * (i + 1) for i in range(3)][::-1])
    st = _state(pts, history=hist)
    shifted = st.shifted([100.0, -50.0, 1000.0])
    embed = rng.normal(size=(2, 8))
    normals = rng.normal(size=(10, 3))
    src, dst = build_knn_graph(pts, 3, 0.8)
    assert np.allclose(node_features(st, normals, embed),
                       node_features(shifted, normals, embed), atol=1e-9)
    assert np.allclose(edge_features(st, src, dst, embed),
                       edge_features(shifted, src, dst, embed), atol=1e-9)


def test_node_features_requires_history():
    with pytest.raises(HistoryIncomplete):
        ParticleState(positions=np.zeros((2, 3)), history=np.zeros((3, 5, 3)),
                      classes=np.zeros(2, np.uint8), impulses=np.zeros((2, 3)))


def test_normals_planar_patch_z():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-1, 1, 60), rng.uniform(-1, 1, 60), np.zeros(60)])
    n = estimate_normals(pts, pts, radius=0.8)
    assert np.allclose(n, [0.0, 0.0, 1.0], atol=1e-6)


def test_normals_vertical_patch_oriented_to_tip():
    rng = np.random.default_rng(1)
    pts = np.column_stack([np.zeros(60), rng.uniform(-1, 1, 60), rng.uniform(-1, 1, 60)])
    n = estimate_normals(pts, pts, radius=0.8, tip_xy=np.array([5.0, 0.0]))
    # PCA of an x=0 plane gives +-x; the tip at +x fixes the sign.
    assert np.allclose(n[:, 0], 1.0, atol=1e-6)
    n2 = estimate_normals(pts, pts, radius=0.8, tip_xy=np.array([-5.0, 0.0]))
    assert np.allclose(n2[:, 0], -1.0, atol=1e-6)


def test_normals_sphere_radial_within_ten_degrees():
    rng = np.random.default_rng(2)
    raw = rng.normal(size=(2500, 3))
    pts = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    n = estimate_normals(pts, pts, radius=0.25)
    radial = pts.copy()
    cosang = np.abs(np.sum(n * radial, axis=1))
    angles = np.degrees(np.arccos(np.clip(cosang, -1, 1)))
    assert np.percentile(angles, 95) < 10.0


def test_normals_fallback_and_unit_norm():
    pts = np.array([[0.0, 0, 0], [10.0, 0, 0]])
    n = estimate_normals(pts, pts, radius=0.1)
    assert np.allclose(n, [[0, 0, 1], [0, 0, 1]])
    rng = np.random.default_rng(4)
    cloud = rng.uniform(size=(200, 3)) * 0.1
    n = estimate_normals(cloud, cloud, radius=0.05)
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
    assert np.all(n[:, 2] >= -1e-12)


def test_segment_sum_matches_naive():
    rng = np.random.default_rng(5)
    n, m = 7, 40
    dst = np.sort(rng.integers(0, n, m))
    vals = rng.normal(size=(m, 4))
    uniq, starts = np.unique(dst, return_index=True)
    got = segment_sum(vals, uniq, starts, n)
    want = np.zeros((n, 4))
    for row, d in enumerate(dst):
        want[d] += vals[row]
    assert np.allclose(got, want)


def test_scene_graph_indexing():
    pts = np.random.default_rng(6).uniform(size=(30, 3))
    src, dst = build_knn_graph(pts, 4, 0.6)
    g = make_scene_graph(30, np.zeros((30, 2)), src, dst, np.zeros((src.size, 2)))
    assert np.all(np.diff(g.dst) >= 0)
    resorted = g.src[g.src_perm]
    assert np.all(np.diff(resorted) >= 0)
    assert not np.any(g.src == g.dst)
