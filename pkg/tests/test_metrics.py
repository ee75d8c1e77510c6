import itertools

import numpy as np
import pytest

from regolith.metrics import (
    Empty, SizeMismatch, chamfer, chamfer_grad, emd, emd_grad, emd_matching,
)


def brute_force_emd(a, b):
    best = np.inf
    for perm in itertools.permutations(range(len(b))):
        cost = np.mean(np.linalg.norm(a - b[list(perm)], axis=1))
        best = min(best, cost)
    return best


def test_chamfer_self_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=(rng.integers(1, 40), 3))
        assert chamfer(x, x) == 0.0


def test_chamfer_two_points():
    a = np.array([[0.0, 0, 0]])
    b = np.array([[1.0, 0, 0]])
    assert abs(chamfer(a, b) - 2.0) < 1e-12


def test_chamfer_duplicate_never_increases_forward_term():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(10, 3))
    b = rng.normal(size=(12, 3))
    d_ab = np.linalg.norm(a[:, None] - b[None], axis=2).min(axis=1) ** 2
    forward = d_ab.mean()
    a2 = np.concatenate([a, a[:1]])
    d_ab2 = np.linalg.norm(a2[:, None] - b[None], axis=2).min(axis=1) ** 2
    assert d_ab2.mean() <= forward + 1e-12


def test_emd_self_zero_and_size_mismatch():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 3))
    assert emd(x, x) < 1e-12
    with pytest.raises(SizeMismatch):
        emd(x, x[:4])
    with pytest.raises(Empty):
        emd(np.zeros((0, 3)), np.zeros((0, 3)))


def test_emd_prefers_parallel_matching():
    # Two points each; the crossing matching costs more than the parallel one.
    a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    b = np.array([[0.0, 1, 0], [1.0, 1, 0]])
    assert abs(emd(a, b) - 1.0) < 1e-12


def test_emd_matches_brute_force_small():
    rng = np.random.default_rng(3)
    for _ in range(40):
        n = int(rng.integers(2, 8))
        a = rng.normal(size=(n, 3))
        b = rng.normal(size=(n, 3))
        assert abs(emd(a, b) - brute_force_emd(a, b)) < 1e-9


def test_emd_auction_close_to_hungarian():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(60, 3)) * 0.1
    b = rng.uniform(size=(60, 3)) * 0.1
    exact = emd(a, b)                      # Hungarian path
    approx = emd(a, b, exact_limit=8)      # force the auction path
    assert approx >= exact - 1e-9
    assert approx - exact <= 1e-4


def test_emd_triangle_inequality_small_sets():
    rng = np.random.default_rng(5)
    for _ in range(15):
        n = int(rng.integers(2, 6))
        x = rng.normal(size=(n, 3))
        y = rng.normal(size=(n, 3))
        z = rng.normal(size=(n, 3))
        assert emd(x, z) <= emd(x, y) + emd(y, z) + 1e-9


def test_chamfer_grad_matches_finite_differences():
    rng = np.random.default_rng(6)
    pred = rng.normal(size=(8, 3))
    obs = rng.normal(size=(9, 3))
    _, grad = chamfer_grad(pred, obs)
    eps = 1e-6
    for _ in range(10):
        i = rng.integers(8)
        j = rng.integers(3)
        pred[i, j] += eps
        hi = chamfer(pred, obs)
        pred[i, j] -= 2 * eps
        lo = chamfer(pred, obs)
        pred[i, j] += eps
        num = (hi - lo) / (2 * eps)
        assert abs(num - grad[i, j]) < 1e-5


def test_emd_grad_matches_finite_differences_fixed_matching():
    rng = np.random.default_rng(7)
    pred = rng.normal(size=(6, 3))
    obs = rng.normal(size=(6, 3))
    val, grad = emd_grad(pred, obs)
    cols = emd_matching(pred, obs)
    eps = 1e-7

    def fixed_val(p):
        return float(np.mean(np.linalg.norm(p - obs[cols], axis=1)))

    for _ in range(8):
        i = rng.integers(6)
        j = rng.integers(3)
        pred[i, j] += eps
        hi = fixed_val(pred)
        pred[i, j] -= 2 * eps
        lo = fixed_val(pred)
        pred[i, j] += eps
        num = (hi - lo) / (2 * eps)
        assert abs(num - grad[i, j]) < 1e-5
