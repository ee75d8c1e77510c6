import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regolith.core import (
    ControlInput, Frame2D, GridMismatch, Heightmap, Vec3, heightmap_l1,
    transform_from_frame, transform_to_frame, wrap_angle,
)

finite = st.floats(-50.0, 50.0, allow_nan=False, allow_infinity=False)


def test_transform_identity_frame():
    f = Frame2D(Vec3(0, 0, 0), 0.0)
    p = transform_to_frame(Vec3(1, 0, 0), f)
    assert (p.x, p.y, p.z) == (1.0, 0.0, 0.0)


def test_transform_quarter_turn():
    # Hand-derived: rotation by -pi/2 maps (1, 0) to (0, -1).
    f = Frame2D(Vec3(0, 0, 0), math.pi / 2)
    p = transform_to_frame(Vec3(1, 0, 0), f)
    assert abs(p.x) < 1e-12 and abs(p.y + 1.0) < 1e-12 and p.z == 0.0


def test_transform_pure_translation():
    f = Frame2D(Vec3(2, 3, 0), 0.0)
    p = transform_to_frame(Vec3(2, 3, 4), f)
    assert abs(p.x) < 1e-12 and abs(p.y) < 1e-12 and abs(p.z - 4.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(finite, finite, finite, finite, finite, st.floats(-10, 10, allow_nan=False))
def test_transform_round_trip(x, y, z, ox, oy, yaw):
    f = Frame2D(Vec3(ox, oy, 0.3), yaw)
    p = Vec3(x, y, z)
    q = transform_from_frame(transform_to_frame(p, f), f)
    assert abs(q.x - x) <= 1e-9 and abs(q.y - y) <= 1e-9 and abs(q.z - z) <= 1e-9


def test_wrap_angle_range():
    for theta in np.linspace(-12.0, 12.0, 400):
        w = wrap_angle(float(theta))
        assert -math.pi < w <= math.pi
        assert abs(math.sin(w) - math.sin(theta)) < 1e-12


def _hm(values, valid=None, cell=0.1):
    vals = np.asarray(values, dtype=float)
    return Heightmap(Vec3(0, 0, 0), cell, vals,
                     np.ones(vals.shape, bool) if valid is None else np.asarray(valid))


def test_heightmap_l1_identical_is_zero():
    a = _hm([[0.1, 0.2], [0.3, 0.4]])
    assert heightmap_l1(a, a) == 0.0


def test_heightmap_l1_constant_offset():
    a = _hm([[0.1, 0.1], [0.1, 0.1]])
    b = _hm([[0.0, 0.0], [0.0, 0.0]])
    assert abs(heightmap_l1(a, b) - 0.1) < 1e-12


def test_heightmap_l1_respects_empty_mask():
    # Hand computation: only the first cell is valid in both maps.
    a = _hm([[0.0, 0.2]])
    b = _hm([[0.1, 0.0]], valid=[[True, False]])
    assert abs(heightmap_l1(a, b) - 0.1) < 1e-12


def test_heightmap_l1_grid_mismatch():
    a = _hm([[0.0, 0.2]])
    b = _hm([[0.0], [0.2]])
    with pytest.raises(GridMismatch):
        heightmap_l1(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_heightmap_l1_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    vals_a = rng.normal(size=(3, 4))
    vals_b = rng.normal(size=(3, 4))
    mask_a = rng.random((3, 4)) > 0.2
    mask_b = rng.random((3, 4)) > 0.2
    if not (mask_a & mask_b).any():
        mask_a[0, 0] = mask_b[0, 0] = True
    a = _hm(vals_a, mask_a)
    b = _hm(vals_b, mask_b)
    d = heightmap_l1(a, b)
    assert d >= 0.0
    assert abs(d - heightmap_l1(b, a)) < 1e-12
    # zero iff equal on the shared mask
    both = mask_a & mask_b
    if d == 0.0:
        assert np.allclose(vals_a[both], vals_b[both])


def test_heightmap_json_round_trip():
    a = _hm([[0.1, 0.2], [0.3, 0.4]], valid=[[True, False], [True, True]])
    b = Heightmap.from_json(a.to_json())
    assert a.same_grid(b)
    assert np.array_equal(a.valid, b.valid)
    assert np.allclose(a.values[a.valid], b.values[b.valid])


def test_control_input_validation():
    u = ControlInput(Vec3(0.01, 0, 0))
    u.validate(0.015)
    with pytest.raises(ValueError):
        ControlInput(Vec3(0.05, 0, 0)).validate(0.015)
    with pytest.raises(ValueError):
        Vec3(float("nan"), 0, 0)
