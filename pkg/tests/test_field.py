import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fblab.errors import DomainError, ParameterError
from fblab.field import (Ball, Grid, ScalarField, ball_integral, circle_integral, export_pgm,
                         gradient, load_field, rescale, sample, sample_gradient, save_field,
                         sphere_nodes)

G64 = Grid.square(-1.0, 1.0, 64)
coef = st.floats(-3, 3, allow_nan=False)


def test_grid_square_has_node_on_axes():
    g = Grid.square(-1.0, 1.0, 512)
    assert g.dims == (513, 513)
    assert g.h == pytest.approx(2 / 512)
    assert np.any(g.axis(1) == 0.0)
    assert g.upper == pytest.approx((1.0, 1.0))


def test_grid_rejects_bad_spacing():
    with pytest.raises(ParameterError):
        Grid((0.0, 0.0), -1.0, (4, 4))


def test_nearest_index_and_contains():
    assert G64.nearest_index((0.0, 0.0)) == (32, 32)
    assert G64.contains(np.array([0.99, -1.0]))
    assert not G64.contains(np.array([1.01, 0.0]))
    assert G64.contains_ball(Ball((0.0, 0.0), 0.5))
    assert not G64.contains_ball(Ball((0.9, 0.0), 0.2))


@settings(max_examples=40, deadline=None)
@given(coef, coef, coef, coef, st.floats(-0.99, 0.99), st.floats(-0.99, 0.99))
def test_sample_reproduces_bilinear_functions(a, b, c, d, x, y):
    f = ScalarField.from_function(G64, lambda p: a + b * p[..., 0] + c * p[..., 1]
                                  + d * p[..., 0] * p[..., 1])
    exact = a + b * x + c * y + d * x * y
    assert sample(f, np.array([[x, y]]))[0] == pytest.approx(exact, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(coef, coef, st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
def test_sample_gradient_of_affine_is_exact(b, c, x, y):
    f = ScalarField.from_function(G64, lambda p: b * p[..., 0] + c * p[..., 1])
    gr = sample_gradient(f, np.array([[x, y]]))[0]
    assert gr == pytest.approx([b, c], abs=1e-10)


def test_nodal_gradient_of_quadratic():
    f = ScalarField.from_function(G64, lambda p: p[..., 0] ** 2)
    g = gradient(f)
    i = G64.nearest_index((0.5, 0.0))
    assert g[i][0] == pytest.approx(1.0, abs=1e-12)


def test_sample_outside_raises():
    f = ScalarField(G64, np.zeros(G64.dims))
    with pytest.raises(DomainError):
        sample(f, np.array([[2.0, 0.0]]))


def test_sphere_nodes_weights_sum_to_circumference():
    pts, dirs, w = sphere_nodes(Ball((0.1, -0.2), 0.3), 96)
    assert w.sum() == pytest.approx(2 * math.pi * 0.3)
    assert np.linalg.norm(pts - np.array([0.1, -0.2]), axis=-1) == pytest.approx(0.3)
    assert np.linalg.norm(dirs, axis=-1) == pytest.approx(1.0)


def test_circle_integral_of_x2_squared():
    # closed form: int_{|x|=r} x2^2 = pi r^3
    f = ScalarField.from_function(G64, lambda p: p[..., 1] ** 2)
    val = circle_integral(lambda p: p[..., 1] ** 2, Ball((0.0, 0.0), 0.5), grid=G64)
    assert val == pytest.approx(math.pi * 0.125, rel=1e-10)
    # bilinear interpolation of x2^2 overshoots by h^2/6 on average
    h = G64.spacing
    expected = math.pi * 0.125 + 2 * math.pi * 0.5 * h * h / 6
    assert circle_integral(f, Ball((0.0, 0.0), 0.5)) == pytest.approx(expected, rel=2e-4)


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4), st.floats(0.05, 0.5))
def test_ball_integral_area(cx, cy, r):
    g = Grid.square(-1.0, 1.0, 256)
    area = ball_integral(lambda p: np.ones(p.shape[:-1]), Ball((cx, cy), r), grid=g)
    assert area == pytest.approx(math.pi * r * r, rel=2e-3)


def test_ball_integral_of_scalar_field_is_second_moment():
    g = Grid.square(-1.0, 1.0, 256)
    f = ScalarField.from_function(g, lambda p: p[..., 0] ** 2 + p[..., 1] ** 2)
    assert ball_integral(f, Ball((0.0, 0.0), 0.5)) == pytest.approx(math.pi * 0.5**4 / 2, rel=1e-3)


def test_ball_integral_outside_grid_raises():
    with pytest.raises(DomainError):
        ball_integral(lambda p: np.ones(p.shape[:-1]), Ball((0.9, 0.0), 0.3), grid=G64)


def test_rescale_of_homogeneous_field_is_invariant():
    f = ScalarField.from_function(G64, lambda p: np.maximum(p[..., 1], 0.0))
    out = Grid.square(-1.0, 1.0, 32)
    v = rescale(f, (0.0, 0.0), 0.5, out)
    assert np.max(np.abs(v.values - np.maximum(out.mesh()[1], 0.0))) < 1e-12


def test_rescale_rejects_bad_scale_and_pullback():
    f = ScalarField(G64, np.zeros(G64.dims))
    with pytest.raises(ParameterError):
        rescale(f, (0.0, 0.0), 0.0, G64)
    with pytest.raises(DomainError):
        rescale(f, (0.8, 0.0), 0.5, G64)


def test_save_load_roundtrip(tmp_path):
    f = ScalarField.from_function(G64, lambda p: np.sin(p[..., 0]) * p[..., 1])
    js, raw = save_field(f, tmp_path / "u")
    assert raw.stat().st_size == 8 * 65 * 65
    back = load_field(tmp_path / "u")
    assert back.grid == f.grid
    assert np.array_equal(back.values, f.values)


def test_load_rejects_truncated_raw(tmp_path):
    f = ScalarField(G64, np.zeros(G64.dims))
    _, raw = save_field(f, tmp_path / "u")
    raw.write_bytes(raw.read_bytes()[:-8])
    with pytest.raises(ParameterError):
        load_field(tmp_path / "u")


def test_export_pgm_header_and_orientation(tmp_path):
    g = Grid.square(0.0, 1.0, 3)
    f = ScalarField.from_function(g, lambda p: p[..., 1])
    data = export_pgm(f, tmp_path / "u.pgm").read_bytes()
    header = b"P5\n4 4\n255\n"
    assert data.startswith(header)
    img = np.frombuffer(data[len(header):], dtype=np.uint8).reshape(4, 4)
    assert np.all(img[0] == 255) and np.all(img[-1] == 0)
