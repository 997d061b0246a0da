import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fblab.errors import DomainError, ParameterError, ResolutionError
from fblab.field import Grid, ScalarField
from fblab.geometry import (ahlfors_ratio, audit_points, corkscrew, extract_boundary, fb_distance,
                            harnack_chain, hausdorff_flatness, replacement_comparability,
                            verify_almost_min)
from fblab.problem import AlmostMinParams, WeightField

G = Grid.square(-1.0, 1.0, 128)
R = 0.6


def disk_field(g=G, c=(0.05, -0.03), radius=R):
    return ScalarField.from_function(g, lambda p: np.maximum(radius - np.linalg.norm(p - c, axis=-1), 0.0))


def half_plane(g=G, e=(0.0, 1.0)):
    e = np.asarray(e) / np.linalg.norm(e)
    return ScalarField.from_function(g, lambda p: np.maximum(p @ e, 0.0))


@pytest.fixture(scope="module")
def disk():
    u = disk_field()
    return u, extract_boundary(u)


def test_circle_extraction(disk):
    _, fb = disk
    c = np.array([0.05, -0.03])
    v = fb.vertices()
    assert len(fb.polylines) == 1 and fb.polylines[0].closed
    assert np.max(np.abs(np.linalg.norm(v - c, axis=-1) - R)) < 1e-3
    assert fb.length() == pytest.approx(2 * math.pi * R, rel=1e-3)


def test_normals_point_into_positive_set(disk):
    _, fb = disk
    c = np.array([0.05, -0.03])
    inward = (c - fb.vertices()) / R
    cos = np.sum(fb.normals() * inward, axis=-1)
    assert cos.min() > math.cos(math.radians(2.5))


def test_fb_distance_to_circle(disk):
    _, fb = disk
    pts = np.array([[0.05, -0.03], [0.5, 0.5], [-0.2, 0.1]])
    exact = np.abs(np.linalg.norm(pts - [0.05, -0.03], axis=-1) - R)
    assert fb_distance(fb, pts) == pytest.approx(exact, abs=2e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 128), st.integers(0, 128))
def test_node_distance_is_tight_upper_bound(i, j):
    u = disk_field(Grid.square(-1.0, 1.0, 128))
    fb = _disk_fb()
    p = G.points()[i, j]
    exact = float(fb_distance(fb, p[None])[0])
    nd = fb.node_distance[i, j]
    assert exact - 1e-12 <= nd <= exact + G.spacing / 8


_CACHE = {}


def _disk_fb():
    if "fb" not in _CACHE:
        _CACHE["fb"] = extract_boundary(disk_field())
    return _CACHE["fb"]


def test_empty_boundary():
    u = ScalarField(G, np.ones(G.dims))
    fb = extract_boundary(u)
    assert fb.empty
    with pytest.raises(DomainError):
        fb_distance(fb, np.zeros((1, 2)))


def test_corkscrew_on_half_plane():
    u = half_plane()
    fb = extract_boundary(u)
    cs = corkscrew(u, fb, (0.0, 0.0), 0.5)
    assert cs.found
    # B(x, r/2) is open, so the best node is one cell short of its top
    assert cs.clearance == pytest.approx(0.25 - G.spacing)
    assert cs.point[1] == pytest.approx(0.25 - G.spacing)
    ext = corkscrew(u, fb, (0.0, 0.0), 0.5, side="exterior")
    assert ext.found and ext.point[1] < 0
    assert not corkscrew(u, fb, (0.0, 0.0), G.spacing).found
    with pytest.raises(ParameterError):
        corkscrew(u, fb, (0.0, 0.0), 0.5, side="left")


def test_harnack_chain_on_half_plane():
    u = half_plane()
    fb = extract_boundary(u)
    ch = harnack_chain(u, fb, (-0.4, 0.1), (0.4, 0.1))
    assert ch.ok
    assert np.allclose(ch.centers[0], (-0.4, 0.1), atol=G.spacing)
    assert np.allclose(ch.centers[-1], (0.4, 0.1), atol=G.spacing)
    steps = np.linalg.norm(np.diff(ch.centers, axis=0), axis=-1)
    assert np.all(steps <= np.maximum(ch.radii[:-1], ch.radii[1:]) + 1e-12)
    assert ch.c3 < 10


def test_ahlfors_ratio_of_line_and_circle(disk):
    fb = extract_boundary(half_plane())
    assert ahlfors_ratio(fb, (0.0, 0.0), 0.3) == pytest.approx(1.0, abs=1e-9)
    _, dfb = disk
    assert ahlfors_ratio(dfb, (0.05 + R, -0.03), 0.1) == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ResolutionError):
        ahlfors_ratio(fb, (0.0, 0.0), G.spacing)


@pytest.mark.parametrize("angle", [0.0, 0.3, 1.1])
def test_hausdorff_flatness_of_tilted_plane(angle):
    e = (math.sin(angle), math.cos(angle))
    fb = extract_boundary(half_plane(e=e))
    assert hausdorff_flatness(fb, (0.0, 0.0), 0.4, e) < 1e-9
    tilt = (math.sin(angle + 0.1), math.cos(angle + 0.1))
    assert hausdorff_flatness(fb, (0.0, 0.0), 0.4, tilt) == pytest.approx(math.sin(0.1), rel=0.02)


def test_verify_almost_min_on_minimizer():
    u = half_plane()
    w = WeightField.constant(G, 1.0)
    rep = verify_almost_min(u, w, AlmostMinParams(0.0, 1.0), (0.0, 0.0), 0.3)
    assert rep.passed
    assert abs(rep.defect) < 1e-9


def test_replacement_comparability_on_harmonic_field():
    u = half_plane()
    fb = extract_boundary(u)
    out = replacement_comparability(u, WeightField.constant(G, 1.0), fb, (0.0, 0.0), 0.4, 1.0)
    assert out["n"] > 0
    assert out["value"] < 1e-8


def test_audit_points_equispaced():
    fb = extract_boundary(half_plane())
    pts, nrm = audit_points(fb, 8)
    assert len(pts) == 8
    assert np.allclose(pts[:, 1], 0.0, atol=1e-12)
    xs = np.sort(pts[:, 0])
    assert np.allclose(np.diff(xs), np.diff(xs)[0])
    assert np.allclose(xs, -xs[::-1])
    assert np.allclose(nrm, [0.0, 1.0])
