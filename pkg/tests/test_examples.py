"""Worked examples for every operation, one group per module.

Each expected value comes from a closed form, a stencil identity or an
independent quadrature stated next to the check.
"""

import json
import math

import numpy as np
import pytest

from fblab.classify import (blowup_fit, classify_point, cosine_bump, decay_audit, default_ladder,
                            flatness, normal_derivative, weak_identity_residual)
from fblab.cli import main
from fblab.errors import DomainError, ParameterError
from fblab.field import (Ball, Grid, ScalarField, ball_integral, circle_integral, gradient, rescale,
                         sample)
from fblab.geometry import (ahlfors_ratio, audit_points, corkscrew, extract_boundary, fb_distance,
                            harnack_chain, hausdorff_flatness, verify_almost_min)
from fblab.monotone import TAU_DISC, acf, audit_monotone, dissipation, radius_ladder, weiss
from fblab.pipeline import AUDITS
from fblab.problem import (AlmostMinParams, WeightField, half_plane_spec, holder_quotient,
                           make_holder_field, perturbed_weights, spec_from_dict, two_plane_spec)
from fblab.solver import energy, harmonic_measure, harmonic_replace, minimize

G = Grid.square(-1.0, 1.0, 256)
W = WeightField.constant(G, 1.0)
H = G.spacing


def field(fn, g=G):
    return ScalarField.from_function(g, fn)


def hp(g=G, lam=1.0):
    return field(lambda p: lam * np.maximum(p[..., 1], 0.0), g)


# --- field --------------------------------------------------------------------------------

def test_sample_examples():
    assert sample(field(lambda p: np.full(p.shape[:-1], 3.0)), np.array([[0.123, -0.7]]))[0] == 3.0
    assert sample(field(lambda p: p[..., 1]), np.array([[0.3, 0.7]]))[0] == pytest.approx(0.7, abs=1e-14)
    g = Grid.square(-1.0, 1.0, 4)  # h = 0.5
    f = field(lambda p: p[..., 0] * p[..., 1], g)
    assert sample(f, np.array([[0.25, 0.25]]))[0] == pytest.approx(0.0625, abs=1e-15)
    with pytest.raises(DomainError):
        sample(f, np.array([[1.5, 0.0]]))


def test_gradient_examples():
    assert np.allclose(gradient(field(lambda p: p[..., 1])), [0.0, 1.0])
    assert np.allclose(gradient(field(lambda p: np.full(p.shape[:-1], 2.5))), 0.0)
    g = Grid.square(-1.0, 1.0, 20)  # h = 0.1
    gr = gradient(field(lambda p: p[..., 0] ** 2 + p[..., 1] ** 2, g))
    assert gr[g.nearest_index((0.5, 0.0))] == pytest.approx([1.0, 0.0], abs=1e-12)


def test_circle_integral_examples():
    g = Grid.square(-2.0, 2.0, 256)
    assert circle_integral(lambda p: np.ones(p.shape[:-1]), Ball((0.0, 0.0), 1.0), grid=g) == \
        pytest.approx(2 * math.pi, abs=1e-12)
    # int_0^pi sin^2 = pi / 2
    f = field(lambda p: np.maximum(p[..., 1], 0.0) ** 2, g)
    assert circle_integral(f, Ball((0.0, 0.0), 1.0)) == pytest.approx(math.pi / 2, rel=1e-3)
    assert abs(circle_integral(field(lambda p: p[..., 1], g), Ball((0.0, 0.0), 0.7))) < 1e-12
    with pytest.raises(DomainError):
        circle_integral(f, Ball((1.5, 0.0), 1.0))


def test_ball_integral_examples():
    g = Grid.square(-1.2, 1.2, 240)  # h = 0.01
    b = Ball((0.0, 0.0), 1.0)
    assert ball_integral(lambda p: np.ones(p.shape[:-1]), b, grid=g) == pytest.approx(math.pi, rel=5e-3)
    assert ball_integral(lambda p: (p[..., 1] > 0).astype(float), b, grid=g) == \
        pytest.approx(math.pi / 2, rel=5e-3)
    assert ball_integral(lambda p: np.zeros(p.shape[:-1]), b, grid=g) == 0.0


def test_rescale_examples():
    out = Grid.square(-1.0, 1.0, 32)
    X, Y = out.mesh()
    for r in (0.2, 0.5, 0.9):
        v = rescale(hp(), (0.0, 0.0), r, out)
        assert np.allclose(v.values, np.maximum(Y, 0.0), atol=1e-12)
    shifted = field(lambda p: np.maximum(p[..., 1] - 0.2, 0.0))
    v = rescale(shifted, (0.0, 0.2), 0.5, out)
    # the kink at x2 = 0.2 sits between nodes; linear interpolation of a kink errs by at most h/4
    assert np.max(np.abs(v.values - np.maximum(Y, 0.0))) <= H / 4 / 0.5 + 1e-12
    # |x0 + r x|^2 / r = r |x|^2; bilinear sampling adds at most h^2/2
    v = rescale(field(lambda p: np.sum(p * p, axis=-1)), (0.0, 0.0), 0.5, out)
    assert np.max(np.abs(v.values - 0.5 * (X**2 + Y**2))) <= 0.5 * (0.5 * out.spacing) ** 2 / 0.5 + 1e-12


# --- problem ------------------------------------------------------------------------------

def test_make_holder_field_examples():
    f, lam = make_holder_field(3, 1.0, 0.0, 0.5, G)
    assert np.all(f.values == 1.0)
    a, _ = make_holder_field(7, 1.0, 0.2, 0.5, G)
    b, _ = make_holder_field(7, 1.0, 0.2, 0.5, G)
    assert a.values.tobytes() == b.values.tobytes()
    f, lam = make_holder_field(7, 1.0, 0.2, 0.5, G)
    assert holder_quotient(f, 0.5, n_pairs=100_000, seed=11) <= lam
    with pytest.raises(ParameterError):
        make_holder_field(7, 1.0, 1.0, 0.5, G)


def test_perturbed_weights_examples():
    w = WeightField.constant(G, 1.0)
    same = perturbed_weights(w, seed=1, lambda_pert=0.0, alpha=0.5)
    assert same.kappa == 0.0
    assert np.array_equal(same.q_plus.values, w.q_plus.values)
    assert perturbed_weights(w, seed=1, lambda_pert=0.1, alpha=0.5).kappa == pytest.approx(0.5657, abs=1e-4)
    wp = perturbed_weights(WeightField.constant(G, 1.0, 0.0), seed=2, lambda_pert=0.1, alpha=0.5)
    assert np.all(wp.q_minus.values == 0.0)


# --- solver -------------------------------------------------------------------------------

def test_energy_examples():
    b = Ball((0.0, 0.0), 0.99)  # B(0, 1) must fit inside the grid
    ref = math.pi * 0.99**2
    assert energy(hp(), W, region=b) == pytest.approx(ref, rel=0.01)
    assert energy(field(lambda p: np.zeros(p.shape[:-1])), W) == 0.0
    assert energy(hp(), W, region=b) < energy(hp(lam=1.0001), W, region=b)
    with pytest.raises(DomainError):
        energy(hp(), W, region=Ball((0.0, 0.0), 1.5))


def test_minimize_zero_data():
    spec = spec_from_dict(half_plane_spec(64, lam=0.0, weights={"q_plus": {"kind": "constant", "value": 1.0}}))
    res = minimize(spec)
    assert np.all(res.u.values == 0.0)
    assert res.sharp_energy == 0.0


def test_minimize_two_plane():
    spec = spec_from_dict(two_plane_spec(128))
    res = minimize(spec)
    g = spec.grid
    Y = g.mesh()[1]
    assert np.max(np.abs(res.u.values - Y)) <= 5 * g.spacing
    gr = gradient(res.u)[16:-16, 16:-16]
    assert np.allclose(np.linalg.norm(gr, axis=-1), 1.0, atol=0.02)
    assert np.any(res.u.values > 0) and np.any(res.u.values < 0)
    fb = extract_boundary(res.u)
    assert np.max(np.abs(fb.vertices()[:, 1])) <= 2 * g.spacing


def test_harmonic_replace_examples():
    b = Ball((0.0, 0.2), 0.15)
    u = hp()
    assert np.max(np.abs(harmonic_replace(u, W, b).values - u.values)) < 1e-9
    # min((x2)+, 0.3) is superharmonic, so the replacement lies below it
    flat = field(lambda p: np.minimum(np.maximum(p[..., 1], 0.0), 0.3))
    rep = harmonic_replace(flat, W, b)
    inside = np.linalg.norm(G.points() - np.asarray(b.center), axis=-1) < b.radius
    diff = rep.values - flat.values
    assert np.all(diff <= 1e-12)
    assert diff[inside].min() < -0.01
    assert np.all(diff[~inside] == 0.0)
    away = Ball((0.0, -0.5), 0.2)
    assert np.array_equal(harmonic_replace(u, W, away).values, u.values)


def test_harmonic_measure_examples():
    u = hp()
    assert harmonic_measure(u, (0.0, 0.5), Ball((0.0, 0.0), 3.0)) == pytest.approx(1.0, abs=1e-6)
    assert harmonic_measure(u, (0.0, 0.5), Ball((0.0, 0.5), 0.1)) == 0.0
    g = Grid.square(-4.0, 4.0, 512)
    big = hp(g)
    for r in (0.05, 0.1, 0.2):
        # planar Poisson kernel from (0, 1): (2/pi) arctan r
        ref = 2 / math.pi * math.atan(r)
        assert harmonic_measure(big, (0.0, 1.0), Ball((0.0, 0.0), r)) == pytest.approx(ref, rel=0.1)
    with pytest.raises(ParameterError):
        harmonic_measure(u, (0.0, -0.5), Ball((0.0, 0.0), 0.2))


def test_replacement_lowers_dirichlet_energy():
    rng = np.random.default_rng(5)
    noisy = ScalarField(G, hp().values * (1 + 0.05 * rng.random(G.dims)))
    b = Ball((0.1, 0.3), 0.25)
    d_u = energy(noisy, WeightField.constant(G, 1e-300), region=b)
    d_h = energy(harmonic_replace(noisy, W, b), WeightField.constant(G, 1e-300), region=b)
    assert d_h <= d_u


# --- geometry -----------------------------------------------------------------------------

def test_extract_boundary_examples():
    fb = extract_boundary(hp())
    assert len(fb.polylines) == 1
    assert np.max(np.abs(fb.vertices()[:, 1])) <= H
    assert np.all(fb.normals() @ np.array([0.0, 1.0]) >= math.cos(math.radians(1.0)))
    ring = extract_boundary(field(lambda p: np.maximum(np.linalg.norm(p, axis=-1) - 0.5, 0.0)))
    assert ring.polylines[0].closed
    assert np.max(np.abs(np.linalg.norm(ring.vertices(), axis=-1) - 0.5)) <= H
    assert ring.length() == pytest.approx(math.pi, rel=0.02)
    assert extract_boundary(field(lambda p: 1.0 + p[..., 0] ** 2)).empty


def test_fb_distance_examples():
    line = extract_boundary(hp())
    assert fb_distance(line, np.array([[0.3, 0.4]]))[0] == pytest.approx(0.4, abs=H)
    v = line.vertices()[10]
    assert fb_distance(line, v[None])[0] == pytest.approx(0.0, abs=1e-12)
    ring = extract_boundary(field(lambda p: np.maximum(np.linalg.norm(p, axis=-1) - 0.5, 0.0)))
    assert fb_distance(ring, np.zeros((1, 2)))[0] == pytest.approx(0.5, abs=H)


def test_corkscrew_examples():
    u = hp()
    fb = extract_boundary(u)
    inner = corkscrew(u, fb, (0.0, 0.0), 0.4)
    assert inner.found and inner.clearance >= 0.19
    outer = corkscrew(u, fb, (0.0, 0.0), 0.4, side="exterior")
    assert outer.found and outer.clearance == pytest.approx(inner.clearance, abs=H)
    assert outer.point[1] < 0
    assert not corkscrew(u, fb, (0.0, 0.0), 1.5 * H).found


def test_harnack_chain_examples():
    u = hp()
    fb = extract_boundary(u)
    ch = harnack_chain(u, fb, (-0.3, 0.2), (0.3, 0.2))
    assert ch.ok and ch.n <= 12 and ch.c2 <= 4
    assert harnack_chain(u, fb, (0.1, 0.3), (0.1, 0.3)).n == 1
    # delta(x) = delta(y) = 0.4 = 2 |x - y|
    assert harnack_chain(u, fb, (0.0, 0.4), (0.2, 0.4)).n <= 3


def test_ahlfors_ratio_examples():
    line = extract_boundary(hp())
    assert ahlfors_ratio(line, (0.0, 0.0), 0.3) == pytest.approx(1.0, rel=0.02)
    ring = extract_boundary(field(lambda p: np.maximum(np.linalg.norm(p, axis=-1) - 0.5, 0.0)))
    assert ahlfors_ratio(ring, (0.5, 0.0), 0.1) == pytest.approx(1.0, rel=0.03)
    assert ahlfors_ratio(line, (0.0, 0.5), 0.1) == 0.0


def test_hausdorff_flatness_examples():
    line = extract_boundary(hp())
    assert hausdorff_flatness(line, (0.0, 0.0), 0.4, (0.0, 1.0)) <= H / 0.4
    phi = 0.2
    assert hausdorff_flatness(line, (0.0, 0.0), 0.4, (math.sin(phi), math.cos(phi))) == \
        pytest.approx(math.sin(phi), rel=0.1)
    # sagitta of a circle of radius R over a chord of half-length r: r / (2R)
    ring = extract_boundary(field(lambda p: np.maximum(0.5 - np.linalg.norm(p, axis=-1), 0.0)))
    assert hausdorff_flatness(ring, (0.5, 0.0), 0.1, (1.0, 0.0)) == pytest.approx(0.1, rel=0.2)
    with pytest.raises(DomainError):
        hausdorff_flatness(line, (0.0, 0.5), 0.1, (0.0, 1.0))


def test_hausdorff_and_flatness_agree_within_factor_three():
    k = 0.3
    u = field(lambda p: np.maximum(p[..., 1] - k * np.abs(p[..., 0]), 0.0))
    fb = extract_boundary(u)
    r = 0.4
    rep = flatness(u, W, (0.0, 0.0), r, fb=fb)
    dirs = [(math.sin(t), math.cos(t)) for t in np.linspace(-0.5, 0.5, 101)]
    hs = min(hausdorff_flatness(fb, (0.0, 0.0), r, e) for e in dirs)
    assert rep.sigma <= 3 * hs + H / r
    assert hs <= 3 * rep.sigma + H / r


def test_verify_almost_min_examples(solved_hp, solved_pert):
    rep = verify_almost_min(hp(), W, AlmostMinParams(), (0.2, 0.0), 0.3)
    assert rep.defect <= TAU_DISC
    rng = np.random.default_rng(9)
    fb = extract_boundary(solved_hp.u)
    verts = fb.vertices()
    verts = verts[np.abs(verts[:, 0]) < 0.6]
    for k in rng.choice(len(verts), 50, replace=False):
        r = rng.uniform(0.05, 0.2)
        out = verify_almost_min(solved_hp.u, solved_hp.spec.weights, AlmostMinParams(), verts[k], r)
        assert out.defect <= TAU_DISC
    amp = solved_pert.spec.almost_min_params()
    assert amp.kappa == pytest.approx(0.566, abs=1e-3)
    out = verify_almost_min(solved_pert.u, solved_pert.spec.weights, amp, (0.0, -H / 2), 0.1)
    assert out.bound == pytest.approx(amp.kappa * 0.1**0.5 + TAU_DISC)
    assert out.bound == pytest.approx(0.179 + TAU_DISC, abs=1e-3)
    assert out.passed


# --- monotone -----------------------------------------------------------------------------

def test_weiss_examples():
    s = weiss(hp(), W, (0.0, 0.0), 0.3)
    assert s.W == pytest.approx(math.pi / 2, rel=0.01)
    assert s.W_tilde == pytest.approx(math.pi / 2, rel=0.01)
    assert weiss(hp(), W, (0.0, -0.5), 0.3).W == 0.0
    with pytest.raises(DomainError):
        weiss(hp(), W, (0.0, 0.0), 1.5)


def test_dissipation_examples():
    assert dissipation(hp(), (0.0, 0.0), 0.1, 0.4) <= 1e-6
    # |x| is curved, so interpolation leaves an O(h^2) residue that vanishes under refinement
    cone = [dissipation(field(lambda p: np.linalg.norm(p, axis=-1), Grid.square(-1.0, 1.0, n)),
                        (0.0, 0.0), 0.1, 0.4) for n in (256, 512)]
    assert cone[0] <= 4 * H**2
    assert cone[0] / cone[1] == pytest.approx(4.0, rel=0.1)
    assert dissipation(field(lambda p: np.maximum(p[..., 1], 0.0) + 0.1), (0.0, 0.0), 0.2, 0.4) > 0
    with pytest.raises(ParameterError):
        dissipation(hp(), (0.0, 0.0), 0.4, 0.4)


def test_audit_monotone_on_perturbed_run(solved_pert):
    amp = solved_pert.spec.almost_min_params()
    pts, _ = audit_points(extract_boundary(solved_pert.u), 4)
    for p in pts:
        aud = audit_monotone(solved_pert.u, solved_pert.weights, amp, p,
                             radius_ladder(0.25, 6 * solved_pert.u.grid.spacing))
        assert 0.0 <= aud.c_hat <= 10 * amp.kappa


def test_acf_examples():
    out = acf(field(lambda p: p[..., 1]), (0.0, 0.0), [0.1, 0.2, 0.4])
    for smp in out:
        assert smp.phi_f == pytest.approx(math.pi / 2, rel=0.01)
        assert smp.phi_g == pytest.approx(math.pi / 2, rel=0.01)
        assert smp.F == pytest.approx(math.pi**2 / 4, rel=0.01)
    assert all(smp.F == 0.0 for smp in acf(hp(), (0.0, 0.0), [0.1, 0.3]))


# --- classify -----------------------------------------------------------------------------

def test_flatness_examples():
    rep = flatness(hp(), W, (0.0, 0.0), 0.3)
    assert rep.sigma <= 2 * H / 0.3
    assert np.dot(rep.direction, (0.0, 1.0)) >= math.cos(math.radians(1.0))
    assert flatness(hp(), W, (0.0, 0.0), 0.3, direction=(0.0, -1.0)).sigma == 1.0


def test_flatness_on_perturbed_run(solved_pert):
    u, w = solved_pert.u, solved_pert.weights
    pts, _ = audit_points(extract_boundary(u), 8)
    for p in pts:
        radii = (0.2, 0.1, 0.05)
        sig = [flatness(u, w, p, r, with_hausdorff=False).sigma for r in radii]
        assert sig[0] < 0.1
        # each sigma is resolved to its bisection step h / (4 r)
        tol = [u.grid.spacing / (4 * r) for r in radii]
        for k in range(2):
            assert sig[k] <= sig[k + 1] + tol[k] + tol[k + 1]


def test_blowup_examples(solved_pert):
    for x0 in ((0.0, 0.0), (0.3, 0.0)):
        b = blowup_fit(hp(lam=2.0), WeightField.constant(G, 2.0), x0, 0.25)
        assert b.slope == pytest.approx(2.0)
        assert b.normal == pytest.approx((0.0, 1.0), abs=1e-12)
        assert b.misfit <= 1e-6
    u, w = solved_pert.u, solved_pert.weights
    pts, _ = audit_points(extract_boundary(u), 8)
    for p in pts:
        radii = sorted(default_ladder(u, p))[:4]
        mis = [blowup_fit(u, w, p, r).misfit for r in radii]
        assert all(a <= 1.2 * b for a, b in zip(mis, mis[1:]))


def test_classify_examples():
    c = classify_point(hp(), W, (0.0, 0.0))
    assert c.gap_ratio == pytest.approx(1.0, rel=0.02) and c.label == "regular"
    # |x2| with q+ = q- = 1: (pi + pi) - pi = pi
    both = WeightField.constant(G, 1.0, 1.0)
    c = classify_point(field(lambda p: np.abs(p[..., 1])), both, (0.0, 0.0))
    assert c.W0 == pytest.approx(math.pi, rel=0.02)
    assert c.gap_ratio == pytest.approx(2.0, rel=0.02)
    assert c.label != "regular"


def test_normal_derivative_examples():
    u = hp(lam=1.5)
    fb = extract_boundary(u)
    assert normal_derivative(u, fb, (0.2, 0.0)) == pytest.approx(1.5, rel=0.01)
    phi = 0.4
    nu = (math.sin(phi), math.cos(phi))
    assert normal_derivative(u, fb, (0.2, 0.0), nu) == pytest.approx(1.5 * math.cos(phi), rel=0.02)
    with pytest.raises(DomainError):
        normal_derivative(u, fb, (0.2, 0.99), (0.0, 1.0))


def test_weak_identity_examples():
    u = hp()
    fb = extract_boundary(u)
    hw = 0.15
    trial = weak_identity_residual(u, fb, (0.1, 0.0), hw)
    # int cos^2(pi x / (2 hw)) over [-hw, hw] = hw
    assert trial.lhs == pytest.approx(hw, rel=0.03)
    assert trial.rhs == pytest.approx(hw, rel=0.03)
    away = weak_identity_residual(u, fb, (0.0, 0.5), 0.2)
    zmax = cosine_bump((0.0, 0.5), 0.2)(np.array([0.0, 0.5]))
    assert abs(away.lhs) <= 1e-6 * zmax and abs(away.rhs) <= 1e-6 * zmax


def test_decay_examples():
    rep = decay_audit(hp(), W, (0.0, 0.0))
    live = [row for row in rep.rows if not row.truncated]
    assert all(row.sigma <= row.floor for row in live)
    assert len({row.direction for row in live}) == 1
    phi = math.radians(30.0)
    e = (math.cos(phi), math.sin(phi))
    tilted = field(lambda p: np.maximum(p @ np.array(e), 0.0))
    rep = decay_audit(tilted, W, (0.0, 0.0))
    for row in rep.rows:
        if not row.truncated:
            assert row.direction == pytest.approx(e, abs=1e-12)
            assert row.sigma <= row.floor


# --- cli ----------------------------------------------------------------------------------

def test_audit_all_on_half_plane_run(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(half_plane_spec(512)))
    assert main(["solve", "--spec", str(spec), "--out", str(tmp_path / "run")]) == 0
    assert main(["audit", "--run", str(tmp_path / "run"), "--which", "all"]) == 0
    failing = {}
    for name in AUDITS:
        doc = json.loads((tmp_path / "run" / "audit" / f"{name}.json").read_text())
        bad = [row for row in doc["rows"] if not row["pass"]]
        if bad:
            failing[name] = sorted({(row["kind"], row["reason"]) for row in bad})
    assert not failing, failing
