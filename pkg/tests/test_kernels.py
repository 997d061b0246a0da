import numpy as np
import pytest

from fblab import kernels


@pytest.fixture
def restore_backend():
    prev = kernels.backend()
    yield
    kernels.use_backend(prev)


def _problem(n=33, seed=0):
    rng = np.random.default_rng(seed)
    u = np.zeros((n, n))
    u[0, :] = rng.uniform(0, 1, n)
    u[-1, :] = rng.uniform(0, 1, n)
    mask = np.ones((n, n), dtype=bool)
    return u, mask


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.use_backend("gpu")


def test_python_backend_always_available(restore_backend):
    assert "python" in kernels.BACKENDS
    kernels.use_backend("python")
    assert kernels.backend() == "python"


def test_sor_reproduces_linear_function(restore_backend):
    # x1 is discrete-harmonic, so it is a fixed point of the relaxation
    n = 17
    x = np.linspace(0, 1, n)
    exact = np.repeat(x[:, None], n, axis=1)
    for name in kernels.BACKENDS:
        kernels.use_backend(name)
        u = exact.copy()
        u[1:-1, 1:-1] = 0.0
        out, it, res = kernels.sor_solve(u, np.ones((n, n), bool), omega=1.7, tol=1e-13)
        assert res < 1e-13
        assert np.max(np.abs(out - exact)) < 1e-10


def test_backends_agree_on_sor(restore_backend):
    outs = []
    for name in kernels.BACKENDS:
        kernels.use_backend(name)
        u, m = _problem()
        outs.append(kernels.sor_solve(u, m, omega=1.8, tol=1e-12)[0])
    for o in outs[1:]:
        assert np.max(np.abs(o - outs[0])) < 1e-9


def test_backends_agree_on_shrink(restore_backend):
    outs = []
    for name in kernels.BACKENDS:
        kernels.use_backend(name)
        u, m = _problem(seed=1)
        sp = np.full(u.shape, 0.01)
        out = kernels.shrink_solve(u, m, sp, sp, lower=0.0, omega=1.5, tol=1e-12)[0]
        assert out.min() >= 0.0
        outs.append(out)
    for o in outs[1:]:
        assert np.max(np.abs(o - outs[0])) < 1e-8


def test_shrink_with_large_shift_vanishes_inside(restore_backend):
    u, m = _problem(seed=2)
    out = kernels.shrink_solve(u, m, np.full(u.shape, 10.0), np.full(u.shape, 10.0))[0]
    assert np.all(out[1:-1, 1:-1] == 0.0)


def test_optimal_omega_range():
    assert kernels.optimal_omega(1.0, 0.5) == 1.0
    w = kernels.optimal_omega(1 / 256, 2.0)
    assert 1.9 < w < 2.0
