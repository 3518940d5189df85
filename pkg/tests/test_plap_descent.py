import numpy as np
import pytest

from winfshape import flow
from winfshape.constraints import GeometricConstraints
from winfshape.plap_descent import DEFAULT_SCHEDULE, PEnergy, PlapConfig, plap_descent
from winfshape.winf_descent import AdmmConfig, DeformationSpace, DescentError, admm_descent, spectral_norm

from conftest import obstacle_bump


@pytest.fixture(scope="module")
def small_jp(small_mesh, small_flow):
    cfg, state, adjoint = small_flow
    return flow.shape_derivative(small_mesh, cfg, state, adjoint)


@pytest.fixture(scope="module")
def coarse_jp(coarse_mesh, coarse_flow):
    cfg, state, adjoint = coarse_flow
    return flow.shape_derivative(coarse_mesh, cfg, state, adjoint)


def test_config_validation():
    for bad in (dict(schedule=(2.5, 3)), dict(schedule=(2, 3, 3)), dict(schedule=()),
                dict(eps_reg=0.0), dict(scale=-1.0)):
        with pytest.raises(ValueError):
            PlapConfig(**bad)
    assert PlapConfig().p_max == 4.8
    assert PlapConfig(schedule=[2, 3]).schedule == (2.0, 3.0)


@pytest.mark.parametrize("p", [2.0, 3.0, 4.8])
def test_energy_derivatives_match_finite_differences(small_mesh, p):
    space = DeformationSpace(small_mesh)
    E = PEnergy(space, p, 1e-10)
    u = obstacle_bump(small_mesh, 0.1, radius=0.8, seed=1)
    v = obstacle_bump(small_mesh, 1.0, radius=0.8, seed=2)
    h = 1e-6
    fd = (E.value(u + h * v) - E.value(u - h * v)) / (2 * h)
    assert E.gradient(u) @ v == pytest.approx(fd, rel=1e-7)
    fd2 = (E.gradient(u + h * v) - E.gradient(u - h * v)) / (2 * h)
    Hv = E.hessian(u) @ v
    np.testing.assert_allclose(Hv, fd2, rtol=1e-6, atol=1e-7 * np.abs(fd2).max())


def test_p2_matches_linear_solve(small_mesh, small_jp):
    space = DeformationSpace(small_mesh)
    res = plap_descent(small_jp, small_mesh, None, PlapConfig(schedule=(2,)), space=space)
    free = space.free
    K = space.laplacian.toarray()[np.ix_(free, free)]
    ref = np.linalg.solve(K, -small_jp.dual[free])
    np.testing.assert_allclose(res.u[free], ref, rtol=1e-10, atol=1e-14)
    assert res.iterations == 1 and res.doublings == 0


def test_p2_constrained_kkt(small_mesh, small_jp):
    space = DeformationSpace(small_mesh)
    G = GeometricConstraints(small_mesh)
    res = plap_descent(small_jp, small_mesh, G, PlapConfig(schedule=(2,)), space=space)
    assert np.abs(G.eval(res.u)).max() < 1e-12
    r = small_jp.dual + space.laplacian @ res.u + G.gradient(res.u) @ res.mu
    assert np.abs(r[space.free]).max() < 1e-10 * np.abs(small_jp.dual).max()


def test_zero_derivative(small_mesh):
    res = plap_descent(np.zeros(2 * small_mesh.n_vertices), small_mesh, None, sigma=0.3)
    assert not res.u.any() and res.directional == 0.0


@pytest.fixture(scope="module")
def coarse_plap(coarse_mesh, coarse_jp):
    G = GeometricConstraints(coarse_mesh)
    return G, plap_descent(coarse_jp, coarse_mesh, G, sigma=0.3)


def test_plap_descent_properties(coarse_mesh, coarse_plap):
    G, res = coarse_plap
    assert res.directional < 0
    assert res.max_du == pytest.approx(0.3, rel=0.05)
    assert np.abs(G.eval(res.u)).max() < 1e-10
    assert DeformationSpace(coarse_mesh).min_det(res.u) > 0
    ps = [r["p"] for r in res.trace]
    assert ps[:len(DEFAULT_SCHEDULE)] == list(DEFAULT_SCHEDULE)
    assert all(p == DEFAULT_SCHEDULE[-1] for p in ps[len(DEFAULT_SCHEDULE):])


def test_plap_is_less_saturated_than_winf(coarse_mesh, coarse_jp, coarse_plap):
    # at equal gradient bound the p-Laplace direction uses the bound on fewer cells
    G, plap = coarse_plap
    winf = admm_descent(coarse_jp, coarse_mesh, G, AdmmConfig(sigma=0.3))
    space = DeformationSpace(coarse_mesh)
    frac = lambda u: np.mean(spectral_norm(space.grad(u)) > 0.5 * 0.3)
    assert frac(winf.u) > frac(plap.u)
    assert winf.directional < plap.directional


def test_regularisation_insensitive(coarse_mesh, coarse_jp, coarse_plap):
    G, res = coarse_plap
    other = plap_descent(coarse_jp, coarse_mesh, G, PlapConfig(eps_reg=1e-8), sigma=0.3)
    np.testing.assert_allclose(other.u, res.u, atol=1e-4 * np.abs(res.u).max())


def test_scale_controls_size_without_budget(small_mesh, small_jp):
    jp = small_jp.scaled(1e-3)
    a = plap_descent(jp, small_mesh, None, PlapConfig(schedule=(2, 3)))
    b = plap_descent(jp, small_mesh, None, PlapConfig(schedule=(2, 3), scale=8.0))
    # homogeneity of the p = 3 problem: u scales with scale ** (1 / (p - 1)),
    # broken only by eps_reg relative to |Du|^2 in low-gradient cells
    np.testing.assert_allclose(b.u, 8.0 ** 0.5 * a.u, atol=1e-5 * np.abs(b.u).max())


def test_failure_names_p(small_mesh, small_jp):
    cfg = PlapConfig(newton_maxiter=1, max_bisections=0)
    with pytest.raises(DescentError, match=r"at p = 2\.0: Newton did not converge"):
        plap_descent(small_jp.scaled(50.0), small_mesh, None, cfg)


def test_diagnostics_file(small_mesh, small_jp, tmp_path):
    path = tmp_path / "plap.csv"
    plap_descent(small_jp, small_mesh, None, PlapConfig(schedule=(2, 3)), diagnostics=path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("plap,0,")
