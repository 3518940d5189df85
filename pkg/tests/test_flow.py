import numpy as np
import pytest
import sympy as sy

from winfshape import fem, flow
from winfshape.mesh import rectangle_mesh

from conftest import obstacle_bump

NU = 0.02


# -- manufactured solution, derived symbolically ------------------------------

def _manufactured():
    x, y = sy.symbols("x y")
    psi = sy.sin(sy.pi * x) * sy.sin(sy.pi * y) / sy.pi
    v = sy.Matrix([sy.diff(psi, y), -sy.diff(psi, x)])
    p = sy.cos(sy.pi * x) * sy.cos(sy.pi * y)
    lap = sy.Matrix([sy.diff(c, x, 2) + sy.diff(c, y, 2) for c in v])
    conv = v.jacobian([x, y]) * v
    f = -NU * lap + conv + sy.Matrix([sy.diff(p, x), sy.diff(p, y)])
    to_np = lambda e: sy.lambdify((x, y), e, "numpy")
    vf = [to_np(c) for c in v]
    ff = [to_np(sy.simplify(c)) for c in f]

    def pair(fns):
        return lambda X, Y: np.column_stack([np.broadcast_to(g(X, Y), X.shape) for g in fns])

    return pair(vf), to_np(p), pair(ff)


def _l2_errors(mesh, cfg, sol, v_exact, p_exact):
    ns = flow.NavierStokes(mesh, cfg)
    vq, _ = ns.velocity_at_quad(sol.velocity)
    pq = ns.pressure_at_quad(sol.pressure)
    xq = np.einsum("qa,mai->mqi", ns.pts, mesh.vertices[mesh.cells])
    X, Y = xq[..., 0].ravel(), xq[..., 1].ravel()
    ve = v_exact(X, Y).reshape(vq.shape)
    pe = p_exact(X, Y).reshape(pq.shape)
    ev = np.sqrt(np.sum(ns.wq * np.sum((vq - ve) ** 2, axis=-1)))
    ep = np.sqrt(np.sum(ns.wq * (pq - pe) ** 2))
    return ev, ep


@pytest.fixture(scope="module")
def manufactured_errors():
    v_exact, p_exact, forcing = _manufactured()
    cfg = flow.FlowConfig(nu=NU, dirichlet_values=v_exact, forcing=forcing,
                          dirichlet_markers=("inflow", "outflow", "wall"))
    errs = []
    for n in (4, 8, 16, 32):
        mesh = rectangle_mesh(0, 1, 0, 1, n, n)
        sol = flow.solve_state(mesh, cfg)
        errs.append(_l2_errors(mesh, cfg, sol, v_exact, p_exact))
    return np.array(errs)


def test_manufactured_velocity_order(manufactured_errors):
    rates = np.log2(manufactured_errors[:-1, 0] / manufactured_errors[1:, 0])
    assert np.all(rates[1:] > 2.8), rates


def test_manufactured_pressure_order(manufactured_errors):
    rates = np.log2(manufactured_errors[:-1, 1] / manufactured_errors[1:, 1])
    assert np.all(rates[1:] > 1.8), rates


# -- Poiseuille channel -----------------------------------------------------------

L, H = 7.0, 1.5  # length, half width


def _poiseuille_cfg():
    return flow.FlowConfig(nu=NU, inflow=lambda X, Y: np.column_stack([1 - (Y / H) ** 2, 0 * Y]))


@pytest.fixture(scope="module")
def poiseuille():
    mesh = rectangle_mesh(0, L, -H, H, 14, 6)
    cfg = _poiseuille_cfg()
    return mesh, cfg, flow.solve_state(mesh, cfg)


def test_poiseuille_nodal_exact(poiseuille):
    mesh, cfg, sol = poiseuille
    nodes = fem.p2_nodes(mesh)
    vel = sol.velocity.reshape(2, -1).T
    exact = np.column_stack([1 - (nodes[:, 1] / H) ** 2, np.zeros(len(nodes))])
    assert np.abs(vel - exact).max() < 1e-8
    # do-nothing outflow fixes p = 0 at x = L, pressure drop 2 nu / H^2 per unit length
    p_exact = 2 * NU * (L - mesh.vertices[:, 0]) / H ** 2
    assert np.abs(sol.pressure - p_exact).max() < 1e-8


def test_poiseuille_energy(poiseuille):
    mesh, cfg, sol = poiseuille
    J = flow.energy(mesh, sol, cfg)
    assert J == pytest.approx(4 * NU * L / (3 * H), rel=1e-6)
    assert J == pytest.approx(0.124444444444, rel=1e-9)


def test_newton_from_initial_guess(poiseuille):
    mesh, cfg, sol = poiseuille
    again = flow.solve_state(mesh, cfg, initial=sol)
    assert again.iterations == 0
    np.testing.assert_allclose(again.velocity, sol.velocity)


def test_newton_failure_reports_history():
    mesh = rectangle_mesh(0, L, -H, H, 7, 3)
    cfg = flow.FlowConfig(nu=1e-5, newton_maxiter=1, inflow_scale=50.0)
    with pytest.raises(flow.NewtonError) as info:
        flow.solve_state(mesh, cfg)
    assert len(info.value.history) >= 1


def test_rejects_nonpositive_viscosity():
    with pytest.raises(ValueError):
        flow.FlowConfig(nu=0.0)


def test_default_inflow_profile():
    prof = flow.FlowConfig().inflow_profile()
    y = np.linspace(-3, 3, 7)
    v = prof(np.zeros_like(y), y)
    np.testing.assert_allclose(v[:, 0], np.cos(np.pi * y / 6), atol=1e-15)
    assert v[0, 0] == pytest.approx(0, abs=1e-15) and v[3, 0] == 1.0
    assert np.all(v[:, 1] == 0)


# -- adjoint and shape derivative -------------------------------------------


def _energy_at(mesh, cfg, u, initial):
    moved = mesh.with_vertices(mesh.vertices + u.reshape(2, -1).T)
    return flow.energy(moved, flow.solve_state(moved, cfg, initial=initial), cfg)


@pytest.mark.parametrize("seed", [0, 1])
def test_shape_derivative_matches_finite_differences(coarse_mesh, coarse_flow, seed):
    cfg, state, adjoint = coarse_flow
    jp = flow.shape_derivative(coarse_mesh, cfg, state, adjoint, restrict=False)
    u = obstacle_bump(coarse_mesh, 1.0, seed=seed)
    h = 1e-4
    fd = (_energy_at(coarse_mesh, cfg, h * u, state) - _energy_at(coarse_mesh, cfg, -h * u, state)) / (2 * h)
    assert jp(u) == pytest.approx(fd, rel=1e-4)


def test_vertex_restriction_keeps_full_entries(coarse_mesh, coarse_flow):
    cfg, state, adjoint = coarse_flow
    full = flow.shape_derivative(coarse_mesh, cfg, state, adjoint, restrict=False).dual
    cells = flow.shape_derivative(coarse_mesh, cfg, state, adjoint, restrict="cells").dual
    verts = flow.shape_derivative(coarse_mesh, cfg, state, adjoint, restrict="vertices").dual
    N = coarse_mesh.n_vertices
    obs = coarse_mesh.obstacle_vertices
    idx = np.concatenate([obs, obs + N])
    np.testing.assert_array_equal(verts[idx], cells[idx])
    np.testing.assert_allclose(verts[idx], full[idx], rtol=1e-10, atol=1e-14 * np.abs(full).max())
    rest = np.ones(2 * N, dtype=bool)
    rest[idx] = False
    assert not np.any(verts[rest])
    assert np.any(cells[rest])


def test_derivative_vanishes_on_tunnel(coarse_mesh, coarse_flow):
    cfg, state, adjoint = coarse_flow
    d = flow.shape_derivative(coarse_mesh, cfg, state, adjoint, restrict=False).dual
    N = coarse_mesh.n_vertices
    outer = coarse_mesh.outer_vertices
    assert not np.any(d[outer]) and not np.any(d[outer + N])


def test_unknown_restriction(coarse_mesh, coarse_flow):
    cfg, state, adjoint = coarse_flow
    with pytest.raises(ValueError):
        flow.shape_derivative(coarse_mesh, cfg, state, adjoint, restrict="edges")


def test_adjoint_is_zero_on_dirichlet(coarse_mesh, coarse_flow):
    cfg, state, adjoint = coarse_flow
    ns = flow.NavierStokes(coarse_mesh, cfg)
    fixed = ns.V.dirichlet
    assert np.abs(adjoint.velocity[fixed]).max() == 0.0


def test_energy_is_deterministic(coarse_mesh):
    cfg = flow.FlowConfig()
    a = flow.energy(coarse_mesh, flow.solve_state(coarse_mesh, cfg), cfg)
    b = flow.energy(coarse_mesh, flow.solve_state(coarse_mesh, cfg), cfg)
    assert a == b
