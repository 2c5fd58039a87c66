import numpy as np
import pytest

from conftest import rel, scene_path, small_contact_scene
from ipcdiff import io
from ipcdiff.bdf import BdfScheme
from ipcdiff.contact import BarrierParams
from ipcdiff.errors import NewtonDivergence, SingularSystem
from ipcdiff.forward import (Physics, StaticProblem, TransientStep, newton_solve, residual,
                             simulate, static_solve)
from ipcdiff.materials import LINEAR, NEO_HOOKEAN, elastic_energy
from ipcdiff.mesh import build_mesh
from ipcdiff.meshgen import BOTTOM, LEFT, RIGHT, TOP, merge, rectangle
from ipcdiff.scene import DirichletBC, NeumannBC, Scene


def block(order=1, model=NEO_HOOKEAN, nx=3, ny=2, **kw):
    v, t, side = rectangle(1.0, 0.5, nx, ny)
    mesh = build_mesh(v, t, side)
    sc = Scene(mesh, order=order, model=model, **kw)
    return sc.with_params(sc.default_params(10.0, 5.0))


def hist(u0, n):
    return [u0.copy() for _ in range(n)]


# --- BDF coefficients -----------------------------------------------------------

def test_bdf1_row():
    s = BdfScheme(1)
    assert list(s.alpha(1)) == [-1.0] and s.beta(1) == 1.0


@pytest.mark.parametrize("m", [1, 2, 3])
def test_bdf_rows_preserve_constants(m):
    s = BdfScheme(m)
    for i in range(1, 6):
        assert abs(1.0 + s.alpha(i).sum()) < 1e-15
        assert s.row_order(i) == min(i, m)


def test_bdf_order_limits():
    with pytest.raises(ValueError):
        BdfScheme(4)


# --- residual -------------------------------------------------------------------

def test_residual_rest_state():
    sc = block()
    z = np.zeros(sc.space.n_dofs)
    r = residual(sc, z, hist(z, 1), hist(z, 1), BdfScheme(1), 1)
    assert np.all(r == 0)


def test_residual_free_fall_bdf1():
    g = np.array([0.3, -9.81])
    sc = block(gravity=tuple(g), dt=0.05)
    n = sc.space.n_nodes
    v0 = np.tile([0.2, 0.1], n)
    u0 = np.zeros(2 * n)
    v1 = v0 + sc.dt * np.tile(g, n)
    u1 = u0 + sc.dt * v1
    r = residual(sc, u1, [u0], [v0], BdfScheme(1), 1)
    M = Physics(sc).mass
    scale = np.abs(M @ np.tile(g, n)).max() * sc.dt
    assert np.abs(r).max() < 1e-12 * scale


def test_residual_single_element_dense():
    v = np.array([[0.0, 0.0], [1.2, 0.1], [0.3, 0.9]])
    mesh = build_mesh(v, np.array([[0, 1, 2]]))
    lam, mu, rho, dt = 3.0, 2.0, 1.5, 0.1
    sc = Scene(mesh, model=LINEAR, density=rho, dt=dt, gravity=(0.0, -1.0))
    sc = sc.with_params(sc.default_params(lam, mu))
    rng = np.random.default_rng(5)
    u = rng.uniform(-0.05, 0.05, 6)
    up = rng.uniform(-0.05, 0.05, 6)
    vp = rng.uniform(-0.5, 0.5, 6)
    # hand assembly: gradients of the hat functions, linear stress, consistent mass
    D = np.array([v[1] - v[0], v[2] - v[0]]).T
    area = 0.5 * np.linalg.det(D)
    gradN = np.vstack([-np.ones(2), np.eye(2)]) @ np.linalg.inv(D)
    U = u.reshape(3, 2)
    grad_u = U.T @ gradN
    eps = 0.5 * (grad_u + grad_u.T)
    P = lam * np.trace(eps) * np.eye(2) + 2 * mu * eps
    f_int = (area * gradN @ P.T).ravel()
    Ms = rho * area / 12.0 * (np.ones((3, 3)) + np.eye(3))
    M = np.kron(Ms, np.eye(2))
    f_ext = M @ np.tile([0.0, -1.0], 3)
    vel = (u - up) / dt
    expected = M @ (vel - vp) - dt * (f_ext - f_int)
    r = residual(sc, u, [up], [vp], BdfScheme(1), 1)
    assert rel(r, expected) < 1e-13


@pytest.mark.parametrize("m", [2, 3])
def test_residual_exact_for_quadratic_free_flight(m):
    g = np.array([0.0, -9.81])
    sc = block(gravity=tuple(g), dt=0.02)
    n = sc.space.n_nodes
    v0 = np.tile([0.4, 1.0], n)
    a = np.tile(g, n)
    t = np.arange(m + 1) * sc.dt
    us = [v0 * ti + 0.5 * a * ti ** 2 for ti in t]
    vs = [v0 + a * ti for ti in t]
    r = residual(sc, us[m], us, vs, BdfScheme(m), m)
    scale = np.abs(Physics(sc).mass @ a).max() * sc.dt
    assert np.abs(r).max() < 1e-12 * scale


# --- Newton ---------------------------------------------------------------------

def test_newton_linear_static_one_iteration():
    sc = io.parse_scene(scene_path("bar.json")).scene
    prob = StaticProblem(Physics(sc))
    x, info = newton_solve(prob.residual, prob.jacobian, np.zeros(len(sc.free_dofs)))
    assert info.iterations == 1
    assert np.linalg.norm(prob.residual(x)) < 1e-10


def test_newton_neohookean_bar_monotone():
    v, t, side = rectangle(1.0, 0.1, 10, 1)
    mesh = build_mesh(v, t, side)
    pull = DirichletBC(tags=(RIGHT,), matrix=((0.4, 0.0), (0.0, 0.0)))
    sc = Scene(mesh, dirichlet=(DirichletBC(tags=(LEFT,)), pull))
    sc = sc.with_params(sc.default_params(5.0, 2.0))
    prob = StaticProblem(Physics(sc))
    x, info = newton_solve(prob.residual, prob.jacobian, np.zeros(len(sc.free_dofs)), tol=1e-10)
    norms = info.residual_norms
    assert norms[-1] <= 1e-10
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert Physics(sc).min_det(prob.full(x)) > 0


def test_newton_stops_short_of_contact():
    gap = 0.05
    va, ta, _ = rectangle(1.0, 0.5, 2, 1)
    vb, tb, _ = rectangle(1.0, 0.5, 2, 1, origin=(0.1, 0.5 + gap))
    v, t, body = merge([(va, ta), (vb, tb)])
    sc = Scene(build_mesh(v, t, body_id=body), barrier=BarrierParams(0.01, 1.0))
    phys = Physics(sc)
    moving = np.repeat(sc.space.node_body == 1, 2)
    target = np.zeros(phys.n_dofs)
    target[moving] = np.tile([0.0, -2 * gap], moving.sum() // 2)
    trials = []

    def res(x):
        trials.append(x.copy())
        return x - target
    # the target overlaps the lower block, so a single iteration cannot converge
    with pytest.raises(NewtonDivergence):
        newton_solve(res, lambda x: np.eye(len(x)), np.zeros(phys.n_dofs), ccd_filter=phys.ccd, max_iter=1)
    x = trials[-1]
    t = x[moving][1] / target[moving][1]
    toi = 0.5
    assert 0 < t < toi
    assert phys.min_distance(x) > 0


def test_newton_divergence():
    with pytest.raises(NewtonDivergence):
        newton_solve(lambda x: x ** 2 + 1.0, lambda x: np.diag(2 * x + 1e-3), np.array([1.0]), max_iter=50)


def test_transient_jacobian_matches_fd(rng):
    for order in (1, 2):
        sc = small_contact_scene(order=order, bdf=2)
        phys = Physics(sc)
        u0, v0 = sc.initial_state()
        st = TransientStep(phys, BdfScheme(1), 1, [u0], [v0])
        x = u0[phys.free] + rng.uniform(-1e-3, 1e-3, len(phys.free))
        d = rng.standard_normal(len(x))
        h = 1e-7
        fd = (st.residual(x + h * d) - st.residual(x - h * d)) / (2 * h)
        assert rel(st.jacobian(x) @ d, fd) < 1e-6


# --- simulate -------------------------------------------------------------------

@pytest.mark.parametrize("m", [1, 2, 3])
def test_free_flight_exact(m):
    sc = block(dt=0.05, n_steps=6, bdf_order=m)
    p = sc.params.copy()
    p.blocks["v0"][:] = [0.7, -0.2]
    traj = simulate(sc.with_params(p))
    v0 = p.v0.ravel()
    for i, u in enumerate(traj.u):
        assert np.abs(u - i * sc.dt * v0).max() < 1e-12
        assert np.abs(traj.v[i] - v0).max() < 1e-12


def test_ball_over_floor_stays_separated():
    sc = small_contact_scene(n_steps=8)
    traj = simulate(sc)
    assert min(s["min_distance"] for s in traj.stats) > 0
    assert min(s["min_det"] for s in traj.stats) > 0
    assert any(len(a) for a in traj.active)
    d = sc.dirichlet_dofs
    for u in traj.u:
        assert np.all(u[d] == 0.0)


def test_time_dependent_dirichlet_exact():
    from ipcdiff.scene import TimeTable
    table = TimeTable(times=(0.0, 1.0), values=(0.0, 1.0))
    sc = block(dt=0.05, n_steps=4, dirichlet=(DirichletBC(tags=(LEFT,), offset=(0.1, -0.05), table=table),))
    traj = simulate(sc)
    d = sc.dirichlet_dofs
    for i, u in enumerate(traj.u):
        assert np.array_equal(u[d], sc.dirichlet_values(i * sc.dt))


def test_damped_bar_energy_decreases():
    v, t, side = rectangle(1.0, 0.1, 10, 1)
    mesh = build_mesh(v, t, side)
    sc = Scene(mesh, dirichlet=(DirichletBC(tags=(LEFT,)),), dt=0.01, n_steps=40)
    p = sc.default_params(50.0, 20.0)
    p.blocks["damping"][:] = [0.5, 0.2]
    X = sc.space.upsample @ sc.mesh.rest_vertices
    p.blocks["v0"][:, 1] = 0.5 * X[:, 0]
    sc = sc.with_params(p)
    traj = simulate(sc)
    phys = Physics(sc)
    E = [0.5 * v @ (phys.mass @ v) + elastic_energy(phys.geom, u, phys.field) for u, v in zip(traj.u, traj.v)]
    peak = max(E)
    assert all(b <= a + 1e-6 * peak for a, b in zip(E, E[1:]))
    assert E[-1] < E[0]


# --- static ---------------------------------------------------------------------

def test_static_zero_load():
    sc = block(model=LINEAR, dirichlet=(DirichletBC(tags=(LEFT,)),))
    assert np.all(static_solve(sc) == 0.0)


def test_static_bar_tip_displacement():
    # lam = 0 gives zero lateral contraction, so E = 2 mu in plane strain
    sf = io.parse_scene(scene_path("bar.json"))
    sc = sf.scene
    u = static_solve(sc).reshape(-1, 2)
    mu = sc.params.mu[0]
    traction = 8.0
    right = sc.space.tagged_nodes([RIGHT])
    assert np.allclose(u[right, 0], traction * 1.0 / (2 * mu), rtol=1e-10, atol=0)
    assert np.abs(u[:, 1]).max() < 1e-12


@pytest.mark.parametrize("order", [1, 2])
@pytest.mark.parametrize("model", [LINEAR, NEO_HOOKEAN])
def test_static_patch_test(order, model):
    v, t, side = rectangle(1.0, 1.0, 3, 3)
    v = v.copy()
    v[5] += [0.07, -0.04]
    v[10] += [-0.05, 0.06]
    mesh = build_mesh(v, t, side)
    A = ((0.01, 0.02), (-0.015, 0.005))
    sc = Scene(mesh, order=order, model=model,
               dirichlet=(DirichletBC(tags=(BOTTOM, RIGHT, TOP, LEFT), matrix=A),))
    sc = sc.with_params(sc.default_params(3.0, 2.0))
    u = static_solve(sc).reshape(-1, 2)
    X = sc.space.upsample @ sc.mesh.rest_vertices
    assert np.abs(u - X @ np.array(A).T).max() < 1e-10


def test_static_traction_balance():
    sc = block(model=LINEAR, dirichlet=(DirichletBC(tags=(LEFT,)),),
               neumann=(NeumannBC(RIGHT, (0.5, 0.2)),))
    u = static_solve(sc)
    h, _ = Physics(sc).forces(u, 0.0, jac=False)
    assert np.abs(h[sc.free_dofs]).max() < 1e-10


def test_static_unpinned_is_singular():
    sc = block(model=LINEAR, neumann=(NeumannBC(RIGHT, (1.0, 0.0)),))
    with pytest.raises(SingularSystem):
        static_solve(sc)
    sc = block(model=LINEAR, dirichlet=(DirichletBC(nodes=(0,)),))
    with pytest.raises(SingularSystem):
        static_solve(sc)
