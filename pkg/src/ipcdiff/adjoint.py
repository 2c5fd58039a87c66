"""Discrete adjoint of the static and BDF forward problems and gradient accumulation.

Transient constraints for i >= 1 (free DOF rows only):

    C2_i = M (v^i + sum_j a^i_j v^{i-j}) - b_i dt h^i(u^i, u^{i-1}, q)
    C1_i = u^i + sum_j a^i_j u^{i-j} - b_i dt v^i

with multipliers p_i (C2) and mu_i = M nu_i (C1); step 0 carries v^0 = g^v(q)
and u^0 = g^u(q) with multipliers p_0 and mu_0.  Objectives depend on u only.
"""
from dataclasses import dataclass

import numpy as np

from .bdf import BdfScheme
from .forward import Physics, StaticProblem, TransientStep, _restrict
from .friction import FrictionLag
from .linalg import Factorization
from .materials import (DampingEval, mass_shape_derivative_product, material_derivative_product,
                        shape_derivative_product_volume)
from .scene import ParameterSet


@dataclass
class AdjointState:
    p: list          # p_0 .. p_N, full DOF vectors, zero on Dirichlet DOFs
    mu: list         # mu_0 .. mu_N (mu_i = M nu_i on free rows)
    nu: list         # nu_1 .. nu_N (index 0 unused, zero)
    objective: float = 0.0


# --- per-force parameter products -----------------------------------------------------

def _zero_grad(phys):
    return phys.params.zeros_like()


def force_parameter_product(phys, u, t, p, u_prev=None, lag=None):
    """p^T d h / d q as a ParameterSet (u, u_prev held fixed)."""
    g = _zero_grad(phys)
    geom = phys.geom
    shape = phys.scene.external_shape_product(geom, t, p)
    shape -= shape_derivative_product_volume(geom, u, p, phys.field)
    d_lam, d_mu = material_derivative_product(geom, u, p, phys.field)
    g.blocks["lam"] -= d_lam
    g.blocks["mu"] -= d_mu
    if phys.contact is not None:
        shape -= phys.contact.evaluate(phys.X, u).shape_product(p)
    if u_prev is not None:
        de = DampingEval(geom, u, u_prev, phys.damp, phys.scene.dt)
        shape -= de.shape_product(p)
        g.blocks["damping"] -= de.param_product(p)
    if lag is not None:
        shape += lag.shape_product(u, p)
        g.blocks["gamma"] += lag.gamma_product(u, p)
    g.blocks["shape"] += shape
    return g


def cross_product(phys, u_next, u, p_next):
    """(d h^{i+1} / d u^i)^T p_{i+1}: damping and lagged friction depend on the previous step."""
    out = np.zeros(phys.n_dofs)
    if phys.has_damping:
        de = DampingEval(phys.geom, u_next, u, phys.damp, phys.scene.dt)
        out -= de.jac_prev().T @ p_next
    if phys.fparams is not None:
        lag = FrictionLag(phys.contact, phys.X, u, phys.fparams)
        out += lag.jac_prev(u_next).T @ p_next
    return out


# --- static -------------------------------------------------------------------------

def static_adjoint(u, scene, objective, params=None):
    """Solve (dH/du)^T p = -(dJ/du)^T on the free DOFs, H the static residual."""
    phys = Physics(scene, params)
    prob = StaticProblem(phys)
    _, A = prob.full_residual(u)
    _, dJ, _ = objective.evaluate_step(phys, u, None, 0.0, need=("du",))
    p = np.zeros(phys.n_dofs)
    p[phys.free] = Factorization(_restrict(A, phys.free)).solve(-dJ[phys.free], transpose=True)
    return p


def static_gradient(u, p, scene, objective, params=None):
    """dJ/dq = dJ/dq|_u + p^T dH/dq with H = -h."""
    phys = Physics(scene, params)
    J, _, dq = objective.evaluate_step(phys, u, None, 0.0, need=("dq",))
    g = dq.axpy(-1.0, force_parameter_product(phys, u, 0.0, p))
    return J, g


def static_objective_gradient(scene, objective, params=None):
    from .forward import static_solve
    u = static_solve(scene, params)
    p = static_adjoint(u, scene, objective, params)
    J, g = static_gradient(u, p, scene, objective, params)
    return J, g, u, p


# --- transient ------------------------------------------------------------------------

def transient_adjoint(traj, scene, scheme=None, objective=None, params=None):
    """Backward sweep i = N..1 followed by the step-0 conditions."""
    scheme = BdfScheme(traj.bdf_order) if scheme is None else scheme
    phys = Physics(scene, params)
    N = traj.n_steps
    n = phys.n_dofs
    free = phys.free
    M = phys.mass
    dt = scene.dt
    p = [np.zeros(n) for _ in range(N + 1)]
    mu = [np.zeros(n) for _ in range(N + 1)]
    nu = [np.zeros(n) for _ in range(N + 1)]
    cross = np.zeros(n)             # b_{i+1} dt (d h^{i+1}/d u^i)^T p_{i+1}
    J_total = 0.0
    for i in range(N, 0, -1):
        u = traj.u[i]
        J_i, dJ, _ = objective.evaluate_step(phys, u, i, i * dt, need=("du",))
        J_total += J_i
        b_dt = scheme.beta(i) * dt
        P = np.zeros(n)
        mu_sum = np.zeros(n)
        for j in range(1, scheme.order + 1):
            if i + j <= N:
                a = scheme.alpha_coef(i + j, j)
                P += a * p[i + j]
                mu_sum += a * mu[i + j]
        rhs = -dJ - (M @ P) / b_dt - mu_sum + cross
        st = TransientStep(phys, scheme, i, traj.u, traj.v)
        A = _restrict(st.full_jacobian(u), free)
        p[i][free] = Factorization(A, step=i).solve(rhs[free], transpose=True)
        mu[i][free] = (M @ (p[i] + P))[free] / b_dt
        nu[i] = (p[i] + P) / b_dt
        cross = scheme.beta(i) * dt * cross_product(phys, u, traj.u[i - 1], p[i])
    J0, dJ0, _ = objective.evaluate_step(phys, traj.u[0], 0, 0.0, need=("du",))
    J_total += J0
    p0 = np.zeros(n)
    mu0 = -dJ0 + cross
    for j in range(1, scheme.order + 1):
        if j <= N:
            a = scheme.alpha_coef(j, j)
            p0 -= a * (M @ p[j])
            mu0 -= a * mu[j]
    p[0][free] = p0[free]
    mu[0][free] = mu0[free]
    return AdjointState(p, mu, nu, J_total)


def accumulate_gradient(traj, state, scene, scheme=None, objective=None, params=None):
    """Assemble dJ/dq from the stored trajectory and adjoint solution."""
    scheme = BdfScheme(traj.bdf_order) if scheme is None else scheme
    phys = Physics(scene, params)
    dt = scene.dt
    grad = _zero_grad(phys)
    for i in range(0, traj.n_steps + 1):
        _, _, dq = objective.evaluate_step(phys, traj.u[i], i, i * dt, need=("dq",))
        grad = grad.axpy(1.0, dq)
    for i in range(1, traj.n_steps + 1):
        u, pi = traj.u[i], state.p[i]
        if not np.any(pi):
            continue
        b_dt = scheme.beta(i) * dt
        w = scheme.combine(traj.v[i], traj.v, i)
        grad.blocks["shape"] += mass_shape_derivative_product(phys.geom, pi, w, scene.density)
        lag = FrictionLag(phys.contact, phys.X, traj.u[i - 1], phys.fparams) if phys.fparams is not None else None
        prod = force_parameter_product(phys, u, i * dt, pi, traj.u[i - 1], lag)
        grad = grad.axpy(-b_dt, prod)
    # initial conditions: u^0 = g^u, v^0 = g^v with identity on free DOFs
    free = phys.free
    gu = np.zeros(phys.n_dofs)
    gv = np.zeros(phys.n_dofs)
    gu[free] = -state.mu[0][free]
    gv[free] = -state.p[0][free]
    grad.blocks["u0"] += gu.reshape(-1, 2)
    grad.blocks["v0"] += gv.reshape(-1, 2)
    return grad


def transient_gradient(scene, objective, scheme=None, params=None, traj=None):
    """Forward solve (unless given), adjoint sweep and gradient.  Returns (J, grad, traj, state)."""
    from .forward import simulate
    scheme = BdfScheme(scene.bdf_order) if scheme is None else scheme
    if traj is None:
        traj = simulate(scene, scheme, params)
    state = transient_adjoint(traj, scene, scheme, objective, params)
    grad = accumulate_gradient(traj, state, scene, scheme, objective, params)
    return state.objective, grad, traj, state


def initial_condition_jacobian(scene, mode="node"):
    """Map from reduced initial-condition parameters to per-node (u0 or v0) values.

    ``node``: identity on free DOFs.  ``body``: one 2-vector per body broadcast
    to all of its nodes.  Rows of Dirichlet DOFs are zero.  Returns a dense
    (n_dofs, n_reduced) array.
    """
    space = scene.space
    n = space.n_dofs
    if mode == "node":
        Jm = np.eye(n)
    elif mode == "body":
        nb = scene.mesh.n_bodies
        Jm = np.zeros((n, 2 * nb))
        for b in range(nb):
            nodes = space.body_nodes(b)
            for c in range(2):
                Jm[2 * nodes + c, 2 * b + c] = 1.0
    else:
        raise ValueError(f"unknown initial-condition mode {mode!r}")
    Jm[scene.dirichlet_dofs] = 0.0
    return Jm
