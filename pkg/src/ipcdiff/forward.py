"""Static and BDF time-stepping forward solves with an intersection-aware Newton method."""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bdf import BdfScheme
from .errors import (DegenerateElement, ForwardSolveFailure, NewtonDivergence,
                     NonPositiveDeterminant, NonPositiveDistance, SingularSystem)
from .friction import FrictionLag
from .linalg import Factorization
from .materials import NEO_HOOKEAN, DampingEval, element_stress, assemble_mass, elastic_energy

_INFEASIBLE = (NonPositiveDeterminant, NonPositiveDistance, DegenerateElement)


# --- Newton --------------------------------------------------------------------------

@dataclass
class NewtonInfo:
    iterations: int = 0
    residual_norms: list = field(default_factory=list)
    step_lengths: list = field(default_factory=list)


def newton_solve(residual, jacobian, x0, ccd_filter=None, tol=1e-10, xtol=None,
                 max_iter=200, min_step=1e-12, step=None, memory=5, merit=None):
    """Damped Newton on ``residual(x) = 0``.

    ``ccd_filter(x, dx)`` returns the largest admissible fraction of ``dx``.
    Trial points raising a feasibility error count as rejected.  The largest
    admissible step is accepted if it brings the residual norm below the largest
    of the last ``memory`` norms.  Otherwise, when ``merit`` is given
    (``merit(x) -> (value, gradient)``, typically the incremental potential), an
    Armijo backtracking on it is tried, and failing that a backtracking on the
    same nonmonotone residual test.  Converged when the residual norm is at most ``tol`` and,
    if ``xtol`` is given, the next Newton step is at most ``xtol`` in max-norm.
    Returns ``(x, NewtonInfo)``.
    """
    x = np.array(x0, dtype=float)
    info = NewtonInfo()
    r = residual(x)
    rn = np.linalg.norm(r) if len(r) else 0.0
    info.residual_norms.append(rn)
    for _ in range(max_iter):
        if rn == 0.0 or (rn <= tol and xtol is None):
            return x, info
        dx = Factorization(jacobian(x), step).solve(-r)
        if rn <= tol and np.linalg.norm(dx, np.inf) <= xtol:
            return x, info
        t_max = 1.0 if ccd_filter is None else min(1.0, ccd_filter(x, dx))
        accepted = False
        t = t_max
        try:
            r_new = residual(x + t * dx)
            rn_new = np.linalg.norm(r_new)
            accepted = rn_new <= max(info.residual_norms[-memory:]) - 1e-4 * t * rn
        except _INFEASIBLE:
            pass
        if not accepted and merit is not None:
            m0, g0 = merit(x)
            slope = float(g0 @ dx)
            # skip when the predicted decrease is below the merit's round-off
            usable = slope < 0 and -slope * t_max > 1e-13 * max(abs(m0), 1e-300)
            t = t_max
            while usable and t >= 1e-8:
                try:
                    if merit(x + t * dx)[0] <= m0 + 1e-4 * t * slope:
                        r_new = residual(x + t * dx)
                        rn_new = np.linalg.norm(r_new)
                        accepted = True
                        break
                except _INFEASIBLE:
                    pass
                t *= 0.5
        if not accepted:
            t = 0.5 * t_max
            while t >= min_step:
                try:
                    r_new = residual(x + t * dx)
                    rn_new = np.linalg.norm(r_new)
                    if rn_new <= max(info.residual_norms[-memory:]) - 1e-4 * t * rn:
                        accepted = True
                        break
                except _INFEASIBLE:
                    pass
                t *= 0.5
        if not accepted:
            if rn <= tol:
                return x, info          # stagnated at round-off
            raise NewtonDivergence(f"line search step below {min_step:g} at residual {rn:.3e}", step)
        x = x + t * dx
        r, rn = r_new, rn_new
        info.iterations += 1
        info.residual_norms.append(rn)
        info.step_lengths.append(t)
    if rn <= tol:
        return x, info
    raise NewtonDivergence(f"no convergence after {max_iter} iterations (residual {rn:.3e})", step)


# --- force evaluation ------------------------------------------------------------------

class Physics:
    """Parameter-dependent operators of a scene: geometry, mass and force kernels."""

    def __init__(self, scene, params=None):
        self.scene = scene
        self.params = scene.params if params is None else params
        self.space = scene.space
        self.geom = self.space.geometry(self.params.shape)
        self.X = self.geom.X
        self.field = scene.material(self.params)
        self.damp = scene.damping(self.params)
        self.has_damping = bool(self.damp.alpha or self.damp.beta)
        self.contact = scene.contact
        self.fparams = scene.friction(self.params)
        self.free = scene.free_dofs
        self.fixed = scene.dirichlet_dofs
        self.n_dofs = self.space.n_dofs
        self._mass = None
        self._fext = {}

    @property
    def mass(self):
        if self._mass is None:
            self._mass = assemble_mass(self.geom, self.scene.density)
        return self._mass

    def external(self, t):
        if t not in self._fext:
            self._fext[t] = self.scene.external_force(self.geom, t)
        return self._fext[t]

    def friction_lag(self, u_prev):
        if self.fparams is None:
            return None
        return FrictionLag(self.contact, self.X, u_prev, self.fparams)

    def forces(self, u, t, u_prev=None, lag=None, jac=True):
        """h = f_ext - grad E_el - grad E_c - f_damp + f_fric and (optionally) dh/du."""
        G, ev = element_stress(self.geom, u, self.field, tangent=jac)
        P, C = ev.f, ev.df_dgradu
        if u_prev is not None and self.has_damping:
            de = DampingEval(self.geom, u, u_prev, self.damp, self.scene.dt, G=G)
            P = P + de.P
            if jac:
                C = C + de.d_cur
        h = self.external(t) - self.geom.assemble_stress(P)
        dh = -self.geom.assemble_tangent(C) if jac else None
        if self.contact is not None:
            ce = self.contact.evaluate(self.X, u)
            h -= ce.grad
            if jac:
                dh = dh - ce.hess
        if lag is not None:
            h += lag.force(u)
            if jac:
                dh = dh + lag.jac_cur(u)
        return h, dh

    def potential(self, u, t, u_prev=None, lag=None):
        """Merit part E_el + E_c + D_f - f_ext . u (+ damping rate potential).

        Returns ``(value, correction)`` with correction = grad(value) + h(u), which
        vanishes unless damping is active.
        """
        val = elastic_energy(self.geom, u, self.field) - float(self.external(t) @ u)
        corr = np.zeros(self.n_dofs)
        if self.contact is not None:
            val += self.contact.evaluate(self.X, u).energy
        if lag is not None:
            val += lag.potential(u)
        if u_prev is not None and self.has_damping:
            de = DampingEval(self.geom, u, u_prev, self.damp, self.scene.dt)
            psi, dpsi = de.pseudo_potential(self.scene.dt, self.damp)
            val += psi
            corr = dpsi - de.force()
        return val, corr

    def positions(self, u):
        return self.X + np.asarray(u).reshape(-1, 2)

    def ccd(self, u, du):
        if self.contact is None:
            return 1.0
        return self.contact.ccd_max_step(self.positions(u), du)

    def min_distance(self, u):
        if self.contact is None:
            return np.inf
        return self.contact.min_distance(self.positions(u))

    def min_det(self, u):
        G = self.geom.grad(u)
        F = G + np.eye(2)
        return float(np.min(F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]))

    def check_state(self, u):
        if self.scene.model == NEO_HOOKEAN and self.min_det(u) <= 0:
            raise NonPositiveDeterminant("inverted element")


def _restrict(A, idx):
    A = sp.csr_matrix(A)
    return A[idx][:, idx]


# --- transient -----------------------------------------------------------------------

@dataclass
class Trajectory:
    u: list
    v: list
    dt: float
    bdf_order: int
    stats: list = field(default_factory=list)       # per step: newton iterations, min distance, min det F
    active: list = field(default_factory=list)      # per step: indices of active contact candidates

    @property
    def n_steps(self):
        return len(self.u) - 1

    def times(self):
        return np.arange(len(self.u)) * self.dt


class TransientStep:
    """Residual of step i on the free DOFs given the stored history."""

    def __init__(self, phys, scheme, i, u_hist, v_hist):
        self.phys = phys
        self.scheme = scheme
        self.i = i
        self.t = i * phys.scene.dt
        self.beta_dt = scheme.beta(i) * phys.scene.dt
        self.u_prev = u_hist[i - 1]
        self.ucomb = scheme.combine(np.zeros(phys.n_dofs), u_hist, i)     # sum alpha_j u^{i-j}
        self.vcomb = scheme.combine(np.zeros(phys.n_dofs), v_hist, i)
        self.lag = phys.friction_lag(self.u_prev)
        self.u_fixed = phys.scene.dirichlet_values(self.t)
        self._cache = None

    def full(self, x):
        u = np.empty(self.phys.n_dofs)
        u[self.phys.free] = x
        u[self.phys.fixed] = self.u_fixed
        return u

    def velocity(self, u):
        return (u + self.ucomb) / self.beta_dt

    def _eval(self, x, jac):
        key = x.tobytes()
        if self._cache is not None and self._cache[0] == key and (self._cache[3] is not None or not jac):
            return self._cache
        u = self.full(x)
        self.phys.check_state(u)
        h, dh = self.phys.forces(u, self.t, self.u_prev, self.lag, jac)
        M = self.phys.mass
        r = M @ (self.velocity(u) + self.vcomb) - self.beta_dt * h
        J = (M / self.beta_dt - self.beta_dt * dh) if jac else None
        self._cache = (key, u, r, J)
        return self._cache

    def residual(self, x):
        return self._eval(x, False)[2][self.phys.free]

    def jacobian(self, x):
        return _restrict(self._eval(x, True)[3], self.phys.free)

    def merit(self, x):
        """Incremental potential of the step and its gradient on the free DOFs."""
        u = self.full(x)
        self.phys.check_state(u)
        val, corr = self.phys.potential(u, self.t, self.u_prev, self.lag)
        w = u + self.ucomb + self.beta_dt * self.vcomb
        val += 0.5 * float(w @ (self.phys.mass @ w)) / self.beta_dt ** 2
        r = self._eval(x, False)[2]
        return val, (r / self.beta_dt + corr)[self.phys.free]

    def full_jacobian(self, u):
        return self._eval(u[self.phys.free], True)[3]


def _char_length(phys):
    s = phys.params.shape
    return float(np.linalg.norm(s.max(axis=0) - s.min(axis=0)))


def solve_step(phys, scheme, i, u_hist, v_hist):
    """Solve step i; returns (u^i, v^i, NewtonInfo)."""
    scene = phys.scene
    st = TransientStep(phys, scheme, i, u_hist, v_hist)
    free = phys.free
    u_prev = u_hist[i - 1]
    start = u_prev.copy()
    start[phys.fixed] = st.u_fixed
    jump = start - u_prev
    if np.any(jump) and phys.ccd(u_prev, jump) < 1.0:
        raise ForwardSolveFailure(f"step {i}: prescribed motion causes an intersection")
    x0 = start[free]
    M = phys.mass
    v_char = max(np.abs(v_hist[i - 1]).max(), np.linalg.norm(scene.gravity) * scene.dt, 1e-12)
    scale = max(abs(M).sum(axis=1).max() * v_char, np.linalg.norm(st.residual(x0)))
    filt = (lambda x, d: phys.ccd(st.full(x), _pad(d, free, phys.n_dofs))) if phys.contact is not None else None
    x, info = newton_solve(st.residual, st.jacobian, x0, filt, tol=1e-10 * scale,
                           xtol=1e-13 * _char_length(phys), step=i, merit=st.merit)
    u = st.full(x)
    return u, st.velocity(u), info


def _pad(d, free, n):
    out = np.zeros(n)
    out[free] = d
    return out


def simulate(scene, scheme=None, params=None):
    """Run ``scene.n_steps`` BDF steps and store the full trajectory."""
    scheme = BdfScheme(scene.bdf_order) if scheme is None else scheme
    phys = Physics(scene, params)
    u0, v0 = scene.initial_state(phys.params)
    phys.check_state(u0)
    if phys.contact is not None and phys.min_distance(u0) <= 0:
        raise ForwardSolveFailure("initial state is intersecting")
    traj = Trajectory([u0], [v0], scene.dt, scheme.order)
    traj.stats.append(_stats(phys, u0, 0))
    traj.active.append(_active(phys, u0))
    for i in range(1, scene.n_steps + 1):
        u, v, info = solve_step(phys, scheme, i, traj.u, traj.v)
        traj.u.append(u)
        traj.v.append(v)
        traj.stats.append(_stats(phys, u, info.iterations))
        traj.active.append(_active(phys, u))
    return traj


def _stats(phys, u, iters):
    return {"newton_iterations": int(iters), "min_distance": float(phys.min_distance(u)),
            "min_det": phys.min_det(u)}


def _active(phys, u):
    if phys.contact is None:
        return np.zeros(0, dtype=int)
    return phys.contact.active_set(phys.positions(u)).idx


def residual(scene, u_i, u_hist, v_hist, scheme, i, params=None):
    """Free-DOF residual of step i at the full displacement ``u_i``."""
    phys = Physics(scene, params)
    st = TransientStep(phys, scheme, i, u_hist, v_hist)
    return st.residual(np.asarray(u_i)[phys.free])


# --- static --------------------------------------------------------------------------

class StaticProblem:
    """H(u) = grad E_el + grad E_c - f_ext on the free DOFs (friction excluded)."""

    def __init__(self, phys, t=0.0, load=1.0):
        self.phys = phys
        self.t = t
        self.load = load
        self.u_fixed = load * phys.scene.dirichlet_values(t)

    def full(self, x):
        u = np.empty(self.phys.n_dofs)
        u[self.phys.free] = x
        u[self.phys.fixed] = self.u_fixed
        return u

    def full_residual(self, u, jac=True):
        self.phys.check_state(u)
        h, dh = self.phys.forces(u, self.t, jac=jac)
        # forces() includes the full external load; rescale it for load stepping
        h = h + (1.0 - self.load) * self.phys.external(self.t)
        return -h, (-dh if jac else None)

    def residual(self, x):
        return self.full_residual(self.full(x), jac=False)[0][self.phys.free]

    def merit(self, x):
        u = self.full(x)
        self.phys.check_state(u)
        val, _ = self.phys.potential(u, self.t)
        val += (1.0 - self.load) * float(self.phys.external(self.t) @ u)
        return val, self.residual(x)

    def jacobian(self, x):
        return _restrict(self.full_residual(self.full(x))[1], self.phys.free)


def _check_pinned(phys):
    """Raise SingularSystem when a body keeps a rigid mode free and has no contact."""
    scene = phys.scene
    fixed = set(phys.fixed.tolist())
    X = phys.X
    for b in range(scene.mesh.n_bodies):
        nodes = scene.space.body_nodes(b)
        rows = []
        for n in nodes:
            for c in range(2):
                if 2 * n + c in fixed:
                    mode = [1.0 if c == 0 else 0.0, 1.0 if c == 1 else 0.0,
                            -X[n, 1] if c == 0 else X[n, 0]]
                    rows.append(mode)
        if len(rows) < 3 or np.linalg.matrix_rank(np.array(rows)) < 3:
            if phys.contact is None or len(phys.contact.active_set(X)) == 0:
                raise SingularSystem(f"body {b} has unconstrained rigid modes")


def static_solve(scene, params=None, t=0.0, load_steps=1):
    phys = Physics(scene, params)
    _check_pinned(phys)
    u = np.zeros(phys.n_dofs)
    filt = (lambda x, d: phys.ccd(prob.full(x), _pad(d, phys.free, phys.n_dofs))) if phys.contact else None
    for k in range(1, load_steps + 1):
        prob = StaticProblem(phys, t, k / load_steps)
        x0 = u[phys.free]
        f = prob.residual(x0)
        scale = max(np.linalg.norm(phys.external(t)), np.linalg.norm(f), 1e-300)
        x, _ = newton_solve(prob.residual, prob.jacobian, x0, filt, tol=1e-10 * scale,
                            xtol=1e-13 * _char_length(phys), merit=prob.merit)
        u = prob.full(x)
    return u
