"""Lagged smoothed friction on the active contact pairs of the previous time step.

Normal force magnitude ``N_k``, tangent operator ``T_k`` and the active set are
evaluated at the lagged configuration ``X + u_prev``.  For a pair with stencil
``(p, e0, e1)`` the tangent operator is the 6-vector mapping stencil
displacements to the scalar relative sliding ``tau = T_k . (u_i - u_prev)``.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .contact import _PE, _PP0, _PP1, _scatter_dofs, _triplets, barrier, distance


@dataclass
class FrictionParams:
    pairs: list = field(default_factory=list)   # sorted (body m, body n) with m <= n
    gamma: np.ndarray = None                    # one coefficient per pair
    eta: float = 1e-3

    def __post_init__(self):
        self.pairs = [tuple(sorted(map(int, p))) for p in self.pairs]
        self.gamma = np.zeros(len(self.pairs)) if self.gamma is None else np.asarray(self.gamma, dtype=float)
        if len(self.gamma) != len(self.pairs):
            raise ValueError("one friction coefficient per body pair")
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    def index(self, m, n):
        try:
            return self.pairs.index(tuple(sorted((int(m), int(n)))))
        except ValueError:
            return -1


def mollifier(y, eta):
    """f_eta(y): quadratic ramp -y^2/eta^2 + 2y/eta on [0, eta), 1 beyond."""
    y = np.asarray(y, dtype=float)
    return np.where(y < eta, -(y / eta) ** 2 + 2 * y / eta, 1.0)


def sliding_profile(tau, eta):
    """g(tau) = f_eta(|tau|) sign(tau) and its derivative (finite at tau = 0)."""
    a = np.abs(tau)
    inner = a < eta
    g = np.where(inner, 2 * tau / eta - tau * a / eta**2, np.sign(tau))
    dg = np.where(inner, 2 / eta - 2 * a / eta**2, 0.0)
    return g, dg


_ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def tangent_operator(x, reg):
    """T (k, 6) and dT/dx (k, 6, 6) for stencils ``x`` at the lagged configuration."""
    n = len(x)
    T = np.zeros((n, 6))
    dT = np.zeros((n, 6, 6))
    p, e0, e1 = x[:, 0:2], x[:, 2:4], x[:, 4:6]
    I2 = np.eye(2)

    m = reg == _PE
    if np.any(m):
        e = e1[m] - e0[m]
        r = p[m] - e0[m]
        L2 = np.einsum("ki,ki->k", e, e)
        L = np.sqrt(L2)
        t = e / L[:, None]
        a = np.einsum("ki,ki->k", r, e) / L2
        P = (I2 - np.einsum("ki,kj->kij", t, t)) / L[:, None, None]
        dt = np.zeros((len(e), 2, 6))
        dt[:, :, 2:4] = -P
        dt[:, :, 4:6] = P
        da_de = r / L2[:, None] - 2 * (np.einsum("ki,ki->k", r, e) / L2**2)[:, None] * e
        da = np.zeros((len(e), 6))
        da[:, 0:2] = e / L2[:, None]
        da[:, 2:4] = -e / L2[:, None] - da_de
        da[:, 4:6] = da_de
        Tm = np.concatenate([t, -(1 - a)[:, None] * t, -a[:, None] * t], axis=1)
        dTm = np.zeros((len(e), 6, 6))
        dTm[:, 0:2] = dt
        dTm[:, 2:4] = -(1 - a)[:, None, None] * dt + np.einsum("ki,kj->kij", t, da)
        dTm[:, 4:6] = -a[:, None, None] * dt - np.einsum("ki,kj->kij", t, da)
        T[m], dT[m] = Tm, dTm

    for code, slot in ((_PP0, 2), (_PP1, 4)):
        m = reg == code
        if not np.any(m):
            continue
        s = p[m] - x[m, slot:slot + 2]
        ls = np.linalg.norm(s, axis=1)
        nrm = s / ls[:, None]
        tp = nrm @ _ROT.T
        dn = (I2 - np.einsum("ki,kj->kij", nrm, nrm)) / ls[:, None, None]
        dtp = np.einsum("ij,kjl->kil", _ROT, dn)          # d tp / d s
        Tm = np.zeros((len(s), 6))
        Tm[:, 0:2] = tp
        Tm[:, slot:slot + 2] = -tp
        dTs = np.zeros((len(s), 2, 6))
        dTs[:, :, 0:2] = dtp
        dTs[:, :, slot:slot + 2] = -dtp
        dTm = np.zeros((len(s), 6, 6))
        dTm[:, 0:2] = dTs
        dTm[:, slot:slot + 2] = -dTs
        T[m], dT[m] = Tm, dTm
    return T, dT


class FrictionLag:
    """Friction force h^f(u_i, u_prev) with frozen lagged data and its derivative blocks."""

    def __init__(self, contact, X, u_prev, fparams):
        self.contact = contact
        self.X = X
        self.fparams = fparams
        self.n_dofs = contact.n_dofs
        pos = X + np.asarray(u_prev).reshape(-1, 2)
        cset = contact.active_set(pos)
        gidx = np.array([fparams.index(m, n) for m, n in cset.body_pairs()], dtype=int).reshape(-1)
        keep = gidx >= 0
        self.cset = cset
        self.keep = np.flatnonzero(keep)
        self.gidx = gidx[keep]
        self.empty = len(self.keep) == 0
        if self.empty:
            return
        kappa, dhat = contact.params.kappa, contact.params.dhat
        self.nodes = cset.nodes[self.keep]
        self.dofs = cset.dofs[self.keep]
        x = pos[self.nodes].reshape(-1, 6)
        d, gd, Hd, reg = distance(x, order=2)
        _, b1, b2 = barrier(d, dhat)
        self.N = -kappa * b1
        self.dN = -kappa * b2[:, None] * gd
        self.T, self.dT = tangent_operator(x, reg)
        self.A = contact.vertex_areas(X)[self.nodes[:, 0]]
        self.u_prev = np.asarray(u_prev)

    def __len__(self):
        return 0 if self.empty else len(self.keep)

    def _state(self, u_i, gamma=None):
        gamma = self.fparams.gamma if gamma is None else gamma
        delta = (np.asarray(u_i) - self.u_prev)[self.dofs]
        tau = np.einsum("ki,ki->k", self.T, delta)
        g, dg = sliding_profile(tau, self.fparams.eta)
        return gamma[self.gidx], delta, tau, g, dg

    def potential(self, u_i):
        """sum_k A_k gamma N_k F0(tau_k) with F0' = g; minus its gradient is the friction force."""
        if self.empty:
            return 0.0
        gam, _, tau, _, _ = self._state(u_i)
        a = np.abs(tau)
        eta = self.fparams.eta
        F0 = np.where(a < eta, a * a / eta - a ** 3 / (3 * eta * eta), a - eta / 3.0)
        return float(np.sum(self.A * gam * self.N * F0))

    def pair_forces(self, u_i):
        """Per-pair F^f_k (before area weighting)."""
        if self.empty:
            return np.zeros((0, 6))
        gam, _, _, g, _ = self._state(u_i)
        return -(gam * self.N * g)[:, None] * self.T

    def force(self, u_i):
        if self.empty:
            return np.zeros(self.n_dofs)
        return _scatter_dofs(self.dofs, self.A[:, None] * self.pair_forces(u_i), self.n_dofs)

    def _d_delta(self, u_i):
        gam, _, _, _, dg = self._state(u_i)
        return -(gam * self.N * dg)[:, None, None] * np.einsum("ki,kj->kij", self.T, self.T)

    def _d_x(self, u_i):
        gam, delta, _, g, dg = self._state(u_i)
        term_n = np.einsum("ki,kj->kij", self.T, self.dN) * g[:, None, None]
        term_t = (self.N * g)[:, None, None] * self.dT
        term_tau = (self.N * dg)[:, None, None] * np.einsum("ki,kj->kij", self.T,
                                                            np.einsum("ki,kij->kj", delta, self.dT))
        return -gam[:, None, None] * (term_n + term_t + term_tau)

    def jac_cur(self, u_i):
        if self.empty:
            return sp.csr_matrix((self.n_dofs, self.n_dofs))
        return _triplets(self.dofs, self.A[:, None, None] * self._d_delta(u_i), self.n_dofs)

    def jac_prev(self, u_i):
        if self.empty:
            return sp.csr_matrix((self.n_dofs, self.n_dofs))
        blocks = self._d_x(u_i) - self._d_delta(u_i)
        return _triplets(self.dofs, self.A[:, None, None] * blocks, self.n_dofs)

    def shape_product(self, u_i, p):
        """Rest-vertex gradient of p^T h^f with u_i, u_prev held fixed."""
        space = self.contact.space
        if self.empty:
            return np.zeros((space.mesh.n_vertices, 2))
        pk = np.asarray(p)[self.dofs]
        dFx = self._d_x(u_i)
        g_nodes = _scatter_dofs(self.dofs, self.A[:, None] * np.einsum("kij,ki->kj", dFx, pk),
                                self.n_dofs).reshape(-1, 2)
        w = np.einsum("ki,ki->k", self.pair_forces(u_i), pk)
        g_nodes = g_nodes + self.contact.area_gradient_scatter(self.X, self.nodes[:, 0], w)
        return np.asarray(space.upsample.T @ g_nodes)

    def gamma_product(self, u_i, p):
        out = np.zeros(len(self.fparams.gamma))
        if self.empty:
            return out
        _, _, _, g, _ = self._state(u_i)
        pk = np.asarray(p)[self.dofs]
        per_pair = -self.A * self.N * g * np.einsum("ki,ki->k", self.T, pk)
        return np.bincount(self.gidx, weights=per_pair, minlength=len(out))
