"""Constitutive laws, strain-rate damping and volume-force assembly with derivative blocks.

All stress functions broadcast over leading batch dimensions: ``grad_u`` has
shape ``(..., 2, 2)`` with ``grad_u[..., i, j] = d u_i / d x_j``.  Fourth-order
tangents are indexed ``C[..., i, j, k, l] = d f_ij / d (grad u)_kl``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDeterminant

LINEAR = "linear"
NEO_HOOKEAN = "neohookean"

_I2 = np.eye(2)
_II = np.einsum("ik,jl->ijkl", _I2, _I2)


@dataclass
class MaterialField:
    lam: np.ndarray        # per element (Pa)
    mu: np.ndarray         # per element (Pa)
    density: np.ndarray    # per element (kg/m^2)
    model: str = NEO_HOOKEAN


@dataclass
class DampingParams:
    alpha: float = 0.0
    beta: float = 0.0


@dataclass
class StressEval:
    f: np.ndarray
    df_dgradu: np.ndarray
    df_dlambda: np.ndarray
    df_dmu: np.ndarray


def _bcast(x, grad_u):
    return np.asarray(x, dtype=float)[..., None, None] * np.ones_like(grad_u)


def linear_stress(grad_u, lam, mu, tangent=True):
    grad_u = np.asarray(grad_u, dtype=float)
    eps = 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))
    tr = eps[..., 0, 0] + eps[..., 1, 1]
    d_lam = tr[..., None, None] * _I2
    d_mu = 2.0 * eps
    lam_b = np.asarray(lam, dtype=float)[..., None, None]
    mu_b = np.asarray(mu, dtype=float)[..., None, None]
    f = lam_b * d_lam + mu_b * d_mu
    if not tangent:
        return StressEval(f, None, d_lam, d_mu)
    C = (np.asarray(lam, dtype=float)[..., None, None, None, None] * np.einsum("ij,kl->ijkl", _I2, _I2)
         + np.asarray(mu, dtype=float)[..., None, None, None, None]
         * (_II + np.einsum("il,jk->ijkl", _I2, _I2)))
    C = np.broadcast_to(C, grad_u.shape + (2, 2)).copy()
    return StressEval(f, C, d_lam, d_mu)


def _inv_t(F):
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    Q = np.empty_like(F)
    Q[..., 0, 0] = F[..., 1, 1] / det
    Q[..., 1, 1] = F[..., 0, 0] / det
    Q[..., 0, 1] = -F[..., 1, 0] / det
    Q[..., 1, 0] = -F[..., 0, 1] / det
    return Q, det


def neohookean_stress(grad_u, lam, mu, tangent=True):
    """First Piola stress mu (F - F^-T) + lam log(det F) F^-T and its derivatives.

    Tangent index order: d f_ij / d F_kl = mu (d_ik d_jl + Q_il Q_kj)
    + lam (Q_ij Q_kl - log J Q_il Q_kj), Q = F^-T.
    """
    grad_u = np.asarray(grad_u, dtype=float)
    F = grad_u + _I2
    Q, J = _inv_t(F)
    if np.any(J <= 0):
        raise NonPositiveDeterminant(f"det F = {np.min(J):.3e}")
    logJ = np.log(J)
    lam_a = np.asarray(lam, dtype=float)
    mu_a = np.asarray(mu, dtype=float)
    d_mu = F - Q
    d_lam = logJ[..., None, None] * Q
    f = mu_a[..., None, None] * d_mu + lam_a[..., None, None] * d_lam
    if not tangent:
        return StressEval(f, None, d_lam, d_mu)
    QQ_cross = np.einsum("...il,...kj->...ijkl", Q, Q)
    QQ = np.einsum("...ij,...kl->...ijkl", Q, Q)
    C = (mu_a[..., None, None, None, None] * (_II + QQ_cross)
         + lam_a[..., None, None, None, None] * (QQ - logJ[..., None, None, None, None] * QQ_cross))
    return StressEval(f, C, d_lam, d_mu)


def energy_density(model, grad_u, lam, mu):
    """Strain energy density whose F-derivative is the stress of ``stress``."""
    grad_u = np.asarray(grad_u, dtype=float)
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if model == LINEAR:
        eps = 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))
        tr = eps[..., 0, 0] + eps[..., 1, 1]
        return mu * np.einsum("...ij,...ij->...", eps, eps) + 0.5 * lam * tr * tr
    if model == NEO_HOOKEAN:
        F = grad_u + _I2
        J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
        if np.any(J <= 0):
            raise NonPositiveDeterminant(f"det F = {np.min(J):.3e}")
        logJ = np.log(J)
        return 0.5 * mu * (np.einsum("...ij,...ij->...", F, F) - 2.0) - mu * logJ + 0.5 * lam * logJ ** 2
    raise ValueError(f"unknown material model {model!r}")


def stress(model, grad_u, lam, mu, tangent=True):
    if model == LINEAR:
        return linear_stress(grad_u, lam, mu, tangent)
    if model == NEO_HOOKEAN:
        return neohookean_stress(grad_u, lam, mu, tangent)
    raise ValueError(f"unknown material model {model!r}")


def damping_stress(grad_u_i, grad_u_prev, alpha, beta, dt, tangents=True):
    """Viscous stress P = F (2 alpha Edot + beta tr(Edot) I) with backward-difference Fdot.

    Returns ``(P, dP/dgrad_u_i, dP/dgrad_u_prev, dP/dalpha, dP/dbeta)``; the two
    tangents are None when ``tangents`` is False.
    """
    gi = np.asarray(grad_u_i, dtype=float)
    gp = np.asarray(grad_u_prev, dtype=float)
    F = gi + _I2
    Fdot = (gi - gp) / dt
    Edot = 0.5 * (np.swapaxes(Fdot, -1, -2) @ F + np.swapaxes(F, -1, -2) @ Fdot)
    trE = Edot[..., 0, 0] + Edot[..., 1, 1]
    S = 2.0 * alpha * Edot + beta * trE[..., None, None] * _I2
    P = F @ S
    dP_dalpha = F @ (2.0 * Edot)
    dP_dbeta = F * trE[..., None, None]
    if not tangents:
        return P, None, None, dP_dalpha, dP_dbeta
    return P, damping_tangent(F, S, F / dt + Fdot, alpha, beta, True), \
        damping_tangent(F, S, -F / dt, alpha, beta, False), dP_dalpha, dP_dbeta


def damping_tangent(F, S, W, alpha, beta, with_s):
    """dP_ij/dF_kl = [d_ik S_lj] + alpha (F_il W_kj + d_lj (F W^T)_ik) + beta F_ij W_kl."""
    FWt = F @ np.swapaxes(W, -1, -2)
    T = alpha * (np.einsum("...il,...kj->...ijkl", F, W) + np.einsum("...ik,lj->...ijkl", FWt, _I2))
    T = T + beta * np.einsum("...ij,...kl->...ijkl", F, W)
    if with_s:
        T = T + np.einsum("ik,...lj->...ijkl", _I2, S)
    return T


# --- volume force assembly ---------------------------------------------------

def element_stress(geom, u, field, tangent=True):
    G = geom.grad(u)
    nq = G.shape[1]
    lam = np.repeat(field.lam[:, None], nq, axis=1)
    mu = np.repeat(field.mu[:, None], nq, axis=1)
    return G, stress(field.model, G, lam, mu, tangent)


def assemble_volume_force(geom, u, field):
    """Weak-form vector int f(grad u) : grad(phi_l) (the elastic energy gradient)."""
    _, ev = element_stress(geom, u, field, tangent=False)
    return geom.assemble_stress(ev.f)


def elastic_energy(geom, u, field):
    G = geom.grad(u)
    nq = G.shape[1]
    psi = energy_density(field.model, G, np.repeat(field.lam[:, None], nq, 1), np.repeat(field.mu[:, None], nq, 1))
    return float(np.sum(geom.wdet * psi))


def assemble_force_jacobian(geom, u, field):
    _, ev = element_stress(geom, u, field)
    return geom.assemble_tangent(ev.df_dgradu)


def shape_derivative_product_volume(geom, u, p, field):
    """Rest-vertex gradient of p^T h^v(q) with displacement coefficients held fixed."""
    G, ev = element_stress(geom, u, field)
    Gp = geom.grad(p)
    integrand = np.einsum("eqij,eqij->eq", ev.f, Gp)
    D_u = np.einsum("eqij,eqijkl->eqkl", Gp, ev.df_dgradu)
    return geom.shape_gradient(integrand, [(G, D_u), (Gp, ev.f)])


def material_derivative_product(geom, u, p, field):
    """Per-element (d/dlambda, d/dmu) of p^T h^v."""
    _, ev = element_stress(geom, u, field, tangent=False)
    Gp = geom.grad(p)
    d_lam = np.einsum("eq,eqij,eqij->e", geom.wdet, ev.df_dlambda, Gp)
    d_mu = np.einsum("eq,eqij,eqij->e", geom.wdet, ev.df_dmu, Gp)
    return d_lam, d_mu


def assemble_mass(geom, density):
    return geom.mass(np.asarray(density, dtype=float))


def mass_shape_derivative_product(geom, nu, v, density):
    return geom.mass_shape_product(nu, v, np.asarray(density, dtype=float))


# --- damping force ---------------------------------------------------------------

class DampingEval:
    """Damping force h^d(u_i, u_prev) on a geometry, with all derivative blocks."""

    def __init__(self, geom, u_i, u_prev, damping, dt, G=None):
        self.geom = geom
        self.dt = dt
        self.damping = damping
        self.G = geom.grad(u_i) if G is None else G
        self.Gp = geom.grad(u_prev)
        self.P, _, _, self.d_alpha, self.d_beta = damping_stress(
            self.G, self.Gp, damping.alpha, damping.beta, dt, tangents=False)
        self._tangents = None

    def _tan(self):
        if self._tangents is None:
            _, dc, dp, _, _ = damping_stress(self.G, self.Gp, self.damping.alpha, self.damping.beta, self.dt)
            self._tangents = (dc, dp)
        return self._tangents

    @property
    def d_cur(self):
        return self._tan()[0]

    @property
    def d_prev(self):
        return self._tan()[1]

    def force(self):
        return self.geom.assemble_stress(self.P)

    def jac_cur(self):
        return self.geom.assemble_tangent(self.d_cur)

    def jac_prev(self):
        return self.geom.assemble_tangent(self.d_prev)

    def shape_product(self, p):
        Gw = self.geom.grad(p)
        integrand = np.einsum("eqij,eqij->eq", self.P, Gw)
        D_cur = np.einsum("eqij,eqijkl->eqkl", Gw, self.d_cur)
        D_prev = np.einsum("eqij,eqijkl->eqkl", Gw, self.d_prev)
        return self.geom.shape_gradient(integrand, [(self.G, D_cur), (self.Gp, D_prev), (Gw, self.P)])

    def pseudo_potential(self, dt, damping):
        """Rate potential with gradient equal to the damping force up to O(|F - F_prev|^2).

        Uses E~ = (F^T F - Fp^T Fp) / 2 in place of dt * Edot; only used as a
        line-search merit, never in the residual.  Returns (value, DOF gradient).
        """
        F = self.G + _I2
        Fp = self.Gp + _I2
        Et = 0.5 * (np.swapaxes(F, -1, -2) @ F - np.swapaxes(Fp, -1, -2) @ Fp)
        tr = Et[..., 0, 0] + Et[..., 1, 1]
        a, b = damping.alpha, damping.beta
        psi = (a * np.einsum("...ij,...ij->...", Et, Et) + 0.5 * b * tr * tr) / dt
        P = F @ (2.0 * a * Et + b * tr[..., None, None] * _I2) / dt
        return float(np.sum(self.geom.wdet * psi)), self.geom.assemble_stress(P)

    def param_product(self, p):
        Gw = self.geom.grad(p)
        w = self.geom.wdet
        return np.array([np.einsum("eq,eqij,eqij->", w, self.d_alpha, Gw),
                         np.einsum("eq,eqij,eqij->", w, self.d_beta, Gw)])
