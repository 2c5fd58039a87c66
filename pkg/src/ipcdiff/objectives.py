"""Objective functionals with their displacement (R) and parameter (S) derivatives.

A term is evaluated on one state ``u`` of a :class:`~ipcdiff.forward.Physics`
and returns its value, d/du as a full DOF vector and d/dq as a ParameterSet.
Shape derivatives follow the perturbed-domain convention: nodal displacement
coefficients are held fixed while rest vertices move.  Transient objectives are
sums over steps of per-step values scaled by time weights.
"""
import numpy as np

from .errors import UnknownKind
from .materials import stress

TIME_MODES = ("dt", "final", "once", "all")


def penalty(z):
    """phi(z) = z^2 for z > 0, else 0, and its derivative (0 at the kink)."""
    z = np.asarray(z, dtype=float)
    pos = z > 0
    return np.where(pos, z * z, 0.0), np.where(pos, 2.0 * z, 0.0)


class Term:
    """Base class.  Subclasses set ``kind`` and implement ``evaluate``."""

    kind = None
    uses_u = True

    def __init__(self, weight=1.0, body=None, time=None):
        self.weight = float(weight)
        if not np.isfinite(self.weight):
            raise ValueError("objective weight must be finite")
        self.body = body
        self.time = time if time is not None else ("dt" if self.uses_u else "once")
        if isinstance(self.time, str) and self.time not in TIME_MODES:
            raise ValueError(f"unknown time weighting {self.time!r}")

    def time_weight(self, i, n_steps, dt):
        """Quadrature weight of step i (None for a static solve)."""
        if i is None:
            return 1.0
        mode = self.time
        if not isinstance(mode, str):
            return float(mode[i])
        if mode == "dt":
            return dt if i >= 1 else 0.0
        if mode == "final":
            return 1.0 if i == n_steps else 0.0
        if mode == "once":
            return 1.0 if i == 0 else 0.0
        return 1.0

    def element_mask(self, phys):
        if self.body is None:
            return np.ones(phys.geom.wdet.shape[0])
        return (phys.scene.mesh.body_id == self.body).astype(float)

    def evaluate(self, phys, u, i, need):
        raise NotImplementedError

    def params_dict(self):
        d = {"kind": self.kind, "weight": self.weight, "time": self.time}
        if self.body is not None:
            d["body"] = self.body
        return d


def _zero_du(phys):
    return np.zeros(phys.n_dofs)


# --- stress ------------------------------------------------------------------

def _stress_state(phys, u):
    geom, field = phys.geom, phys.field
    G = geom.grad(u)
    nq = G.shape[1]
    ev = stress(field.model, G, np.repeat(field.lam[:, None], nq, 1), np.repeat(field.mu[:, None], nq, 1))
    s = np.sqrt(np.einsum("eqij,eqij->eq", ev.f, ev.f))
    return G, ev, s


def _stress_chain(phys, G, ev, dj_df, dq, scale):
    """Add d/dq and return d/du of int j where dj/df = dj_df (j values carried separately)."""
    geom = phys.geom
    D = np.einsum("eqij,eqijkl->eqkl", dj_df, ev.df_dgradu)
    du = scale * geom.assemble_stress(D)
    dq.blocks["lam"] += scale * np.einsum("eq,eqij,eqij->e", geom.wdet, dj_df, ev.df_dlambda)
    dq.blocks["mu"] += scale * np.einsum("eq,eqij,eqij->e", geom.wdet, dj_df, ev.df_dmu)
    return du, D


class StressLp(Term):
    """(int ||f||_F^p)^(1/p) over the region."""

    kind = "stress_lp"

    def __init__(self, p=2.0, **kw):
        super().__init__(**kw)
        self.p = float(p)
        if self.p < 2:
            raise ValueError("stress norm exponent must be >= 2")

    def evaluate(self, phys, u, i, need):
        geom = phys.geom
        p = self.p
        mask = self.element_mask(phys)[:, None]
        G, ev, s = _stress_state(phys, u)
        sp = s ** p * mask
        integral = float(np.sum(geom.wdet * sp))
        J = integral ** (1.0 / p)
        dq = phys.params.zeros_like()
        du = _zero_du(phys)
        if not need or integral <= 0.0:
            return J, du, dq
        chain = (1.0 / p) * integral ** ((1.0 - p) / p)
        dj_df = (p * s ** (p - 2) * mask)[..., None, None] * ev.f
        du, D = _stress_chain(phys, G, ev, dj_df, dq, chain)
        if "dq" in need:
            dq.blocks["shape"] += chain * geom.shape_gradient(sp, [(G, D)])
        return J, du, dq

    def params_dict(self):
        return {**super().params_dict(), "p": self.p}


class StressBound(Term):
    """int phi(||f||_F - s_t): quadratic penalty on stress above a threshold."""

    kind = "stress_bound"

    def __init__(self, threshold=0.0, **kw):
        super().__init__(**kw)
        self.threshold = float(threshold)

    def evaluate(self, phys, u, i, need):
        geom = phys.geom
        mask = self.element_mask(phys)[:, None]
        G, ev, s = _stress_state(phys, u)
        val, dval = penalty(s - self.threshold)
        val = val * mask
        J = float(np.sum(geom.wdet * val))
        dq = phys.params.zeros_like()
        if not need:
            return J, _zero_du(phys), dq
        safe = np.where(s > 0, s, 1.0)
        dj_df = (dval * mask / safe)[..., None, None] * ev.f
        du, D = _stress_chain(phys, G, ev, dj_df, dq, 1.0)
        if "dq" in need:
            dq.blocks["shape"] += geom.shape_gradient(val, [(G, D)])
        return J, du, dq

    def params_dict(self):
        return {**super().params_dict(), "threshold": self.threshold}


# --- target deformation ------------------------------------------------------

def _step_data(data, i, ndim):
    """Per-step array (leading axis = step) or a constant array."""
    a = np.asarray(data, dtype=float)
    if a.ndim == ndim + 1:
        return a[0 if i is None else i]
    return a


class TargetDeformation(Term):
    """int w ||x + u - x_trg||^2 over the region, targets per solution node."""

    kind = "target"

    def __init__(self, targets, node_weights=None, **kw):
        super().__init__(**kw)
        self.targets = np.asarray(targets, dtype=float)
        self.node_weights = None if node_weights is None else np.asarray(node_weights, dtype=float)
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("target positions must be finite")

    def _check(self, phys):
        nn = phys.space.n_nodes
        if self.targets.shape[-2:] != (nn, 2):
            raise ValueError(f"target array has shape {self.targets.shape}, expected (..., {nn}, 2)")

    def evaluate(self, phys, u, i, need):
        self._check(phys)
        geom = phys.geom
        phi = phys.space.phi
        mask = self.element_mask(phys)[:, None]
        trg = _step_data(self.targets, i, 2)
        nw = np.ones(phys.space.n_nodes) if self.node_weights is None else self.node_weights
        en = phys.space.elem_nodes
        w = np.einsum("qa,ea->eq", phi, nw[en]) * mask
        diff = geom.xq + geom.values(u) - geom.values(trg)
        j = w * np.einsum("eqi,eqi->eq", diff, diff)
        J = float(np.sum(geom.wdet * j))
        dq = phys.params.zeros_like()
        du = _zero_du(phys)
        if not need:
            return J, du, dq
        g = 2.0 * w[..., None] * diff
        du = geom.assemble_values(g)
        if "dq" in need:
            dq.blocks["shape"] += geom.shape_gradient(j, d_dx=g)
        return J, du, dq

    def params_dict(self):
        d = {**super().params_dict(), "targets": self.targets.tolist()}
        if self.node_weights is not None:
            d["node_weights"] = self.node_weights.tolist()
        return d


class BoundaryTarget(TargetDeformation):
    """Boundary integral of w ||x + u - x_trg||^2 over edges with ``tag`` (all when None)."""

    kind = "boundary_target"

    def __init__(self, targets, node_weights=None, tag=None, **kw):
        super().__init__(targets, node_weights, **kw)
        self.tag = tag

    def evaluate(self, phys, u, i, need):
        self._check(phys)
        scene = phys.scene
        verts, nodes = scene.boundary_edge_nodes(self.tag)
        if self.body is not None:
            keep = phys.scene.mesh.vertex_body()[verts[:, 0]] == self.body
            verts, nodes = verts[keep], nodes[keep]
        dq = phys.params.zeros_like()
        du = _zero_du(phys)
        if len(verts) == 0:
            return 0.0, du, dq
        phi, wq = scene.edge_basis()
        s = 0.5 * (np.polynomial.legendre.leggauss(3)[0] + 1.0)
        shape = phys.geom.shape
        xa, xb = shape[verts[:, 0]], shape[verts[:, 1]]
        e = xb - xa
        L = np.linalg.norm(e, axis=1)
        trg = _step_data(self.targets, i, 2)
        nw = np.ones(phys.space.n_nodes) if self.node_weights is None else self.node_weights
        un = np.asarray(u).reshape(-1, 2)
        x = xa[:, None, :] * (1 - s)[None, :, None] + xb[:, None, :] * s[None, :, None]
        diff = x + np.einsum("kn,enj->ekj", phi, un[nodes] - trg[nodes])
        w = np.einsum("kn,en->ek", phi, nw[nodes])
        j = w * np.einsum("ekj,ekj->ek", diff, diff)
        J = float(np.sum(L[:, None] * wq[None, :] * j))
        if not need:
            return J, du, dq
        g = 2.0 * w[..., None] * diff                                   # dj/dx
        loc = np.einsum("e,k,ekj,kn->enj", L, wq, g, phi)
        for c in range(2):
            np.add.at(du, 2 * nodes.ravel() + c, loc[..., c].ravel())
        if "dq" in need:
            t = e / L[:, None]
            jint = np.sum(wq[None, :] * j, axis=1)
            ga = np.einsum("e,k,ekj,k->ej", L, wq, g, 1 - s) - jint[:, None] * t
            gb = np.einsum("e,k,ekj,k->ej", L, wq, g, s) + jint[:, None] * t
            out = dq.blocks["shape"]
            np.add.at(out, verts[:, 0], ga)
            np.add.at(out, verts[:, 1], gb)
        return J, du, dq

    def params_dict(self):
        d = super().params_dict()
        if self.tag is not None:
            d["tag"] = self.tag
        return d


# --- center of mass ------------------------------------------------------------

def _mass_moments(phys, u, mask):
    geom = phys.geom
    rho = phys.scene.density[:, None] * mask[:, None] * np.ones_like(geom.wdet)
    xd = geom.xq + geom.values(u)
    D = float(np.sum(geom.wdet * rho))
    N = np.einsum("eq,eq,eqi->i", geom.wdet, rho, xd)
    return rho, xd, D, N


def _center_derivatives(phys, rho, xd, D, N, dc, need):
    """Return (du, dshape) of dc . c where c = N / D."""
    geom = phys.geom
    du = geom.assemble_values(rho[..., None] * (dc / D)[None, None, :])
    dshape = None
    if "dq" in need:
        c = N / D
        # d(dc . N)/dq / D - (dc . c) dD/dq / D
        integrand = rho * (np.einsum("eqi,i->eq", xd, dc) - float(dc @ c)) / D
        dshape = geom.shape_gradient(integrand, d_dx=rho[..., None] * (dc / D)[None, None, :])
    return du, dshape


class CenterTrajectory(Term):
    """||c(u) - x_ctr||^2 with c the mass-weighted center of the region."""

    kind = "center"

    def __init__(self, targets, **kw):
        super().__init__(**kw)
        self.targets = np.asarray(targets, dtype=float)
        if self.targets.shape[-1] != 2 or not np.all(np.isfinite(self.targets)):
            raise ValueError("center targets must be finite 2-vectors")

    def evaluate(self, phys, u, i, need):
        rho, xd, D, N = _mass_moments(phys, u, self.element_mask(phys))
        delta = N / D - _step_data(self.targets, i, 1)
        J = float(delta @ delta)
        dq = phys.params.zeros_like()
        if not need:
            return J, _zero_du(phys), dq
        du, dshape = _center_derivatives(phys, rho, xd, D, N, 2.0 * delta, need)
        if dshape is not None:
            dq.blocks["shape"] += dshape
        return J, du, dq

    def params_dict(self):
        return {**super().params_dict(), "targets": self.targets.tolist()}


class Height(Term):
    """Negative vertical coordinate of the center of mass."""

    kind = "height"

    def evaluate(self, phys, u, i, need):
        rho, xd, D, N = _mass_moments(phys, u, self.element_mask(phys))
        J = -float(N[1] / D)
        dq = phys.params.zeros_like()
        if not need:
            return J, _zero_du(phys), dq
        du, dshape = _center_derivatives(phys, rho, xd, D, N, np.array([0.0, -1.0]), need)
        if dshape is not None:
            dq.blocks["shape"] += dshape
        return J, du, dq


# --- shape-only terms ------------------------------------------------------------

class VolumePenalty(Term):
    """phi(V - V_t) with V the rest area of the region."""

    kind = "volume"
    uses_u = False

    def __init__(self, target=0.0, **kw):
        super().__init__(**kw)
        self.target = float(target)

    def evaluate(self, phys, u, i, need):
        mask = self.element_mask(phys)
        V = float(np.sum(phys.geom.area * mask))
        val, dval = penalty(V - self.target)
        dq = phys.params.zeros_like()
        if "dq" in need and dval != 0.0:
            ne, nq = phys.geom.wdet.shape
            dq.blocks["shape"] += float(dval) * phys.geom.shape_gradient(np.broadcast_to(mask[:, None], (ne, nq)))
        return float(val), _zero_du(phys), dq

    def params_dict(self):
        return {**super().params_dict(), "target": self.target}


class BoundarySmoothing(Term):
    """sum_i ||s_i||^p, s_i = sum_j (v_i - v_j) / sum_j ||v_i - v_j|| over boundary-edge neighbours."""

    kind = "boundary_smoothing"
    uses_u = False

    def __init__(self, p=2.0, **kw):
        super().__init__(**kw)
        self.p = float(p)

    def _stencil(self, mesh):
        edges = mesh.boundary_edges
        if self.body is not None:
            edges = edges[mesh.vertex_body()[edges[:, 0]] == self.body]
        # directed (i, j) pairs, each boundary vertex with its boundary neighbours
        ij = np.unique(np.concatenate([edges, edges[:, ::-1]]), axis=0)
        return ij

    def value_and_grad(self, v, ij):
        i, j = ij[:, 0], ij[:, 1]
        nv = len(v)
        e = v[i] - v[j]
        le = np.linalg.norm(e, axis=1)
        a = np.zeros((nv, 2))
        np.add.at(a, i, e)
        b = np.zeros(nv)
        np.add.at(b, i, le)
        has = b > 0
        s = np.zeros((nv, 2))
        s[has] = a[has] / b[has, None]
        ns = np.linalg.norm(s, axis=1)
        J = float(np.sum(ns ** self.p))
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(ns > 0, self.p * ns ** (self.p - 2), 0.0) if self.p != 2 else np.full(nv, 2.0)
        dJ_ds = coef[:, None] * s
        bb = np.where(has, b, 1.0)
        da = dJ_ds / bb[:, None]                            # dJ/da_i
        db = -np.einsum("ij,ij->i", dJ_ds, a) / bb ** 2     # dJ/db_i
        n = e / le[:, None]
        g = np.zeros((nv, 2))
        contrib = da[i] + db[i, None] * n
        np.add.at(g, i, contrib)
        np.add.at(g, j, -contrib)
        return J, g

    def evaluate(self, phys, u, i, need):
        ij = self._stencil(phys.scene.mesh)
        J, g = self.value_and_grad(phys.geom.shape, ij)
        dq = phys.params.zeros_like()
        if "dq" in need:
            dq.blocks["shape"] += g
        return J, _zero_du(phys), dq

    def params_dict(self):
        return {**super().params_dict(), "p": self.p}


class MaterialSmoothing(Term):
    """sum over directed element adjacencies (t, t') of (1 - lam_t'/lam_t)^2 + (1 - mu_t'/mu_t)^2."""

    kind = "material_smoothing"
    uses_u = False

    def evaluate(self, phys, u, i, need):
        adj = phys.scene.mesh.element_adjacency()
        if self.body is not None and len(adj):
            bid = phys.scene.mesh.body_id
            adj = adj[(bid[adj[:, 0]] == self.body) & (bid[adj[:, 1]] == self.body)]
        dq = phys.params.zeros_like()
        J = 0.0
        if len(adj) == 0:
            return J, _zero_du(phys), dq
        t, tp = adj[:, 0], adj[:, 1]
        for name in ("lam", "mu"):
            x = phys.params[name]
            r = x[tp] / x[t]
            J += float(np.sum((1 - r) ** 2))
            if "dq" in need:
                g = dq.blocks[name]
                np.add.at(g, tp, -2 * (1 - r) / x[t])
                np.add.at(g, t, 2 * (1 - r) * r / x[t])
        return J, _zero_du(phys), dq


KINDS = {cls.kind: cls for cls in (StressLp, StressBound, TargetDeformation, BoundaryTarget,
                                   CenterTrajectory, Height, VolumePenalty, BoundarySmoothing,
                                   MaterialSmoothing)}


def make_term(kind, **params):
    if kind not in KINDS:
        raise UnknownKind(f"unknown objective kind {kind!r}")
    return KINDS[kind](**params)


class ObjectiveSpec:
    """Weighted sum of terms, J = sum_terms weight * sum_i w_i J_term(u^i)."""

    def __init__(self, terms):
        self.terms = list(terms)

    @classmethod
    def from_list(cls, items):
        return cls([make_term(**dict(it)) for it in items])

    def to_list(self):
        return [t.params_dict() for t in self.terms]

    @property
    def uses_u(self):
        return any(t.uses_u for t in self.terms)

    def evaluate_step(self, phys, u, i, t, need=()):
        """Weighted value, d/du (full DOF vector) and d/dq (ParameterSet) at step i (None: static)."""
        scene = phys.scene
        J = 0.0
        du = np.zeros(phys.n_dofs)
        dq = phys.params.zeros_like()
        for term in self.terms:
            w = term.weight * term.time_weight(i, scene.n_steps, scene.dt)
            if w == 0.0:
                continue
            Jt, dut, dqt = term.evaluate(phys, u, i, need)
            J += w * Jt
            if "du" in need:
                du += w * dut
            if "dq" in need:
                dq = dq.axpy(w, dqt)
        return J, du, dq

    def value(self, phys, states):
        """Objective over a sequence of states (one state: static)."""
        if len(states) == 1:
            return self.evaluate_step(phys, states[0], None, 0.0)[0]
        dt = phys.scene.dt
        return sum(self.evaluate_step(phys, u, i, i * dt)[0] for i, u in enumerate(states))
