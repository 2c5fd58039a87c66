"""Smoothed log-barrier contact between boundary primitives in 2D.

Contact candidates are (boundary node, boundary segment) pairs.  The distance of
a pair is the point-segment distance; its ``kind`` records whether the closest
point lies in the segment interior (point-edge) or at an endpoint (point-point).
All per-pair kernels are vectorized over pairs with a 6-vector stencil
``(p, e0, e1)``.
"""
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateEdge, NonPositiveDistance

POINT_POINT = "point-point"
POINT_EDGE = "point-edge"

# region codes of the closest point
_PP0, _PE, _PP1 = 0, 1, 2


@dataclass(frozen=True)
class BarrierParams:
    dhat: float
    kappa: float

    def __post_init__(self):
        if not (self.dhat > 0 and self.kappa > 0):
            raise ValueError("dhat and kappa must be positive")


@dataclass(frozen=True)
class ContactPair:
    kind: str
    indices: tuple        # (point node, edge node 0, edge node 1)
    body_pair: tuple
    area: float


def barrier(d, dhat):
    """b(d) = -(d - dhat)^2 log(d / dhat) for d < dhat, else 0; returns (b, b', b'')."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveDistance(f"distance {np.min(d):.3e} <= 0")
    act = d < dhat
    dd = np.where(act, d, dhat)
    diff = dd - dhat
    log = np.log(dd / dhat)
    b = np.where(act, -diff**2 * log, 0.0)
    b1 = np.where(act, -2.0 * diff * log - diff**2 / dd, 0.0)
    b2 = np.where(act, -2.0 * log - 4.0 * diff / dd + diff**2 / dd**2, 0.0)
    return b, b1, b2


# selection matrices for the stencil x = (p, e0, e1)
_SP = np.zeros((2, 6)); _SP[:, 0:2] = np.eye(2)
_S0 = np.zeros((2, 6)); _S0[:, 2:4] = np.eye(2)
_S1 = np.zeros((2, 6)); _S1[:, 4:6] = np.eye(2)
_E = _S1 - _S0
_R = _SP - _S0
_J = np.array([[0.0, 1.0], [-1.0, 0.0]])
_HC = _E.T @ _J @ _R + _R.T @ _J.T @ _E
_HL = 2.0 * _E.T @ _E
_HPP0 = 2.0 * (_SP - _S0).T @ (_SP - _S0)
_HPP1 = 2.0 * (_SP - _S1).T @ (_SP - _S1)


def _region(x):
    p, e0, e1 = x[:, 0:2], x[:, 2:4], x[:, 4:6]
    e = e1 - e0
    L2 = np.einsum("ki,ki->k", e, e)
    if np.any(L2 <= 1e-300):
        raise DegenerateEdge("zero-length edge in contact stencil")
    a = np.einsum("ki,ki->k", p - e0, e) / L2
    return np.where(a <= 0.0, _PP0, np.where(a >= 1.0, _PP1, _PE)), a


def squared_distance(x, order=2):
    """Point-segment squared distance with gradient and Hessian w.r.t. the 6-stencil."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    reg, _ = _region(x)
    n = len(x)
    D = np.empty(n)
    g = np.empty((n, 6))
    H = np.empty((n, 6, 6)) if order >= 2 else None
    for code, S, HPP in ((_PP0, _S0, _HPP0), (_PP1, _S1, _HPP1)):
        m = reg == code
        if np.any(m):
            s = x[m, 0:2] - x[m] @ S.T
            D[m] = np.einsum("ki,ki->k", s, s)
            g[m] = 2.0 * s @ (_SP - S)
            if H is not None:
                H[m] = HPP
    m = reg == _PE
    if np.any(m):
        xm = x[m]
        gc = xm @ _HC.T
        c = 0.5 * np.einsum("ki,ki->k", xm, gc)
        gL = xm @ _HL.T
        L2 = 0.5 * np.einsum("ki,ki->k", xm, gL)
        D[m] = c**2 / L2
        g[m] = (2 * c / L2)[:, None] * gc - (c**2 / L2**2)[:, None] * gL
        if H is not None:
            outer = lambda a, b: np.einsum("ki,kj->kij", a, b)
            H[m] = ((2 / L2)[:, None, None] * outer(gc, gc)
                    + (2 * c / L2)[:, None, None] * _HC
                    - (2 * c / L2**2)[:, None, None] * (outer(gc, gL) + outer(gL, gc))
                    - (c**2 / L2**2)[:, None, None] * _HL
                    + (2 * c**2 / L2**3)[:, None, None] * outer(gL, gL))
    return D, g, H, reg


def distance(x, order=2):
    """Euclidean point-segment distance ``d``, gradient and Hessian (vectorized)."""
    D, gD, HD, reg = squared_distance(x, order)
    d = np.sqrt(D)
    if np.any(d <= 0):
        raise NonPositiveDistance("coincident contact primitives")
    g = gD / (2 * d)[:, None]
    H = None
    if HD is not None:
        H = HD / (2 * d)[:, None, None] - np.einsum("ki,kj->kij", gD, gD) / (4 * d**3)[:, None, None]
    return d, g, H, reg


def pair_distance(p, e0, e1):
    """Distance of a single point ``p`` to the segment ``(e0, e1)`` with derivatives and kind."""
    p, e0, e1 = (np.asarray(v, dtype=float) for v in (p, e0, e1))
    d, g, H, reg = distance(np.concatenate([p, e0, e1])[None])
    kind = POINT_EDGE if reg[0] == _PE else POINT_POINT
    return float(d[0]), g[0], H[0], kind


class SpatialHash:
    """Uniform grid for bounding-box queries between points and segments."""

    def __init__(self, cell):
        self.cell = float(cell)
        self.cells = defaultdict(list)

    def _range(self, lo, hi):
        a = np.floor(np.asarray(lo) / self.cell).astype(int)
        b = np.floor(np.asarray(hi) / self.cell).astype(int)
        return a, b

    def insert(self, idx, lo, hi):
        a, b = self._range(lo, hi)
        for i in range(a[0], b[0] + 1):
            for j in range(a[1], b[1] + 1):
                self.cells[(i, j)].append(idx)

    def query(self, lo, hi):
        a, b = self._range(lo, hi)
        out = set()
        for i in range(a[0], b[0] + 1):
            for j in range(a[1], b[1] + 1):
                out.update(self.cells.get((i, j), ()))
        return out


class ContactSet:
    """Active (point, segment) pairs with their stencils and measures."""

    def __init__(self, model, idx):
        self.model = model
        self.idx = np.asarray(idx, dtype=int)           # indices into model candidate arrays
        self.pv = model.cand_v[self.idx]
        self.pe0 = model.cand_e0[self.idx]
        self.pe1 = model.cand_e1[self.idx]

    def __len__(self):
        return len(self.idx)

    @property
    def nodes(self):
        return np.stack([self.pv, self.pe0, self.pe1], axis=1)

    @property
    def dofs(self):
        n = self.nodes
        return (2 * n[:, :, None] + np.arange(2)).reshape(len(n), 6)

    def stencil(self, positions):
        return positions[self.nodes].reshape(len(self.idx), 6)

    def body_pairs(self):
        nb = self.model.node_body
        a, b = nb[self.pv], nb[self.pe0]
        return np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)

    def as_pairs(self, positions, X):
        if len(self) == 0:
            return []
        _, _, _, reg = distance(self.stencil(positions), order=1)
        areas = self.model.vertex_areas(X)[self.pv]
        bp = self.body_pairs()
        return [ContactPair(POINT_EDGE if r == _PE else POINT_POINT,
                            (int(v), int(a), int(b)), (int(m), int(n)), float(A))
                for v, a, b, r, (m, n), A in zip(self.pv, self.pe0, self.pe1, reg, bp, areas)]


def _scatter_dofs(dofs, vals, n):
    return np.bincount(dofs.ravel(), weights=vals.ravel(), minlength=n)


def _triplets(dofs, mats, n):
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    return sp.csr_matrix((mats.ravel(), (rows, cols)), shape=(n, n))


class ContactModel:
    """Barrier contact on the collision mesh of an FE space.

    ``fixed_nodes`` marks nodes whose displacement is prescribed; pairs made
    only of fixed nodes are never registered.  Same-body pairs are allowed
    except when the point is an endpoint of the segment or a boundary
    neighbour of one of its endpoints.
    """

    exhaustive_limit = 50000

    def __init__(self, space, params, fixed_nodes=None, self_contact=True):
        self.space = space
        self.params = params
        self.n_dofs = space.n_dofs
        self.edges = space.coll_edges
        self.node_body = space.node_body
        cv = space.coll_vertices
        self.coll_vertices = cv
        nbrs = defaultdict(list)
        for a, b in self.edges.tolist():
            nbrs[a].append(b)
            nbrs[b].append(a)
        self.nbr = np.array([sorted(nbrs[v])[:2] if len(nbrs[v]) >= 2 else [nbrs[v][0]] * 2
                             for v in cv.tolist()], dtype=int).reshape(-1, 2)
        self._cv_pos = {int(v): k for k, v in enumerate(cv.tolist())}
        fixed = np.zeros(space.n_nodes, dtype=bool)
        if fixed_nodes is not None:
            fixed[np.asarray(fixed_nodes, dtype=int)] = True

        cand_v, cand_e0, cand_e1, cand_edge = [], [], [], []
        body = space.node_body
        for k, (a, b) in enumerate(self.edges.tolist()):
            for v in cv.tolist():
                if v == a or v == b:
                    continue
                if fixed[v] and fixed[a] and fixed[b]:
                    continue
                if body[v] == body[a]:
                    if not self_contact:
                        continue
                    if a in nbrs[v] or b in nbrs[v]:
                        continue
                cand_v.append(v); cand_e0.append(a); cand_e1.append(b); cand_edge.append(k)
        self.cand_v = np.array(cand_v, dtype=int)
        self.cand_e0 = np.array(cand_e0, dtype=int)
        self.cand_e1 = np.array(cand_e1, dtype=int)
        self.cand_edge = np.array(cand_edge, dtype=int)
        self._lookup = {(v, k): i for i, (v, k) in enumerate(zip(cand_v, cand_edge))}

    # --- measures ----------------------------------------------------------------
    def vertex_areas(self, X):
        """Per-node boundary measure: half the summed rest lengths of incident segments."""
        A = np.zeros(self.space.n_nodes)
        cv = self.coll_vertices
        l1 = np.linalg.norm(X[cv] - X[self.nbr[:, 0]], axis=1)
        l2 = np.linalg.norm(X[cv] - X[self.nbr[:, 1]], axis=1)
        A[cv] = 0.5 * (l1 + l2)
        return A

    def area_gradient_scatter(self, X, nodes, weights):
        """sum_k weights_k dA_{nodes_k}/dX as an (n_nodes, 2) array."""
        out = np.zeros((self.space.n_nodes, 2))
        if len(nodes) == 0:
            return out
        pos = np.array([self._cv_pos[int(v)] for v in nodes], dtype=int)
        for col in range(2):
            w = self.nbr[pos, col]
            t = X[nodes] - X[w]
            t /= np.linalg.norm(t, axis=1)[:, None]
            contrib = 0.5 * weights[:, None] * t
            for c in range(2):
                out[:, c] += np.bincount(nodes, weights=contrib[:, c], minlength=len(out))
                out[:, c] -= np.bincount(w, weights=contrib[:, c], minlength=len(out))
        return out

    # --- active set ------------------------------------------------------------
    def active_set(self, positions, dhat=None):
        """All candidate pairs with distance < dhat (box-overlap broad phase first)."""
        dhat = self.params.dhat if dhat is None else dhat
        if len(self.cand_v) == 0:
            return ContactSet(self, [])
        seg = positions[self.edges]                        # (nce, 2, 2)
        hits = self._broad_phase(positions, positions, seg.min(axis=1) - dhat, seg.max(axis=1) + dhat)
        if len(hits) == 0:
            return ContactSet(self, [])
        x = np.concatenate([positions[self.cand_v[hits]], positions[self.cand_e0[hits]],
                            positions[self.cand_e1[hits]]], axis=1)
        D, _, _, _ = squared_distance(x, order=0)
        return ContactSet(self, hits[D < dhat**2])

    def _broad_phase(self, pt_lo, pt_hi, edge_lo, edge_hi):
        """Sorted candidate indices whose point box overlaps the edge box.

        Small candidate sets are tested exhaustively; large ones go through
        a uniform grid.
        """
        if len(self.cand_v) <= self.exhaustive_limit:
            lo_p, hi_p = pt_lo[self.cand_v], pt_hi[self.cand_v]
            lo_e, hi_e = edge_lo[self.cand_edge], edge_hi[self.cand_edge]
            ok = np.all((lo_p <= hi_e) & (lo_e <= hi_p), axis=1)
            return np.flatnonzero(ok)
        cell = max(float((edge_hi - edge_lo).max()), 1e-12)
        grid = SpatialHash(cell)
        for v in self.coll_vertices.tolist():
            grid.insert(v, pt_lo[v], pt_hi[v])
        hits = []
        for k in range(len(self.edges)):
            for v in grid.query(edge_lo[k], edge_hi[k]):
                i = self._lookup.get((v, k))
                if i is not None:
                    hits.append(i)
        return np.array(sorted(hits), dtype=int)

    def active_set_bruteforce(self, positions, dhat=None):
        dhat = self.params.dhat if dhat is None else dhat
        x = np.concatenate([positions[self.cand_v], positions[self.cand_e0], positions[self.cand_e1]], axis=1)
        D, _, _, _ = squared_distance(x, order=0)
        return ContactSet(self, np.flatnonzero(D < dhat**2))

    def min_distance(self, positions):
        if len(self.cand_v) == 0:
            return np.inf
        x = np.concatenate([positions[self.cand_v], positions[self.cand_e0], positions[self.cand_e1]], axis=1)
        D, _, _, _ = squared_distance(x, order=0)
        return float(np.sqrt(D.min()))

    # --- forces ------------------------------------------------------------------
    def evaluate(self, X, u, cset=None, order=2):
        """Energy, gradient (the contact weak-form vector h^c) and Hessian at x = X + u."""
        pos = X + np.asarray(u).reshape(-1, 2)
        if cset is None:
            cset = self.active_set(pos)
        return ContactEval(self, X, pos, cset, order)

    # --- continuous collision detection -------------------------------------------
    def ccd_max_step(self, x, dx, min_gap_ratio=0.1, safety=0.9, max_iter=100):
        """Conservative largest t in (0, 1] keeping x + t dx intersection free.

        Additive conservative advancement: every (point, segment) pair that can
        reach within ``min_gap_ratio`` of its current distance is advanced in
        safe increments ``safety * (d - gap) / l`` where ``l`` bounds the
        relative motion.
        """
        x = np.asarray(x).reshape(-1, 2)
        dx = np.asarray(dx).reshape(-1, 2)
        if len(self.cand_v) == 0 or not np.any(dx):
            return 1.0
        # broad phase on swept boxes
        seg0 = x[self.edges]
        seg1 = (x + dx)[self.edges]
        allp = np.concatenate([seg0, seg1], axis=1)
        hits = self._broad_phase(np.minimum(x, x + dx), np.maximum(x, x + dx),
                                 allp.min(axis=1), allp.max(axis=1))
        if len(hits) == 0:
            return 1.0
        nodes = np.stack([self.cand_v[hits], self.cand_e0[hits], self.cand_e1[hits]], axis=1)
        x0 = x[nodes]
        d0s = dx[nodes]
        d0s = d0s - d0s.mean(axis=1, keepdims=True)
        mag = np.linalg.norm(d0s, axis=2)
        l = mag[:, 0] + np.maximum(mag[:, 1], mag[:, 2])
        d_init = np.sqrt(squared_distance(x0.reshape(-1, 6), order=0)[0])
        gap = min_gap_ratio * d_init
        moving = l > 0
        # pairs that cannot close the gap within t <= 1 are skipped
        moving &= d_init - l < gap
        if not np.any(moving):
            return 1.0
        x0, d0s, l, gap = x0[moving], d0s[moving], l[moving], gap[moving]
        t = np.zeros(len(l))
        done = np.zeros(len(l), dtype=bool)
        for _ in range(max_iter):
            xt = (x0 + t[:, None, None] * d0s).reshape(-1, 6)
            d = np.sqrt(squared_distance(xt, order=0)[0])
            step = safety * (d - gap) / l
            step = np.where(done, 0.0, np.maximum(step, 0.0))
            reach = t + step >= 1.0
            t = np.where(reach & ~done, 1.0, t + step)
            done |= reach | (step <= 1e-6 * np.maximum(t, 1e-12))
            if np.all(done):
                break
        return float(min(1.0, t.min()))


class ContactEval:
    """Per-state contact quantities: potential, force vector, Hessian and shape products."""

    def __init__(self, model, X, pos, cset, order=2):
        self.model = model
        self.X = X
        self.cset = cset
        kappa, dhat = model.params.kappa, model.params.dhat
        n = model.n_dofs
        if len(cset) == 0:
            self.energy = 0.0
            self.grad = np.zeros(n)
            self.hess = sp.csr_matrix((n, n))
            self._empty = True
            return
        self._empty = False
        x = cset.stencil(pos)
        d, gd, Hd, reg = distance(x, order=2)
        b, b1, b2 = barrier(d, dhat)
        A = model.vertex_areas(X)[cset.pv]
        self.d, self.gd, self.Hd, self.b1, self.A = d, gd, Hd, b1, A
        self.energy = float(kappa * np.sum(A * b))
        self.force_k = kappa * b1[:, None] * gd          # F^c_k
        self.grad = _scatter_dofs(cset.dofs, A[:, None] * self.force_k, n)
        self.hess_k = kappa * (b2[:, None, None] * np.einsum("ki,kj->kij", gd, gd) + b1[:, None, None] * Hd)
        self.hess = _triplets(cset.dofs, A[:, None, None] * self.hess_k, n)

    def shape_product(self, p):
        """Rest-vertex gradient of p^T h^c with displacement held fixed."""
        space = self.model.space
        if self._empty:
            return np.zeros((space.mesh.n_vertices, 2))
        pk = np.asarray(p)[self.cset.dofs]
        g_nodes = _scatter_dofs(self.cset.dofs,
                                self.A[:, None] * np.einsum("kij,kj->ki", self.hess_k, pk),
                                self.model.n_dofs).reshape(-1, 2)
        w = np.einsum("ki,ki->k", self.force_k, pk)
        g_nodes = g_nodes + self.model.area_gradient_scatter(self.X, self.cset.pv, w)
        return np.asarray(space.upsample.T @ g_nodes)
