"""Finite element space on a mesh: DOF numbering, per-shape geometry and assembly kernels.

Displacement DOFs are interleaved, ``dof = 2 * node + component``.  Geometry is
always P1; the solution basis is P1 or P2.  P2 nodes are the mesh vertices
followed by one node per unique mesh edge.
"""
import numpy as np
import scipy.sparse as sp

from .basis import BasisSet, P2_LOCAL_EDGES, dunavant, eval_basis
from .errors import DegenerateElement
from .mesh import DEGENERACY_TOL, signed_areas


def _scatter(index, values, n):
    """Deterministic scatter-add of ``values`` (m, 2) into an (n, 2) array."""
    out = np.empty((n, 2))
    out[:, 0] = np.bincount(index, weights=values[:, 0], minlength=n)
    out[:, 1] = np.bincount(index, weights=values[:, 1], minlength=n)
    return out


class FESpace:
    def __init__(self, mesh, order=1):
        if order not in (1, 2):
            raise ValueError("solution order must be 1 or 2")
        self.mesh = mesh
        self.order = order
        self.basis = BasisSet(order)
        self.quad = dunavant(2 if order == 1 else 4)
        nv = mesh.n_vertices
        tris = mesh.triangles
        if order == 1:
            self.elem_nodes = tris.copy()
            self.n_nodes = nv
            self.edge_nodes = np.zeros((0, 2), dtype=int)
        else:
            edges = mesh.edges()
            lookup = {(a, b): nv + k for k, (a, b) in enumerate(edges.tolist())}
            mids = np.array([[lookup[tuple(sorted((t[a], t[b])))] for a, b in P2_LOCAL_EDGES]
                             for t in tris.tolist()], dtype=int).reshape(-1, 3)
            self.elem_nodes = np.hstack([tris, mids])
            self.n_nodes = nv + len(edges)
            self.edge_nodes = edges
        self.n_dofs = 2 * self.n_nodes
        nloc = self.basis.nodes_per_element

        # M*: linear interpolation of vertex data to solution nodes
        rows = list(range(nv))
        cols = list(range(nv))
        vals = [1.0] * nv
        for k, (a, b) in enumerate(self.edge_nodes.tolist()):
            rows += [nv + k, nv + k]
            cols += [a, b]
            vals += [0.5, 0.5]
        self.upsample = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_nodes, nv))

        self.node_body = np.empty(self.n_nodes, dtype=int)
        for k in range(nloc):
            self.node_body[self.elem_nodes[:, k]] = mesh.body_id

        self.phi, self.dphi_ref = eval_basis(self.basis, self.quad.points)
        self.xi, _ = eval_basis(BasisSet(1), self.quad.points)
        self.dxi_ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])

        ldofs = (2 * self.elem_nodes[:, :, None] + np.arange(2)).reshape(len(tris), 2 * nloc)
        self.elem_dofs = ldofs
        self._rows = np.repeat(ldofs, 2 * nloc, axis=1).ravel()
        self._cols = np.tile(ldofs, (1, 2 * nloc)).ravel()
        # fixed CSR pattern: element entries are summed with a deterministic bincount
        keys = self._rows.astype(np.int64) * self.n_dofs + self._cols
        uniq, self._csr_map = np.unique(keys, return_inverse=True)
        self._csr_indices = (uniq % self.n_dofs).astype(np.int32)
        counts = np.bincount(uniq // self.n_dofs, minlength=self.n_dofs)
        self._csr_indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)

        self._build_collision_mesh()

    def _build_collision_mesh(self):
        """Boundary segments in solution-node space (P2 splits each boundary edge)."""
        mesh = self.mesh
        if self.order == 1:
            segs = mesh.boundary_edges.copy()
            parent = np.arange(len(segs))
        else:
            lookup = {tuple(e): self.mesh.n_vertices + k for k, e in enumerate(self.edge_nodes.tolist())}
            segs, parent = [], []
            for k, (a, b) in enumerate(mesh.boundary_edges.tolist()):
                m = lookup[(min(a, b), max(a, b))]
                segs += [(a, m), (m, b)]
                parent += [k, k]
            segs = np.array(segs, dtype=int).reshape(-1, 2)
            parent = np.array(parent, dtype=int)
        self.coll_edges = segs
        self.coll_edge_tag = mesh.boundary_tags[parent]
        self.coll_vertices = np.unique(segs)

    # --- DOF helpers -----------------------------------------------------
    def nodes_of_vertices(self, verts):
        """Solution nodes lying on the closure of the given vertex set's edges."""
        verts = np.asarray(verts, dtype=int)
        if self.order == 1:
            return np.unique(verts)
        vs = set(verts.tolist())
        extra = [self.mesh.n_vertices + k for k, (a, b) in enumerate(self.edge_nodes.tolist())
                 if a in vs and b in vs]
        return np.unique(np.concatenate([verts, np.array(extra, dtype=int)]))

    def matrix_from_local(self, ke):
        """Sparse matrix from element blocks ke (ne, ndof_loc, ndof_loc) on the fixed pattern."""
        data = np.bincount(self._csr_map, weights=np.asarray(ke).ravel(), minlength=len(self._csr_indices))
        return sp.csr_matrix((data, self._csr_indices, self._csr_indptr), shape=(self.n_dofs, self.n_dofs))

    def vector_from_local(self, loc):
        """DOF vector from element vectors loc (ne, ndof_loc)."""
        return np.bincount(self.elem_dofs.ravel(), weights=np.asarray(loc).ravel(), minlength=self.n_dofs)

    def tagged_nodes(self, tags):
        tags = list(tags)
        mask = np.isin(self.coll_edge_tag, tags)
        return np.unique(self.coll_edges[mask])

    def body_nodes(self, body):
        return np.flatnonzero(self.node_body == body)

    def geometry(self, shape):
        return Geometry(self, np.asarray(shape, dtype=float).reshape(-1, 2))


class Geometry:
    """Quantities depending on the shape parameters (rest vertex positions)."""

    def __init__(self, space, shape):
        self.space = space
        self.shape = shape
        mesh = space.mesh
        tri = mesh.triangles
        p = shape[tri]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)  # columns
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        ref = 2.0 * signed_areas(mesh.rest_vertices, tri)
        bad = np.flatnonzero(det <= DEGENERACY_TOL * np.abs(ref))
        if len(bad):
            raise DegenerateElement(f"elements {bad.tolist()[:10]} degenerate or inverted")
        jinv = np.empty_like(jac)
        jinv[:, 0, 0] = jac[:, 1, 1] / det
        jinv[:, 1, 1] = jac[:, 0, 0] / det
        jinv[:, 0, 1] = -jac[:, 0, 1] / det
        jinv[:, 1, 0] = -jac[:, 1, 0] / det
        self.jac, self.det, self.jinv = jac, det, jinv
        self.area = 0.5 * det
        self.dphi = np.einsum("qar,erj->eqaj", space.dphi_ref, jinv)
        self.dxi = np.einsum("ar,erj->eaj", space.dxi_ref, jinv)
        self.wdet = space.quad.weights[None, :] * det[:, None]
        # B[e, q, 2i + j, 2a + k] = delta_ik dphi_a/dx_j: local DOFs -> flattened grad u
        ne, nq, nloc, _ = self.dphi.shape
        B = np.zeros((ne, nq, 2, 2, nloc, 2))
        B[:, :, 0, :, :, 0] = np.swapaxes(self.dphi, 2, 3)
        B[:, :, 1, :, :, 1] = np.swapaxes(self.dphi, 2, 3)
        self.B = B.reshape(ne, nq, 4, 2 * nloc)
        self.Bt = np.ascontiguousarray(np.swapaxes(self.B, -1, -2))
        self.X = space.upsample @ shape                      # (nn, 2) rest node positions
        self.xq = np.einsum("qa,eaj->eqj", space.xi, p)        # quadrature points

    # --- fields ------------------------------------------------------------
    def nodal(self, u):
        return np.asarray(u).reshape(-1, 2)[self.space.elem_nodes]

    def grad(self, u):
        """(ne, nq, 2, 2) with [i, j] = d u_i / d x_j."""
        ul = np.asarray(u).reshape(-1)[self.space.elem_dofs]
        ne, nq = self.wdet.shape
        return (self.B @ ul[:, None, :, None]).reshape(ne, nq, 2, 2)

    def values(self, u):
        return np.einsum("qa,eai->eqi", self.space.phi, self.nodal(u))

    # --- assembly ----------------------------------------------------------
    def assemble_stress(self, P):
        """Vector with entries int P : grad(phi_a e_i)."""
        ne, nq = self.wdet.shape
        Pw = (np.asarray(P) * self.wdet[:, :, None, None]).reshape(ne, nq, 4, 1)
        loc = (self.Bt @ Pw).sum(axis=1)[..., 0]
        return self.space.vector_from_local(loc)

    def assemble_values(self, f):
        """Vector with entries int f . (phi_a e_i)."""
        loc = np.einsum("eq,eqi,qa->eai", self.wdet, f, self.space.phi)
        sp_ = self.space
        return _scatter(sp_.elem_nodes.ravel(), loc.reshape(-1, 2), sp_.n_nodes).ravel()

    def assemble_tangent(self, C):
        """Sparse matrix with entries int (C : grad psi) : grad p, C[i,j,k,l] = d P_ij / d G_kl."""
        ne, nq = self.wdet.shape
        Cw = (np.asarray(C) * self.wdet[:, :, None, None, None, None]).reshape(ne, nq, 4, 4)
        ke = (self.Bt @ (Cw @ self.B)).sum(axis=1)
        return self.space.matrix_from_local(ke)

    def mass(self, rho):
        """Consistent mass matrix (per element density ``rho``)."""
        sp_ = self.space
        me = np.einsum("eq,e,qa,qb->eab", self.wdet, rho, sp_.phi, sp_.phi)
        nloc = me.shape[1]
        full = np.zeros((len(me), nloc, 2, nloc, 2))
        full[:, :, 0, :, 0] = me
        full[:, :, 1, :, 1] = me
        return sp_.matrix_from_local(full.reshape(len(me), 2 * nloc, 2 * nloc))

    def shape_gradient(self, integrand, grad_pairs=(), d_dx=None):
        """Perturbed-domain derivative of int integrand dx w.r.t. rest vertex positions.

        ``grad_pairs`` lists ``(G, D)`` where G is the gradient of a field whose
        nodal coefficients are held fixed and D = d integrand / d G.  ``d_dx``
        is the explicit derivative of the integrand w.r.t. the physical point.
        Returns an (nv, 2) array.
        """
        ne, nq = self.wdet.shape
        S = np.zeros((ne, nq, 2, 2))
        if integrand is not None:
            S[..., 0, 0] = integrand
            S[..., 1, 1] = integrand
        for G, D in grad_pairs:
            S -= np.einsum("eqml,eqmn->eqln", G, D)
        loc = np.einsum("eq,eqln,ebn->ebl", self.wdet, S, self.dxi)
        if d_dx is not None:
            loc += np.einsum("eq,eql,qb->ebl", self.wdet, d_dx, self.space.xi)
        tri = self.space.mesh.triangles
        return _scatter(tri.ravel(), loc.reshape(-1, 2), self.space.mesh.n_vertices)

    def mass_shape_product(self, a, b, rho):
        """d/dq of a^T M(q) b with nodal a, b fixed: int rho (a . b) div(theta)."""
        ab = np.einsum("eqi,eqi->eq", self.values(a), self.values(b)) * rho[:, None]
        return self.shape_gradient(ab)

    def upsample_gradient(self, g_nodes):
        """Pull back a gradient w.r.t. node positions to vertex positions via M*^T."""
        return np.asarray(self.space.upsample.T @ np.asarray(g_nodes).reshape(-1, 2))
