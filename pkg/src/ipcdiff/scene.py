"""Scene description: structure, boundary data and the optimizable parameter set."""
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .contact import BarrierParams, ContactModel
from .friction import FrictionParams
from .materials import NEO_HOOKEAN, DampingParams, MaterialField
from .space import FESpace

BLOCKS = ("shape", "lam", "mu", "gamma", "damping", "u0", "v0")


class ParameterSet:
    """All optimization variables, stored as named blocks.

    shape (nv, 2) rest vertex positions, lam / mu (ne,), gamma (n friction pairs,),
    damping (2,) = (alpha, beta), u0 / v0 (n_nodes, 2).  The same container is
    used for gradients and perturbation directions.
    """

    def __init__(self, **blocks):
        missing = set(BLOCKS) - set(blocks)
        if missing:
            raise ValueError(f"missing parameter blocks {sorted(missing)}")
        self.blocks = {k: np.array(blocks[k], dtype=float) for k in BLOCKS}

    def __getattr__(self, name):
        blocks = self.__dict__.get("blocks")
        if blocks is not None and name in blocks:
            return blocks[name]
        raise AttributeError(name)

    def __getitem__(self, name):
        return self.blocks[name]

    def copy(self):
        return ParameterSet(**{k: v.copy() for k, v in self.blocks.items()})

    def zeros_like(self):
        return ParameterSet(**{k: np.zeros_like(v) for k, v in self.blocks.items()})

    def axpy(self, a, other, only=None):
        """self + a * other, restricted to the blocks in ``only`` when given."""
        out = self.copy()
        for k in BLOCKS:
            if only is None or k in only:
                out.blocks[k] = self.blocks[k] + a * other.blocks[k]
        return out

    def dot(self, other, only=None):
        return float(sum(np.sum(self.blocks[k] * other.blocks[k])
                         for k in BLOCKS if only is None or k in only))

    def to_dict(self):
        return {k: v.tolist() for k, v in self.blocks.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], dtype=float) for k in BLOCKS})


@dataclass(frozen=True)
class TimeTable:
    """Piecewise-linear scalar function of time, constant outside the knots."""
    times: tuple = (0.0,)
    values: tuple = (1.0,)

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times:
            raise ValueError("time table needs matching non-empty times and values")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("time table knots must increase")

    def __call__(self, t):
        return float(np.interp(t, self.times, self.values))

    def rate(self, t):
        """Right derivative at t."""
        ts, vs = self.times, self.values
        for k in range(len(ts) - 1):
            if ts[k] <= t < ts[k + 1]:
                return (vs[k + 1] - vs[k]) / (ts[k + 1] - ts[k])
        return 0.0


@dataclass(frozen=True)
class DirichletBC:
    """Prescribed displacement scale(t) * (A X + b) on selected nodes and components.

    Nodes are selected by boundary tags, by body, or by explicit node ids.  X are
    the rest node positions of the scene's reference mesh, not the shape
    parameters, so prescribed data do not depend on the shape.
    """
    tags: tuple = ()
    body: int = None
    nodes: tuple = ()
    components: tuple = (0, 1)
    matrix: tuple = ((0.0, 0.0), (0.0, 0.0))
    offset: tuple = (0.0, 0.0)
    table: TimeTable = field(default_factory=TimeTable)

    def select(self, space):
        sel = []
        if self.tags:
            sel.append(space.tagged_nodes(self.tags))
        if self.body is not None:
            sel.append(space.body_nodes(self.body))
        if self.nodes:
            sel.append(np.asarray(self.nodes, dtype=int))
        return np.unique(np.concatenate(sel)) if sel else np.zeros(0, dtype=int)


@dataclass(frozen=True)
class NeumannBC:
    """Dead traction scale(t) * traction on the boundary edges carrying ``tag``."""
    tag: int
    traction: tuple
    table: TimeTable = field(default_factory=TimeTable)


@dataclass(eq=False)
class Scene:
    mesh: object
    order: int = 1
    model: str = NEO_HOOKEAN
    density: np.ndarray = None
    barrier: BarrierParams = None
    friction_pairs: tuple = ()
    eta: float = 1e-3
    self_contact: bool = False
    gravity: tuple = (0.0, 0.0)
    dirichlet: tuple = ()
    neumann: tuple = ()
    dt: float = 0.01
    n_steps: int = 10
    bdf_order: int = 1
    params: ParameterSet = None
    name: str = "scene"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        ne = self.mesh.n_elements
        self.density = np.ones(ne) if self.density is None else np.broadcast_to(
            np.asarray(self.density, dtype=float), (ne,)).copy()
        self.friction_pairs = tuple(tuple(sorted(map(int, p))) for p in self.friction_pairs)
        known = set(self.mesh.boundary_tags.tolist())
        for bc in list(self.dirichlet) + list(self.neumann):
            tags = bc.tags if isinstance(bc, DirichletBC) else (bc.tag,)
            for t in tags:
                if t not in known:
                    raise ValueError(f"boundary tag {t} does not exist in the mesh")
        if self.params is None:
            self.params = self.default_params()

    def default_params(self, lam=1.0, mu=1.0):
        ne, nn = self.mesh.n_elements, self.space.n_nodes
        return ParameterSet(shape=self.mesh.rest_vertices.copy(), lam=np.full(ne, lam),
                            mu=np.full(ne, mu), gamma=np.zeros(len(self.friction_pairs)),
                            damping=np.zeros(2), u0=np.zeros((nn, 2)), v0=np.zeros((nn, 2)))

    def with_params(self, params):
        """Shallow copy sharing all structural caches."""
        new = replace(self, params=params)
        for key in ("space", "contact", "_dirichlet_data"):
            if key in self.__dict__:
                new.__dict__[key] = self.__dict__[key]
        return new

    # --- structure ---------------------------------------------------------------
    @cached_property
    def space(self):
        return FESpace(self.mesh, self.order)

    @cached_property
    def _dirichlet_data(self):
        space = self.space
        X0 = space.upsample @ self.mesh.rest_vertices
        dofs, base, tables = [], [], []
        for k, bc in enumerate(self.dirichlet):
            nodes = bc.select(space)
            val = X0[nodes] @ np.asarray(bc.matrix, dtype=float).T + np.asarray(bc.offset, dtype=float)
            for c in bc.components:
                dofs.append(2 * nodes + c)
                base.append(val[:, c])
                tables.append(np.full(len(nodes), k))
        if dofs:
            dofs = np.concatenate(dofs)
            base = np.concatenate(base)
            tables = np.concatenate(tables)
            # later conditions override earlier ones on shared DOFs
            _, last = np.unique(dofs[::-1], return_index=True)
            keep = np.sort(len(dofs) - 1 - last)
            dofs, base, tables = dofs[keep], base[keep], tables[keep]
            order = np.argsort(dofs)
            dofs, base, tables = dofs[order], base[order], tables[order]
        else:
            dofs = np.zeros(0, dtype=int)
            base = np.zeros(0)
            tables = np.zeros(0, dtype=int)
        free = np.setdiff1d(np.arange(space.n_dofs), dofs)
        return dofs, base, tables, free

    @property
    def dirichlet_dofs(self):
        return self._dirichlet_data[0]

    @property
    def free_dofs(self):
        return self._dirichlet_data[3]

    def fixed_nodes(self):
        """Nodes with both components prescribed."""
        d = self.dirichlet_dofs
        nodes, counts = np.unique(d // 2, return_counts=True)
        return nodes[counts == 2]

    def dirichlet_values(self, t):
        dofs, base, tables, _ = self._dirichlet_data
        scale = np.array([bc.table(t) for bc in self.dirichlet])
        return base * scale[tables] if len(dofs) else base

    def dirichlet_rates(self, t):
        dofs, base, tables, _ = self._dirichlet_data
        rate = np.array([bc.table.rate(t) for bc in self.dirichlet])
        return base * rate[tables] if len(dofs) else base

    @cached_property
    def contact(self):
        if self.barrier is None:
            return None
        return ContactModel(self.space, self.barrier, fixed_nodes=self.fixed_nodes(),
                            self_contact=self.self_contact)

    # --- parameter-dependent views ------------------------------------------------
    def material(self, params=None):
        p = self.params if params is None else params
        return MaterialField(p.lam, p.mu, self.density, self.model)

    def damping(self, params=None):
        p = self.params if params is None else params
        return DampingParams(float(p.damping[0]), float(p.damping[1]))

    def friction(self, params=None):
        if not self.friction_pairs or self.barrier is None:
            return None
        p = self.params if params is None else params
        return FrictionParams(list(self.friction_pairs), p.gamma, self.eta)

    def initial_state(self, params=None):
        """(u0, v0) as full DOF vectors with Dirichlet data applied at t = 0."""
        p = self.params if params is None else params
        u0 = p.u0.ravel().copy()
        v0 = p.v0.ravel().copy()
        d = self.dirichlet_dofs
        u0[d] = self.dirichlet_values(0.0)
        v0[d] = self.dirichlet_rates(0.0)
        return u0, v0

    # --- external loads -------------------------------------------------------------
    def boundary_edge_nodes(self, tag=None):
        """Boundary edges with ``tag`` (all when None) as vertex pairs and solution-node tuples."""
        mesh, space = self.mesh, self.space
        sel = np.arange(len(mesh.boundary_tags)) if tag is None else np.flatnonzero(mesh.boundary_tags == tag)
        edges = mesh.boundary_edges[sel]
        if self.order == 1:
            return edges, edges
        lookup = {tuple(e): mesh.n_vertices + k for k, e in enumerate(space.edge_nodes.tolist())}
        mids = np.array([lookup[(min(a, b), max(a, b))] for a, b in edges.tolist()], dtype=int)
        return edges, np.column_stack([edges, mids]) if len(edges) else np.zeros((0, 3), dtype=int)

    def edge_basis(self):
        """Three-point Gauss rule on [0, 1] and edge basis values (vertex a, vertex b[, midpoint])."""
        s, w = np.polynomial.legendre.leggauss(3)
        s = 0.5 * (s + 1.0)
        w = 0.5 * w
        if self.order == 1:
            phi = np.stack([1 - s, s], axis=1)
        else:
            phi = np.stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)], axis=1)
        return phi, w

    def external_force(self, geom, t):
        """Body force plus Neumann tractions as a DOF vector."""
        f = np.zeros(self.space.n_dofs)
        g = np.asarray(self.gravity, dtype=float)
        if np.any(g):
            ne, nq = geom.wdet.shape
            f += geom.assemble_values(np.broadcast_to(self.density[:, None, None] * g, (ne, nq, 2)))
        if self.neumann:
            phi, w = self.edge_basis()
            shape = geom.shape
            for bc in self.neumann:
                verts, nodes = self.boundary_edge_nodes(bc.tag)
                if len(verts) == 0:
                    continue
                L = np.linalg.norm(shape[verts[:, 1]] - shape[verts[:, 0]], axis=1)
                tr = bc.table(t) * np.asarray(bc.traction, dtype=float)
                weights = L[:, None] * (w @ phi)[None, :]              # (nb, nloc)
                for c in range(2):
                    np.add.at(f, 2 * nodes.ravel() + c, (weights * tr[c]).ravel())
        return f

    def external_shape_product(self, geom, t, p):
        """Rest-vertex gradient of p^T f_ext with p held fixed."""
        out = np.zeros((self.mesh.n_vertices, 2))
        g = np.asarray(self.gravity, dtype=float)
        if np.any(g):
            vals = geom.values(p)
            out += geom.shape_gradient(self.density[:, None] * np.einsum("eqi,i->eq", vals, g))
        if self.neumann:
            phi, w = self.edge_basis()
            shape = geom.shape
            pn = np.asarray(p).reshape(-1, 2)
            for bc in self.neumann:
                verts, nodes = self.boundary_edge_nodes(bc.tag)
                if len(verts) == 0:
                    continue
                tr = bc.table(t) * np.asarray(bc.traction, dtype=float)
                c = np.einsum("k,kn,enj,j->e", w, phi, pn[nodes], tr)
                e = shape[verts[:, 1]] - shape[verts[:, 0]]
                dL = e / np.linalg.norm(e, axis=1)[:, None]
                np.add.at(out, verts[:, 1], c[:, None] * dL)
                np.add.at(out, verts[:, 0], -c[:, None] * dL)
        return out
