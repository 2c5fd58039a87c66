"""2D triangle meshes: construction, validation, geometric map and element quality."""
from dataclasses import dataclass, field
from collections import Counter, defaultdict

import numpy as np

from .errors import DegenerateElement, InvertedRestElement, NonManifold

DEGENERACY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Mesh:
    rest_vertices: np.ndarray          # (nv, 2)
    triangles: np.ndarray              # (ne, 3), counter-clockwise
    boundary_edges: np.ndarray         # (nb, 2), oriented with the body on the left
    boundary_tags: np.ndarray          # (nb,)
    body_id: np.ndarray                # (ne,)
    dirichlet_tags: frozenset = field(default_factory=frozenset)

    @property
    def n_vertices(self):
        return len(self.rest_vertices)

    @property
    def n_elements(self):
        return len(self.triangles)

    @property
    def n_bodies(self):
        return int(self.body_id.max()) + 1 if len(self.body_id) else 0

    def vertex_body(self):
        """Body id of every vertex (vertices are never shared between bodies)."""
        vb = np.full(self.n_vertices, -1, dtype=int)
        for k in range(3):
            vb[self.triangles[:, k]] = self.body_id
        return vb

    def boundary_vertices(self):
        return np.unique(self.boundary_edges)

    def edges(self):
        """Unique undirected edges as sorted pairs, in a deterministic order."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def element_adjacency(self):
        """Pairs (t, t') of distinct elements sharing an edge, both orders."""
        owner = defaultdict(list)
        for t, tri in enumerate(self.triangles):
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                owner[(min(a, b), max(a, b))].append(t)
        pairs = []
        for ts in owner.values():
            if len(ts) == 2:
                pairs.append((ts[0], ts[1]))
                pairs.append((ts[1], ts[0]))
        return np.array(sorted(pairs), dtype=int).reshape(-1, 2)

    def tagged_vertices(self, tags):
        tags = set(tags)
        mask = np.isin(self.boundary_tags, list(tags))
        return np.unique(self.boundary_edges[mask])


def signed_areas(vertices, triangles):
    p = np.asarray(vertices)[np.asarray(triangles)]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def build_mesh(rest_vertices, triangles, boundary_spec=None, body_id=None,
               dirichlet_tags=()):
    """Validate connectivity and extract tagged boundary edges.

    ``boundary_spec`` is None (every boundary edge gets tag 0), a dict keyed by
    vertex pairs (either orientation), or a callable ``(p_a, p_b) -> tag``.
    """
    verts = np.array(rest_vertices, dtype=float).reshape(-1, 2)
    tris = np.array(triangles, dtype=int).reshape(-1, 3)
    if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
        raise IndexError("triangle vertex index out of range")
    keys = [tuple(sorted(t)) for t in tris.tolist()]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate triangles")
    areas = signed_areas(verts, tris)
    bad = np.flatnonzero(areas <= 0)
    if len(bad):
        raise InvertedRestElement(f"elements {bad.tolist()[:10]} have non-positive signed area")

    half = Counter()
    undirected = Counter()
    for a, b, c in tris.tolist():
        for u, v in ((a, b), (b, c), (c, a)):
            half[(u, v)] += 1
            undirected[(min(u, v), max(u, v))] += 1
    over = [e for e, n in undirected.items() if n > 2]
    if over:
        raise NonManifold(f"edges with more than two incident triangles: {over[:5]}")
    if any(n > 1 for n in half.values()):
        raise NonManifold("inconsistently oriented neighbouring triangles")

    bedges = [(u, v) for (u, v) in half if (v, u) not in half]
    bedges.sort()
    bedges = np.array(bedges, dtype=int).reshape(-1, 2)

    # boundary loops are closed: every boundary vertex has one outgoing and one incoming edge
    outdeg = Counter(bedges[:, 0].tolist())
    indeg = Counter(bedges[:, 1].tolist())
    if outdeg != indeg:
        raise NonManifold("boundary edges do not form closed loops")

    tags = np.zeros(len(bedges), dtype=int)
    if isinstance(boundary_spec, dict):
        for k, (u, v) in enumerate(bedges):
            tags[k] = boundary_spec.get((u, v), boundary_spec.get((v, u), 0))
    elif callable(boundary_spec):
        for k, (u, v) in enumerate(bedges):
            tags[k] = int(boundary_spec(verts[u], verts[v]))

    if body_id is None:
        body_id = _connected_components(len(verts), tris)
    body_id = np.asarray(body_id, dtype=int).reshape(len(tris))
    return Mesh(verts, tris, bedges, tags, body_id, frozenset(dirichlet_tags))


def _connected_components(nv, tris):
    parent = np.arange(nv)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b, c in tris.tolist():
        for u, v in ((a, b), (a, c)):
            ru, rv = find(u), find(v)
            if ru != rv:
                parent[max(ru, rv)] = min(ru, rv)
    roots = np.array([find(t[0]) for t in tris.tolist()], dtype=int)
    _, ids = np.unique(roots, return_inverse=True)
    return ids


def geometric_map(mesh, shape, elem, local):
    """Affine map of element ``elem`` evaluated at reference point ``local``.

    Returns the physical point, the 2x2 Jacobian d x / d local and its determinant.
    """
    shape = np.asarray(shape, dtype=float).reshape(-1, 2)
    tri = mesh.triangles[elem]
    x0, x1, x2 = shape[tri]
    jac = np.column_stack([x1 - x0, x2 - x0])
    det = float(np.linalg.det(jac))
    r0, r1, r2 = mesh.rest_vertices[tri]
    rest_det = abs(np.linalg.det(np.column_stack([r1 - r0, r2 - r0])))
    if det <= DEGENERACY_TOL * rest_det:
        raise DegenerateElement(f"element {elem} has determinant {det:.3e}")
    s, t = np.asarray(local, dtype=float)
    x = x0 * (1 - s - t) + x1 * s + x2 * t
    return x, jac, det


def scaled_jacobian_quality(mesh, shape=None):
    """Minimum over corners of the normalized corner Jacobian; 1 for equilateral."""
    shape = mesh.rest_vertices if shape is None else np.asarray(shape, dtype=float).reshape(-1, 2)
    p = shape[mesh.triangles]
    area2 = 2.0 * signed_areas(shape, mesh.triangles)
    q = np.full(len(p), np.inf)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            corner = np.where(denom > 0, area2 / denom, 0.0)
        q = np.minimum(q, corner)
    return q * (2.0 / np.sqrt(3.0))


def load_text_mesh(path):
    """Plain-text listing: ``v x y`` lines, ``t i j k`` lines (0-based), optional ``b i j tag``."""
    verts, tris, spec = [], [], {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(parts[1]), float(parts[2])])
            elif parts[0] == "t":
                tris.append([int(parts[1]), int(parts[2]), int(parts[3])])
            elif parts[0] == "b":
                spec[(int(parts[1]), int(parts[2]))] = int(parts[3])
    return build_mesh(verts, tris, spec or None)
