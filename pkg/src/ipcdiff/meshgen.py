"""Structured mesh generators for tests and bundled scenes."""
import numpy as np

from .mesh import build_mesh

# boundary tags of rectangle sides
BOTTOM, RIGHT, TOP, LEFT = 1, 2, 3, 4


def rectangle(width, height, nx, ny, origin=(0.0, 0.0), pattern="alternating"):
    """Triangulated ``nx`` by ``ny`` grid with sides tagged BOTTOM/RIGHT/TOP/LEFT."""
    x0, y0 = origin
    xs = np.linspace(x0, x0 + width, nx + 1)
    ys = np.linspace(y0, y0 + height, ny + 1)
    verts = np.array([[x, y] for y in ys for x in xs])
    idx = lambda i, j: j * (nx + 1) + i
    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            if pattern == "alternating" and (i + j) % 2:
                tris += [(a, b, d), (b, c, d)]
            else:
                tris += [(a, b, c), (a, c, d)]
    tol = 1e-9 * max(width, height)

    def side(pa, pb):
        if abs(pa[1] - y0) < tol and abs(pb[1] - y0) < tol:
            return BOTTOM
        if abs(pa[0] - x0 - width) < tol and abs(pb[0] - x0 - width) < tol:
            return RIGHT
        if abs(pa[1] - y0 - height) < tol and abs(pb[1] - y0 - height) < tol:
            return TOP
        return LEFT

    return verts, np.array(tris), side


def disk(radius, n_rings, center=(0.0, 0.0), first_ring=6):
    """Concentric-ring disk; ring k has ``first_ring * k`` vertices."""
    cx, cy = center
    verts = [[cx, cy]]
    rings = [[0]]
    for k in range(1, n_rings + 1):
        n = first_ring * k
        r = radius * k / n_rings
        th = 2 * np.pi * np.arange(n) / n
        start = len(verts)
        verts += [[cx + r * np.cos(t), cy + r * np.sin(t)] for t in th]
        rings.append(list(range(start, start + n)))
    verts = np.array(verts)
    tris = []
    for k in range(1, n_rings + 1):
        inner, outer = rings[k - 1], rings[k]
        no = len(outer)
        if k == 1:
            tris += [(0, outer[a], outer[(a + 1) % no]) for a in range(no)]
            continue
        ni = len(inner)
        i = j = 0
        # walk both rings in angle order, emitting one triangle per advance
        while i < ni or j < no:
            if j < no and (i >= ni or (j + 1) / no <= (i + 1) / ni):
                tris.append((inner[i % ni], outer[j], outer[(j + 1) % no]))
                j += 1
            else:
                tris.append((inner[i], outer[j % no], inner[(i + 1) % ni]))
                i += 1
    return verts, np.array(tris)


def merge(parts):
    """Concatenate (vertices, triangles) parts; returns vertices, triangles and body ids."""
    verts, tris, body, offset = [], [], [], 0
    for b, (v, t) in enumerate(parts):
        verts.append(v)
        tris.append(np.asarray(t) + offset)
        body += [b] * len(t)
        offset += len(v)
    return np.vstack(verts), np.vstack(tris), np.array(body)


def rectangle_mesh(width, height, nx, ny, origin=(0.0, 0.0), dirichlet_tags=()):
    v, t, side = rectangle(width, height, nx, ny, origin)
    return build_mesh(v, t, side, dirichlet_tags=dirichlet_tags)


def disk_mesh(radius, n_rings, center=(0.0, 0.0)):
    v, t = disk(radius, n_rings, center)
    return build_mesh(v, t)
