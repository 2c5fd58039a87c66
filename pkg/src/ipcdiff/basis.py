"""Lagrange bases and quadrature rules on the reference triangle (0,0),(1,0),(0,1)."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Quadrature:
    points: np.ndarray   # (nq, 2) reference coordinates
    weights: np.ndarray  # (nq,), sum = 1/2
    degree: int


def dunavant(degree):
    """Symmetric Dunavant rule exact for polynomials of total degree ``degree``."""
    if degree <= 1:
        pts = np.array([[1.0 / 3.0, 1.0 / 3.0]])
        w = np.array([0.5])
        return Quadrature(pts, w, 1)
    if degree == 2:
        pts = np.array([[1.0 / 6.0, 1.0 / 6.0],
                        [2.0 / 3.0, 1.0 / 6.0],
                        [1.0 / 6.0, 2.0 / 3.0]])
        w = np.full(3, 1.0 / 6.0)
        return Quadrature(pts, w, 2)
    if degree <= 4:
        a1, w1 = 0.44594849091596488632, 0.22338158967801146570
        a2, w2 = 0.09157621350977074346, 0.10995174365532186764
        pts = np.array([[a1, a1], [1 - 2 * a1, a1], [a1, 1 - 2 * a1],
                        [a2, a2], [1 - 2 * a2, a2], [a2, 1 - 2 * a2]])
        w = 0.5 * np.array([w1, w1, w1, w2, w2, w2])
        return Quadrature(pts, w, 4)
    raise ValueError(f"no quadrature rule of degree {degree}")


# local P2 node order: 3 vertices, then midpoints of edges (0,1), (1,2), (2,0)
P2_LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


@dataclass(frozen=True)
class BasisSet:
    order: int

    @property
    def nodes_per_element(self):
        return 3 if self.order == 1 else 6

    @property
    def nodes(self):
        v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        if self.order == 1:
            return v
        mids = np.array([(v[a] + v[b]) / 2 for a, b in P2_LOCAL_EDGES])
        return np.vstack([v, mids])


def _p1(x, y):
    vals = np.stack([1.0 - x - y, x, y], axis=-1)
    grads = np.broadcast_to(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]),
                            vals.shape + (2,)).copy()
    return vals, grads


def _p2(x, y):
    l0, l1, l2 = 1.0 - x - y, x, y
    vals = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                     4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], axis=-1)
    # d(l0,l1,l2)/d(x,y)
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    L = [l0, l1, l2]
    grads = np.zeros(vals.shape + (2,))
    for i in range(3):
        grads[..., i, :] = (4 * L[i] - 1)[..., None] * dl[i]
    for k, (a, b) in enumerate(P2_LOCAL_EDGES):
        grads[..., 3 + k, :] = 4 * (L[a][..., None] * dl[b] + L[b][..., None] * dl[a])
    return vals, grads


def eval_basis(basis, local):
    """Values ``(..., n)`` and reference gradients ``(..., n, 2)`` at ``local`` points."""
    local = np.asarray(local, dtype=float)
    x, y = local[..., 0], local[..., 1]
    if basis.order == 1:
        return _p1(x, y)
    if basis.order == 2:
        return _p2(x, y)
    raise ValueError(f"unsupported basis order {basis.order}")
