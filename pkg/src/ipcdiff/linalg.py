"""Sparse direct factorization with singularity reporting."""
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularSystem


class Factorization:
    def __init__(self, A, step=None):
        self.step = step
        A = sp.csc_matrix(A)
        self.A = A
        if A.shape[0] == 0:
            self.lu = None
            return
        try:
            self.lu = spla.splu(A)
        except RuntimeError as exc:
            raise SingularSystem(f"factorization failed: {exc}", step) from exc

    def solve(self, b, transpose=False):
        b = np.asarray(b, dtype=float)
        if self.lu is None:
            return np.zeros_like(b)
        x = self.lu.solve(b, trans="T" if transpose else "N")
        if not np.all(np.isfinite(x)):
            raise SingularSystem("non-finite solution of linear system", self.step)
        A = self.A.T if transpose else self.A
        res = np.linalg.norm(A @ x - b)
        if res > 1e-6 * max(np.linalg.norm(b), 1e-300):
            raise SingularSystem(f"linear solve residual {res:.3e} too large", self.step)
        return x


def solve(A, b, transpose=False, step=None):
    return Factorization(A, step).solve(b, transpose)
