"""Backward differentiation formulas written as u^i + sum_j alpha_j u^{i-j} = beta dt v^i."""
from dataclasses import dataclass

import numpy as np

_ALPHA = {
    1: np.array([-1.0]),
    2: np.array([-4.0 / 3.0, 1.0 / 3.0]),
    3: np.array([-18.0 / 11.0, 9.0 / 11.0, -2.0 / 11.0]),
}
_BETA = {1: 1.0, 2: 2.0 / 3.0, 3: 6.0 / 11.0}


@dataclass(frozen=True)
class BdfScheme:
    order: int = 1

    def __post_init__(self):
        if self.order not in _ALPHA:
            raise ValueError("BDF order must be 1, 2 or 3")

    def row_order(self, i):
        """Order used at step i >= 1; startup steps fall back to lower orders."""
        if i < 1:
            raise ValueError("step index must be >= 1")
        return min(i, self.order)

    def alpha(self, i):
        return _ALPHA[self.row_order(i)]

    def beta(self, i):
        return _BETA[self.row_order(i)]

    def alpha_coef(self, i, j):
        """alpha^i_j, zero when row i uses fewer than j history states."""
        a = self.alpha(i)
        return float(a[j - 1]) if 1 <= j <= len(a) else 0.0

    def combine(self, current, history, i):
        """current + sum_j alpha^i_j history[i - j]; ``history`` is indexable by step."""
        out = np.array(current, dtype=float, copy=True)
        for j, a in enumerate(self.alpha(i), start=1):
            out += a * history[i - j]
        return out
