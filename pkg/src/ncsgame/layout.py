"""Index bookkeeping for the augmented state ``z_k = [x_k; uh_{k-1}; ...; uh_0]``.

``uh_j`` stacks the controls ``u_{1,j} .. u_{p,j}``.  Blocks are addressed by
controller ``m`` (0-based) and lag ``n`` (1-based: ``u_{m,k-n}``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentedLayout:
    M: int
    K: int
    p: int
    k: int

    @property
    def dim(self) -> int:
        return self.M + self.p * self.k * self.K

    @property
    def x(self) -> slice:
        return slice(0, self.M)

    def offset(self, m: int, n: int) -> int:
        if not (0 <= m < self.p and 1 <= n <= self.k):
            raise IndexError(f"block (m={m}, n={n}) outside layout with p={self.p}, k={self.k}")
        return self.M + ((n - 1) * self.p + m) * self.K

    def block(self, m: int, n: int) -> slice:
        start = self.offset(m, n)
        return slice(start, start + self.K)

    @property
    def next(self) -> "AugmentedLayout":
        return AugmentedLayout(self.M, self.K, self.p, self.k + 1)

    def u_slot(self, l: int) -> slice:
        """Rows of ``u_{l,k}`` inside ``z_{k+1}``."""
        return self.next.block(l, 1)

    @property
    def u_rows(self) -> slice:
        """All current controls inside ``z_{k+1}``."""
        return slice(self.M, self.M + self.p * self.K)

    def carried(self) -> np.ndarray:
        """Indices of ``z_{k+1}`` that copy ``z_k`` (state and older controls)."""
        M, pK = self.M, self.p * self.K
        return np.concatenate([np.arange(M), np.arange(M + pK, self.next.dim)])

    def column_groups(self) -> np.ndarray:
        """Group id per column of ``z_k``: 0 for the state, 1 + (n-1)p + m for block (m, n)."""
        g = np.zeros(self.dim, dtype=np.int64)
        if self.k:
            g[self.M:] = 1 + np.repeat(np.arange(self.p * self.k), self.K)
        return g

    def column_probs(self, p_state: np.ndarray, p_hist: np.ndarray) -> np.ndarray:
        """Per-column success probability of controller-``i`` observations.

        ``p_state[i]`` gates the state columns, ``p_hist[i, m]`` the columns of controller ``m``.
        Returns a ``(p, dim)`` array.
        """
        out = np.empty((self.p, self.dim))
        for i in range(self.p):
            out[i, :self.M] = p_state[i]
            if self.k:
                out[i, self.M:] = np.tile(np.repeat(p_hist[i], self.K), self.k)
        return out
