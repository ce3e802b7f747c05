"""Exact low-rank representation of dense update matrices.

A ``LowRankDelta`` holds float64 factors ``b`` (d_out x r) and ``a``
(r x d_in) whose product is the represented matrix. Linear combinations
concatenate factors, so running means stay exact; similarity and
truncated SVD work on the factors without ever forming the dense
product, which keeps large-geometry stores affordable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapters import FactorPair


@dataclass
class LowRankDelta:
    b: np.ndarray  # d_out x r, float64
    a: np.ndarray  # r x d_in, float64

    @property
    def shape(self) -> tuple[int, int]:
        return (self.b.shape[0], self.a.shape[1])

    @property
    def rank_bound(self) -> int:
        return self.b.shape[1]

    @classmethod
    def from_factors(cls, fp: FactorPair, scaling: float) -> "LowRankDelta":
        return cls(
            b=fp.b.astype(np.float64) * scaling,
            a=fp.a.astype(np.float64),
        )

    @classmethod
    def from_dense(cls, delta: np.ndarray) -> "LowRankDelta":
        delta = np.asarray(delta, dtype=np.float64)
        u, s, vt = np.linalg.svd(delta, full_matrices=False)
        keep = s > max(1e-300, s[0] * 1e-15) if s.size else np.zeros(0, dtype=bool)
        r = int(keep.sum())
        root = np.sqrt(s[:r])
        return cls(b=u[:, :r] * root, a=root[:, None] * vt[:r])

    @classmethod
    def combine(
        cls, items: Sequence["LowRankDelta"], coeffs: Sequence[float]
    ) -> "LowRankDelta":
        """Exact linear combination sum(c_i * item_i) by factor concatenation."""
        bs = [item.b * c for item, c in zip(items, coeffs)]
        return cls(b=np.hstack(bs), a=np.vstack([item.a for item in items]))

    def materialize(self) -> np.ndarray:
        return self.b @ self.a

    def inner(self, other: "LowRankDelta") -> float:
        """Frobenius inner product <self, other> via the r x r Gram matrices."""
        m = self.b.T @ other.b
        n = self.a @ other.a.T
        return float(np.sum(m * n))

    def norm(self) -> float:
        return float(np.sqrt(max(0.0, self.inner(self))))

    def _qr_core(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal bases and the small core so self = qb @ core @ qa."""
        qb, rb = np.linalg.qr(self.b)
        qa, ra = np.linalg.qr(self.a.T)
        return qb, rb @ ra.T, qa.T

    def compressed(self, rel_tol: float = 1e-14) -> "LowRankDelta":
        """Numerically equal representation with redundant rank removed."""
        if self.rank_bound == 0:
            return self
        qb, core, qa = self._qr_core()
        u, s, vt = np.linalg.svd(core)
        keep = s > (s[0] * rel_tol if s.size and s[0] > 0 else np.inf)
        r = int(keep.sum())
        root = np.sqrt(s[:r])
        return LowRankDelta(b=(qb @ u[:, :r]) * root, a=root[:, None] * (vt[:r] @ qa))

    def svd_truncate(self, rank: int) -> tuple["LowRankDelta", np.ndarray]:
        """Best rank-``rank`` approximation and the full singular values."""
        if self.rank_bound == 0:
            d_out, d_in = self.shape
            return (
                LowRankDelta(b=np.zeros((d_out, rank)), a=np.zeros((rank, d_in))),
                np.zeros(0),
            )
        qb, core, qa = self._qr_core()
        u, s, vt = np.linalg.svd(core)
        r = min(rank, s.size)
        root = np.sqrt(s[:r])
        b = np.zeros((self.shape[0], rank))
        a = np.zeros((rank, self.shape[1]))
        b[:, :r] = (qb @ u[:, :r]) * root
        a[:r] = root[:, None] * (vt[:r] @ qa)
        return LowRankDelta(b=b, a=a), s
