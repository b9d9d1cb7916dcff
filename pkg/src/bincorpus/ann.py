"""Top-k candidate retrieval over unit-normalized vectors.

Candidate generation only ever affects recall: every candidate pair is
re-scored exactly before any merge, so the index needs to return *some*
high-inner-product neighbors, not all of them. This implementation computes
exact blocked inner products and keeps the top k per query; truncation to k
is what makes retrieval approximate. Results are deterministic: ties on
score break toward the smaller index.
"""

from __future__ import annotations

import numpy as np


class TopKIndex:
    def __init__(self, vectors: np.ndarray, block_rows: int = 1024):
        if vectors.ndim != 2:
            raise ValueError("index expects a 2-D array of row vectors")
        self.vectors = np.ascontiguousarray(vectors, dtype=float)
        self.block_rows = block_rows

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def query(self, queries: np.ndarray, k: int) -> np.ndarray:
        """Indices of the k highest-inner-product rows per query, score-ordered.

        Rows are padded with -1 when the index holds fewer than k vectors.
        """
        n = len(self)
        k_eff = min(k, n)
        out = np.full((queries.shape[0], k), -1, dtype=np.int64)
        if n == 0 or k_eff == 0:
            return out
        for start in range(0, queries.shape[0], self.block_rows):
            q = queries[start : start + self.block_rows]
            scores = q @ self.vectors.T
            if k_eff < n:
                part = np.argpartition(-scores, k_eff - 1, axis=1)[:, :k_eff]
            else:
                part = np.broadcast_to(np.arange(n), (q.shape[0], n)).copy()
            part_scores = np.take_along_axis(scores, part, axis=1)
            # stable order: descending score, ascending index
            order = np.lexsort((part, -part_scores), axis=1)
            out[start : start + q.shape[0], :k_eff] = np.take_along_axis(part, order, axis=1)
        return out
