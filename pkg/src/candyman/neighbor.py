"""Exact Euclidean nearest-neighbour search.

:class:`KdTree` stores one point per node (the median along the dimension of
widest spread). Ties in distance are always resolved towards the lower point
index, both here and in the brute-force routines, so the two paths agree
exactly. Tree search loses its edge once the dimension passes ~10;
:class:`NearestSearch` switches to brute force there and for small sets.
"""

from __future__ import annotations

import heapq

import numpy as np

BRUTE_FORCE_DIM = 10
BRUTE_FORCE_SIZE = 256


def _sqdist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    return ((points - q) ** 2).sum(axis=-1)


def _sqdist_one(p: np.ndarray, q: np.ndarray) -> float:
    return float(((p - q) ** 2).sum())


class KdTree:
    """Balanced k-d tree over a fixed point matrix (rows are points)."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("KdTree needs a nonempty (N, d) point matrix")
        self.points = pts
        n = pts.shape[0]
        self.split_dim = np.full(n, -1, dtype=np.int64)
        self.split_value = np.zeros(n)
        self.point_index = np.full(n, -1, dtype=np.int64)
        self.left = np.full(n, -1, dtype=np.int64)
        self.right = np.full(n, -1, dtype=np.int64)
        self._n_nodes = 0
        self.root = self._build(np.arange(n))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def _build(self, idx: np.ndarray) -> int:
        if idx.size == 0:
            return -1
        node = self._n_nodes
        self._n_nodes += 1
        sub = self.points[idx]
        dim = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
        order = idx[np.lexsort((idx, sub[:, dim]))]
        mid = order.size // 2
        self.split_dim[node] = dim
        self.point_index[node] = order[mid]
        self.split_value[node] = self.points[order[mid], dim]
        self.left[node] = self._build(order[:mid])
        self.right[node] = self._build(order[mid + 1:])
        return node

    def depth(self) -> int:
        def rec(node):
            if node < 0:
                return 0
            return 1 + max(rec(self.left[node]), rec(self.right[node]))
        return rec(self.root)

    def nearest(self, q) -> tuple[int, float]:
        q = self._query(q)
        best = [np.inf, -1]
        self._nearest(self.root, q, best)
        return int(best[1]), float(np.sqrt(best[0]))

    def _nearest(self, node, q, best):
        if node < 0:
            return
        i = self.point_index[node]
        d2 = _sqdist_one(self.points[i], q)
        if d2 < best[0] or (d2 == best[0] and i < best[1]):
            best[0], best[1] = d2, i
        diff = q[self.split_dim[node]] - self.split_value[node]
        near, far = (self.left[node], self.right[node]) if diff < 0 else (self.right[node], self.left[node])
        self._nearest(near, q, best)
        # <= so that equal-distance points on the far side are still visited
        if diff * diff <= best[0]:
            self._nearest(far, q, best)

    def k_nearest(self, q, k: int) -> list[tuple[int, float]]:
        if k > len(self):
            raise ValueError(f"asked for {k} neighbours among {len(self)} points")
        if k < 1:
            return []
        q = self._query(q)
        heap: list[tuple[float, int]] = []  # max-heap on (d2, index) via negation
        self._k_nearest(self.root, q, k, heap)
        found = sorted((-d2, -ni) for d2, ni in heap)
        return [(int(i), float(np.sqrt(d2))) for d2, i in found]

    def _k_nearest(self, node, q, k, heap):
        if node < 0:
            return
        i = int(self.point_index[node])
        d2 = _sqdist_one(self.points[i], q)
        item = (-d2, -i)
        if len(heap) < k:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)
        diff = q[self.split_dim[node]] - self.split_value[node]
        near, far = (self.left[node], self.right[node]) if diff < 0 else (self.right[node], self.left[node])
        self._k_nearest(near, q, k, heap)
        if len(heap) < k or diff * diff <= -heap[0][0]:
            self._k_nearest(far, q, k, heap)

    def _query(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ValueError(f"query has dimension {q.shape[0]}, tree has {self.dim}")
        return q


def build(points) -> KdTree:
    return KdTree(points)


def nearest(tree: KdTree, q) -> tuple[int, float]:
    return tree.nearest(q)


def k_nearest(tree: KdTree, q, k: int) -> list[tuple[int, float]]:
    return tree.k_nearest(q, k)


def brute_nearest(points, q) -> tuple[int, float]:
    d2 = _sqdist(np.asarray(points, dtype=np.float64), np.asarray(q, dtype=np.float64))
    i = int(np.argmin(d2))  # argmin returns the first (lowest) index among ties
    return i, float(np.sqrt(d2[i]))


def brute_k_nearest(points, q, k: int) -> list[tuple[int, float]]:
    points = np.asarray(points, dtype=np.float64)
    if k > points.shape[0]:
        raise ValueError(f"asked for {k} neighbours among {points.shape[0]} points")
    d2 = _sqdist(points, np.asarray(q, dtype=np.float64))
    order = np.lexsort((np.arange(d2.size), d2))[:k]
    return [(int(i), float(np.sqrt(d2[i]))) for i in order]


def _candidate_sqdists(points, sq_norms, queries):
    # Gram-matrix distances: fast but inexact, used only to shortlist
    approx = sq_norms[None, :] + (queries**2).sum(axis=1)[:, None] - 2.0 * queries @ points.T
    slack = 1e-9 * (sq_norms.max() + (queries**2).sum(axis=1)[:, None] + 1.0)
    return approx, slack


class NearestSearch:
    """Exact search that picks tree or brute force by dimension and size."""

    def __init__(self, points, chunk: int = 512):
        self.points = np.asarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise ValueError("need a nonempty (N, d) point matrix")
        n, d = self.points.shape
        self.use_tree = d <= BRUTE_FORCE_DIM and n >= BRUTE_FORCE_SIZE
        self.tree = KdTree(self.points) if self.use_tree else None
        self._sq_norms = (self.points**2).sum(axis=1)
        self.chunk = chunk

    def __len__(self) -> int:
        return self.points.shape[0]

    def nearest(self, q) -> tuple[int, float]:
        if self.tree is not None:
            return self.tree.nearest(q)
        return brute_nearest(self.points, q)

    def k_nearest(self, q, k: int) -> list[tuple[int, float]]:
        if self.tree is not None:
            return self.tree.k_nearest(q, k)
        return brute_k_nearest(self.points, q, k)

    def nearest_many(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the nearest point for every query row."""
        Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        idx = np.empty(Q.shape[0], dtype=np.int64)
        dist = np.empty(Q.shape[0])
        if self.tree is not None or self.points.shape[0] * self.points.shape[1] < 4096:
            for r, q in enumerate(Q):
                idx[r], dist[r] = self.nearest(q)
            return idx, dist
        for s in range(0, Q.shape[0], self.chunk):
            block = Q[s:s + self.chunk]
            approx, slack = _candidate_sqdists(self.points, self._sq_norms, block)
            lo = approx.min(axis=1, keepdims=True)
            for r, row in enumerate(approx):
                cand = np.flatnonzero(row <= lo[r, 0] + 2 * slack[r, 0])
                d2 = _sqdist(self.points[cand], block[r])
                j = np.lexsort((cand, d2))[0]
                idx[s + r], dist[s + r] = cand[j], np.sqrt(d2[j])
        return idx, dist

    def k_nearest_many(self, queries, k: int) -> list[list[tuple[int, float]]]:
        Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if k > len(self):
            raise ValueError(f"asked for {k} neighbours among {len(self)} points")
        if self.tree is not None or self.points.shape[0] * self.points.shape[1] < 4096:
            return [self.k_nearest(q, k) for q in Q]
        out = []
        for s in range(0, Q.shape[0], self.chunk):
            block = Q[s:s + self.chunk]
            approx, slack = _candidate_sqdists(self.points, self._sq_norms, block)
            kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
            for r, row in enumerate(approx):
                cand = np.flatnonzero(row <= kth[r] + 2 * slack[r, 0])
                d2 = _sqdist(self.points[cand], block[r])
                order = np.lexsort((cand, d2))[:k]
                out.append([(int(cand[j]), float(np.sqrt(d2[j]))) for j in order])
        return out
