"""Neighborhood machinery: kd-tree, kNN / ball queries, FPS, feature graphs.

All selection rules are exact and deterministic. Candidates are ordered by
(distance, index) lexicographically, so equal distances always resolve to the
smaller point index; farthest point sampling breaks max-distance ties by
lexicographically smallest coordinate triple, then smallest index. These
tie-breaks are part of the contract (tests compare against brute-force
oracles for equality, not closeness).

Two interchangeable query routes exist on purpose: a kd-tree (`build_index`
plus `knn` / `ball_query`) for the public single-query interface, and flat
vectorized scans (`knn_points`, `ball_points`, batched variants) that the
network hot path uses. Both implement the identical ordering contract.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import as_points


# ---------------------------------------------------------------------------
# brute-force flat scans (exact, vectorized; the network hot path)
# ---------------------------------------------------------------------------

def squared_distances(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances, shape (q, n).

    Computed from explicit differences (not the expanded dot-product trick),
    which keeps exact zeros for coincident points and exact ties for
    mirror-symmetric configurations.
    """
    diff = queries[:, None, :] - points[None, :, :]
    return np.einsum("qnd,qnd->qn", diff, diff)


def knn_points(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points per query row, shape (q, k).

    Ordered by (distance, index). When fewer than k points exist, the tail is
    padded by repeating the nearest point.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = points.shape[0]
    d2 = squared_distances(queries, points)
    order = np.argsort(d2, axis=1, kind="stable")
    if n >= k:
        return order[:, :k]
    pad = np.repeat(order[:, :1], k - n, axis=1)
    return np.concatenate([order, pad], axis=1)


def ball_points(points: np.ndarray, query: np.ndarray, radius: float,
                max_k: int) -> np.ndarray:
    """Indices within `radius` of one query point, shape (max_k,).

    Membership is distance <= radius (tested on squared values). Results are
    ordered by (distance, index) and truncated to max_k; short results are
    padded by repeating the first entry. An empty ball degrades to the single
    nearest point.
    """
    points = np.asarray(points, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if max_k < 1:
        raise ValueError(f"max_k must be >= 1, got {max_k}")
    if not radius > 0.0:
        raise ValueError(f"radius must be positive, got {radius!r}")
    d2 = squared_distances(query[None, :], points)[0]
    order = np.argsort(d2, kind="stable")
    inside = order[d2[order] <= radius * radius]
    if inside.size == 0:
        inside = order[:1]
    hits = inside[:max_k]
    if hits.size < max_k:
        hits = np.concatenate([hits, np.repeat(hits[:1], max_k - hits.size)])
    return hits


# ---------------------------------------------------------------------------
# kd-tree index (public query interface)
# ---------------------------------------------------------------------------

@dataclass
class _Node:
    axis: int = -1
    split: float = 0.0
    index: int = -1          # leaf payload when axis == -1
    left: Optional["_Node"] = None
    right: Optional["_Node"] = None
    lo: np.ndarray = field(default_factory=lambda: np.zeros(3))
    hi: np.ndarray = field(default_factory=lambda: np.zeros(3))


class SpatialIndex:
    """Balanced kd-tree over a fixed point set.

    Median split on the widest bounding-box axis; one point per leaf. Queries
    prune on strict inequality only, so equal-distance candidates are never
    dropped and the (distance, index) ordering contract holds exactly.
    """

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {points.shape}")
        if points.shape[0] < 1:
            raise ValueError("cannot index an empty point set")
        if not np.isfinite(points).all():
            raise ValueError("indexed points must be finite")
        self.points = points
        self._root = self._build(np.arange(points.shape[0]))

    def __len__(self) -> int:
        return self.points.shape[0]

    def _build(self, idx: np.ndarray) -> _Node:
        pts = self.points[idx]
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        if idx.size == 1:
            return _Node(axis=-1, index=int(idx[0]), lo=lo, hi=hi)
        axis = int(np.argmax(hi - lo))
        order = np.argsort(pts[:, axis], kind="stable")
        mid = idx.size // 2
        left_idx = idx[order[:mid]]
        right_idx = idx[order[mid:]]
        split = float(self.points[right_idx[0], axis])
        return _Node(
            axis=axis,
            split=split,
            left=self._build(left_idx),
            right=self._build(right_idx),
            lo=lo,
            hi=hi,
        )


def build_index(cloud) -> SpatialIndex:
    """Build a spatial index over a cloud (PointCloud or (n, 3) array)."""
    return SpatialIndex(as_points(cloud))


def _box_sqdist(query: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    d = np.maximum(np.maximum(lo - query, 0.0), query - hi)
    return float(d @ d)


def knn(index: SpatialIndex, query, k: int) -> np.ndarray:
    """k nearest indexed points for one query, ordered by (distance, index).

    Pads by repeating the nearest point when the index holds fewer than k.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (3,):
        raise ValueError(f"query must have shape (3,), got {query.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    pts = index.points
    # Max-heap on (-d2, -idx): heap[0] is the current worst keeper, and a
    # candidate replaces it when (d2, idx) is lexicographically smaller.
    heap: list = []
    kk = min(k, len(index))

    def visit(node: _Node):
        if len(heap) == kk and -heap[0][0] < _box_sqdist(query, node.lo, node.hi):
            return
        if node.axis == -1:
            p = pts[node.index]
            d = p - query
            d2 = float(d @ d)
            item = (-d2, -node.index)
            if len(heap) < kk:
                heapq.heappush(heap, item)
            elif item > heap[0]:
                heapq.heapreplace(heap, item)
            return
        if query[node.axis] < node.split:
            near, far = node.left, node.right
        else:
            near, far = node.right, node.left
        visit(near)
        visit(far)

    visit(index._root)
    found = sorted((-d2, -ni) for d2, ni in heap)
    out = np.array([i for _, i in found], dtype=np.int64)
    if out.size < k:
        out = np.concatenate([out, np.repeat(out[:1], k - out.size)])
    return out


def ball_query(index: SpatialIndex, query, radius: float, max_k: int) -> np.ndarray:
    """Indexed points with distance <= radius, ordered by (distance, index).

    Truncated to max_k; padded by repeating the first hit; an empty ball
    degrades to the single nearest point.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (3,):
        raise ValueError(f"query must have shape (3,), got {query.shape}")
    if max_k < 1:
        raise ValueError(f"max_k must be >= 1, got {max_k}")
    if not radius > 0.0:
        raise ValueError(f"radius must be positive, got {radius!r}")
    pts = index.points
    r2 = radius * radius
    hits: list = []

    def visit(node: _Node):
        if _box_sqdist(query, node.lo, node.hi) > r2:
            return
        if node.axis == -1:
            p = pts[node.index]
            d = p - query
            d2 = float(d @ d)
            if d2 <= r2:
                hits.append((d2, node.index))
            return
        visit(node.left)
        visit(node.right)

    visit(index._root)
    if not hits:
        return np.repeat(knn(index, query, 1)[:1], max_k)
    hits.sort()
    out = np.array([i for _, i in hits[:max_k]], dtype=np.int64)
    if out.size < max_k:
        out = np.concatenate([out, np.repeat(out[:1], max_k - out.size)])
    return out


# ---------------------------------------------------------------------------
# farthest point sampling
# ---------------------------------------------------------------------------

def _argmax_tied(values: np.ndarray, points: np.ndarray) -> int:
    """Argmax with ties resolved by smallest (x, y, z) triple, then index."""
    m = values.max()
    cand = np.flatnonzero(values == m)
    if cand.size == 1:
        return int(cand[0])
    sub = points[cand]
    order = np.lexsort((cand, sub[:, 2], sub[:, 1], sub[:, 0]))
    return int(cand[order[0]])


def farthest_point_sampling(cloud, n_samples: int) -> np.ndarray:
    """Greedy max-min subset of point indices, shape (n_samples,).

    Seeded at the point farthest from the centroid; each step adds the point
    maximizing distance to the already selected set. Ties resolve to the
    lexicographically smallest coordinate triple, then the smallest index,
    so symmetric inputs select deterministically.
    """
    pts = as_points(cloud)
    n = pts.shape[0]
    if not 1 <= n_samples <= n:
        raise ValueError(f"n_samples must be in [1, {n}], got {n_samples}")
    center = pts.mean(axis=0)
    first = _argmax_tied(np.linalg.norm(pts - center, axis=1), pts)
    selected = np.empty(n_samples, dtype=np.int64)
    selected[0] = first
    dmin = np.linalg.norm(pts - pts[first], axis=1)
    for i in range(1, n_samples):
        nxt = _argmax_tied(dmin, pts)
        selected[i] = nxt
        dmin = np.minimum(dmin, np.linalg.norm(pts - pts[nxt], axis=1))
    return selected


def fps_batch(points: np.ndarray, n_samples: int) -> np.ndarray:
    """farthest_point_sampling over a (B, n, 3) stack, shape (B, n_samples).

    Same selection rule as the single-cloud version; the generic step uses a
    first-occurrence argmax and falls back to the full tie-break only for
    rows that actually contain a tie.
    """
    points = np.asarray(points, dtype=np.float64)
    b, n, _ = points.shape
    if not 1 <= n_samples <= n:
        raise ValueError(f"n_samples must be in [1, {n}], got {n_samples}")
    rows = np.arange(b)
    selected = np.empty((b, n_samples), dtype=np.int64)
    center = points.mean(axis=1, keepdims=True)
    d = np.linalg.norm(points - center, axis=2)
    cur = _argmax_tied_batch(d, points)
    selected[:, 0] = cur
    dmin = np.linalg.norm(points - points[rows, cur][:, None, :], axis=2)
    for i in range(1, n_samples):
        cur = _argmax_tied_batch(dmin, points)
        selected[:, i] = cur
        dmin = np.minimum(dmin, np.linalg.norm(points - points[rows, cur][:, None, :], axis=2))
    return selected


def _argmax_tied_batch(values: np.ndarray, points: np.ndarray) -> np.ndarray:
    out = values.argmax(axis=1)
    maxima = values[np.arange(values.shape[0]), out]
    tied = (values == maxima[:, None]).sum(axis=1) > 1
    for row in np.flatnonzero(tied):
        out[row] = _argmax_tied(values[row], points[row])
    return out


# ---------------------------------------------------------------------------
# feature-space graphs
# ---------------------------------------------------------------------------

@dataclass
class NeighborGraph:
    """k nearest neighbors for a set of reference rows.

    reference_indices: (r,) indices of the rows the graph was queried at.
    neighbor_lists:    (r, k) neighbor indices, each row ordered by
                       (distance, index) within the corpus the graph was
                       built over.
    space_tag:         "euclidean" or "feature".
    """

    reference_indices: np.ndarray
    neighbor_lists: np.ndarray
    space_tag: str

    def __post_init__(self):
        self.reference_indices = np.asarray(self.reference_indices, dtype=np.int64)
        self.neighbor_lists = np.asarray(self.neighbor_lists, dtype=np.int64)
        if self.neighbor_lists.shape[0] != self.reference_indices.shape[0]:
            raise ValueError("one neighbor list per reference is required")
        if self.space_tag not in ("euclidean", "feature"):
            raise ValueError(f"unknown space_tag {self.space_tag!r}")

    @property
    def k(self) -> int:
        return self.neighbor_lists.shape[1]


def feature_sq_distances(corpus: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Squared distances in feature space, shape (q, n), blockwise exact diffs."""
    q, f = queries.shape
    n = corpus.shape[0]
    # Cap the (block, n, f) difference tensor at ~16 MB of float64.
    block = max(1, int(2_000_000 // max(1, n * f)))
    out = np.empty((q, n), dtype=np.float64)
    for start in range(0, q, block):
        stop = min(start + block, q)
        diff = queries[start:stop, None, :] - corpus[None, :, :]
        out[start:stop] = np.einsum("qnf,qnf->qn", diff, diff)
    return out


def knn_feature_graph(features: np.ndarray, k: int,
                      reference_indices: Optional[np.ndarray] = None) -> NeighborGraph:
    """Dynamic kNN graph in feature space; each row's k nearest include itself.

    Self-inclusion falls out of the ordering rule: a row is at distance zero
    from itself, and zero distances resolve by index, so a reference with
    duplicates keeps the smallest-index copies first.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must have shape (n, f), got {features.shape}")
    if not np.isfinite(features).all():
        raise ValueError("features must be finite")
    n = features.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if reference_indices is None:
        refs = np.arange(n, dtype=np.int64)
    else:
        refs = np.asarray(reference_indices, dtype=np.int64)
        if refs.ndim != 1 or (refs.size and (refs.min() < 0 or refs.max() >= n)):
            raise ValueError("reference_indices out of range")
    d2 = feature_sq_distances(features, features[refs])
    order = np.argsort(d2, axis=1, kind="stable")
    if n >= k:
        lists = order[:, :k]
    else:
        lists = np.concatenate([order, np.repeat(order[:, :1], k - n, axis=1)], axis=1)
    return NeighborGraph(refs, lists, "feature")


def knn_features_batch(corpus: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Batched feature kNN: corpus (B, n, f), queries (B, q, f) -> (B, q, k)."""
    b, n, f = corpus.shape
    q = queries.shape[1]
    if b * q * n * f > 30_000_000:
        d2 = np.stack([feature_sq_distances(corpus[i], queries[i]) for i in range(b)])
    else:
        diff = queries[:, :, None, :] - corpus[:, None, :, :]
        d2 = np.einsum("bqnf,bqnf->bqn", diff, diff)
    order = np.argsort(d2, axis=2, kind="stable")
    if n >= k:
        return order[:, :, :k]
    return np.concatenate([order, np.repeat(order[:, :, :1], k - n, axis=2)], axis=2)


def knn_points_batch(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Batched euclidean kNN: points (B, n, 3), queries (B, q, 3) -> (B, q, k)."""
    return knn_features_batch(points, queries, k)


def ball_points_batch(points: np.ndarray, queries: np.ndarray, radius: float,
                      max_k: int) -> np.ndarray:
    """Batched ball query with the same ordering/padding rules as ball_points.

    Implemented as a masked sort: out-of-ball distances are pushed to +inf so
    the stable argsort leaves in-ball hits, ordered by (distance, index), in
    the leading columns; short rows are padded with their first hit, and
    empty rows degrade to the single nearest point.
    """
    b, n, _ = points.shape
    q = queries.shape[1]
    diff = queries[:, :, None, :] - points[:, None, :, :]
    d2 = np.einsum("bqnf,bqnf->bqn", diff, diff)
    inside = d2 <= radius * radius
    masked = np.where(inside, d2, np.inf)
    order = np.argsort(masked, axis=2, kind="stable")
    kk = min(max_k, n)
    out = order[:, :, :kk].copy()
    counts = inside.sum(axis=2)
    # Empty balls: degrade to the nearest point overall.
    empty = counts == 0
    if empty.any():
        nearest = np.argsort(d2, axis=2, kind="stable")[:, :, 0]
        out[empty, :] = nearest[empty][:, None]
        counts = np.where(empty, 1, counts)
    # Pad short rows by repeating the first hit.
    col = np.arange(kk)
    short = col[None, None, :] >= counts[:, :, None]
    first = np.repeat(out[:, :, :1], kk, axis=2)
    out = np.where(short, first, out)
    if kk < max_k:
        out = np.concatenate([out, np.repeat(out[:, :, :1], max_k - kk, axis=2)], axis=2)
    return out
