"""Farthest point sampling, exact k-nearest-neighbor search and gathering."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud

# Above this many query-point pairs the kd-tree path is used.
EXHAUSTIVE_LIMIT = 4_000_000


def _coords(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) coordinates, got {pts.shape}")
    return pts


def farthest_point_sample(cloud, q: int) -> np.ndarray:
    """Greedy max-min sampling of ``q`` indices.

    The first index is the point farthest from the centroid. Ties go to the
    lowest index. For ``q > N`` the N distinct picks repeat cyclically.
    """
    pts = _coords(cloud)
    n = pts.shape[0]
    if n == 0:
        raise ValueError("cannot sample from an empty cloud")
    m = min(q, n)
    picked = np.empty(m, dtype=np.int64)
    d_centroid = np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)
    picked[0] = int(np.argmax(d_centroid))
    mind = np.sum((pts - pts[picked[0]]) ** 2, axis=1)
    mind[picked[0]] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        picked[i] = nxt
        d = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(mind, d, out=mind)
        mind[picked[: i + 1]] = -1.0
    if q <= n:
        return picked
    return picked[np.arange(q) % n]


def _sorted_rows(d2: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    # ascending distance, ties to the lower index
    out = np.empty((d2.shape[0], k), dtype=np.int64)
    for row in range(d2.shape[0]):
        order = np.lexsort((idx[row], d2[row]))[:k]
        out[row] = idx[row][order]
    return out


def knn(cloud, queries, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest cloud points for every query, (Q, k).

    ``queries`` is either an index array into the cloud or (Q, 3)
    coordinates. Neighbors are sorted by distance with ties to the lower
    index; if ``k > N`` the nearest index fills the remaining slots.
    """
    pts = _coords(cloud)
    n = pts.shape[0]
    if n == 0:
        raise ValueError("cannot search an empty cloud")
    queries = np.asarray(queries)
    if queries.ndim == 1 and np.issubdtype(queries.dtype, np.integer):
        qpts = pts[queries]
    else:
        qpts = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    kk = min(k, n)
    if qpts.shape[0] * n <= EXHAUSTIVE_LIMIT:
        result = _knn_exhaustive(pts, qpts, kk)
    else:
        result = _knn_tree(pts, qpts, kk)
    if k > n:
        fill = np.repeat(result[:, :1], k - n, axis=1)
        result = np.concatenate([result, fill], axis=1)
    return result


def _knn_exhaustive(pts, qpts, k, chunk=64):
    out = []
    all_idx = np.arange(pts.shape[0])
    for start in range(0, qpts.shape[0], chunk):
        qc = qpts[start : start + chunk]
        d2 = np.sum((qc[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        if k < pts.shape[0]:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            pd = np.take_along_axis(d2, part, axis=1)
            kth = pd.max(axis=1)
            n_le = np.count_nonzero(d2 <= kth[:, None], axis=1)
            order = np.lexsort((part, pd), axis=1)
            fast = np.take_along_axis(part, order, axis=1)
            for row in range(d2.shape[0]):
                if n_le[row] == k:
                    out.append(fast[row])
                    continue
                # every index tied with the k-th distance is a candidate
                cand = np.flatnonzero(d2[row] <= kth[row])
                o = np.lexsort((cand, d2[row, cand]))[:k]
                out.append(cand[o])
        else:
            out.extend(_sorted_rows(d2, np.broadcast_to(all_idx, d2.shape), k))
    return np.array(out, dtype=np.int64).reshape(qpts.shape[0], k)


def _knn_tree(pts, qpts, k):
    tree = cKDTree(pts)
    dist, _ = tree.query(qpts, k=k)
    dist = dist.reshape(qpts.shape[0], k)
    out = np.empty((qpts.shape[0], k), dtype=np.int64)
    for row, q in enumerate(qpts):
        # widen slightly so every point tied at the k-th distance is found,
        # then re-rank with exactly the exhaustive distance formula
        cand = np.asarray(tree.query_ball_point(q, dist[row, -1] * (1 + 1e-9) + 1e-12), dtype=np.int64)
        d2 = np.sum((pts[cand] - q) ** 2, axis=1)
        order = np.lexsort((cand, d2))[:k]
        out[row] = cand[order]
    return out


def group(source: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Gather rows of ``source`` into a (Q, K, C) block."""
    source = np.asarray(source)
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= source.shape[0]):
        raise IndexError("group index out of range")
    return source[indices]
