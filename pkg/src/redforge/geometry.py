"""Point-cloud kernels: nearest neighbours, Chamfer distance, resampling,
normalisation and bilateral reflection.

Clouds are ``(M, 3)`` float64 arrays. Every indexed kernel has a slow
brute-force twin (``*_bruteforce``) used as a test oracle.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

# Dense brute force beats tree construction below this many pairs.
_DENSE_PAIR_LIMIT = 100_000
_CHUNK = 256


def as_cloud(points, name: str = "cloud") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (M, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return pts


def _sqdist_rows(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    # Explicit differences, not the |a|^2+|b|^2-2ab expansion: no cancellation.
    # Summed per axis in the order (x + y) + z, same as a row sum.
    out = None
    for k in range(3):
        d = q[:, k, None] - t[None, :, k]
        d *= d
        out = d if out is None else out + d
    return out


def _nn_dense(q, t):
    idx = np.empty(len(q), dtype=np.int64)
    d2 = np.empty(len(q), dtype=np.float64)
    for s in range(0, len(q), _CHUNK):
        block = _sqdist_rows(q[s:s + _CHUNK], t)
        j = np.argmin(block, axis=1)  # first occurrence -> lowest index on ties
        idx[s:s + _CHUNK] = j
        d2[s:s + _CHUNK] = block[np.arange(len(j)), j]
    return idx, d2


def _nn_kdtree(q, t):
    tree = cKDTree(t)
    k = min(4, len(t))
    dist, cand = tree.query(q, k=k)
    if k == 1:
        dist, cand = dist[:, None], cand[:, None]
    diff = t[cand] - q[:, None, :]
    exact = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    best = exact.min(axis=1)
    # lowest index among exact minima
    idx = np.where(exact == best[:, None], cand, len(t)).min(axis=1)
    d2 = best
    if k < len(t):
        # the k-th candidate ties the best: widen to every point in the ball
        for i in np.flatnonzero(dist[:, -1] ** 2 <= best * (1 + 1e-9) + 1e-300):
            c = np.asarray(sorted(tree.query_ball_point(q[i], np.sqrt(best[i]) * (1 + 1e-9) + 1e-150)))
            dd = t[c] - q[i]
            ex = (dd * dd).sum(axis=1)
            idx[i] = c[ex == ex.min()].min()
            d2[i] = ex.min()
    return idx.astype(np.int64), d2


def nearest_neighbors(query, target, method: str = "auto"):
    """For each query point, the index of its nearest target point and the
    squared distance. Ties go to the lowest target index.

    ``method`` is ``"dense"`` (chunked exact), ``"kdtree"`` (scipy tree with
    exact re-ranking) or ``"auto"``.
    """
    q = as_cloud(query, "query")
    t = as_cloud(target, "target")
    if len(t) == 0:
        raise ValueError("empty neighbor target")
    if len(q) == 0:
        raise ValueError("empty neighbor query")
    if method == "auto":
        method = "dense" if len(q) * len(t) <= _DENSE_PAIR_LIMIT else "kdtree"
    if method == "dense":
        return _nn_dense(q, t)
    if method == "kdtree":
        return _nn_kdtree(q, t)
    raise ValueError(f"unknown nearest-neighbor method {method!r}")


def nearest_neighbors_bruteforce(query, target):
    """O(N*M) oracle: one query at a time, first minimum wins."""
    q = np.asarray(query, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if len(t) == 0:
        raise ValueError("empty neighbor target")
    idx = np.empty(len(q), dtype=np.int64)
    d2 = np.empty(len(q), dtype=np.float64)
    for i, p in enumerate(q):
        diff = t - p
        row = (diff * diff).sum(axis=1)
        best_j, best = 0, row[0]
        for j in range(1, len(row)):
            if row[j] < best:
                best_j, best = j, row[j]
        idx[i], d2[i] = best_j, best
    return idx, d2


def chamfer_distance(a, b, method: str = "auto") -> float:
    """Sum of both directional means of squared nearest-neighbour distances."""
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer_distance of an empty cloud")
    _, dab = nearest_neighbors(a, b, method)
    _, dba = nearest_neighbors(b, a, method)
    return float(dab.mean() + dba.mean())


def chamfer_distance_bruteforce(a, b) -> float:
    _, dab = nearest_neighbors_bruteforce(a, b)
    _, dba = nearest_neighbors_bruteforce(b, a)
    return float(sum(dab) / len(dab) + sum(dba) / len(dba))


def resample_indices(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    if m <= 0:
        raise ValueError("resample count must be positive")
    if n <= 0:
        raise ValueError("cannot resample an empty cloud")
    if m > n:
        return rng.integers(0, n, size=m)
    return rng.choice(n, size=m, replace=False)


def resample_uniform(cloud, m: int, seed: int) -> np.ndarray:
    """``m`` points drawn uniformly; with replacement only when ``m`` exceeds
    the cloud size."""
    pts = as_cloud(cloud)
    idx = resample_indices(len(pts), m, np.random.default_rng(seed))
    return pts[idx]


def normalize_unit(cloud):
    """Centre on the centroid and scale so the largest |coordinate| is 1.

    Returns ``(normalized, center, scale)`` with
    ``cloud == normalized * scale + center``.
    """
    pts = as_cloud(cloud)
    if len(pts) == 0:
        raise ValueError("zero extent")
    center = pts.mean(axis=0)
    shifted = pts - center
    scale = float(np.abs(shifted).max())
    if scale == 0.0:
        raise ValueError("zero extent")
    return shifted / scale, center, scale


def denormalize(cloud, center, scale) -> np.ndarray:
    return np.asarray(cloud, dtype=np.float64) * scale + np.asarray(center, dtype=np.float64)


def reflect_bilateral(cloud) -> np.ndarray:
    """Mirror through the x = 0 plane."""
    pts = np.array(cloud, dtype=np.float64, copy=True).reshape(-1, 3)
    pts[:, 0] = -pts[:, 0]
    return pts
