"""Sphere-indicator retrieval: residual-field scoring with outlier trimming,
per-sample argmin over sources and vote aggregation."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import as_cloud
from .nets import ParamStore, encode, residual_fast
from .rng import stream

MODES = ("mean", "max")
DEFAULT_TRIM = 0.1
DEFAULT_SAMPLES = 1000
DEFAULT_TOP_K = 10


def sample_sphere(n: int, dim: int, seed: int) -> np.ndarray:
    """``n`` points uniform on the unit sphere in R^dim, as rows."""
    if n < 1 or dim < 2:
        raise ValueError(f"sample_sphere needs n >= 1 and dim >= 2, got n={n}, dim={dim}")
    v = stream(seed, "sphere").normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def indicator_from_full(g) -> np.ndarray:
    g = np.asarray(g.data if isinstance(g, ad.Tensor) else g, dtype=np.float64)
    n = np.linalg.norm(g)
    if n == 0 or not np.isfinite(n):
        raise ValueError("cannot normalise a zero full-shape feature")
    return g / n


def _trim_count(m: int, trim: float) -> int:
    if not 0.0 <= trim < 1.0:
        raise ValueError(f"trim fraction must be in [0, 1), got {trim}")
    k = math.ceil(trim * m)
    if k >= m:
        raise ValueError(f"trimming {k} of {m} points leaves nothing to score")
    return k


def trimmed_scores(norms: np.ndarray, trim: float = DEFAULT_TRIM, mode: str = "mean") -> np.ndarray:
    """Row-wise trimmed score of residual norms with shape (..., M)."""
    if mode not in MODES:
        raise ValueError(f"unknown score mode {mode!r}")
    m = norms.shape[-1]
    keep = m - _trim_count(m, trim)
    kept = np.sort(norms, axis=-1)[..., :keep]
    return kept.mean(axis=-1) if mode == "mean" else kept[..., -1]


def trimmed_score(R, trim: float = DEFAULT_TRIM, mode: str = "mean") -> float:
    """Drop the ``ceil(trim * M)`` largest residual norms, then take the mean
    (or max) of the rest."""
    r = np.asarray(R.data if isinstance(R, ad.Tensor) else R, dtype=np.float64).reshape(-1, 3)
    return float(trimmed_scores(np.sqrt((r * r).sum(axis=1)), trim, mode))


@dataclass
class RetrievalOutcome:
    ids: list
    scores: np.ndarray  # (n_samples, n_sources)
    votes: np.ndarray  # (n_sources,)
    best_scores: np.ndarray  # (n_sources,) min over samples
    top_k: list
    mode: str = "mean"
    params: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return int(self.scores.shape[0])

    def ranking(self) -> list:
        """Sources that received votes: most votes first, ties by id."""
        voted = [i for i in range(len(self.ids)) if self.votes[i] > 0]
        return [self.ids[i] for i in sorted(voted, key=lambda i: (-self.votes[i], self.ids[i]))]

    def to_json(self, target: str) -> dict:
        order = sorted(range(len(self.ids)), key=lambda i: (-self.votes[i], self.ids[i]))
        return {
            "target": target,
            "n_samples": self.n_samples,
            "mode": self.mode,
            "results": [{"id": self.ids[i], "votes": int(self.votes[i]),
                         "best_score": float(self.best_scores[i])} for i in order],
            "top_k": list(self.top_k),
        }

    def dumps(self, target: str) -> str:
        return json.dumps(self.to_json(target), indent=1)


def vote(scores: np.ndarray, ids: list, top_k: int):
    """Votes per source from a (samples, sources) score table; argmin ties go
    to the lowest id. ``top_k`` lists voted sources first (votes desc, then
    id) and fills any remaining slots by best score, then id."""
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    by_id = scores[:, order]
    winners = np.asarray(order)[np.argmin(by_id, axis=1)]
    votes = np.bincount(winners, minlength=len(ids))
    best = scores.min(axis=0)
    voted = sorted((i for i in range(len(ids)) if votes[i] > 0), key=lambda i: (-votes[i], ids[i]))
    rest = sorted((i for i in range(len(ids)) if votes[i] == 0), key=lambda i: (best[i], ids[i]))
    top = [ids[i] for i in (voted + rest)[:top_k]]
    return votes, best, top


class SourceCache:
    """Per-source global features under one parameter set."""

    def __init__(self, store: ParamStore):
        self.store = store
        self._g = {}

    def global_feature(self, shape_id, cloud) -> np.ndarray:
        if shape_id not in self._g:
            with ad.no_grad():
                self._g[shape_id] = encode(cloud, self.store, "enc_source").global_.data
        return self._g[shape_id]

    def __len__(self):
        return len(self._g)


def retrieve_otm(db, target, store: ParamStore, n_samples: int = DEFAULT_SAMPLES,
                 top_k: int = DEFAULT_TOP_K, trim: float = DEFAULT_TRIM, mode: str = "mean",
                 seed: int = 0, cache: SourceCache | None = None, threads: int = 1,
                 indicators: np.ndarray | None = None) -> RetrievalOutcome:
    """Score every source under ``n_samples`` sphere indicators and vote."""
    if len(db) == 0:
        raise ValueError("retrieval over an empty database")
    if mode not in MODES:
        raise ValueError(f"unknown score mode {mode!r}")
    target = as_cloud(target, "target")
    _trim_count(len(target), trim)
    if cache is None or cache.store is not store:
        cache = SourceCache(store)
    with ad.no_grad():
        feats = encode(target, store, "enc_partial")
    fp, gp = feats.pointwise.data, feats.global_.data
    if indicators is None:
        indicators = sample_sphere(n_samples, store.arch.feat, seed)
    ids = list(db.ids)
    gds = [cache.global_feature(i, s.cloud) for i, s in db]

    def score(gd):
        R = residual_fast(fp, np.concatenate([gp, gd]), indicators, store)
        return trimmed_scores(np.sqrt((R * R).sum(axis=2)), trim, mode)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            cols = list(pool.map(score, gds))
    else:
        cols = [score(g) for g in gds]
    scores = np.stack(cols, axis=1)
    votes, best, top = vote(scores, ids, top_k)
    return RetrievalOutcome(ids, scores, votes, best, top, mode,
                            {"n_samples": len(indicators), "trim": trim, "seed": seed})
