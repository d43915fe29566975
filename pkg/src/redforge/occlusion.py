"""Synthetic partial observations: ball, plane and random-mask occlusion with
ratio control, followed by resampling and Gaussian sensor noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import as_cloud, resample_indices
from .rng import stream

KINDS = ("ball", "plane", "mask", "composite")
RATIO_TOL = 0.02
MAX_BISECTIONS = 64
DEFAULT_NOISE = 0.01


class UnreachableRatio(ValueError):
    pass


@dataclass
class OcclusionSpec:
    kind: str = "composite"
    target_ratio: float = 0.5
    seed: int = 0
    noise_sigma: float = DEFAULT_NOISE
    center: tuple | None = None  # ball; random cloud point when None
    normal: tuple | None = None  # plane; random direction when None

    def validate(self) -> "OcclusionSpec":
        if self.kind not in KINDS:
            raise ValueError(f"unknown occlusion kind {self.kind!r}")
        if not 0.0 <= self.target_ratio < 1.0:
            raise ValueError(f"target_ratio must be in [0, 1), got {self.target_ratio}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.normal is not None and abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("plane normal must have unit length")
        return self


@dataclass
class PartialObservation:
    partial: np.ndarray
    correspondence: np.ndarray  # index into the full cloud per partial point
    achieved_ratio: float
    params: dict = field(default_factory=dict)


def occlude_ball(cloud, center, radius: float) -> np.ndarray:
    """Indices of points at distance >= ``radius`` from ``center``."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    pts = as_cloud(cloud)
    d = np.sqrt(((pts - np.asarray(center, float)) ** 2).sum(axis=1))
    return np.flatnonzero(~(d < radius))


def occlude_plane(cloud, normal, offset: float) -> np.ndarray:
    """Indices of points with ``dot(p, normal) <= offset``."""
    n = np.asarray(normal, float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("plane normal must have unit length")
    pts = as_cloud(cloud)
    return np.flatnonzero(~(pts @ n > offset))


def _mask_count(n: int, count: int, rng) -> np.ndarray:
    drop = rng.choice(n, size=count, replace=False)
    keep = np.ones(n, bool)
    keep[drop] = False
    return np.flatnonzero(keep)


def occlude_mask(cloud, fraction: float, seed: int) -> np.ndarray:
    """Drop exactly ``floor(fraction * M)`` uniformly chosen points."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("mask fraction must be in [0, 1)")
    pts = as_cloud(cloud)
    return _mask_count(len(pts), int(np.floor(fraction * len(pts))), np.random.default_rng(seed))


def _bisect(removed_at, lo, hi, want: int):
    """Find a parameter whose removal count is ``want``; ``removed_at`` is
    monotone non-decreasing from ``lo`` to ``hi``. Returns (param, count)."""
    best = (lo, removed_at(lo))
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        got = removed_at(mid)
        if abs(got - want) < abs(best[1] - want):
            best = (mid, got)
        if got == want:
            return mid, got
        if got < want:
            lo = mid
        else:
            hi = mid
    return best


def _ball_stage(pts, want, center):
    d = np.sqrt(((pts - center) ** 2).sum(axis=1))
    radius, _ = _bisect(lambda r: int(np.count_nonzero(d < r)), 0.0, float(d.max()) + 1.0, want)
    return np.flatnonzero(~(d < radius)), {"center": center.tolist(), "radius": radius}


def _plane_stage(pts, want, normal):
    h = pts @ normal
    # removal grows as the offset decreases: bisect over t = -offset
    t, _ = _bisect(lambda t: int(np.count_nonzero(h > -t)), -float(h.max()), -float(h.min()) + 1.0, want)
    return np.flatnonzero(~(h > -t)), {"normal": normal.tolist(), "offset": -t}


def _random_normal(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def survivors(cloud, spec: OcclusionSpec):
    """Surviving indices of ``cloud`` under ``spec`` (before resampling)."""
    spec.validate()
    pts = as_cloud(cloud)
    n = len(pts)
    rng = stream(spec.seed, "occlusion", spec.kind)
    want_total = int(round(spec.target_ratio * n))
    keep = np.arange(n)
    params = {}

    center = np.asarray(spec.center, float) if spec.center is not None else pts[rng.integers(n)]
    normal = np.asarray(spec.normal, float) if spec.normal is not None else _random_normal(rng)

    if spec.kind == "ball":
        keep, params["ball"] = _ball_stage(pts, want_total, center)
    elif spec.kind == "plane":
        keep, params["plane"] = _plane_stage(pts, want_total, normal)
    elif spec.kind == "mask":
        keep = _mask_count(n, want_total, rng)
        params["mask"] = {"count": want_total}
    else:
        share = int(round(spec.target_ratio * n / 3))
        local, params["ball"] = _ball_stage(pts, share, center)
        keep = keep[local]
        local, params["plane"] = _plane_stage(pts[keep], min(share, len(keep) - 1), normal)
        keep = keep[local]
        rest = max(0, min(want_total - (n - len(keep)), len(keep) - 1))
        keep = keep[np.sort(_mask_count(len(keep), rest, rng))]
        params["mask"] = {"count": rest}

    achieved = 1.0 - len(keep) / n
    if len(keep) == 0 or abs(achieved - spec.target_ratio) > RATIO_TOL:
        raise UnreachableRatio(
            f"unreachable ratio: wanted {spec.target_ratio:.3f}, achieved {achieved:.3f} ({spec.kind})")
    return keep, achieved, params


def simulate(cloud, spec: OcclusionSpec, m_out: int) -> PartialObservation:
    """Occlude, resample survivors to ``m_out`` points, then add noise."""
    pts = as_cloud(cloud)
    keep, achieved, params = survivors(pts, spec)
    rng = stream(spec.seed, "resample")
    corr = keep[resample_indices(len(keep), m_out, rng)]
    partial = pts[corr].copy()
    if spec.noise_sigma > 0:
        partial += stream(spec.seed, "noise").normal(scale=spec.noise_sigma, size=partial.shape)
    return PartialObservation(partial, corr, achieved, params)
