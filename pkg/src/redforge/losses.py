"""Training objectives on the autodiff tape.

Nearest-neighbour assignments are recomputed on forward values and treated
as constants in backward. :func:`frozen_assignments` records them once and
replays them, which keeps finite-difference checks on one smooth branch.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import nearest_neighbors
from .gradcheck import Check

COMPONENTS = ("cd", "sym", "recon", "re", "co1", "co2")
_REFLECT = np.array([-1.0, 1.0, 1.0])


@dataclass(frozen=True)
class LossWeights:
    lambda0: float = 3.0
    lambda1: float = 0.3
    lambda2: float = 1.0

    def __post_init__(self):
        if min(self.lambda0, self.lambda1, self.lambda2) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    cd: float
    sym: float
    recon: float
    re: float
    co1: float
    co2: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


class _AssignmentTape:
    def __init__(self):
        self.records = []
        self.pos = None  # None while recording

    def lookup(self, query, target):
        if self.pos is None:
            idx = nearest_neighbors(query, target)[0]
            self.records.append(idx)
            return idx
        idx = self.records[self.pos % len(self.records)]
        self.pos += 1
        return idx

    def replay(self):
        self.pos = 0


_ACTIVE: list[_AssignmentTape] = []


@contextmanager
def frozen_assignments():
    """Record nearest-neighbour assignments on the first evaluation; later
    evaluations (started with ``tape.replay()``) reuse them in order."""
    tape = _AssignmentTape()
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


def _nn(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    if len(target) == 0:
        raise ValueError("empty neighbor target")
    if _ACTIVE:
        return _ACTIVE[-1].lookup(query, target)
    return nearest_neighbors(query, target)[0]


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _mean_sq_rows(d: Tensor) -> Tensor:
    return ad.mean(ad.sum(ad.square(d), axis=1))


def _directional(a, b) -> Tensor:
    j = _nn(_values(a), _values(b))
    return _mean_sq_rows(ad.sub(ad.tensor(a), ad.take(ad.tensor(b), j)))


def loss_chamfer(a, b) -> Tensor:
    """Squared Chamfer distance; either argument may carry gradient."""
    if len(_values(a)) == 0 or len(_values(b)) == 0:
        raise ValueError("chamfer of an empty cloud")
    return ad.add(_directional(a, b), _directional(b, a))


def loss_chamfer_one_sided(a, b) -> Tensor:
    """Mean squared distance from each point of ``a`` to its nearest point of
    ``b``. With ``a`` a partial scan, regions it never saw cost nothing."""
    if len(_values(a)) == 0 or len(_values(b)) == 0:
        raise ValueError("chamfer of an empty cloud")
    return _directional(a, b)


def reflect_tensor(x) -> Tensor:
    return ad.mul(ad.tensor(x), Tensor(_REFLECT))


def loss_symmetry(deformed) -> Tensor:
    """Chamfer between a cloud and its mirror image across x = 0."""
    return loss_chamfer(deformed, reflect_tensor(deformed))


def loss_recon(reconstructed, target) -> Tensor:
    """Set distance between a decoded cloud and its input cloud."""
    r, t = _values(reconstructed), _values(target)
    if r.shape != t.shape:
        raise ValueError(f"recon shape {r.shape} vs input {t.shape}")
    return loss_chamfer(reconstructed, target)


def loss_re(P, R, Q) -> Tensor:
    """Mean ``||P_i + R_i - Q_i||^2`` with ``Q_i`` the nearest point of ``Q``
    to ``P_i``. ``Q`` enters as a constant."""
    p, q = _values(P), _values(Q)
    if len(q) == 0:
        raise ValueError("empty neighbor target")
    if p.shape != _values(R).shape:
        raise ValueError(f"residual shape {_values(R).shape} vs target {p.shape}")
    j = _nn(p, q)
    return _mean_sq_rows(ad.sub(ad.add(ad.tensor(P), R), Tensor(q[j])))


def loss_consistency(deformed_partial, deformed_full, r_partial, r_full_gathered):
    """``(co1, co2)``: mean squared gaps between the two branches' deformed
    clouds and between their residual fields."""
    for a, b, what in ((deformed_partial, deformed_full, "deformed clouds"),
                       (r_partial, r_full_gathered, "residual fields")):
        if _values(a).shape != _values(b).shape:
            raise ValueError(f"consistency: {what} differ in shape "
                             f"{_values(a).shape} vs {_values(b).shape}")
    co1 = _mean_sq_rows(ad.sub(ad.tensor(deformed_partial), ad.tensor(deformed_full)))
    co2 = _mean_sq_rows(ad.sub(ad.tensor(r_partial), ad.tensor(r_full_gathered)))
    return co1, co2


def _check_finite(values: dict):
    for name in COMPONENTS:
        v = values[name]
        if not math.isfinite(v):
            raise FloatingPointError(f"loss component {name} is not finite ({v})")


def _weighted_sum(v: dict, w: LossWeights):
    return (w.lambda0 * (v["cd"] + v["sym"] + v["recon"]) + w.lambda1 * v["re"]
            + w.lambda2 * (v["co1"] + v["co2"]))


def loss_total(cd=0.0, sym=0.0, recon=0.0, re=0.0, co1=0.0, co2=0.0,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    values = {"cd": float(cd), "sym": float(sym), "recon": float(recon),
              "re": float(re), "co1": float(co1), "co2": float(co2)}
    _check_finite(values)
    return LossBreakdown(total=float(_weighted_sum(values, weights)), **values)


def combine(terms: dict, weights: LossWeights = LossWeights()):
    """Weighted total on the tape plus its float breakdown. Missing terms
    count as zero."""
    zero = Tensor(np.array(0.0))
    full = {k: terms.get(k, zero) for k in COMPONENTS}
    breakdown = loss_total(weights=weights, **{k: float(t.data) for k, t in full.items()})
    total = ad.add(ad.add(
        ad.scale(ad.add(ad.add(full["cd"], full["sym"]), full["recon"]), weights.lambda0),
        ad.scale(full["re"], weights.lambda1)),
        ad.scale(ad.add(full["co1"], full["co2"]), weights.lambda2))
    return total, breakdown


# -- gradient checks on toy sizes -------------------------------------------------

_TOY_M = 16


def _cloud(rng, m=_TOY_M):
    return rng.normal(size=(m, 3))


def _frozen_check(name, make):
    """``make(rng) -> (loss_fn(*inputs) -> Tensor, inputs)``; assignments are
    recorded on the analytic pass and replayed for every perturbation."""
    def build(seed):
        rng = np.random.default_rng(seed)
        loss_fn, inputs = make(rng)
        tape = _AssignmentTape()

        def f(*xs):
            _ACTIVE.append(tape)
            try:
                out = loss_fn(*xs)
            finally:
                _ACTIVE.pop()
            tape.replay()
            return out
        return f, inputs
    return Check(name, "losses", build, points=5)


def _t(x):
    return Tensor(x, requires_grad=True)


def loss_checks() -> list[Check]:
    def cd(rng):
        target = _cloud(rng, 12)
        return (lambda a: loss_chamfer(a, target)), [_t(_cloud(rng))]

    def cd_both(rng):
        return (lambda a, b: loss_chamfer(a, b)), [_t(_cloud(rng)), _t(_cloud(rng, 11))]

    def cd_one(rng):
        target = _cloud(rng, 7)
        return (lambda a: loss_chamfer_one_sided(target, a)), [_t(_cloud(rng))]

    def sym(rng):
        return (lambda a: loss_symmetry(a)), [_t(_cloud(rng))]

    def recon(rng):
        target = _cloud(rng)
        return (lambda a: loss_recon(a, target)), [_t(_cloud(rng))]

    def re(rng):
        p, q = _cloud(rng), _cloud(rng, 20)
        return (lambda r: loss_re(p, r, q)), [_t(0.3 * _cloud(rng))]

    def co(rng):
        def f(dp, df, rp, rf):
            c1, c2 = loss_consistency(dp, df, rp, rf)
            return ad.add(c1, ad.scale(c2, 0.7))
        return f, [_t(_cloud(rng)) for _ in range(4)]

    def total(rng):
        p, q = _cloud(rng), _cloud(rng, 20)

        def f(dp, df, r, rf, rec):
            c1, c2 = loss_consistency(dp, df, r, rf)
            terms = {"cd": loss_chamfer(dp, p), "sym": loss_symmetry(dp), "recon": loss_recon(rec, p),
                     "re": loss_re(p, r, q), "co1": c1, "co2": c2}
            return combine(terms)[0]
        return f, [_t(_cloud(rng)), _t(_cloud(rng)), _t(0.3 * _cloud(rng)), _t(0.3 * _cloud(rng)),
                   _t(_cloud(rng))]

    return [
        _frozen_check("loss_chamfer", cd),
        _frozen_check("loss_chamfer_both", cd_both),
        _frozen_check("loss_chamfer_one_sided", cd_one),
        _frozen_check("loss_symmetry", sym),
        _frozen_check("loss_recon", recon),
        _frozen_check("loss_re", re),
        _frozen_check("loss_consistency", co),
        _frozen_check("loss_total", total),
    ]
