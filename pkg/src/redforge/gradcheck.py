"""Registry of finite-difference gradient checks.

Used by the test-suite and by ``redforge grad-check``. Each check builds a
scalar function and its inputs from a seed, so a check is reproducible and
can be evaluated at several random points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor

# Away-from-kink sampling keeps central differences valid for piecewise ops.
_KINK_MARGIN = 0.05


@dataclass
class Check:
    name: str
    group: str
    build: Callable  # seed -> (f, inputs)
    points: int = 10
    h: float = 1e-4
    max_entries: int | None = None

    def run(self, tol: float) -> GradCheckReport:
        worst = None
        for seed in range(self.points):
            f, inputs = self.build(seed)
            rep = ad.finite_diff_check(f, inputs, h=self.h, tol=tol,
                                       max_entries=self.max_entries, seed=seed)
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = rep
        return worst


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(_KINK_MARGIN, 2.0, size=shape)


def _distinct(rng, shape):
    # well-separated values so the argmax is stable under +-h
    vals = rng.permutation(np.prod(shape)).astype(float) * 0.1 + rng.uniform(0, 0.01, np.prod(shape))
    return vals.reshape(shape)


def _weighted(rng, y):
    """Random linear functional so every output entry matters."""
    w = Tensor(rng.normal(size=y.shape))
    return ad.sum(y * w)


def _unary(op, sampler=None):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(sampler(rng, (4, 3)) if sampler else rng.normal(size=(4, 3)))
        w = Tensor(rng.normal(size=(4, 3)))
        return (lambda t: ad.sum(op(t) * w)), [x]
    return build


def _binary(op, shape_b=(4, 3)):
    def build(seed):
        rng = np.random.default_rng(seed)
        a, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=shape_b))
        w = Tensor(rng.normal(size=(4, 3)))
        return (lambda x, y: ad.sum(op(x, y) * w)), [a, b]
    return build


def _build_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(5, 3)))
    w = Tensor(rng.normal(size=(4, 3)))
    return (lambda x, y: ad.sum(ad.matmul(x, y) * w)), [a, b]


def _build_concat(seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(6, 3)))
    return (lambda x, y: ad.sum(ad.concat([x, y], axis=0) * w)), [a, b]


def _build_concat_cols(seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 6)))
    return (lambda x, y: ad.sum(ad.concat([x, y], axis=1) * w)), [a, b]


def _build_reduce(op, axis):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(_distinct(rng, (5, 3)) if op is ad.max_pool else rng.normal(size=(5, 3)))
        probe = op(x, axis=axis)
        w = Tensor(rng.normal(size=probe.shape))
        return (lambda t: ad.sum(op(t, axis=axis) * w)), [x]
    return build


def _build_full_reduce(op):
    def build(seed):
        rng = np.random.default_rng(seed)
        return (lambda t: op(ad.square(t))), [Tensor(rng.normal(size=(3, 4)))]
    return build


def _build_softmax(axis):
    def build(seed):
        rng = np.random.default_rng(seed)
        x, w = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
        return (lambda t: ad.sum(ad.softmax(t, axis=axis) * w)), [x]
    return build


def _build_l2(seed):
    rng = np.random.default_rng(seed)
    x, w = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    return (lambda t: ad.sum(ad.l2_normalize(t, axis=1) * w)), [x]


def _build_bn(train):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(6, 3)))
        g, b = Tensor(rng.uniform(0.5, 2, size=3)), Tensor(rng.normal(size=3))
        w = Tensor(rng.normal(size=(6, 3)))
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)

        def f(x, g, b):
            # fresh state each call: train-mode updates must not leak into eval
            st = ad.BatchNormState(rm.copy(), rv.copy())
            return ad.sum(ad.batch_norm(x, g, b, st, train=train) * w)
        return f, [x, g, b]
    return build


def _build_take(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4, 1, 0])
    w = Tensor(rng.normal(size=(6, 3)))
    return (lambda t: ad.sum(ad.take(t, idx) * w)), [x]


def _build_reshape_transpose(seed):
    rng = np.random.default_rng(seed)
    x, w = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(6, 2)))
    return (lambda t: ad.sum(ad.reshape(ad.transpose(t), (6, 2)) * w)), [x]


def _build_clip(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-3, 3, size=(4, 3)))
    x.data[np.abs(np.abs(x.data) - 2.0) < _KINK_MARGIN] += 0.2
    w = Tensor(rng.normal(size=(4, 3)))
    return (lambda t: ad.sum(ad.clip(t, -2.0, 2.0) * w)), [x]


def primitive_checks() -> list[Check]:
    pos = lambda rng, shape: rng.uniform(0.2, 2.0, size=shape)  # noqa: E731
    return [
        Check("matmul", "primitives", _build_matmul),
        Check("add", "primitives", _binary(ad.add)),
        Check("add_broadcast", "primitives", _binary(ad.add, (1, 3))),
        Check("sub", "primitives", _binary(ad.sub, (3,))),
        Check("mul", "primitives", _binary(ad.mul)),
        Check("mul_broadcast", "primitives", _binary(ad.mul, (4, 1))),
        Check("div", "primitives", _binary(lambda a, b: ad.div(a, ad.add(ad.square(b), 0.5)))),
        Check("scale", "primitives", _unary(lambda t: ad.scale(t, -2.5))),
        Check("relu", "primitives", _unary(ad.relu, _away_from_zero)),
        Check("leaky_relu", "primitives", _unary(lambda t: ad.leaky_relu(t, 0.01), _away_from_zero)),
        Check("softmax_rows", "primitives", _build_softmax(1)),
        Check("softmax_cols", "primitives", _build_softmax(0)),
        Check("concat_rows", "primitives", _build_concat),
        Check("concat_cols", "primitives", _build_concat_cols),
        Check("max_pool", "primitives", _build_reduce(ad.max_pool, 0)),
        Check("mean_pool", "primitives", _build_reduce(ad.mean_pool, 0)),
        Check("l2_normalize", "primitives", _build_l2),
        Check("layer_norm", "primitives", _unary(ad.layer_norm)),
        Check("batch_norm_train", "primitives", _build_bn(True)),
        Check("batch_norm_eval", "primitives", _build_bn(False)),
        Check("sum", "primitives", _build_full_reduce(ad.sum)),
        Check("mean", "primitives", _build_full_reduce(ad.mean)),
        Check("sum_axis", "primitives", _build_reduce(ad.sum, 1)),
        Check("square", "primitives", _unary(ad.square)),
        Check("sqrt", "primitives", _unary(ad.sqrt, pos)),
        Check("exp", "primitives", _unary(ad.exp)),
        Check("tanh", "primitives", _unary(ad.tanh)),
        Check("clip", "primitives", _build_clip),
        Check("take", "primitives", _build_take),
        Check("reshape_transpose", "primitives", _build_reshape_transpose),
    ]


GROUPS = ("all", "primitives", "nets", "losses", "deformation")


def all_checks(group: str = "all") -> list[Check]:
    checks = []
    if group in ("all", "primitives"):
        checks += primitive_checks()
    if group in ("all", "nets"):
        from .nets import net_checks
        checks += net_checks()
    if group in ("all", "losses"):
        from .losses import loss_checks
        checks += loss_checks()
    if group in ("all", "deformation"):
        from .deformation import deformation_checks
        checks += deformation_checks()
    if group not in GROUPS:
        raise ValueError(f"unknown grad-check module {group!r}")
    return checks
