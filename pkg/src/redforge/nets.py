"""Network blocks: point encoders, residual-field head, attention-based part
deformer and reconstruction decoders.

Parameters live in a flat :class:`ParamStore` keyed by ``"<block>/<layer>"``
so checkpoints and optimisers can treat them uniformly.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .gradcheck import Check
from .rng import stream

SCALE_CLAMP = 2.0
DISP_MAX = 1.0  # per-axis bound on a part displacement
ENCODERS = ("enc_partial", "enc_full", "enc_source")


@dataclass(frozen=True)
class Arch:
    """Architecture constants. Defaults follow the full-scale setting."""

    m: int = 1024
    feat: int = 256  # L = L_d
    enc_hidden: tuple = (64, 128)
    res_hidden: tuple = (512, 512, 256, 128)
    heads: int = 4
    blocks: int = 2
    reg_hidden: tuple = (128, 64)
    recon_hidden: tuple = (256, 512)
    leak: float = 0.01
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.feat % self.heads:
            raise ValueError(f"feature dim {self.feat} not divisible by {self.heads} heads")

    def to_arrays(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f"meta/{f.name}"] = np.asarray(v, dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "Arch":
        kw = {}
        for f in fields(cls):
            key = f"meta/{f.name}"
            if key not in arrays:
                continue
            v = arrays[key]
            if isinstance(f.default, tuple):
                kw[f.name] = tuple(int(x) for x in np.atleast_1d(v))
            elif isinstance(f.default, int):
                kw[f.name] = int(v)
            else:
                kw[f.name] = float(v)
        return cls(**kw)

    def asdict(self) -> dict:
        return asdict(self)


@dataclass
class FeaturePair:
    pointwise: Tensor  # (M, L)
    global_: Tensor  # (L,)


class ParamStore:
    """Named trainable tensors plus batch-norm running statistics."""

    def __init__(self, arch: Arch):
        self.arch = arch
        self.tensors: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self._pending: dict[str, list] = {}

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def add_linear(self, name, n_in, n_out, rng, zero=False):
        bound = 1.0 / np.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        b = np.zeros(n_out) if zero else rng.uniform(-bound, bound, n_out)
        self.tensors[f"{name}/w"] = Tensor(w, requires_grad=True)
        self.tensors[f"{name}/b"] = Tensor(b, requires_grad=True)

    def add_bn(self, name, channels):
        self.tensors[f"{name}/gamma"] = Tensor(np.ones(channels), requires_grad=True)
        self.tensors[f"{name}/beta"] = Tensor(np.zeros(channels), requires_grad=True)
        self.bn[name] = BatchNormState.zeros(channels, momentum=self.arch.bn_momentum)

    def linear(self, name, x):
        return ad.add(ad.matmul(x, self.tensors[f"{name}/w"]), self.tensors[f"{name}/b"])

    def norm(self, name, x, train: bool):
        """Batch norm against running statistics.

        In training the batch statistics are queued and folded into the
        running statistics by :meth:`commit_bn` after the step, so every use
        of a layer within one step sees the same normalisation. Running
        statistics are constants for differentiation. Per-shape batch
        statistics would erase each cloud's position and per-axis extent.
        """
        st = self.bn[name]
        if train:
            n = x.shape[0]
            var = x.data.var(axis=0) * (n / (n - 1) if n > 1 else 1.0)
            self._pending.setdefault(name, []).append((x.data.mean(axis=0), var))
        return ad.batch_norm(x, self.tensors[f"{name}/gamma"], self.tensors[f"{name}/beta"], st, train=False)

    def commit_bn(self):
        """Fold queued batch statistics into the running ones.

        A batch here is one sample, so features that are constant within a
        sample (tiled global vectors) show no batch variance. The running
        variance therefore tracks the spread about the running mean, which
        also counts how far each batch mean sits from it.
        """
        for name, stats in self._pending.items():
            st = self.bn[name]
            mus = np.array([m for m, _ in stats])
            spread = np.mean([v for _, v in stats], axis=0) + np.mean((mus - st.running_mean) ** 2, axis=0)
            st.running_mean = (1 - st.momentum) * st.running_mean + st.momentum * mus.mean(axis=0)
            st.running_var = (1 - st.momentum) * st.running_var + st.momentum * spread
        self._pending = {}

    def discard_bn(self):
        self._pending = {}

    def subset(self, prefixes) -> dict:
        return {k: t for k, t in self.tensors.items() if k.split("/")[0] in prefixes}

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def snapshot_bn(self):
        return copy.deepcopy(self.bn)

    def restore_bn(self, snap):
        self.bn = copy.deepcopy(snap)

    def to_arrays(self) -> dict:
        out = dict(self.arch.to_arrays())
        for k, t in self.tensors.items():
            out[k] = t.data
        for k, st in self.bn.items():
            out[f"bn/{k}/running_mean"] = st.running_mean
            out[f"bn/{k}/running_var"] = st.running_var
        return out

    def load_arrays(self, arrays: dict) -> None:
        for k, t in self.tensors.items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks tensor {k}")
            if arrays[k].shape != t.shape:
                raise ValueError(f"checkpoint tensor {k} has shape {arrays[k].shape}, expected {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)
        for k, st in self.bn.items():
            st.running_mean = np.array(arrays[f"bn/{k}/running_mean"])
            st.running_var = np.array(arrays[f"bn/{k}/running_var"])

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ParamStore":
        store = init_params(Arch.from_arrays(arrays), seed=0)
        store.load_arrays(arrays)
        return store

    def copy(self) -> "ParamStore":
        other = ParamStore(self.arch)
        other.tensors = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()}
        other.bn = self.snapshot_bn()
        return other


def init_params(arch: Arch, seed: int) -> ParamStore:
    store = ParamStore(arch)
    L = arch.feat
    for enc in ENCODERS:
        rng = stream(seed, "init", enc)
        dims = (3,) + tuple(arch.enc_hidden) + (L,)
        for i in range(len(dims) - 1):
            store.add_linear(f"{enc}/fc{i}", dims[i], dims[i + 1], rng)
            store.add_bn(f"{enc}/bn{i}", dims[i + 1])

    rng = stream(seed, "init", "residual")
    dims = (4 * L,) + tuple(arch.res_hidden)
    for i in range(len(dims) - 1):
        store.add_linear(f"residual/fc{i}", dims[i], dims[i + 1], rng)
        store.add_bn(f"residual/bn{i}", dims[i + 1])
    store.add_linear(f"residual/fc{len(dims) - 1}", dims[-1], 3, rng)

    rng = stream(seed, "init", "agnn")
    for b in range(arch.blocks):
        for kind in ("self", "cross"):
            p = f"agnn/b{b}{kind}"
            for proj in ("q", "k", "v", "o"):
                store.add_linear(f"{p}_{proj}", L, L, rng)
            store.add_linear(f"{p}_mlp0", L, L, rng)
            store.add_linear(f"{p}_mlp1", L, L, rng)
    dims = (L,) + tuple(arch.reg_hidden)
    for i in range(len(dims) - 1):
        store.add_linear(f"agnn/reg{i}", dims[i], dims[i + 1], rng)
    # zero final layer: training starts from the identity deformation
    store.add_linear(f"agnn/reg{len(dims) - 1}", dims[-1], 6, rng, zero=True)

    for head in ("recon_target", "recon_source"):
        rng = stream(seed, "init", head)
        dims = (L,) + tuple(arch.recon_hidden) + (3 * arch.m,)
        for i in range(len(dims) - 1):
            store.add_linear(f"{head}/fc{i}", dims[i], dims[i + 1], rng)
    return store


def _row(v: Tensor) -> Tensor:
    return ad.reshape(v, (1, -1))


def encode(cloud, store: ParamStore, encoder: str, train: bool = False) -> FeaturePair:
    """Shared per-point MLP with a max-pooled global feature."""
    x = cloud if isinstance(cloud, Tensor) else Tensor(cloud)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] == 0:
        raise ValueError(f"encode: expected a non-empty (M, 3) cloud, got {x.shape}")
    h = x
    n = len(store.arch.enc_hidden) + 1
    for i in range(n):
        h = store.linear(f"{encoder}/fc{i}", h)
        h = store.norm(f"{encoder}/bn{i}", h, train)
        h = ad.leaky_relu(h, store.arch.leak)
    return FeaturePair(h, ad.max_pool(h, axis=0))


def _check_indicator(indicator):
    n = np.linalg.norm(indicator.data if isinstance(indicator, Tensor) else indicator)
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"indicator off sphere (norm {n:.6g})")


def predict_residual(fp, gp, gd, indicator, store: ParamStore, train: bool = False) -> Tensor:
    """Per-point residual field ``R`` (M, 3).

    The first layer acts on ``[F^p_i ; G^p ; G^d ; indicator]``; it is
    evaluated as ``F^p W_point + [G^p ; G^d ; indicator] W_global`` which is
    the same linear map without materialising the tiled concatenation.
    """
    _check_indicator(indicator)
    a = store.arch
    L = a.feat
    g = ad.concat([_row(gp), _row(gd), _row(ad.tensor(indicator))], axis=1)
    w0 = store["residual/fc0/w"]
    h = ad.add(ad.add(ad.matmul(fp, ad.take(w0, slice(0, L))),
                      ad.matmul(g, ad.take(w0, slice(L, None)))), store["residual/fc0/b"])
    nh = len(a.res_hidden)
    for i in range(nh):
        if i > 0:
            h = store.linear(f"residual/fc{i}", h)
        h = store.norm(f"residual/bn{i}", h, train)
        h = ad.leaky_relu(h, a.leak)
    return store.linear(f"residual/fc{nh}", h)


def residual_fast(fp: np.ndarray, g_const: np.ndarray, indicators: np.ndarray, store: ParamStore) -> np.ndarray:
    """Eval-mode residual fields for many indicators at once.

    ``fp`` is (M, L); ``g_const`` is ``[G^p ; G^d]`` (2L,); ``indicators`` is
    (S, L). Returns (S, M, 3). Numerically equivalent to
    :func:`predict_residual` in eval mode.
    """
    a = store.arch
    L = a.feat
    w0 = store["residual/fc0/w"].data
    point = fp @ w0[:L]
    glob = np.concatenate([np.broadcast_to(g_const, (len(indicators), 2 * L)), indicators], axis=1)
    glob = glob @ w0[L:] + store["residual/fc0/b"].data
    h = point[None, :, :] + glob[:, None, :]
    S, M = h.shape[:2]
    h = h.reshape(S * M, -1)
    nh = len(a.res_hidden)
    for i in range(nh):
        if i > 0:
            h = h @ store[f"residual/fc{i}/w"].data + store[f"residual/fc{i}/b"].data
        st = store.bn[f"residual/bn{i}"]
        gamma, beta = store[f"residual/bn{i}/gamma"].data, store[f"residual/bn{i}/beta"].data
        inv = 1.0 / np.sqrt(st.running_var + st.eps)
        h = gamma * ((h - st.running_mean) * inv) + beta
        h = np.where(h > 0, h, h * a.leak)
    out = h @ store[f"residual/fc{nh}/w"].data + store[f"residual/fc{nh}/b"].data
    return out.reshape(S, M, 3)


def _mha(store, prefix, q_in, kv_in):
    a = store.arch
    d = a.feat // a.heads
    q = store.linear(f"{prefix}_q", q_in)
    k = store.linear(f"{prefix}_k", kv_in)
    v = store.linear(f"{prefix}_v", kv_in)
    outs = []
    for h in range(a.heads):
        cols = (slice(None), slice(h * d, (h + 1) * d))
        scores = ad.scale(ad.matmul(ad.take(q, cols), ad.transpose(ad.take(k, cols))), 1.0 / np.sqrt(d))
        outs.append(ad.matmul(ad.softmax(scores, axis=1), ad.take(v, cols)))
    return store.linear(f"{prefix}_o", ad.concat(outs, axis=1))


def _mlp_update(store, prefix, x):
    h = ad.leaky_relu(store.linear(f"{prefix}_mlp0", ad.layer_norm(x)), store.arch.leak)
    return ad.add(x, store.linear(f"{prefix}_mlp1", h))


def agnn_deform(part_feats, gp, gd, store: ParamStore):
    """Per-part ``(C_d, s_raw)``, each (N_p, 3).

    Part nodes alternate self-attention over parts and cross-attention to the
    two global nodes ``[G^p ; G^d]``; every attention output is added back to
    its input and followed by a residual two-layer MLP. Attention, MLP and
    regressor inputs are row-standardised so the residual stream can grow
    without saturating the softmax.
    """
    a = store.arch
    f = part_feats
    glob = ad.layer_norm(ad.concat([_row(gp), _row(gd)], axis=0))
    for b in range(a.blocks):
        p = f"agnn/b{b}self"
        fn = ad.layer_norm(f)
        f = _mlp_update(store, p, ad.add(f, _mha(store, p, fn, fn)))
        p = f"agnn/b{b}cross"
        f = _mlp_update(store, p, ad.add(f, _mha(store, p, ad.layer_norm(f), glob)))
    n = len(a.reg_hidden)
    h = ad.layer_norm(f)
    for i in range(n):
        h = ad.leaky_relu(store.linear(f"agnn/reg{i}", h), a.leak)
    out = store.linear(f"agnn/reg{n}", h)
    return ad.take(out, (slice(None), slice(0, 3))), ad.take(out, (slice(None), slice(3, 6)))


def displacements_from_raw(c_raw):
    """Part displacements ``DISP_MAX * tanh(c_raw / DISP_MAX)``: identity near
    zero, bounded so a single bad step cannot throw a part far away."""
    return ad.scale(ad.tanh(ad.scale(ad.tensor(c_raw), 1.0 / DISP_MAX)), DISP_MAX)


def scales_from_raw(s_raw):
    """Strictly positive axis scales ``exp(clamp(s_raw, -2, 2))``."""
    return ad.exp(ad.clip(ad.tensor(s_raw), -SCALE_CLAMP, SCALE_CLAMP))


def reconstruct(g, store: ParamStore, head: str) -> Tensor:
    """Decode a global feature into an (M, 3) cloud."""
    a = store.arch
    h = _row(g)
    n = len(a.recon_hidden)
    for i in range(n):
        h = ad.leaky_relu(store.linear(f"{head}/fc{i}", h), a.leak)
    h = store.linear(f"{head}/fc{n}", h)
    return ad.reshape(h, (a.m, 3))


# -- gradient checks on toy sizes -------------------------------------------------

TOY_ARCH = Arch(m=16, feat=8, enc_hidden=(6, 7), res_hidden=(9, 9, 7, 5), heads=4,
                reg_hidden=(6, 5), recon_hidden=(6, 7))


def toy_store(seed: int = 0) -> ParamStore:
    store = init_params(TOY_ARCH, seed)
    rng = stream(seed, "toy-final")
    # non-zero regressor output so every deformer weight receives gradient
    store["agnn/reg2/w"].data[:] = rng.uniform(-0.3, 0.3, store["agnn/reg2/w"].shape)
    for name, st in store.bn.items():
        st.running_mean = rng.normal(scale=0.1, size=st.running_mean.shape)
        st.running_var = rng.uniform(0.5, 1.5, size=st.running_var.shape)
    return store


def _shift_invariant(key: str) -> bool:
    # a key bias moves every score in a softmax row equally: gradient is exactly 0
    return key.startswith("agnn/") and key.endswith("_k/b")


def _net_check(name, fn, prefixes):
    def build(seed):
        store = toy_store(seed)
        data = rng_data(seed)
        with ad.no_grad():
            n = fn(store, data).size
        w = Tensor(np.random.default_rng(100 + seed).normal(size=n))
        inputs = [store[k] for k in store.tensors
                  if k.split("/")[0] in prefixes and not _shift_invariant(k)]

        def f(*_):
            return ad.sum(ad.mul(ad.reshape(fn(store, data), (-1,)), w))
        return f, inputs
    return Check(name, "nets", build, points=2, max_entries=12)


def rng_data(seed):
    rng = np.random.default_rng(1000 + seed)
    a = TOY_ARCH
    return {
        "cloud": rng.normal(size=(a.m, 3)),
        "fp": rng.normal(size=(a.m, a.feat)),
        "gp": rng.normal(size=a.feat),
        "gd": rng.normal(size=a.feat),
        "ind": (lambda v: v / np.linalg.norm(v))(rng.normal(size=a.feat)),
        "parts": rng.normal(size=(3, a.feat)),
    }


def net_checks() -> list[Check]:
    return [
        _net_check("encoder", lambda s, d: encode(d["cloud"], s, "enc_partial").global_, ("enc_partial",)),
        _net_check("encoder_pointwise", lambda s, d: encode(d["cloud"], s, "enc_source").pointwise,
                   ("enc_source",)),
        _net_check("residual_head",
                   lambda s, d: predict_residual(Tensor(d["fp"]), Tensor(d["gp"]), Tensor(d["gd"]),
                                                 d["ind"], s), ("residual",)),
        _net_check("agnn_deformer",
                   lambda s, d: ad.concat(list(agnn_deform(Tensor(d["parts"]), Tensor(d["gp"]),
                                                           Tensor(d["gd"]), s)), axis=1), ("agnn",)),
        _net_check("recon_head", lambda s, d: reconstruct(Tensor(d["gp"]), s, "recon_target"),
                   ("recon_target",)),
    ]
