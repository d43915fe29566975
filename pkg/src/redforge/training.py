"""Joint two-branch training, the run configuration and the evaluation
protocol.

The partial branch sees an occluded, noisy target; the full branch sees the
complete target and is used only in training. Both branches share the
residual head, the part deformer and the decoders; each input kind has its
own encoder.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tensor
from .deformation import apply_deformation
from .geometry import chamfer_distance
from .losses import (
    COMPONENTS,
    LossBreakdown,
    LossWeights,
    combine,
    loss_chamfer,
    loss_chamfer_one_sided,
    loss_consistency,
    loss_re,
    loss_recon,
    loss_symmetry,
)
from .nets import (Arch, ParamStore, agnn_deform, displacements_from_raw, encode, init_params, predict_residual,
                   reconstruct, scales_from_raw)
from .occlusion import OcclusionSpec, PartialObservation, simulate
from .retrieval import SourceCache, retrieve_otm
from .rng import stream
from .shapes import CATEGORIES, PartSegmentedShape, SourceDatabase, part_mean_pool

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3


def _opt(section: str, default, doc: str = ""):
    return field(default=default, metadata={"section": section, "doc": doc})


@dataclass(frozen=True)
class TrainConfig:
    seed: int = _opt("run", 0)
    m: int = _opt("data", 1024, "points per cloud")
    db_per_category: int = _opt("data", 10)
    train_targets: int = _opt("data", 150, "training targets, split evenly over categories")
    test_per_category: int = _opt("data", 5)
    categories: tuple = _opt("data", CATEGORIES)
    feat: int = _opt("model", 256, "feature width L")
    enc_hidden: tuple = _opt("model", (64, 128))
    res_hidden: tuple = _opt("model", (512, 512, 256, 128))
    reg_hidden: tuple = _opt("model", (128, 64))
    recon_hidden: tuple = _opt("model", (256, 512))
    heads: int = _opt("model", 4)
    blocks: int = _opt("model", 2)
    bn_momentum: float = _opt("model", 0.1)
    lambda0: float = _opt("loss", 3.0)
    lambda1: float = _opt("loss", 0.3)
    lambda2: float = _opt("loss", 1.0)
    full_branch_basic: bool = _opt("loss", True, "Chamfer of the full branch joins the basic term")
    symmetry: bool = _opt("loss", True)
    partial_cd: str = _opt("loss", "observed", "two_sided or observed (partial points to deformed source only)")
    epochs: int = _opt("train", 200)
    lr: float = _opt("train", 1e-3)
    weight_decay: float = _opt("train", 0.01)
    accumulate: int = _opt("train", 1, "samples per optimiser step")
    ckpt_every: int = _opt("train", 10)
    resample_pairs: bool = _opt("train", True, "fresh occlusion and source every epoch")
    cross_category_prob: float = _opt("train", 0.0)
    contrast_sources: int = _opt("train", 2, "extra database sources per sample, used only in the residual loss")
    grad_clip: float = _opt("train", 10.0, "bound on the global gradient norm per step, 0 disables")
    ratio_min: float = _opt("occlusion", 0.25)
    ratio_max: float = _opt("occlusion", 0.75)
    eval_ratio: float = _opt("occlusion", 0.5)
    occlusion_kind: str = _opt("occlusion", "composite")
    noise_sigma: float = _opt("occlusion", 0.01)
    n_samples: int = _opt("retrieval", 1000)
    top_k: int = _opt("retrieval", 10)
    trim: float = _opt("retrieval", 0.1)
    score_mode: str = _opt("retrieval", "mean")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Laptop-scale preset: fewer points and epochs, narrower layers."""
        base = dict(m=256, epochs=50, n_samples=32, feat=128, res_hidden=(256, 256, 128, 64),
                    reg_hidden=(64, 32), recon_hidden=(128, 256))
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if self.m < 16 or self.m % 2:
            raise ValueError("m must be an even count >= 16")
        if self.epochs < 1 or self.accumulate < 1 or self.ckpt_every < 1:
            raise ValueError("epochs, accumulate and ckpt_every must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.ratio_min <= self.ratio_max < 1 or not 0 <= self.eval_ratio < 1:
            raise ValueError("occlusion ratios must lie in [0, 1)")
        if self.train_targets < len(self.categories) or self.db_per_category < 1:
            raise ValueError("need at least one target per category and one source per category")
        if not 0 <= self.cross_category_prob <= 1:
            raise ValueError("cross_category_prob must be in [0, 1]")
        if self.score_mode not in ("mean", "max") or not 0 <= self.trim < 1:
            raise ValueError("score_mode must be mean or max and trim in [0, 1)")
        if self.partial_cd not in ("two_sided", "observed"):
            raise ValueError("partial_cd must be two_sided or observed")
        if self.contrast_sources < 0 or self.grad_clip < 0:
            raise ValueError("contrast_sources and grad_clip must be non-negative")
        if self.n_samples < 1 or self.top_k < 1:
            raise ValueError("n_samples and top_k must be >= 1")
        unknown = set(self.categories) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown categories {sorted(unknown)}")
        self.arch()
        self.weights()
        return self

    def arch(self) -> Arch:
        return Arch(m=self.m, feat=self.feat, enc_hidden=tuple(self.enc_hidden),
                    res_hidden=tuple(self.res_hidden), heads=self.heads, blocks=self.blocks,
                    reg_hidden=tuple(self.reg_hidden), recon_hidden=tuple(self.recon_hidden),
                    bn_momentum=self.bn_momentum)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda0, self.lambda1, self.lambda2)

    # -- key=value text form ------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.metadata['section']}.{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        known = {f"{f.metadata['section']}.{f.name}": f for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {n}: unknown key {key!r}")
            f = known[key]
            values[f.name] = _parse_value(f, val, n)
        return replace(base or cls(), **values)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def _parse_value(f, val: str, line: int):
    default = f.default
    try:
        if isinstance(default, bool):
            if val.lower() not in ("true", "false"):
                raise ValueError(val)
            return val.lower() == "true"
        if isinstance(default, tuple):
            items = [x.strip() for x in val.split(",") if x.strip()]
            return tuple(items) if f.name == "categories" else tuple(int(x) for x in items)
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        return val
    except ValueError:
        raise ValueError(f"config line {line}: bad value {val!r} for {f.name}") from None


# -- pairs ------------------------------------------------------------------------

@dataclass
class TrainingPair:
    target_id: str
    full: np.ndarray
    partial: PartialObservation
    source_id: str
    source: PartSegmentedShape
    category: str
    contrast: list = field(default_factory=list)  # (id, shape) drawn from the whole database


def make_pair(target_id: str, target: PartSegmentedShape, db: SourceDatabase, spec: OcclusionSpec,
              seed: int, m: int | None = None, cross_category_prob: float = 0.0,
              contrast: int = 0) -> TrainingPair:
    """Occlude ``target`` and draw a source uniformly from its category (or,
    with probability ``cross_category_prob``, from the whole database).
    ``contrast`` more sources are drawn uniformly from the whole database."""
    if len(db) == 0:
        raise ValueError("make_pair needs a non-empty database")
    m = len(target.cloud) if m is None else m
    partial = simulate(target.cloud, spec, m)
    rng = stream(seed, "pair")
    pool = db.by_category(target.category)
    if not pool or (cross_category_prob > 0 and rng.random() < cross_category_prob):
        pool = list(range(len(db)))
    k = pool[int(rng.integers(len(pool)))]
    extra = stream(seed, "contrast").integers(len(db), size=contrast)
    return TrainingPair(target_id, target.cloud, partial, db.ids[k], db.shapes[k], target.category,
                        [(db.ids[j], db.shapes[j]) for j in extra])


def pair_for(config: TrainConfig, db, targets, index: int, epoch: int) -> TrainingPair:
    key = epoch if config.resample_pairs else 0
    rng = stream(config.seed, "occlusion", "train", key, index)
    ratio = float(rng.uniform(config.ratio_min, config.ratio_max))
    spec = OcclusionSpec(config.occlusion_kind, ratio, seed=int(rng.integers(2**31)),
                         noise_sigma=config.noise_sigma)
    return make_pair(targets.ids[index], targets.shapes[index], db, spec, int(rng.integers(2**31)),
                     config.m, config.cross_category_prob, config.contrast_sources)


# -- forward ----------------------------------------------------------------------

def deform_source(store: ParamStore, source: PartSegmentedShape, fp_source, g_target, g_source):
    """Deformed source cloud for one branch, plus the raw parameters."""
    parts = part_mean_pool(fp_source, source.labels, source.n_parts)
    c_raw, s_raw = agnn_deform(parts, g_target, g_source, store)
    cd = displacements_from_raw(c_raw)
    return apply_deformation(source, cd, scales_from_raw(s_raw)), cd, s_raw


def forward_joint(pair: TrainingPair, store: ParamStore, config: TrainConfig, train: bool = True):
    """Both branches on one pair. Returns ``(total tensor, LossBreakdown)``."""
    tp, tf, src = pair.partial.partial, pair.full, pair.source
    fe_p = encode(tp, store, "enc_partial", train)
    fe_f = encode(tf, store, "enc_full", train)
    fe_s = encode(src.cloud, store, "enc_source", train)
    indicator = ad.l2_normalize(fe_f.global_)

    def_p, _, _ = deform_source(store, src, fe_s.pointwise, fe_p.global_, fe_s.global_)
    def_f, _, _ = deform_source(store, src, fe_s.pointwise, fe_f.global_, fe_s.global_)
    r_p = predict_residual(fe_p.pointwise, fe_p.global_, fe_s.global_, indicator, store, train)
    r_f = predict_residual(fe_f.pointwise, fe_f.global_, fe_s.global_, indicator, store, train)

    cd = loss_chamfer(def_p, tp) if config.partial_cd == "two_sided" else loss_chamfer_one_sided(tp, def_p)
    if config.full_branch_basic:
        cd = ad.add(cd, loss_chamfer(def_f, tf))
    terms = {"cd": cd}
    if config.symmetry:
        terms["sym"] = loss_symmetry(def_p)
    terms["recon"] = ad.add(loss_recon(reconstruct(fe_p.global_, store, "recon_target"), tp),
                            loss_recon(reconstruct(fe_s.global_, store, "recon_source"), src.cloud))
    re_p = [loss_re(tp, r_p, def_p.data)]
    for _, other in pair.contrast:
        # teaches the head to tell sources apart; like Q above, the deformed cloud is a constant
        fe_o = encode(other.cloud, store, "enc_source", train)
        with ad.no_grad():
            def_o, _, _ = deform_source(store, other, fe_o.pointwise, fe_p.global_, fe_o.global_)
        r_o = predict_residual(fe_p.pointwise, fe_p.global_, fe_o.global_, indicator, store, train)
        re_p.append(loss_re(tp, r_o, def_o.data))
    re_partial = re_p[0] if len(re_p) == 1 else ad.scale(_sum_all(re_p), 1.0 / len(re_p))
    terms["re"] = ad.add(re_partial, loss_re(tf, r_f, def_f.data))
    r_f_corr = ad.take(r_f, pair.partial.correspondence)
    terms["co1"], terms["co2"] = loss_consistency(def_p, def_f, r_p, r_f_corr)
    total, breakdown = combine(terms, config.weights())
    return total, breakdown


def _sum_all(ts):
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out


# -- training loop ------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    store: ParamStore
    epoch_losses: list
    rows: list  # (epoch, target id, LossBreakdown)


LOG_HEADER = ("epoch", "sample") + COMPONENTS + ("total",)


def _log_row(epoch, sample, b: LossBreakdown):
    return [epoch, sample] + [repr(getattr(b, k)) for k in COMPONENTS + ("total",)]


def smoothed(values, window: int = 5) -> np.ndarray:
    """Trailing moving average (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def train(db: SourceDatabase, targets: SourceDatabase, config: TrainConfig, out_dir=None,
          store: ParamStore | None = None, progress=None) -> TrainResult:
    """Seeded epoch loop: shuffle, forward both branches, backward, AdamW.

    Writes ``train_log.csv`` and CKPT1 checkpoints (every ``ckpt_every``
    epochs and ``final.ckpt``) into ``out_dir`` when given.
    """
    config.validate()
    if len(db) == 0 or len(targets) == 0:
        raise ValueError("training needs a non-empty database and target set")
    store = store or init_params(config.arch(), config.seed)
    opt = AdamW(store.tensors, lr=config.lr, weight_decay=config.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.txt")
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
    epoch_losses, rows = [], []
    try:
        for epoch in range(config.epochs):
            order = stream(config.seed, "shuffle", epoch).permutation(len(targets))
            totals = []
            opt.zero_grad()
            for n, idx in enumerate(order):
                pair = pair_for(config, db, targets, int(idx), epoch)
                total, b = forward_joint(pair, store, config, train=True)
                if config.accumulate > 1:
                    total = ad.scale(total, 1.0 / config.accumulate)
                ad.backward(total)
                if (n + 1) % config.accumulate == 0 or n + 1 == len(order):
                    if config.grad_clip > 0:
                        ad.clip_grad_norm(store.tensors.values(), config.grad_clip)
                    opt.step()
                    opt.zero_grad()
                store.commit_bn()
                totals.append(b.total)
                rows.append((epoch, pair.target_id, b))
                if writer:
                    writer.writerow(_log_row(epoch, pair.target_id, b))
            mean = float(np.mean(totals))
            epoch_losses.append(mean)
            if progress:
                progress(epoch, mean)
            log.info("epoch %d mean loss %.6f", epoch, mean)
            if not math.isfinite(mean) or mean > DIVERGENCE_FACTOR * epoch_losses[0]:
                worst = max(rows[-len(order):], key=lambda r: r[2].total)
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch}: mean loss {mean:.4g} vs initial "
                    f"{epoch_losses[0]:.4g}; worst sample {worst[1]} {worst[2].as_dict()}")
            if out is not None and (epoch + 1) % config.ckpt_every == 0:
                save_model(out / f"epoch_{epoch + 1:04d}.ckpt", store, epoch + 1)
        if out is not None:
            save_model(out / "final.ckpt", store, config.epochs)
    finally:
        if fh:
            fh.close()
    return TrainResult(store, epoch_losses, rows)


def save_model(path, store: ParamStore, epoch: int = 0) -> None:
    arrays = store.to_arrays()
    arrays["meta/epoch"] = np.asarray(float(epoch))
    ad.save_checkpoint(path, arrays)


def load_model(path) -> ParamStore:
    return ParamStore.from_arrays(ad.load_checkpoint(path))


# -- evaluation -----------------------------------------------------------------------

@dataclass
class TestCase:
    target_id: str
    full: np.ndarray
    partial: np.ndarray
    category: str


def make_test_set(config: TrainConfig, ratio: float | None = None, shapes: SourceDatabase | None = None):
    """Held-out targets (their own seed stream) with one occlusion each."""
    ratio = config.eval_ratio if ratio is None else ratio
    if shapes is None:
        from .shapes import build_database
        shapes = build_database(config.test_per_category, config.seed, config.m,
                                config.categories, stream_name="test", id_prefix="test_")
    cases = []
    for k, (sid, shape) in enumerate(shapes):
        spec = OcclusionSpec(config.occlusion_kind, ratio, seed=int(stream(config.seed, "occlusion", "test", k)
                                                                   .integers(2**31)),
                             noise_sigma=config.noise_sigma)
        obs = simulate(shape.cloud, spec, config.m)
        cases.append(TestCase(sid, shape.cloud, obs.partial, shape.category))
    return cases


def net_deform(store: ParamStore, source: PartSegmentedShape, g_target: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        fe_s = encode(source.cloud, store, "enc_source")
        deformed, _, _ = deform_source(store, source, fe_s.pointwise, Tensor(g_target), fe_s.global_)
    return deformed.data


@dataclass
class CaseResult:
    target_id: str
    category: str
    top_k: list
    chamfer: float  # min over deformed top-k, against the full target
    best_id: str


def evaluate_case(case: TestCase, db: SourceDatabase, store: ParamStore, config: TrainConfig,
                  cache: SourceCache | None = None, index: int = 0) -> CaseResult:
    out = retrieve_otm(db, case.partial, store, n_samples=config.n_samples, top_k=config.top_k,
                       trim=config.trim, mode=config.score_mode, seed=int(stream(config.seed, "sphere", index)
                                                                          .integers(2**31)),
                       cache=cache)
    with ad.no_grad():
        gp = encode(case.partial, store, "enc_partial").global_.data
    best = (math.inf, "")
    for sid in out.top_k:
        cd = chamfer_distance(net_deform(store, db.get(sid), gp), case.full)
        best = min(best, (cd, sid))
    return CaseResult(case.target_id, case.category, list(out.top_k), best[0], best[1])


def summarize(values_by_case) -> dict:
    """``{per_category: {cat: mean*100}, instance_average: mean*100}``."""
    per = {}
    for cat, v in values_by_case:
        per.setdefault(cat, []).append(v)
    return {
        "per_category": {c: float(np.mean(per[c]) * 100) for c in CATEGORIES if c in per},
        "instance_average": float(np.mean([v for _, v in values_by_case]) * 100),
    }


def evaluate(db: SourceDatabase, cases, store: ParamStore, config: TrainConfig, threads: int = 1):
    """Retrieve, deform the top-k with the network and keep the lowest
    Chamfer to the held-out full shape. Returns ``(report, case results)``."""
    cache = SourceCache(store)
    for sid, shape in db:  # fill before any threads start
        cache.global_feature(sid, shape.cloud)

    def run(item):
        k, case = item
        return evaluate_case(case, db, store, config, cache, k)

    items = list(enumerate(cases))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(i) for i in items]
    report = summarize([(r.category, r.chamfer) for r in results])
    return report, results
