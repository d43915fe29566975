"""End-to-end acceptance checks. Each test prints one ``ACCEPTANCE n PASS|FAIL``
line; the desk-scale run (criteria 8 and 9) trains once per session."""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from redforge import autodiff as ad
from redforge.autodiff import Tensor
from redforge.cli import main as cli_main
from redforge.deformation import (
    PartDeformParams,
    apply_deformation,
    deform,
    direct_deformer,
    fit_deformation_direct,
    oracle_retrieval,
    part_boxes,
    planted_params,
)
from redforge.geometry import (
    chamfer_distance,
    chamfer_distance_bruteforce,
    nearest_neighbors,
    nearest_neighbors_bruteforce,
)
from redforge.gradcheck import all_checks
from redforge.losses import loss_consistency, loss_re, loss_symmetry
from redforge.occlusion import OcclusionSpec, simulate
from redforge.retrieval import SourceCache, retrieve_otm, trimmed_score, trimmed_scores, vote
from redforge.shapes import PartSegmentedShape, build_database, generate_shape
from redforge.training import TrainConfig, evaluate, make_test_set, smoothed, summarize, train

pytestmark = pytest.mark.slow

DESK = TrainConfig.desk()
ORACLE_FIT_STEPS = 100


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# 1 ----------------------------------------------------------------------------------

def test_geometry_matches_bruteforce(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    nn_ok, worst = True, 0.0
    for _ in range(200):
        a = rng.normal(size=(int(rng.integers(1, 129)), 3))
        b = rng.normal(size=(int(rng.integers(1, 129)), 3))
        j, d2 = nearest_neighbors(a, b)
        jb, d2b = nearest_neighbors_bruteforce(a, b)
        nn_ok &= np.array_equal(j, jb) and np.array_equal(d2, d2b)
        cd, cdb = chamfer_distance(a, b), chamfer_distance_bruteforce(a, b)
        worst = max(worst, abs(cd - cdb) / max(abs(cdb), 1e-300))
    dt = time.perf_counter() - t0
    verdict(1, nn_ok and worst <= 1e-12 and dt < 10,
            f"200 pairs, NN exact={nn_ok}, chamfer rel err {worst:.2e}, {dt:.2f}s")


# 2 ----------------------------------------------------------------------------------

def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    failed, worst, names = [], 0.0, set()
    for check in all_checks("all"):
        rep = check.run(1e-4)
        names.add(check.name)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failed.append(check.name)
    dt = time.perf_counter() - t0
    needed = {"loss_chamfer", "loss_symmetry", "loss_recon", "loss_re", "loss_consistency", "loss_total"}
    ok = not failed and needed <= names and dt < 60
    verdict(2, ok, f"{len(names)} checks, worst rel err {worst:.2e}, failed={failed}, {dt:.1f}s")


# 3 ----------------------------------------------------------------------------------

def test_loss_fixed_points(verdict):
    rng = np.random.default_rng(3)
    re_worst = 0.0
    for _ in range(50):
        p = rng.normal(size=(int(rng.integers(1, 60)), 3))
        q = rng.normal(size=(int(rng.integers(1, 60)), 3))
        j, _ = nearest_neighbors_bruteforce(p, q)
        re_worst = max(re_worst, float(loss_re(p, Tensor(q[j] - p), q).data))
    sym_worst = max(float(loss_symmetry(Tensor(generate_shape(cat, k, m=256).cloud)).data)
                    for cat in ("chair", "table", "cabinet") for k in range(5))
    d, r = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
    co = [float(t.data) for t in loss_consistency(Tensor(d), Tensor(d.copy()), Tensor(r), Tensor(r.copy()))]
    ok = re_worst <= 1e-12 and sym_worst <= 1e-12 and max(map(abs, co)) <= 1e-12
    verdict(3, ok, f"max L^re {re_worst:.1e}, max L^sym {sym_worst:.1e}, L^co {co}")


# 4 ----------------------------------------------------------------------------------

def _with_box_corners(shape):
    signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    corners = [p.center + signs * p.extent / 2 for p in shape.parts]
    lo = np.stack([p.lo for p in shape.parts])[shape.labels]
    hi = np.stack([p.hi for p in shape.parts])[shape.labels]
    cloud = np.concatenate([np.clip(shape.cloud, lo, hi)] + corners)
    labels = np.concatenate([shape.labels] + [np.full(8, i) for i in range(shape.n_parts)])
    return PartSegmentedShape(cloud, labels, shape.parts, shape.connectivity, shape.category)


def test_deformation_algebra(verdict):
    rng = np.random.default_rng(4)
    ident = all(np.array_equal(deform(s, PartDeformParams.identity(s.n_parts)), s.cloud)
                for s in (generate_shape(c, k, m=256) for c in ("chair", "table", "cabinet") for k in range(3)))
    worst = 0.0
    for k in range(100):
        shape = _with_box_corners(generate_shape(("chair", "table", "cabinet")[k % 3], k, m=256))
        cd = rng.normal(scale=0.2, size=(shape.n_parts, 3))
        s = np.exp(rng.normal(scale=0.4, size=(shape.n_parts, 3)))
        c, e = part_boxes(apply_deformation(shape, cd, s).data, shape.labels, shape.n_parts)
        worst = max(worst, np.max(np.abs(c - (shape.centers + cd))), np.max(np.abs(e - s * shape.extents)))
    verdict(4, ident and worst <= 1e-9, f"identity bitwise={ident}, box error {worst:.2e} over 100 draws")


# 5 ----------------------------------------------------------------------------------

def test_self_recovery(verdict):
    t0 = time.perf_counter()
    good, ratios = 0, []
    for k in range(20):
        shape = generate_shape(("chair", "table", "cabinet")[k % 3], 100 + k, m=256)
        target = deform(shape, planted_params(shape, np.random.default_rng(k)))
        res = fit_deformation_direct(shape, target, steps=500)
        ratios.append(res.chamfer / res.initial_chamfer)
        good += res.chamfer < 0.05 * res.initial_chamfer
    dt = time.perf_counter() - t0
    verdict(5, good >= 18 and dt < 120,
            f"{good}/20 recovered, median final/initial {np.median(ratios):.2e}, {dt:.1f}s")


# 6 ----------------------------------------------------------------------------------

def test_retrieval_metric(verdict):
    norms = np.arange(1.0, 11.0)
    dirs = np.random.default_rng(0).normal(size=(10, 3))
    field = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * norms[:, None]
    hand = (trimmed_scores(norms, 0.1, "mean") == 5.0 and trimmed_scores(norms, 0.1, "max") == 9.0
            and trimmed_score(field, 0.1, "mean") == pytest.approx(5.0, abs=1e-12)
            and trimmed_score(field, 0.1, "max") == pytest.approx(9.0, abs=1e-12))
    rng = np.random.default_rng(6)
    sums, invariant = True, True
    for _ in range(20):
        s, n = int(rng.integers(1, 50)), int(rng.integers(1, 12))
        ids = [f"src{k:02d}" for k in range(n)]
        table = rng.normal(size=(s, n, 40))
        for mode in ("mean", "max"):
            scores = trimmed_scores(np.abs(table), 0.1, mode)
            v1, _, t1 = vote(scores, ids, min(5, n))
            v2, _, t2 = vote(trimmed_scores(np.abs(table) * rng.uniform(1e-3, 1e3), 0.1, mode), ids, min(5, n))
            sums &= int(v1.sum()) == s
            invariant &= np.array_equal(v1, v2) and t1 == t2
    verdict(6, hand and sums and invariant, f"hand cases={hand}, vote sums={sums}, scale invariance={invariant}")


# 7 ----------------------------------------------------------------------------------

def test_occlusion_ratio_control(verdict):
    worst = 0.0
    for ratio in (0.25, 0.5, 0.75):
        for k in range(50):
            shape = generate_shape(("chair", "table", "cabinet")[k % 3], 200 + k, m=1024)
            obs = simulate(shape.cloud, OcclusionSpec("composite", ratio, seed=k, noise_sigma=0.0), 1024)
            worst = max(worst, abs(obs.achieved_ratio - ratio))
    verdict(7, worst <= 0.02, f"150 occlusions, max |achieved - target| {worst:.4f}")


# 8 / 9: desk-scale run ---------------------------------------------------------------

@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    cfg = DESK
    db = build_database(cfg.db_per_category, cfg.seed, cfg.m)
    targets = build_database(cfg.train_targets // len(cfg.categories), cfg.seed, cfg.m,
                             stream_name="targets", id_prefix="train_")
    t0 = time.perf_counter()
    result = train(db, targets, cfg, tmp_path_factory.mktemp("desk"))
    return {"cfg": cfg, "db": db, "store": result.store, "losses": result.epoch_losses,
            "train_s": time.perf_counter() - t0, "cases": make_test_set(cfg)}


def _planted_recall(desk):
    cfg, db, store = desk["cfg"], desk["db"], desk["store"]
    cache, hits = SourceCache(store), 0
    for k, (sid, shape) in enumerate(db):
        obs = simulate(shape.cloud, OcclusionSpec(cfg.occlusion_kind, 0.5, seed=5000 + k,
                                                   noise_sigma=cfg.noise_sigma), cfg.m)
        out = retrieve_otm(db, obs.partial, store, n_samples=cfg.n_samples, top_k=10, trim=cfg.trim,
                           mode=cfg.score_mode, seed=k, cache=cache)
        hits += sid in out.top_k
    return hits / len(db)


def test_desk_end_to_end(desk, verdict):
    t0 = time.perf_counter()
    cfg, db, cases = desk["cfg"], desk["db"], desk["cases"]
    sm = smoothed(desk["losses"], 5)
    a = bool(sm[-1] < sm[0])
    recall = _planted_recall(desk)
    joint, _ = evaluate(db, cases, desk["store"], cfg)
    ident = summarize([(c.category, oracle_retrieval(db, c.full, "identity").chamfer) for c in cases])
    direct = summarize([(c.category, oracle_retrieval(db, c.full, direct_deformer(ORACLE_FIT_STEPS)).chamfer)
                        for c in cases])
    j, i, d = joint["instance_average"], ident["instance_average"], direct["instance_average"]
    parts = {"a": a, "b": recall >= 0.8, "c": j <= i, "d": j <= 3 * d}
    total = desk["train_s"] + time.perf_counter() - t0
    verdict(8, all(parts.values()),
            f"(a) smoothed loss {sm[0]:.3f} -> {sm[-1]:.3f}; (b) planted top-10 recall {recall:.2f}; "
            f"(c) joint {j:.3f} vs identity oracle {i:.3f}; (d) vs 3x direct oracle {3 * d:.3f}; "
            f"per-criterion {parts}; {total / 60:.1f} min")


def test_occlusion_degradation(desk, verdict):
    cfg, db = desk["cfg"], desk["db"]
    averages = {}
    for ratio in (0.0, 0.75):
        report, _ = evaluate(db, make_test_set(cfg, ratio), desk["store"], cfg)
        averages[ratio] = report["instance_average"]
    verdict(9, averages[0.0] <= averages[0.75],
            f"ratio 0: {averages[0.0]:.3f}, ratio 0.75: {averages[0.75]:.3f}")


# 10 ---------------------------------------------------------------------------------

def _run(*argv):
    code = cli_main([str(a) for a in argv])
    assert code == 0, argv
    return code


def test_cli_determinism(tmp_path, verdict, capsys):
    tiny = TrainConfig.desk(m=64, epochs=2, feat=8, enc_hidden=(6, 7), res_hidden=(9, 9, 7, 5),
                            reg_hidden=(6, 5), recon_hidden=(6, 7), n_samples=6, top_k=3,
                            db_per_category=2, train_targets=6, test_per_category=1)
    tiny.save(tmp_path / "tiny.txt")
    same = {}
    for tag, threads in (("a", 1), ("b", 3)):
        root = tmp_path / tag
        _run("gen-db", "--out", root / "db", "--per-category", 2, "--seed", 5, "--points", 64, "--threads", threads)
        _run("gen-data", "--out", root / "data", "--train-per-category", 2, "--test-per-category", 1,
             "--seed", 5, "--points", 64, "--threads", threads)
        _run("train", "--db", root / "db", "--data", root / "data", "--out", root / "run",
             "--config", tmp_path / "tiny.txt", "--quiet", "--threads", threads)
        common = ["--db", root / "db", "--data", root / "data", "--checkpoint", root / "run/final.ckpt",
                  "--threads", threads]
        _run("eval", *common, "--out", root / "eval.json")
        _run("ablate-occlusion", *common, "--out", root / "ablate.json")
        target = root / "data/test/clouds/test_chair_000.pcf"
        _run("retrieve", "--db", root / "db", "--checkpoint", root / "run/final.ckpt", "--target", target,
             "--out", root / "retrieve.json", "--samples", 16, "--threads", threads)
        _run("deform", "--db", root / "db", "--source", "chair_001", "--target", target,
             "--out", root / "deform.json", "--cloud-out", root / "deform.pcf", "--steps", 30,
             "--threads", threads)
        capsys.readouterr()
        _run("grad-check", "--module", "losses", "--threads", threads)
        same[tag] = capsys.readouterr().out
    a, b = tmp_path / "a", tmp_path / "b"
    binary = [p.relative_to(a) for p in sorted(a.rglob("*"))
              if p.is_file() and p.suffix in (".pcf", ".u16", ".ckpt", ".csv")]
    bin_ok = all((a / p).read_bytes() == (b / p).read_bytes() for p in binary)
    json_files = ["db/manifest.json", "data/train/manifest.json", "eval.json", "ablate.json",
                  "retrieve.json", "deform.json"]
    json_ok = all(json.loads((a / p).read_text()) == json.loads((b / p).read_text()) for p in json_files)
    stdout_ok = same["a"] == same["b"]
    verdict(10, bin_ok and json_ok and stdout_ok and len(binary) > 10,
            f"{len(binary)} binary files bitwise equal={bin_ok}, {len(json_files)} JSON equal={json_ok}, "
            f"grad-check output equal={stdout_ok} (threads 1 vs 3)")
