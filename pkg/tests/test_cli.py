import json

import numpy as np
import pytest

from redforge import autodiff as ad
from redforge.cli import EXIT_CHECK, EXIT_OK, EXIT_USAGE, main, resolve_threads
from redforge.formats import load_pcf
from redforge.shapes import build_database, load_database
from redforge.training import TrainConfig

TINY = dict(m=64, epochs=2, feat=8, enc_hidden=(6, 7), res_hidden=(9, 9, 7, 5), reg_hidden=(6, 5),
            recon_hidden=(6, 7), n_samples=4, top_k=2, db_per_category=2, train_targets=6,
            test_per_category=1)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    TrainConfig.desk(**TINY).save(root / "tiny.txt")
    assert run("gen-db", "--out", root / "db", "--per-category", 2, "--points", 64) == EXIT_OK
    assert run("gen-data", "--out", root / "data", "--train-per-category", 2, "--test-per-category", 1,
               "--points", 64) == EXIT_OK
    assert run("train", "--db", root / "db", "--data", root / "data", "--out", root / "run",
               "--config", root / "tiny.txt", "--quiet") == EXIT_OK
    return root


def test_gen_db_round_trip(tmp_path):
    assert run("gen-db", "--out", tmp_path, "--per-category", 10, "--seed", 4, "--points", 64) == EXIT_OK
    back = load_database(tmp_path)
    mem = build_database(10, 4, 64)
    assert len(back) == 30 and back.ids == mem.ids
    assert all(a == b for a, b in zip(back.shapes, mem.shapes))
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["checks"] and all(man["checks"].values())


def test_gen_db_manifest_bytes_stable(tmp_path):
    for d in ("a", "b"):
        assert run("gen-db", "--out", tmp_path / d, "--per-category", 2, "--seed", 9, "--points", 64) == 0
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    for f in (tmp_path / "a/clouds").iterdir():
        assert f.read_bytes() == (tmp_path / "b/clouds" / f.name).read_bytes()


def test_gen_db_records_run(tmp_path):
    run("gen-db", "--out", tmp_path, "--per-category", 1, "--seed", 3, "--points", 32)
    text = (tmp_path / "run.txt").read_text()
    assert "cli.seed=3" in text and "cli.command=gen-db" in text


@pytest.mark.parametrize("argv", [
    ["gen-db", "--out", "x", "--per-category", "0"],
    ["gen-db", "--out", "x", "--per-category", "-1"],
    ["gen-db", "--out", "x"],
    ["no-such-command"],
    ["grad-check", "--module", "bogus"],
    ["ablate-occlusion", "--db", "d", "--data", "d", "--checkpoint", "c", "--out", "o", "--ratios", "0,2"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


def test_unwritable_out_exits_2(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("gen-db", "--out", blocker / "sub", "--per-category", 1) == EXIT_USAGE
    assert "cannot write" in capsys.readouterr().err


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv("RED_FORGE_THREADS", raising=False)
    assert resolve_threads(3) == 3
    assert resolve_threads(None) >= 1
    monkeypatch.setenv("RED_FORGE_THREADS", "5")
    assert resolve_threads(None) == 5 and resolve_threads(2) == 2
    monkeypatch.setenv("RED_FORGE_THREADS", "zero")
    assert run("grad-check", "--module", "deformation") == EXIT_USAGE


def test_grad_check_passes(capsys):
    assert run("grad-check", "--module", "losses") == EXIT_OK
    out = capsys.readouterr().out
    assert "loss_total" in out and "FAIL" not in out


def test_grad_check_negative_control(monkeypatch, capsys):
    def bad_exp(a):
        a = ad._lift(a)
        y = np.exp(a.data)

        def bw(out):
            a._accum(out.grad * y * 1.01)
        return ad._result(y, (a,), bw, "exp")
    monkeypatch.setattr(ad, "exp", bad_exp)
    assert run("grad-check", "--module", "primitives") == EXIT_CHECK
    captured = capsys.readouterr()
    assert "exp" in captured.err
    assert any(line.split()[1] == "exp" and line.endswith("FAIL") for line in captured.out.splitlines())


def test_grad_check_tight_tolerance_fails(capsys):
    # finite differences cannot reach 1e-12 relative accuracy everywhere
    assert run("grad-check", "--module", "primitives", "--tol", "1e-12") == EXIT_CHECK


def test_train_outputs(work):
    out = work / "run"
    for name in ("final.ckpt", "config.txt", "train_log.csv", "run.txt"):
        assert (out / name).exists()
    assert TrainConfig.load(out / "config.txt") == TrainConfig.desk(**TINY)


def test_train_rejects_point_mismatch(work, tmp_path):
    cfg = TrainConfig.desk(**{**TINY, "m": 128})
    cfg.save(tmp_path / "c.txt")
    assert run("train", "--db", work / "db", "--data", work / "data", "--out", tmp_path / "r",
               "--config", tmp_path / "c.txt", "--quiet") == EXIT_USAGE


def test_eval_threads_identical(work, tmp_path):
    reports = []
    for t in (1, 3):
        path = tmp_path / f"e{t}.json"
        assert run("eval", "--db", work / "db", "--data", work / "data", "--checkpoint",
                   work / "run/final.ckpt", "--out", path, "--threads", t) == EXIT_OK
        reports.append(json.loads(path.read_text()))
    assert reports[0] == reports[1]
    assert set(reports[0]["per_category"]) == {"chair", "table", "cabinet"}
    assert (tmp_path / "e1.json.run.txt").exists()


def test_ablate_report_schema(work, tmp_path):
    path = tmp_path / "ab.json"
    assert run("ablate-occlusion", "--db", work / "db", "--data", work / "data", "--checkpoint",
               work / "run/final.ckpt", "--out", path) == EXIT_OK
    rows = json.loads(path.read_text())["rows"]
    assert [r["ratio"] for r in rows] == [0.0, 0.25, 0.5, 0.75]
    for r in rows:
        assert set(r) == {"ratio", "per_category", "instance_average"}
        assert np.isfinite(r["instance_average"])


def test_ablate_missing_checkpoint(work, tmp_path, capsys):
    assert run("ablate-occlusion", "--db", work / "db", "--data", work / "data", "--checkpoint",
               tmp_path / "none.ckpt", "--out", tmp_path / "ab.json") == EXIT_USAGE
    assert "checkpoint not found" in capsys.readouterr().err


def test_retrieve_threads_identical(work, tmp_path):
    target = work / "data/test/clouds/test_chair_000.pcf"
    outs = []
    for t in (1, 2):
        path = tmp_path / f"r{t}.json"
        assert run("retrieve", "--db", work / "db", "--checkpoint", work / "run/final.ckpt", "--target", target,
                   "--out", path, "--samples", 12, "--top-k", 3, "--threads", t) == EXIT_OK
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    data = json.loads(outs[0])
    assert sum(r["votes"] for r in data["results"]) == 12 and len(data["top_k"]) == 3


def test_deform_direct_and_net(work, tmp_path):
    target = work / "data/test/clouds/test_table_000.pcf"
    assert run("deform", "--db", work / "db", "--source", "table_000", "--target", target,
               "--out", tmp_path / "p.json", "--cloud-out", tmp_path / "p.pcf", "--steps", 20) == EXIT_OK
    assert load_pcf(tmp_path / "p.pcf").shape == (64, 3)
    first = (tmp_path / "p.json").read_bytes()
    run("deform", "--db", work / "db", "--source", "table_000", "--target", target,
        "--out", tmp_path / "p.json", "--steps", 20)
    assert (tmp_path / "p.json").read_bytes() == first
    assert run("deform", "--db", work / "db", "--source", "table_000", "--target", target,
               "--out", tmp_path / "n.json", "--checkpoint", work / "run/final.ckpt") == EXIT_OK
    assert run("deform", "--db", work / "db", "--source", "nope", "--target", target,
               "--out", tmp_path / "x.json") == EXIT_USAGE


def test_train_rerun_bitwise(work, tmp_path):
    assert run("train", "--db", work / "db", "--data", work / "data", "--out", tmp_path,
               "--config", work / "tiny.txt", "--quiet") == EXIT_OK
    assert (tmp_path / "final.ckpt").read_bytes() == (work / "run/final.ckpt").read_bytes()
    assert (tmp_path / "train_log.csv").read_bytes() == (work / "run/train_log.csv").read_bytes()
