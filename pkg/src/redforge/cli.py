"""Command-line interface.

Exit codes: 0 success, 1 a check failed, 2 usage or environment error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .formats import FormatError, load_cloud, save_pcf

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "RED_FORGE_THREADS"


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _ratio_list(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from None
    if not vals or any(not 0 <= v < 1 for v in vals):
        raise argparse.ArgumentTypeError("ratios must lie in [0, 1)")
    return vals


def resolve_threads(flag):
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            v = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if v < 1:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {v}")
        return v
    return os.cpu_count() or 1


def _write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _record_run(out_path, args, extra: str = ""):
    """Resolved flags (and config) next to a file output or inside a directory output."""
    out_path = Path(out_path)
    target = out_path / "run.txt" if out_path.is_dir() else out_path.with_name(out_path.name + ".run.txt")
    skip = {"func", "threads"}
    lines = [f"cli.command={args.command}"]
    lines += [f"cli.{k}={v}" for k, v in sorted(vars(args).items()) if k not in skip and k != "command"]
    target.write_text("\n".join(lines) + "\n" + extra)


def _load_config(args):
    from .training import TrainConfig
    if getattr(args, "config", None):
        cfg = TrainConfig.load(args.config)
    elif getattr(args, "checkpoint", None) and (Path(args.checkpoint).parent / "config.txt").exists():
        cfg = TrainConfig.load(Path(args.checkpoint).parent / "config.txt")
    elif getattr(args, "preset", "desk") == "full":
        cfg = TrainConfig()
    else:
        cfg = TrainConfig.desk()
    over = {}
    for name in ("seed", "epochs", "lr", "n_samples", "top_k"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    return replace(cfg, **over).validate()


def _need_file(path, what):
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")


def _writable_dir(path):
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"cannot write to {p}: {e.strerror or e}") from None
    return p


# -- subcommands --------------------------------------------------------------------

def cmd_gen_db(args):
    from .shapes import build_database, save_database
    out = _writable_dir(args.out)
    db = build_database(args.per_category, args.seed, args.points)
    save_database(db, out)
    _record_run(out, args)
    failed = [k for k, ok in db.checks.items() if not ok]
    print(f"wrote {len(db)} shapes to {out}")
    if failed:
        print(f"invariant checks failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_gen_data(args):
    from .shapes import build_database, save_database
    out = _writable_dir(args.out)
    train = build_database(args.train_per_category, args.seed, args.points,
                           stream_name="targets", id_prefix="train_")
    test = build_database(args.test_per_category, args.seed, args.points,
                          stream_name="test", id_prefix="test_")
    save_database(train, out / "train")
    save_database(test, out / "test")
    _record_run(out, args)
    print(f"wrote {len(train)} training and {len(test)} test targets to {out}")
    return EXIT_OK if all(train.checks.values()) and all(test.checks.values()) else EXIT_CHECK


def _load_db(path, what="database"):
    from .shapes import load_database
    _need_file(Path(path) / "manifest.json", f"{what} manifest")
    return load_database(path)


def _check_points(cfg, *dbs):
    for db in dbs:
        if db.point_count != cfg.m:
            raise UsageError(f"data has {db.point_count} points per cloud but the config expects {cfg.m}")


def cmd_train(args):
    from .training import train
    cfg = _load_config(args)
    db = _load_db(args.db)
    targets = _load_db(Path(args.data) / "train", "training data")
    _check_points(cfg, db, targets)
    out = _writable_dir(args.out)

    def progress(epoch, loss):
        print(f"epoch {epoch + 1}/{cfg.epochs} loss {loss:.6f}", flush=True)
    res = train(db, targets, cfg, out, progress=None if args.quiet else progress)
    _record_run(out, args)
    print(f"final mean loss {res.epoch_losses[-1]:.6f}; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def _eval_setup(args):
    from .training import load_model
    _need_file(args.checkpoint, "checkpoint")
    cfg = _load_config(args)
    store = load_model(args.checkpoint)
    if store.arch.m != cfg.m:
        raise UsageError(f"checkpoint expects {store.arch.m} points but the config says {cfg.m}")
    db = _load_db(args.db)
    tests = _load_db(Path(args.data) / "test", "test data")
    _check_points(cfg, db, tests)
    return cfg, store, db, tests


def cmd_eval(args):
    from .training import evaluate, make_test_set
    cfg, store, db, tests = _eval_setup(args)
    ratio = cfg.eval_ratio if args.ratio is None else args.ratio
    report, results = evaluate(db, make_test_set(cfg, ratio, tests), store, cfg, args.threads)
    report["ratio"] = ratio
    report["cases"] = [{"target": r.target_id, "category": r.category, "best_id": r.best_id,
                        "chamfer_x100": r.chamfer * 100, "top_k": r.top_k} for r in results]
    _write_json(args.out, report)
    _record_run(args.out, args, cfg.to_text())
    print(json.dumps({k: report[k] for k in ("per_category", "instance_average")}, indent=1))
    return EXIT_OK


def cmd_ablate(args):
    from .training import evaluate, make_test_set
    cfg, store, db, tests = _eval_setup(args)
    rows = []
    for r in args.ratios:
        report, _ = evaluate(db, make_test_set(cfg, r, tests), store, cfg, args.threads)
        rows.append({"ratio": r, **report})
        print(f"ratio {r:.2f}: average {report['instance_average']:.4f}", flush=True)
    _write_json(args.out, {"rows": rows})
    _record_run(args.out, args, cfg.to_text())
    return EXIT_OK


def cmd_retrieve(args):
    from .retrieval import retrieve_otm
    from .training import load_model
    _need_file(args.checkpoint, "checkpoint")
    _need_file(args.target, "target cloud")
    store = load_model(args.checkpoint)
    db = _load_db(args.db)
    target = load_cloud(args.target)
    out = retrieve_otm(db, target, store, n_samples=args.samples, top_k=args.top_k, trim=args.trim,
                       mode=args.mode, seed=args.seed, threads=args.threads)
    _write_json(args.out, out.to_json(Path(args.target).name))
    _record_run(args.out, args)
    print(" ".join(out.top_k))
    return EXIT_OK


def cmd_deform(args):
    from .deformation import PartDeformParams, deform, fit_deformation_direct
    from .geometry import chamfer_distance
    db = _load_db(args.db)
    if args.source not in db.ids:
        raise UsageError(f"unknown source id {args.source!r}")
    _need_file(args.target, "target cloud")
    source, target = db.get(args.source), load_cloud(args.target)
    if args.checkpoint:
        from . import autodiff as ad
        from .nets import encode
        from .training import load_model, net_deform
        _need_file(args.checkpoint, "checkpoint")
        store = load_model(args.checkpoint)
        with ad.no_grad():
            g = encode(target, store, "enc_partial").global_.data
        cloud = net_deform(store, source, g)
        params, cd = None, chamfer_distance(cloud, target)
    else:
        fit = fit_deformation_direct(source, target, steps=args.steps, lr=args.lr,
                                     connectivity_weight=args.connectivity)
        params, cd = fit.params, fit.chamfer
        cloud = deform(source, params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if params is not None:
        params.save(out)
    else:
        _write_json(out, {"chamfer": cd})
    if args.cloud_out:
        save_pcf(args.cloud_out, cloud)
    _record_run(out, args)
    print(f"chamfer {cd:.6g}")
    return EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import all_checks
    worst_fail = []
    for check in all_checks(args.module):
        rep = check.run(args.tol)
        status = "ok" if rep.passed else "FAIL"
        print(f"{check.group:12s} {check.name:24s} {rep.max_rel_error:.3e} {status}", flush=True)
        if not rep.passed:
            worst_fail.append(check.name)
    if worst_fail:
        print(f"gradient check failed: {', '.join(worst_fail)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="redforge", description="Joint retrieval and part deformation "
                                "for partial point clouds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--threads", type=_positive_int, default=None,
                        help=f"worker threads (default ${THREADS_ENV} or all cores)")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        return sp

    sp = common(sub.add_parser("gen-db", help="generate a source database"), seed=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-category", type=_positive_int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--points", type=_positive_int, default=256)
    sp.set_defaults(func=cmd_gen_db)

    sp = common(sub.add_parser("gen-data", help="generate training and test targets"), seed=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--train-per-category", type=_positive_int, default=50)
    sp.add_argument("--test-per-category", type=_positive_int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--points", type=_positive_int, default=256)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="joint training"))
    sp.add_argument("--db", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--preset", choices=("desk", "full"), default="desk")
    sp.add_argument("--epochs", type=_positive_int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("ablate-occlusion", cmd_ablate, "evaluate over occlusion ratios")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--db", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--config")
        sp.add_argument("--n-samples", dest="n_samples", type=_positive_int)
        sp.add_argument("--top-k", dest="top_k", type=_positive_int)
        if name == "eval":
            sp.add_argument("--ratio", type=float)
        else:
            sp.add_argument("--ratios", type=_ratio_list, default=[0.0, 0.25, 0.5, 0.75])
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("retrieve", help="retrieve sources for one partial cloud"), seed=False)
    sp.add_argument("--db", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--target", required=True, help="PCF1 or text xyz cloud")
    sp.add_argument("--out", required=True)
    sp.add_argument("--samples", type=_positive_int, default=1000)
    sp.add_argument("--top-k", type=_positive_int, default=10)
    sp.add_argument("--trim", type=float, default=0.1)
    sp.add_argument("--mode", choices=("mean", "max"), default="mean")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_retrieve)

    sp = common(sub.add_parser("deform", help="deform one source towards a target"), seed=False)
    sp.add_argument("--db", required=True)
    sp.add_argument("--source", required=True, help="source id")
    sp.add_argument("--target", required=True)
    sp.add_argument("--out", required=True, help="parameter JSON")
    sp.add_argument("--cloud-out")
    sp.add_argument("--checkpoint", help="use the trained deformer instead of direct fitting")
    sp.add_argument("--steps", type=_positive_int, default=500)
    sp.add_argument("--lr", type=float, default=0.02)
    sp.add_argument("--connectivity", type=float, default=0.0)
    sp.set_defaults(func=cmd_deform)

    sp = common(sub.add_parser("grad-check", help="finite-difference gradient checks"), seed=False)
    sp.add_argument("--module", choices=("all", "primitives", "nets", "losses", "deformation"), default="all")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = resolve_threads(args.threads)
        return args.func(args)
    except (UsageError, FormatError, ValueError, OSError) as e:
        print(f"redforge: error: {e}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
