"""Command-line entry point: ``cgn <command> [options]``.

Exit status is 0 on success, 1 when a command fails on its inputs and 2 on a
usage error. Commands that write files default to a directory under
``$CGN_OUTPUT_ROOT`` (``runs`` when unset).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

OUTPUT_ROOT_ENV = "CGN_OUTPUT_ROOT"

log = logging.getLogger("cgn")


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out(args, default_name):
    return Path(args.out) if args.out else output_root() / default_name


def _emit(record):
    print(json.dumps(record, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


# -- commands ------------------------------------------------------------------------


def cmd_synth(args):
    from cgn import synth_data as sd

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.n is not None:
        base["n_samples"] = args.n
    if args.seed is not None:
        base["seed"] = args.seed
    config = sd.SynthConfig.from_dict(base)
    out = _out(args, f"synth-seed{config.seed}")
    rows = sd.generate_dataset(config, out)
    counts = {s: sum(r["split"] == s for r in rows) for s in ("train", "val", "test")}
    _emit({"command": "synth", "out": out, "n": len(rows), **counts})


def cmd_preprocess(args):
    from cgn import preprocess

    out = _out(args, "preprocessed")
    written = preprocess.preprocess_dir(args.input, out)
    _emit({"command": "preprocess", "out": out, "n": len(written)})


def _train_config(args):
    from cgn.trainer import TrainConfig

    base = TrainConfig.load(args.config).to_dict() if args.config else {}
    for key in ("variant", "seed", "epochs", "lr", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    return TrainConfig.from_dict(base)


def cmd_train(args):
    from cgn import trainer

    config = _train_config(args)
    out = _out(args, f"train-{config.variant}-seed{config.seed}")
    rec = trainer.train(config, args.data, out)
    _emit({"command": "train", "out": out, "best_epoch": rec.best_epoch, "best_val_auc": rec.best_val_auc,
           "checkpoint": rec.checkpoint_path, "test": rec.test_metrics})


def cmd_eval(args):
    from cgn import trainer

    report, _, rows = trainer.evaluate(args.checkpoint, args.data, args.split)
    if args.localization:
        Path(args.localization).parent.mkdir(parents=True, exist_ok=True)
        trainer.write_localization_csv(args.localization, rows, report["localization_error"])
    if args.cv:
        model_cfg = trainer.load_checkpoint(args.checkpoint)[2]
        report["cross_validation"] = trainer.cross_validate(model_cfg, args.data, args.cv)
    _emit({"command": "eval", **report})


def cmd_ablate(args):
    from cgn import trainer

    config = _train_config(args)
    variants = args.variants.split(",") if args.variants else None
    if variants:
        unknown = [v for v in variants if v not in trainer.VARIANTS]
        if unknown:
            raise UsageError(f"unknown variants: {', '.join(unknown)}")
    out = _out(args, "ablation")
    rows = trainer.run_ablation(config, args.data, out, variants, args.seeds)
    _emit({"command": "ablate", "out": out, "csv": out / "ablation.csv",
           "median_test_auc": trainer.median_auc_by_variant(rows),
           "failed": [f"{r['variant']}:{r['seed']}" for r in rows if r["status"] != "ok"]})


def cmd_verify_scm(args):
    from cgn import scm_core

    if args.spec:
        spec = scm_core.ScmSpec.load(args.spec)
        report = scm_core.verify_theorem1(spec, args.tolerance)
        record = report.record()
        record["spec"] = spec.name or str(args.spec)
        print(f"pass={'true' if report.passed else 'false'}")
        _emit(record)
        return 0 if report.passed else 1
    rng = np.random.default_rng(args.seed)
    reports = [scm_core.verify_theorem1(scm_core.random_compliant_spec(rng), args.tolerance)
               for _ in range(args.random)]
    ok = all(r.passed for r in reports)
    print(f"pass={'true' if ok else 'false'}")
    _emit({"specs": len(reports), "max_tv_eq2": max(r.tv_eq2 for r in reports),
           "max_tv_eq3": max(r.tv_eq3 for r in reports), "pass": ok})
    return 0 if ok else 1


def cmd_fid_report(args):
    from cgn import metrics
    from cgn import synth_data as sd
    from cgn.preprocess import mirror_reference

    record = {"command": "fid-report"}
    if args.run:
        f = np.load(Path(args.run) / "features.npz")
        if not bool(f["has_counterfactual"]):
            raise ValueError(f"run {args.run} has no counterfactual features (variant without a generator)")
        masks = f["masks"] if "masks" in f.files else None
        record.update(metrics.fid_quartet(f["h_t"], f["h_r"], f["h_c"], masks).as_dict())
    if args.couples:
        config = sd.SynthConfig(seed=args.seed)
        healthy = [(t, mirror_reference(r)) for t, r in sd.generate_healthy_pairs(config, args.couples)]
        unhealthy = []
        for i in range(args.couples):
            smp = sd.generate_sample(config, i)
            unhealthy.append((smp.x_T, mirror_reference(smp.x_R)))
        h, u = metrics.couple_fid_lists(healthy, unhealthy, group_size=args.group_size)
        record.update({"healthy_fids": h, "unhealthy_fids": u, "p_value": metrics.symmetric_prior_test(h, u)})
    if len(record) == 1:
        raise UsageError("fid-report needs --run and/or --couples")
    _emit(record)


def cmd_plot(args):
    from cgn import plots

    if args.kind == "cam-overlay":
        paths = plots.plot_cam_overlay(args.run, args.out)
        extra = {}
    elif args.kind == "features":
        paths = plots.plot_feature_heatmaps(args.run, args.out)
        extra = {}
    else:
        paths, epochs = plots.plot_training_progression(args.run, args.every, args.out)
        extra = {"epochs": epochs}
    _emit({"command": "plot", "kind": args.kind, "n": len(paths), **extra})


# -- parser -------------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cgn", description="Bilateral counterfactual generating network toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("synth", help="generate a synthetic bilateral dataset")
    s.add_argument("--out", help="output directory")
    s.add_argument("--config", help="JSON file with SynthConfig fields")
    s.add_argument("--n", type=int, help="number of samples")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="normalise a directory of PNG / 14-bit .npy mammograms")
    s.add_argument("--in", dest="input", required=True, help="input directory")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_preprocess)

    def train_args(s):
        s.add_argument("--config", help="JSON file with TrainConfig fields")
        s.add_argument("--data", required=True, help="dataset directory (with manifest.csv)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--variant")
        s.add_argument("--seed", type=int)
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--batch-size", dest="batch_size", type=int)

    s = sub.add_parser("train", help="train one variant")
    train_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--localization", help="write per-sample localization rows to this CSV")
    s.add_argument("--cv", type=int, metavar="K", help="also run K-fold cross-validation with the checkpoint's config")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train every variant and write ablation.csv")
    train_args(s)
    s.add_argument("--variants", help="comma-separated subset of variants")
    s.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("verify-scm", help="check the counterfactual identity on a structural causal model")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="JSON model file")
    g.add_argument("--random", type=int, metavar="N", help="check N random compliant models")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tolerance", type=float, default=1e-9)
    s.set_defaults(func=cmd_verify_scm)

    s = sub.add_parser("fid-report", help="FID quartet of a run and the symmetric-prior test")
    s.add_argument("--run", help="run directory containing features.npz")
    s.add_argument("--couples", type=int, default=0, help="healthy and unhealthy couples for the test")
    s.add_argument("--group-size", dest="group_size", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fid_report)

    s = sub.add_parser("plot", help="write figures for a run")
    s.add_argument("--run", required=True)
    s.add_argument("--kind", required=True, choices=("cam-overlay", "features", "progression"))
    s.add_argument("--every", type=int, default=10, help="epoch cadence for --kind progression")
    s.add_argument("--out", help="output directory (default: <run>/plots/<kind>)")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0 if code is None else int(code)


if __name__ == "__main__":
    sys.exit(main())
