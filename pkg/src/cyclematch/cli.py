"""Command-line entry point.

Exit status: 0 on success, 1 on usage or configuration errors, 2 when the
command itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_run_config

log = logging.getLogger("cyclematch")

COMMANDS = ("gen-data", "train", "eval-cc", "register", "transfer-keypoints", "export-features", "gradcheck", "sinkhorn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(sub: bool) -> argparse.ArgumentParser:
    # subcommand copies use SUPPRESS so a flag given before the subcommand survives
    d = argparse.SUPPRESS if sub else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d, help="INI-style config file")
    p.add_argument("--seed", type=int, metavar="N", default=d, help="seed for data, init and sampling")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory (default: runs/<command>)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", default=d, help="override a config value")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cyclematch", description="Cycle-consistent point correspondence toolkit.", parents=[_common(False)])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    common = [_common(True)]

    p = subs.add_parser("gen-data", parents=common, help="generate a synthetic category with ground truth")
    p.add_argument("--family", choices=("winged", "four-leg-table", "chair-like"))
    p.add_argument("--instances", type=int)
    p.add_argument("--points", type=int)

    p = subs.add_parser("train", parents=common, help="train an encoder on a dataset directory")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--steps", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--resume", metavar="CHECKPOINT", help="continue an interrupted run")
    g.add_argument("--init", metavar="CHECKPOINT", help="start a new run from these parameters (fine-tuning)")

    p = subs.add_parser("eval-cc", parents=common, help="cycle-consistency percentage on held-out pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--pairs", type=int)

    p = subs.add_parser("register", parents=common, help="rigidly register partial clouds")
    _model_args(p)
    p.add_argument("--source", help="source cloud file")
    p.add_argument("--target", help="target cloud file")
    p.add_argument("--data", metavar="DIR", help="benchmark on posed, truncated copies of these shapes")
    p.add_argument("--pairs", type=int)

    p = subs.add_parser("transfer-keypoints", parents=common, help="carry keypoints from one shape to another")
    _model_args(p)
    p.add_argument("--source")
    p.add_argument("--keypoints", help="keypoint file for the source (label x y z)")
    p.add_argument("--target")
    p.add_argument("--truth", help="optional ground-truth keypoints on the target")
    p.add_argument("--data", metavar="DIR", help="benchmark on pairs of a generated category")
    p.add_argument("--pairs", type=int)

    p = subs.add_parser("export-features", parents=common, help="write features and PCA-coloured PLY files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("clouds", nargs="+")

    p = subs.add_parser("gradcheck", parents=common, help="finite-difference check of the training loss")
    p.add_argument("--points", type=int, default=32)
    p.add_argument("--iterations", type=int, default=5, help="Sinkhorn iterations in the checked graph")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = subs.add_parser("sinkhorn", parents=common, help="truncated Sinkhorn projection of a matrix")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--matrix", help="text matrix file")
    g.add_argument("--identity", type=int, metavar="N")
    return parser


def _model_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--oracle-ids", action="store_true", help="use ground-truth ids as features")


# ----------------------------------------------------------------------------
# helpers


def _resolve(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None), getattr(args, "set", None) or ())
    if getattr(args, "seed", None) is not None:
        for key in ("train.rng_seed", "data.seed", "encoder.seed"):
            cfg.set_value(key, int(args.seed))
    flag_map = {
        "family": "data.family",
        "instances": "data.instances",
        "points": "data.points_per_shape",
        "steps": "train.steps",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg.set_value(key, v)
    return cfg


def _versions() -> dict:
    import scipy

    return {"cyclematch": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _write_manifest(out: Path, args, argv, cfg: RunConfig, outputs: dict) -> None:
    manifest = {
        "argv": list(argv),
        "command": args.command,
        "config": cfg.to_dict(),
        "outputs": outputs,
        "versions": _versions(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.ini").write_text(cfg.to_text())


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_model(args, clouds=()):
    """Checkpoint parameters, or ground-truth one-hot ids sized for `clouds`."""
    if getattr(args, "oracle_ids", False):
        from .encoder import id_features

        if any(c.ids is None for c in clouds):
            raise ValueError("--oracle-ids needs clouds that carry ids")
        size = max(int(c.ids.max()) + 1 for c in clouds)
        return lambda cloud: id_features(cloud, size=size)
    from .checkpoint import load_checkpoint

    return load_checkpoint(args.checkpoint).params


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg, out):
    from .synthetic import generate_synthetic_category

    generate_synthetic_category(cfg.data(), out)
    return {"dataset": str(out)}


def cmd_train(args, cfg, out):
    from .dataset import load_dataset
    from .trainer import train

    tcfg = cfg.train()
    data = load_dataset(args.data)

    def progress(row):
        if row["cc_strict"] is not None:
            log.info("step %d  L=%.4f  cc_strict=%.2f", row["step"], row["L"], row["cc_strict"])

    result = train(data, tcfg, out, resume=args.resume, progress=progress, init_from=args.init)
    final = result.rows[-1] if result.rows else {}
    summary = {"steps": result.step, "final": final, "checkpoint": str(result.checkpoint)}
    _emit(summary)
    return {"metrics": str(out / "metrics.jsonl"), "checkpoint": str(result.checkpoint)}


def cmd_eval_cc(args, cfg, out):
    from .checkpoint import load_checkpoint
    from .dataset import load_dataset
    from .trainer import cc_percent, make_eval_triplets

    tcfg = cfg.train()
    ck = load_checkpoint(args.checkpoint)
    tau = ck.train_cfg["tau"] if ck.train_cfg else tcfg.tau
    data = load_dataset(args.data).resample(tcfg.points_per_shape)
    _, val_idx = data.split(tcfg.val_fraction, tcfg.rng_seed)
    shapes = [data.clouds[i] for i in val_idx]
    if len(shapes) < 2:
        shapes = data.clouds
    pairs = args.pairs or tcfg.eval_pairs
    res = cc_percent(ck.params, make_eval_triplets(shapes, pairs, tcfg.rng_seed, tcfg.aug), tau, tcfg.cc_radius)
    report = {"cc_strict": res["cc_strict"], "cc_relaxed": res["cc_relaxed"], "collisions": res["collisions"], "pairs": pairs}
    _emit(report)
    (out / "cc.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return {"cc": str(out / "cc.json")}


def cmd_register(args, cfg, out):
    from .applications import register_partial
    from .geometry import apply_transform
    from .io import load_cloud, save_cloud

    acfg = cfg.apply()
    if args.data:
        from .dataset import load_dataset
        from .experiments import make_registration_pairs, registration_benchmark

        data = load_dataset(args.data).resample(cfg.train().points_per_shape)
        model = _load_model(args, data.clouds)
        pairs = make_registration_pairs(data.clouds, args.pairs or acfg.pairs, acfg.keep_fraction, cfg.train().rng_seed)
        metrics = registration_benchmark(model, pairs, acfg.iterations)
        _emit(metrics)
        (out / "registration.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        header = "rot_rmse,rot_mae,trans_rmse,trans_mae\n"
        row = ",".join(f"{metrics[k]:.6f}" for k in ("rot_rmse", "rot_mae", "trans_rmse", "trans_mae"))
        (out / "registration.csv").write_text(header + row + "\n")
        return {"metrics": str(out / "registration.json"), "table": str(out / "registration.csv")}
    if not (args.source and args.target):
        raise UsageError("register needs --source and --target, or --data")
    src, tgt = load_cloud(args.source), load_cloud(args.target)
    res = register_partial(_load_model(args, (src, tgt)), src, tgt, acfg.iterations)
    T = res.estimated
    report = {"status": res.status, "message": res.message, "rotation": T.rotation.tolist(), "translation": T.translation.tolist()}
    _emit(report)
    (out / "transform.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    save_cloud(apply_transform(src, T), out / "registered.xyz")
    return {"transform": str(out / "transform.json"), "registered": str(out / "registered.xyz")}


def cmd_transfer_keypoints(args, cfg, out):
    from .applications import KeypointSet, keypoint_hit_rate, transfer_keypoints
    from .io import load_cloud, read_keypoints, write_keypoints

    acfg = cfg.apply()
    if args.data:
        from .dataset import load_dataset
        from .experiments import keypoint_benchmark

        data = load_dataset(args.data)
        model = _load_model(args, data.clouds)
        rate = keypoint_benchmark(model, data, args.pairs or acfg.pairs, cfg.train().rng_seed, acfg.neighbors, acfg.threshold)
        report = {"hit_rate": rate, "threshold": acfg.threshold, "pairs": args.pairs or acfg.pairs}
        _emit(report)
        (out / "keypoints.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return {"metrics": str(out / "keypoints.json")}
    if not (args.source and args.target and args.keypoints):
        raise UsageError("transfer-keypoints needs --source, --keypoints and --target, or --data")
    src, tgt = load_cloud(args.source), load_cloud(args.target)
    kps = KeypointSet(*read_keypoints(args.keypoints))
    pred = transfer_keypoints(_load_model(args, (src, tgt)), src, kps, tgt, acfg.neighbors)
    write_keypoints(pred.labels, pred.positions, out / "transferred.kp")
    report = {"keypoints": len(pred)}
    if args.truth:
        report["hit_rate"] = keypoint_hit_rate(pred, KeypointSet(*read_keypoints(args.truth)), acfg.threshold)
    _emit(report)
    return {"keypoints": str(out / "transferred.kp")}


def cmd_export_features(args, cfg, out):
    from .applications import export_features
    from .checkpoint import load_checkpoint
    from .io import load_cloud

    params = load_checkpoint(args.checkpoint).params
    clouds = [load_cloud(p) for p in args.clouds]
    written = export_features(params, clouds, out, names=[Path(p).stem for p in args.clouds])
    files = [str(f) for pair in written for f in pair]
    _emit({"files": files})
    return {"files": files}


def cmd_gradcheck(args, cfg, out):
    from .checks import loss_gradcheck

    seed = cfg.sections["train"]["rng_seed"]
    rep = loss_gradcheck(seed=seed, n_points=args.points, iterations=args.iterations, n_samples=args.samples)
    report = {
        "max_rel_error": float(rep["max_rel_error"]),
        "checked": rep["checked"],
        "skipped_kinks": rep["skipped_kinks"],
        "tolerance": args.tolerance,
        "passed": bool(rep["max_rel_error"] < args.tolerance),
    }
    print(f"max relative error: {report['max_rel_error']:.3e}")
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if not report["passed"]:
        raise RuntimeError(f"gradient check failed: {report['max_rel_error']:.3e} >= {args.tolerance}")
    return {"report": str(out / "gradcheck.json")}


def cmd_sinkhorn(args, cfg, out):
    from .autodiff import no_grad
    from .io import read_matrix, write_matrix
    from .losses import sinkhorn_loss, sinkhorn_normalize

    m = np.eye(args.identity) if args.identity is not None else read_matrix(args.matrix)
    sk = cfg.sinkhorn()
    with no_grad():
        proj = sinkhorn_normalize(m, sk).data
        ls = float(sinkhorn_loss(m, sk).data)
    report = {
        "L_S": ls,
        "row_residual": float(np.max(np.abs(proj.sum(axis=1) - 1))),
        "col_residual": float(np.max(np.abs(proj.sum(axis=0) - 1))),
        "matrix": proj.tolist(),
    }
    _emit(report)
    write_matrix(proj, out / "sinkhorn.txt")
    return {"matrix": str(out / "sinkhorn.txt")}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-cc": cmd_eval_cc,
    "register": cmd_register,
    "transfer-keypoints": cmd_transfer_keypoints,
    "export-features": cmd_export_features,
    "gradcheck": cmd_gradcheck,
    "sinkhorn": cmd_sinkhorn,
}


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        cfg = _resolve(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"cyclematch: config error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    from .io import ensure_dir

    try:
        out = ensure_dir(args.out or Path("runs") / args.command)
        outputs = HANDLERS[args.command](args, cfg, out)
        _write_manifest(out, args, argv, cfg, outputs)
    except UsageError as exc:
        print(f"cyclematch {args.command}: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"cyclematch: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report and exit 2
        print(f"cyclematch {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())
