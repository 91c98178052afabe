"""``lidar-reloc`` command line.

Exit codes: 0 success, 1 domain failure (for example a flagged-failed
re-localization), 2 usage, missing input or parse error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .config import ConfigError, default_config_path, load_config
from .descriptors import ClassificationUnavailable
from .formats import (FormatError, emit_report, read_pcd, read_trajectory,
                      write_pcd)
from .model import CLASS_NAMES, TrainingDiverged, train
from .partition import MapBundle, load_submaps, partition_map, save_submaps
from .pipeline import build_database, load_dataset, make_backend, scan_paths, simulate
from .projection import ProjectionParams, project
from .registration import relocalize
from .trigger import TriggerState, classify_frame, update
from .world import WorldError, WorldSpec
from . import database, evaluation

log = logging.getLogger("lidar_reloc")

PROG = "lidar-reloc"


class UsageError(Exception):
    """Bad invocation or unreadable input; exit code 2."""

    def __init__(self, module: str, message: str):
        super().__init__(message)
        self.module = module


class DomainFailure(Exception):
    """The command ran but the outcome is a failure; exit code 1."""

    def __init__(self, module: str, message: str):
        super().__init__(message)
        self.module = module


def _existing(path, flag: str, kind: str = "file") -> Path:
    if path is None:
        raise UsageError("app_cli", f"{flag} is required")
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.is_file()
    if not ok:
        raise UsageError("app_cli", f"{flag}: {kind} {p} does not exist")
    return p


def _config(args):
    path = _existing(args.config, "--config") if args.config else default_config_path()
    cfg = load_config(path)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "top_k", None) is not None:
        changes["top_k"] = args.top_k
    if getattr(args, "backend", None) is not None:
        changes["backend"] = args.backend
    return cfg.replace(**changes) if changes else cfg


def _backend(args, cfg):
    ckpt = None
    if cfg.backend == "learned":
        ckpt = _existing(args.checkpoint, "--checkpoint")
    return make_backend(cfg.backend, ckpt)


def _out(args, default: str) -> Path:
    p = Path(args.out or default)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    cfg = _config(args)
    spec = WorldSpec()
    if args.spec:
        try:
            spec = WorldSpec.from_dict(json.loads(_existing(args.spec, "--spec").read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise UsageError("synthetic_world", f"--spec: {exc}") from exc
    if args.out is None:
        raise UsageError("app_cli", "--out is required")
    summary = simulate(args.out, spec, cfg.seed)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_partition(args) -> int:
    cfg = _config(args)
    map_path = _existing(args.map, "--map")
    traj_path = _existing(args.trajectory, "--trajectory")
    out = Path(args.out or "submaps")
    bundle = MapBundle(read_pcd(map_path), read_trajectory(traj_path, args.trajectory_format),
                       str(map_path), str(traj_path))
    submaps = partition_map(bundle, cfg.crop_radius, cfg.partition_stride, cfg.min_submap_points)
    out.mkdir(parents=True, exist_ok=True)
    save_submaps(submaps, out / "submaps.npz")
    manifest = {
        "map": str(map_path), "trajectory": str(traj_path), "crop_radius": cfg.crop_radius,
        "stride": cfg.partition_stride,
        "submaps": [{"index": s.index, "points": len(s),
                     "origin": s.origin.translation.tolist()} for s in submaps],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if args.dump_pcd:
        for s in submaps:
            write_pcd(s.cloud, out / f"submap_{s.index:06d}.pcd")
    print(f"{len(submaps)} submaps written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    data = load_dataset(_existing(args.dataset, "--dataset", "dir"))
    held = load_dataset(_existing(args.heldout, "--heldout", "dir")) if args.heldout else None
    out = _out(args, "model.ckpt")
    try:
        net, history = train(data, cfg, heldout=held, log_path=args.log)
    except TrainingDiverged as exc:
        raise DomainFailure("descriptor_model", str(exc)) from exc
    net.save(out)
    last = history[-1] if history else {}
    print(json.dumps({"checkpoint": str(out), "epochs": cfg.epochs, "final": last}, sort_keys=True))
    return 0


def cmd_build_db(args) -> int:
    cfg = _config(args)
    submaps = load_submaps(_existing(args.submaps, "--submaps"))
    backend = _backend(args, cfg)
    db = build_database(submaps, backend, ProjectionParams.from_config(cfg))
    out = _out(args, "db.npz")
    database.save_database(db, out)
    print(f"{len(db)} records written to {out}")
    return 0


def cmd_relocalize(args) -> int:
    cfg = _config(args)
    scan = read_pcd(_existing(args.scan, "--scan"))
    db = database.load_database(_existing(args.db, "--db"))
    backend = _backend(args, cfg)
    result = relocalize(scan, db, backend, cfg)
    if args.out:
        emit_report(result, _out(args, "relocalization.json"), stable=args.stable)
    doc = result.to_report()
    print(json.dumps({"success": doc["success"], "chosen": doc["chosen"], "pose": doc["pose"]},
                     sort_keys=True))
    if not result.success:
        raise DomainFailure("pose_estimation", "no candidate passed the fitness and RMSE gates")
    return 0


def cmd_monitor(args) -> int:
    cfg = _config(args)
    paths = scan_paths(_existing(args.scans, "--scans", "dir"))
    if not paths:
        raise UsageError("app_cli", f"--scans: no .pcd files in {args.scans}")
    db = database.load_database(_existing(args.db, "--db"))
    backend = _backend(args, cfg)
    if not backend.can_classify:
        raise UsageError("event_trigger", "monitor needs the learned backend for classification")
    params = ProjectionParams.from_config(cfg)
    out_dir = Path(args.out or "monitor")
    out_dir.mkdir(parents=True, exist_ok=True)
    state = TriggerState.from_config(cfg)
    failures = 0
    with open(out_dir / "events.jsonl", "w") as events:
        for frame, path in enumerate(paths):
            scan = read_pcd(path)
            desc = backend.describe(project(scan, params))
            probs = backend.classify(desc.q)
            state, fired = update(state, classify_frame(desc.q, backend))
            if not fired:
                continue
            result = relocalize(scan, db, backend, cfg)
            ref = out_dir / f"relocalization_{frame:06d}.json"
            emit_report(result, ref, stable=args.stable)
            failures += not result.success
            line = {"frame": frame, "scan": path.name,
                    "probabilities": dict(zip(CLASS_NAMES, map(float, probs))),
                    "success": result.success, "result": ref.name}
            events.write(json.dumps(line, sort_keys=True) + "\n")
            print(json.dumps(line, sort_keys=True))
    if failures:
        raise DomainFailure("pose_estimation", f"{failures} triggered re-localizations failed")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    data_dir = _existing(args.dataset, "--dataset", "dir")
    try:
        samples = load_dataset(data_dir)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError("app_cli", f"--dataset: {exc}") from exc
    db = database.load_database(_existing(args.db, "--db"))
    backend = _backend(args, cfg)
    run = evaluation.evaluate(samples, db, backend, cfg)
    doc = evaluation.report(run, cfg, backend.name)
    out = _out(args, "report.json")
    emit_report(doc, out, stable=args.stable)
    recall = evaluation.recall_at_k(run, evaluation.SUCCESS_RADIUS, cfg.top_k)
    evaluation.write_recall_csv(recall, out.with_suffix(".recall.csv"))
    evaluation.write_gnuplot(recall, out.with_suffix(".recall.dat"))
    print(json.dumps({"report": str(out), "recall_at_k": doc["recall_at_k"],
                      "translation_error_m": doc.get("translation_error_m")}, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (default: packaged defaults)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--backend", choices=("learned", "spectral"))
    backend.add_argument("--checkpoint", help="network checkpoint for the learned backend")

    topk = argparse.ArgumentParser(add_help=False)
    topk.add_argument("--top-k", type=int, dest="top_k", help="candidates to try")

    stable = argparse.ArgumentParser(add_help=False)
    stable.add_argument("--stable", action="store_true",
                        help="omit timing and resource fields from written reports")

    p = argparse.ArgumentParser(prog=PROG, description="Global re-localization in tunnel maps.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic world and dataset")
    s.add_argument("--spec", help="world spec JSON")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("partition", parents=[common], help="split a map into submaps")
    s.add_argument("--map", help="map point cloud (.pcd)")
    s.add_argument("--trajectory", help="trajectory file")
    s.add_argument("--trajectory-format", choices=("tum", "xyz"), default="tum")
    s.add_argument("--dump-pcd", action="store_true", help="also write one .pcd per submap")
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("train", parents=[common], help="train the descriptor network")
    s.add_argument("--dataset", help="training dataset directory")
    s.add_argument("--heldout", help="held-out dataset directory")
    s.add_argument("--log", help="per-epoch JSONL log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-db", parents=[common, backend], help="describe submaps")
    s.add_argument("--submaps", help="submaps.npz from partition")
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("relocalize", parents=[common, backend, topk, stable],
                       help="re-localize one scan")
    s.add_argument("--scan", help="query scan (.pcd)")
    s.add_argument("--db", help="descriptor database")
    s.set_defaults(func=cmd_relocalize)

    s = sub.add_parser("monitor", parents=[common, backend, topk, stable],
                       help="trigger re-localization at junctions over a scan directory")
    s.add_argument("--scans", help="directory of numbered .pcd scans")
    s.add_argument("--db", help="descriptor database")
    s.set_defaults(func=cmd_monitor)

    s = sub.add_parser("evaluate", parents=[common, backend, topk, stable],
                       help="batch re-localization metrics")
    s.add_argument("--dataset", help="dataset directory with scans and ground truth")
    s.add_argument("--db", help="descriptor database")
    s.set_defaults(func=cmd_evaluate)
    return p


_MODULES = {
    "formats": "io_formats", "config": "app_cli", "geometry": "core_geometry",
    "partition": "map_partition", "projection": "range_projection", "tensor": "tensor_engine",
    "model": "descriptor_model", "spectral": "baseline_descriptor", "database": "descriptor_db",
    "registration": "pose_estimation", "trigger": "event_trigger", "world": "synthetic_world",
    "evaluation": "eval_harness", "pipeline": "app_cli",
}


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    name = "app_cli"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("lidar_reloc."):
            name = _MODULES.get(mod.split(".")[1], name)
        tb = tb.tb_next
    return name


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    where = f"{PROG} {args.command}"
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{where}: {exc.module}: {exc}", file=sys.stderr)
        return 2
    except DomainFailure as exc:
        print(f"{where}: {exc.module}: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ConfigError, ClassificationUnavailable) as exc:
        print(f"{where}: {_origin(exc)}: {exc}", file=sys.stderr)
        return 2
    except (WorldError, ValueError, RuntimeError) as exc:
        print(f"{where}: {_origin(exc)}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{where}: {_origin(exc)}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
