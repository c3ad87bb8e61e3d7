"""Command-line entry point.

    ss2r <command> --out RUN_DIR [--config PATH | --preset NAME] [--seed N] [--set key=value ...] [--threads N]

Progress is printed as one JSON object per line. Exit codes: 0 success,
1 invalid configuration or missing prerequisite, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline as pl
from .checks import TOLERANCE, all_checks
from .geometry.io import load_depth
from .report import ReportError, build_report

COMMANDS = ["gen-data", "train-stage1", "train-disc", "train-stage2", "simulate", "fuse", "eval", "gradcheck", "report"]


class UsageError(Exception):
    """Validation failure: exit code 1."""


def emit(rec: dict) -> None:
    print(json.dumps(rec, sort_keys=True, default=float), flush=True)


def parse_args(argv):
    ap = argparse.ArgumentParser(prog="ss2r", description="Two-stage depth-noise diffusion simulator.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="JSON run config")
    ap.add_argument("--preset", choices=sorted(pl.PRESETS), help="built-in config when --config is not given")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", type=Path, help="run directory")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--sim", help="eval: map set name or directory to evaluate")
    ap.add_argument("--real", help="eval: reference map set name or directory (default R)")
    return ap.parse_args(argv)


def resolve_config(args, run: pl.RunDir | None) -> pl.RunConfig:
    """Config from --config/--preset plus overrides; must agree with an existing run's config."""
    existing = run.read_config() if run is not None and run.config_path.exists() else None
    explicit = args.config is not None or args.preset is not None or args.seed is not None or args.overrides
    if args.config is not None:
        try:
            base = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
    elif existing is not None and args.preset is None:
        base = existing.to_dict()
    else:
        base = pl.PRESETS[args.preset or "default"]().to_dict()
    if args.seed is not None:
        base["seed"] = args.seed
    cfg = pl.RunConfig.from_dict(pl.apply_overrides(base, args.overrides))
    if existing is not None and explicit and cfg.to_dict() != existing.to_dict():
        raise UsageError(f"{run.config_path} holds a different config; refusing to overwrite an existing run "
                         "(use a new --out directory)")
    return cfg


@contextmanager
def run_lock(root: Path):
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        pid = lock.read_text().strip() or "?"
        alive = False
        if pid.isdigit():
            try:
                os.kill(int(pid), 0)
                alive = True
            except OSError:
                alive = False
        if alive:
            raise UsageError(f"run directory {root} is locked by process {pid}") from None
        lock.unlink()
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require(path: Path, what: str) -> None:
    if not path.exists():
        raise UsageError(f"missing {path}; run {what} first")


def _map_set(run: pl.RunDir, name: str) -> dict[int, list]:
    root = Path(name) if Path(name).is_dir() else run.root / "samples" / name
    if not root.is_dir():
        raise UsageError(f"no map set {name!r} (looked for {root})")
    groups: dict[int, list] = {}
    for pfm in sorted(root.glob("*.pfm")):
        scene = int(pfm.stem.split("_")[0])
        groups.setdefault(scene, []).append(load_depth(pfm.with_suffix(""))[0])
    return groups


def execute(args) -> int:
    if args.command == "gradcheck":
        errs = all_checks(args.seed or 0)
        for name, err in errs.items():
            emit({"event": "gradcheck", "op": name, "max_rel_error": err, "ok": err < TOLERANCE})
        ok = all(e < TOLERANCE for e in errs.values())
        emit({"event": "gradcheck_done", "ok": ok, "worst": max(errs.values())})
        return 0 if ok else 1

    if args.out is None:
        raise UsageError("--out RUN_DIR is required")
    run = pl.RunDir(args.out, emit)
    if args.command == "report":
        try:
            path = build_report(args.out)
        except ReportError as e:
            raise UsageError(str(e)) from None
        emit({"event": "report", "path": str(path)})
        return 0

    cfg = resolve_config(args, run)
    run.make()
    with run_lock(run.root):
        if not run.config_path.exists():
            run.write_config(cfg)
        marker = run.root / f"{args.command}.incomplete"
        marker.touch()
        _dispatch(args, cfg, run)
        marker.unlink()
    return 0


def _dispatch(args, cfg: pl.RunConfig, run: pl.RunDir) -> None:
    data = run.root / "data" / "index.json"
    cmd = args.command
    if cmd == "gen-data":
        ds = pl.dataset_for(cfg, run)
        emit({"event": "gen-data", "n_samples": len(ds.samples), **ds.audit})
        return
    _require(data, "gen-data")
    ds = pl.dataset_for(cfg, run)
    if cmd == "train-stage1":
        pl.train_stage1(cfg, ds, run)
        return
    _require(run.ckpt("stage1.ckpt"), "train-stage1")
    stage1 = pl.load_denoiser(run.ckpt("stage1.ckpt"), cfg)
    if cmd == "train-disc":
        pl.train_disc(cfg, ds, stage1, run)
        return
    if cmd == "train-stage2":
        _require(run.ckpt("disc.ckpt"), "train-disc")
        dw = pl.disc.load_weights(run.ckpt("disc.ckpt"), cfg.disc)
        pl.train_all_refinements(cfg, ds, stage1, dw, run)
        return
    if cmd == "simulate":
        nets = [stage1]
        for j in range(2, cfg.stages + 1):
            _require(run.ckpt(f"stage{j}.ckpt"), "train-stage2")
            nets.append(pl.load_denoiser(run.ckpt(f"stage{j}.ckpt"), cfg, 2))
        pl.simulate_run(run, cfg, ds, nets)
        return
    _require(run.root / "samples" / "R", "simulate")
    if cmd == "fuse":
        names = [p.name for p in sorted((run.root / "samples").iterdir()) if p.is_dir() and p.name != "ply"]
        pl.fuse_run(run, cfg, ds, names)
        emit({"event": "fuse", "sets": names})
        return
    if cmd == "eval":
        if args.sim:
            sim, real = _map_set(run, args.sim), _map_set(run, args.real or "R")
            rows = pl.evaluate_simulation(sim, real, cfg.grid)
            tag = f"{Path(args.sim).name}_vs_{Path(args.real or 'R').name}"
            pl.write_csv(run.metric(f"pair_{tag}.csv"), pl.METRIC_HEADER, rows)
            emit({"event": "eval", "pair": tag, **dict(zip(pl.METRIC_HEADER[1:], rows[-1][1:]))})
            return
        dw = pl.disc.load_weights(run.ckpt("disc.ckpt"), cfg.disc) if run.ckpt("disc.ckpt").exists() else None
        pl.eval_run(run, cfg, ds, dw)


def main(argv=None) -> int:
    args = parse_args(argv)
    threads = args.threads or (int(os.environ["SS2R_THREADS"]) if os.environ.get("SS2R_THREADS") else None)
    try:
        with threadpool_limits(limits=threads):
            return execute(args)
    except (UsageError, pl.ConfigError, pl.StageOrderError) as e:
        emit({"event": "error", "kind": "validation", "message": str(e)})
        return 1
    except Exception as e:  # runtime fault: leave the .incomplete marker behind
        emit({"event": "error", "kind": "runtime", "type": type(e).__name__, "message": str(e)})
        return 2


if __name__ == "__main__":
    sys.exit(main())
