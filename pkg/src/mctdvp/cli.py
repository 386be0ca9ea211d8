"""Command-line front end: ``mctdvp run|oracle|compare|merge``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .ensemble import (
    EnsembleResult,
    merge_checkpoints,
    observable_shapes,
    result_from_accumulator,
    run_ensemble,
    run_fingerprint,
    save_checkpoint,
)
from .errors import DenseCapExceeded, MctdvpError
from .mps import to_dense
from .oracle import RHO_CAP, dense_observable, integrate_master, pure_density_matrix

log = logging.getLogger("mctdvp")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
CSV_SCHEMA = "time,label,mean_re,mean_im,stderr/v1"
CSV_HEADER = ["time", "label", "mean_re", "mean_im", "stderr"]
Z_THRESHOLD = 4.0


class UsageError(Exception):
    """Bad invocation or inconsistent inputs (exit code 2)."""


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_observable_csv(path: Path, times, labels, mean, stderr) -> None:
    """One row per (time, label), time-major, full double precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i, t in enumerate(times):
            for j, lab in enumerate(labels):
                v = mean[i, j]
                w.writerow([_fmt(t), lab, _fmt(v.real), _fmt(v.imag), _fmt(stderr[i, j])])


def write_result(out_dir: Path, result: EnsembleResult) -> list[str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in result.mean:
        path = out_dir / f"{name}.csv"
        write_observable_csv(path, result.times, result.labels[name], result.mean[name], result.stderr[name])
        written.append(path.name)
    return written


def write_manifest(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    base = {
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "csv_schema": CSV_SCHEMA,
    }
    base.update(payload)
    (out_dir / "manifest.json").write_text(json.dumps(base, indent=2, sort_keys=True) + "\n")


def _parse_range(text: str | None, n_samples: int):
    if text is None:
        return None
    try:
        lo_s, hi_s = text.split(":")
        lo, hi = int(lo_s), int(hi_s)
    except ValueError as exc:
        raise UsageError(f"--sample-range must look like START:STOP, got {text!r}") from exc
    if not 0 <= lo < hi <= n_samples:
        raise UsageError(f"--sample-range {text} outside [0, {n_samples})")
    return lo, hi


def _result_payload(result: EnsembleResult) -> dict:
    return {
        "n_requested": result.n_requested,
        "n_effective": result.n_effective,
        "stderr_defined": result.stderr_defined,
        "failures": [{"sample": i, "time": t} for i, t in result.failures],
    }


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.output) if args.output else cfg.output_dir
    srange = _parse_range(args.sample_range, cfg.n_samples)
    checkpoint = cfg.checkpoint
    if srange is not None and checkpoint is None:
        checkpoint = out_dir / f"samples_{srange[0]}_{srange[1]}.ckpt"
    if checkpoint is not None:
        checkpoint.parent.mkdir(parents=True, exist_ok=True)
    model = cfg.build_model()
    tcfg = cfg.trajectory_config()
    manifest = {
        "method": "mps",
        "config": cfg.resolved(),
        "master_seed": cfg.master_seed,
        "sample_range": list(srange) if srange else [0, cfg.n_samples],
        "checkpoint": str(checkpoint) if checkpoint else None,
        "complete": False,
    }
    start = time.perf_counter()
    try:
        result = run_ensemble(
            model,
            cfg.initial,
            tcfg,
            cfg.n_samples,
            cfg.n_workers,
            batch_size=cfg.batch_size,
            sample_range=srange,
            checkpoint=checkpoint,
            resume=checkpoint is not None,
        )
    except MctdvpError as exc:
        manifest.update(wall_time_s=time.perf_counter() - start, error=str(exc))
        write_manifest(out_dir, manifest)
        log.error("run failed: %s", exc)
        return EXIT_RUNTIME
    files = write_result(out_dir, result)
    manifest.update(_result_payload(result))
    manifest.update(wall_time_s=time.perf_counter() - start, files=files, complete=True)
    write_manifest(out_dir, manifest)
    log.info("wrote %s to %s", ", ".join(files), out_dir)
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.output) if args.output else cfg.output_dir
    model = cfg.build_model()
    dim = model.d**model.n_sites
    if dim > RHO_CAP:
        raise UsageError(f"dense oracle refused: dimension {dim} exceeds cap {RHO_CAP}")
    if cfg.initial.per_sample:
        raise UsageError("dense oracle needs a shared initial state (per_sample = false)")
    start = time.perf_counter()
    rho0 = pure_density_matrix(to_dense(cfg.initial.build(model)))
    tcfg = cfg.trajectory_config()
    times, rhos = integrate_master(rho0, model, cfg.t_final, cfg.dt, cfg.record_every)
    files = []
    out_dir.mkdir(parents=True, exist_ok=True)
    for spec in cfg.observables:
        vals = dense_observable(spec, rhos, model)
        path = out_dir / f"{spec.name}.csv"
        labels = spec.labels(model.n_sites, model.d)
        write_observable_csv(path, times, labels, vals, np.zeros(vals.shape))
        files.append(path.name)
    trace = np.trace(rhos, axis1=1, axis2=2)
    purity = np.einsum("tij,tji->t", rhos, rhos)
    diag = np.stack([trace, purity], axis=1)
    write_observable_csv(out_dir / "diagnostics.csv", times, ["trace", "purity"], diag, np.zeros(diag.shape))
    files.append("diagnostics.csv")
    drift = float(np.max(np.abs(trace - 1)))
    log.info("oracle trace drift %.3e", drift)
    write_manifest(
        out_dir,
        {
            "method": "dense",
            "config": cfg.resolved(),
            "trace_drift": drift,
            "n_steps": tcfg.n_steps,
            "wall_time_s": time.perf_counter() - start,
            "files": files,
            "complete": True,
        },
    )
    return EXIT_OK


def read_observable_csv(path: Path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    if not rows or rows[0] != CSV_HEADER:
        raise UsageError(f"{path}: expected header {','.join(CSV_HEADER)}")
    keys, mean, err = [], [], []
    for no, r in enumerate(rows[1:], start=2):
        if len(r) != 5:
            raise UsageError(f"{path}:{no}: expected 5 columns")
        try:
            keys.append((float(r[0]), r[1]))
            mean.append(complex(float(r[2]), float(r[3])))
            err.append(float(r[4]))
        except ValueError as exc:
            raise UsageError(f"{path}:{no}: malformed number") from exc
    return keys, np.array(mean), np.array(err)


def compare_files(run_csv: Path, oracle_csv: Path) -> dict:
    """Deviation statistics of a run CSV against a reference CSV on the same grid."""
    k1, m1, e1 = read_observable_csv(run_csv)
    k2, m2, e2 = read_observable_csv(oracle_csv)
    if k1 != k2:
        raise UsageError(f"grid mismatch between {run_csv} and {oracle_csv}")
    dev = np.abs(m1 - m2)
    scale = np.sqrt(e1**2 + e2**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(dev == 0, 0.0, dev / scale)
    return {
        "max_dev": float(dev.max()) if dev.size else 0.0,
        "rms_dev": float(np.sqrt(np.mean(dev**2))) if dev.size else 0.0,
        "max_z": float(z.max()) if z.size else 0.0,
        "n_points": int(dev.size),
        "z": z,
    }


def cmd_compare(args) -> int:
    run_p, ref_p = Path(args.run), Path(args.reference)
    if run_p.is_dir() != ref_p.is_dir():
        raise UsageError("compare two files or two directories")
    if run_p.is_dir():
        names = sorted(p.name for p in run_p.glob("*.csv") if p.name != "diagnostics.csv")
        pairs = [(run_p / n, ref_p / n) for n in names if (ref_p / n).exists()]
        if not pairs:
            raise UsageError("no observable CSVs in common")
    else:
        pairs = [(run_p, ref_p)]
    worst = 0.0
    total = 0
    print(f"{'observable':<24} {'points':>7} {'max_dev':>12} {'rms_dev':>12} {'max_z':>9}")
    for a, b in pairs:
        rep = compare_files(a, b)
        worst = max(worst, rep["max_z"])
        total += rep["n_points"]
        print(
            f"{a.stem:<24} {rep['n_points']:>7d} {rep['max_dev']:>12.4e} "
            f"{rep['rms_dev']:>12.4e} {rep['max_z']:>9.3f}"
        )
    verdict = "PASS" if worst <= Z_THRESHOLD else "FAIL"
    print(f"verdict: {verdict} (max z = {worst:.3f}, threshold {Z_THRESHOLD:g})")
    print(
        f"note: {total} correlated points were tested; with many points an occasional "
        "z above the threshold is expected even for a correct run"
    )
    return EXIT_OK


def cmd_merge(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.output) if args.output else cfg.output_dir
    model = cfg.build_model()
    tcfg = cfg.trajectory_config()
    acc, fp = merge_checkpoints([Path(p) for p in args.checkpoints])
    expected = run_fingerprint(model, cfg.initial, tcfg, cfg.n_samples, cfg.master_seed)
    if fp != expected:
        raise UsageError("checkpoints were produced by a different configuration")
    _, labels = observable_shapes(model, tcfg)
    times = tcfg.record_steps() * tcfg.dt
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.checkpoint_out:
        save_checkpoint(args.checkpoint_out, acc, fp)
    try:
        result = result_from_accumulator(acc, times, labels)
    except MctdvpError as exc:
        log.error("merge failed: %s", exc)
        return EXIT_RUNTIME
    files = write_result(out_dir, result)
    done = int(acc.completed.sum())
    write_manifest(
        out_dir,
        {
            "method": "mps",
            "config": cfg.resolved(),
            "master_seed": cfg.master_seed,
            "merged_from": [str(p) for p in args.checkpoints],
            "files": files,
            "complete": done == cfg.n_samples,
            "n_completed": done,
            **_result_payload(result),
        },
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mctdvp",
        description="Monte Carlo TDVP trajectories for open spin chains, with a dense oracle.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a trajectory ensemble")
    p.add_argument("config", help="INI run configuration")
    p.add_argument("--sample-range", metavar="START:STOP", help="run only these sample indices")
    p.add_argument("-o", "--output", help="override the output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="integrate the dense master equation")
    p.add_argument("config")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("compare", help="compare a run against a reference (files or directories)")
    p.add_argument("run")
    p.add_argument("reference")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("merge", help="merge partial checkpoints over disjoint sample ranges")
    p.add_argument("config")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("-o", "--output")
    p.add_argument("--checkpoint-out", help="also write the merged checkpoint here")
    p.set_defaults(func=cmd_merge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, UsageError, DenseCapExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MctdvpError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
