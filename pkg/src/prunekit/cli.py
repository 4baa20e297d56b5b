"""``prunekit`` command-line interface."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from prunekit import __version__, kernels
from prunekit._backend import thread_cap
from prunekit.errors import PrunekitError
from prunekit.model_ir import build_reference_model, mac_count, model_hash, param_count
from prunekit.pruner import predict_param_count, prune
from prunekit.rank_criterion import (
    CalibrationConfig,
    calibrate_ranks,
    keep_from_prune,
    make_plan,
    paper_preset_ratios,
    read_report,
    uniform_ratios,
    write_report,
)
from prunekit.serialize import load_model, save_model
from prunekit.synthetic import run_smoke
from prunekit.tracker import track_step

log = logging.getLogger("prunekit")

SCHEMA_VERSION = 1
SWEEP_FIELDS = [
    "schema_version", "target", "ratio_kind", "ratio", "params", "param_ratio",
    "macs", "mac_ratio", "latency_ms", "precision20", "auc",
]
BENCH_FIELDS = [
    "schema_version", "model", "params", "macs", "repeats", "threads", "backend",
    "median_ms", "iqr_ms", "min_ms",
]
SMOKE_FIELDS = ["frame", "cx", "cy", "w", "h", "score"]
TABLE4_RATIOS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]


@contextmanager
def limit_threads(n):
    """Cap the numba pool at ``n`` and pin BLAS to one thread.

    OpenBLAS splits GEMM reductions by thread count, which changes float
    rounding; a single BLAS thread keeps outputs identical for any ``n``.
    """
    from threadpoolctl import threadpool_limits

    prev = None
    if kernels.BACKEND == "numba":
        import numba

        prev = numba.get_num_threads()
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            yield
    finally:
        if prev is not None:
            import numba

            numba.set_num_threads(prev)


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def cmd_init(args):
    model = build_reference_model(args.scale, args.seed, args.template_size, args.search_size)
    save_model(model, args.out)
    print(f"wrote {args.out}: {param_count(model):,} parameters, {mac_count(model):,} MACs")


def cmd_calibrate(args):
    model = load_model(args.model)
    cfg = CalibrationConfig(
        batch_size=args.g,
        rel_tol=args.rel_tol,
        seed=args.seed,
        input_source=args.source,
        image_folder=args.image_folder,
        post_activation=args.post_activation,
        threads=thread_cap(args.threads),
    )
    with limit_threads(thread_cap(args.threads)):
        report = calibrate_ranks(model, cfg)
    write_report(report, args.out)
    print(f"wrote {args.out}: ranks for {len(report.ranks)} conv layers over g={report.g} inputs")


def parse_ratio_args(values, model, kind):
    """``0.8`` applies to every prunable layer; ``layer=0.8`` to one layer. Returns keep ratios."""
    glob, per = None, {}
    for v in values or []:
        if "=" in v:
            lid, r = v.split("=", 1)
            per[lid.strip()] = float(r)
        else:
            glob = float(v)
    for r in ([glob] if glob is not None else []) + list(per.values()):
        if not 0 <= r <= 1:
            raise PrunekitError(f"{kind} ratios must lie in [0, 1], got {r}")
    if kind == "prune":
        glob = None if glob is None else 1.0 - glob
        per = keep_from_prune(per)
    return uniform_ratios(model, 1.0 if glob is None else glob, per)


def cmd_prune(args):
    model = load_model(args.model)
    report = read_report(args.report)
    if args.paper_preset:
        ratios = paper_preset_ratios(model)
    elif args.keep_ratio:
        ratios = parse_ratio_args(args.keep_ratio, model, "keep")
    elif args.prune_ratio:
        ratios = parse_ratio_args(args.prune_ratio, model, "prune")
    else:
        raise PrunekitError("give --paper-preset, --keep-ratio or --prune-ratio")
    plan = make_plan(report, ratios)
    provenance = {
        "original_model_hash": model_hash(model),
        "rank_report": str(args.report),
        "rank_report_sha256": _file_sha256(args.report),
        "keep_ratios": ratios,
        "plan": plan.to_json(),
    }
    pruned = prune(model, plan, provenance)
    save_model(pruned, args.out)
    before, after = param_count(model), param_count(pruned)
    print(f"wrote {args.out}: {before:,} -> {after:,} parameters (ratio {after / before:.4f})")


def bench_model(model, repeats: int, threads: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    z, x = model.meta.template_size, model.meta.search_size
    template = rng.random((1, 3, z, z), dtype=np.float32)
    search = rng.random((1, 3, x, x), dtype=np.float32)
    times = []
    with limit_threads(threads):
        track_step(model, template, search)  # warm-up (JIT, caches)
        for _ in range(repeats):
            t0 = time.perf_counter()
            track_step(model, template, search)
            times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    q1, med, q3 = np.percentile(ms, [25, 50, 75])
    return {
        "schema_version": SCHEMA_VERSION,
        "params": param_count(model),
        "macs": mac_count(model),
        "repeats": repeats,
        "threads": threads,
        "backend": kernels.BACKEND,
        "median_ms": float(med),
        "iqr_ms": float(q3 - q1),
        "min_ms": float(ms.min()),
    }


def cmd_bench(args):
    if args.repeats < 1:
        raise PrunekitError("--repeats must be at least 1")
    model = load_model(args.model)
    row = {"model": str(args.model), **bench_model(model, args.repeats, thread_cap(args.threads), args.seed)}
    print(
        f"{args.model}: {row['params']:,} params, {row['macs']:,} MACs, "
        f"median {row['median_ms']:.2f} ms (IQR {row['iqr_ms']:.2f} ms) over {row['repeats']} runs"
    )
    if args.out_csv:
        _append_csv(args.out_csv, BENCH_FIELDS, [row])


def sweep_targets(model, target):
    """Map a sweep target name to the prunable layers it covers."""
    prunable = model.prunable_ids
    backbone = [l for l in prunable if l.startswith("backbone.")]
    head_depth = sum(1 for l in prunable if l.startswith("head_cls."))
    named = {f"backbone.L{i}": [lid] for i, lid in enumerate(backbone, start=1)}
    for i in range(1, head_depth + 1):
        named[f"head.L{i}"] = [f"head_cls.conv{i}", f"head_reg.conv{i}"]
    named["global"] = list(prunable)
    if target == "table4":
        return named
    if target in named:
        return {target: named[target]}
    if target in prunable:
        return {target: [target]}
    raise PrunekitError(f"unknown sweep target {target!r}; use a prunable layer id, {', '.join(named)} or table4")


def cmd_sweep(args):
    model = load_model(args.model)
    ratios = [float(r) for r in args.ratios.split(",") if r.strip()] if args.ratios else []
    if not ratios:
        raise PrunekitError("empty ratio list")
    for r in ratios:
        if not 0 < r <= 1:
            raise PrunekitError(f"sweep ratios must lie in (0, 1], got {r}")
    targets = sweep_targets(model, args.target)
    threads = thread_cap(args.threads)
    with limit_threads(threads):
        if args.report:
            report = read_report(args.report)
        else:
            report = calibrate_ranks(model, CalibrationConfig(batch_size=args.g, seed=args.seed, threads=threads))
        base_params, base_macs = param_count(model), mac_count(model)
        rows = []
        for name, layers in targets.items():
            for r in sorted(ratios) if args.ratio_kind == "prune" else sorted(ratios, reverse=True):
                keep = 1.0 - r if args.ratio_kind == "prune" else r
                plan = make_plan(report, uniform_ratios(model, 1.0, {lid: keep for lid in layers}))
                pruned = prune(model, plan)
                res = run_smoke(pruned, args.frames, args.seed)
                params, macs = param_count(pruned), mac_count(pruned)
                if params != predict_param_count(model, plan):
                    raise PrunekitError(f"{name}: pruned size disagrees with the closed-form count")
                rows.append({
                    "schema_version": SCHEMA_VERSION,
                    "target": name,
                    "ratio_kind": args.ratio_kind,
                    "ratio": r,
                    "params": params,
                    "param_ratio": params / base_params,
                    "macs": macs,
                    "mac_ratio": macs / base_macs,
                    "latency_ms": float(np.median(res.frame_seconds) * 1e3) if res.frame_seconds else 0.0,
                    "precision20": res.precision20,
                    "auc": res.auc,
                })
                log.info("%s %s=%.2f params=%d", name, args.ratio_kind, r, params)
    _write_csv(args.out_csv, SWEEP_FIELDS, rows)
    print(f"wrote {args.out_csv}: {len(rows)} rows ({len(targets)} targets x {len(ratios)} ratios)")


def cmd_smoke(args):
    model = load_model(args.model)
    reference = load_model(args.compare) if args.compare else None
    with limit_threads(thread_cap(args.threads)):
        res = run_smoke(model, args.frames, args.seed, reference=reference)
    ok = all(np.isfinite(s) for s in res.scores)
    inside = res.boxes_inside_frame()
    summary = {
        "schema_version": SCHEMA_VERSION,
        "model": str(args.model),
        "frames": len(res.boxes),
        "seed": args.seed,
        "precision20": res.precision20,
        "auc": res.auc,
        "finite_scores": bool(ok),
        "boxes_inside_frame": inside,
    }
    corr = res.score_correlation()
    if corr is not None:
        summary["compare_model"] = str(args.compare)
        summary["score_pearson_r"] = corr
    if args.out_csv:
        rows = [
            {"frame": i, "cx": repr(b.cx), "cy": repr(b.cy), "w": repr(b.w), "h": repr(b.h), "score": repr(s)}
            for i, (b, s) in enumerate(zip(res.boxes, res.scores))
        ]
        _write_csv(args.out_csv, SMOKE_FIELDS, rows)
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    if not ok or not inside:
        raise PrunekitError("pipeline integrity check failed (non-finite score or box outside frame)")


# ---------------------------------------------------------------------------
# plumbing


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _append_csv(path, fields, rows):
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerows(rows)


def build_parser():
    p = argparse.ArgumentParser(prog="prunekit", description="Rank-based filter pruning for Siamese trackers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a reference model with seeded random weights")
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--template-size", type=int, default=127)
    s.add_argument("--search-size", type=int, default=303)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("calibrate", help="average feature-map ranks over a calibration batch")
    s.add_argument("--model", required=True)
    s.add_argument("--g", "--batch-size", dest="g", type=int, default=16)
    s.add_argument("--source", choices=["synthetic-noise", "image-folder"], default="synthetic-noise")
    s.add_argument("--image-folder")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rel-tol", type=float, default=1e-5)
    s.add_argument("--post-activation", action="store_true", help="rank maps after BN/ReLU instead of raw conv output")
    s.add_argument("--threads", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("prune", help="prune a model with a rank report")
    s.add_argument("--model", required=True)
    s.add_argument("--report", required=True)
    how = s.add_mutually_exclusive_group()
    how.add_argument("--paper-preset", action="store_true", help="published per-layer keep ratios")
    how.add_argument("--keep-ratio", action="append", metavar="[LAYER=]R")
    how.add_argument("--prune-ratio", action="append", metavar="[LAYER=]R")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("bench", help="size and latency report for one model")
    s.add_argument("--model", required=True)
    s.add_argument("--repeats", type=int, default=10)
    s.add_argument("--threads", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="prune at a grid of ratios and smoke-test each result")
    s.add_argument("--model", required=True)
    s.add_argument("--target", default="table4", help="layer id, backbone.L<i>, head.L<i>, global or table4")
    s.add_argument("--ratios", default=",".join(str(r) for r in TABLE4_RATIOS))
    s.add_argument("--ratio-kind", choices=["prune", "keep"], default="prune")
    s.add_argument("--report", help="rank report; calibrated on the fly if omitted")
    s.add_argument("--g", type=int, default=16)
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int)
    s.add_argument("--out-csv", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("smoke", help="track a synthetic sequence and report metrics")
    s.add_argument("--model", required=True)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--compare", help="second model run on the same crops; reports score-map Pearson r")
    s.add_argument("--threads", type=int)
    s.add_argument("--out-csv")
    s.add_argument("--out-json")
    s.set_defaults(func=cmd_smoke)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (PrunekitError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"prunekit {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
