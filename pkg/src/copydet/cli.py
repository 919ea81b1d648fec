"""``copydet`` command-line driver.

Every command writes ``manifest.json`` into its output directory before any
result, then the results. Exit codes: 0 success, 2 invalid input,
3 computation error. Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import ComputationError, CopydetError, EmptyInputError, InputError
from .io import (
    ensure_dir,
    file_sha256,
    load_aps,
    load_candidates,
    load_descriptors,
    load_ground_truth,
    load_metadata,
    save_aps,
    save_candidates,
    save_descriptors,
)
from .knn import THREADS_ENV, knn_search, resolve_threads
from .metrics import micro_ap, per_query_aps
from .model import DEFAULT_MAX_DIM, QueryMetadata
from .penalty import CROP_BINS, DEFAULT_LAMBDA, OVERLAY_BINS, build_design, fit_penalties, penalty_table
from .report import Report, build_report, render_report
from .table import Table

EXIT_OK, EXIT_INPUT, EXIT_COMPUTE = 0, 2, 3
DEFAULT_ROW_BUDGET = 50_000_000


@dataclass
class RunConfig:
    command: str
    out: str
    inputs: dict[str, str] = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        for name, path in self.inputs.items():
            if not os.path.isfile(path):
                raise InputError(f"--{name.replace('_', '-')}: no such file {path!r}")
        for key in ("k", "bg_n"):
            v = self.flags.get(key)
            if v is not None and v < 1:
                raise InputError(f"--{key.replace('_', '-')} must be >= 1")
        for key in ("bg_beta", "lambda"):
            v = self.flags.get(key)
            if v is not None and not (v >= 0 and np.isfinite(v)):
                raise InputError(f"--{key.replace('_', '-')} must be a finite value >= 0")
        if self.flags.get("max_rows_in_memory", 1) < 1:
            raise InputError("--max-rows-in-memory must be >= 1")
        return self

    def manifest(self) -> dict:
        return {
            "tool": "copydet",
            "version": __version__,
            "command": self.command,
            "flags": self.flags,
            "inputs": {k: {"path": p, "sha256": file_sha256(p)} for k, p in sorted(self.inputs.items())},
            "environment": {"python": platform.python_version(), "numpy": np.__version__},
        }


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _start(rc: RunConfig) -> dict:
    rc.validate()
    ensure_dir(rc.out)
    man = rc.manifest()
    man["status"] = "running"
    _write_json(os.path.join(rc.out, "manifest.json"), man)
    return man


def _finish(rc: RunConfig, man: dict, outputs: list[str], extra: dict | None = None):
    man["status"] = "complete"
    man["outputs"] = {
        os.path.relpath(p, rc.out).replace(os.sep, "/"): file_sha256(p) for p in sorted(set(outputs))
    }
    if extra:
        man.update(extra)
    _write_json(os.path.join(rc.out, "manifest.json"), man)


def _bins(text: str | None, default):
    if text is None:
        return list(default)
    try:
        edges = [float(x) for x in text.split(",")]
    except ValueError:
        raise InputError(f"bad bin edges {text!r}") from None
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise InputError(f"bin edges must be strictly increasing, got {text!r}")
    return edges


def _fit(metadata: list[QueryMetadata], aps, lam):
    """Penalty model on the automatic queries, or None when there are none."""
    auto = {m.query_id for m in metadata if m.edit_mode == "automatic" and m.steps}
    sub = {q: a for q, a in aps.items() if q in auto}
    if not sub:
        return None
    return fit_penalties(build_design(metadata, sub), lam)


def _report_outputs(rc, aps, metadata, *, mu, curve, lam, crop_bins, overlay_bins, extra_summary=None):
    outputs = []
    p = os.path.join(rc.out, "aps.csv")
    save_aps(aps, p)
    outputs.append(p)
    penalties = _fit(metadata, aps, lam) if metadata is not None else None
    rep = build_report(
        aps, metadata, micro_ap=mu, pr_curve=curve, penalties=penalties,
        crop_bins=crop_bins, overlay_bins=overlay_bins, extra_summary=extra_summary,
    )
    outputs += render_report(rep, rc.out)
    if penalties is not None:
        p = os.path.join(rc.out, "penalties.csv")
        with open(p, "w", encoding="utf-8", newline="") as f:
            f.write(penalty_table(penalties).to_csv())
        outputs.append(p)
    return rep, outputs


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    from .synth import SynthConfig, generate, write_dataset

    rc = RunConfig("gen", args.out, {"config": args.config}, {"seed": args.seed, "threads": args.threads})
    rc.validate()
    cfg = SynthConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    man = _start(rc)
    ds = generate(cfg, threads=args.threads)
    # the dataset manifest is merged into the run manifest below
    paths = write_dataset(ds, args.out)
    outputs = [p for k, p in paths.items() if k != "manifest"]
    _finish(rc, man, outputs, {"dataset": ds.manifest()})
    return EXIT_OK


def _background(args, dim):
    from .normalize import BackgroundIndex

    train = load_descriptors(args.bg, expected_dim=dim, max_dim=args.max_dim)
    return BackgroundIndex(train, n=args.bg_n, beta=args.bg_beta)


def cmd_eval_descriptor(args) -> int:
    from .normalize import normalize_descriptor_rescale, normalize_descriptor_subtract, normalize_scores

    inputs = {"queries": args.queries, "refs": args.refs, "gt": args.gt}
    if args.metadata:
        inputs["metadata"] = args.metadata
    if args.bg:
        inputs["bg"] = args.bg
    flags = {
        "k": args.k, "bg_n": args.bg_n, "bg_beta": args.bg_beta, "mode": args.mode if args.bg else None,
        "lambda": args.lam, "crop_bins": args.crop_bins, "overlay_bins": args.overlay_bins,
        "threads": args.threads, "max_dim": args.max_dim,
    }
    rc = RunConfig("eval-descriptor", args.out, inputs, flags)
    crop_bins, overlay_bins = _bins(args.crop_bins, CROP_BINS), _bins(args.overlay_bins, OVERLAY_BINS)
    man = _start(rc)
    threads = resolve_threads(args.threads)

    queries = load_descriptors(args.queries, max_dim=args.max_dim)
    refs = load_descriptors(args.refs, max_dim=args.max_dim, expected_dim=queries.dim)
    gt = load_ground_truth(args.gt)
    metadata = load_metadata(args.metadata) if args.metadata else None
    missing = [q for q in gt if q not in queries.index]
    if missing:
        raise InputError(f"{len(missing)} ground-truth queries have no descriptor (e.g. {missing[0]!r})")
    bg = _background(args, queries.dim) if args.bg else None
    if bg is not None and args.mode == "subtract":
        queries = normalize_descriptor_subtract(queries, bg, threads=threads)
        refs = normalize_descriptor_subtract(refs, bg, threads=threads)
    elif bg is not None and args.mode == "rescale":
        queries = normalize_descriptor_rescale(queries, bg, threads=threads)

    cands = knn_search(queries, refs, args.k, threads=threads).to_candidates()
    if bg is not None and args.mode == "scores":
        cands = normalize_scores(cands, queries, bg, threads=threads)
    outputs = []
    p = os.path.join(args.out, "candidates.csv")
    save_candidates(cands, p)
    outputs.append(p)
    aps = per_query_aps(cands, gt) if len(gt) else {}
    mu, curve = micro_ap(cands, gt) if len(gt) else (0.0, None)
    _, more = _report_outputs(
        rc, aps, metadata, mu=mu, curve=curve, lam=args.lam, crop_bins=crop_bins, overlay_bins=overlay_bins,
        extra_summary={"n_candidates": len(cands)},
    )
    _finish(rc, man, outputs + more)
    return EXIT_OK


def cmd_eval_matching(args) -> int:
    from .extsort import evaluate_streaming

    inputs = {"candidates": args.candidates, "gt": args.gt}
    if args.metadata:
        inputs["metadata"] = args.metadata
    flags = {
        "lambda": args.lam, "crop_bins": args.crop_bins, "overlay_bins": args.overlay_bins,
        "max_rows_in_memory": args.max_rows_in_memory,
    }
    rc = RunConfig("eval-matching", args.out, inputs, flags)
    crop_bins, overlay_bins = _bins(args.crop_bins, CROP_BINS), _bins(args.overlay_bins, OVERLAY_BINS)
    man = _start(rc)
    gt = load_ground_truth(args.gt)
    if len(gt) == 0:
        raise EmptyInputError("ground truth is empty")
    metadata = load_metadata(args.metadata) if args.metadata else None

    n_rows = _count_rows(args.candidates)
    if n_rows > args.max_rows_in_memory:
        aps, mu, n_rows = evaluate_streaming(args.candidates, gt, args.max_rows_in_memory, tmpdir=args.out)
        curve = None
    else:
        cands = load_candidates(args.candidates)
        aps = per_query_aps(cands, gt)
        mu, curve = micro_ap(cands, gt)
    _, outputs = _report_outputs(
        rc, aps, metadata, mu=mu, curve=curve, lam=args.lam, crop_bins=crop_bins, overlay_bins=overlay_bins,
        extra_summary={"n_candidates": n_rows},
    )
    _finish(rc, man, outputs)
    return EXIT_OK


def _count_rows(path) -> int:
    n = 0
    with open(path, "rb") as f:
        for line in f:
            if line.strip():
                n += 1
    return max(0, n - 1)


def cmd_normalize(args) -> int:
    from .normalize import normalize_descriptor_rescale, normalize_descriptor_subtract, normalize_scores

    inputs = {"input": args.input, "bg": args.bg}
    if args.mode == "scores":
        if not args.queries:
            raise InputError("--mode scores needs --queries (descriptors of the candidate queries)")
        inputs["queries"] = args.queries
    flags = {"mode": args.mode, "bg_n": args.bg_n, "bg_beta": args.bg_beta, "threads": args.threads, "max_dim": args.max_dim}
    rc = RunConfig("normalize", args.out, inputs, flags)
    man = _start(rc)
    threads = resolve_threads(args.threads)
    if args.mode == "scores":
        cands = load_candidates(args.input)
        queries = load_descriptors(args.queries, max_dim=args.max_dim)
        bg = _background(args, queries.dim)
        p = os.path.join(args.out, "candidates.csv")
        save_candidates(normalize_scores(cands, queries, bg, threads=threads), p)
    else:
        ds = load_descriptors(args.input, max_dim=args.max_dim)
        bg = _background(args, ds.dim)
        fn = normalize_descriptor_subtract if args.mode == "subtract" else normalize_descriptor_rescale
        p = os.path.join(args.out, "descriptors.dsc")
        save_descriptors(fn(ds, bg, threads=threads), p)
    _finish(rc, man, [p])
    return EXIT_OK


def cmd_penalty(args) -> int:
    rc = RunConfig("penalty", args.out, {"aps": args.aps, "metadata": args.metadata}, {"lambda": args.lam})
    man = _start(rc)
    aps = load_aps(args.aps)
    metadata = load_metadata(args.metadata)
    model = _fit(metadata, aps, args.lam)
    if model is None:
        raise EmptyInputError("no automatically edited query with an AP")
    p = os.path.join(args.out, "penalties.csv")
    with open(p, "w", encoding="utf-8", newline="") as f:
        f.write(penalty_table(model).to_csv())
    _finish(rc, man, [p], {"fit": {
        "residual_norm": model.residual_norm,
        "rank_deficient": model.rank_deficient,
        "regularization": model.regularization,
    }})
    return EXIT_OK


def cmd_report(args) -> int:
    inputs = {"aps": args.aps}
    if args.metadata:
        inputs["metadata"] = args.metadata
    flags = {"micro_ap": args.micro_ap, "lambda": args.lam, "crop_bins": args.crop_bins, "overlay_bins": args.overlay_bins}
    rc = RunConfig("report", args.out, inputs, flags)
    crop_bins, overlay_bins = _bins(args.crop_bins, CROP_BINS), _bins(args.overlay_bins, OVERLAY_BINS)
    man = _start(rc)
    aps = load_aps(args.aps)
    metadata = load_metadata(args.metadata) if args.metadata else None
    penalties = _fit(metadata, aps, args.lam) if metadata is not None else None
    rep = build_report(aps, metadata, micro_ap=args.micro_ap, penalties=penalties,
                       crop_bins=crop_bins, overlay_bins=overlay_bins)
    _finish(rc, man, render_report(rep, args.out))
    return EXIT_OK


COMPARE_METRICS = ("micro_ap", "mAP")


def cmd_compare(args) -> int:
    ys = args.y or args.x
    if len(ys) != len(args.x):
        raise InputError(f"{len(args.x)} --x reports but {len(ys)} --y reports")
    labels = args.labels.split(",") if args.labels else [f"{i}" for i in range(len(args.x))]
    if len(labels) != len(args.x):
        raise InputError("--labels must name every report pair")
    paths = [os.path.join(d, "report.json") for d in list(args.x) + list(ys)]
    rc = RunConfig("compare", args.out, {f"report{i}": p for i, p in enumerate(paths)}, {"labels": labels})
    man = _start(rc)
    t = Table("compare", ["label", "metric", "x", "y"])
    for lab, xd, yd in zip(labels, args.x, ys):
        xs, ysum = Report.load(xd).summary, Report.load(yd).summary
        for m in COMPARE_METRICS:
            t.rows.append({"label": lab, "metric": m, "x": xs.get(m), "y": ysum.get(m)})
    d = ensure_dir(os.path.join(args.out, "series"))
    p = os.path.join(d, "compare.csv")
    with open(p, "w", encoding="utf-8", newline="") as f:
        f.write(t.to_csv())
    _finish(rc, man, [p])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_bg(p, required=False):
    p.add_argument("--bg", required=required, help="background (training) descriptors")
    p.add_argument("--bg-n", type=int, default=10, help="background neighbors (default 10)")
    p.add_argument("--bg-beta", type=float, default=1.0, help="normalization strength (default 1)")


def _add_report_flags(p):
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA, help="ridge term of the penalty fit")
    p.add_argument("--crop-bins", help="comma-separated remaining-surface bin edges")
    p.add_argument("--overlay-bins", help="comma-separated overlay-fraction bin edges")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="copydet", description="Copy detection evaluation toolkit.")
    ap.add_argument("--version", action="version", version=f"copydet {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def threads(p):
        p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("config", help="JSON generator config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True)
    threads(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("eval-descriptor", help="kNN search then full evaluation (descriptor track)")
    p.add_argument("--queries", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metadata")
    p.add_argument("--k", type=int, default=10)
    _add_bg(p)
    p.add_argument("--mode", choices=("scores", "subtract", "rescale"), default="scores")
    p.add_argument("--max-dim", type=int, default=DEFAULT_MAX_DIM)
    _add_report_flags(p)
    p.add_argument("--out", required=True)
    threads(p)
    p.set_defaults(func=cmd_eval_descriptor)

    p = sub.add_parser("eval-matching", help="evaluate a candidate CSV (matching track)")
    p.add_argument("--candidates", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metadata")
    p.add_argument("--max-rows-in-memory", type=int, default=DEFAULT_ROW_BUDGET)
    _add_report_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_matching)

    p = sub.add_parser("normalize", help="normalize descriptors or candidate scores against a background set")
    p.add_argument("--input", required=True, help="descriptor file, or candidate CSV with --mode scores")
    p.add_argument("--queries", help="query descriptors (for --mode scores)")
    _add_bg(p, required=True)
    p.add_argument("--mode", choices=("scores", "subtract", "rescale"), required=True)
    p.add_argument("--max-dim", type=int, default=DEFAULT_MAX_DIM)
    p.add_argument("--out", required=True)
    threads(p)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("penalty", help="fit per-transformation penalties from per-query APs")
    p.add_argument("--aps", required=True, help="CSV query_id,ap")
    p.add_argument("--metadata", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_penalty)

    p = sub.add_parser("report", help="breakdown report from per-query APs")
    p.add_argument("--aps", required=True)
    p.add_argument("--metadata")
    p.add_argument("--micro-ap", type=float, default=None)
    _add_report_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="x/y series of summary metrics across report directories")
    p.add_argument("--x", nargs="+", required=True, help="report directories on the x axis")
    p.add_argument("--y", nargs="+", help="report directories on the y axis (default: same as --x)")
    p.add_argument("--labels", help="comma-separated point labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return ap


def _fail(kind: str, message: str, code: int, extra: dict | None = None) -> int:
    doc = {"error": kind, "message": message, "exit_code": code}
    if extra:
        doc.update(extra)
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        return _fail(e.kind, str(e), EXIT_INPUT, e.to_dict())
    except ComputationError as e:
        return _fail(e.kind, str(e), EXIT_COMPUTE, e.to_dict())
    except CopydetError as e:
        return _fail(e.kind, str(e), EXIT_COMPUTE, e.to_dict())
    except (OSError, UnicodeDecodeError) as e:
        return _fail("io", str(e), EXIT_INPUT)
    except (MemoryError, FloatingPointError, np.linalg.LinAlgError) as e:
        return _fail("computation", repr(e), EXIT_COMPUTE)


if __name__ == "__main__":
    sys.exit(main())
