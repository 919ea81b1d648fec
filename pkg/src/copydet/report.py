"""Breakdown reports: mAP per query group, written as JSON and CSV.

Reports never draw anything. Curves are emitted as x/y series for external
plotting.
"""

from __future__ import annotations

import json
import math
import os
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from .errors import EmptyInputError
from .metrics import PrCurve, mean_ap
from .model import PenaltyModel, QueryMetadata, Registry, default_registry
from .penalty import (
    CROP_BINS,
    OVERLAY_BINS,
    bin_labels,
    by_attack_model,
    by_intensity_bucket,
    by_intensity_kind,
    by_step_count,
    by_transformation,
    marginalized_map,
    penalty_table,
)
from .table import Table
from .io import ensure_dir


@dataclass
class Report:
    tables: dict[str, Table] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    series: dict[str, Table] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "summary": self.summary,
            "tables": {k: self.tables[k].to_dict() for k in sorted(self.tables)},
            "series": {k: self.series[k].to_dict() for k in sorted(self.series)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "Report":
        return cls(
            tables={k: Table.from_dict(v) for k, v in d.get("tables", {}).items()},
            summary=dict(d.get("summary", {})),
            series={k: Table.from_dict(v) for k, v in d.get("series", {}).items()},
        )

    @classmethod
    def load(cls, path) -> "Report":
        if os.path.isdir(path):
            path = os.path.join(path, "report.json")
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _population(aps: Mapping[str, float], metadata: Iterable[QueryMetadata], keep) -> dict[str, float]:
    """APs of the queries that have metadata and satisfy ``keep``."""
    out = {}
    for m in metadata:
        if m.query_id in aps and keep(m):
            out[m.query_id] = aps[m.query_id]
    return out


def _partition(name, aps, metadata, group_fn, keep=lambda m: True, order=None) -> Table:
    """Group table whose groups partition the kept population; meta records that population."""
    metadata = list(metadata)
    pop = _population(aps, metadata, keep)
    if not pop:
        return Table(name, ["group", "n", "mAP"], [], {"partition": True, "population": 0, "population_mAP": None})
    t = marginalized_map(
        [m for m in metadata if m.query_id in pop], pop, group_fn, name=name, order=order
    )
    t.meta.update({"partition": True, "population": len(pop), "population_mAP": mean_ap(pop).value})
    return t


def breakdown_by_source(aps: Mapping[str, float], metadata: Iterable[QueryMetadata]) -> Table:
    """face vs generic queries."""
    return _partition("by_source", aps, metadata, lambda m: m.source)


def breakdown_by_edit_mode(aps: Mapping[str, float], metadata: Iterable[QueryMetadata]) -> Table:
    """manual vs automatic edits."""
    return _partition("by_edit_mode", aps, metadata, lambda m: m.edit_mode)


def breakdown_by_editor(aps: Mapping[str, float], metadata: Iterable[QueryMetadata]) -> Table:
    """Manual queries per editor, largest editor first."""
    return _partition("by_editor", aps, metadata, lambda m: m.editor_id, keep=lambda m: m.edit_mode == "manual")


def breakdown_by_step_count(aps: Mapping[str, float], metadata: Iterable[QueryMetadata]) -> Table:
    metadata = list(metadata)
    keep = lambda m: m.edit_mode == "automatic" and bool(m.steps)  # noqa: E731
    pop = _population(aps, metadata, keep)
    order = sorted({len(m.steps) for m in metadata if m.query_id in pop})
    return _partition("by_step_count", aps, metadata, by_step_count, keep=keep, order=order)


def breakdown_by_transformation(aps: Mapping[str, float], metadata: Iterable[QueryMetadata]) -> Table:
    """One row per transformation; a query counts in every row of its sequence."""
    metadata = list(metadata)
    pop = _population(aps, metadata, lambda m: bool(m.steps))
    if not pop:
        return Table("by_transformation", ["group", "n", "mAP"], [], {"partition": False})
    t = marginalized_map([m for m in metadata if m.query_id in pop], pop, by_transformation, name="by_transformation")
    t.meta["partition"] = False
    return t


def crop_overlay_curves(
    aps: Mapping[str, float],
    metadata: Iterable[QueryMetadata],
    crop_bins: Sequence[float] = CROP_BINS,
    overlay_bins: Sequence[float] = OVERLAY_BINS,
    registry: Registry | None = None,
) -> tuple[Table, Table]:
    """mAP per remaining-surface bin of crop, and per non-source-fraction bin of overlays.

    Rows follow bin order; empty bins are left out.
    """
    registry = registry or default_registry()
    metadata = list(metadata)
    out = []
    for name, edges, fn, kind in (
        ("crop_surface", crop_bins, by_intensity_bucket("crop", crop_bins), "remaining_surface"),
        ("overlay_fraction", overlay_bins, by_intensity_kind("non_source_fraction", overlay_bins, registry), "non_source_fraction"),
    ):
        edges = [float(e) for e in edges]
        if any(b <= a for a, b in zip(edges, edges[1:])) or len(edges) < 2:
            raise EmptyInputError(f"{name}: bin edges must be strictly increasing, got {edges}")
        keep = lambda m, fn=fn: fn(m) is not None  # noqa: E731
        t = _partition(name, aps, metadata, fn, keep=keep, order=bin_labels(edges))
        t.meta.update({"edges": edges, "intensity": kind})
        out.append(t)
    return out[0], out[1]


def attack_model_table(aps: Mapping[str, float], metadata: Iterable[QueryMetadata]) -> Table:
    """Adversarially attacked queries per attack model."""
    return _partition(
        "by_attack_model", aps, metadata, by_attack_model, keep=lambda m: m.attack_model is not None
    )


def _curve_series(name: str, t: Table) -> Table:
    edges = t.meta["edges"]
    labels = bin_labels(edges)
    mid = {lab: (edges[i] + edges[i + 1]) / 2 for i, lab in enumerate(labels)}
    s = Table(name, ["bin", "x", "mAP", "n"])
    for r in t.rows:
        s.rows.append({"bin": r["group"], "x": mid[r["group"]], "mAP": r["mAP"], "n": r["n"]})
    return s


def pr_series(curve: PrCurve, name: str = "pr_curve") -> Table:
    t = Table(name, ["rank", "precision", "recall"])
    t.rows = [{"rank": p.rank, "precision": p.precision, "recall": p.recall} for p in curve]
    return t


def build_report(
    aps: Mapping[str, float],
    metadata: Iterable[QueryMetadata] | None = None,
    *,
    micro_ap: float | None = None,
    pr_curve: PrCurve | None = None,
    penalties: PenaltyModel | None = None,
    crop_bins: Sequence[float] = CROP_BINS,
    overlay_bins: Sequence[float] = OVERLAY_BINS,
    registry: Registry | None = None,
    extra_summary: Mapping | None = None,
) -> Report:
    """Every breakdown the metadata supports, plus the global summary."""
    rep = Report()
    rep.summary = {"n_queries": len(aps), "mAP": mean_ap(aps).value if aps else None, "micro_ap": micro_ap}
    if extra_summary:
        rep.summary.update(extra_summary)
    if pr_curve is not None:
        rep.series["pr_curve"] = pr_series(pr_curve)
    if metadata is None:
        return rep
    metadata = list(metadata)
    if not _population(aps, metadata, lambda m: True):
        return rep
    for t in (
        breakdown_by_source(aps, metadata),
        breakdown_by_edit_mode(aps, metadata),
        breakdown_by_editor(aps, metadata),
        breakdown_by_step_count(aps, metadata),
        breakdown_by_transformation(aps, metadata),
        attack_model_table(aps, metadata),
        *crop_overlay_curves(aps, metadata, crop_bins, overlay_bins, registry),
    ):
        if t.rows:
            rep.tables[t.name] = t
    for name in ("crop_surface", "overlay_fraction"):
        if name in rep.tables:
            rep.series[name] = _curve_series(name, rep.tables[name])
    if "by_step_count" in rep.tables:
        s = Table("step_count", ["x", "mAP", "n"])
        s.rows = [{"x": r["group"], "mAP": r["mAP"], "n": r["n"]} for r in rep.tables["by_step_count"].rows]
        rep.series["step_count"] = s
    if penalties is not None:
        rep.tables["penalties"] = penalty_table(penalties, registry)
    return rep


def partition_errors(rep: Report) -> list[str]:
    """Problems with any partition table: n not summing up, or weighted mAP off by > 1e-12."""
    out = []
    for name, t in sorted(rep.tables.items()):
        if not t.meta.get("partition"):
            continue
        total = sum(r["n"] for r in t.rows)
        if total != t.meta["population"]:
            out.append(f"{name}: n sums to {total}, population is {t.meta['population']}")
            continue
        w = math.fsum(r["n"] * r["mAP"] for r in t.rows) / total
        if abs(w - t.meta["population_mAP"]) > 1e-12:
            out.append(f"{name}: weighted mAP {w!r} != population mAP {t.meta['population_mAP']!r}")
    return out


def render_report(rep: Report, outdir, formats: Iterable[str] = ("json", "csv", "series")) -> list[str]:
    """Write ``report.json``, ``tables/<name>.csv`` and ``series/<name>.csv``; returns the paths."""
    formats = set(formats)
    ensure_dir(outdir)
    written = []
    if "json" in formats:
        p = os.path.join(outdir, "report.json")
        with open(p, "w", encoding="utf-8", newline="") as f:
            f.write(rep.to_json())
        written.append(p)
    for fmt, items, sub in (("csv", rep.tables, "tables"), ("series", rep.series, "series")):
        if fmt not in formats or not items:
            continue
        d = ensure_dir(os.path.join(outdir, sub))
        for name in sorted(items):
            p = os.path.join(d, f"{name}.csv")
            with open(p, "w", encoding="utf-8", newline="") as f:
                f.write(items[name].to_csv())
            written.append(p)
    return written
