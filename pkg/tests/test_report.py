import math
import os

import numpy as np
import pytest

from copydet.errors import EmptyInputError
from copydet.metrics import micro_ap
from copydet.model import CandidateList, GroundTruth, QueryMetadata, default_registry
from copydet.report import (
    Report,
    attack_model_table,
    breakdown_by_edit_mode,
    breakdown_by_editor,
    breakdown_by_source,
    breakdown_by_step_count,
    breakdown_by_transformation,
    build_report,
    crop_overlay_curves,
    partition_errors,
    render_report,
)
from copydet.synth import DEFAULT_EDITORS, SynthConfig, sample_population

REG = default_registry()


def population(**kw):
    base = dict(n_refs=10000, n_queries_matched=10000, n_distractors=0, n_train=0, seed=0, n_adversarial=1201)
    base.update(kw)
    pop = sample_population(SynthConfig(**base))
    aps = {q: min(1.0, max(0.0, a)) for q, a in pop.target_ap.items()}
    return pop.metadata, aps


@pytest.fixture(scope="module")
def replay():
    return population()


def rows(t):
    return {r["group"]: r["n"] for r in t.rows}


def test_source_and_mode_splits(replay):
    meta, aps = replay
    assert rows(breakdown_by_source(aps, meta)) == {"generic": 9500, "face": 500}
    assert rows(breakdown_by_edit_mode(aps, meta)) == {"automatic": 5960, "manual": 4040}
    assert [r["group"] for r in breakdown_by_source(aps, meta).rows] == ["generic", "face"]


def test_editor_breakdown(replay):
    meta, aps = replay
    t = breakdown_by_editor(aps, meta)
    assert len(t.rows) == 11 and t.meta["population"] == 4040
    assert rows(t) == {e: c for e, c in DEFAULT_EDITORS.items()}
    ns = [r["n"] for r in t.rows]
    assert ns == sorted(ns, reverse=True)
    manual = {m.query_id: m.editor_id for m in meta if m.edit_mode == "manual"}
    for r in t.rows:
        vals = [aps[q] for q, e in manual.items() if e == r["group"]]
        assert r["mAP"] == pytest.approx(math.fsum(vals) / len(vals), abs=1e-12)


def test_attack_models(replay):
    meta, aps = replay
    t = attack_model_table(aps, meta)
    assert rows(t) == dict(REG.attack_models)
    assert t.meta["population"] == 1201


def test_partition_invariant(replay):
    meta, aps = replay
    rep = build_report(aps, meta)
    assert {"by_source", "by_edit_mode", "by_editor", "by_step_count", "by_transformation",
            "by_attack_model", "crop_surface", "overlay_fraction"} <= set(rep.tables)
    assert partition_errors(rep) == []
    assert rep.summary["n_queries"] == 10000
    src = rep.tables["by_source"]
    w = math.fsum(r["n"] * r["mAP"] for r in src.rows) / 10000
    assert abs(w - rep.summary["mAP"]) <= 1e-12
    bad = Report.from_dict(rep.to_dict())
    bad.tables["by_source"].rows[0]["n"] -= 1
    assert partition_errors(bad)


def test_transformation_rows_overlap(replay):
    meta, aps = replay
    t = breakdown_by_transformation(aps, meta)
    assert t.meta["partition"] is False
    total_steps = sum(len(m.steps) for m in meta if m.query_id in aps)
    assert sum(r["n"] for r in t.rows) == total_steps


def test_step_count_order(replay):
    meta, aps = replay
    t = breakdown_by_step_count(aps, meta)
    assert [r["group"] for r in t.rows] == [2, 3, 4, 5, 6]
    vals = [r["mAP"] for r in t.rows]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_face_penalty_lowers_face_map():
    meta, aps = population(face_penalty=0.2, n_adversarial=None)
    t = {r["group"]: r["mAP"] for r in breakdown_by_source(aps, meta).rows}
    assert t["face"] < t["generic"] - 0.1
    meta, aps = population(n_adversarial=None)
    t = {r["group"]: r["mAP"] for r in breakdown_by_source(aps, meta).rows}
    assert abs(t["face"] - t["generic"]) < 0.05


def test_intensity_curves_monotone():
    meta, aps = population(intensity_slope=1.0, n_adversarial=None, manual_fraction=0.0,
                           n_refs=30000, n_queries_matched=30000)
    crop, overlay = crop_overlay_curves(aps, meta)
    c = [r["mAP"] for r in crop.rows]
    o = [r["mAP"] for r in overlay.rows]
    assert [r["group"] for r in crop.rows] == ["[0,0.06]", "(0.06,0.12]", "(0.12,0.25]", "(0.25,0.5]", "(0.5,1]"]
    # less remaining surface is harder, more non-source content is harder
    assert all(b > a for a, b in zip(c, c[1:]))
    assert all(b < a for a, b in zip(o, o[1:]))
    assert crop.meta["edges"] == [0.0, 0.06, 0.12, 0.25, 0.5, 1.0]
    with pytest.raises(EmptyInputError):
        crop_overlay_curves(aps, meta, crop_bins=(0.5, 0.2))


def test_custom_bins_and_series(replay):
    meta, aps = replay
    rep = build_report(aps, meta, crop_bins=(0, 0.5, 1))
    s = rep.series["crop_surface"]
    assert [r["x"] for r in s.rows] == [0.25, 0.75]
    assert rep.series["step_count"].rows[0]["x"] == 2


def test_json_roundtrip_and_render(tmp_path, replay):
    meta, aps = replay
    q = list(aps)[:3]
    c = CandidateList(q, ["r"] * 3, [0.3, 0.2, 0.1])
    mu, curve = micro_ap(c, GroundTruth({x: "r" for x in q}))
    rep = build_report(aps, meta, micro_ap=mu, pr_curve=curve)
    back = Report.from_dict(__import__("json").loads(rep.to_json()))
    assert back.to_json() == rep.to_json()
    paths = render_report(rep, tmp_path / "a")
    render_report(rep, tmp_path / "b")
    for p in paths:
        rel = os.path.relpath(p, tmp_path / "a")
        assert open(p, "rb").read() == open(tmp_path / "b" / rel, "rb").read()
    for name, t in rep.tables.items():
        lines = open(tmp_path / "a" / "tables" / f"{name}.csv").read().splitlines()
        assert len(lines) == len(t.rows) + 1
    assert len(open(tmp_path / "a" / "series" / "pr_curve.csv").read().splitlines()) == 4
    assert Report.load(tmp_path / "a").to_json() == rep.to_json()


def test_reports_without_metadata(tmp_path):
    rep = build_report({"a": 1.0, "b": 0.0}, micro_ap=0.5)
    assert rep.tables == {} and rep.summary == {"n_queries": 2, "mAP": 0.5, "micro_ap": 0.5}
    empty = build_report({})
    assert empty.summary["mAP"] is None
    assert render_report(empty, tmp_path) == [str(tmp_path / "report.json")]
    meta = [QueryMetadata("z", "generic", "manual", "E1")]
    assert build_report({"a": 1.0}, meta).tables == {}
