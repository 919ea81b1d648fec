import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from copydet.cli import main
from copydet.io import file_sha256, load_aps, load_candidates, save_candidates, save_descriptors, save_ground_truth
from copydet.io import save_aps, save_metadata
from copydet.model import CandidateList, DescriptorSet, GroundTruth, QueryMetadata, TransformationStep

CONFIG = {"n_refs": 1500, "n_queries_matched": 300, "n_distractors": 150, "n_train": 400, "dim": 24,
          "seed": 3, "noise_sigma": 0.03}


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err if capsys else ""
    return code, err


def error_doc(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(CONFIG))
    assert main(["gen", str(cfg), "--out", str(root / "ds")]) == 0
    return root


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_gen_manifest(data):
    man = json.loads((data / "ds" / "manifest.json").read_text())
    assert man["status"] == "complete" and man["command"] == "gen"
    assert set(man["outputs"]) == {"refs.dsc", "queries.dsc", "train.dsc", "gt.csv", "metadata.jsonl"}
    for name, h in man["outputs"].items():
        assert h == file_sha256(data / "ds" / name)
    assert man["dataset"]["seed"] == 3
    assert man["inputs"]["config"]["sha256"] == file_sha256(data / "config.json")
    assert "timestamp" not in json.dumps(man)


def test_gen_seed_override_changes_output(data, tmp_path):
    assert main(["gen", str(data / "config.json"), "--seed", "4", "--out", str(tmp_path)]) == 0
    assert file_sha256(tmp_path / "queries.dsc") != file_sha256(data / "ds" / "queries.dsc")


def eval_args(data, out, *more):
    ds = data / "ds"
    return ["eval-descriptor", "--queries", ds / "queries.dsc", "--refs", ds / "refs.dsc", "--gt", ds / "gt.csv",
            "--metadata", ds / "metadata.jsonl", "--out", out, *more]


def test_eval_descriptor(data, tmp_path):
    assert main([str(a) for a in eval_args(data, tmp_path)]) == 0
    cands = load_candidates(tmp_path / "candidates.csv")
    assert len(cands) == 450 * 10
    assert all(n == 10 for n in np.unique(cands.query_ids, return_counts=True)[1])
    rep = json.loads((tmp_path / "report.json").read_text())
    aps = load_aps(tmp_path / "aps.csv")
    assert len(aps) == 300
    assert rep["summary"]["mAP"] == pytest.approx(sum(aps.values()) / 300, abs=1e-12)
    assert {"by_source", "by_edit_mode", "by_editor", "by_step_count", "penalties"} <= set(rep["tables"])
    assert os.path.isfile(tmp_path / "penalties.csv") and os.path.isfile(tmp_path / "series" / "pr_curve.csv")
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["status"] == "complete" and "candidates.csv" in man["outputs"]
    assert man["flags"]["k"] == 10


@pytest.mark.parametrize("mode", ["scores", "subtract", "rescale"])
def test_eval_with_background(data, tmp_path, mode):
    code = main([str(a) for a in eval_args(data, tmp_path, "--bg", data / "ds" / "train.dsc", "--mode", mode, "--k", "5")])
    assert code == 0
    assert len(load_candidates(tmp_path / "candidates.csv")) == 450 * 5


def test_eval_matching_matches_eval_descriptor(data, tmp_path):
    assert main([str(a) for a in eval_args(data, tmp_path / "d")]) == 0
    base = ["eval-matching", "--candidates", tmp_path / "d" / "candidates.csv", "--gt", data / "ds" / "gt.csv",
            "--metadata", data / "ds" / "metadata.jsonl"]
    assert main([str(a) for a in base + ["--out", tmp_path / "m"]]) == 0
    assert main([str(a) for a in base + ["--out", tmp_path / "s", "--max-rows-in-memory", "333"]]) == 0
    d = json.loads((tmp_path / "d" / "report.json").read_text())
    m = json.loads((tmp_path / "m" / "report.json").read_text())
    s = json.loads((tmp_path / "s" / "report.json").read_text())
    assert d["summary"]["mAP"] == m["summary"]["mAP"] == s["summary"]["mAP"]
    assert d["summary"]["micro_ap"] == m["summary"]["micro_ap"] == s["summary"]["micro_ap"]
    assert (tmp_path / "m" / "aps.csv").read_bytes() == (tmp_path / "s" / "aps.csv").read_bytes()
    assert m["tables"] == s["tables"]
    assert not [n for n in os.listdir(tmp_path / "s") if n.startswith("copydet-sort-")]


def test_streaming_with_ties(tmp_path):
    rng = np.random.default_rng(0)
    n = 2000
    q = [f"q{i % 97:03d}" for i in range(n)]
    r = [f"r{i // 97:03d}" for i in range(n)]
    s = rng.integers(0, 5, n).astype(float)
    save_candidates(CandidateList(q, r, s), tmp_path / "c.csv")
    save_ground_truth(GroundTruth({f"q{i:03d}": f"r{i % 15:03d}" for i in range(0, 97, 2)}), tmp_path / "gt.csv")
    for budget, out in ((10**9, "a"), (37, "b")):
        code = main(["eval-matching", "--candidates", str(tmp_path / "c.csv"), "--gt", str(tmp_path / "gt.csv"),
                     "--max-rows-in-memory", str(budget), "--out", str(tmp_path / out)])
        assert code == 0
    a = json.loads((tmp_path / "a" / "report.json").read_text())["summary"]
    b = json.loads((tmp_path / "b" / "report.json").read_text())["summary"]
    assert a == b


def test_duplicate_pair_exit_2(tmp_path, capsys):
    (tmp_path / "c.csv").write_text("query_id,reference_id,score\nq,r,0.5\nq,r,0.4\n")
    save_ground_truth(GroundTruth({"q": "r"}), tmp_path / "gt.csv")
    for budget in ("100", "1"):
        code, err = run(["eval-matching", "--candidates", tmp_path / "c.csv", "--gt", tmp_path / "gt.csv",
                         "--max-rows-in-memory", budget, "--out", tmp_path / f"o{budget}"], capsys)
        assert code == 2
        assert error_doc(err)["error"] == "duplicate_pair"


def test_input_errors_exit_2(data, tmp_path, capsys):
    code, err = run(eval_args(data, tmp_path / "a") + ["--k", "0"], capsys)
    assert code == 2 and error_doc(err)["exit_code"] == 2
    code, err = run(["eval-descriptor", "--queries", tmp_path / "nope.dsc", "--refs", data / "ds" / "refs.dsc",
                     "--gt", data / "ds" / "gt.csv", "--out", tmp_path / "b"], capsys)
    assert code == 2 and "nope.dsc" in error_doc(err)["message"]
    (tmp_path / "bad.dsc").write_bytes(b"garbage")
    code, err = run(["eval-descriptor", "--queries", tmp_path / "bad.dsc", "--refs", data / "ds" / "refs.dsc",
                     "--gt", data / "ds" / "gt.csv", "--out", tmp_path / "c"], capsys)
    assert code == 2 and error_doc(err)["error"] == "malformed_header"
    code, err = run(eval_args(data, tmp_path / "d", "--crop-bins", "0.5,0.1"), capsys)
    assert code == 2
    bad_cfg = tmp_path / "cfg.json"
    bad_cfg.write_text(json.dumps({"n_refs": 10, "whatever": 1}))
    code, err = run(["gen", bad_cfg, "--out", tmp_path / "e"], capsys)
    assert code == 2 and "whatever" in error_doc(err)["message"]
    code, err = run(["eval-descriptor", "--queries", data / "ds" / "queries.dsc", "--refs", data / "ds" / "train.dsc",
                     "--gt", data / "ds" / "gt.csv", "--out", tmp_path / "f"], capsys)
    assert code == 0  # ground truth refs need not be searched; their APs are 0
    (tmp_path / "meta.jsonl").write_text('{"query_id": "x", "source": "alien", "edit_mode": "manual"}\n')
    save_aps({"x": 0.5}, tmp_path / "aps.csv")
    code, err = run(["penalty", "--aps", tmp_path / "aps.csv", "--metadata", tmp_path / "meta.jsonl",
                     "--out", tmp_path / "g"], capsys)
    assert code == 2 and error_doc(err)["problems"][0]["line"] == 1


def test_computation_errors_exit_3(tmp_path, capsys):
    steps = (TransformationStep("blur", "L"), TransformationStep("crop", "G", 0.5))
    meta = [QueryMetadata(f"q{i}", "generic", "automatic", None, steps) for i in range(4)]
    save_metadata(meta, tmp_path / "m.jsonl")
    save_aps({f"q{i}": 0.5 for i in range(4)}, tmp_path / "aps.csv")
    code, err = run(["penalty", "--aps", tmp_path / "aps.csv", "--metadata", tmp_path / "m.jsonl",
                     "--lambda", "0", "--out", tmp_path / "p"], capsys)
    assert code == 3 and error_doc(err)["error"] == "singular_system"
    man = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert man["status"] == "running"  # written before the failure, never completed
    assert main(["penalty", "--aps", str(tmp_path / "aps.csv"), "--metadata", str(tmp_path / "m.jsonl"),
                 "--out", str(tmp_path / "p2")]) == 0
    # subtracting the only background vector from itself leaves nothing to normalize
    v = DescriptorSet(["a"], np.array([[1.0, 0.0]], np.float32))
    save_descriptors(v, tmp_path / "v.dsc")
    code, err = run(["normalize", "--input", tmp_path / "v.dsc", "--bg", tmp_path / "v.dsc", "--bg-n", "1",
                     "--mode", "subtract", "--out", tmp_path / "n"], capsys)
    assert code == 3 and error_doc(err)["exit_code"] == 3


def test_normalize_command(data, tmp_path):
    ds = data / "ds"
    for mode in ("subtract", "rescale"):
        assert main(["normalize", "--input", str(ds / "queries.dsc"), "--bg", str(ds / "train.dsc"),
                     "--mode", mode, "--out", str(tmp_path / mode)]) == 0
        assert os.path.getsize(tmp_path / mode / "descriptors.dsc") == os.path.getsize(ds / "queries.dsc")
    assert main([str(a) for a in eval_args(data, tmp_path / "e")]) == 0
    assert main(["normalize", "--input", str(tmp_path / "e" / "candidates.csv"), "--queries", str(ds / "queries.dsc"),
                 "--bg", str(ds / "train.dsc"), "--mode", "scores", "--out", str(tmp_path / "s")]) == 0
    assert len(load_candidates(tmp_path / "s" / "candidates.csv")) == 4500
    assert main(["normalize", "--input", str(tmp_path / "e" / "candidates.csv"), "--bg", str(ds / "train.dsc"),
                 "--mode", "scores", "--out", str(tmp_path / "x")]) == 2


def test_penalty_and_report_commands(data, tmp_path):
    assert main([str(a) for a in eval_args(data, tmp_path / "e")]) == 0
    assert main(["penalty", "--aps", str(tmp_path / "e" / "aps.csv"), "--metadata", str(data / "ds" / "metadata.jsonl"),
                 "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "penalties.csv").read_bytes() == (tmp_path / "e" / "penalties.csv").read_bytes()
    assert main(["report", "--aps", str(tmp_path / "e" / "aps.csv"), "--metadata", str(data / "ds" / "metadata.jsonl"),
                 "--micro-ap", "0.25", "--out", str(tmp_path / "r")]) == 0
    a = json.loads((tmp_path / "e" / "report.json").read_text())
    b = json.loads((tmp_path / "r" / "report.json").read_text())
    assert a["tables"] == b["tables"]
    assert b["summary"]["micro_ap"] == 0.25


def test_compare(data, tmp_path):
    for name, more in (("a", []), ("b", ["--bg", data / "ds" / "train.dsc"])):
        assert main([str(a) for a in eval_args(data, tmp_path / name, *more)]) == 0
    assert main(["compare", "--x", str(tmp_path / "a"), "--y", str(tmp_path / "b"), "--labels", "raw_vs_norm",
                 "--out", str(tmp_path / "c")]) == 0
    rows = read_csv(tmp_path / "c" / "series" / "compare.csv")
    assert [(r["label"], r["metric"]) for r in rows] == [("raw_vs_norm", "micro_ap"), ("raw_vs_norm", "mAP")]
    assert main(["compare", "--x", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "d")]) == 0
    rows = read_csv(tmp_path / "d" / "series" / "compare.csv")
    assert len(rows) == 4 and all(r["x"] == r["y"] for r in rows)
    assert main(["compare", "--x", str(tmp_path / "a"), "--y", str(tmp_path / "a"), str(tmp_path / "b"),
                 "--out", str(tmp_path / "e")]) == 2


def test_threads_env_and_flag_agree(data, tmp_path, monkeypatch):
    assert main([str(a) for a in eval_args(data, tmp_path / "one", "--threads", "1")]) == 0
    monkeypatch.setenv("COPYDET_THREADS", "3")
    assert main([str(a) for a in eval_args(data, tmp_path / "env")]) == 0
    for f in ("candidates.csv", "aps.csv", "report.json"):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "env" / f).read_bytes()
    monkeypatch.setenv("COPYDET_THREADS", "zero")
    assert main([str(a) for a in eval_args(data, tmp_path / "bad")]) == 2


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "copydet.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("copydet ")
    out = subprocess.run([sys.executable, "-m", "copydet.cli", "report", "--aps", str(tmp_path / "missing.csv"),
                          "--out", str(tmp_path / "r")], capture_output=True, text=True)
    assert out.returncode == 2
    assert json.loads(out.stderr)["exit_code"] == 2


def test_empty_candidates_report(tmp_path):
    (tmp_path / "c.csv").write_text("query_id,reference_id,score\n")
    save_ground_truth(GroundTruth({"q": "r"}), tmp_path / "gt.csv")
    assert main(["eval-matching", "--candidates", str(tmp_path / "c.csv"), "--gt", str(tmp_path / "gt.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    s = json.loads((tmp_path / "o" / "report.json").read_text())["summary"]
    assert s["micro_ap"] == 0.0 and s["mAP"] == 0.0 and s["n_candidates"] == 0


def test_zero_perturbation_gives_one(tmp_path):
    from copydet.synth import DEFAULT_PENALTIES

    cfg = dict(CONFIG, noise_sigma=0.0, manual_fraction=0.0, n_distractors=0,
               planted_penalties={n: 0.0 for n in DEFAULT_PENALTIES})
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["gen", str(tmp_path / "c.json"), "--out", str(tmp_path / "ds")]) == 0
    ds = tmp_path / "ds"
    assert main(["eval-descriptor", "--queries", str(ds / "queries.dsc"), "--refs", str(ds / "refs.dsc"),
                 "--gt", str(ds / "gt.csv"), "--out", str(tmp_path / "e")]) == 0
    s = json.loads((tmp_path / "e" / "report.json").read_text())["summary"]
    assert s["micro_ap"] == 1.0 and s["mAP"] == 1.0


def test_subtract_improves_biased_data(tmp_path):
    from copydet.synth import clustered_instance

    b = clustered_instance(0, n_refs=2000, n_matched=400, n_distractors=400, n_train=2000)
    save_descriptors(b.queries, tmp_path / "q.dsc")
    save_descriptors(b.refs, tmp_path / "r.dsc")
    save_descriptors(b.train, tmp_path / "t.dsc")
    save_ground_truth(b.gt, tmp_path / "gt.csv")
    base = ["eval-descriptor", "--queries", str(tmp_path / "q.dsc"), "--refs", str(tmp_path / "r.dsc"),
            "--gt", str(tmp_path / "gt.csv")]
    assert main(base + ["--out", str(tmp_path / "raw")]) == 0
    assert main(base + ["--bg", str(tmp_path / "t.dsc"), "--mode", "subtract", "--out", str(tmp_path / "sub")]) == 0
    raw = json.loads((tmp_path / "raw" / "report.json").read_text())["summary"]["micro_ap"]
    sub = json.loads((tmp_path / "sub" / "report.json").read_text())["summary"]["micro_ap"]
    assert sub > raw + 0.1
