import json

import pytest
import yaml

from nnbr.cli import cmd_report, main, significance_marker
from nnbr.data import corpus_stats, read_corpus
from nnbr.evaluation import TTest

TINY = {
    "dataset": {"synthetic": {"n_users": 80, "n_items": 30, "n_clusters": 3, "max_baskets": 6,
                              "mean_basket_size": 3, "max_basket_size": 5}},
    "preprocess": {"min_baskets": 3, "max_baskets": 6},
    "model": {"embed_dim": 8, "layers": 1, "heads": 2, "max_len": 24, "dropout": 0.0},
    "train": {"mask": {"strategy": "item_select", "mask_ratio": 0.5}, "batch_size": 16,
              "max_epochs": 2, "patience": 2, "learning_rate": 0.003},
    "ks": [5, 10],
    "repetitions": 1,
}


@pytest.fixture
def config(tmp_path):
    def make(name="exp", **over):
        d = {**json.loads(json.dumps(TINY)), "output_dir": str(tmp_path / "runs"), **over}
        p = tmp_path / f"{name}.yaml"
        p.write_text(yaml.safe_dump(d))
        return p
    return make


def run_dir(tmp_path, name="exp"):
    return tmp_path / "runs" / name


def test_prepare_writes_corpus_and_stats(config, tmp_path):
    cfg = config()
    assert main(["prepare", str(cfg)]) == 0
    d = run_dir(tmp_path) / "data"
    stats = json.loads((d / "stats.json").read_text())
    recomputed = corpus_stats(read_corpus(d / "corpus.tsv")).to_dict()
    assert {k: stats[k] for k in recomputed} == recomputed
    assert len(stats["config_hash"]) == 12
    assert (d / "corpus.idmap.tsv").exists()
    # refuses to overwrite, then obeys --force
    assert main(["prepare", str(cfg)]) == 1
    assert main(["prepare", str(cfg), "--force"]) == 0


def test_config_errors_exit_2(config, tmp_path, capsys):
    cfg = config()
    main(["prepare", str(cfg)])
    code = main(["train", str(cfg), "--set", "train.mask.strategy=basket_all",
                 "--set", "train.mask.mask_ratio=null", "--set", "train.swap.swap_ratio=0.3"])
    assert code == 2
    assert "swap" in capsys.readouterr().err
    assert main(["train", str(cfg), "--set", "model.embed_dim=7"]) == 2
    assert not (run_dir(tmp_path) / "rep0").exists()


def test_train_missing_corpus(config):
    assert main(["train", str(config())]) == 1


def test_train_logs_are_byte_identical(config, tmp_path):
    a, b = config("a"), config("b")
    for c in (a, b):
        assert main(["prepare", str(c)]) == 0
        assert main(["train", str(c)]) == 0
    la = (run_dir(tmp_path, "a") / "rep0" / "metrics.jsonl").read_bytes()
    lb = (run_dir(tmp_path, "b") / "rep0" / "metrics.jsonl").read_bytes()
    # identical apart from the header, whose config hash covers the run name
    assert la.split(b"\n", 1)[1] == lb.split(b"\n", 1)[1]
    assert main(["train", str(a), "--force"]) == 0
    assert (run_dir(tmp_path, "a") / "rep0" / "metrics.jsonl").read_bytes() == la
    assert main(["train", str(a)]) == 1  # checkpoint exists


def test_joint_config_two_phase_log(config, tmp_path):
    cfg = config(finetune={"mask": {"strategy": "basket_all"}, "max_epochs": 1, "batch_size": 16})
    main(["prepare", str(cfg)])
    assert main(["train", str(cfg)]) == 0
    lines = (run_dir(tmp_path) / "rep0" / "metrics.jsonl").read_text().splitlines()
    phases = [json.loads(x)["phase"] for x in lines[1:]]
    assert phases == ["pretrain", "pretrain", "finetune"]


def test_evaluate_deterministic_and_vocab_checked(config, tmp_path):
    cfg = config(repetitions=2)
    main(["prepare", str(cfg)])
    main(["train", str(cfg)])
    assert main(["evaluate", str(cfg)]) == 0
    out = run_dir(tmp_path) / "results" / "btbr-item_select.json"
    first = out.read_bytes()
    assert main(["evaluate", str(cfg)]) == 0
    assert out.read_bytes() == first
    rec = json.loads(first)
    assert [r["rep"] for r in rec["repetitions"]] == [0, 1]
    assert [r["seed"] for r in rec["repetitions"]] == [0, 1]
    # a corpus with a different vocabulary must not accept these checkpoints
    other = config("other", dataset={"synthetic": {**TINY["dataset"]["synthetic"], "n_items": 40}})
    main(["prepare", str(other)])
    assert main(["evaluate", str(other), "--checkpoint-dir", str(run_dir(tmp_path))]) == 2


def test_baseline_five_reps_and_mean(config, tmp_path):
    cfg = config("rho0", repetitions=5,
                 dataset={"synthetic": {**TINY["dataset"]["synthetic"], "repeat_prob": 0.0, "n_items": 60}})
    main(["prepare", str(cfg)])
    assert main(["baseline", str(cfg), "--name", "g_topfreq"]) == 0
    rec = json.loads((run_dir(tmp_path, "rho0") / "results" / "g_topfreq.json").read_text())
    assert len(rec["repetitions"]) == 5
    means = [r["recall"]["10"] for r in rec["repetitions"]]
    assert rec["mean"]["recall"]["10"] == pytest.approx(sum(means) / 5, abs=1e-15)
    assert rec["mean"]["recall"]["10"] > 0
    assert main(["baseline", str(cfg), "--name", "tifuknn", "--label-mode", "explore"]) == 0
    assert (run_dir(tmp_path, "rho0") / "results" / "tifuknn-explore.json").exists()


def sweep_args(cfg):
    return ["sweep", str(cfg), "--param", "train.swap.swap_ratio=0.0,0.1,0.2,0.3,0.4",
            "--param", "train.swap.swap_hop=1,2,3,4,5", "--set", "train.max_epochs=1"]


def test_sweep_grid_and_resume_equivalence(config, tmp_path):
    fresh, resumed = config("fresh"), config("resumed")
    for c in (fresh, resumed):
        main(["prepare", str(c)])
    assert main(sweep_args(fresh)) == 0
    table = (run_dir(tmp_path, "fresh") / "sweep" / "results.csv").read_text().splitlines()
    assert len(table) == 1 + 25
    assert table[0].startswith("swap_ratio,swap_hop,recall@5")

    assert main(sweep_args(resumed) + ["--max-cells", "7"]) == 0
    manifest = json.loads((run_dir(tmp_path, "resumed") / "sweep" / "manifest.json").read_text())
    assert len(manifest["completed"]) == 7 and manifest["total"] == 25
    assert main(sweep_args(resumed)) == 0
    resumed_table = (run_dir(tmp_path, "resumed") / "sweep" / "results.csv").read_text().splitlines()
    assert resumed_table == table

    # the report reshapes the sweep into a (ratio, hop) grid
    report = cmd_report(run_dir(tmp_path, "fresh"))
    grid = (report.parent / "heatmap_fresh_recall10.csv").read_text().splitlines()
    assert grid[0] == "swap_ratio\\swap_hop,1,2,3,4,5"
    assert len(grid) == 6


def test_sweep_rejects_invalid_cell_before_compute(config, tmp_path):
    cfg = config()
    main(["prepare", str(cfg)])
    code = main(["sweep", str(cfg), "--param", "train.mask.mask_ratio=0.5,1.5"])
    assert code == 2
    assert not list((run_dir(tmp_path) / "sweep" / "cells").glob("*.json"))


def test_report_markers_and_recomputation(config, tmp_path):
    cfg = config(repetitions=2)
    main(["prepare", str(cfg)])
    main(["train", str(cfg)])
    main(["evaluate", str(cfg)])
    main(["baseline", str(cfg)])
    root = run_dir(tmp_path)
    report = cmd_report(root, reference="g_topfreq")
    text = report.read_text()
    btbr = json.loads((root / "results" / "btbr-item_select.json").read_text())
    row = next(line for line in text.splitlines() if line.startswith("| btbr-item_select"))
    cells = row.strip("| ").split(" | ")
    assert cells[1].rstrip("↑↓") == f"{btbr['mean']['recall']['5']:.4f}"
    summary = json.loads((report.parent / "report.json").read_text())
    assert summary["methods"]["btbr-item_select"] == btbr["mean"]
    sig = summary["significance"]["btbr-item_select"]["recall@5"]
    assert [s["rep"] for s in sig] == [0, 1]
    assert (report.parent / "training_curves.csv").exists()
    assert "↑" in text or "↓" in text or all(s["p"] >= 0.05 for s in sig)


def test_report_missing_reference_warns(config, tmp_path):
    cfg = config()
    main(["prepare", str(cfg)])
    main(["baseline", str(cfg)])
    with pytest.warns(UserWarning, match="reference"):
        report = cmd_report(run_dir(tmp_path), reference="nope")
    assert "↑" not in report.read_text() and "significant" not in report.read_text()


def test_significance_marker_rules():
    up, down, flat = TTest(3.0, 0.01), TTest(-3.0, 0.01), TTest(0.5, 0.6)
    assert significance_marker([up, up]) == "↑"
    assert significance_marker([down]) == "↓"
    assert significance_marker([up, flat]) == ""
    assert significance_marker([up, down]) == ""
    assert significance_marker([]) == ""
