"""Command line: ``nnbr {prepare,train,evaluate,baseline,sweep,report}``.

Every command takes an experiment YAML; ``--set a.b=value`` overrides single
fields. Outputs go under ``<output_dir>/<name>/``::

    data/corpus.tsv, data/corpus.idmap.tsv, data/stats.json   prepare
    rep<i>/checkpoint.pt, rep<i>/metrics.jsonl                 train
    results/<method>.json                                      evaluate, baseline
    sweep/cells/*.json, sweep/manifest.json, sweep/results.csv sweep
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from nnbr.config import ConfigError, apply_overrides, dump_config, from_dict, load_config
from nnbr.data import CorpusError, corpus_stats, write_corpus
from nnbr.evaluation import EvalResult, evaluate_model, paired_t_test
from nnbr.experiments import (
    atomic_write_json, atomic_write_text, baseline_rep, build_corpus, corpus_path, load_prepared,
    method_name, rep_dir, result_record, train_rep,
)
from nnbr.data import split_users
from nnbr.model import ModelConfigError, load_checkpoint, save_checkpoint

log = logging.getLogger("nnbr")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(cfg, force: bool = False) -> dict:
    out = corpus_path(cfg)
    if out.exists() and not force:
        raise CommandError(f"{out} exists; pass --force to overwrite")
    corpus = build_corpus(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, out)
    stats = {"config_hash": cfg.hash(), **corpus_stats(corpus).to_dict()}
    atomic_write_json(out.parent / "stats.json", stats)
    dump_config(cfg, cfg.run_dir / "config.yaml")
    log.info("prepared %d users, %d items -> %s", stats["n_users"], stats["n_items"], out)
    return stats


def metrics_log_text(cfg, rep: int, history) -> str:
    header = json.dumps({"config_hash": cfg.hash(), "rep": rep, "seed": cfg.seed + rep,
                         "method": method_name(cfg)})
    return "\n".join([header, *history.log_lines()]) + "\n"


def cmd_train(cfg, force: bool = False) -> list:
    corpus = load_prepared(cfg)
    paths = []
    for rep in range(cfg.repetitions):
        d = rep_dir(cfg, rep)
        ckpt = d / "checkpoint.pt"
        if ckpt.exists() and not force:
            raise CommandError(f"{ckpt} exists; pass --force to retrain")
        d.mkdir(parents=True, exist_ok=True)
        model, history = train_rep(cfg, corpus, rep)
        save_checkpoint(ckpt, model, cfg.seed + rep, meta={
            "config_hash": cfg.hash(),
            "method": method_name(cfg),
            "rep": rep,
            "best_epoch": history.best["epoch"],
            "phase_boundary": history.phase_boundary,
        })
        atomic_write_text(d / "metrics.jsonl", metrics_log_text(cfg, rep, history))
        log.info("rep %d: best epoch %d, val R@10 %.4f", rep, history.best["epoch"],
                 history.best["val_recall@10"])
        paths.append(ckpt)
    return paths


def _write_result(cfg, method: str, per_rep) -> Path:
    record = result_record(cfg, method, per_rep)
    out = cfg.run_dir / "results" / f"{method}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out, record)
    return out


def cmd_evaluate(cfg, checkpoint_dir: Path | None = None) -> Path:
    corpus = load_prepared(cfg)
    base = Path(checkpoint_dir) if checkpoint_dir else cfg.run_dir
    per_rep = []
    for rep in range(cfg.repetitions):
        ckpt = base / f"rep{rep}" / "checkpoint.pt"
        if not ckpt.exists():
            raise CommandError(f"{ckpt} missing; run `nnbr train` first")
        model, _ = load_checkpoint(ckpt, n_items=corpus.n_items)
        _, _, te = split_users(corpus, cfg.split_for(rep))
        per_rep.append(evaluate_model(model, te, cfg.ks))
    return _write_result(cfg, method_name(cfg), per_rep)


def cmd_baseline(cfg) -> Path:
    corpus = load_prepared(cfg)
    per_rep = [baseline_rep(cfg, corpus, rep) for rep in range(cfg.repetitions)]
    b = cfg.baseline
    method = b.name if b.name == "g_topfreq" else f"{b.name}-{b.label_mode}"
    return _write_result(cfg, method, per_rep)


# ---------------------------------------------------------------------------
# sweeps

def load_grid(grid_file=None, params=()) -> dict:
    grid = {}
    if grid_file:
        with open(grid_file) as f:
            grid.update(yaml.safe_load(f) or {})
    for p in params:
        key, _, vals = p.partition("=")
        grid[key] = [yaml.safe_load(v) for v in vals.split(",")]
    if not grid:
        raise ConfigError("empty grid; pass --grid FILE or --param key=v1,v2")
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"grid entry {k!r} must be a non-empty list")
    return grid


def cell_id(cell: dict) -> str:
    return "_".join(f"{k.split('.')[-1]}-{v}" for k, v in cell.items())


def cmd_sweep(base_dict: dict, grid: dict, max_cells: int | None = None) -> Path:
    base = from_dict(base_dict)
    corpus = load_prepared(base)
    sweep_dir = base.run_dir / "sweep"
    cells_dir = sweep_dir / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    # validate every cell before any compute
    cfgs = [from_dict(apply_overrides(base_dict, [f"{k}={json.dumps(v)}" for k, v in c.items()]))
            for c in cells]
    ran = 0
    failures = 0
    for cell, cfg in zip(cells, cfgs):
        cid = cell_id(cell)
        out = cells_dir / f"{cid}.json"
        if out.exists() and json.loads(out.read_text()).get("status") == "ok":
            continue
        if max_cells is not None and ran >= max_cells:
            break
        ran += 1
        try:
            per_rep, best_epochs = [], []
            for rep in range(cfg.repetitions):
                model, history = train_rep(cfg, corpus, rep)
                _, _, te = split_users(corpus, cfg.split_for(rep))
                per_rep.append(evaluate_model(model, te, cfg.ks))
                best_epochs.append(history.best["epoch"])
            record = {"status": "ok", "cell": cell, "best_epochs": best_epochs,
                      **result_record(cfg, method_name(cfg), per_rep)}
        except Exception as e:  # recorded per cell, not fatal to the sweep
            log.exception("cell %s failed", cid)
            record = {"status": "failed", "cell": cell, "error": repr(e)}
            failures += 1
        atomic_write_json(out, record)
        _write_manifest(sweep_dir, cells)
    _write_manifest(sweep_dir, cells)
    table = _sweep_table(sweep_dir, cells, base.ks)
    if failures:
        raise CommandError(f"{failures} sweep cell(s) failed; see {cells_dir}")
    return table


def _write_manifest(sweep_dir: Path, cells) -> None:
    done = []
    for cell in cells:
        p = sweep_dir / "cells" / f"{cell_id(cell)}.json"
        if p.exists() and json.loads(p.read_text()).get("status") == "ok":
            done.append(cell_id(cell))
    atomic_write_json(sweep_dir / "manifest.json", {"total": len(cells), "completed": done})


def _sweep_table(sweep_dir: Path, cells, ks) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(cells[0])
    metrics = [f"{m}@{k}" for k in ks for m in ("recall", "ndcg")]
    w.writerow([k.split(".")[-1] for k in keys] + metrics)
    for cell in cells:
        p = sweep_dir / "cells" / f"{cell_id(cell)}.json"
        if not p.exists():
            continue
        rec = json.loads(p.read_text())
        if rec.get("status") != "ok":
            continue
        row = [cell[k] for k in keys]
        for k in ks:
            row += [repr(rec["mean"]["recall"][str(k)]), repr(rec["mean"]["ndcg"][str(k)])]
        w.writerow(row)
    out = sweep_dir / "results.csv"
    atomic_write_text(out, buf.getvalue())
    return out


# ---------------------------------------------------------------------------
# reports

def _paired(a: dict, b: dict, key: str) -> dict:
    """Per-user values of two result records, matched by user within each repetition."""
    def index(rec):
        return {r["rep"]: {u["user_id"]: u[key] for u in r["per_user"]} for r in rec["repetitions"]}
    ia, ib = index(a), index(b)
    out = {}
    for rep in sorted(set(ia) & set(ib)):
        users = sorted(set(ia[rep]) & set(ib[rep]))
        out[rep] = ([ia[rep][u] for u in users], [ib[rep][u] for u in users])
    return out


def significance_marker(tests) -> str:
    """One test per repetition; a marker needs every repetition to agree at p < 0.05."""
    if not tests or any(t.p_value >= 0.05 for t in tests):
        return ""
    if all(t.statistic > 0 for t in tests):
        return "↑"
    if all(t.statistic < 0 for t in tests):
        return "↓"
    return ""


def cmd_report(results_dir, reference: str | None = None, out_dir=None) -> Path:
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir else results_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    records = {}
    for p in sorted(results_dir.glob("**/results/*.json")):
        rec = json.loads(p.read_text())
        if "repetitions" in rec and "method" in rec:
            name = rec["method"] if rec["method"] not in records else f"{rec['experiment']}/{rec['method']}"
            records[name] = rec
    lines = ["# Results", ""]
    summary = {"methods": {}, "significance": {}, "reference": None}
    if records:
        if reference is not None and reference not in records:
            warnings.warn(f"reference run {reference!r} not found; no significance column")
            reference = None
        summary["reference"] = reference
        ks = next(iter(records.values()))["ks"]
        metrics = [(m, k) for k in ks for m in ("recall", "ndcg")]
        header = ["method"] + [f"{'Recall' if m == 'recall' else 'nDCG'}@{k}" for m, k in metrics]
        lines += ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for name, rec in records.items():
            summary["methods"][name] = rec["mean"]
            cells = [name]
            for m, k in metrics:
                v = rec["mean"][m][str(k)]
                mark = ""
                if reference is not None and name != reference:
                    pairs = _paired(rec, records[reference], f"{m}@{k}")
                    tests = {rep: paired_t_test(a, b) for rep, (a, b) in pairs.items() if len(a) >= 2}
                    summary["significance"].setdefault(name, {})[f"{m}@{k}"] = [
                        {"rep": rep, "t": t.statistic, "p": t.p_value} for rep, t in tests.items()
                    ]
                    mark = significance_marker(list(tests.values()))
                cells.append(f"{v:.4f}{mark}")
            lines.append("| " + " | ".join(cells) + " |")
        if reference is not None:
            lines += ["", f"↑/↓: better/worse than `{reference}` in a paired t-test at p < 0.05 "
                      "in every repetition."]
    files = []
    for p in sorted(results_dir.glob("**/sweep/results.csv")):
        files += _heatmaps(p, out_dir)
    curves = _curves(results_dir, out_dir)
    if curves:
        files.append(curves)
    if files:
        lines += ["", "## Data files", ""] + [f"- `{f.name}`" for f in files]
    atomic_write_json(out_dir / "report.json", summary)
    report = out_dir / "report.md"
    atomic_write_text(report, "\n".join(lines) + "\n")
    return report


def _heatmaps(results_csv: Path, out_dir: Path) -> list:
    with open(results_csv) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return []
    tag = results_csv.parent.parent.name
    cols = list(rows[0])
    params = [c for c in cols if "@" not in c]
    metrics = [c for c in cols if "@" in c]
    written = []
    if "swap_ratio" in params and "swap_hop" in params:
        others = [p for p in params if p not in ("swap_ratio", "swap_hop")]
        groups = {}
        for r in rows:
            groups.setdefault(tuple(r[o] for o in others), []).append(r)
        for gkey, grows in groups.items():
            ratios = sorted({r["swap_ratio"] for r in grows}, key=float)
            hops = sorted({r["swap_hop"] for r in grows}, key=float)
            suffix = "".join(f"_{o}-{v}" for o, v in zip(others, gkey))
            for metric in metrics:
                cell = {(r["swap_ratio"], r["swap_hop"]): r[metric] for r in grows}
                path = out_dir / f"heatmap_{tag}{suffix}_{metric.replace('@', '')}.csv"
                buf = io.StringIO()
                w = csv.writer(buf, lineterminator="\n")
                w.writerow(["swap_ratio\\swap_hop"] + hops)
                for ratio in ratios:
                    w.writerow([ratio] + [cell.get((ratio, h), "") for h in hops])
                atomic_write_text(path, buf.getvalue())
                written.append(path)
    elif "mask_ratio" in params:
        path = out_dir / f"mask_ratio_curve_{tag}.csv"
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in sorted(rows, key=lambda r: float(r["mask_ratio"])):
            w.writerow(r)
        atomic_write_text(path, buf.getvalue())
        written.append(path)
    return written


def _curves(results_dir: Path, out_dir: Path) -> Path | None:
    logs = sorted(results_dir.glob("**/metrics.jsonl"))
    if not logs:
        return None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "method", "rep", "epoch", "phase", "loss", "val_recall@10", "val_ndcg@10"])
    for p in logs:
        lines = p.read_text().splitlines()
        head = json.loads(lines[0])
        run = str(p.parent.relative_to(results_dir))
        for line in lines[1:]:
            r = json.loads(line)
            w.writerow([run, head.get("method"), head.get("rep"), r["epoch"], r["phase"],
                        repr(r["loss"]), repr(r["val_recall@10"]), repr(r["val_ndcg@10"])])
    out = out_dir / "training_curves.csv"
    atomic_write_text(out, buf.getvalue())
    return out


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nnbr", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", type=Path, help="experiment YAML")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config field (repeatable)")
        return p

    p = with_config(sub.add_parser("prepare", help="build and persist the processed corpus"))
    p.add_argument("--force", action="store_true")
    p = with_config(sub.add_parser("train", help="train BTBR for every repetition"))
    p.add_argument("--force", action="store_true")
    p = with_config(sub.add_parser("evaluate", help="evaluate trained checkpoints on the test users"))
    p.add_argument("--checkpoint-dir", type=Path)
    p = with_config(sub.add_parser("baseline", help="evaluate G-TopFreq or TIFUKNN"))
    p.add_argument("--name", choices=("g_topfreq", "tifuknn"))
    p.add_argument("--label-mode", choices=("all", "explore"))
    p = with_config(sub.add_parser("sweep", help="grid over config fields, resumable"))
    p.add_argument("--grid", type=Path, help="YAML mapping dotted keys to value lists")
    p.add_argument("--param", action="append", default=[], metavar="KEY=V1,V2")
    p.add_argument("--max-cells", type=int, help="stop after this many new cells")
    p = sub.add_parser("report", help="render tables and plot data from a results directory")
    p.add_argument("results_dir", type=Path)
    p.add_argument("--reference", help="method name to test the others against")
    p.add_argument("--out", type=Path)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "report":
            print(cmd_report(args.results_dir, args.reference, args.out))
            return 0
        overrides = list(args.overrides)
        if args.command == "baseline":
            if args.name:
                overrides.append(f"baseline.name={args.name}")
            if args.label_mode:
                overrides.append(f"baseline.label_mode={args.label_mode}")
        if args.command == "sweep":
            with open(args.config) as f:
                d = yaml.safe_load(f) or {}
            d.setdefault("name", args.config.stem)
            d = apply_overrides(d, overrides)
            print(cmd_sweep(d, load_grid(args.grid, args.param), args.max_cells))
            return 0
        cfg = load_config(args.config, overrides)
        if args.command == "prepare":
            print(json.dumps(cmd_prepare(cfg, args.force), indent=2))
        elif args.command == "train":
            for p in cmd_train(cfg, args.force):
                print(p)
        elif args.command == "evaluate":
            print(cmd_evaluate(cfg, args.checkpoint_dir))
        elif args.command == "baseline":
            print(cmd_baseline(cfg))
        return 0
    except (ConfigError, ModelConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CommandError, CorpusError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
