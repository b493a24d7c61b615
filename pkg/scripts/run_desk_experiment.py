#!/usr/bin/env python3
"""Full desk-scale experiment: data generation, the three-architecture
comparison over multiple seeds, evaluation, speedup measurement, and the
loss-landscape probe.  Everything flows through the CLI so the artifacts
are exactly what a user would produce.

Writes results under --workdir:
    desk.json, fno.json, fno_opt.json, tfno_opt.json   run configs
    data.tfno (+ manifest)                             dataset
    runs/<name>.tfnc (+ .history.csv)                  checkpoints
    eval/                                              metrics, scatter, heatmaps
    landscape/                                         landscape.csv + pgm
    summary.json                                       all measurements
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from tfno import config as cfgmod
from tfno.cli import main as cli


def variant_config(base: dict, factorization: str, power: int, seed: int,
                   epochs: int | None = None) -> dict:
    cfg = json.loads(json.dumps(base))
    cfg["operator"]["factorization"] = factorization
    cfg["operator"]["power"] = power
    cfg["seed"] = seed
    if epochs is not None:
        cfg["training"]["epochs"] = epochs
    return cfg


def run(cmd_args):
    code = cli(cmd_args)
    if code != 0:
        raise SystemExit("command %s failed with exit code %d" % (cmd_args[0], code))


def best_val_loss(history_path: Path) -> float:
    rows = history_path.read_bytes().decode().strip().split("\r\n")[1:]
    return min(float(r.split(",")[2]) for r in rows)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--seeds", type=int, default=3, help="seed count for the TT-vs-dense comparison")
    ap.add_argument("--epochs", type=int, default=None, help="override headline training epochs")
    ap.add_argument("--compare-epochs", type=int, default=20,
                    help="matched budget for the per-seed TT-vs-dense pairs")
    ap.add_argument("--landscape-grid", type=int, default=21)
    ap.add_argument("--skip-reproducibility", action="store_true")
    args = ap.parse_args(argv)

    work = Path(args.workdir)
    (work / "runs").mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    summary = {"timings": {}, "runs": {}}

    base = cfgmod.default_dict()
    if args.epochs:
        base["training"]["epochs"] = args.epochs
    (work / "desk.json").write_text(json.dumps(base, indent=1, sort_keys=True))

    # -- dataset ------------------------------------------------------------
    data = work / "data.tfno"
    t0 = time.perf_counter()
    run(["gen-data", "--config", str(work / "desk.json"), "--out", str(data)])
    summary["timings"]["gen_data_s"] = time.perf_counter() - t0

    # -- architecture trio: the seed study compares TT against the dense FNO
    # at a matched epoch budget; the power ablation runs once at that budget;
    # the headline TFNO-opt run gets the full epoch budget for evaluation
    seeds = [base["seed"] + k for k in range(args.seeds)]
    jobs = [("tfno_opt", "tt", 4, k, args.compare_epochs) for k in range(args.seeds)]
    jobs += [("fno", "dense", 1, k, args.compare_epochs) for k in range(args.seeds)]
    jobs += [("fno_opt", "dense", 4, 0, args.compare_epochs)]
    jobs += [("tfno_opt_headline", "tt", 4, 0, None)]
    for name, fact, power, k, epochs in jobs:
        cfg = variant_config(base, fact, power, seeds[k], epochs)
        tag = "%s_s%d" % (name, k) if name != "tfno_opt_headline" else name
        cfg_path = work / (tag + ".json")
        cfg_path.write_text(json.dumps(cfg, indent=1, sort_keys=True))
        out = work / "runs" / (tag + ".tfnc")
        t0 = time.perf_counter()
        run(["train", "--data", str(data), "--config", str(cfg_path), "--out", str(out)])
        summary["runs"][tag] = {
            "seed": seeds[k],
            "epochs": epochs or base["training"]["epochs"],
            "train_s": time.perf_counter() - t0,
            "best_val_loss": best_val_loss(Path(str(out) + ".history.csv")),
        }

    tt_wins = [summary["runs"]["tfno_opt_s%d" % k]["best_val_loss"]
               <= summary["runs"]["fno_s%d" % k]["best_val_loss"]
               for k in range(args.seeds)]
    summary["tt_beats_dense_per_seed"] = tt_wins
    summary["tt_beats_dense_median"] = sum(tt_wins) * 2 > len(tt_wins)

    headline = work / "runs" / "tfno_opt_headline.tfnc"
    summary["headline_checkpoint"] = headline.name
    t0 = time.perf_counter()
    run(["eval", "--model", str(headline), "--data", str(data), "--out", str(work / "eval")])
    summary["timings"]["eval_s"] = time.perf_counter() - t0

    rows = (work / "eval" / "metrics.csv").read_bytes().decode().strip().split("\r\n")
    header, all_row = rows[0].split(","), rows[-1].split(",")
    m = dict(zip(header, all_row))
    summary["metrics"] = {
        "rel_l2": float(m["rel_l2"]),
        "r2": float(m["r2"]),
        "test_loss": float(m["test_loss"]),
        "neural_ms_per_scenario": float(m["neural_ms_per_scenario"]),
        "fv_ms_per_scenario": float(m["fv_ms_per_scenario"]),
        "speedup": float(m["speedup"]),
    }

    # -- loss landscape --------------------------------------------------------
    t0 = time.perf_counter()
    run(["landscape", "--model", str(headline), "--data", str(data),
         "--grid", str(args.landscape_grid), "--range", "1.0",
         "--seed", str(base["seed"]), "--out", str(work / "landscape")])
    summary["timings"]["landscape_s"] = time.perf_counter() - t0

    # -- reproducibility: regenerate + retrain seed 0, compare bytes -----------
    if not args.skip_reproducibility:
        t0 = time.perf_counter()
        data2 = work / "data_rerun.tfno"
        run(["gen-data", "--config", str(work / "desk.json"), "--out", str(data2)])
        identical_data = data2.read_bytes() == data.read_bytes()
        out2 = work / "runs" / "tfno_opt_s0_rerun.tfnc"
        run(["train", "--data", str(data2), "--config", str(work / "tfno_opt_s0.json"),
             "--out", str(out2)])
        identical_hist = (Path(str(out2) + ".history.csv").read_bytes()
                          == Path(str(work / "runs" / "tfno_opt_s0.tfnc") + ".history.csv").read_bytes())
        run(["eval", "--model", str(out2), "--data", str(data2), "--out", str(work / "eval_rerun")])

        def stable_metrics(p):
            rows = (p / "metrics.csv").read_bytes().decode().strip().split("\r\n")
            return [",".join(r.split(",")[:4]) for r in rows]

        best0 = work / "runs" / "tfno_opt_s0.tfnc"
        run(["eval", "--model", str(best0), "--data", str(data), "--out", str(work / "eval_s0")])
        identical_metrics = stable_metrics(work / "eval_rerun") == stable_metrics(work / "eval_s0")
        summary["reproducibility"] = {
            "dataset_bytes_identical": identical_data,
            "history_bytes_identical": identical_hist,
            "metrics_identical_outside_timing": identical_metrics,
        }
        summary["timings"]["reproducibility_s"] = time.perf_counter() - t0

    summary["timings"]["total_s"] = time.perf_counter() - t_start
    (work / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
