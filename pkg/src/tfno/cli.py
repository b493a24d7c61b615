"""Command-line surface: gen-data, train, eval, landscape, predict.

Every command is driven by the JSON run config plus explicit paths; no
flag overrides a config value except the landscape seed.  Exit codes:
0 success, 2 config error, 3 solver failure, 4 training divergence,
5 artifact incompatibility.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dataio, ressim
from .config import ConfigError, RunConfig
from .dataio import FormatError
from .fno import NeuralOperator, OperatorConfig
from .losses import loss_landscape
from .ndtensor import ShapeError
from .ressim import Dataset, SolverError
from .training import (TrainingDiverged, approximation_loss, evaluate, predict,
                       split_dataset, train)

EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_DIVERGED = 4
EXIT_INCOMPATIBLE = 5


class IncompatibleArtifacts(RuntimeError):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# scenario generation shared by gen-data and eval timing
# --------------------------------------------------------------------------


def generate_scenarios(rc: RunConfig):
    """Withdrawal block then injection block; stream k of each family is
    seeded by (seed, family, k) so order and parallelism cannot change it."""
    n_inj = int(round(rc.injection_fraction * rc.n_scenarios))
    n_wd = rc.n_scenarios - n_inj
    scens = ressim.sample_scenarios(n_wd, "withdrawal", rc.seed, rc.grid, rc.sampler)
    if n_inj:
        scens += ressim.sample_scenarios(n_inj, "injection", rc.seed, rc.grid, rc.sampler)
    return scens


def cmd_gen_data(config_path, out_path) -> int:
    rc = cfgmod.load(config_path)
    scens = generate_scenarios(rc)
    trajs = []
    t0 = time.perf_counter()
    for i, s in enumerate(scens):
        try:
            trajs.append(ressim.simulate(s, rc.grid, rc.fluid, rc.solver))
        except SolverError as exc:
            raise SolverError("scenario %d (%s): %s" % (i, s.family, exc)) from exc
        if (i + 1) % 20 == 0:
            _log("simulated %d/%d scenarios (%.1fs)" % (i + 1, len(scens), time.perf_counter() - t0))
    ds = ressim.build_dataset(scens, trajs, rc.grid, seed=rc.seed)
    dataio.write_dataset(out_path, ds, gen_config=rc.raw)
    _log("wrote %s (%d scenarios, %.1fs)" % (out_path, ds.n_scenarios, time.perf_counter() - t0))
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _checkpoint_echo(rc: RunConfig, ds: Dataset, result) -> dict:
    nx, ny, nt = ds.grid_shape
    return {
        "kind": "tfno-checkpoint",
        "seed": rc.seed,
        "grid": {"nx": nx, "ny": ny, "nt": nt},
        "operator": dict(rc.raw["operator"]),
        "training": dict(rc.raw["training"]),
        "normalization_constants": dict(ds.constants),
        "channel_names": list(ds.channel_names),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
    }


def model_from_checkpoint(path):
    echo, blocks = dataio.read_checkpoint(path)
    op = dict(echo["operator"])
    op["modes"] = tuple(op["modes"])
    op["tt_ranks"] = tuple(op["tt_ranks"])
    config = OperatorConfig(**op)
    from .ndtensor import Tensor

    params = {name: Tensor.wrap(arr) for name, arr in blocks.items()}
    return NeuralOperator(config, params), echo


def _check_dataset_matches(ds: Dataset, rc: RunConfig) -> None:
    if ds.inputs.shape[1] != rc.operator.d_a:
        raise IncompatibleArtifacts(
            "dataset carries %d input channels, operator expects %d"
            % (ds.inputs.shape[1], rc.operator.d_a)
        )
    if ds.targets.shape[1] != rc.operator.d_u:
        raise IncompatibleArtifacts(
            "dataset carries %d output channels, operator expects %d"
            % (ds.targets.shape[1], rc.operator.d_u)
        )


def cmd_train(data_path, config_path, out_path) -> int:
    rc = cfgmod.load(config_path)
    ds = dataio.read_dataset(data_path)
    _check_dataset_matches(ds, rc)
    plan = split_dataset(ds, rc.training.fractions, rc.seed)
    model = NeuralOperator.init(rc.operator, seed=rc.seed)
    result = train(model, ds, plan, rc.training, log=_log)
    assert result.consumed_ids.isdisjoint(plan.test_ids), "test ids leaked into training"
    dataio.write_checkpoint(out_path, result.model.params, _checkpoint_echo(rc, ds, result))
    dataio.write_csv(
        str(out_path) + ".history.csv",
        ("epoch", "train_loss", "val_loss"),
        result.history.rows(),
    )
    _log("wrote %s (best epoch %d, val loss %.5f)" % (out_path, result.best_epoch, result.best_val_loss))
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def _split_from_echo(ds: Dataset, echo: dict):
    fractions = tuple(echo["training"]["fractions"])
    return split_dataset(ds, fractions, int(echo["seed"]))


def _scenario_for_index(rc: RunConfig, index: int):
    n_inj = int(round(rc.injection_fraction * rc.n_scenarios))
    n_wd = rc.n_scenarios - n_inj
    if index < n_wd:
        return ressim.sample_scenario(index, "withdrawal", rc.seed, rc.grid, rc.sampler)
    return ressim.sample_scenario(index - n_wd, "injection", rc.seed, rc.grid, rc.sampler)

def _fv_timing(ds: Dataset, data_path, ids, max_timed: int = 8):
    """Re-simulate a test subset from the manifest config; returns
    (timed id -> seconds) and verifies the oracle matches stored targets."""
    manifest = dataio.read_manifest(data_path)
    if not manifest or "generation_config" not in manifest:
        return {}
    rc = cfgmod.from_dict(manifest["generation_config"])
    lo, hi = ds.constants["p_lo"], ds.constants["p_hi"]
    out = {}
    for idx in list(ids)[:max_timed]:
        scen = _scenario_for_index(rc, idx)
        t0 = time.perf_counter()
        traj = ressim.simulate(scen, rc.grid, rc.fluid, rc.solver)
        out[idx] = time.perf_counter() - t0
        renorm = (traj.pressures[1:] - lo) / (hi - lo)
        stored = np.moveaxis(ds.targets[idx, 0].astype(np.float64), -1, 0)
        if np.max(np.abs(renorm - stored)) > 1e-5:
            raise IncompatibleArtifacts(
                "re-simulated scenario %d does not match dataset targets" % idx
            )
    return out


def cmd_eval(model_path, data_path, out_dir) -> int:
    model, echo = model_from_checkpoint(model_path)
    ds = dataio.read_dataset(data_path)
    if list(ds.channel_names) != list(echo["channel_names"]):
        raise IncompatibleArtifacts("dataset channels do not match checkpoint")
    if ds.inputs.shape[1] != model.config.d_a:
        raise IncompatibleArtifacts("dataset input channels do not fit the model")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = _split_from_echo(ds, echo)
    from .losses import SobolevConfig

    sob = SobolevConfig(**echo["training"]["sobolev"])
    report = evaluate(model, ds, plan.test_ids, sobolev=sob)
    fv_times = _fv_timing(ds, data_path, plan.test_ids)
    neural_ms = 1e3 * report.neural_seconds_per_scenario
    fv_ms = 1e3 * float(np.mean(list(fv_times.values()))) if fv_times else float("nan")
    speedup = fv_ms / neural_ms if fv_times else float("nan")

    rows = []
    for i, idx in enumerate(report.ids):
        rows.append((idx, float(report.rel_l2[i]), "", "",
                     neural_ms, 1e3 * fv_times[idx] if idx in fv_times else "", ""))
    rows.append(("ALL", float(report.rel_l2.mean()), float(report.r2),
                 float(report.test_loss), neural_ms,
                 fv_ms if fv_times else "", speedup if fv_times else ""))
    dataio.write_csv(out / "metrics.csv",
                     ("scenario_id", "rel_l2", "r2", "test_loss",
                      "neural_ms_per_scenario", "fv_ms_per_scenario", "speedup"),
                     rows)

    preds = report.predictions
    targets = ds.targets[list(report.ids)].astype(np.float64)
    stride = max(1, preds.size // 8192)
    flat_p = preds.ravel()[::stride]
    flat_t = targets.ravel()[::stride]
    dataio.write_csv(out / "scatter.csv", ("predicted", "true"),
                     [(float(a), float(b)) for a, b in zip(flat_p, flat_t)])

    first = 0  # first test scenario is the reported one
    nt = preds.shape[-1]
    for t in range(nt):
        p_fld = preds[first, 0, :, :, t]
        t_fld = targets[first, 0, :, :, t]
        dataio.write_pgm(out / ("decade_%02d_prediction.pgm" % (t + 1)), p_fld, 0.0, 1.0)
        dataio.write_pgm(out / ("decade_%02d_truth.pgm" % (t + 1)), t_fld, 0.0, 1.0)
        dataio.write_pgm(out / ("decade_%02d_abs_error.pgm" % (t + 1)), np.abs(p_fld - t_fld))
    _log("eval: rel_l2 %.4f  r2 %.4f  loss %.4f  neural %.1f ms  fv %.0f ms"
         % (report.rel_l2.mean(), report.r2, report.test_loss, neural_ms, fv_ms))
    return 0


# --------------------------------------------------------------------------
# landscape
# --------------------------------------------------------------------------


def cmd_landscape(model_path, data_path, grid_n, span, seed, out_dir) -> int:
    if grid_n < 2 or span <= 0:
        raise ConfigError("landscape needs grid >= 2 and positive range")
    model, echo = model_from_checkpoint(model_path)
    ds = dataio.read_dataset(data_path)
    if ds.inputs.shape[1] != model.config.d_a:
        raise IncompatibleArtifacts("dataset input channels do not fit the model")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = _split_from_echo(ds, echo)
    from .losses import SobolevConfig

    sob = SobolevConfig(**echo["training"]["sobolev"])
    before = {k: v.data.tobytes() for k, v in model.params.items()}

    def eval_loss(m):
        return approximation_loss(m, ds, plan.test_ids, sob)

    grid = loss_landscape(model, eval_loss, resolution=grid_n, span=span, seed=seed,
                          workers=2)
    after = {k: v.data.tobytes() for k, v in model.params.items()}
    if before != after:
        raise IncompatibleArtifacts("landscape probe mutated model parameters")
    rows = []
    for i, a in enumerate(grid.alphas):
        for j, b in enumerate(grid.betas):
            rows.append((float(a), float(b), float(grid.values[i, j])))
    dataio.write_csv(out / "landscape.csv", ("alpha", "beta", "loss"), rows)
    dataio.write_pgm(out / "landscape.pgm", grid.values)
    _log("landscape: center %.6f  min %.6f  max %.6f"
         % (grid.center_value(), grid.values.min(), grid.values.max()))
    return 0


# --------------------------------------------------------------------------
# predict
# --------------------------------------------------------------------------


_PRESSURE_CH = 0
_LOGK_CH = 2
_RATE_CH = 3
_CONST_KEYS = {  # channel -> (lo key, hi key)
    _PRESSURE_CH: ("p_lo", "p_hi"),
    _LOGK_CH: ("logk_lo", "logk_hi"),
    _RATE_CH: ("q_lo", "q_hi"),
}


def cmd_predict(model_path, scenario_path, out_path) -> int:
    model, echo = model_from_checkpoint(model_path)
    ds = dataio.read_dataset(scenario_path)
    if ds.n_scenarios != 1:
        raise IncompatibleArtifacts("prediction input must hold exactly one scenario")
    if ds.inputs.shape[1] != model.config.d_a:
        raise IncompatibleArtifacts("scenario channels do not fit the model")
    ckpt_consts = echo["normalization_constants"]
    a = ds.inputs.astype(np.float64)
    # constants travel with the checkpoint: re-express any channel the
    # scenario file normalized with different constants
    for ch, (klo, khi) in _CONST_KEYS.items():
        lo_s, hi_s = ds.constants[klo], ds.constants[khi]
        lo_c, hi_c = ckpt_consts[klo], ckpt_consts[khi]
        if (lo_s, hi_s) != (lo_c, hi_c):
            physical = a[:, ch] * (hi_s - lo_s) + lo_s
            a[:, ch] = (physical - lo_c) / (hi_c - lo_c)
    from .ndtensor import Tensor
    from . import ndtensor as nd

    with nd.checked_off():
        u = model.forward(Tensor.wrap(np.ascontiguousarray(a))).data
    pressure = u * (ckpt_consts["p_hi"] - ckpt_consts["p_lo"]) + ckpt_consts["p_lo"]
    out_ds = Dataset(
        inputs=np.empty((1, 0) + ds.inputs.shape[2:], dtype=np.float32),
        targets=pressure.astype(np.float32),
        families=ds.families,
        constants={k: float(ckpt_consts[k]) for k in dataio.CONSTANT_ORDER},
        seed=ds.seed,
        channel_names=(),
    )
    dataio.write_dataset(out_path, out_ds)
    _log("wrote predicted trajectory %s" % out_path)
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tfno", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate scenarios and write a dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train an operator on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)

    l = sub.add_parser("landscape", help="probe the loss landscape around a checkpoint")
    l.add_argument("--model", required=True)
    l.add_argument("--data", required=True)
    l.add_argument("--grid", type=int, default=21)
    l.add_argument("--range", type=float, default=1.0, dest="span")
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="predict a trajectory for one scenario")
    p.add_argument("--model", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args.config, args.out)
        if args.command == "train":
            return cmd_train(args.data, args.config, args.out)
        if args.command == "eval":
            return cmd_eval(args.model, args.data, args.out)
        if args.command == "landscape":
            return cmd_landscape(args.model, args.data, args.grid, args.span, args.seed, args.out)
        if args.command == "predict":
            return cmd_predict(args.model, args.scenario, args.out)
        raise ConfigError("unknown command %r" % (args.command,))
    except ConfigError as exc:
        _log("config error: %s" % exc)
        return EXIT_CONFIG
    except SolverError as exc:
        _log("solver failure: %s" % exc)
        return EXIT_SOLVER
    except TrainingDiverged as exc:
        _log("training diverged: %s" % exc)
        return EXIT_DIVERGED
    except (IncompatibleArtifacts, FormatError, ShapeError) as exc:
        _log("incompatible artifacts: %s" % exc)
        return EXIT_INCOMPATIBLE


if __name__ == "__main__":
    sys.exit(main())
