"""Command-line entry point.

Subcommands: simulate, train, validate, predict, marginalize, plot-data.
Each takes a config file path plus optional repeated --set key=value
overrides; all other inputs and outputs are named by the config. Exit codes:
0 success, 2 config/validation error, 3 numeric failure, 4 I/O failure.

Randomness derives from the root seed `dataset.seed`, split per purpose:
[seed, 0] training data, [seed, 1] validation data, [seed, 2..5, ...] the
collocation/adaptive streams inside training, [seed, 6, ...] Adam
minibatches, [seed, 7] network initialization.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

import numpy as np

from . import systems as systems_mod
from .config import ConfigError, RunConfig, load_config, serialize_config
from .density_net import join_inputs, load_checkpoint, save_checkpoint
from .dynamics import (CharacteristicDataset, DataValidationError,
                       IntegrationError, SystemModel, generate_dataset,
                       load_dataset, save_dataset)
from .systems import CareError, RigidBodyParams
from .textio import KeyValueError, fmt_float
from .training import (AdamOptions, LbfgsOptions, LossConfig,
                       train_adam, train_adaptive, save_report)
from .validation import (conditional_slice, marginal_grid, nrmse, save_grid,
                         save_nrmse_table)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

TRAIN_DATA = "train_data.csv"
VAL_DATA = "val_data.csv"
CHECKPOINT = "checkpoint.txt"
REPORT = "train_report.txt"
NRMSE_TABLE = "nrmse.csv"
LOCK_FILE = ".densprop.lock"


class LockError(OSError):
    pass


@contextlib.contextmanager
def output_lock(outdir):
    """Exclusive lock file so concurrent invocations never share mutable files."""
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, LOCK_FILE)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"output directory is locked by another run "
                        f"(remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)


def build_system(cfg: RunConfig) -> SystemModel:
    name = cfg.system.name
    if name == "kraichnan-orszag":
        return systems_mod.kraichnan_orszag()
    if name == "linear-test":
        return systems_mod.linear_test()
    params = RigidBodyParams(J=np.diag(cfg.system.inertia),
                             h=np.array(cfg.system.momentum),
                             beta_nominal=cfg.system.beta_nominal)
    return systems_mod.rigid_body_lqr(params, w1=cfg.system.w1, w2=cfg.system.w2,
                                      w3=cfg.system.w3)


def _outpath(cfg, name):
    return os.path.join(cfg.output_dir, name)


def _load_dataset_checked(cfg, sys, name):
    path = _outpath(cfg, name)
    ds, meta = load_dataset(path)
    if ds.dim != sys.dim:
        raise DataValidationError(
            f"{path}: dataset dimension {ds.dim} does not match system "
            f"{sys.name!r} (dim {sys.dim})")
    return ds, meta


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    sys_model = build_system(cfg)
    ds_cfg = cfg.dataset
    grid = np.linspace(0.0, ds_cfg.t_final, ds_cfg.snapshots)
    val_grid = np.linspace(0.0, ds_cfg.t_final, ds_cfg.val_snapshots)
    common = {"system": sys_model.name, "seed": ds_cfg.seed, "rtol": ds_cfg.rtol,
              "atol": ds_cfg.atol, "t_final": ds_cfg.t_final}

    train = generate_dataset(sys_model, ds_cfg.n_traj, grid, [ds_cfg.seed, 0],
                             rtol=ds_cfg.rtol, atol=ds_cfg.atol)
    save_dataset(train, _outpath(cfg, TRAIN_DATA),
                 {**common, "role": "train", "n_traj": ds_cfg.n_traj,
                  "snapshots": ds_cfg.snapshots})
    logger.info("wrote %s (%d points)", _outpath(cfg, TRAIN_DATA), len(train))

    val = generate_dataset(sys_model, ds_cfg.n_val_traj, val_grid, [ds_cfg.seed, 1],
                           rtol=ds_cfg.rtol, atol=ds_cfg.atol)
    save_dataset(val, _outpath(cfg, VAL_DATA),
                 {**common, "role": "validation", "n_traj": ds_cfg.n_val_traj,
                  "snapshots": ds_cfg.val_snapshots})
    logger.info("wrote %s (%d points)", _outpath(cfg, VAL_DATA), len(val))
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    from .training import build_network

    sys_model = build_system(cfg)
    data, _ = _load_dataset_checked(cfg, sys_model, TRAIN_DATA)
    try:
        val_data, _ = _load_dataset_checked(cfg, sys_model, VAL_DATA)
    except FileNotFoundError:
        val_data = None

    seed = cfg.dataset.seed
    loss_cfg = LossConfig(lam=cfg.train.lam, weight_scheme=cfg.train.weight_scheme)
    if cfg.train.init_checkpoint:
        net = load_checkpoint(cfg.train.init_checkpoint)
        if net.arch.input_dim != sys_model.dim + 1:
            raise DataValidationError(
                f"{cfg.train.init_checkpoint}: checkpoint dimension does not "
                f"match system {sys_model.name!r}")
        logger.info("resuming from %s", cfg.train.init_checkpoint)
    else:
        net = build_network(cfg.hidden, data, cfg.dataset.t_final, [seed, 7])
    lbfgs = LbfgsOptions(max_iter=cfg.train.lbfgs_max_iter,
                         history=cfg.train.lbfgs_history,
                         gtol=cfg.train.lbfgs_gtol, ftol=cfg.train.lbfgs_ftol)

    def horizon_hook(k, t_k, net_k):
        save_checkpoint(net_k, _outpath(cfg, f"checkpoint_h{k + 1}.txt"))

    strategy = cfg.train.strategy
    if strategy == "adam":
        adam = AdamOptions(lr=cfg.train.adam_lr, n_iter=cfg.train.adam_iters,
                           decay_every=cfg.train.adam_decay_every,
                           decay_factor=cfg.train.adam_decay)
        result = train_adam(sys_model, data, net, t_final=cfg.dataset.t_final,
                            loss_cfg=loss_cfg, seed=seed, adam=adam,
                            batch=cfg.train.adam_batch, val_data=val_data)
    else:
        adaptive = cfg.adaptive
        if strategy == "fixed-lbfgs":
            adaptive = type(adaptive)(eps_rho=np.inf, eps_pde=np.inf,
                                      s_rho=adaptive.s_rho, s_pde=adaptive.s_pde,
                                      variance_subset_cap=adaptive.variance_subset_cap,
                                      max_rounds=1)
        result = train_adaptive(sys_model, data, cfg.schedule(), adaptive, net,
                                loss_cfg=loss_cfg, seed=seed, lbfgs=lbfgs,
                                rtol=cfg.dataset.rtol, atol=cfg.dataset.atol,
                                val_data=val_data, horizon_hook=horizon_hook)

    save_checkpoint(result.net, _outpath(cfg, CHECKPOINT))
    save_report(result.report, _outpath(cfg, REPORT))
    logger.info("wrote %s and %s", _outpath(cfg, CHECKPOINT), _outpath(cfg, REPORT))
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    sys_model = build_system(cfg)
    val_data, _ = _load_dataset_checked(cfg, sys_model, VAL_DATA)
    net = load_checkpoint(_outpath(cfg, CHECKPOINT))
    if net.arch.input_dim != sys_model.dim + 1:
        raise DataValidationError(
            f"checkpoint expects {net.arch.input_dim - 1} state dimensions, "
            f"system has {sys_model.dim}")
    report = nrmse(net, val_data)
    save_nrmse_table(report, _outpath(cfg, NRMSE_TABLE))
    logger.info("wrote %s", _outpath(cfg, NRMSE_TABLE))
    return EXIT_OK


def _read_query_points(path, dim):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        expected = [f"x{i + 1}" for i in range(dim)] + ["t"]
        if header != expected:
            raise DataValidationError(
                f"{path}:1: expected header {','.join(expected)}, got "
                f"{','.join(header)}")
        rows = []
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            toks = raw.strip().split(",")
            if len(toks) != dim + 1:
                raise DataValidationError(
                    f"{path}:{lineno}: expected {dim + 1} columns, got {len(toks)}")
            try:
                rows.append([float(t) for t in toks])
            except ValueError:
                raise DataValidationError(
                    f"{path}:{lineno}: non-numeric value in {raw.strip()!r}") from None
    if not rows:
        raise DataValidationError(f"{path}: no query rows")
    return np.array(rows)


def cmd_predict(cfg: RunConfig) -> int:
    net = load_checkpoint(_outpath(cfg, CHECKPOINT))
    dim = net.arch.input_dim - 1
    rows = _read_query_points(cfg.predict.points, dim)
    log_rho = net.forward(rows)
    out = _outpath(cfg, cfg.predict.out)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(",".join([f"x{i + 1}" for i in range(dim)] + ["t", "rho", "log_rho"])
                 + "\n")
        for row, lr in zip(rows, log_rho):
            cols = [fmt_float(v) for v in row] + [fmt_float(np.exp(lr)), fmt_float(lr)]
            fh.write(",".join(cols) + "\n")
    logger.info("wrote %s (%d predictions)", out, len(rows))
    return EXIT_OK


def cmd_marginalize(cfg: RunConfig) -> int:
    net = load_checkpoint(_outpath(cfg, CHECKPOINT))
    mg = cfg.marginal
    x_grid = np.linspace(mg.x_range[0], mg.x_range[1], mg.points)
    y_grid = np.linspace(mg.y_range[0], mg.y_range[1], mg.points)
    fixed = {d: v for d, v in mg.fixed}
    for i, t in enumerate(mg.times):
        if mg.quad:
            grid = marginal_grid(net, mg.axes, x_grid, y_grid, t,
                                 quad_bounds={d: (lo, hi) for d, lo, hi in mg.quad},
                                 quad_points=mg.quad_points, fixed=fixed)
        else:
            grid = conditional_slice(net, mg.axes, x_grid, y_grid, t, fixed=fixed,
                                     intervals={d: (lo, hi)
                                                for d, lo, hi in mg.interval},
                                     interval_points=mg.interval_points)
        path = _outpath(cfg, f"grid_{grid.kind}_{i + 1}.csv")
        save_grid(grid, path)
        logger.info("wrote %s (t = %g)", path, t)
    return EXIT_OK


def cmd_plot_data(cfg: RunConfig) -> int:
    try:
        from densplot.cli import main as plot_main
    except ImportError:
        raise ConfigError(
            "plot-data requires the densplot helper package; install it from "
            "the plots/ directory") from None
    def resolve(p):
        # inputs name files in the output directory unless given explicitly
        if os.path.isabs(p) or os.path.exists(p):
            return p
        return _outpath(cfg, p)

    argv = [cfg.plot.kind, "--out", _outpath(cfg, cfg.plot.out), "--in"]
    argv += [resolve(p) for p in cfg.plot.inputs]
    if cfg.plot.labels:
        argv += ["--labels", ",".join(cfg.plot.labels)]
    rc = plot_main(argv)
    if rc != 0:
        raise DataValidationError(f"plot helper failed with exit code {rc}")
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "validate": cmd_validate,
    "predict": cmd_predict,
    "marginalize": cmd_marginalize,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="densprop",
        description="Propagate state densities through nonlinear ODE systems "
                    "with a physics-informed log-density network.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("config", help="path to the run configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--dump-config", action="store_true",
                        help="print the effective configuration and exit")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.dump_config:
            sys.stdout.write(serialize_config(cfg))
            return EXIT_OK
        with output_lock(cfg.output_dir):
            return _COMMANDS[args.command](cfg)
    except np.linalg.LinAlgError as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, KeyValueError, DataValidationError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (IntegrationError, CareError, FloatingPointError) as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except LockError as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except OSError as exc:
        logger.error("i/o failure: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
