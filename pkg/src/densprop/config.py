"""Run configuration: a plain-text, line-oriented file with dotted keys.

Every command is a pure function of (config file, input files, seed); all
randomness derives from the single root seed `dataset.seed`, split into
fixed per-purpose streams. Serialization emits every key, so
parse(serialize(parse(text))) == parse(text).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .textio import KeyValueError, fmt_float, format_kv, parse_kv
from .training import AdaptiveConfig, HorizonSchedule, WEIGHT_SCHEMES

STRATEGIES = ("adaptive-lbfgs", "fixed-lbfgs", "adam")
SYSTEM_NAMES = ("kraichnan-orszag", "rigid-body-lqr", "linear-test")


class ConfigError(ValueError):
    """Invalid or missing configuration value; the message names the key."""


@dataclass(frozen=True)
class SystemConfig:
    name: str = "kraichnan-orszag"
    w1: float = 4.0
    w2: float = 0.5
    w3: float = 8.0
    beta_nominal: float = 1.0
    inertia: tuple = (2.0, 3.0, 4.0)
    momentum: tuple = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class DatasetConfig:
    n_traj: int = 100
    n_val_traj: int = 100
    snapshots: int = 50
    val_snapshots: int = 50
    t_final: float = 1.0
    seed: int = 0
    rtol: float = 1e-8
    atol: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "fixed-lbfgs"
    lam: float = 0.5
    weight_scheme: str = "rho"
    init_checkpoint: str = ""    # resume/warm-start from a saved checkpoint
    lbfgs_max_iter: int = 500
    lbfgs_history: int = 10
    lbfgs_gtol: float = 1e-9
    lbfgs_ftol: float = 1e-12
    adam_lr: float = 1e-3
    adam_iters: int = 3000
    adam_batch: int = 1024
    adam_decay_every: int = 1000
    adam_decay: float = 0.5


@dataclass(frozen=True)
class PredictConfig:
    points: str = "queries.csv"
    out: str = "predictions.csv"


@dataclass(frozen=True)
class MarginalConfig:
    axes: tuple = (1, 2)
    times: tuple = (0.0,)
    x_range: tuple = (-3.0, 3.0)
    y_range: tuple = (-3.0, 3.0)
    points: int = 101
    quad: tuple = ()        # ((dim, low, high), ...) dimensions integrated out
    quad_points: int = 41
    fixed: tuple = ()       # ((dim, value), ...)
    interval: tuple = ()    # ((dim, low, high), ...) dimensions averaged
    interval_points: int = 21


@dataclass(frozen=True)
class PlotConfig:
    kind: str = "error_curve"
    inputs: tuple = ()
    labels: tuple = ()
    out: str = "figure.png"


@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    hidden: tuple = (32, 32, 32)
    train: TrainConfig = field(default_factory=TrainConfig)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    horizon_times: tuple = ()     # empty: single horizon at t_final
    horizon_lambdas: tuple = ()
    output_dir: str = "out"
    predict: PredictConfig = field(default_factory=PredictConfig)
    marginal: MarginalConfig = field(default_factory=MarginalConfig)
    plot: PlotConfig = field(default_factory=PlotConfig)

    def schedule(self) -> HorizonSchedule:
        if not self.horizon_times:
            return HorizonSchedule.single(self.dataset.t_final, self.train.lam)
        lams = self.horizon_lambdas or tuple(self.train.lam for _ in self.horizon_times)
        return HorizonSchedule(self.horizon_times, lams)


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

def _to_str(key, raw):
    return raw


def _to_int(key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _to_float(key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _to_bool(key, raw):
    if raw in ("true", "false"):
        return raw == "true"
    raise ConfigError(f"{key}: expected true or false, got {raw!r}")


def _to_floats(key, raw):
    if not raw.strip():
        return ()
    return tuple(_to_float(key, tok) for tok in raw.split(","))


def _to_ints(key, raw):
    if not raw.strip():
        return ()
    return tuple(_to_int(key, tok) for tok in raw.split(","))


def _to_strings(raw):
    return tuple(tok.strip() for tok in raw.split(",") if tok.strip())


def _to_dim_values(key, raw):
    """'x3=0;x4=1.5' -> ((3, 0.0), (4, 1.5))."""
    out = []
    if not raw.strip():
        return ()
    for item in raw.split(";"):
        name, eq, value = item.partition("=")
        name = name.strip()
        if not eq or not name.startswith("x"):
            raise ConfigError(f"{key}: expected 'x<dim>=<value>' items, got {item!r}")
        out.append((_to_int(key, name[1:]), _to_float(key, value)))
    return tuple(out)


def _to_dim_ranges(key, raw):
    """'x3=-6:6;x4=0:1' -> ((3, -6.0, 6.0), ...)."""
    out = []
    if not raw.strip():
        return ()
    for item in raw.split(";"):
        name, eq, value = item.partition("=")
        name = name.strip()
        lo, colon, hi = value.partition(":")
        if not eq or not colon or not name.startswith("x"):
            raise ConfigError(f"{key}: expected 'x<dim>=<low>:<high>' items, got {item!r}")
        out.append((_to_int(key, name[1:]), _to_float(key, lo), _to_float(key, hi)))
    return tuple(out)


def _fmt_dim_values(items):
    return ";".join(f"x{d}={fmt_float(v)}" for d, v in items)


def _fmt_dim_ranges(items):
    return ";".join(f"x{d}={fmt_float(lo)}:{fmt_float(hi)}" for d, lo, hi in items)


# key -> (getter into RunConfig parts, parse fn, format fn); declared once so
# parsing, serialization and validation cannot drift apart
def _schema():
    f = fmt_float
    return {
        "system.name": ("system", "name", _to_str, str),
        "system.w1": ("system", "w1", _to_float, f),
        "system.w2": ("system", "w2", _to_float, f),
        "system.w3": ("system", "w3", _to_float, f),
        "system.beta_nominal": ("system", "beta_nominal", _to_float, f),
        "system.inertia": ("system", "inertia", _to_floats,
                           lambda v: ",".join(f(x) for x in v)),
        "system.momentum": ("system", "momentum", _to_floats,
                            lambda v: ",".join(f(x) for x in v)),
        "dataset.n_traj": ("dataset", "n_traj", _to_int, str),
        "dataset.n_val_traj": ("dataset", "n_val_traj", _to_int, str),
        "dataset.snapshots": ("dataset", "snapshots", _to_int, str),
        "dataset.val_snapshots": ("dataset", "val_snapshots", _to_int, str),
        "dataset.t_final": ("dataset", "t_final", _to_float, f),
        "dataset.seed": ("dataset", "seed", _to_int, str),
        "dataset.rtol": ("dataset", "rtol", _to_float, f),
        "dataset.atol": ("dataset", "atol", _to_float, f),
        "net.hidden": (None, "hidden", _to_ints, lambda v: ",".join(map(str, v))),
        "train.strategy": ("train", "strategy", _to_str, str),
        "train.lambda": ("train", "lam", _to_float, f),
        "train.weight_scheme": ("train", "weight_scheme", _to_str, str),
        "train.init_checkpoint": ("train", "init_checkpoint", _to_str, str),
        "train.lbfgs_max_iter": ("train", "lbfgs_max_iter", _to_int, str),
        "train.lbfgs_history": ("train", "lbfgs_history", _to_int, str),
        "train.lbfgs_gtol": ("train", "lbfgs_gtol", _to_float, f),
        "train.lbfgs_ftol": ("train", "lbfgs_ftol", _to_float, f),
        "train.adam_lr": ("train", "adam_lr", _to_float, f),
        "train.adam_iters": ("train", "adam_iters", _to_int, str),
        "train.adam_batch": ("train", "adam_batch", _to_int, str),
        "train.adam_decay_every": ("train", "adam_decay_every", _to_int, str),
        "train.adam_decay": ("train", "adam_decay", _to_float, f),
        "adaptive.eps_rho": ("adaptive", "eps_rho", _to_float, f),
        "adaptive.eps_pde": ("adaptive", "eps_pde", _to_float, f),
        "adaptive.s_rho": ("adaptive", "s_rho", _to_float, f),
        "adaptive.s_pde": ("adaptive", "s_pde", _to_float, f),
        "adaptive.variance_cap": ("adaptive", "variance_subset_cap", _to_int, str),
        "adaptive.max_rounds": ("adaptive", "max_rounds", _to_int, str),
        "adaptive.final_horizon_only": ("adaptive", "final_horizon_only", _to_bool,
                                        lambda v: "true" if v else "false"),
        "horizons.times": (None, "horizon_times", _to_floats,
                           lambda v: ",".join(f(x) for x in v)),
        "horizons.lambdas": (None, "horizon_lambdas", _to_floats,
                             lambda v: ",".join(f(x) for x in v)),
        "output.dir": (None, "output_dir", _to_str, str),
        "predict.points": ("predict", "points", _to_str, str),
        "predict.out": ("predict", "out", _to_str, str),
        "marginal.axes": ("marginal", "axes", _to_ints, lambda v: ",".join(map(str, v))),
        "marginal.times": ("marginal", "times", _to_floats,
                           lambda v: ",".join(f(x) for x in v)),
        "marginal.x_range": ("marginal", "x_range", _to_floats,
                             lambda v: ",".join(f(x) for x in v)),
        "marginal.y_range": ("marginal", "y_range", _to_floats,
                             lambda v: ",".join(f(x) for x in v)),
        "marginal.points": ("marginal", "points", _to_int, str),
        "marginal.quad": ("marginal", "quad", _to_dim_ranges, _fmt_dim_ranges),
        "marginal.quad_points": ("marginal", "quad_points", _to_int, str),
        "marginal.fixed": ("marginal", "fixed", _to_dim_values, _fmt_dim_values),
        "marginal.interval": ("marginal", "interval", _to_dim_ranges, _fmt_dim_ranges),
        "marginal.interval_points": ("marginal", "interval_points", _to_int, str),
        "plot.kind": ("plot", "kind", _to_str, str),
        "plot.inputs": ("plot", "inputs", lambda k, raw: _to_strings(raw),
                        lambda v: ",".join(v)),
        "plot.labels": ("plot", "labels", lambda k, raw: _to_strings(raw),
                        lambda v: ",".join(v)),
        "plot.out": ("plot", "out", _to_str, str),
    }


_SECTION_TYPES = {"system": SystemConfig, "dataset": DatasetConfig,
                  "train": TrainConfig, "adaptive": AdaptiveConfig,
                  "predict": PredictConfig, "marginal": MarginalConfig,
                  "plot": PlotConfig}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        items = parse_kv(text, source)
    except KeyValueError as exc:
        raise ConfigError(str(exc)) from None
    return config_from_items(items, source)


def config_from_items(items: dict, source: str = "<config>") -> RunConfig:
    schema = _schema()
    unknown = set(items) - set(schema)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
    section_kwargs: dict = {name: {} for name in _SECTION_TYPES}
    top_kwargs: dict = {}
    for key, raw in items.items():
        section, attr, parse, _ = schema[key]
        value = parse(key, raw)
        if section is None:
            top_kwargs[attr] = value
        else:
            section_kwargs[section][attr] = value
    try:
        parts = {name: cls(**section_kwargs[name])
                 for name, cls in _SECTION_TYPES.items()}
        cfg = RunConfig(system=parts["system"], dataset=parts["dataset"],
                        train=parts["train"], adaptive=parts["adaptive"],
                        predict=parts["predict"], marginal=parts["marginal"],
                        plot=parts["plot"], **top_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    validate_config(cfg)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    items = {}
    for key, (section, attr, _, fmt) in _schema().items():
        obj = cfg if section is None else getattr(cfg, section)
        items[key] = fmt(getattr(obj, attr))
    return format_kv(items)


def load_config(path, overrides=()) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        items = parse_kv(fh.read(), source=str(path))
    for ov in overrides:
        key, eq, value = ov.partition("=")
        if not eq:
            raise ConfigError(f"--set {ov!r}: expected key=value")
        items[key.strip()] = value.strip()
    return config_from_items(items, source=str(path))


def validate_config(cfg: RunConfig) -> None:
    ds = cfg.dataset
    tr = cfg.train

    def need(cond, key, message):
        if not cond:
            raise ConfigError(f"{key}: {message}")

    need(cfg.system.name in SYSTEM_NAMES, "system.name",
         f"must be one of {', '.join(SYSTEM_NAMES)}")
    need(ds.n_traj >= 1, "dataset.n_traj", "must be >= 1")
    need(ds.n_val_traj >= 1, "dataset.n_val_traj", "must be >= 1")
    need(ds.snapshots >= 2, "dataset.snapshots", "must be >= 2")
    need(ds.val_snapshots >= 2, "dataset.val_snapshots", "must be >= 2")
    need(ds.t_final > 0, "dataset.t_final", "must be positive")
    need(ds.seed >= 0, "dataset.seed", "must be a nonnegative integer")
    need(ds.rtol > 0 and ds.atol > 0, "dataset.rtol", "tolerances must be positive")
    need(len(cfg.hidden) >= 1 and all(h >= 1 for h in cfg.hidden), "net.hidden",
         "must be a non-empty list of positive widths")
    need(tr.strategy in STRATEGIES, "train.strategy",
         f"must be one of {', '.join(STRATEGIES)}")
    need(tr.lam >= 0, "train.lambda", "must be nonnegative")
    need(tr.weight_scheme in WEIGHT_SCHEMES, "train.weight_scheme",
         f"must be one of {', '.join(WEIGHT_SCHEMES)}")
    need(tr.lbfgs_max_iter >= 1 and tr.lbfgs_history >= 1, "train.lbfgs_max_iter",
         "L-BFGS iteration cap and history must be >= 1")
    need(tr.adam_iters >= 1 and tr.adam_batch >= 1, "train.adam_iters",
         "Adam iterations and batch must be >= 1")
    need(tr.adam_lr >= 0, "train.adam_lr", "must be nonnegative")
    if cfg.horizon_times:
        hs = cfg.horizon_times
        need(all(b > a for a, b in zip(hs, hs[1:])) and hs[0] > 0, "horizons.times",
             "must be positive and strictly increasing")
        need(abs(hs[-1] - ds.t_final) <= 1e-12 * max(1.0, ds.t_final), "horizons.times",
             "last horizon must equal dataset.t_final")
        if cfg.horizon_lambdas:
            need(len(cfg.horizon_lambdas) == len(hs), "horizons.lambdas",
                 "length must match horizons.times")
    elif cfg.horizon_lambdas:
        raise ConfigError("horizons.lambdas: set horizons.times as well")
    mg = cfg.marginal
    need(len(mg.axes) == 2 and mg.axes[0] != mg.axes[1], "marginal.axes",
         "must name two distinct state indices")
    need(len(mg.x_range) == 2 and mg.x_range[0] < mg.x_range[1], "marginal.x_range",
         "must be low,high with low < high")
    need(len(mg.y_range) == 2 and mg.y_range[0] < mg.y_range[1], "marginal.y_range",
         "must be low,high with low < high")
    need(mg.points >= 2 and mg.quad_points >= 2 and mg.interval_points >= 2,
         "marginal.points", "grid resolutions must be >= 2")
    need(not (mg.quad and mg.interval), "marginal.quad",
         "quadrature marginalization and interval averaging cannot be mixed")
    need(len(mg.times) >= 1, "marginal.times", "need at least one snapshot time")
    need(cfg.plot.kind in ("error_curve", "heatmap"), "plot.kind",
         "must be error_curve or heatmap")
