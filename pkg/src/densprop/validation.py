"""Model validation: per-snapshot NRMSE against held-out trajectories, and
tensor-grid density evaluation with quadrature marginalization or conditional
slicing for visualization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .density_net import DensityNetwork, join_inputs
from .dynamics import CharacteristicDataset
from .textio import fmt_float, fmt_float_list, parse_float_list

GRID_FORMAT = "densprop-grid-1"

# tensor-product evaluation refuses beyond this many network evaluations
DEFAULT_EVAL_CAP = 5_000_000

_EVAL_CHUNK = 65536

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class ValidationReport:
    snapshot_times: np.ndarray
    nrmse: np.ndarray           # NaN where the truth norm vanishes
    dataset_size: int

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.nrmse)


def nrmse_values(predicted, truth) -> float:
    """Root-mean-square error of predictions normalized by the RMS of the truth,
    both in density space. Returns NaN when the truth norm is zero."""
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    denom = np.sqrt(np.sum(truth * truth))
    if denom == 0.0:
        return float("nan")
    return float(np.sqrt(np.sum((predicted - truth) ** 2)) / denom)


def nrmse(net: DensityNetwork, val_data: CharacteristicDataset) -> ValidationReport:
    """Per-snapshot NRMSE of exp(psi) against the stored densities.

    Snapshots are identified by the dataset's snapshot provenance so that every
    point contributes exactly once; an all-zero truth snapshot is reported as
    undefined (NaN) without affecting the others."""
    snaps = np.unique(val_data.snap_index)
    times = np.empty(len(snaps))
    errors = np.empty(len(snaps))
    pred = np.exp(net.forward(join_inputs(val_data.states, val_data.times)))
    truth = np.exp(val_data.log_rho)
    counted = 0
    for j, snap in enumerate(snaps):
        mask = val_data.snap_index == snap
        counted += int(mask.sum())
        times[j] = val_data.times[mask][0]
        errors[j] = nrmse_values(pred[mask], truth[mask])
    assert counted == len(val_data)
    return ValidationReport(times, errors, len(val_data))


def save_nrmse_table(report: ValidationReport, path) -> None:
    lines = ["t,nrmse"]
    for t, v in zip(report.snapshot_times, report.nrmse):
        lines.append(f"{fmt_float(t)},{fmt_float(v)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Density grids
# ---------------------------------------------------------------------------

@dataclass
class DensityGrid:
    """2-d density table over two selected state axes at one snapshot time.

    The remaining coordinates are either fixed, integrated out (marginal), or
    interval-averaged; `reduced` records that treatment per dimension."""

    axis_indices: tuple       # 1-based state indices of the two grid axes
    axis_names: tuple
    x_grid: np.ndarray
    y_grid: np.ndarray
    values: np.ndarray        # (len(x_grid), len(y_grid)), nonnegative
    t: float
    kind: str                 # marginal | conditional
    reduced: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.x_grid) <= 0) or np.any(np.diff(self.y_grid) <= 0):
            raise ValueError("grid axes must be strictly increasing")
        if self.values.shape != (len(self.x_grid), len(self.y_grid)):
            raise ValueError("values shape does not match the grids")
        if np.any(self.values < 0):
            raise ValueError("density values must be nonnegative")

    @property
    def mass(self) -> float:
        """Trapezoid integral of the table over the two grid axes."""
        inner = _trapezoid(self.values, self.y_grid, axis=1)
        return float(_trapezoid(inner, self.x_grid))


def _batched_density(net, X):
    out = np.empty(len(X))
    for start in range(0, len(X), _EVAL_CHUNK):
        sl = slice(start, min(start + _EVAL_CHUNK, len(X)))
        out[sl] = np.exp(net.forward(X[sl]))
    return out


def _tensor_inputs(dim, axes0, x_grid, y_grid, quad_axes, quad_grids, fixed, t):
    """Assemble all (x, t) rows of the tensor product grid.

    Order: x-axis slowest, then y-axis, then the quadrature axes in the given
    order; that layout lets the caller reshape and reduce trailing axes."""
    grids = [x_grid, y_grid] + list(quad_grids)
    mesh = np.meshgrid(*grids, indexing="ij")
    n = mesh[0].size
    X = np.empty((n, dim + 1))
    for pos, ax in enumerate([*axes0, *quad_axes]):
        X[:, ax] = mesh[pos].ravel()
    for ax, value in fixed.items():
        X[:, ax] = value
    X[:, dim] = t
    return X, tuple(len(g) for g in grids)


def _evaluate_reduced(net, dim, axes0, x_grid, y_grid, quad_axes, quad_grids,
                      fixed, t, eval_cap, average):
    n_eval = len(x_grid) * len(y_grid) * int(np.prod([len(g) for g in quad_grids] or [1]))
    if n_eval > eval_cap:
        raise ValueError(
            f"grid would need {n_eval} network evaluations (cap {eval_cap}); "
            "reduce the grid resolution, the quadrature resolution, or the "
            "number of marginalized dimensions")
    X, shape = _tensor_inputs(dim, axes0, x_grid, y_grid, quad_axes, quad_grids,
                              fixed, t)
    vals = _batched_density(net, X).reshape(shape)
    # reduce the trailing quadrature axes innermost-first
    for g in reversed(quad_grids):
        vals = _trapezoid(vals, g, axis=-1)
        if average:
            width = g[-1] - g[0]
            vals = vals / width
    return vals


def marginal_grid(net: DensityNetwork, axes, x_grid, y_grid, t, *,
                  quad_bounds=None, quad_points: int = 41, fixed=None,
                  eval_cap: int = DEFAULT_EVAL_CAP) -> DensityGrid:
    """Joint density on the (axes[0], axes[1]) grid with the dimensions listed in
    quad_bounds integrated out by trapezoid quadrature.

    axes are 1-based state indices. quad_bounds maps 1-based dimension ->
    (low, high); dimensions in `fixed` (1-based -> value) are sliced instead.
    Marginalizing zero axes is a pure slice evaluation.
    """
    dim = net.arch.input_dim - 1
    axes = tuple(int(a) for a in axes)
    quad_bounds = dict(quad_bounds or {})
    fixed = dict(fixed or {})
    _check_axes(dim, axes, quad_bounds, fixed)
    x_grid = np.asarray(x_grid, dtype=float)
    y_grid = np.asarray(y_grid, dtype=float)
    quad_axes = [a - 1 for a in sorted(quad_bounds)]
    quad_grids = [np.linspace(quad_bounds[a + 1][0], quad_bounds[a + 1][1], quad_points)
                  for a in quad_axes]
    vals = _evaluate_reduced(net, dim, (axes[0] - 1, axes[1] - 1), x_grid, y_grid,
                             quad_axes, quad_grids,
                             {a - 1: v for a, v in fixed.items()}, t, eval_cap,
                             average=False)
    reduced = {f"x{a}": f"integrated[{fmt_float(b[0])},{fmt_float(b[1])}]x{quad_points}"
               for a, b in quad_bounds.items()}
    reduced.update({f"x{a}": f"fixed@{fmt_float(v)}" for a, v in fixed.items()})
    return DensityGrid(axes, (f"x{axes[0]}", f"x{axes[1]}"), x_grid, y_grid,
                       vals, float(t), "marginal", reduced)


def conditional_slice(net: DensityNetwork, axes, x_grid, y_grid, t, *, fixed=None,
                      intervals=None, interval_points: int = 21,
                      eval_cap: int = DEFAULT_EVAL_CAP) -> DensityGrid:
    """Unnormalized conditional slice: the joint density evaluated with the
    remaining coordinates pinned at exact values, or averaged over an interval
    by trapezoid quadrature (intervals: 1-based dim -> (low, high)).

    A zero-width interval degenerates to the exact-value slice. Values are
    proportional to the joint density on the slice; no normalization over the
    conditioning variables is applied.
    """
    dim = net.arch.input_dim - 1
    axes = tuple(int(a) for a in axes)
    fixed = dict(fixed or {})
    intervals = dict(intervals or {})
    degenerate = {a: b[0] for a, b in intervals.items() if b[0] == b[1]}
    fixed.update(degenerate)
    intervals = {a: b for a, b in intervals.items() if a not in degenerate}
    _check_axes(dim, axes, intervals, fixed)
    x_grid = np.asarray(x_grid, dtype=float)
    y_grid = np.asarray(y_grid, dtype=float)
    quad_axes = [a - 1 for a in sorted(intervals)]
    quad_grids = [np.linspace(intervals[a + 1][0], intervals[a + 1][1], interval_points)
                  for a in quad_axes]
    vals = _evaluate_reduced(net, dim, (axes[0] - 1, axes[1] - 1), x_grid, y_grid,
                             quad_axes, quad_grids,
                             {a - 1: v for a, v in fixed.items()}, t, eval_cap,
                             average=True)
    reduced = {f"x{a}": f"averaged[{fmt_float(b[0])},{fmt_float(b[1])}]x{interval_points}"
               for a, b in intervals.items()}
    reduced.update({f"x{a}": f"fixed@{fmt_float(v)}" for a, v in fixed.items()})
    return DensityGrid(axes, (f"x{axes[0]}", f"x{axes[1]}"), x_grid, y_grid,
                       vals, float(t), "conditional", reduced)


def _check_axes(dim, axes, reduced_dims, fixed):
    if len(axes) != 2 or axes[0] == axes[1]:
        raise ValueError("need two distinct grid axes")
    named = set(axes) | set(reduced_dims) | set(fixed)
    if any(a < 1 or a > dim for a in named):
        raise ValueError(f"state indices must lie in 1..{dim}")
    missing = set(range(1, dim + 1)) - named
    if missing:
        raise ValueError(f"dimensions {sorted(missing)} are neither on the grid, "
                         "reduced, nor fixed")
    overlap = (set(axes) & set(reduced_dims)) | (set(axes) & set(fixed)) \
        | (set(reduced_dims) & set(fixed))
    if overlap:
        raise ValueError(f"dimensions {sorted(overlap)} assigned twice")


# ---------------------------------------------------------------------------
# Grid persistence: '#'-prefixed header metadata, then a numeric CSV body
# ---------------------------------------------------------------------------

def save_grid(grid: DensityGrid, path) -> None:
    header = {
        "format": GRID_FORMAT,
        "kind": grid.kind,
        "t": fmt_float(grid.t),
        "xaxis": grid.axis_names[0],
        "yaxis": grid.axis_names[1],
        "xindex": str(grid.axis_indices[0]),
        "yindex": str(grid.axis_indices[1]),
        "xgrid": fmt_float_list(grid.x_grid),
        "ygrid": fmt_float_list(grid.y_grid),
        "reduced": ";".join(f"{k}={v}" for k, v in sorted(grid.reduced.items())),
    }
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in header.items():
            fh.write(f"# {k} = {v}\n")
        for row in grid.values:
            fh.write(",".join(fmt_float(v) for v in row) + "\n")


def load_grid(path) -> DensityGrid:
    header = {}
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                header[key.strip()] = value.strip()
            else:
                rows.append([float(tok) for tok in line.split(",")])
    tag = header.get("format", "<missing>")
    if tag != GRID_FORMAT:
        raise ValueError(f"{path}: unsupported grid format {tag!r}")
    reduced = {}
    if header.get("reduced"):
        for item in header["reduced"].split(";"):
            k, _, v = item.partition("=")
            reduced[k] = v
    return DensityGrid(
        axis_indices=(int(header["xindex"]), int(header["yindex"])),
        axis_names=(header["xaxis"], header["yaxis"]),
        x_grid=parse_float_list(header["xgrid"]),
        y_grid=parse_float_list(header["ygrid"]),
        values=np.array(rows, dtype=float),
        t=float(header["t"]),
        kind=header["kind"],
        reduced=reduced,
    )
