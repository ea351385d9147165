"""Command-line front end.

Verbs: ``run`` executes an optimization described by a JSON config and
writes the density field, convergence history, and a summary report;
``check`` validates any written density field against milling
directions; ``presets`` prints the built-in benchmark setups.

Exit codes: 0 success, 1 configuration or input error, 2 numerical
failure during the run.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fea import FeaProblem, MaterialModel, SolverError, face_nodes, node_index
from .fieldio import (
    read_field,
    read_init_field,
    write_convergence_csv,
    write_field,
)
from .filters import build_filter
from .grid import StructuredGrid, build_grid
from .machining import (
    HeavisideParams,
    build_ray_sets,
    monotonicity_violation,
    smooth_step,
)
from .optimizer import OptimizationConfig, OptimizationError, Optimizer

MACHINABLE_TOLERANCE = 1e-15
SATURATION_LIMIT = 0.4


class ConfigError(ValueError):
    """Bad configuration or unusable input file."""


@dataclass(frozen=True)
class Preset:
    extents: tuple[int, ...]
    volfrac: float
    note: str


PRESETS = {
    "cantilever2d": Preset(
        (100, 100), 0.2, "left edge clamped, unit downward load at the bottom-right corner"
    ),
    "cantilever3d": Preset(
        (144, 48, 48), 0.3, "left face clamped, unit downward load at mid-height of the right face"
    ),
    "mbb3d": Preset(
        (144, 48, 48),
        0.2,
        "half model: symmetry plane at x=0, bottom-right edge clamped, "
        "unit downward load at the top of the symmetry plane",
    ),
    "custom": Preset((), 0.0, "cantilever-style supports on user-supplied extents"),
}

_TOP_KEYS = {
    "preset", "extents", "volfrac", "rmin", "penal", "emin", "mode",
    "directions", "d0", "heaviside", "optimizer", "output_dir", "init_field",
}
_HEAVISIDE_KEYS = {"slope1", "shift1", "slope2", "shift2"}
_OPTIMIZER_KEYS = {
    "max_iterations", "change_tolerance", "move_limit", "damping",
    "initial_void", "solver", "rtol",
}


@dataclass(frozen=True)
class RunConfig:
    preset: str
    extents: tuple[int, ...]
    volfrac: float
    rmin: float
    penal: float
    emin: float
    mode: str
    directions: tuple[tuple[float, ...], ...]
    d0: float
    heaviside: HeavisideParams
    max_iterations: int | None
    change_tolerance: float
    move_limit: float
    damping: float
    initial_void: float
    solver: str
    rtol: float
    output_dir: str
    init_field: str | None


def _require(condition: bool, path: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{path}: {message}")


def _number(raw, path: str) -> float:
    _require(isinstance(raw, (int, float)) and not isinstance(raw, bool), path, "must be a number")
    value = float(raw)
    _require(np.isfinite(value), path, "must be finite")
    return value


def _unit_vector(raw, ndim: int, path: str) -> tuple[float, ...]:
    _require(isinstance(raw, (list, tuple)), path, "must be a list of numbers")
    _require(len(raw) == ndim, path, f"must have {ndim} components for these extents")
    vec = np.array([_number(c, f"{path}[{i}]") for i, c in enumerate(raw)])
    norm = float(np.linalg.norm(vec))
    _require(norm > 1e-12, path, "must not be the zero vector")
    return tuple(vec / norm)


def parse_config(text: str) -> RunConfig:
    """Validate a JSON run description and fill in the documented defaults."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    _require(isinstance(raw, dict), "config", "must be a JSON object")

    unknown = sorted(set(raw) - _TOP_KEYS)
    unknown += sorted(f"heaviside.{k}" for k in set(raw.get("heaviside", {})) - _HEAVISIDE_KEYS)
    unknown += sorted(f"optimizer.{k}" for k in set(raw.get("optimizer", {})) - _OPTIMIZER_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    preset = raw.get("preset")
    _require(preset is not None, "preset", "is required")
    _require(preset in PRESETS, "preset", f"must be one of {sorted(PRESETS)}")

    if "extents" in raw:
        ext_raw = raw["extents"]
        _require(isinstance(ext_raw, (list, tuple)), "extents", "must be a list of integers")
        _require(len(ext_raw) in (2, 3), "extents", "must have 2 or 3 entries")
        for i, e in enumerate(ext_raw):
            _require(
                isinstance(e, int) and not isinstance(e, bool) and e >= 1,
                f"extents[{i}]", "must be a positive integer",
            )
        extents = tuple(ext_raw)
    else:
        _require(preset != "custom", "extents", "is required for the custom preset")
        extents = PRESETS[preset].extents
    if preset in ("cantilever3d", "mbb3d"):
        _require(len(extents) == 3, "extents", f"{preset} needs 3 entries")
    if preset == "cantilever2d":
        _require(len(extents) == 2, "extents", "cantilever2d needs 2 entries")
    ndim = len(extents)

    if "volfrac" in raw:
        volfrac = _number(raw["volfrac"], "volfrac")
    else:
        _require(preset != "custom", "volfrac", "is required for the custom preset")
        volfrac = PRESETS[preset].volfrac
    _require(0.0 < volfrac < 1.0, "volfrac", "must lie in (0, 1)")

    rmin = _number(raw.get("rmin", 4.0), "rmin")
    _require(rmin > 0.0, "rmin", "must be positive")
    penal = _number(raw.get("penal", 3.0), "penal")
    _require(penal >= 1.0, "penal", "must be at least 1")
    emin = _number(raw.get("emin", 1e-9), "emin")
    _require(0.0 < emin < 1.0, "emin", "must lie in (0, 1)")
    d0 = _number(raw.get("d0", 0.5), "d0")
    _require(0.0 < d0 <= 1.0, "d0", "must lie in (0, 1]")

    dirs_raw = raw.get("directions", [])
    _require(isinstance(dirs_raw, (list, tuple)), "directions", "must be a list of vectors")
    directions = tuple(
        _unit_vector(v, ndim, f"directions[{i}]") for i, v in enumerate(dirs_raw)
    )

    mode = raw.get("mode", "machining" if directions else "reference")
    _require(mode in ("reference", "machining"), "mode", "must be reference or machining")
    _require(
        mode != "machining" or len(directions) > 0,
        "directions", "machining mode needs at least one direction",
    )

    heav = raw.get("heaviside", {})
    try:
        heaviside = HeavisideParams(
            slope1=_number(heav.get("slope1", 10.0), "heaviside.slope1"),
            shift1=_number(heav.get("shift1", 3.0), "heaviside.shift1"),
            slope2=_number(heav.get("slope2", 6.0), "heaviside.slope2"),
            shift2=_number(heav.get("shift2", 3.0), "heaviside.shift2"),
        )
    except ValueError as err:
        raise ConfigError(f"heaviside: {err}") from None

    opt = raw.get("optimizer", {})
    max_iterations = opt.get("max_iterations")
    if max_iterations is not None:
        _require(
            isinstance(max_iterations, int) and not isinstance(max_iterations, bool)
            and max_iterations >= 1,
            "optimizer.max_iterations", "must be a positive integer",
        )
    change_tolerance = _number(opt.get("change_tolerance", 0.01), "optimizer.change_tolerance")
    _require(change_tolerance > 0.0, "optimizer.change_tolerance", "must be positive")
    move_limit = _number(opt.get("move_limit", 0.2), "optimizer.move_limit")
    _require(0.0 < move_limit <= 1.0, "optimizer.move_limit", "must lie in (0, 1]")
    damping = _number(opt.get("damping", 0.5), "optimizer.damping")
    _require(0.0 < damping <= 1.0, "optimizer.damping", "must lie in (0, 1]")
    initial_void = _number(opt.get("initial_void", 0.7), "optimizer.initial_void")
    _require(0.0 <= initial_void <= 1.0, "optimizer.initial_void", "must lie in [0, 1]")
    solver = opt.get("solver", "auto")
    _require(solver in ("auto", "direct", "cg"), "optimizer.solver", "must be auto, direct, or cg")
    rtol = _number(opt.get("rtol", 1e-8), "optimizer.rtol")
    _require(0.0 < rtol < 1.0, "optimizer.rtol", "must lie in (0, 1)")

    output_dir = raw.get("output_dir", "out")
    _require(isinstance(output_dir, str) and output_dir != "", "output_dir", "must be a path")
    init_field = raw.get("init_field")
    if init_field is not None:
        _require(isinstance(init_field, str), "init_field", "must be a path")

    return RunConfig(
        preset=preset,
        extents=extents,
        volfrac=volfrac,
        rmin=rmin,
        penal=penal,
        emin=emin,
        mode=mode,
        directions=directions,
        d0=d0,
        heaviside=heaviside,
        max_iterations=max_iterations,
        change_tolerance=change_tolerance,
        move_limit=move_limit,
        damping=damping,
        initial_void=initial_void,
        solver=solver,
        rtol=rtol,
        output_dir=output_dir,
        init_field=init_field,
    )


def _boundary_conditions(cfg: RunConfig, grid: StructuredGrid):
    ndim = grid.ndim
    ext = cfg.extents

    def clamp_face(axis: int, side: int) -> np.ndarray:
        nodes = face_nodes(grid, axis, side)
        return np.concatenate([ndim * nodes + c for c in range(ndim)])

    if cfg.preset == "mbb3d":
        symmetry = 3 * face_nodes(grid, 0, 0)  # x displacement only
        edge = np.array(
            [node_index(grid, (ext[0], 0, k)) for k in range(ext[2] + 1)]
        )
        fixed = np.concatenate([symmetry] + [3 * edge + c for c in range(3)])
        load_node = node_index(grid, (0, ext[1], ext[2] // 2))
        return fixed, [(load_node, 1, -1.0)]

    # cantilever-style: cantilever2d, cantilever3d, custom
    fixed = clamp_face(0, 0)
    if ndim == 2:
        load_node = node_index(grid, (ext[0], 0))
    else:
        load_node = node_index(grid, (ext[0], 0, ext[2] // 2))
    return fixed, [(load_node, 1, -1.0)]


def _saturation_warning(cfg: RunConfig, directions) -> str | None:
    if not directions:
        return None
    longest = max(md.max_ray_length for md in directions)
    floor = float(smooth_step(np.array(0.0), cfg.heaviside.slope1, cfg.heaviside.shift1))
    bias = longest * floor
    if bias <= SATURATION_LIMIT:
        return None
    return (
        f"warning: rays up to {longest} elements long accumulate {bias:.3f} "
        f"even when fully void ({floor:.5f} per element); the projection "
        "will bias toward solid at this scale"
    )


def run_command(cfg: RunConfig, stdout=None) -> dict:
    """Execute one optimization and write its artifacts; returns the summary."""
    out = stdout if stdout is not None else sys.stdout
    grid = build_grid(cfg.extents)
    material = MaterialModel(min_modulus=cfg.emin, penalization=cfg.penal)
    fixed, loads = _boundary_conditions(cfg, grid)
    problem = FeaProblem(grid, fixed, loads, material=material)
    kernel = build_filter(grid, cfg.rmin)
    directions = []
    if cfg.mode == "machining":
        directions = [build_ray_sets(grid, v, cfg.d0) for v in cfg.directions]
        warning = _saturation_warning(cfg, directions)
        if warning:
            print(warning, file=sys.stderr)

    opt_config = OptimizationConfig(
        volume_limit=cfg.volfrac,
        mode=cfg.mode,
        max_iterations=cfg.max_iterations,
        change_tolerance=cfg.change_tolerance,
        move_limit=cfg.move_limit,
        damping=cfg.damping,
        initial_void=cfg.initial_void,
    )
    optimizer = Optimizer(
        problem,
        kernel,
        opt_config,
        directions=directions if cfg.mode == "machining" else None,
        solver=cfg.solver,
        rtol=cfg.rtol,
        heaviside=cfg.heaviside,
    )
    init = None
    if cfg.init_field is not None:
        try:
            init = read_init_field(cfg.init_field, grid.num_elements)
        except (OSError, ValueError) as err:
            raise ConfigError(f"init_field: {err}") from None

    def report(record):
        print(
            f"iter {record.iteration:4d}  compliance {record.compliance:.6e}  "
            f"volume {record.volume:.4f}  change {record.change:.4f}",
            file=out,
        )

    result = optimizer.run(initial_void=init, callback=report)

    machinability = []
    if cfg.mode == "machining":
        for md, vec, per_direction in zip(directions, cfg.directions, result.state.cache.fields):
            violation = monotonicity_violation(md, per_direction)
            machinability.append(
                {
                    "direction": list(vec),
                    "violation": violation,
                    "verdict": "pass" if violation <= MACHINABLE_TOLERANCE else "fail",
                }
            )

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_convergence_csv(out_dir / "convergence.csv", result.history)
    density_name = "density.vtk" if grid.ndim == 3 else "density.pgm"
    write_field(out_dir / density_name, result.state.rho_physical, cfg.extents)

    summary = {
        "compliance": result.compliance,
        "volume": result.volume,
        "iterations": len(result.history),
        "converged": result.converged,
        "runtime_seconds": result.history[-1].wall_time if result.history else 0.0,
        "machinability": machinability,
        "settings": {
            "preset": cfg.preset,
            "extents": list(cfg.extents),
            "volfrac": cfg.volfrac,
            "rmin": cfg.rmin,
            "penal": cfg.penal,
            "emin": cfg.emin,
            "mode": cfg.mode,
            "directions": [list(v) for v in cfg.directions],
            "d0": cfg.d0,
            "heaviside": {
                "slope1": cfg.heaviside.slope1,
                "shift1": cfg.heaviside.shift1,
                "slope2": cfg.heaviside.slope2,
                "shift2": cfg.heaviside.shift2,
            },
            "optimizer": {
                "max_iterations": cfg.max_iterations,
                "change_tolerance": cfg.change_tolerance,
                "move_limit": cfg.move_limit,
                "damping": cfg.damping,
                "initial_void": cfg.initial_void,
                "solver": cfg.solver,
                "rtol": cfg.rtol,
            },
            "init_field": cfg.init_field,
        },
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(
        f"done: compliance {result.compliance:.6f}  volume {result.volume:.6f}  "
        f"iterations {len(result.history)}  artifacts in {out_dir}",
        file=out,
    )
    return summary


def check_command(field_path, direction_specs, d0: float = 0.5, stdout=None) -> list[dict]:
    """Threshold a written field at 0.5 and measure ray monotonicity per direction."""
    out = stdout if stdout is not None else sys.stdout
    _require(0.0 < d0 <= 1.0, "--d0", "must lie in (0, 1]")
    try:
        field, extents = read_field(field_path)
    except (OSError, ValueError) as err:
        raise ConfigError(f"cannot read {field_path}: {err}") from None
    grid = build_grid(extents)
    binary = (field >= 0.5).astype(float)
    report = []
    for i, spec in enumerate(direction_specs):
        vec = _unit_vector(spec, grid.ndim, f"--dir[{i}]")
        md = build_ray_sets(grid, vec, d0)
        violation = monotonicity_violation(md, binary)
        verdict = "pass" if violation <= MACHINABLE_TOLERANCE else "fail"
        report.append({"direction": list(vec), "violation": violation, "verdict": verdict})
        pretty = ",".join(f"{c:g}" for c in vec)
        print(f"direction {pretty}: max violation {violation:.9g} ({verdict})", file=out)
    return report


def presets_command(stdout=None) -> None:
    out = stdout if stdout is not None else sys.stdout
    table = {
        name: {"extents": list(p.extents), "volfrac": p.volfrac, "setup": p.note}
        for name, p in PRESETS.items()
        if name != "custom"
    }
    print(json.dumps(table, indent=2), file=out)


def _parse_dir_option(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise ConfigError(f"--dir {text!r} is not a comma-separated vector") from None


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; keep 2 reserved for numerics
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="milltopo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="optimize per a JSON config file")
    run.add_argument("config", help="path to the JSON run description")
    check = sub.add_parser("check", help="verify machinability of a written field")
    check.add_argument("field", help="density file produced by run (.vtk or .pgm)")
    check.add_argument(
        "--dir", dest="directions", action="append", required=True,
        metavar="X,Y[,Z]", help="milling direction; repeat for several",
    )
    check.add_argument("--d0", type=float, default=0.5, help="ray capture radius")
    sub.add_parser("presets", help="print the built-in benchmark setups")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            try:
                text = Path(args.config).read_text()
            except OSError as err:
                raise ConfigError(f"cannot read config: {err}") from None
            run_command(parse_config(text))
        elif args.command == "check":
            specs = [_parse_dir_option(d) for d in args.directions]
            check_command(args.field, specs, d0=args.d0)
        else:
            presets_command()
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OptimizationError, SolverError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
