"""Command-line driver tying solvers, probes, and reports into experiments.

The `qsurf` entry point reads a JSON experiment config, runs one subcommand
(solve, verify-qi, classify, probes, reference, sakai, or all), writes field
files, CSV and JSON reports, and rendered figures into the output directory,
and finishes with a manifest.json recording the config hash, library
versions, wall time, and a verdict for every check it evaluated.

Exit codes: 0 when every evaluated check passes, 2 when at least one check
fails its threshold, 1 on configuration or runtime errors. Timestamps live
in a dedicated manifest key so reruns of one config are byte-identical
everywhere else.

Heavy numerical imports happen inside functions so that the thread cap from
--threads or QSURF_THREADS is in place before the numerics load.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

__all__ = [
    "CheckSpec",
    "ConfigError",
    "ExperimentConfig",
    "GridBlock",
    "MeasureBlock",
    "MissingInputError",
    "main",
    "parse_config",
    "run",
]

SUBCOMMANDS = ("solve", "verify-qi", "classify", "probes", "reference", "sakai", "all")

_TOP_KEYS = {"grid", "measures", "g", "solve", "checks", "output"}
_GRID_KEYS = {"dim", "origin", "h", "cells"}
_MEASURE_KEYS = {"phase", "sign", "atoms", "shells"}
_ATOM_KEYS = {"center", "mass", "mollifier_radius"}
_SHELL_KEYS = {"center", "radius", "surface_density", "mollifier_radius"}
_G_KEYS = {"constant", "field_file"}
_SOLVE_KEYS = {
    "max_outer_iters",
    "regularization_schedule",
    "descent_step",
    "energy_tol",
    "support_tau",
    "seed_mode",
}

_CHECK_PARAMS: dict[str, dict[str, Any]] = {
    "qi": {"tolerance": 0.05, "kernel_count": 8, "max_degree": 2},
    "support_inclusion": {"halo_cells": 1},
    "junction": {"r_scan_cells": 4.0},
    "reflect": {"normal": None, "offset": 0.0, "flip_sign": True, "tolerance": 1e-4},
    "nondegeneracy": {"center": None, "radii_cells": [4.0, 3.0, 2.0], "d_min": None},
    "density": {"center": None, "r_cells": 4.0, "threshold": 0.05},
    "poincare": {"center": None, "r_cells": 4.0, "threshold": 1.0},
    "cjk": {"r_hi_cells": 16.0, "r_lo_cells": 4.0, "epsilon": 0.1, "max_centers": 8},
    "sakai": {"c_bound": None, "radii_cells": [16.0, 8.0, 4.0, 2.0]},
}

_CHECK_OWNER = {
    "support_inclusion": "solve",
    "qi": "verify-qi",
    "junction": "classify",
    "reflect": "probes",
    "nondegeneracy": "probes",
    "density": "probes",
    "poincare": "probes",
    "cjk": "probes",
    "sakai": "sakai",
}


class ConfigError(ValueError):
    """Raised for malformed or invalid experiment configs."""


class MissingInputError(RuntimeError):
    """Raised when a subcommand needs artifacts an earlier one has not written."""


@dataclass(frozen=True)
class GridBlock:
    dim: int
    origin: tuple[float, ...]
    h: float
    cells: tuple[int, ...]


@dataclass(frozen=True)
class MeasureBlock:
    phase: int
    sign: int
    atoms: tuple[dict, ...]
    shells: tuple[dict, ...]


@dataclass(frozen=True)
class CheckSpec:
    name: str
    params: dict


@dataclass
class ExperimentConfig:
    """Validated experiment description plus its canonical hash."""

    grid: GridBlock
    measures: list[MeasureBlock]
    g_constant: float | None
    g_field_file: Path | None
    solve_options: Any
    checks: list[CheckSpec]
    output: Path
    raw: dict
    digest: str

    def check(self, name: str) -> CheckSpec | None:
        for spec in self.checks:
            if spec.name == name:
                return spec
        return None


# ---------------------------------------------------------------------------
# Config parsing


def _expect_number(value: Any, label: str, errors: list[str], positive: bool = False) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        errors.append(f"{label} must be a number")
        return 1.0
    if positive and value <= 0:
        errors.append(f"{label} must be positive")
        return 1.0
    return float(value)


def _expect_vector(value: Any, dim: int, label: str, errors: list[str]) -> tuple[float, ...]:
    if (
        not isinstance(value, list)
        or len(value) != dim
        or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value)
    ):
        errors.append(f"{label} must be a list of {dim} numbers")
        return (0.0,) * dim
    return tuple(float(v) for v in value)


def _unknown_keys(block: dict, allowed: set[str], label: str, errors: list[str]) -> None:
    for key in block:
        if key not in allowed:
            errors.append(f"unknown key {key!r} in {label}")


def _parse_grid(raw: Any, errors: list[str]) -> GridBlock:
    if not isinstance(raw, dict):
        errors.append("grid must be an object")
        return GridBlock(2, (0.0, 0.0), 1.0, (8, 8))
    _unknown_keys(raw, _GRID_KEYS, "grid", errors)
    missing = _GRID_KEYS - set(raw)
    for key in sorted(missing):
        errors.append(f"grid.{key} is required")
    if missing:
        return GridBlock(2, (0.0, 0.0), 1.0, (8, 8))
    dim = raw["dim"]
    if dim not in (2, 3):
        errors.append("grid.dim must be 2 or 3")
        dim = 2
    origin = _expect_vector(raw["origin"], dim, "grid.origin", errors)
    h = _expect_number(raw["h"], "grid.h", errors, positive=True)
    cells_raw = raw["cells"]
    if (
        not isinstance(cells_raw, list)
        or len(cells_raw) != dim
        or any(isinstance(c, bool) or not isinstance(c, int) for c in cells_raw)
    ):
        errors.append(f"grid.cells must be a list of {dim} integers")
        cells = (8,) * dim
    else:
        cells = tuple(int(c) for c in cells_raw)
        if any(c < 8 for c in cells):
            errors.append("grid.cells entries must be at least 8")
            cells = tuple(max(c, 8) for c in cells)
    return GridBlock(dim=dim, origin=origin, h=h, cells=cells)


def _parse_measures(raw: Any, dim: int, errors: list[str]) -> list[MeasureBlock]:
    if not isinstance(raw, list) or not raw:
        errors.append("measures must be a non-empty list")
        return []
    blocks: list[MeasureBlock] = []
    for idx, entry in enumerate(raw):
        label = f"measures[{idx}]"
        if not isinstance(entry, dict):
            errors.append(f"{label} must be an object")
            continue
        _unknown_keys(entry, _MEASURE_KEYS, label, errors)
        phase = entry.get("phase")
        if isinstance(phase, bool) or not isinstance(phase, int) or phase < 1:
            errors.append(f"{label}.phase must be an integer >= 1")
            phase = idx + 1
        sign = entry.get("sign", 1)
        if sign not in (1, -1):
            errors.append(f"{label}.sign must be 1 or -1")
            sign = 1
        atoms = entry.get("atoms", [])
        shells = entry.get("shells", [])
        atom_specs: list[dict] = []
        shell_specs: list[dict] = []
        if not isinstance(atoms, list):
            errors.append(f"{label}.atoms must be a list")
            atoms = []
        if not isinstance(shells, list):
            errors.append(f"{label}.shells must be a list")
            shells = []
        for aidx, atom in enumerate(atoms):
            alabel = f"{label}.atoms[{aidx}]"
            if not isinstance(atom, dict):
                errors.append(f"{alabel} must be an object")
                continue
            _unknown_keys(atom, _ATOM_KEYS, alabel, errors)
            if _ATOM_KEYS - set(atom):
                for key in sorted(_ATOM_KEYS - set(atom)):
                    errors.append(f"{alabel}.{key} is required")
                continue
            atom_specs.append(
                {
                    "center": _expect_vector(atom["center"], dim, f"{alabel}.center", errors),
                    "mass": _expect_number(atom["mass"], f"{alabel}.mass", errors, positive=True),
                    "mollifier_radius": _expect_number(
                        atom["mollifier_radius"], f"{alabel}.mollifier_radius", errors, positive=True
                    ),
                }
            )
        for sidx, shell in enumerate(shells):
            slabel = f"{label}.shells[{sidx}]"
            if not isinstance(shell, dict):
                errors.append(f"{slabel} must be an object")
                continue
            _unknown_keys(shell, _SHELL_KEYS, slabel, errors)
            if _SHELL_KEYS - set(shell):
                for key in sorted(_SHELL_KEYS - set(shell)):
                    errors.append(f"{slabel}.{key} is required")
                continue
            shell_specs.append(
                {
                    "center": _expect_vector(shell["center"], dim, f"{slabel}.center", errors),
                    "radius": _expect_number(shell["radius"], f"{slabel}.radius", errors, positive=True),
                    "surface_density": _expect_number(
                        shell["surface_density"], f"{slabel}.surface_density", errors, positive=True
                    ),
                    "mollifier_radius": _expect_number(
                        shell["mollifier_radius"], f"{slabel}.mollifier_radius", errors, positive=True
                    ),
                }
            )
        if not atom_specs and not shell_specs:
            errors.append(f"{label} must contain at least one atom or shell")
        blocks.append(
            MeasureBlock(phase=phase, sign=sign, atoms=tuple(atom_specs), shells=tuple(shell_specs))
        )
    phases = [b.phase for b in blocks]
    if len(set(phases)) != len(phases):
        errors.append("measures phase indices must be distinct")
    elif phases and sorted(phases) != list(range(1, len(phases) + 1)):
        errors.append(
            f"measures phase indices must be contiguous from 1, got {sorted(phases)}"
        )
    signs = {b.phase: b.sign for b in blocks}
    if any(s == -1 for s in signs.values()):
        if sorted(signs) != [1, 2] or signs.get(1) != 1 or signs.get(2) != -1:
            errors.append(
                "a sign of -1 is only valid for a signed pair: phase 1 with sign 1 "
                "and phase 2 with sign -1"
            )
    blocks.sort(key=lambda b: b.phase)
    return blocks


def _parse_checks(raw: Any, errors: list[str]) -> list[CheckSpec]:
    if raw is None:
        return []
    if not isinstance(raw, list):
        errors.append("checks must be a list")
        return []
    specs: list[CheckSpec] = []
    seen: set[str] = set()
    for idx, entry in enumerate(raw):
        label = f"checks[{idx}]"
        if not isinstance(entry, dict):
            errors.append(f"{label} must be an object")
            continue
        name = entry.get("name")
        if name not in _CHECK_PARAMS:
            errors.append(
                f"{label}.name must be one of {sorted(_CHECK_PARAMS)}, got {name!r}"
            )
            continue
        if name in seen:
            errors.append(f"check {name!r} is enabled more than once")
            continue
        seen.add(name)
        allowed = set(_CHECK_PARAMS[name]) | {"name"}
        _unknown_keys(entry, allowed, label, errors)
        params = dict(_CHECK_PARAMS[name])
        for key, value in entry.items():
            if key != "name" and key in params:
                params[key] = value
        specs.append(CheckSpec(name=name, params=params))
    return specs


def parse_config(path: str | Path) -> ExperimentConfig:
    """Load and validate a JSON experiment config.

    Unknown keys anywhere in the document are hard errors naming the key,
    and all validation violations are reported together in one exception.
    Relative file paths inside the config resolve against the config's own
    directory and must exist at parse time.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    return build_config(raw, base_dir=path.parent)


def build_config(raw: Any, base_dir: str | Path = ".") -> ExperimentConfig:
    """Validate an already-loaded config dictionary (see :func:`parse_config`)."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    errors: list[str] = []
    _unknown_keys(raw, _TOP_KEYS, "config", errors)
    for key in ("grid", "measures", "g", "output"):
        if key not in raw:
            errors.append(f"config.{key} is required")
    grid = _parse_grid(raw.get("grid", {}), errors)
    measures = _parse_measures(raw.get("measures", []), grid.dim, errors)

    g_constant: float | None = None
    g_field_file: Path | None = None
    g_raw = raw.get("g", {})
    if not isinstance(g_raw, dict):
        errors.append("g must be an object")
    else:
        _unknown_keys(g_raw, _G_KEYS, "g", errors)
        has_const = "constant" in g_raw
        has_file = "field_file" in g_raw
        if has_const == has_file:
            errors.append("g must contain exactly one of 'constant' or 'field_file'")
        if has_const:
            g_constant = _expect_number(g_raw["constant"], "g.constant", errors, positive=True)
        if has_file:
            candidate = Path(base_dir) / str(g_raw["field_file"])
            if not candidate.with_suffix(".json").is_file():
                errors.append(f"g.field_file {candidate} does not exist")
            else:
                g_field_file = candidate

    solve_raw = raw.get("solve", {})
    solve_options: Any = None
    if not isinstance(solve_raw, dict):
        errors.append("solve must be an object")
        solve_raw = {}
    _unknown_keys(solve_raw, _SOLVE_KEYS, "solve", errors)
    kwargs = {k: v for k, v in solve_raw.items() if k in _SOLVE_KEYS}
    if "regularization_schedule" in kwargs:
        sched = kwargs["regularization_schedule"]
        if not isinstance(sched, list):
            errors.append("solve.regularization_schedule must be a list of numbers")
            kwargs.pop("regularization_schedule")
        else:
            kwargs["regularization_schedule"] = tuple(sched)
    from .minimize import SolveOptions

    try:
        solve_options = SolveOptions(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"solve: {exc}")
        solve_options = SolveOptions()

    checks = _parse_checks(raw.get("checks"), errors)
    sakai_spec = next((c for c in checks if c.name == "sakai"), None)
    if sakai_spec is not None and sakai_spec.params["c_bound"] is None:
        if g_constant is not None:
            sakai_spec.params["c_bound"] = g_constant
        else:
            errors.append("checks: sakai needs c_bound when g is not constant")

    output_raw = raw.get("output", "")
    if not isinstance(output_raw, str) or not output_raw:
        errors.append("output must be a non-empty directory path")
        output_raw = "qsurf_out"

    if errors:
        raise ConfigError(
            "invalid config ({} violation{}):\n  - {}".format(
                len(errors), "s" if len(errors) != 1 else "", "\n  - ".join(errors)
            )
        )
    digest = hashlib.sha256(
        json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
    return ExperimentConfig(
        grid=grid,
        measures=measures,
        g_constant=g_constant,
        g_field_file=g_field_file,
        solve_options=solve_options,
        checks=checks,
        output=Path(base_dir) / output_raw,
        raw=raw,
        digest=digest,
    )


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply dotted key=value overrides to a raw config dictionary."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must have the form key=value")
        key, _, text = item.partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node: Any = raw
        parts = key.split(".")
        for pos, part in enumerate(parts):
            last = pos == len(parts) - 1
            if isinstance(node, list):
                if not part.isdigit() or int(part) >= len(node):
                    raise ConfigError(f"override {key!r}: bad list index {part!r}")
                if last:
                    node[int(part)] = value
                else:
                    node = node[int(part)]
            elif isinstance(node, dict):
                if last:
                    node[part] = value
                else:
                    node = node.setdefault(part, {})
            else:
                raise ConfigError(f"override {key!r}: {part!r} is not a container")
    return raw


# ---------------------------------------------------------------------------
# Runtime assembly


def _build_grid(config: ExperimentConfig):
    from .grid import Grid

    block = config.grid
    return Grid(dim=block.dim, origin=block.origin, h=block.h, cells_per_axis=block.cells)


def _build_measures(config: ExperimentConfig) -> list:
    from .grid import Atom, MeasureSpec, Shell

    specs = []
    for block in config.measures:
        atoms = tuple(
            Atom(center=a["center"], mass=a["mass"], mollifier_radius=a["mollifier_radius"])
            for a in block.atoms
        )
        shells = tuple(
            Shell(
                center=s["center"],
                radius=s["radius"],
                surface_density=s["surface_density"],
                mollifier_radius=s["mollifier_radius"],
            )
            for s in block.shells
        )
        specs.append(MeasureSpec(atoms=atoms, shells=shells))
    return specs


def _build_g(config: ExperimentConfig, grid):
    from .grid import constant_field, load_field

    if config.g_constant is not None:
        return constant_field(grid, config.g_constant)
    g = load_field(config.g_field_file)
    if g.grid != grid:
        raise RuntimeError("g field file was sampled on a different grid")
    return g


def _solve_mode(config: ExperimentConfig) -> str:
    signs = [b.sign for b in config.measures]
    if len(signs) == 1:
        return "one"
    if signs == [1, -1]:
        return "two"
    return "multi"


# ---------------------------------------------------------------------------
# Artifact helpers


def _float_repr(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunContext:
    """Collects artifacts and check verdicts while a subcommand executes."""

    def __init__(self, config: ExperimentConfig, out_dir: Path) -> None:
        self.config = config
        self.out = out_dir
        self.artifacts: list[str] = []
        self.checks: list[dict] = []
        self._solution_cache: tuple | None = None

    def register(self, path: Path) -> Path:
        rel = path.relative_to(self.out).as_posix()
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return path

    def write_json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        body = {"config_sha256": self.config.digest}
        body.update(payload)
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return self.register(path)

    def write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
        path = self.out / name
        with path.open("w", newline="") as handle:
            handle.write(f"# config_sha256={self.config.digest}\n")
            writer = csv.writer(handle)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_float_repr(v) for v in row])
        return self.register(path)

    def save_field(self, name: str, field_obj) -> None:
        from .grid import save_field

        header, rawfile = save_field(field_obj, self.out / name)
        self.register(header)
        self.register(rawfile)

    def add_check(
        self, name: str, threshold: float, value: float, passed: bool, details: dict | None = None
    ) -> bool:
        entry = {
            "name": name,
            "threshold": threshold,
            "value": value,
            "verdict": "pass" if passed else "fail",
        }
        if details:
            entry["details"] = details
        self.checks.append(entry)
        return passed


def _load_solution(ctx: RunContext):
    """Reload the solve artifacts (mode, per-phase fields, signed view, tau)."""
    from .grid import load_field

    summary_path = ctx.out / "solution.json"
    if not summary_path.is_file():
        raise MissingInputError(
            f"no solve artifacts in {ctx.out}; run the solve subcommand first"
        )
    if ctx._solution_cache is not None:
        return ctx._solution_cache
    summary = json.loads(summary_path.read_text())
    mode = summary["mode"]
    tau = float(summary["tau"])
    if mode == "two":
        signed = load_field(ctx.out / "field_signed")
        loaded = (mode, [signed], signed, tau)
    else:
        count = int(summary["phase_count"])
        fields = [load_field(ctx.out / f"field_phase{i + 1}") for i in range(count)]
        loaded = (mode, fields, fields if count > 1 else fields[0], tau)
    ctx._solution_cache = loaded
    return loaded


def _boundary_rows(geometry, labels=None) -> tuple[list[str], list[list]]:
    dim = geometry.grid.dim
    header = ["x", "y", "z"][:dim] + ["n" + c for c in "xyz"[:dim]]
    header += ["weight", "phase_i", "phase_j"]
    if labels is not None:
        header.append("label")
    rows = []
    for k in range(geometry.midpoints.shape[0]):
        row = [float(v) for v in geometry.midpoints[k]]
        row += [float(v) for v in geometry.normals[k]]
        row += [float(geometry.weights[k]), int(geometry.phase_pairs[k][0]), int(geometry.phase_pairs[k][1])]
        if labels is not None:
            row.append(str(labels[k]))
        rows.append(row)
    return header, rows


def _auto_center(fields, tau: float, grid) -> tuple[float, ...]:
    """Deterministic default probe center: the phase-1 boundary midpoint with
    the largest clearance from the box faces (ties broken lexicographically)."""
    import numpy as np

    from .boundary import extract_contour

    geometry = extract_contour(fields[0], level=max(tau, 1e-300), sign=1)
    if geometry.midpoints.shape[0] == 0:
        raise RuntimeError("phase 1 has no boundary to probe")
    mids = geometry.midpoints
    lo = np.asarray(grid.box_min)
    hi = np.asarray(grid.box_max)
    clearance = np.minimum(mids - lo[None, :], hi[None, :] - mids).min(axis=1)
    order = sorted(
        range(mids.shape[0]), key=lambda k: (-clearance[k],) + tuple(mids[k])
    )
    return tuple(float(v) for v in mids[order[0]])


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_solve(ctx: RunContext) -> None:
    import numpy as np

    from .grid import rasterize_measure
    from .minimize import minimize_multi_phase, minimize_one_phase, minimize_two_phase
    from .plots import energy_figure, solution_figure

    config = ctx.config
    grid = _build_grid(config)
    g = _build_g(config, grid)
    measures = _build_measures(config)
    sources = [rasterize_measure(m, grid) for m in measures]
    mode = _solve_mode(config)
    opts = config.solve_options
    if mode == "one":
        solution = minimize_one_phase(sources[0], g, opts)
    elif mode == "two":
        solution = minimize_two_phase(sources[0], sources[1], g, opts)
    else:
        solution = minimize_multi_phase(sources, g, opts)

    if mode == "two":
        ctx.save_field("field_signed", solution.fields[0])
        if solution.barrier_upper is not None:
            ctx.save_field("barrier_upper", solution.barrier_upper)
        if solution.barrier_lower is not None:
            ctx.save_field("barrier_lower", solution.barrier_lower)
    else:
        for i, u in enumerate(solution.fields):
            ctx.save_field(f"field_phase{i + 1}", u)

    ctx.write_csv("energy_log.csv", solution.log_header(), solution.energy_log)
    ctx.write_json(
        "solution.json",
        {
            "mode": mode,
            "phase_count": len(solution.fields) if mode != "two" else 2,
            "converged": solution.converged,
            "iterations": solution.iterations_used,
            "tau": solution.tau,
            "seed_mode": solution.seed_mode,
            "energy": solution.energy.as_dict(),
        },
    )

    from .boundary import classify_boundary

    view = solution.fields[0] if mode == "two" else solution
    classification = classify_boundary(view, tau=solution.tau)
    header, rows = _boundary_rows(classification.geometry, classification.labels)
    ctx.write_csv("boundary.csv", header, rows)

    ctx.register(solution_figure(solution.fields, ctx.out / "solution.png", tau=solution.tau))
    ctx.register(energy_figure(solution.energy_log, ctx.out / "energy.png"))

    spec = config.check("support_inclusion")
    if spec is not None:
        halo = int(spec.params["halo_cells"])
        from scipy import ndimage

        tau = solution.tau
        violations = 0
        if mode == "one":
            pass
        elif mode == "two":
            signed = solution.fields[0].values
            pairs = [
                (signed > tau, solution.barrier_upper.values > tau),
                (-signed > tau, -solution.barrier_lower.values > tau),
            ]
            struct = ndimage.generate_binary_structure(grid.dim, 1)
            for phase_support, barrier_support in pairs:
                allowed = ndimage.binary_dilation(barrier_support, struct, iterations=max(halo, 1))
                violations += int(np.sum(phase_support & ~allowed))
        else:
            struct = ndimage.generate_binary_structure(grid.dim, 1)
            for u, f in zip(solution.fields, sources):
                barrier = minimize_one_phase(f, g, opts)
                allowed = ndimage.binary_dilation(
                    barrier.fields[0].values > tau, struct, iterations=max(halo, 1)
                )
                violations += int(np.sum((u.values > tau) & ~allowed))
        ctx.add_check(
            "support_inclusion",
            threshold=0.0,
            value=float(violations),
            passed=violations == 0,
            details={"halo_cells": halo, "mode": mode},
        )


def _cmd_verify_qi(ctx: RunContext) -> None:
    from .plots import qi_figure
    from .quadrature import harmonic_test_set, qi_residual

    config = ctx.config
    grid = _build_grid(config)
    g = _build_g(config, grid)
    measures = _build_measures(config)
    mode, fields, view, tau = _load_solution(ctx)
    spec = config.check("qi")
    params = spec.params if spec is not None else dict(_CHECK_PARAMS["qi"])

    points = [p for m in measures for p in m.support_points()]
    import numpy as np

    tests = harmonic_test_set(
        grid.box_min,
        grid.box_max,
        np.array(points) if points else None,
        count=int(params["kernel_count"]),
        max_degree=int(params["max_degree"]),
    )
    if mode == "one":
        aligned = [measures[0], None]
    else:
        aligned = list(measures)
    report = qi_residual(view, aligned, g, tests, tau=tau)
    ctx.write_csv("qi_report.csv", report.csv_header(), report.as_rows())
    summary = {
        "max_relative_contour": report.max_relative("contour"),
        "max_relative_green": report.max_relative("green"),
        "route_disagreement": report.route_disagreement(),
        "rows": report.as_dict()["rows"],
    }
    ctx.write_json("qi_report.json", summary)
    ctx.register(qi_figure(report, ctx.out / "qi_residuals.png", tolerance=params["tolerance"]))
    if spec is not None:
        worst = max(
            summary["max_relative_contour"],
            summary["max_relative_green"],
            summary["route_disagreement"],
        )
        ctx.add_check("qi", threshold=float(params["tolerance"]), value=worst, passed=worst <= params["tolerance"])


def _cmd_classify(ctx: RunContext) -> None:
    from .boundary import classify_boundary, junction_scan
    from .plots import boundary_figure

    config = ctx.config
    mode, fields, view, tau = _load_solution(ctx)
    classification = classify_boundary(view, tau=tau)
    header, rows = _boundary_rows(classification.geometry, classification.labels)
    ctx.write_csv("boundary.csv", header, rows)
    ctx.register(boundary_figure(classification, ctx.out / "boundary.png"))

    spec = config.check("junction")
    grid = classification.geometry.grid
    phase_count = 2 if mode in ("one", "two") else len(fields)
    if spec is not None:
        r_scan = float(spec.params["r_scan_cells"]) * grid.h
        if phase_count >= 3:
            junctions = junction_scan(view, r_scan=r_scan, tau=tau)
            coords = [[float(v) for v in row] for row in junctions]
        else:
            coords = []
        ctx.write_json("junctions.json", {"r_scan": r_scan, "count": len(coords), "points": coords})
        ctx.add_check(
            "junction",
            threshold=0.0,
            value=float(len(coords)),
            passed=len(coords) == 0,
            details={"r_scan": r_scan, "phase_count": phase_count},
        )
    counts = {label: classification.count(label) for label in ("one_phase", "two_phase", "branch")}
    ctx.write_json(
        "classification.json",
        {"counts": counts, "classification_radius": classification.classification_radius},
    )


def _cmd_probes(ctx: RunContext) -> None:
    import numpy as np

    from .boundary import (
        cjk_product,
        classify_boundary,
        density_ratio,
        nondegeneracy_probe,
        poincare_ratio,
        reflect_compare,
    )

    config = ctx.config
    mode, fields, view, tau = _load_solution(ctx)
    grid = fields[0].grid
    reports: dict[str, Any] = {}

    spec = config.check("reflect")
    if spec is not None:
        normal = spec.params["normal"] or [1.0] + [0.0] * (grid.dim - 1)
        target = fields[0]
        gap = reflect_compare(
            target,
            normal,
            float(spec.params["offset"]),
            flip_sign=bool(spec.params["flip_sign"]),
        )
        scale = max(target.max_abs(), 1e-300)
        value = abs(gap) / scale
        reports["reflect"] = {
            "normal": [float(v) for v in normal],
            "offset": float(spec.params["offset"]),
            "flip_sign": bool(spec.params["flip_sign"]),
            "signed_gap": gap,
            "relative": value,
        }
        ctx.add_check(
            "reflect", threshold=float(spec.params["tolerance"]), value=value,
            passed=value <= float(spec.params["tolerance"]),
        )

    positive_view = fields[0]
    if mode == "two":
        from .grid import ScalarField

        positive_view = ScalarField(grid, np.maximum(fields[0].values, 0.0))

    spec = config.check("nondegeneracy")
    if spec is not None:
        center = spec.params["center"] or _auto_center([positive_view], tau, grid)
        radii = [float(c) * grid.h for c in spec.params["radii_cells"]]
        d_min = spec.params["d_min"]
        if d_min is None:
            d_min = 0.5 / math.pi if grid.dim == 2 else 0.125
        report = nondegeneracy_probe(positive_view, center, radii, d_min=float(d_min))
        reports["nondegeneracy"] = report.as_dict()
        ctx.add_check(
            "nondegeneracy",
            threshold=float(d_min),
            value=min(report.values),
            passed=report.verdict == "pass",
        )

    spec = config.check("density")
    if spec is not None:
        center = spec.params["center"] or _auto_center([positive_view], tau, grid)
        r = float(spec.params["r_cells"]) * grid.h
        value = density_ratio(positive_view, center, r, tau=tau)
        reports["density"] = {"center": list(center), "radius": r, "ratio": value}
        ctx.add_check(
            "density", threshold=float(spec.params["threshold"]), value=value,
            passed=value >= float(spec.params["threshold"]),
        )

    spec = config.check("poincare")
    if spec is not None:
        center = spec.params["center"] or _auto_center([positive_view], tau, grid)
        r = float(spec.params["r_cells"]) * grid.h
        value = poincare_ratio(positive_view, center, r, tau=tau)
        reports["poincare"] = {"center": list(center), "radius": r, "ratio": value}
        ctx.add_check(
            "poincare", threshold=float(spec.params["threshold"]), value=value,
            passed=value <= float(spec.params["threshold"]),
        )

    spec = config.check("cjk")
    if spec is not None:
        epsilon = float(spec.params["epsilon"])
        factor_bound = 2.0 ** (3.0 * epsilon)
        worst = 1.0
        samples = []
        if mode == "multi" and len(fields) >= 3:
            classification = classify_boundary(view, tau=tau)
            mids = classification.geometry.midpoints
            two_phase = np.asarray(classification.labels) == "two_phase"
            candidates = mids[two_phase]
            order = sorted(range(candidates.shape[0]), key=lambda k: tuple(candidates[k]))
            limit = max(1, int(spec.params["max_centers"]))
            stride = max(1, len(order) // limit)
            keep = order[::stride][:limit]
            r_hi = float(spec.params["r_hi_cells"]) * grid.h
            r_lo = float(spec.params["r_lo_cells"]) * grid.h
            for k in keep:
                center = tuple(float(v) for v in candidates[k])
                radii = [r_hi]
                while radii[-1] / 2.0 >= r_lo - 1e-12:
                    radii.append(radii[-1] / 2.0)
                products = [
                    cjk_product(fields[0], fields[1], fields[2], center, r, epsilon=epsilon, tau=tau).product
                    for r in radii
                ]
                ratios = []
                for a, b in zip(products, products[1:]):
                    if a <= 0.0 or b <= 0.0:
                        ratios.append(1.0)
                    else:
                        ratios.append(max(b / a, a / b))
                worst = max([worst] + ratios)
                samples.append({"center": list(center), "radii": radii, "products": products})
        reports["cjk"] = {"factor_bound": factor_bound, "samples": samples}
        ctx.add_check(
            "cjk", threshold=factor_bound, value=worst, passed=worst <= factor_bound,
            details={"sample_count": len(samples)},
        )

    ctx.write_json("probes.json", {"probes": reports})


def _profile_residual(solution) -> float:
    """Max continuity, vanishing, and derivative-jump defect of a radial profile."""
    import numpy as np

    def kernel(r: float) -> float:
        return math.log(r) if solution.dim == 2 else r ** (2.0 - solution.dim)

    worst = 0.0
    for left, right in zip(solution.pieces, solution.pieces[1:]):
        r = left.r_hi
        worst = max(worst, abs((left.a + left.b * kernel(r)) - (right.a + right.b * kernel(r))))
    for r in solution.zero_radii:
        worst = max(worst, abs(float(solution.eval(np.asarray([r]))[0])))
    for r, jump in solution.derivative_jumps:
        got = solution.deriv_one_sided(r, +1) - solution.deriv_one_sided(r, -1)
        worst = max(worst, abs(got - jump))
    return worst


def _cmd_reference(ctx: RunContext) -> None:
    import numpy as np

    from .plots import cone_figure, radial_figure
    from .reference import ac_cone, annular_construction

    cone = ac_cone()
    thetas = np.linspace(0.05, math.pi / 2.0, 2001)
    ode_max = float(np.max(np.abs(cone.ode_residual(thetas))))
    ctx.write_json(
        "cone.json",
        {
            "theta0_rad": cone.theta0_rad,
            "theta0_deg": cone.theta0_deg,
            "normalization": cone.normalization,
            "ode_residual_max": ode_max,
            "f_prime_at_half_pi": float(cone.f_prime(np.array([math.pi / 2.0]))[0]),
        },
    )
    ctx.register(cone_figure(cone, ctx.out / "cone.png"))

    annulus = annular_construction()
    annulus.solution.validate()
    annulus.extension.validate()
    ctx.write_json(
        "annulus.json",
        {
            "outer_radius": annulus.outer_radius,
            "inner_radius": annulus.inner_radius,
            "shell_radius": annulus.shell_radius,
            "shell_value": annulus.shell_value,
            "inner_gradient": annulus.inner_gradient,
            "extension_inner_radius": annulus.extension_inner_radius,
            "extension_inner_gradient": annulus.extension_inner_gradient,
            "residual_max": _profile_residual(annulus.solution),
            "extension_residual_max": _profile_residual(annulus.extension),
        },
    )
    ctx.register(radial_figure(annulus.solution, ctx.out / "annulus_profile.png"))


def _cmd_sakai(ctx: RunContext) -> None:
    from .quadrature import sakai_check

    config = ctx.config
    grid = _build_grid(config)
    measures = _build_measures(config)
    spec = config.check("sakai")
    params = spec.params if spec is not None else dict(_CHECK_PARAMS["sakai"])
    c_bound = params["c_bound"]
    if c_bound is None:
        c_bound = config.g_constant if config.g_constant is not None else 1.0
    radii = [float(c) * grid.h for c in params["radii_cells"]]
    payload = []
    all_pass = True
    threshold = 0.0
    worst = math.inf
    for block, measure in zip(config.measures, measures):
        report = sakai_check(measure, float(c_bound), radii, grid)
        threshold = report.threshold
        point_max = report.details["point_maxima"]
        worst = min(worst, min(point_max))
        all_pass = all_pass and report.verdict == "pass"
        entry = report.as_dict()
        entry["phase"] = block.phase
        payload.append(entry)
    ctx.write_json("sakai.json", {"c_bound": float(c_bound), "reports": payload})
    if spec is not None:
        ctx.add_check(
            "sakai", threshold=threshold, value=worst if payload else 0.0, passed=all_pass
        )


_COMMANDS: dict[str, Callable[[RunContext], None]] = {
    "solve": _cmd_solve,
    "verify-qi": _cmd_verify_qi,
    "classify": _cmd_classify,
    "probes": _cmd_probes,
    "reference": _cmd_reference,
    "sakai": _cmd_sakai,
}


def _environment_versions() -> dict[str, str]:
    import matplotlib
    import numpy
    import scipy
    import skimage

    from . import __version__

    return {
        "matplotlib": matplotlib.__version__,
        "numpy": numpy.__version__,
        "python": ".".join(str(v) for v in sys.version_info[:3]),
        "qsurf": __version__,
        "scikit-image": skimage.__version__,
        "scipy": scipy.__version__,
    }


def run(subcommand: str, config: ExperimentConfig) -> int:
    """Execute one subcommand, write artifacts and manifest, return exit code."""
    if subcommand not in SUBCOMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    out = config.output
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(config, out)
    started = time.time()
    started_utc = datetime.now(timezone.utc).isoformat()
    error: str | None = None
    try:
        if subcommand == "all":
            for name in ("reference", "solve", "verify-qi", "classify", "probes", "sakai"):
                _COMMANDS[name](ctx)
        else:
            _COMMANDS[subcommand](ctx)
    except Exception as exc:  # noqa: BLE001 - the manifest must flush regardless
        error = f"{type(exc).__name__}: {exc}"
    manifest = {
        "subcommand": subcommand,
        "config_sha256": config.digest,
        "environment": _environment_versions(),
        "artifacts": sorted(ctx.artifacts),
        "checks": ctx.checks,
        "status": "failed" if error else "ok",
        "timing": {
            "started_utc": started_utc,
            "wall_seconds": time.time() - started,
        },
    }
    if error:
        manifest["error"] = error
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if error:
        print(f"error: {error}", file=sys.stderr)
        return 1
    if any(entry["verdict"] == "fail" for entry in ctx.checks):
        return 2
    return 0


def _apply_thread_cap(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("QSURF_THREADS")
        if env is None:
            return
        threads = int(env)
    if threads < 1:
        raise ConfigError("thread count must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="qsurf",
        description="Quadrature surface experiments: solve, verify, classify, probe.",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="path to a JSON experiment config")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--threads", type=int, default=None, help="cap numeric thread pools")
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, value parsed as JSON (repeatable)",
    )
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap(args.threads)
        config_path = Path(args.config)
        if not config_path.is_file():
            raise ConfigError(f"config file {config_path} does not exist")
        try:
            raw = json.loads(config_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        apply_overrides(raw, args.override)
        config = build_config(raw, base_dir=config_path.parent)
        if args.out is not None:
            config.output = Path(args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run(args.subcommand, config)


if __name__ == "__main__":
    sys.exit(main())
