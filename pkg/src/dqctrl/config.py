"""Run configuration as TOML with dotted keys such as ``grid.n = 32``.

Every key has a default, so an empty file is a valid configuration.
Validation collects every problem before reporting, and model or cost
violations carry the tag of the assumption they break.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adjoint import TargetData
from .controls import Bounds, ControlPair
from .forward import SolveOptions
from .grid import SpatialGrid, TimeGrid
from .io import read_field_csv
from .model import InitialData, ModelParams, PotentialSpec, mollify_initial_data
from .optimize import SPARSITY_KINDS, CostSpec, ControlProblem, default_schedule

PROFILES = ("zero", "constant", "cosine", "random", "file")

# key -> (type, default)
SCHEMA = {
    "seed": (int, 0),
    "grid.dim": (int, 1),
    "grid.n": (int, 32),
    "grid.length": (float, 1.0),
    "time.horizon": (float, 1.0),
    "time.steps": (int, 50),
    "model.alpha": (float, 1.0),
    "model.beta": (float, 1.0),
    "model.chi": (float, 0.5),
    "model.f2_k": (float, 1.0),
    "model.p_max": (float, 0.5),
    "model.p_shape": (str, "constant"),
    "potential.kind": (str, "deep_quench"),
    "potential.gamma": (float, 0.25),
    "cost.b0": (float, 1e-2),
    "cost.b1": (float, 1.0),
    "cost.b2": (float, 0.0),
    "cost.kappa": (float, 0.0),
    "cost.adapted": (bool, False),
    "sparsity.kind": (str, "none"),
    "bounds.u1_min": (float, -1.0),
    "bounds.u1_max": (float, 1.0),
    "bounds.u2_min": (float, -1.0),
    "bounds.u2_max": (float, 1.0),
    "solver.newton_tol": (float, 1e-10),
    "solver.newton_max_iter": (int, 50),
    "solver.linear_tol": (float, 1e-12),
    "init.phi_profile": (str, "zero"),
    "init.phi_amplitude": (float, 0.5),
    "init.phi_offset": (float, 0.0),
    "init.phi_file": (str, ""),
    "init.mu_value": (float, 0.0),
    "init.sigma_value": (float, 0.0),
    "init.mollify": (bool, False),
    "target.phi_profile": (str, "zero"),
    "target.phi_amplitude": (float, 0.5),
    "target.phi_offset": (float, 0.0),
    "target.phi_file": (str, ""),
    "control.u1_value": (float, 0.0),
    "control.u2_value": (float, 0.0),
    "control.u1_file": (str, ""),
    "control.u2_file": (str, ""),
    "optimize.tol": (float, 1e-8),
    "optimize.max_iter": (int, 300),
    "optimize.method": (str, "bb"),
    "continuation.schedule": (list, []),
    "continuation.stages": (int, 7),
    "continuation.gamma0": (float, 1.0),
    "continuation.ratio": (float, 0.5),
    "continuation.stop_rel": (float, 1e-4),
    "gradcheck.directions": (int, 10),
    "gradcheck.eps": (float, 1e-5),
    "mollify.gammas": (list, [1.0, 0.5, 0.1, 0.01]),
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _convert(kind, raw):
    """Check a parsed TOML value against the schema type."""
    if kind is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    if kind is list and isinstance(raw, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        return [float(v) for v in raw]
    if kind in (int, bool, str) and type(raw) is kind:
        return raw
    raise TypeError


def _flatten(table, prefix=""):
    for key, val in table.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            yield from _flatten(val, name + ".")
        else:
            yield name, val


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def echo(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}

    def grid(self) -> SpatialGrid:
        return SpatialGrid(self["grid.dim"], self["grid.n"], self["grid.length"])

    def tgrid(self) -> TimeGrid:
        return TimeGrid(self["time.horizon"], self["time.steps"])

    def params(self) -> ModelParams:
        return ModelParams(self["model.alpha"], self["model.beta"], self["model.chi"],
                           self["model.f2_k"], self["model.p_max"], self["model.p_shape"])

    def spec(self) -> PotentialSpec:
        if self["potential.kind"] == "obstacle":
            return PotentialSpec.obstacle()
        return PotentialSpec.deep_quench(self["potential.gamma"])

    def bounds(self) -> Bounds:
        return Bounds(self["bounds.u1_min"], self["bounds.u1_max"], self["bounds.u2_min"], self["bounds.u2_max"])

    def solve_opts(self) -> SolveOptions:
        return SolveOptions(self["solver.newton_tol"], self["solver.newton_max_iter"], self["solver.linear_tol"])

    def schedule(self) -> list[float]:
        if self["continuation.schedule"]:
            return list(self["continuation.schedule"])
        return default_schedule(self["continuation.stages"], self["continuation.gamma0"], self["continuation.ratio"])

    def phi_field(self, prefix, g: SpatialGrid, rng):
        kind = self[f"{prefix}.phi_profile"]
        amp, off = self[f"{prefix}.phi_amplitude"], self[f"{prefix}.phi_offset"]
        x = g.coordinates
        if kind == "zero":
            return np.zeros(g.size)
        if kind == "constant":
            return np.full(g.size, off)
        if kind == "cosine":
            return off + amp * np.prod(np.cos(np.pi * x / g.axis_length), axis=1)
        if kind == "random":
            return off + amp * rng.uniform(-1.0, 1.0, g.size)
        _, vals = read_field_csv(self[f"{prefix}.phi_file"])
        return vals[0] if vals.shape[0] == 1 else vals

    def initial_data(self, g: SpatialGrid, rng=None) -> InitialData:
        rng = rng if rng is not None else np.random.default_rng(self["seed"])
        phi = np.atleast_2d(self.phi_field("init", g, rng))[0]
        init = InitialData(np.full(g.size, self["init.mu_value"]), phi, np.full(g.size, self["init.sigma_value"]))
        if self["init.mollify"] and not self.spec().is_obstacle:
            init = mollify_initial_data(g, self.spec().gamma, init)
        return init

    def targets(self, g: SpatialGrid, tg: TimeGrid, rng=None) -> TargetData:
        rng = rng if rng is not None else np.random.default_rng(self["seed"] + 1)
        prof = self.phi_field("target", g, rng)
        prof = np.asarray(prof, dtype=float)
        phi_q = prof if prof.ndim == 2 else np.tile(prof, (tg.steps + 1, 1))
        return TargetData(phi_q, phi_q[-1].copy())

    def cost(self, g, tg, anchor: ControlPair | None = None) -> CostSpec:
        return CostSpec(self["cost.b0"], self["cost.b1"], self["cost.b2"], self["cost.kappa"],
                        self.targets(g, tg), self["sparsity.kind"], anchor)

    def control(self, g, tg) -> ControlPair:
        parts = []
        for i in (1, 2):
            path = self[f"control.u{i}_file"]
            if path:
                _, vals = read_field_csv(path)
            else:
                vals = np.full((tg.steps + 1, g.size), self[f"control.u{i}_value"])
            parts.append(vals)
        return ControlPair(parts[0], parts[1])

    def problem(self) -> ControlProblem:
        g = self.grid()
        return ControlProblem(g, self.tgrid(), self.params(), self.initial_data(g), self.bounds(), self.solve_opts())


def _collect(fn, problems):
    try:
        return fn()
    except ValueError as exc:
        problems.extend(str(exc).split("; "))
        return None


def validate(values: dict) -> list[str]:
    problems = []
    if values["grid.dim"] not in (1, 2):
        problems.append("grid.dim must be 1 or 2")
    if values["grid.n"] < 2:
        problems.append("grid.n must be at least 2")
    if not values["grid.length"] > 0:
        problems.append("grid.length must be positive")
    if not values["time.horizon"] > 0:
        problems.append("time.horizon must be positive")
    if values["time.steps"] < 1:
        problems.append("time.steps must be positive")
    _collect(lambda: ModelParams(values["model.alpha"], values["model.beta"], values["model.chi"],
                                 values["model.f2_k"], values["model.p_max"], values["model.p_shape"]), problems)
    kind = values["potential.kind"]
    if kind not in ("deep_quench", "obstacle"):
        problems.append(f"potential.kind must be deep_quench or obstacle, got {kind!r}")
    elif kind == "deep_quench" and not (0 < values["potential.gamma"] <= 1):
        problems.append(f"potential.gamma must lie in (0, 1], got {values['potential.gamma']!r}")
    bounds = _collect(lambda: Bounds(values["bounds.u1_min"], values["bounds.u1_max"],
                                     values["bounds.u2_min"], values["bounds.u2_max"]), problems)
    b0, kap = values["cost.b0"], values["cost.kappa"]
    if not b0 > 0:
        problems.append(f"(C1) b0 must be positive, got {b0!r}")
    for name in ("b1", "b2", "kappa"):
        if not values[f"cost.{name}"] >= 0:
            problems.append(f"(C1) {name} must be nonnegative, got {values['cost.' + name]!r}")
    sk = values["sparsity.kind"]
    if values["optimize.method"] not in ("bb", "fista"):
        problems.append(f"optimize.method must be 'bb' or 'fista', got {values['optimize.method']!r}")
    if sk not in SPARSITY_KINDS:
        problems.append(f"(C3) sparsity.kind must be one of {SPARSITY_KINDS}, got {sk!r}")
    elif sk != "none":
        if not kap > 0:
            problems.append(f"(C4) cost.kappa must be positive when sparsity.kind = {sk}")
        if bounds is not None and not (bounds.u1_min < 0 < bounds.u1_max and bounds.u2_min < 0 < bounds.u2_max):
            problems.append("(A4) sparsity needs u_min < 0 < u_max for both components")
    for prefix in ("init", "target"):
        prof = values[f"{prefix}.phi_profile"]
        if prof not in PROFILES:
            problems.append(f"{prefix}.phi_profile must be one of {PROFILES}, got {prof!r}")
        elif prof == "file" and not values[f"{prefix}.phi_file"]:
            problems.append(f"{prefix}.phi_file is required with profile 'file'")
    _collect(lambda: SolveOptions(values["solver.newton_tol"], values["solver.newton_max_iter"],
                                  values["solver.linear_tol"]), problems)
    sched = values["continuation.schedule"]
    if sched and (any(not (0 < s <= 1) for s in sched) or any(b >= a for a, b in zip(sched, sched[1:]))):
        problems.append("continuation.schedule must be strictly decreasing in (0, 1]")
    if values["continuation.stages"] < 1 or not (0 < values["continuation.ratio"] < 1):
        problems.append("continuation needs stages >= 1 and ratio in (0, 1)")
    if not (0 < values["continuation.gamma0"] <= 1):
        problems.append("continuation.gamma0 must lie in (0, 1]")
    if values["gradcheck.directions"] < 1 or not values["gradcheck.eps"] > 0:
        problems.append("gradcheck needs directions >= 1 and eps > 0")
    if any(not (0 < s <= 1) for s in values["mollify.gammas"]):
        problems.append("mollify.gammas must lie in (0, 1]")
    if values["optimize.max_iter"] < 1 or not values["optimize.tol"] > 0:
        problems.append("optimize needs max_iter >= 1 and tol > 0")
    return problems


def parse_config(text: str) -> RunConfig:
    """Parse a TOML document whose dotted keys follow `SCHEMA`."""
    values = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in SCHEMA.items()}
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"not valid TOML: {exc}"]) from exc
    problems = []
    for key, raw in _flatten(doc):
        if key not in SCHEMA:
            problems.append(f"unknown key {key!r}")
            continue
        kind = SCHEMA[key][0]
        try:
            values[key] = _convert(kind, raw)
        except TypeError:
            problems.append(f"{key} expects {kind.__name__}, got {raw!r}")
    problems.extend(validate(values))
    if problems:
        raise ConfigError(problems)
    return RunConfig(values)
