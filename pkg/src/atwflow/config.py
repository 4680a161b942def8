"""JSON run and study configurations with strict key checking."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .distance import DISTANCE_KINDS
from .grid import GridSpec, shape_from_dict
from .oracles import BallOracle
from .scheme import pinning_coupling
from .tv import SolverParams

CHECKS = ("nestedness", "perimeter_monotone", "minH_monotone", "ball_radius", "ball_lower_bound",
          "ball_upper_bound", "ball_curvature", "apriori_ledger", "coarea", "modulus", "outward_min", "comparison")
BALL_CHECKS = ("ball_radius", "ball_lower_bound", "ball_upper_bound", "ball_curvature")
CHECK_OPTIONS = {
    "nestedness": {"mode"},
    "perimeter_monotone": {"slack"},
    "minH_monotone": {"slack_cells"},
    "ball_radius": {"slack_cells"},
    "ball_lower_bound": {"slack_cells"},
    "ball_upper_bound": {"slack_cells"},
    "ball_curvature": {"slack_cells"},
    "apriori_ledger": {"h", "slack"},
    "coarea": {"rtol"},
    "modulus": {"H0", "n_pairs", "C", "local_radius"},
    "outward_min": {"delta", "n_probes", "stride", "mode"},
    "comparison": {"shape"},
}
SOLVER_KEYS = {"tv_mode", "primal_step", "dual_step", "tolerance", "max_iter", "check_every", "step_ratio"}
SCHEME_KEYS = {"distance", "band", "max_steps"}


class ConfigError(ValueError):
    """The configuration cannot be used."""


def _reject_unknown(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in {where}: {extra}")


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where} is missing {key!r}")
    return d[key]


def _number(v, where: str, positive: bool = True) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where} must be a finite number")
    if positive and not v > 0:
        raise ConfigError(f"{where} must be positive")
    return float(v)


def _integer(v, where: str, minimum: int = 1) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{where} must be an integer >= {minimum}")
    return v


def _seed(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < 2 ** 64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    return v


def grid_from_dict(d: dict) -> GridSpec:
    """``{"cells": n, "side": L, "dim": 2, "center": c}`` or ``{"shape": [...], "spacing": dx, "origin": [...]}``."""
    if "shape" in d:
        _reject_unknown(d, {"shape", "spacing", "origin"}, "grid")
        try:
            return GridSpec(tuple(_integer(n, "grid.shape") for n in _require(d, "shape", "grid")),
                            _number(_require(d, "spacing", "grid"), "grid.spacing"),
                            tuple(_number(o, "grid.origin", False) for o in _require(d, "origin", "grid")))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"grid: {exc}") from None
    _reject_unknown(d, {"cells", "side", "dim", "center"}, "grid")
    try:
        return GridSpec.cube(_integer(_require(d, "cells", "grid"), "grid.cells", 4),
                             _number(_require(d, "side", "grid"), "grid.side"),
                             _integer(d.get("dim", 2), "grid.dim", 2), d.get("center", 0.0))
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from None


def solver_from_dict(d: dict) -> SolverParams:
    _reject_unknown(d, SOLVER_KEYS, "solver")
    try:
        return SolverParams(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}") from None


def _load_json(source) -> dict:
    if isinstance(source, dict):
        return json.loads(json.dumps(source))
    try:
        text = Path(source).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return d


@dataclass(frozen=True)
class RunConfig:
    """One trajectory and the checks to run on it.

    ``h`` is given directly, as ``coupling * dx``, or from the pinning rule
    with the curvature estimate ``H_min`` (taken from the ball oracle when
    present).
    """

    shape: dict
    grid: dict
    output: str
    h: float | None = None
    coupling: float | None = None
    H_min: float | None = None
    solver: dict = field(default_factory=dict)
    scheme: dict = field(default_factory=dict)
    oracle: dict | None = None
    checks: list = field(default_factory=list)
    check_options: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_json(cls, source) -> "RunConfig":
        d = _load_json(source)
        _reject_unknown(d, {f for f in cls.__dataclass_fields__}, "config")
        for key in ("shape", "grid", "output"):
            _require(d, key, "config")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.output, str) or not self.output:
            raise ConfigError("output must be a non-empty path")
        self.build_grid()
        try:
            shape_from_dict(self.shape)
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"shape: {exc}") from None
        solver_from_dict(self.solver)
        _reject_unknown(self.scheme, SCHEME_KEYS, "scheme")
        if self.scheme.get("distance", "subcell") not in DISTANCE_KINDS:
            raise ConfigError(f"scheme.distance must be one of {DISTANCE_KINDS}")
        band = self.scheme.get("band", "auto")
        if not (band is None or band == "auto" or (isinstance(band, int) and not isinstance(band, bool) and band >= 1)):
            raise ConfigError("scheme.band must be 'auto', null or a positive integer")
        _integer(self.scheme.get("max_steps", 10000), "scheme.max_steps")
        if self.oracle is not None:
            _reject_unknown(self.oracle, {"kind", "r0"}, "oracle")
            if self.oracle.get("kind") != "ball":
                raise ConfigError("oracle.kind must be 'ball'")
            _number(_require(self.oracle, "r0", "oracle"), "oracle.r0")
        given = [k for k in ("h", "coupling", "H_min") if getattr(self, k) is not None]
        if len(given) > 1:
            raise ConfigError(f"give only one of h, coupling and H_min, got {given}")
        for k in given:
            _number(getattr(self, k), k)
        if not given and self.oracle is None:
            raise ConfigError("give h, coupling or H_min, or a ball oracle for the pinning rule")
        if not isinstance(self.checks, list):
            raise ConfigError("checks must be a list")
        for c in self.checks:
            if c not in CHECKS:
                raise ConfigError(f"unknown check {c!r}; known: {list(CHECKS)}")
        if len(set(self.checks)) != len(self.checks):
            raise ConfigError("checks are listed more than once")
        if any(c in BALL_CHECKS for c in self.checks) and self.oracle is None:
            raise ConfigError("ball checks need a ball oracle")
        _reject_unknown(self.check_options, CHECKS, "check_options")
        for name, opts in self.check_options.items():
            _reject_unknown(opts, CHECK_OPTIONS[name], f"check_options.{name}")
        if "comparison" in self.checks and "shape" not in self.check_options.get("comparison", {}):
            raise ConfigError("the comparison check needs check_options.comparison.shape")
        if "modulus" in self.checks and "H0" not in self.check_options.get("modulus", {}) and self.oracle is None:
            raise ConfigError("the modulus check needs check_options.modulus.H0 or a ball oracle")
        _reject_unknown(self.tolerances, CHECKS, "tolerances")
        for name, tol in self.tolerances.items():
            _number(tol, f"tolerances.{name}", positive=False)
        _seed(self.seed)

    def build_grid(self) -> GridSpec:
        return grid_from_dict(self.grid)

    def build_shape(self):
        return shape_from_dict(self.shape)

    def solver_params(self) -> SolverParams:
        return solver_from_dict(self.solver)

    def ball_oracle(self) -> BallOracle | None:
        if self.oracle is None:
            return None
        return BallOracle(float(self.oracle["r0"]), self.build_grid().dim, self.time_step())

    def time_step(self) -> float:
        if self.h is not None:
            return float(self.h)
        dx = self.build_grid().spacing
        if self.coupling is not None:
            return self.coupling * dx
        H = self.H_min if self.H_min is not None else (self.build_grid().dim - 1) / float(self.oracle["r0"])
        return pinning_coupling(H) * dx

    def to_dict(self) -> dict:
        """Every field, defaults included, with the resolved time step."""
        d = asdict(self)
        d["resolved"] = {"h": self.time_step(), "solver": self.solver_params().to_dict(),
                         "scheme": {"distance": "subcell", "band": "auto", "max_steps": 10000, **self.scheme}}
        return d


@dataclass(frozen=True)
class StudyConfig:
    """A refinement ladder of ball runs.

    Rungs are either ``cells`` with ``h = coupling * dx`` (``coupling``
    defaults to the pinning rule), or explicit ``rungs`` of ``[cells, h]``.
    """

    output: str
    cells: list | None = None
    rungs: list | None = None
    coupling: float | None = None
    side: float = 2.5
    r0: float = 1.0
    dim: int = 2
    slack: float = 0.1
    solver: dict = field(default_factory=dict)
    workers: int = 1
    seed: int = 0

    @classmethod
    def from_json(cls, source) -> "StudyConfig":
        d = _load_json(source)
        _reject_unknown(d, {f for f in cls.__dataclass_fields__}, "config")
        _require(d, "output", "config")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.output, str) or not self.output:
            raise ConfigError("output must be a non-empty path")
        if (self.cells is None) == (self.rungs is None):
            raise ConfigError("give exactly one of cells and rungs")
        if self.rungs is not None and self.coupling is not None:
            raise ConfigError("coupling applies to cells, not to explicit rungs")
        _number(self.side, "side")
        _number(self.r0, "r0")
        if self.dim not in (2, 3):
            raise ConfigError("dim must be 2 or 3")
        _number(self.slack, "slack", positive=False)
        if self.coupling is not None:
            _number(self.coupling, "coupling")
        _integer(self.workers, "workers")
        _seed(self.seed)
        solver_from_dict(self.solver)
        ladder = self.ladder()
        if not ladder:
            raise ConfigError("the ladder needs at least one rung")

    def ladder(self) -> list[tuple[int, float]]:
        if self.cells is not None:
            if not isinstance(self.cells, list):
                raise ConfigError("cells must be a list")
            cells = [_integer(n, "cells", 4) for n in self.cells]
            c = pinning_coupling((self.dim - 1) / self.r0) if self.coupling is None else self.coupling
            return [(n, c * self.side / n) for n in cells]
        if not isinstance(self.rungs, list):
            raise ConfigError("rungs must be a list")
        out = []
        for r in self.rungs:
            if not isinstance(r, list) or len(r) != 2:
                raise ConfigError("each rung is [cells, h]")
            out.append((_integer(r[0], "rung cells", 4), _number(r[1], "rung h")))
        return out

    def solver_params(self) -> SolverParams:
        return solver_from_dict(self.solver)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolved"] = {"ladder": [list(r) for r in self.ladder()], "solver": self.solver_params().to_dict()}
        return d
