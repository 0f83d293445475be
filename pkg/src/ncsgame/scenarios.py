"""Built-in scenarios and the JSON scenario config format.

A config file is a JSON object::

    {
      "name": "generic",
      "plant":   {"A": [[...]], "B": [[[...]], ...], "T": 0.05, "N": 50,
                  "Q_N": [[...]], "Q_1": [[...]], "R": [[[...]], ...], "x0": [...]},
      "network": {"p": 2, "delay_alpha": [...], "p_sc": [...], "p_ca": [...],
                  "p_link": [[...]], "info_mode": "perfect"},
      "solver":     {"n_samples": 20000, "seed": 0, "mode": "perfect", "N_large": 200,
                     "tol": 1e-6, "method": "mc"},
      "experiment": {"n_runs": 1000, "seed": 1, "baselines": ["single", "imperfect"]},
      "output":     {"out_dir": "out"}
    }

Matrices are row-major nested lists; irrational entries are written out numerically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .artifacts import atomic_write
from .discretization import PlantSpec
from .network import IMPERFECT, PERFECT, NetworkSpec

__all__ = [
    "ConfigError",
    "SolverSettings",
    "ExperimentSettings",
    "ScenarioConfig",
    "builtin_generic",
    "builtin_lfc",
    "BUILTINS",
    "load_config",
    "save_config",
    "parse_config",
]

BASELINES = ("single", "imperfect", "stationary")


class ConfigError(ValueError):
    """Malformed or invalid scenario config."""


@dataclass(frozen=True)
class SolverSettings:
    n_samples: int = 20_000
    seed: int = 0
    mode: str = PERFECT
    N_large: int = 200
    tol: float = 1e-6
    method: str = "mc"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("solver.n_samples must be positive")
        if self.mode not in (PERFECT, IMPERFECT):
            raise ConfigError(f"solver.mode must be 'perfect' or 'imperfect', got {self.mode!r}")
        if self.method not in ("mc", "exact"):
            raise ConfigError(f"solver.method must be 'mc' or 'exact', got {self.method!r}")
        if self.N_large < 2:
            raise ConfigError("solver.N_large must be at least 2")
        if not self.tol > 0:
            raise ConfigError("solver.tol must be positive")


@dataclass(frozen=True)
class ExperimentSettings:
    n_runs: int = 1000
    seed: int = 1
    baselines: tuple = ("single", "imperfect")

    def __post_init__(self):
        if self.n_runs < 2:
            raise ConfigError("experiment.n_runs must be at least 2")
        object.__setattr__(self, "baselines", tuple(self.baselines))
        for b in self.baselines:
            if b not in BASELINES:
                raise ConfigError(f"unknown baseline {b!r}; choose from {BASELINES}")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    plant: PlantSpec
    network: NetworkSpec
    solver: SolverSettings = field(default_factory=SolverSettings)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    out_dir: str = "out"

    def __post_init__(self):
        if self.network.p != self.plant.p:
            raise ConfigError(f"network has {self.network.p} controllers, plant has {self.plant.p}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "plant": self.plant.to_dict(),
            "network": self.network.to_dict(),
            "solver": vars(self.solver).copy(),
            "experiment": {**vars(self.experiment), "baselines": list(self.experiment.baselines)},
            "output": {"out_dir": self.out_dir},
        }

    def with_alpha(self, alpha: float) -> "ScenarioConfig":
        return replace(self, network=self.network.with_alpha(alpha))

    def __eq__(self, other):
        if not isinstance(other, ScenarioConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _section(d: dict, key: str, cls, required: bool):
    if key not in d:
        if required:
            raise ConfigError(f"missing field '{key}'")
        return cls() if cls not in (PlantSpec, NetworkSpec) else None
    raw = d[key]
    if not isinstance(raw, dict):
        raise ConfigError(f"field '{key}' must be an object")
    try:
        if cls is PlantSpec:
            return PlantSpec.from_dict(raw)
        if cls is NetworkSpec:
            return NetworkSpec.from_dict(raw)
        return cls(**raw)
    except KeyError as exc:
        raise ConfigError(f"field '{key}.{exc.args[0]}' is missing") from None
    except TypeError as exc:
        raise ConfigError(f"field '{key}': {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"field '{key}': {exc}") from None


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{source}: top level must be an object")
    try:
        plant = _section(d, "plant", PlantSpec, True)
        network = _section(d, "network", NetworkSpec, True)
        solver = _section(d, "solver", SolverSettings, False)
        experiment = _section(d, "experiment", ExperimentSettings, False)
        out = d.get("output", {}).get("out_dir", "out")
        return ScenarioConfig(name=str(d.get("name", Path(source).stem)), plant=plant,
                              network=network, solver=solver, experiment=experiment, out_dir=out)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def save_config(config: ScenarioConfig, path) -> Path:
    return atomic_write(path, json.dumps(config.to_dict(), indent=2) + "\n")


def _two_controller_network(alpha: float) -> NetworkSpec:
    return NetworkSpec.homogeneous(2, 0.9, alpha)


def builtin_generic(alpha: float = 1.0) -> ScenarioConfig:
    """Second-order plant actuated through one channel by two identical controllers."""
    r35 = math.sqrt(35.0)
    Q = 80.0 * np.array([[35.0, r35], [r35, 1.0]])
    B = np.array([[0.0], [1.0]])
    plant = PlantSpec(A=[[0.0, 1.0], [-3.0, -4.0]], B=[B, B], T=0.05, N=50, Q_N=Q, Q_1=Q,
                      R=[[[10.0]], [[10.0]]], x0=[0.2, 0.1])
    return ScenarioConfig(name="generic", plant=plant, network=_two_controller_network(alpha))


def lfc_matrix(Kp: float = 1.0, Tp: float = 0.2, Tt: float = 0.3, Tg: float = 0.08) -> np.ndarray:
    """Single-area load frequency dynamics over ``[dPc, df, dPg, dXg]``."""
    return np.array([
        [0.0, 0.0, 0.0, 0.0],
        [0.0, -1.0 / Tp, Kp / Tp, 0.0],
        [0.0, 0.0, -1.0 / Tt, 1.0 / Tt],
        [1.0 / Tg, 0.0, 0.0, -1.0 / Tg],
    ])


def builtin_lfc(alpha: float = 1.0) -> ScenarioConfig:
    """Load frequency control area with two controllers on the speed-changer input."""
    B = np.array([[1.0], [1.0], [0.0], [0.0]])
    plant = PlantSpec(A=lfc_matrix(), B=[B, B], T=0.05, N=50, Q_N=np.eye(4), Q_1=np.eye(4),
                      R=[[[1.0]], [[1.0]]], x0=[0.25, 0.15, 0.2, 0.1])
    return ScenarioConfig(name="lfc", plant=plant, network=_two_controller_network(alpha))


BUILTINS = {"generic": builtin_generic, "lfc": builtin_lfc}
