"""Delay and packet-loss models, and seeded scenario sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .discretization import PlantSpec
from .rng import uniform_stream

__all__ = [
    "PERFECT",
    "IMPERFECT",
    "UniformDelay",
    "DiscreteDelay",
    "NetworkSpec",
    "ScenarioRealization",
    "RateSummary",
    "sample_scenario",
    "empirical_rates",
    "STREAM_TAU",
    "STREAM_SC",
    "STREAM_CA",
    "STREAM_LINK",
    "STREAM_OBS",
]

PERFECT = "perfect"
IMPERFECT = "imperfect"
_MODES = (PERFECT, IMPERFECT)

STREAM_TAU = 1
STREAM_SC = 2
STREAM_CA = 3
STREAM_LINK = 4
STREAM_OBS = 5


class UniformDelay:
    """Delay uniform on ``[0, alpha*T]``."""

    def __init__(self, alpha: float):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"delay fraction must lie in [0, 1], got {alpha}")
        self.alpha = float(alpha)

    def sample(self, u: np.ndarray, T: float) -> np.ndarray:
        return np.asarray(u) * (self.alpha * T)

    def mean(self, T: float) -> float:
        return 0.5 * self.alpha * T

    def var(self, T: float) -> float:
        return (self.alpha * T) ** 2 / 12.0

    def quadrature(self, T: float, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and probability weights integrating against the delay law."""
        if self.alpha == 0.0:
            return np.zeros(1), np.ones(1)
        x, w = np.polynomial.legendre.leggauss(n)
        hi = self.alpha * T
        return 0.5 * hi * (x + 1.0), 0.5 * w

    def __eq__(self, other):
        return isinstance(other, UniformDelay) and other.alpha == self.alpha

    def __repr__(self):
        return f"UniformDelay(alpha={self.alpha})"


class DiscreteDelay:
    """Delay taking ``fractions[j] * T`` with probability ``probs[j]``."""

    def __init__(self, fractions: Sequence[float], probs: Sequence[float]):
        f = np.asarray(fractions, dtype=float)
        q = np.asarray(probs, dtype=float)
        if f.shape != q.shape or f.ndim != 1 or f.size == 0:
            raise ValueError("fractions and probs must be equal-length 1-d sequences")
        if np.any(f < 0) or np.any(f > 1):
            raise ValueError("delay fractions must lie in [0, 1]")
        if np.any(q < 0) or not np.isclose(q.sum(), 1.0):
            raise ValueError("probabilities must be non-negative and sum to one")
        self.fractions, self.probs = f, q / q.sum()
        self._cdf = np.cumsum(self.probs)

    def sample(self, u: np.ndarray, T: float) -> np.ndarray:
        idx = np.searchsorted(self._cdf, np.asarray(u), side="right")
        return self.fractions[np.minimum(idx, self.fractions.size - 1)] * T

    def mean(self, T: float) -> float:
        return float(self.probs @ self.fractions) * T

    def var(self, T: float) -> float:
        m = self.mean(T)
        return float(self.probs @ (self.fractions * T) ** 2) - m * m

    def quadrature(self, T: float, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
        return self.fractions * T, self.probs.copy()

    def __eq__(self, other):
        return (isinstance(other, DiscreteDelay)
                and np.array_equal(other.fractions, self.fractions)
                and np.array_equal(other.probs, self.probs))

    def __repr__(self):
        return f"DiscreteDelay({self.fractions.tolist()}, {self.probs.tolist()})"


def _prob_vector(x, p: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(x, dtype=float), (p,)).copy()
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise ValueError(f"{name} entries must lie in [0, 1], got {arr.tolist()}")
    return arr


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """Per-controller delay laws and link success probabilities.

    ``p_link[i][m]`` is the probability that controller ``i`` receives the
    control broadcast by controller ``m``; only used in imperfect mode.
    """

    p: int
    delay_alpha: np.ndarray
    p_sc: np.ndarray
    p_ca: np.ndarray
    p_link: np.ndarray = None
    info_mode: str = PERFECT
    delay_models: tuple = field(default=None)

    def __post_init__(self):
        p = int(self.p)
        if p < 1:
            raise ValueError(f"controller count must be positive, got {self.p}")
        alpha = _prob_vector(self.delay_alpha, p, "delay_alpha")
        p_sc = _prob_vector(self.p_sc, p, "p_sc")
        p_ca = _prob_vector(self.p_ca, p, "p_ca")
        if self.p_link is None:
            link = np.ones((p, p))
        else:
            link = np.array(self.p_link, dtype=float)
            if link.ndim == 0:
                link = np.full((p, p), float(link))
            if link.shape != (p, p):
                raise ValueError(f"p_link must be {p}x{p}, got {link.shape}")
            if np.any(~np.isfinite(link)) or np.any(link < 0) or np.any(link > 1):
                raise ValueError("p_link entries must lie in [0, 1]")
        if not np.all(np.diag(link) == 1.0):
            raise ValueError("p_link diagonal must be 1 (a controller knows its own controls)")
        if self.info_mode not in _MODES:
            raise ValueError(f"info_mode must be one of {_MODES}, got {self.info_mode!r}")
        models = self.delay_models
        if models is None:
            models = tuple(UniformDelay(a) for a in alpha)
        else:
            models = tuple(models)
            if len(models) != p:
                raise ValueError(f"expected {p} delay models, got {len(models)}")
        for name, val in (("p", p), ("delay_alpha", alpha), ("p_sc", p_sc), ("p_ca", p_ca),
                          ("p_link", link), ("delay_models", models)):
            object.__setattr__(self, name, val)

    @classmethod
    def homogeneous(cls, p: int, success: float, alpha: float, info_mode: str = PERFECT):
        """Every link succeeds with ``success``; delays uniform on ``[0, alpha*T]``."""
        link = np.full((p, p), success)
        np.fill_diagonal(link, 1.0)
        return cls(p=p, delay_alpha=[alpha] * p, p_sc=[success] * p, p_ca=[success] * p,
                   p_link=link, info_mode=info_mode)

    def success(self, i: int) -> float:
        """End-to-end delivery probability through controller ``i``."""
        return float(self.p_sc[i] * self.p_ca[i])

    def delay_model(self, i: int):
        return self.delay_models[i]

    def restrict(self, p: int) -> "NetworkSpec":
        if not 1 <= p <= self.p:
            raise ValueError(f"cannot restrict {self.p} controllers to {p}")
        return NetworkSpec(p=p, delay_alpha=self.delay_alpha[:p], p_sc=self.p_sc[:p],
                           p_ca=self.p_ca[:p], p_link=self.p_link[:p, :p],
                           info_mode=self.info_mode, delay_models=self.delay_models[:p])

    def with_mode(self, info_mode: str) -> "NetworkSpec":
        return NetworkSpec(p=self.p, delay_alpha=self.delay_alpha, p_sc=self.p_sc,
                           p_ca=self.p_ca, p_link=self.p_link, info_mode=info_mode,
                           delay_models=self.delay_models)

    def with_alpha(self, alpha: float) -> "NetworkSpec":
        return NetworkSpec(p=self.p, delay_alpha=[alpha] * self.p, p_sc=self.p_sc,
                           p_ca=self.p_ca, p_link=self.p_link, info_mode=self.info_mode)

    def to_dict(self) -> dict:
        if any(not isinstance(m, UniformDelay) for m in self.delay_models):
            raise ValueError("only uniform delay models can be serialized")
        return {
            "p": self.p,
            "delay_alpha": self.delay_alpha.tolist(),
            "p_sc": self.p_sc.tolist(),
            "p_ca": self.p_ca.tolist(),
            "p_link": self.p_link.tolist(),
            "info_mode": self.info_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(p=d["p"], delay_alpha=d["delay_alpha"], p_sc=d["p_sc"], p_ca=d["p_ca"],
                   p_link=d.get("p_link"), info_mode=d.get("info_mode", PERFECT))

    def __eq__(self, other):
        if not isinstance(other, NetworkSpec):
            return NotImplemented
        return (self.p == other.p and self.info_mode == other.info_mode
                and np.array_equal(self.delay_alpha, other.delay_alpha)
                and np.array_equal(self.p_sc, other.p_sc)
                and np.array_equal(self.p_ca, other.p_ca)
                and np.array_equal(self.p_link, other.p_link)
                and self.delay_models == other.delay_models)


@dataclass(frozen=True)
class ScenarioRealization:
    """One joint draw of every delay and switch over the horizon.

    Arrays are indexed ``[k, i]`` (``[k, i, m]`` for links).  ``theta_link[k, i, m]``
    says whether controller ``i`` received the control ``m`` broadcast at step ``k``.
    ``theta_obs`` is an independent copy of the sensor switch with the same success
    probability, used for state observation under imperfect information.
    """

    tau: np.ndarray
    theta_sc: np.ndarray
    theta_ca: np.ndarray
    theta_link: np.ndarray
    seed: int
    theta_obs: np.ndarray = None

    @property
    def theta(self) -> np.ndarray:
        return self.theta_sc & self.theta_ca

    @property
    def N(self) -> int:
        return self.tau.shape[0]

    @property
    def p(self) -> int:
        return self.tau.shape[1]


def sample_scenario(spec: NetworkSpec, plant: PlantSpec, seed: int) -> ScenarioRealization:
    """Draw all delays and switches for ``plant.N`` steps.

    Entry ``(k, i)`` of each quantity comes from position ``k`` of the stream keyed by
    ``(seed, quantity, i)``; link ``(k, i, m)`` from the stream ``(seed, link, i, m)``.
    """
    N, p, T = plant.N, spec.p, plant.T
    tau = np.empty((N, p))
    sc = np.empty((N, p), dtype=bool)
    ca = np.empty((N, p), dtype=bool)
    link = np.ones((N, p, p), dtype=bool)
    obs = np.empty((N, p), dtype=bool)
    for i in range(p):
        tau[:, i] = spec.delay_model(i).sample(uniform_stream(seed, STREAM_TAU, i, count=N), T)
        sc[:, i] = uniform_stream(seed, STREAM_SC, i, count=N) < spec.p_sc[i]
        ca[:, i] = uniform_stream(seed, STREAM_CA, i, count=N) < spec.p_ca[i]
        obs[:, i] = uniform_stream(seed, STREAM_OBS, i, count=N) < spec.p_sc[i]
        for m in range(p):
            if m != i:
                link[:, i, m] = uniform_stream(seed, STREAM_LINK, i, m, count=N) < spec.p_link[i, m]
    return ScenarioRealization(tau=tau, theta_sc=sc, theta_ca=ca, theta_link=link, seed=int(seed),
                               theta_obs=obs)


@dataclass(frozen=True)
class RateSummary:
    """Sample frequencies of every switch and sample moments of the delays."""

    n: int
    sc: np.ndarray
    ca: np.ndarray
    theta: np.ndarray
    link: np.ndarray
    tau_mean: np.ndarray
    tau_var: np.ndarray
    obs: np.ndarray | None = None


def empirical_rates(realizations: Sequence[ScenarioRealization]) -> RateSummary:
    if len(realizations) == 0:
        raise ValueError("need at least one realization")
    tau = np.concatenate([r.tau for r in realizations])
    sc = np.concatenate([r.theta_sc for r in realizations])
    ca = np.concatenate([r.theta_ca for r in realizations])
    link = np.concatenate([r.theta_link for r in realizations])
    has_obs = all(r.theta_obs is not None for r in realizations)
    obs = np.concatenate([r.theta_obs for r in realizations]).mean(axis=0) if has_obs else None
    return RateSummary(
        n=tau.shape[0],
        sc=sc.mean(axis=0),
        ca=ca.mean(axis=0),
        theta=(sc & ca).mean(axis=0),
        link=link.mean(axis=0),
        tau_mean=tau.mean(axis=0),
        tau_var=tau.var(axis=0, ddof=1) if tau.shape[0] > 1 else np.zeros(tau.shape[1]),
        obs=obs,
    )
