"""Plant description and exact sampled-data discretization under fractional delays.

A continuous plant ``dx/dt = A x + sum_i B_i u_i(t - tau_i)`` sampled with period
``T`` and a held input whose delay ``tau`` lies in ``[0, T]`` gives

    x_{k+1} = Phi x_k + sum_i (Gamma0_i(tau) ut_{i,k} + Gamma1_i(tau) ut_{i,k-1})

with ``Phi = e^{AT}``, ``Gamma0 = int_0^{T-tau} e^{As} ds B`` and
``Gamma1 = int_{T-tau}^T e^{As} ds B``.  ``ut`` is the actuator-held input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "PlantSpec",
    "DiscreteStep",
    "BetaSet",
    "matrix_exponential",
    "exp_integral",
    "integral_kernel",
    "discretize",
    "gamma_batch",
    "build_beta",
    "held_inputs",
]

_PSD_TOL = 1e-10


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _check_sym(X: np.ndarray, name: str, definite: bool) -> None:
    if X.shape[0] != X.shape[1]:
        raise ValueError(f"{name} must be square, got {X.shape}")
    if not np.allclose(X, X.T, rtol=1e-12, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(X)
    scale = max(1.0, float(np.max(np.abs(eig))))
    if definite and eig.min() <= _PSD_TOL * scale:
        raise ValueError(f"{name} must be positive definite (min eigenvalue {eig.min():.3g})")
    if not definite and eig.min() < -_PSD_TOL * scale:
        raise ValueError(f"{name} must be positive semi-definite (min eigenvalue {eig.min():.3g})")


@dataclass(frozen=True, eq=False)
class PlantSpec:
    """Continuous LTI plant shared by ``p`` controllers, with quadratic weights.

    Parameters
    ----------
    A : (M, M) array
        Continuous dynamics matrix.
    B : sequence of (M, K) arrays
        One input map per controller.
    T : float
        Sampling period in seconds.
    N : int
        Horizon length in steps.
    Q_N, Q_1 : (M, M) arrays
        Terminal and stage state weights.
    R : sequence of (K, K) arrays
        Control weight of each controller.
    x0 : (M,) array
        Initial state.
    """

    A: np.ndarray
    B: tuple
    T: float
    N: int
    Q_N: np.ndarray
    Q_1: np.ndarray
    R: tuple
    x0: np.ndarray
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        M = A.shape[0]
        B = tuple(_as_matrix(b, f"B[{i}]") for i, b in enumerate(self.B))
        R = tuple(_as_matrix(r, f"R[{i}]") for i, r in enumerate(self.R))
        if len(B) < 1:
            raise ValueError("at least one controller is required")
        if len(R) != len(B):
            raise ValueError(f"got {len(B)} input maps but {len(R)} control weights")
        K = B[0].shape[1]
        for i, b in enumerate(B):
            if b.shape != (M, K):
                raise ValueError(f"B[{i}] has shape {b.shape}, expected {(M, K)}")
        for i, r in enumerate(R):
            if r.shape != (K, K):
                raise ValueError(f"R[{i}] has shape {r.shape}, expected {(K, K)}")
            _check_sym(r, f"R[{i}]", definite=True)
        Q_N = _as_matrix(self.Q_N, "Q_N")
        Q_1 = _as_matrix(self.Q_1, "Q_1")
        for name, q in (("Q_N", Q_N), ("Q_1", Q_1)):
            if q.shape != (M, M):
                raise ValueError(f"{name} has shape {q.shape}, expected {(M, M)}")
        _check_sym(Q_N, "Q_N", definite=False)
        _check_sym(Q_1, "Q_1", definite=False)
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        if x0.shape != (M,):
            raise ValueError(f"x0 has shape {x0.shape}, expected {(M,)}")
        T = float(self.T)
        if not (np.isfinite(T) and T > 0):
            raise ValueError(f"sampling period must be positive, got {self.T}")
        N = int(self.N)
        if N != self.N or N < 1:
            raise ValueError(f"horizon must be a positive integer, got {self.N}")
        for name, val in (("A", A), ("B", B), ("R", R), ("Q_N", Q_N), ("Q_1", Q_1),
                          ("x0", x0), ("T", T), ("N", N)):
            object.__setattr__(self, name, val)

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> int:
        return self.B[0].shape[1]

    @property
    def p(self) -> int:
        return len(self.B)

    @property
    def Phi(self) -> np.ndarray:
        if "Phi" not in self._cache:
            self._cache["Phi"] = matrix_exponential(self.A * self.T)
        return self._cache["Phi"]

    @property
    def Psi_T(self) -> np.ndarray:
        """``int_0^T e^{As} ds``."""
        if "Psi_T" not in self._cache:
            self._cache["Psi_T"] = integral_kernel(self.A, self.T)
        return self._cache["Psi_T"]

    def restrict(self, p: int) -> "PlantSpec":
        """Same plant driven only by the first ``p`` controllers."""
        if not 1 <= p <= self.p:
            raise ValueError(f"cannot restrict {self.p} controllers to {p}")
        return PlantSpec(self.A, self.B[:p], self.T, self.N, self.Q_N, self.Q_1,
                         self.R[:p], self.x0)

    def with_horizon(self, N: int) -> "PlantSpec":
        return PlantSpec(self.A, self.B, self.T, N, self.Q_N, self.Q_1, self.R, self.x0)

    def with_x0(self, x0) -> "PlantSpec":
        return PlantSpec(self.A, self.B, self.T, self.N, self.Q_N, self.Q_1, self.R, x0)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": [b.tolist() for b in self.B],
            "T": self.T,
            "N": self.N,
            "Q_N": self.Q_N.tolist(),
            "Q_1": self.Q_1.tolist(),
            "R": [r.tolist() for r in self.R],
            "x0": self.x0.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantSpec":
        return cls(A=d["A"], B=d["B"], T=d["T"], N=d["N"], Q_N=d["Q_N"], Q_1=d["Q_1"],
                   R=d["R"], x0=d["x0"])

    def __eq__(self, other):
        if not isinstance(other, PlantSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class DiscreteStep:
    """Sampled-data maps for one controller under one realized delay."""

    Phi: np.ndarray
    Gamma0: np.ndarray
    Gamma1: np.ndarray
    tau: float


@dataclass(frozen=True)
class BetaSet:
    """Lag-indexed effective input maps; ``beta[j]`` multiplies ``u_{k-j}``."""

    beta: np.ndarray  # (k+1, M, K)

    @property
    def k(self) -> int:
        return self.beta.shape[0] - 1

    def nonzero_lags(self) -> list[int]:
        return [j for j in range(self.beta.shape[0]) if np.any(self.beta[j])]

    def apply(self, u_hist: np.ndarray) -> np.ndarray:
        """``sum_j beta[j] @ u_hist[k - j]`` for controls indexed by time."""
        k = self.k
        return sum((self.beta[j] @ u_hist[k - j] for j in range(k + 1)),
                   np.zeros(self.beta.shape[1]))


def matrix_exponential(X) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a Pade approximant.

    Accepts a single square matrix or a stack ``(..., n, n)``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim < 2 or X.shape[-1] != X.shape[-2]:
        raise ValueError(f"matrix exponential needs square input, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("matrix exponential input has non-finite entries")
    return scipy.linalg.expm(X)


def integral_kernel(A: np.ndarray, t) -> np.ndarray:
    """``int_0^t e^{As} ds`` for a scalar ``t`` or an array of times.

    Read off the upper-right block of ``exp([[A, I], [0, 0]] t)``.
    """
    A = np.asarray(A, dtype=float)
    M = A.shape[0]
    aug = np.zeros((2 * M, 2 * M))
    aug[:M, :M] = A
    aug[:M, M:] = np.eye(M)
    t = np.asarray(t, dtype=float)
    E = matrix_exponential(aug * t[..., None, None])
    return E[..., :M, M:]


def exp_integral(A, a: float, b: float, B) -> np.ndarray:
    """``int_a^b e^{As} ds B``."""
    if not a <= b:
        raise ValueError(f"integration bounds must satisfy a <= b, got a={a}, b={b}")
    if a < 0:
        raise ValueError(f"lower bound must be non-negative, got {a}")
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if a == b:
        return np.zeros((A.shape[0], B.shape[1]))
    Psi = integral_kernel(A, np.array([a, b]))
    return (Psi[1] - Psi[0]) @ B


def discretize(plant: PlantSpec, controller: int, tau: float) -> DiscreteStep:
    if not 0 <= controller < plant.p:
        raise IndexError(f"controller {controller} out of range for p={plant.p}")
    T = plant.T
    if not 0.0 <= tau <= T:
        raise ValueError(f"delay {tau} outside [0, {T}]")
    B = plant.B[controller]
    Gamma0 = exp_integral(plant.A, 0.0, T - tau, B)
    Gamma1 = exp_integral(plant.A, T - tau, T, B)
    return DiscreteStep(Phi=plant.Phi, Gamma0=Gamma0, Gamma1=Gamma1, tau=float(tau))


def gamma_batch(plant: PlantSpec, controller: int, taus) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``(Gamma0, Gamma1)`` for an array of delays, shape ``(..., M, K)``."""
    taus = np.asarray(taus, dtype=float)
    if np.any(taus < 0) or np.any(taus > plant.T):
        raise ValueError(f"delays must lie in [0, {plant.T}]")
    B = plant.B[controller]
    Psi_head = integral_kernel(plant.A, plant.T - taus)
    G0 = Psi_head @ B
    G1 = (plant.Psi_T - Psi_head) @ B
    return G0, G1


def build_beta(step: DiscreteStep, loss_history, k: int) -> BetaSet:
    """Expand delay split and hold logic into lag coefficients.

    ``loss_history[l]`` is the delivery switch at step ``l`` (1 = delivered) for
    ``l = 0..k``.  Direct transcription of the product form: lag ``j`` collects
    ``Gamma0`` if every packet after ``k-j`` was lost, ``Gamma1`` if every packet
    strictly between ``k-j`` and ``k`` was lost, both gated by delivery at ``k-j``.
    """
    theta = np.asarray(loss_history, dtype=float).reshape(-1)
    if theta.shape[0] != k + 1:
        raise ValueError(f"loss history has length {theta.shape[0]}, expected {k + 1}")
    G0, G1 = step.Gamma0, step.Gamma1
    beta = np.zeros((k + 1,) + G0.shape)
    beta[0] = G0 * theta[k]
    for j in range(1, k + 1):
        lost_incl = np.prod(1.0 - theta[k - j + 1:k + 1])
        lost_excl = np.prod(1.0 - theta[k - j + 1:k])
        beta[j] = (G0 * lost_incl + G1 * lost_excl) * theta[k - j]
    return BetaSet(beta)


def held_inputs(u: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Actuator hold: latest delivered control per step, zero before any delivery.

    ``u`` has shape ``(n, K)`` and ``theta`` shape ``(n,)``.
    """
    out = np.zeros_like(np.asarray(u, dtype=float))
    last = np.zeros(out.shape[1:])
    for k in range(out.shape[0]):
        if theta[k]:
            last = u[k]
        out[k] = last
    return out
