"""Backward recursion for the decentralized LQ game over the augmented state.

At step ``k`` each controller ``i`` plays ``u_{i,k} = -L_{i,k} z_k`` with
``L_{i,k} = -[A_i^k, alpha_{i,k}^{1,1}, ..., alpha_{i,k}^{p,k}]``.  Given every other
controller's law, controller ``i`` faces ``z_{k+1} = C_{i,k} z_k + D_{i,k} u_{i,k}``; its
first-order condition couples its coefficients to everyone else's.  Stacking the
conditions of all controllers gives one linear system per step,

    G_i K_i + sum_{l != i} Y_i^l K_l = -E[D_i^T S_i F],

where ``K_l`` are the law coefficients and ``F`` the open-loop part of the augmented
map.  Every coefficient column shares the same ``pK x pK`` operator, so a single
factorization solves for all of them.

Imperfect information scales each column of a law by the probability that the
controller observes it.  The stacked system is then solved for the mean (effective)
coefficients and divided by those probabilities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .discretization import PlantSpec
from .layout import AugmentedLayout
from .moments import (
    DEFAULT_SAMPLES,
    BetaBank,
    BetaSample,
    MomentSet,
    estimate_moments,
    exact_moments,
    expected_CSC,
)
from .network import IMPERFECT, PERFECT, NetworkSpec

__all__ = [
    "SolverError",
    "NumericalError",
    "ConvergenceError",
    "GainSchedule",
    "StepResult",
    "GameSolution",
    "ConvergedGains",
    "mask_probabilities",
    "assemble_CD",
    "solve_coefficients",
    "riccati_step",
    "direct_value_update",
    "two_player_closed_form",
    "solve_game",
    "converged_gains",
    "stationary_schedule",
    "single_controller_gains",
    "spec_hash",
]

log = logging.getLogger(__name__)

PSD_RTOL = 1e-8
SYM_TOL = 1e-10


class SolverError(RuntimeError):
    """The coupled coefficient system at some step cannot be solved reliably."""

    def __init__(self, k: int, cond: float, msg: str = ""):
        self.k, self.cond = k, cond
        super().__init__(msg or f"coefficient system singular at step {k} (condition {cond:.3g})")


class NumericalError(RuntimeError):
    """A value matrix lost symmetry or positive semi-definiteness."""


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, trace):
        self.trace = trace
        super().__init__(msg)


def spec_hash(plant: PlantSpec, network: NetworkSpec) -> str:
    # local import keeps solver importable without the artifact layer
    from .artifacts import spec_hash as _hash
    return _hash(plant, network)


@dataclass
class GainSchedule:
    """Per-step decentralized gains ``L[k][i]`` (``K x (M + p k K)``)."""

    M: int
    K: int
    p: int
    N: int
    mode: str
    L: list
    seed: int | None = None
    n_samples: int | None = None
    method: str = "mc"
    spec_hash: str = ""

    def __post_init__(self):
        if len(self.L) != self.N:
            raise ValueError(f"schedule has {len(self.L)} steps, expected {self.N}")
        for k, Lk in enumerate(self.L):
            want = (self.p, self.K, self.layout(k).dim)
            if Lk.shape != want:
                raise ValueError(f"gain at step {k} has shape {Lk.shape}, expected {want}")

    def layout(self, k: int) -> AugmentedLayout:
        return AugmentedLayout(self.M, self.K, self.p, k)

    def gain(self, i: int, k: int) -> np.ndarray:
        return self.L[k][i]

    def law(self, k: int) -> np.ndarray:
        """Coefficients of ``u_{i,k} = law[i] @ z_k`` for every controller."""
        return -self.L[k]

    def A(self, i: int, k: int) -> np.ndarray:
        return -self.L[k][i][:, :self.M]

    def alpha(self, i: int, k: int, m: int, n: int) -> np.ndarray:
        return -self.L[k][i][:, self.layout(k).block(m, n)]

    def reassemble(self, i: int, k: int) -> np.ndarray:
        """``-[A_i^k, alpha^{1,1}, ..., alpha^{p,1}, ..., alpha^{p,k}]``."""
        parts = [self.A(i, k)]
        parts += [self.alpha(i, k, m, n) for n in range(1, k + 1) for m in range(self.p)]
        return -np.hstack(parts)


@dataclass
class StepResult:
    law: np.ndarray        # (p, K, d): u_i = law[i] @ z
    effective: np.ndarray  # (p, K, d): mean law under observation masks
    S: list
    min_eig_ratio: np.ndarray
    asym: np.ndarray

    @property
    def L(self) -> np.ndarray:
        return -self.law


@dataclass
class GameSolution:
    schedule: GainSchedule
    V0: np.ndarray
    S0: list
    values: list | None
    min_eig_ratio: np.ndarray  # (N, p), min eigenvalue over norm
    asym: np.ndarray           # (N, p), max |S - S^T|
    meta: dict = field(default_factory=dict)


def mask_probabilities(layout: AugmentedLayout, network: NetworkSpec, mode: str):
    """Per-column observation probabilities, or ``None`` under perfect information."""
    if mode == PERFECT:
        return None
    if mode != IMPERFECT:
        raise ValueError(f"unknown information mode {mode!r}")
    return layout.column_probs(network.p_sc, network.p_link)


def assemble_CD(law: np.ndarray, sample: BetaSample, layout: AugmentedLayout, Phi: np.ndarray,
                i: int, masks: np.ndarray | None = None):
    """Explicit ``(C_{i,k}, D_{i,k})`` for one draw of the lag coefficients.

    ``masks`` (``p x dim`` of 0/1) applies realized observation switches to the other
    controllers' laws, giving the imperfect-information map.
    """
    M, K, p, k = layout.M, layout.K, layout.p, layout.k
    if law.shape != (p, K, layout.dim) or sample.beta.shape[:2] != (p, k + 1):
        raise ValueError("law, sample and layout disagree")
    if not 0 <= i < p:
        raise IndexError(f"controller {i} out of range")
    played = law if masks is None else law * masks[:, None, :]
    beta = sample.beta
    nxt = layout.next
    C = np.zeros((nxt.dim, layout.dim))
    D = np.zeros((nxt.dim, K))
    C[:M, :M] = Phi + sum((beta[l, 0] @ played[l][:, :M] for l in range(p) if l != i),
                          np.zeros((M, M)))
    for n in range(1, k + 1):
        for m in range(p):
            cols = layout.block(m, n)
            C[:M, cols] = beta[m, n] + sum(
                (beta[l, 0] @ played[l][:, cols] for l in range(p) if l != i), np.zeros((M, K)))
    for l in range(p):
        if l != i:
            C[layout.u_slot(l)] = played[l]
    C[M + p * K:, M:] = np.eye(layout.dim - M)
    D[:M] = beta[i, 0]
    D[layout.u_slot(i)] = np.eye(K)
    return C, D


def _stacked_operator(moments: MomentSet):
    lay = moments.layout
    p, K = lay.p, lay.K
    carried = lay.carried()
    H = np.empty((p * K, p * K))
    rhs = np.empty((p * K, lay.dim))
    for i in range(p):
        rows = slice(i * K, (i + 1) * K)
        for l in range(p):
            H[rows, l * K:(l + 1) * K] = moments.G[i] if l == i else moments.Y[i, l]
        rhs[rows] = moments.kernel[i][lay.u_slot(i)][:, carried]
    return H, rhs


def solve_coefficients(k: int, moments: MomentSet, mode: str = PERFECT,
                       network: NetworkSpec | None = None):
    """Solve the coupled coefficient equations of every controller at step ``k``.

    Returns ``(law, effective)``, both ``(p, K, dim)``; they coincide under perfect
    information.
    """
    if moments.k != k:
        raise ValueError(f"moments are for step {moments.k}, not {k}")
    H, rhs = _stacked_operator(moments)
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond * np.finfo(float).eps > 1e-2:
        raise SolverError(k, float(cond))
    lay = moments.layout
    sol = scipy.linalg.solve(H, rhs, check_finite=False)
    effective = -sol.reshape(lay.p, lay.K, lay.dim)
    probs = None
    if mode != PERFECT:
        if network is None:
            raise ValueError("imperfect mode needs the NetworkSpec")
        probs = mask_probabilities(lay, network, mode)
    if probs is None:
        return effective, effective
    if np.any(probs == 0.0):
        raise SolverError(k, float("inf"), f"observation probability zero at step {k}; "
                                           "coefficients are undetermined")
    return effective / probs[:, None, :], effective


def _min_eig_ratio(S: np.ndarray) -> float:
    live = np.flatnonzero(np.any(S != 0.0, axis=0))
    if live.size == 0:
        return 0.0
    ev = np.linalg.eigvalsh(S[np.ix_(live, live)])
    scale = max(abs(ev[0]), abs(ev[-1]))
    return float(ev[0] / scale) if scale > 0 else 0.0


def riccati_step(k: int, S_next, moments: MomentSet, plant: PlantSpec,
                 network: NetworkSpec | None = None, mode: str = PERFECT,
                 check: bool = True) -> StepResult:
    """One backward step: coefficients, gains and value matrices at step ``k``.

    The value update is evaluated in closed-loop form
    ``Q1 + K_i^T R_i K_i + E[(C_i + D_i K_i)^T S (C_i + D_i K_i)]``, which equals
    ``Q1 + E[C^T S C] - L^T G L`` at the solved coefficients and stays PSD by construction.
    """
    law, eff = solve_coefficients(k, moments, mode, network)
    lay = moments.layout
    p, M, d = lay.p, lay.M, lay.dim
    probs = mask_probabilities(lay, network, mode) if mode != PERFECT else None
    carried, U = lay.carried(), lay.u_rows
    Kall = eff.reshape(p * lay.K, d)
    groups = lay.column_groups()
    S_out, ratios, asym = [], np.zeros(p), np.zeros(p)
    for i in range(p):
        Sh = moments.kernel[i]
        SXU = Sh[carried][:, U] @ Kall
        S = Sh[np.ix_(carried, carried)] + SXU + SXU.T + Kall.T @ Sh[U, U] @ Kall
        S = S + eff[i].T @ plant.R[i] @ eff[i]
        S[:M, :M] += plant.Q_1
        if probs is not None:
            same = groups[:, None] == groups[None, :]
            for l in range(p):
                var = probs[l] * (1.0 - probs[l])
                if l != i and np.any(var):
                    sl = lay.u_slot(l)
                    S = S + (law[l].T @ Sh[sl, sl] @ law[l]) * (var[:, None] * same)
        asym[i] = float(np.max(np.abs(S - S.T))) if d else 0.0
        S = 0.5 * (S + S.T)
        if check:
            ratios[i] = _min_eig_ratio(S)
            if ratios[i] < -PSD_RTOL:
                raise NumericalError(f"value matrix of controller {i} at step {k} is indefinite: "
                                     f"min eigenvalue / norm = {ratios[i]:.3g}")
        S_out.append(S)
    return StepResult(law=law, effective=eff, S=S_out, min_eig_ratio=ratios, asym=asym)


def direct_value_update(moments: MomentSet, effective: np.ndarray, plant: PlantSpec,
                        law: np.ndarray | None = None, mask_probs=None) -> list:
    """``Q1 + E[C^T S C] - L^T G L`` with ``L = G^{-1} E[D^T S C]`` (reference form)."""
    lay = moments.layout
    M, p = lay.M, lay.p
    law = effective if law is None else law
    CSC = expected_CSC(moments, law, mask_probs)
    out = []
    carried = lay.carried()
    for i in range(p):
        Lam = np.zeros((lay.next.dim, lay.dim))
        Lam[carried, np.arange(lay.dim)] = 1.0
        for l in range(p):
            if l != i:
                Lam[lay.u_slot(l)] = effective[l]
        DSC = moments.kernel[i][lay.u_slot(i)] @ Lam
        L = np.linalg.solve(moments.G[i], DSC)
        S = CSC[i] - L.T @ moments.G[i] @ L
        S[:M, :M] += plant.Q_1
        out.append(0.5 * (S + S.T))
    return out


def two_player_closed_form(moments: MomentSet, S_next, plant: PlantSpec) -> np.ndarray:
    """Explicit two-controller coefficients from raw moments (reference for ``p = 2``).

    Returns the laws ``(2, K, dim)``.
    """
    lay = moments.layout
    if lay.p != 2:
        raise ValueError("closed form is only defined for two controllers")
    M, K, k, p = lay.M, lay.K, lay.k, 2
    nxt = lay.next
    Phi = plant.Phi
    I = np.eye(K)

    def E2(owner, a, lag_a, b, lag_b):
        sec = moments.second[owner]
        ra = (lag_a * p + a) * K
        rb = (lag_b * p + b) * K
        return sec[ra:ra + K, rb:rb + K]

    a1, a2, b1, G = [], [], [], []
    for i in range(2):
        o = 1 - i
        S = S_next[i]
        ui, uo = nxt.block(i, 1), nxt.block(o, 1)
        Eb0 = moments.Eb(i, 0)
        Gi = (plant.R[i] + E2(i, i, 0, i, 0) + Eb0.T @ S[:M, ui] + S[ui, :M] @ Eb0 + S[ui, ui])
        Ginv = np.linalg.inv(Gi)
        G.append(Gi)
        a1.append(Ginv @ (Eb0.T @ S[:M, :M] @ Phi + S[ui, :M] @ Phi))
        a2.append(Ginv @ (E2(i, i, 0, o, 0) + S[ui, :M] @ moments.Eb(o, 0)
                          + Eb0.T @ S[:M, uo] + S[ui, uo]))
        cols = {}
        for n in range(1, k + 1):
            for m in range(2):
                c = nxt.block(m, n + 1)
                cols[m, n] = Ginv @ (E2(i, i, 0, m, n) + S[ui, :M] @ moments.Eb(m, n)
                                     + Eb0.T @ S[:M, c] + S[ui, c])
        b1.append(cols)

    law = np.zeros((2, K, lay.dim))
    law[0][:, :M] = np.linalg.solve(I - a2[0] @ a2[1], a2[0] @ a1[1] - a1[0])
    law[1][:, :M] = np.linalg.solve(I - a2[1] @ a2[0], a2[1] @ a1[0] - a1[1])
    for n in range(1, k + 1):
        for m in range(2):
            c = lay.block(m, n)
            law[0][:, c] = np.linalg.solve(I - a2[0] @ a2[1], a2[0] @ b1[1][m, n] - b1[0][m, n])
            law[1][:, c] = np.linalg.solve(I - a2[1] @ a2[0], a2[1] @ b1[0][m, n] - b1[1][m, n])
    return law


def _terminal(plant: PlantSpec) -> list:
    d = plant.M + plant.p * plant.N * plant.K
    S = np.zeros((d, d))
    S[:plant.M, :plant.M] = plant.Q_N
    return [S.copy() for _ in range(plant.p)]


def solve_game(plant: PlantSpec, network: NetworkSpec, n_samples: int = DEFAULT_SAMPLES,
               seed: int = 0, mode: str | None = None, method: str = "mc",
               keep_values: bool = True, check: bool = True) -> GameSolution:
    """Full backward pass from ``S_N = Q_N`` (padded) down to step 0.

    ``method`` is ``"mc"`` (Monte Carlo moments from one shared bank of draws) or
    ``"exact"`` (loss-run enumeration with delay quadrature).
    """
    if network.p != plant.p:
        raise ValueError(f"network has {network.p} controllers, plant has {plant.p}")
    mode = network.info_mode if mode is None else mode
    if method not in ("mc", "exact"):
        raise ValueError(f"unknown moment method {method!r}")
    N, p = plant.N, plant.p
    bank = BetaBank(plant, network, n_samples, seed) if method == "mc" else None
    S = _terminal(plant)
    L = [None] * N
    values = [None] * (N + 1) if keep_values else None
    if keep_values:
        values[N] = S
    ratios = np.zeros((N, p))
    asym = np.zeros((N, p))
    for k in range(N - 1, -1, -1):
        if method == "mc":
            mom = estimate_moments(plant, network, k, S, n_samples, seed, bank=bank)
        else:
            mom = exact_moments(plant, network, k, S)
        step = riccati_step(k, S, mom, plant, network, mode, check=check)
        L[k] = step.L
        S = step.S
        ratios[k] = step.min_eig_ratio
        asym[k] = step.asym
        if keep_values:
            values[k] = S
    schedule = GainSchedule(M=plant.M, K=plant.K, p=p, N=N, mode=mode, L=L,
                            seed=seed if method == "mc" else None,
                            n_samples=n_samples if method == "mc" else None, method=method,
                            spec_hash=spec_hash(plant, network.with_mode(mode)))
    V0 = np.array([plant.x0 @ S[i] @ plant.x0 for i in range(p)])
    log.debug("solved %d-step game, V0=%s", N, V0)
    return GameSolution(schedule=schedule, V0=V0, S0=S, values=values, min_eig_ratio=ratios,
                        asym=asym)


def single_controller_gains(plant: PlantSpec, network: NetworkSpec, **kwargs) -> GainSchedule:
    """Baseline where controller 1 acts alone (perfect information)."""
    sub_net = network.restrict(1).with_mode(PERFECT)
    return solve_game(plant.restrict(1), sub_net, mode=PERFECT, **kwargs).schedule


@dataclass
class ConvergedGains:
    """Stationary coefficients: ``A[i]`` and ``alpha[i, n-1, m]`` for lags ``n <= lag_cap``."""

    A: np.ndarray
    alpha: np.ndarray
    k: int
    residual: float
    lag_cap: int
    mode: str
    trace: list

    def law(self, k: int) -> np.ndarray:
        """Stationary law truncated to the history available at step ``k``."""
        p, K, M = self.A.shape
        lay = AugmentedLayout(M, K, p, k)
        out = np.zeros((p, K, lay.dim))
        out[:, :, :M] = self.A
        for n in range(1, min(k, self.lag_cap) + 1):
            for m in range(p):
                out[:, :, lay.block(m, n)] = self.alpha[:, n - 1, m]
        return out


def _inf_norm(X: np.ndarray) -> float:
    return float(np.max(np.sum(np.abs(X), axis=-1))) if X.size else 0.0


def converged_gains(plant: PlantSpec, network: NetworkSpec, N_large: int = 200,
                    tol: float = 1e-6, mode: str | None = None, lag_cap: int = 4,
                    **kwargs) -> ConvergedGains:
    """Run a long horizon and return the first step (scanning down) where gains settle.

    Settled means every ``A_i^k`` and every history block up to ``lag_cap`` moved by at
    most ``tol`` in the infinity norm relative to step ``k + 1``.
    """
    mode = network.info_mode if mode is None else mode
    sol = solve_game(plant.with_horizon(N_large), network, mode=mode, keep_values=False, **kwargs)
    sched = sol.schedule
    p = plant.p
    trace = []
    for k in range(N_large - 1, -1, -1):
        if k == N_large - 1:
            res = float("inf")
        else:
            diffs = [_inf_norm(sched.A(i, k) - sched.A(i, k + 1)) for i in range(p)]
            for n in range(1, min(lag_cap, k) + 1):
                for i in range(p):
                    for m in range(p):
                        diffs.append(_inf_norm(sched.alpha(i, k, m, n) - sched.alpha(i, k + 1, m, n)))
            res = max(diffs)
        trace.append((k, res))
        if res <= tol and k >= min(lag_cap, N_large - 1):
            cap = min(lag_cap, k)
            alpha = np.zeros((p, cap, p, plant.K, plant.K))
            for i in range(p):
                for n in range(1, cap + 1):
                    for m in range(p):
                        alpha[i, n - 1, m] = sched.alpha(i, k, m, n)
            A = np.stack([sched.A(i, k) for i in range(p)])
            return ConvergedGains(A=A, alpha=alpha, k=k, residual=res, lag_cap=cap, mode=mode,
                                  trace=trace)
    best = min(trace, key=lambda t: t[1])
    raise ConvergenceError(f"gains did not settle to {tol:g} within {N_large} steps "
                           f"(smallest change {best[1]:.3g} at step {best[0]})", trace)


def stationary_schedule(conv: ConvergedGains, plant: PlantSpec, spec: str = "") -> GainSchedule:
    """Constant-gain schedule over ``plant.N`` steps built from converged coefficients."""
    L = [-conv.law(k) for k in range(plant.N)]
    return GainSchedule(M=plant.M, K=plant.K, p=plant.p, N=plant.N, mode=conv.mode, L=L,
                        method="stationary", spec_hash=spec)
