"""Expectations of the lag coefficients entering the backward recursion.

Write the state update as ``x_{k+1} = Phi x_k + b_k w`` where ``w`` stacks the
current and past controls of every controller in the ``z_{k+1}`` order and ``b_k``
(``M x p(k+1)K``) collects the random lag coefficients.  Every expectation the
recursion needs is a function of ``E[b_k]`` and ``E[b_k^T S11 b_k]`` for the
owner's value block ``S11``; both are formed here, either by Monte Carlo over a
shared bank of draws or exactly by enumerating loss runs and integrating delays.

One draw per controller is ``(tau, theta_now, run)``: the delay, whether the
packet of the current step was delivered, and how many earlier packets were lost
before the most recent delivery.  Because losses are i.i.d., this triple carries
the full dependence of the lag coefficients on the loss history, and the same
draw serves every step ``k`` (lags beyond ``k`` fall off the horizon).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .discretization import PlantSpec, gamma_batch
from .layout import AugmentedLayout
from .network import NetworkSpec
from .rng import uniform_stream

__all__ = [
    "BetaSample",
    "BetaBank",
    "MomentSet",
    "sample_beta_joint",
    "estimate_moments",
    "exact_moments",
    "kernel_from_moments",
    "expected_CSC",
    "DEFAULT_SAMPLES",
]

DEFAULT_SAMPLES = 20_000

STREAM_M_TAU = 11
STREAM_M_SC = 12
STREAM_M_CA = 13
STREAM_M_RUN = 14

_NEVER = np.int64(1) << 62


def _run_lengths(u: np.ndarray, q: float) -> np.ndarray:
    """Failures before the first success of an i.i.d. Bernoulli(q) sequence, by inversion."""
    if q >= 1.0:
        return np.zeros(u.shape, dtype=np.int64)
    if q <= 0.0:
        return np.full(u.shape, _NEVER, dtype=np.int64)
    g = np.floor(np.log1p(-u) / np.log1p(-q))
    return np.minimum(g, float(_NEVER)).astype(np.int64)


def _draws(network: NetworkSpec, T: float, seed: int, i: int, start: int, count: int):
    u_tau = uniform_stream(seed, STREAM_M_TAU, i, start=start, count=count)
    u_sc = uniform_stream(seed, STREAM_M_SC, i, start=start, count=count)
    u_ca = uniform_stream(seed, STREAM_M_CA, i, start=start, count=count)
    u_run = uniform_stream(seed, STREAM_M_RUN, i, start=start, count=count)
    tau = network.delay_model(i).sample(u_tau, T)
    now = (u_sc < network.p_sc[i]) & (u_ca < network.p_ca[i])
    run = _run_lengths(u_run, network.success(i))
    return tau, now, run


@dataclass(frozen=True)
class BetaSample:
    """One joint draw of every controller's lag coefficients at step ``k``.

    ``beta[i, j]`` multiplies ``u_{i,k-j}``; ``run[i]`` counts lost packets between the
    current step and the latest earlier delivery (``lag = 1 + run``).
    """

    k: int
    tau: np.ndarray
    theta_now: np.ndarray
    run: np.ndarray
    beta: np.ndarray  # (p, k+1, M, K)

    def b_matrix(self) -> np.ndarray:
        """Coefficients laid out like the controls in ``z_{k+1}`` (lag-major)."""
        p, k1, M, K = self.beta.shape
        return self.beta.transpose(2, 1, 0, 3).reshape(M, k1 * p * K)

    def loss_history(self, i: int) -> np.ndarray:
        """A delivery history ``theta_{i,0..k}`` consistent with this draw.

        Steps older than the latest earlier delivery do not affect the coefficients and
        are reported as delivered.
        """
        k = self.k
        hist = np.ones(k + 1)
        hist[k] = float(self.theta_now[i])
        last = k - 1 - int(min(self.run[i], k))
        hist[max(last + 1, 0):k] = 0.0
        return hist


class BetaBank:
    """Monte Carlo draws of ``(tau, theta_now, run)`` and the matching delay splits.

    Draw ``s`` of controller ``i`` is read from position ``s`` of the streams keyed by
    ``(seed, i)``, so a bank is a prefix of every larger bank with the same seed.
    """

    def __init__(self, plant: PlantSpec, network: NetworkSpec, n_samples: int, seed: int):
        if network.p != plant.p:
            raise ValueError(f"network has {network.p} controllers, plant has {plant.p}")
        if n_samples < 1:
            raise ValueError("need at least one sample")
        self.plant, self.network = plant, network
        self.n, self.seed = int(n_samples), int(seed)
        self.tau, self.now, self.run, self.G0, self.G1 = [], [], [], [], []
        for i in range(plant.p):
            tau, now, run = _draws(network, plant.T, seed, i, 0, self.n)
            G0, G1 = gamma_batch(plant, i, tau)
            self.tau.append(tau)
            self.now.append(now)
            self.run.append(run)
            self.G0.append(G0)
            self.G1.append(G1)

    def slots(self, k: int):
        """Per controller, the two (lag, value, valid) slots of each draw at step ``k``."""
        out = []
        for i in range(self.plant.p):
            now = self.now[i][:, None, None].astype(float)
            G0, G1 = self.G0[i], self.G1[i]
            lag1 = 1 + self.run[i]
            valid1 = lag1 <= k
            v0 = now * G0
            v1 = now * G1 + (1.0 - now) * (G0 + G1)
            out.append(((np.zeros(self.n, dtype=np.int64), v0, np.ones(self.n, dtype=bool)),
                        (np.where(valid1, lag1, 0), v1 * valid1[:, None, None], valid1)))
        return out

    def dense_b(self, k: int) -> np.ndarray:
        """Every draw's ``b_k`` as an ``(n, M, p(k+1)K)`` array."""
        p, M, K = self.plant.p, self.plant.M, self.plant.K
        out = np.zeros((self.n, M, p * (k + 1) * K))
        rows = np.arange(self.n)
        for i, pair in enumerate(self.slots(k)):
            for lag, v, _ in pair:
                col = (lag * p + i) * K
                for c in range(K):
                    out[rows, :, col + c] += v[:, :, c]
        return out

    def sample(self, k: int, s: int) -> BetaSample:
        p, M, K = self.plant.p, self.plant.M, self.plant.K
        beta = np.zeros((p, k + 1, M, K))
        for i, ((_, v0, _), (lag1, v1, valid1)) in enumerate(self.slots(k)):
            beta[i, 0] += v0[s]
            if valid1[s]:
                beta[i, lag1[s]] += v1[s]
        return BetaSample(k=k, tau=np.array([t[s] for t in self.tau]),
                          theta_now=np.array([n[s] for n in self.now]),
                          run=np.array([r[s] for r in self.run]), beta=beta)


def sample_beta_joint(plant: PlantSpec, network: NetworkSpec, k: int, seed: int,
                      sample_index: int) -> BetaSample:
    """Draw ``sample_index`` of the moment-engine stream, expanded at step ``k``."""
    if not 0 <= k < plant.N:
        raise ValueError(f"step {k} outside horizon {plant.N}")
    p, M, K = plant.p, plant.M, plant.K
    beta = np.zeros((p, k + 1, M, K))
    taus, nows, runs = [], [], []
    for i in range(p):
        tau, now, run = _draws(network, plant.T, seed, i, sample_index, 1)
        G0, G1 = gamma_batch(plant, i, tau)
        G0, G1 = G0[0], G1[0]
        if now[0]:
            beta[i, 0] = G0
        lag = 1 + int(run[0])
        if lag <= k:
            beta[i, lag] += G1 if now[0] else G0 + G1
        taus.append(tau[0])
        nows.append(bool(now[0]))
        runs.append(int(run[0]))
    return BetaSample(k=k, tau=np.array(taus), theta_now=np.array(nows), run=np.array(runs),
                      beta=beta)


@dataclass
class MomentSet:
    """Expectations feeding one backward step.

    ``mean_b`` is ``E[b_k]`` and ``second[i]`` is ``E[b_k^T S11_i b_k]``.  ``kernel[i]`` is
    ``E[Omega^T S_i Omega]`` for the one-step map ``Omega = [[Phi, b_k], [0, I]]``, the
    matrix from which ``G``, ``Y`` and every right-hand side are read.
    """

    k: int
    layout: AugmentedLayout
    mean_b: np.ndarray
    second: list
    kernel: list
    G: np.ndarray  # (p, K, K)
    Y: np.ndarray  # (p, p, K, K), Y[i, l] couples controller i to l
    sample_count: int
    seed: int | None
    method: str
    stderr: dict | None = field(default=None)

    def Eb(self, i: int, lag: int) -> np.ndarray:
        """``E[beta^lag_i]`` (lag 0 = current control)."""
        K = self.layout.K
        start = (lag * self.layout.p + i) * K
        return self.mean_b[:, start:start + K]

    def EB0(self, i: int) -> np.ndarray:
        return self.Eb(i, 0)


def _split(S: np.ndarray, M: int):
    return S[:M, :M], S[:M, M:], S[M:, M:]


def kernel_from_moments(Phi: np.ndarray, S: np.ndarray, mean_b: np.ndarray,
                        second: np.ndarray) -> np.ndarray:
    """``E[Omega^T S Omega]`` from the first two moments of ``b``."""
    M = Phi.shape[0]
    S11, S12, S22 = _split(S, M)
    top = Phi.T @ S11 @ Phi
    cross = Phi.T @ (S11 @ mean_b + S12)
    low = second + mean_b.T @ S12 + S12.T @ mean_b + S22
    out = np.block([[top, cross], [cross.T, low]])
    return 0.5 * (out + out.T)


def _check_values(plant: PlantSpec, k: int, S_next: Sequence[np.ndarray]) -> AugmentedLayout:
    layout = AugmentedLayout(plant.M, plant.K, plant.p, k)
    if len(S_next) != plant.p:
        raise ValueError(f"expected {plant.p} value matrices, got {len(S_next)}")
    d = layout.next.dim
    for i, S in enumerate(S_next):
        if S.shape != (d, d):
            raise ValueError(f"value matrix {i} has shape {S.shape}, expected {(d, d)}")
    return layout


def _finish(plant, layout, k, mean_b, second, S_next, n, seed, method, stderr=None) -> MomentSet:
    p, K = plant.p, plant.K
    kernel = [kernel_from_moments(plant.Phi, S_next[i], mean_b, second[i]) for i in range(p)]
    G = np.empty((p, K, K))
    Y = np.empty((p, p, K, K))
    for i in range(p):
        ui = layout.u_slot(i)
        for l in range(p):
            Y[i, l] = kernel[i][ui, layout.u_slot(l)]
        G[i] = plant.R[i] + Y[i, i]
        G[i] = 0.5 * (G[i] + G[i].T)
    return MomentSet(k=k, layout=layout, mean_b=mean_b, second=second, kernel=kernel, G=G, Y=Y,
                     sample_count=n, seed=seed, method=method, stderr=stderr)


def _scatter(idx: np.ndarray, vals: np.ndarray, size: int) -> np.ndarray:
    """Sum ``vals[s]`` into bucket ``idx[s]``; ``vals`` is ``(n, a, b)``."""
    n, a, b = vals.shape
    out = np.empty((size, a, b))
    for r in range(a):
        for c in range(b):
            out[:, r, c] = np.bincount(idx, weights=vals[:, r, c], minlength=size)
    return out


def estimate_moments(plant: PlantSpec, network: NetworkSpec, k: int, S_next,
                     n_samples: int = DEFAULT_SAMPLES, seed: int = 0, bank: BetaBank | None = None,
                     with_stderr: bool = False) -> MomentSet:
    """Monte Carlo moments at step ``k`` from ``n_samples`` joint draws.

    All entries are averages over the same draws, so repeated calls with equal
    ``(seed, n_samples)`` agree bit for bit.  Pass ``bank`` to reuse draws across steps.
    """
    layout = _check_values(plant, k, S_next)
    if bank is None:
        bank = BetaBank(plant, network, n_samples, seed)
    elif bank.n != n_samples or bank.seed != seed:
        raise ValueError("bank does not match (n_samples, seed)")
    p, M, K, n = plant.p, plant.M, plant.K, bank.n
    D = p * (k + 1)
    slots = [(lag * p + i, v) for i, pair in enumerate(bank.slots(k)) for lag, v, _ in pair]

    mean = np.zeros((D, M, K))
    for idx, v in slots:
        mean += _scatter(idx, v, D)
    mean /= n
    mean_b = mean.transpose(1, 0, 2).reshape(M, D * K)

    second = []
    for i in range(p):
        S11 = S_next[i][:M, :M]
        acc = np.zeros((D, D, K, K))
        weighted = [(idx, S11 @ v) for idx, v in slots]
        for ia, va in slots:
            for ib, wb in weighted:
                prod = np.einsum("nmk,nml->nkl", va, wb)
                acc += _scatter(ia * D + ib, prod, D * D).reshape(D, D, K, K)
        acc /= n
        sec = acc.transpose(0, 2, 1, 3).reshape(D * K, D * K)
        second.append(0.5 * (sec + sec.T))

    stderr = _dense_stderr(plant, bank, k, S_next, layout) if with_stderr else None
    return _finish(plant, layout, k, mean_b, second, S_next, n, seed, "mc", stderr)


def _dense_stderr(plant, bank, k, S_next, layout) -> dict:
    """Per-entry standard errors from explicit per-draw matrices (small instances only)."""
    p, M = plant.p, plant.M
    n = bank.n
    bs = bank.dense_b(k)
    Omega_top = np.concatenate([np.broadcast_to(plant.Phi, (n, M, M)), bs], axis=2)

    def se(x):
        return np.sqrt(x.var(axis=0, ddof=1) / n) if n > 1 else np.zeros(x.shape[1:])

    out = {"mean_b": se(bs), "second": [], "kernel": []}
    for i in range(p):
        S = S_next[i]
        S11 = S[:M, :M]
        out["second"].append(se(np.einsum("nma,mq,nqb->nab", bs, S11, bs)))
        d = layout.next.dim
        Om = np.zeros((n, d, d))
        Om[:, :M, :] = Omega_top
        Om[:, M:, M:] = np.eye(d - M)
        out["kernel"].append(se(np.einsum("nra,rs,nsb->nab", Om, S, Om)))
    return out


def exact_moments(plant: PlantSpec, network: NetworkSpec, k: int, S_next, n_nodes: int = 64,
                  tail_tol: float = 1e-12) -> MomentSet:
    """Moments by enumerating loss runs and integrating the delay law by quadrature.

    A lag ``j`` is reached only if the ``j - 1`` preceding packets were all lost; lags
    whose loss-run probability falls below ``tail_tol`` are dropped.
    """
    layout = _check_values(plant, k, S_next)
    p, M, K = plant.p, plant.M, plant.K
    D = p * (k + 1)
    means = np.zeros((p, k + 1, M, K))
    quad = []
    for i in range(p):
        q = network.success(i)
        nodes, w = network.delay_model(i).quadrature(plant.T, n_nodes)
        G0, G1 = gamma_batch(plant, i, nodes)
        EG0 = np.einsum("j,jmk->mk", w, G0)
        EG1 = np.einsum("j,jmk->mk", w, G1)
        hit_now = np.zeros(k + 1)   # P(now delivered, latest earlier delivery at lag j)
        hit_lost = np.zeros(k + 1)  # P(now lost, latest delivery at lag j)
        for j in range(1, k + 1):
            run = (1.0 - q) ** (j - 1)
            if run < tail_tol:
                break
            hit_now[j] = q * run * q
            hit_lost[j] = (1.0 - q) * run * q
        means[i, 0] = q * EG0
        means[i, 1:] = hit_now[1:, None, None] * EG1 + hit_lost[1:, None, None] * (EG0 + EG1)
        quad.append((q, w, G0, G1, hit_now, hit_lost))
    mean_b = means.transpose(2, 1, 0, 3).reshape(M, D * K)

    second = []
    for owner in range(p):
        S11 = S_next[owner][:M, :M]
        acc = np.zeros((D, D, K, K))
        for i in range(p):
            for l in range(p):
                if i != l:
                    acc[i::p, l::p] = np.einsum("amk,mq,bql->abkl", means[i], S11, means[l])
        for i, (q, w, G0, G1, hit_now, hit_lost) in enumerate(quad):
            def E(X, Z):
                return np.einsum("j,jmk,mq,jql->kl", w, X, S11, Z)
            G01 = G0 + G1
            c00, c01, c11, cff = E(G0, G0), E(G0, G1), E(G1, G1), E(G01, G01)
            acc[i, i] = q * c00
            for j in range(1, k + 1):
                if hit_now[j] == 0.0 and hit_lost[j] == 0.0:
                    continue
                a = j * p + i
                acc[i, a] = hit_now[j] * c01
                acc[a, i] = hit_now[j] * c01.T
                acc[a, a] = hit_now[j] * c11 + hit_lost[j] * cff
        sec = acc.transpose(0, 2, 1, 3).reshape(D * K, D * K)
        second.append(0.5 * (sec + sec.T))
    return _finish(plant, layout, k, mean_b, second, S_next, 0, None, "exact")


def expected_CSC(moments: MomentSet, gains: np.ndarray, mask_probs: np.ndarray | None = None):
    """``E[C_i^T S_i C_i]`` for every controller ``i``.

    ``gains`` is ``(p, K, dim)``: the laws ``u_l = gains[l] z`` of all controllers at step
    ``k`` (only ``l != i`` enter ``C_i``).  ``mask_probs`` gives the per-column
    observation probabilities in imperfect mode; the law of ``l`` is then applied to a
    masked ``z`` and the mask variance adds to the expectation.
    """
    lay = moments.layout
    p, K, d = gains.shape
    if d != lay.dim or p != lay.p:
        raise ValueError(f"gains have shape {gains.shape}, layout expects {(lay.p, lay.K, lay.dim)}")
    carried = lay.carried()
    groups = lay.column_groups()
    same = groups[:, None] == groups[None, :]
    eff = gains if mask_probs is None else gains * mask_probs[:, None, :]
    out = []
    for i in range(p):
        Sh = moments.kernel[i]
        Lam = np.zeros((lay.next.dim, d))
        Lam[carried, np.arange(d)] = 1.0
        for l in range(p):
            if l != i:
                Lam[lay.u_slot(l)] = eff[l]
        X = Lam.T @ Sh @ Lam
        if mask_probs is not None:
            for l in range(p):
                if l == i:
                    continue
                var = mask_probs[l] * (1.0 - mask_probs[l])
                if np.any(var):
                    sl = lay.u_slot(l)
                    C = gains[l].T @ Sh[sl, sl] @ gains[l]
                    X = X + C * (var[:, None] * same)
        out.append(0.5 * (X + X.T))
    return out
