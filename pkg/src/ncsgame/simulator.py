"""Closed-loop rollouts under sampled delays and losses.

Each step every controller computes its control from the augmented state, records it
in the shared history and sends it to its actuator.  The actuator applies it if the
end-to-end packet arrives (``theta = theta_sc & theta_ca``) and otherwise keeps the
last delivered control.  The plant then advances by the exact sampled-data update

    x_{k+1} = Phi x_k + sum_i Gamma0_i(tau) uh_{i,k} + Gamma1_i(tau) uh_{i,k-1}.

Under imperfect information a controller sees the state only if its observation
switch is on, and another controller's past control only if that broadcast arrived;
lost entries count as zero.  The observation switch is drawn independently of the
delivery switches by default, which is the setting the solver's expectations assume;
``coupled_obs=True`` reuses the sensor switch instead.

Batches of runs are simulated together, vectorized over the run axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .artifacts import write_csv
from .discretization import DiscreteStep, PlantSpec, build_beta, discretize, gamma_batch
from .network import IMPERFECT, PERFECT, NetworkSpec, ScenarioRealization, sample_scenario
from .rng import derive_seed
from .solver import GainSchedule

__all__ = [
    "SimulationTrace",
    "CostSummary",
    "controller_emit",
    "observation_mask",
    "step_plant",
    "step_plant_beta",
    "run_episode",
    "run_monte_carlo",
    "paired_difference",
    "write_trace_csv",
    "write_summary_csv",
]

BATCH = 512
DUAL_PATH_TOL = 1e-12


@dataclass
class SimulationTrace:
    """One realized episode.

    ``u[k, i]`` is the control computed by controller ``i`` (and counted in its cost);
    ``u_applied[k, i]`` is what its actuator held during step ``k``.
    """

    x: np.ndarray          # (N+1, M)
    u: np.ndarray          # (N, p, K)
    u_applied: np.ndarray  # (N, p, K)
    emitted: np.ndarray    # (N, p) bool
    realization: ScenarioRealization
    J_joint: float
    J: np.ndarray          # (p,)
    mode: str = PERFECT


@dataclass
class CostSummary:
    """Realized costs of one schedule over a batch of seeded runs."""

    name: str
    J: np.ndarray        # (runs, p)
    J_joint: np.ndarray  # (runs,)
    seeds: np.ndarray    # (runs,)

    @property
    def runs(self) -> int:
        return self.J_joint.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.J.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        return self.J.std(axis=0, ddof=1) / np.sqrt(self.runs)

    @property
    def joint_mean(self) -> float:
        return float(self.J_joint.mean())

    @property
    def joint_stderr(self) -> float:
        return float(self.J_joint.std(ddof=1) / np.sqrt(self.runs))


def paired_difference(a: CostSummary, b: CostSummary) -> tuple[float, float]:
    """Mean and standard error of the per-run joint-cost difference ``a - b``."""
    if not np.array_equal(a.seeds, b.seeds):
        raise ValueError("summaries were not computed on the same runs")
    d = a.J_joint - b.J_joint
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size))


def _obs_switch(realization: ScenarioRealization, coupled_obs: bool) -> np.ndarray:
    return realization.theta_sc if coupled_obs else realization.theta_obs


def observation_mask(realization: ScenarioRealization, k: int, M: int, K: int,
                     coupled_obs: bool = False) -> np.ndarray:
    """0/1 weights ``(p, dim_k)`` of what each controller observes at step ``k``.

    The state column is gated by the observation switch of step ``k``; the block of
    ``u_{m,k-n}`` by whether controller ``m``'s broadcast at step ``k-n`` arrived.
    """
    obs = _obs_switch(realization, coupled_obs)
    return _masks(obs[None], realization.theta_link[None], k, M, K)[0]


def _masks(theta_obs, theta_link, k, M, K):
    R, _, p = theta_obs.shape
    out = np.empty((R, p, M + p * k * K))
    out[:, :, :M] = theta_obs[:, k, :, None]
    if k:
        seen = theta_link[:, k - 1::-1]  # (R, k, i, m), lag 1 first
        out[:, :, M:] = np.repeat(seen.transpose(0, 2, 1, 3), K, axis=3).reshape(R, p, -1)
    return out


def _check_schedule(schedule: GainSchedule, plant: PlantSpec):
    if (schedule.M, schedule.K, schedule.p) != (plant.M, plant.K, plant.p):
        raise ValueError(f"schedule is for (M, K, p) = {(schedule.M, schedule.K, schedule.p)}, "
                         f"plant has {(plant.M, plant.K, plant.p)}")
    if schedule.N < plant.N:
        raise ValueError(f"schedule covers {schedule.N} steps, horizon is {plant.N}")


def controller_emit(i: int, k: int, z: np.ndarray, schedule: GainSchedule,
                    realization: ScenarioRealization, mode: str | None = None,
                    zero_fill: bool = False, coupled_obs: bool = False):
    """Control issued by controller ``i`` at step ``k``, or ``None`` if it stays silent.

    Under perfect information the controller knows ``z_k`` and always computes
    ``u = -L_{i,k} z_k``.  With ``zero_fill`` it instead stays silent whenever its sensor
    packet is lost.  Under imperfect information lost entries of ``z_k`` count as zero.
    """
    mode = schedule.mode if mode is None else mode
    if not 0 <= k < schedule.N:
        raise ValueError(f"schedule has no gains for step {k}")
    d = schedule.layout(k).dim
    z = np.asarray(z, dtype=float)
    if z.shape != (d,):
        raise ValueError(f"augmented state at step {k} must have length {d}, got {z.shape}")
    law = schedule.law(k)[i]
    if mode == IMPERFECT:
        mask = observation_mask(realization, k, schedule.M, schedule.K, coupled_obs)
        return law @ (mask[i] * z)
    if zero_fill and not realization.theta_sc[k, i]:
        return None
    return law @ z


def step_plant(plant: PlantSpec, x: np.ndarray, held_prev: np.ndarray, issued: np.ndarray,
               delivered: np.ndarray, tau: np.ndarray):
    """Advance one step with the actuator hold rule.

    ``held_prev[i]`` is what actuator ``i`` applied during the previous step; returns
    ``(x_next, held_now)``.
    """
    held_now = np.where(np.asarray(delivered, dtype=bool)[:, None], issued, held_prev)
    x_next = plant.Phi @ x
    for i in range(plant.p):
        step = discretize(plant, i, float(tau[i]))
        x_next = x_next + step.Gamma0 @ held_now[i] + step.Gamma1 @ held_prev[i]
    return x_next, held_now


def step_plant_beta(plant: PlantSpec, x: np.ndarray, u_hist: np.ndarray, theta_hist: np.ndarray,
                    tau: np.ndarray) -> np.ndarray:
    """Same update written with lag coefficients over the issued-control history.

    ``u_hist`` is ``(k+1, p, K)`` and ``theta_hist`` ``(k+1, p)`` for steps ``0..k``.
    """
    k = u_hist.shape[0] - 1
    x_next = plant.Phi @ x
    for i in range(plant.p):
        step = discretize(plant, i, float(tau[i]))
        x_next = x_next + build_beta(step, theta_hist[:, i], k).apply(u_hist[:, i])
    return x_next


def _rollout(plant: PlantSpec, schedule: GainSchedule, mode: str, tau, theta_sc, theta,
             theta_link, theta_obs, zero_fill: bool, verify: bool):
    """Vectorized rollout of ``R`` runs; arrays are indexed ``[r, k, i, ...]``."""
    R, N, p = tau.shape
    M, K = plant.M, plant.K
    G0 = np.empty((R, N, p, M, K))
    G1 = np.empty((R, N, p, M, K))
    for i in range(p):
        G0[:, :, i], G1[:, :, i] = gamma_batch(plant, i, tau[:, :, i])
    Phi = plant.Phi
    x = np.empty((R, N + 1, M))
    x[:, 0] = plant.x0
    u = np.zeros((R, N, p, K))
    held = np.zeros((R, N, p, K))
    prev = np.zeros((R, p, K))
    for k in range(N):
        hist = u[:, k - 1::-1].reshape(R, k * p * K) if k else np.zeros((R, 0))
        z = np.concatenate([x[:, k], hist], axis=1)
        law = schedule.law(k)
        if mode == IMPERFECT:
            obs = _masks(theta_obs, theta_link, k, M, K) * z[:, None, :]
            uk = np.einsum("ikd,rid->rik", law, obs)
        else:
            uk = np.einsum("ikd,rd->rik", law, z)
            if zero_fill:
                uk = uk * theta_sc[:, k, :, None]
        u[:, k] = uk
        now = np.where(theta[:, k, :, None], uk, prev)
        held[:, k] = now
        x[:, k + 1] = (x[:, k] @ Phi.T + np.einsum("rimk,rik->rm", G0[:, k], now)
                       + np.einsum("rimk,rik->rm", G1[:, k], prev))
        prev = now
    if verify:
        _verify_beta_path(plant, x, u, theta, G0, G1)
    return x, u, held


def _verify_beta_path(plant, x, u, theta, G0, G1):
    R, N, p, _ = u.shape
    for r in range(R):
        for k in range(N):
            alt = plant.Phi @ x[r, k]
            for i in range(p):
                step = DiscreteStep(plant.Phi, G0[r, k, i], G1[r, k, i], 0.0)
                alt = alt + build_beta(step, theta[r, :k + 1, i], k).apply(u[r, :k + 1, i])
            err = np.max(np.abs(alt - x[r, k + 1]))
            scale = max(1.0, np.max(np.abs(x[r, k + 1])))
            if err > DUAL_PATH_TOL * scale:
                raise AssertionError(f"hold and lag-coefficient updates disagree at run {r}, "
                                     f"step {k}: {err:.3g}")


def _costs(plant: PlantSpec, x, u):
    N = u.shape[1]
    state = np.einsum("rkm,mn,rkn->r", x[:, :N], plant.Q_1, x[:, :N])
    state += np.einsum("rm,mn,rn->r", x[:, N], plant.Q_N, x[:, N])
    ctrl = np.stack([np.einsum("rka,ab,rkb->r", u[:, :, i], plant.R[i], u[:, :, i])
                     for i in range(u.shape[2])], axis=1)
    return state[:, None] + ctrl, state + ctrl.sum(axis=1)


def run_episode(plant: PlantSpec, network: NetworkSpec, schedule: GainSchedule, seed: int,
                mode: str | None = None, zero_fill: bool = False, verify: bool = False,
                coupled_obs: bool = False) -> SimulationTrace:
    """Simulate one episode of ``plant.N`` steps on the realization drawn from ``seed``."""
    _check_schedule(schedule, plant)
    mode = schedule.mode if mode is None else mode
    real = sample_scenario(network, plant, seed)
    x, u, held = _rollout(plant, schedule, mode, real.tau[None], real.theta_sc[None],
                          real.theta[None], real.theta_link[None],
                          _obs_switch(real, coupled_obs)[None], zero_fill, verify)
    J, Jj = _costs(plant, x, u)
    emitted = np.ones_like(real.theta_sc) if mode == IMPERFECT or not zero_fill else real.theta_sc
    return SimulationTrace(x=x[0], u=u[0], u_applied=held[0], emitted=emitted.copy(),
                           realization=real, J_joint=float(Jj[0]), J=J[0], mode=mode)


def run_monte_carlo(plant: PlantSpec, network: NetworkSpec, schedules: dict, n_runs: int,
                    seed: int, zero_fill: bool = False, coupled_obs: bool = False,
                    batch: int = BATCH) -> dict:
    """Evaluate every named schedule on the same ``n_runs`` realizations.

    Run ``r`` uses the realization of seed ``derive_seed(seed, r)``.  A schedule with
    fewer controllers than the plant is simulated on the plant restricted to its first
    controllers, sharing their draws with the full runs.
    """
    if not schedules:
        raise ValueError("need at least one schedule")
    if n_runs < 2:
        raise ValueError("need at least two runs for standard errors")
    seeds = np.array([derive_seed(seed, r) for r in range(n_runs)], dtype=np.uint64)
    subs = {}
    for name, sched in schedules.items():
        sub_plant = plant if sched.p == plant.p else plant.restrict(sched.p)
        _check_schedule(sched, sub_plant)
        subs[name] = sub_plant
    J = {name: [] for name in schedules}
    Jj = {name: [] for name in schedules}
    for start in range(0, n_runs, batch):
        reals = [sample_scenario(network, plant, int(s)) for s in seeds[start:start + batch]]
        tau = np.stack([r.tau for r in reals])
        sc = np.stack([r.theta_sc for r in reals])
        th = np.stack([r.theta for r in reals])
        link = np.stack([r.theta_link for r in reals])
        obs = np.stack([_obs_switch(r, coupled_obs) for r in reals])
        for name, sched in schedules.items():
            q = sched.p
            x, u, _ = _rollout(subs[name], sched, sched.mode, tau[:, :, :q], sc[:, :, :q],
                               th[:, :, :q], link[:, :, :q, :q], obs[:, :, :q], zero_fill,
                               False)
            a, b = _costs(subs[name], x, u)
            J[name].append(a)
            Jj[name].append(b)
    return {name: CostSummary(name=name, J=np.concatenate(J[name]),
                              J_joint=np.concatenate(Jj[name]), seeds=seeds)
            for name in schedules}


def write_trace_csv(trace: SimulationTrace, path):
    """One row per step; the final row carries only the terminal state."""
    N, p, K = trace.u.shape
    M = trace.x.shape[1]
    tag = (lambda i, c: f"{i + 1}") if K == 1 else (lambda i, c: f"{i + 1}_{c + 1}")
    header = ["k"] + [f"x{j + 1}" for j in range(M)]
    header += [f"u{tag(i, c)}" for i in range(p) for c in range(K)]
    header += [f"uh{tag(i, c)}" for i in range(p) for c in range(K)]
    header += [f"theta_sc{i + 1}" for i in range(p)] + [f"theta_ca{i + 1}" for i in range(p)]
    header += [f"theta{i + 1}" for i in range(p)] + [f"tau{i + 1}" for i in range(p)]
    real = trace.realization
    rows = []
    for k in range(N + 1):
        row = [k] + [float(v) for v in trace.x[k]]
        if k < N:
            row += [float(v) for v in trace.u[k].ravel()]
            row += [float(v) for v in trace.u_applied[k].ravel()]
            row += [int(v) for v in real.theta_sc[k]] + [int(v) for v in real.theta_ca[k]]
            row += [int(v) for v in real.theta[k]] + [float(v) for v in real.tau[k]]
        else:
            row += [""] * (len(header) - len(row))
        rows.append(row)
    return write_csv(path, header, rows)


def write_summary_csv(summaries: dict, path):
    p = max(s.J.shape[1] for s in summaries.values())
    header = ["name", "mean", "stderr", "runs"]
    for i in range(p):
        header += [f"mean_J{i + 1}", f"stderr_J{i + 1}"]
    rows = []
    for name, s in summaries.items():
        row = [name, s.joint_mean, s.joint_stderr, s.runs]
        for i in range(p):
            row += [float(s.mean[i]), float(s.stderr[i])] if i < s.J.shape[1] else ["", ""]
        rows.append(row)
    return write_csv(path, header, rows)
