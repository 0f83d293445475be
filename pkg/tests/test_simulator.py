import csv
import itertools

import numpy as np
import pytest

from ncsgame.discretization import PlantSpec, discretize
from ncsgame.network import NetworkSpec, sample_scenario
from ncsgame.solver import GainSchedule, solve_game
from ncsgame.simulator import (
    controller_emit,
    observation_mask,
    paired_difference,
    run_episode,
    run_monte_carlo,
    step_plant,
    step_plant_beta,
    write_summary_csv,
    write_trace_csv,
)

from conftest import certain_network


@pytest.fixture(scope="module")
def short(generic):
    plant = generic.plant.with_horizon(12)
    sol = solve_game(plant, generic.network, n_samples=2000, seed=0)
    imp = solve_game(plant, generic.network, n_samples=2000, seed=0, mode="imperfect")
    return plant, generic.network, sol.schedule, imp.schedule


def random_schedule(plant, rng, mode="perfect", scale=0.3):
    L = [scale * rng.standard_normal((plant.p, plant.K, plant.M + plant.p * k * plant.K))
         for k in range(plant.N)]
    return GainSchedule(M=plant.M, K=plant.K, p=plant.p, N=plant.N, mode=mode, L=L)


class TestStep:
    def test_zero_state_stays_zero(self, short):
        plant, net, sched, _ = short
        zero = plant.with_x0(np.zeros(plant.M))
        tr = run_episode(zero, net, sched, seed=3)
        assert not tr.x.any() and not tr.u.any() and tr.J_joint == 0.0

    def test_delivered_no_delay(self, generic):
        plant = generic.plant
        x = np.array([1.0, -0.5])
        issued = np.array([[2.0], [-1.0]])
        held_prev = np.array([[0.3], [0.1]])
        got, held = step_plant(plant, x, held_prev, issued, [True, True], np.zeros(2))
        want = plant.Phi @ x
        for i in range(2):
            want = want + discretize(plant, i, 0.0).Gamma0 @ issued[i]
        np.testing.assert_allclose(got, want, rtol=1e-14)
        np.testing.assert_array_equal(held, issued)

    def test_lost_packet_holds_previous(self, generic):
        plant = generic.plant
        x = np.array([1.0, -0.5])
        held_prev = np.array([[0.3], [0.1]])
        tau = np.array([0.01, 0.03])
        got, held = step_plant(plant, x, held_prev, np.ones((2, 1)), [False, False], tau)
        want = plant.Phi @ x
        for i in range(2):
            s = discretize(plant, i, tau[i])
            want = want + (s.Gamma0 + s.Gamma1) @ held_prev[i]
        np.testing.assert_allclose(got, want, rtol=1e-13)
        np.testing.assert_array_equal(held, held_prev)

    @pytest.mark.parametrize("k", range(5))
    def test_hold_and_lag_updates_agree_on_all_patterns(self, generic, k):
        plant = generic.plant
        rng = np.random.default_rng(k)
        u = rng.standard_normal((k + 1, 2, 1))
        tau = rng.uniform(0, plant.T, 2)
        x = rng.standard_normal(2)
        for bits in itertools.product([False, True], repeat=2 * (k + 1)):
            theta = np.array(bits).reshape(k + 1, 2)
            held = np.zeros((2, 1))
            for j in range(k):
                held = np.where(theta[j][:, None], u[j], held)
            direct, _ = step_plant(plant, x, held, u[k], theta[k], tau)
            via_lags = step_plant_beta(plant, x, u, theta, tau)
            np.testing.assert_allclose(direct, via_lags, rtol=0, atol=1e-12)

    def test_rollout_self_check(self, short):
        plant, net, sched, imp = short
        for s in range(5):
            run_episode(plant, net, sched, seed=s, verify=True)
            run_episode(plant, net, imp, seed=s, verify=True)


class TestControllerEmit:
    def test_perfect_uses_full_state(self, short):
        plant, net, sched, _ = short
        real = sample_scenario(net, plant, 0)
        z = np.arange(1.0, 2 + 2 * 3 + 1)
        np.testing.assert_allclose(controller_emit(1, 3, z, sched, real), sched.law(3)[1] @ z)

    def test_zero_fill_silent_on_sensor_loss(self, short):
        plant, net, sched, _ = short
        real = sample_scenario(net, plant, 0)
        real.theta_sc[2, 0] = False
        assert controller_emit(0, 2, np.ones(6), sched, real, zero_fill=True) is None
        assert controller_emit(0, 2, np.ones(6), sched, real) is not None

    def test_imperfect_masks_lost_information(self, short):
        plant, net, _, imp = short
        real = sample_scenario(net, plant, 0)
        k = 2
        real.theta_obs[k, 0] = False
        real.theta_link[k - 1, 0, 1] = False
        real.theta_link[k - 2, 0, 1] = True
        z = np.ones(2 + 2 * k)
        mask = observation_mask(real, k, 2, 1)
        np.testing.assert_array_equal(mask[0], [0, 0, 1, 0, 1, 1])
        np.testing.assert_allclose(controller_emit(0, k, z, imp, real), imp.law(k)[0] @ mask[0])

    def test_coupled_observation_uses_sensor_switch(self, short):
        plant, net, _, _ = short
        real = sample_scenario(net, plant, 0)
        real.theta_sc[0, 1] = False
        real.theta_obs[0, 1] = True
        assert observation_mask(real, 0, 2, 1, coupled_obs=True)[1].tolist() == [0, 0]
        assert observation_mask(real, 0, 2, 1)[1].tolist() == [1, 1]

    def test_shape_and_range_errors(self, short):
        plant, net, sched, _ = short
        real = sample_scenario(net, plant, 0)
        with pytest.raises(ValueError):
            controller_emit(0, 1, np.ones(3), sched, real)
        with pytest.raises(ValueError):
            controller_emit(0, 12, np.ones(26), sched, real)


class TestEpisode:
    def test_trace_matches_manual_loop(self, short):
        plant, net, sched, _ = short
        tr = run_episode(plant, net, sched, seed=7)
        real = tr.realization
        x = plant.x0.copy()
        held = np.zeros((2, 1))
        hist = []
        for k in range(plant.N):
            z = np.concatenate([x] + [hist[k - n][i] for n in range(1, k + 1) for i in range(2)])
            u = np.stack([controller_emit(i, k, z, sched, real) for i in range(2)])
            np.testing.assert_allclose(u, tr.u[k], rtol=1e-12, atol=1e-14)
            x, held = step_plant(plant, x, held, u, real.theta[k], real.tau[k])
            np.testing.assert_allclose(held, tr.u_applied[k], rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(x, tr.x[k + 1], rtol=1e-11, atol=1e-13)
            hist.append(u)

    def test_cost_is_quadratic_form_sum(self, short):
        plant, net, sched, _ = short
        tr = run_episode(plant, net, sched, seed=2)
        state = sum(x @ plant.Q_1 @ x for x in tr.x[:-1]) + tr.x[-1] @ plant.Q_N @ tr.x[-1]
        for i in range(2):
            ctrl = sum(u @ plant.R[i] @ u for u in tr.u[:, i])
            assert np.isclose(tr.J[i], state + ctrl, rtol=1e-12)
        assert np.isclose(tr.J_joint, state + sum(
            u @ plant.R[i] @ u for i in range(2) for u in tr.u[:, i]), rtol=1e-12)

    def test_costs_nonnegative_for_arbitrary_gains(self, generic):
        plant = generic.plant.with_horizon(6)
        rng = np.random.default_rng(0)
        for s in range(10):
            tr = run_episode(plant, generic.network, random_schedule(plant, rng), seed=s)
            assert tr.J_joint >= 0 and np.all(tr.J >= 0)

    def test_deterministic(self, short):
        plant, net, sched, _ = short
        a = run_episode(plant, net, sched, seed=11)
        b = run_episode(plant, net, sched, seed=11)
        assert a.x.tobytes() == b.x.tobytes() and a.u.tobytes() == b.u.tobytes()

    def test_imperfect_with_reliable_links_equals_perfect(self, generic):
        plant = generic.plant.with_horizon(8)
        net = NetworkSpec(p=2, delay_alpha=1.0, p_sc=1.0, p_ca=0.6, p_link=1.0)
        sched = random_schedule(plant, np.random.default_rng(1))
        for s in range(4):
            a = run_episode(plant, net, sched, seed=s, mode="perfect")
            b = run_episode(plant, net, sched, seed=s, mode="imperfect")
            np.testing.assert_array_equal(a.x, b.x)

    def test_schedule_mismatch(self, short, generic):
        plant, net, sched, _ = short
        with pytest.raises(ValueError):
            run_episode(generic.plant, net, sched, seed=0)  # horizon 200 > 12

    def test_no_losses_no_delay_is_deterministic_lqr_rollout(self, generic):
        plant = generic.plant.with_horizon(10)
        net = certain_network(2)
        sched = solve_game(plant, net, n_samples=5).schedule
        a = run_episode(plant, net, sched, seed=0)
        b = run_episode(plant, net, sched, seed=99)
        np.testing.assert_allclose(a.x, b.x, rtol=1e-14)
        sol = solve_game(plant, net, n_samples=5)
        assert np.isclose(a.J[0], sol.V0[0], rtol=1e-9)


class TestMonteCarlo:
    def test_matches_episodes(self, short):
        plant, net, sched, _ = short
        res = run_monte_carlo(plant, net, {"opt": sched}, n_runs=5, seed=4, batch=2)
        for r, s in enumerate(res["opt"].seeds):
            tr = run_episode(plant, net, sched, seed=int(s))
            np.testing.assert_allclose(res["opt"].J_joint[r], tr.J_joint, rtol=1e-12)

    def test_identical_schedules_have_zero_difference(self, short):
        plant, net, sched, _ = short
        res = run_monte_carlo(plant, net, {"a": sched, "b": sched}, n_runs=20, seed=0)
        diff, se = paired_difference(res["a"], res["b"])
        assert diff == 0.0 and se == 0.0

    def test_restricted_schedule_shares_draws(self, short):
        plant, net, sched, _ = short
        single = solve_game(plant.restrict(1), net.restrict(1), n_samples=500).schedule
        res = run_monte_carlo(plant, net, {"single": single}, n_runs=3, seed=1)
        s = int(res["single"].seeds[0])
        tr = run_episode(plant.restrict(1), net.restrict(1), single, seed=s)
        np.testing.assert_allclose(res["single"].J_joint[0], tr.J_joint, rtol=1e-12)

    def test_batch_size_irrelevant(self, short):
        plant, net, sched, _ = short
        a = run_monte_carlo(plant, net, {"o": sched}, n_runs=9, seed=2, batch=4)["o"]
        b = run_monte_carlo(plant, net, {"o": sched}, n_runs=9, seed=2, batch=512)["o"]
        np.testing.assert_allclose(a.J, b.J, rtol=1e-13)

    def test_argument_errors(self, short):
        plant, net, sched, _ = short
        with pytest.raises(ValueError):
            run_monte_carlo(plant, net, {}, 10, 0)
        with pytest.raises(ValueError):
            run_monte_carlo(plant, net, {"o": sched}, 1, 0)
        other = run_monte_carlo(plant, net, {"o": sched}, 4, 1)["o"]
        base = run_monte_carlo(plant, net, {"o": sched}, 4, 2)["o"]
        with pytest.raises(ValueError):
            paired_difference(other, base)


class TestCsv:
    def test_trace_csv(self, short, tmp_path):
        plant, net, sched, _ = short
        tr = run_episode(plant, net, sched, seed=0)
        path = tmp_path / "trace.csv"
        write_trace_csv(tr, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:5] == ["k", "x1", "x2", "u1", "u2"]
        assert len(rows) == plant.N + 2
        assert float(rows[-1][1]) == tr.x[-1, 0]
        assert rows[1][rows[0].index("theta1")] == str(int(tr.realization.theta[0, 0]))

    def test_summary_csv(self, short, tmp_path):
        plant, net, sched, _ = short
        single = solve_game(plant.restrict(1), net.restrict(1), n_samples=200).schedule
        res = run_monte_carlo(plant, net, {"opt": sched, "single": single}, 6, 0)
        path = tmp_path / "summary.csv"
        write_summary_csv(res, path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["name"] for r in rows] == ["opt", "single"]
        assert float(rows[0]["mean"]) == res["opt"].joint_mean
        assert rows[1]["mean_J2"] == ""
