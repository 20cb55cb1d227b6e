from dataclasses import replace

import numpy as np
import pytest

from drcmpc.dynamics import AgentState
from drcmpc.nlpsolve import SLSQP, SolverOptions
from drcmpc.planner import Planner
from drcmpc.sim import (ADVERSARIAL, COOPERATIVE, NEUTRAL, BehaviorPolicy, TrajectoryLog,
                        adversarial_policy_step, cooperative_policy_step, ego_mpc_config,
                        generate_training_runs, min_pairwise_distance, neutral_policy_step,
                        obstacle_mpc_config, perturb_obstacles, run_closed_loop, scenario_one,
                        scenario_two)


def test_adversarial_examples():
    obs = AgentState(10.0, 0.5, 0.0, 5.0)
    u = adversarial_policy_step(obs, ego_v_now=9.5, ego_v_prev=10.0, Ts=1.0)
    assert u.a == pytest.approx(-1.0) and u.delta == 0.0
    assert adversarial_policy_step(obs, 10.0, 10.0).a == 0.0
    # 2 * 0.5 / 0.1 = 10 exceeds the acceleration bound of 4
    assert adversarial_policy_step(obs, 10.5, 10.0, Ts=0.1).a == 4.0
    assert adversarial_policy_step(obs, 9.0, 10.0, Ts=0.1).a == -4.0


def test_adversarial_respects_speed_limits():
    obs = AgentState(0.0, 0.5, 0.0, 0.05)
    u = adversarial_policy_step(obs, 9.0, 10.0, v_limits=(0.0, 10.0), Ts=0.1)
    assert obs.v + 0.1 * u.a == pytest.approx(0.0)


def test_scenarios():
    one, two = scenario_one(), scenario_two()
    assert one.ego_init.position.tolist() == [0.0, 0.5]
    o = one.obstacles_init[0]
    assert o.px > one.ego_init.px and o.py == one.ego_init.py and o.v < one.ego_target[3]
    assert two.obstacles_init[1].position.tolist() == [20.0, 1.5]
    with pytest.raises(ValueError):
        scenario_one(obstacles_init=[], obstacle_targets=[])
    with pytest.raises(ValueError):
        scenario_one(run_length=-1)
    with pytest.raises(ValueError):
        BehaviorPolicy("aggressive")


def test_zero_length_run_logs_initial_state():
    sc = scenario_one(run_length=0)
    log = run_closed_loop(sc, Planner(ego_mpc_config(sc)), [BehaviorPolicy(NEUTRAL)])
    assert log.n_rows == 1
    np.testing.assert_array_equal(log.ego[0], sc.ego_init.as_array())
    assert log.min_distance == pytest.approx(10.0)


def test_behavior_count_checked():
    sc = scenario_one()
    with pytest.raises(ValueError):
        run_closed_loop(sc, Planner(ego_mpc_config(sc)), [])


def test_matched_speed_neutral_obstacle_keeps_gap():
    sc = scenario_one(obstacles_init=[AgentState(10.0, 0.5, 0.0, 15.0)],
                      obstacle_targets=[np.array([400.0, 0.5, 0.0, 15.0])],
                      obstacle_v_max=15.0, run_length=20)
    log = run_closed_loop(sc, Planner(ego_mpc_config(sc)), [BehaviorPolicy(NEUTRAL, target=sc.obstacle_targets[0])])
    assert not log.collided(sc.d_safe)
    assert log.min_distance == pytest.approx(10.0, abs=0.05)


def test_closed_loop_invariants():
    sc = scenario_one(run_length=15)
    cfg = ego_mpc_config(sc)
    log = run_closed_loop(sc, Planner(cfg), [BehaviorPolicy(ADVERSARIAL)])
    np.testing.assert_allclose(np.diff(log.times), sc.Ts, rtol=1e-12)
    U = log.ego_inputs[:-1]
    assert np.all(U >= cfg.u_min) and np.all(U <= cfg.u_max)
    for k in range(log.n_rows):
        assert log.min_dist[k] == min_pairwise_distance(log.ego[k], log.obstacles[k])
        assert log.min_dist[k] == np.linalg.norm(log.ego[k, :2] - log.obstacles[k, 0, :2])
    # obstacle speed follows twice the ego's speed change of the previous step
    v_ego, v_obs = log.ego[:, 3], log.obstacles[:, 0, 3]
    for k in range(1, log.n_rows - 1):
        dv = np.clip(2 * (v_ego[k] - v_ego[k - 1]), -4 * sc.Ts, 4 * sc.Ts)
        want = np.clip(v_obs[k] + dv, sc.x_min[3], sc.obstacle_v_max)
        assert v_obs[k + 1] == pytest.approx(want, abs=1e-12)


def test_closed_loop_is_deterministic():
    sc = scenario_one(run_length=10)
    runs = [run_closed_loop(sc, Planner(ego_mpc_config(sc)), [BehaviorPolicy(COOPERATIVE)])
            for _ in range(2)]
    assert runs[0].to_csv(include_timing=False) == runs[1].to_csv(include_timing=False)


def test_csv_round_trip(tmp_path):
    sc = scenario_two(run_length=5)
    log = run_closed_loop(sc, Planner(ego_mpc_config(sc)),
                          [BehaviorPolicy(NEUTRAL, target=t) for t in sc.obstacle_targets])
    path = tmp_path / "log.csv"
    text = log.to_csv(path)
    header = text.splitlines()[0].split(",")
    assert header[:8] == ["k", "t", "ego_px", "ego_py", "ego_theta", "ego_v", "a", "delta"]
    assert header[8:16] == [f"obs{j}_{f}" for j in range(2) for f in ("px", "py", "theta", "v")]
    assert header[16:] == ["solve_ms", "slack", "min_dist"]
    back = TrajectoryLog.from_csv(path, Ts=sc.Ts)
    np.testing.assert_array_equal(back.ego, log.ego)
    np.testing.assert_array_equal(back.obstacles, log.obstacles)
    np.testing.assert_array_equal(back.min_dist, log.min_dist)
    np.testing.assert_array_equal(back.solve_ms, log.solve_ms)
    assert back.to_csv() == text
    quiet = log.to_csv(include_timing=False)
    assert TrajectoryLog.from_csv(quiet).solve_ms.tolist() == [0.0] * log.n_rows


def test_neutral_obstacle_at_target_stays_put():
    sc = scenario_one()
    target = np.array([10.0, 0.5, 0.0, 1.0])
    cfg = obstacle_mpc_config(sc, target)
    u = neutral_policy_step(AgentState(10.0, 0.5, 0.0, 1.0), cfg)
    np.testing.assert_allclose(u.as_array(), 0.0, atol=1e-6)


def test_cooperative_obstacle_yields_laterally_to_oncoming_ego():
    sc = scenario_one()
    cfg = obstacle_mpc_config(sc, sc.obstacle_targets[0])
    obs = AgentState(10.0, 0.5, 0.0, 1.0)
    ego = AgentState(8.0, 0.5, 0.0, 15.0)
    u = cooperative_policy_step(obs, ego, cfg)
    assert abs(u.delta) > 1e-3


def test_cooperative_with_distant_ego_matches_neutral():
    sc = scenario_one()
    # an input cost makes the optimum unique, so the two inputs are comparable
    cfg = replace(obstacle_mpc_config(sc, sc.obstacle_targets[0]), R1=np.diag([1e-2, 1e-2]),
                  solver=SolverOptions(backend=SLSQP, opt_tol=1e-9))
    obs = AgentState(10.0, 0.5, 0.0, 0.8)
    far_ego = AgentState(-300.0, 0.5, 0.0, 1.0)
    coop = cooperative_policy_step(obs, far_ego, cfg).as_array()
    neutral = neutral_policy_step(obs, cfg).as_array()
    np.testing.assert_allclose(coop, neutral, atol=1e-6)


def test_perturbation_stays_in_box():
    sc = scenario_one()
    rng = np.random.default_rng(0)
    for _ in range(200):
        o = perturb_obstacles(sc, rng, x_var=1.0, v_var=4.0)[0]
        assert sc.x_min[3] <= o.v <= sc.obstacle_v_max
        assert o.py == sc.obstacles_init[0].py


def test_training_runs_are_seeded():
    sc = scenario_one(run_length=12)
    a = generate_training_runs(sc, 2, seed=7)
    b = generate_training_runs(sc, 2, seed=7)
    c = generate_training_runs(sc, 2, seed=8)
    assert [l.to_csv(include_timing=False) for l in a] == [l.to_csv(include_timing=False) for l in b]
    assert a[0].to_csv(include_timing=False) != c[0].to_csv(include_timing=False)
    with pytest.raises(ValueError):
        generate_training_runs(sc, 0, seed=1)
