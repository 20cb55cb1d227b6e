import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drcmpc.experiments import (CampaignResult, ExperimentConfig, LookaheadDataset, RunRecord,
                                bootstrap_epsilon, campaign_jobs, extract_datasets,
                                fit_lookahead_models, held_out_mse, mmd_behavior_table,
                                run_campaign, select_training_subset, trajectory_features)
from drcmpc.predict import build_context
from drcmpc.sim import TrajectoryLog, generate_training_runs, scenario_one


def _log(ego_xy, obs_xy, Ts=0.1):
    n = len(ego_xy)
    ego = np.zeros((n, 4))
    ego[:, :2] = ego_xy
    obs = np.zeros((n, 1, 4))
    obs[:, 0, :2] = obs_xy
    d = np.linalg.norm(ego[:, :2] - obs[:, 0, :2], axis=1)
    return TrajectoryLog(Ts=Ts, ego=ego, ego_inputs=np.zeros((n, 2)), obstacles=obs,
                         solve_ms=np.zeros(n), slack=np.zeros(n), min_dist=d)


def _random_log(rng, n):
    return _log(np.cumsum(rng.normal(size=(n, 2)), axis=0), np.cumsum(rng.normal(size=(n, 2)), axis=0))


def test_window_counts():
    rng = np.random.default_rng(0)
    d1, d2 = extract_datasets([_random_log(rng, 3)], N=2)
    assert (d1.n_pairs, d2.n_pairs) == (2, 1)
    assert d1.contexts.shape == (2, 4) and d2.contexts.shape == (1, 6)


def test_short_logs_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        extract_datasets([_random_log(rng, 2)], N=2)
    with pytest.raises(ValueError):
        extract_datasets([], N=2)


def test_stationary_agents_give_constant_labels():
    log = _log(np.tile([1.0, 0.5], (6, 1)), np.tile([4.0, 0.5], (6, 1)))
    for i, data in enumerate(extract_datasets([log], N=3), start=1):
        np.testing.assert_array_equal(data.contexts[:, 2:2 * i], 0.0)
        np.testing.assert_array_equal(data.labels, np.tile([4.0, 0.5], (data.n_pairs, 1)))


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_labels_replay_source_logs(seed, N):
    rng = np.random.default_rng(seed)
    logs = [_random_log(rng, int(rng.integers(N + 1, N + 8))) for _ in range(3)]
    for i, data in enumerate(extract_datasets(logs, N), start=1):
        assert data.n_pairs == sum(l.n_rows - i for l in logs)
        for (li, k), ctx, lab in zip(data.sources, data.contexts, data.labels):
            log = logs[li]
            np.testing.assert_array_equal(lab, log.obstacles[k + i, 0, :2])
            np.testing.assert_array_equal(ctx, build_context(log.ego[k:k + i, :2], log.obstacles[k, 0, :2], i))


def test_dataset_validation():
    with pytest.raises(ValueError):
        LookaheadDataset(1, np.zeros((0, 4)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        LookaheadDataset(2, np.zeros((3, 4)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        LookaheadDataset(1, np.zeros((3, 4)), np.zeros((2, 2)))


def _dataset(seed, n, i=1):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, 2 * (i + 1)))
    Y = np.column_stack([np.sin(Z[:, 0]) + Z[:, -2], np.cos(Z[:, 1])])
    return LookaheadDataset(i, Z, Y)


def test_selecting_everything_returns_the_full_set():
    data = _dataset(0, 6)
    sub = select_training_subset(data, 6)
    np.testing.assert_array_equal(sub.contexts, data.contexts)
    with pytest.raises(ValueError):
        select_training_subset(data, 7)
    with pytest.raises(ValueError):
        select_training_subset(data, 2, metric="mae")


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_selection_is_a_deterministic_subset(seed, ns):
    data = _dataset(seed, 10)
    a, b = select_training_subset(data, ns), select_training_subset(data, ns)
    np.testing.assert_array_equal(a.contexts, b.contexts)
    rows = {tuple(r) for r in data.contexts}
    assert all(tuple(r) in rows for r in a.contexts)
    assert a.n_pairs == ns


@pytest.mark.parametrize("seed", range(4))
def test_duplicates_are_not_picked_twice(seed):
    base = _dataset(seed, 5)
    data = LookaheadDataset(1, np.vstack([np.repeat(base.contexts[:1], 5, axis=0), base.contexts[1:]]),
                            np.vstack([np.repeat(base.labels[:1], 5, axis=0), base.labels[1:]]))
    for ns in (2, 3, 4, 5):
        chosen = select_training_subset(data, ns).contexts
        assert sum(np.array_equal(r, base.contexts[0]) for r in chosen) <= 1
    # once the distinct contexts run out, copies fill the remainder
    assert select_training_subset(data, 6).n_pairs == 6


@pytest.mark.parametrize("seed", range(4))
def test_greedy_steps_match_one_step_exhaustive_search(seed):
    data = _dataset(seed, 9)
    selected = []
    for ns in range(1, 5):
        chosen = select_training_subset(data, ns).contexts
        idx = [int(np.flatnonzero((data.contexts == r).all(axis=1))[0]) for r in chosen]
        new = set(idx) - set(selected)
        assert len(new) == 1 and set(selected) <= set(idx)
        best = min(held_out_mse(data, selected + [c]) for c in range(9) if c not in selected)
        assert held_out_mse(data, idx) == pytest.approx(best, rel=1e-12)
        selected = idx


@pytest.mark.parametrize("seed", range(3))
def test_exact_search_is_optimal(seed):
    data = _dataset(seed, 8)
    best = min(held_out_mse(data, c) for c in itertools.combinations(range(8), 3))
    exact = select_training_subset(data, 3, exact=True)
    idx = [int(np.flatnonzero((data.contexts == r).all(axis=1))[0]) for r in exact.contexts]
    assert held_out_mse(data, idx) == pytest.approx(best, rel=1e-12)
    with pytest.raises(ValueError):
        select_training_subset(_dataset(seed, 13), 3, exact=True)


@pytest.mark.parametrize("seed", range(5))
def test_greedy_beats_random_median(seed):
    data = _dataset(seed, 40)
    greedy = select_training_subset(data, 8)
    idx = [int(np.flatnonzero((data.contexts == r).all(axis=1))[0]) for r in greedy.contexts]
    rng = np.random.default_rng(seed)
    random = [held_out_mse(data, rng.choice(40, 8, replace=False)) for _ in range(20)]
    assert held_out_mse(data, idx) <= np.median(random)


def test_fit_and_bootstrap_epsilon():
    datasets = [_dataset(3, 20, i) for i in (1, 2)]
    models = fit_lookahead_models(datasets, n_samples=6)
    assert [m.lookahead for m in models] == [1, 2]
    assert all(m.n_samples == 6 for m in models)
    eps = bootstrap_epsilon(models, 200, 0.05, seed=0)
    assert eps > 0 and eps == bootstrap_epsilon(models, 200, 0.05, seed=0)


def test_trajectory_features_resample_in_time():
    log = _log(np.zeros((11, 2)), np.column_stack([np.linspace(0, 1, 11), np.full(11, 0.5)]))
    f = trajectory_features(log, n_points=3)
    np.testing.assert_allclose(f, [0.0, 0.5, 0.5, 0.5, 1.0, 0.5])


def test_mmd_table_properties():
    rng = np.random.default_rng(5)
    a = [_random_log(rng, 12) for _ in range(4)]
    b = [_random_log(rng, 12) for _ in range(4)]
    table = mmd_behavior_table({"x": a, "y": b, "x_again": list(a)})
    M = table.matrix
    np.testing.assert_array_equal(M, M.T)
    np.testing.assert_array_equal(np.diag(M), 0.0)
    assert M[0, 2] == 0.0
    assert M[0, 1] > 0.0
    assert set(table.split_half) == {"x", "y", "x_again"}
    json.dumps(table.to_dict())
    with pytest.raises(ValueError):
        mmd_behavior_table({"x": a[:1], "y": b})


def test_config_json_round_trip(tmp_path):
    cfg = ExperimentConfig(epsilons=[0.0, "bootstrap"], runs=3, behaviors=["cooperative"], seed=9,
                           scenario_overrides={"ego_v0": 12.0})
    path = tmp_path / "exp.json"
    cfg.to_json(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"scenario", "planner", "ambiguity", "campaign"}
    back = ExperimentConfig.load(path)
    assert back == cfg
    assert back.scenario_config().ego_init.v == 12.0


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(runs=0)
    with pytest.raises(ValueError):
        ExperimentConfig(epsilons=[-0.1])
    with pytest.raises(ValueError):
        ExperimentConfig(modes=["mpc"])
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"campaign": {"run": 3}})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"extras": {}})


def test_jobs_expand_epsilon_only_for_robust_mode():
    cfg = ExperimentConfig(runs=2, behaviors=["neutral"])
    jobs = campaign_jobs(cfg, [0.1, 0.5])
    assert len(jobs) == 2 + 2 + 2 * 2
    assert {j.epsilon for j in jobs if j.mode != "drcmpc"} == {0.0}


def test_single_run_campaign_has_one_record():
    cfg = ExperimentConfig(runs=1, modes=["nmpc"], behaviors=["neutral"],
                           scenario_overrides={"run_length": 5})
    result = run_campaign(cfg)
    assert len(result.records) == 1
    rec = result.records[0]
    assert (rec.mode, rec.behavior, rec.run) == ("nmpc", "neutral", 0)
    assert rec.n_steps == 5


def test_campaign_result_outputs():
    recs = [RunRecord("nmpc", "neutral", 0.0, r, 0.4 + 0.1 * r, 0.4 + 0.1 * r < 0.5, 0.0, 10, [1.0, 2.0])
            for r in range(4)]
    res = CampaignResult(recs, d_safe=0.5)
    assert res.collision_rate("nmpc", "neutral") == 0.25
    text = res.to_csv()
    assert text.splitlines()[0] == "mode,behavior,epsilon,run,min_distance,collided,max_slack,n_steps"
    assert "solve" not in text
    cell = res.summary()["cells"][0]
    assert cell["runs"] == 4 and cell["median"] == pytest.approx(0.55)
    assert cell["solve_ms_mean"] == pytest.approx(1.5)


def test_training_pipeline_on_scenario_one():
    sc = scenario_one(run_length=15)
    logs = generate_training_runs(sc, 2, seed=4)
    datasets = extract_datasets(logs, sc.N)
    assert len(datasets) == sc.N
    models = fit_lookahead_models(datasets, n_samples=8)
    assert all(m.n_samples == 8 and m.context_dim == 2 * (m.lookahead + 1) for m in models)
