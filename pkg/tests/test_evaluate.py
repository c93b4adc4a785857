import numpy as np
import pytest

from tra import envs, evaluate, nn, train
from tra.data import Dataset, Trajectory
from tra.evaluate import EvalReport, TaskResult


@pytest.fixture(scope="module")
def maze():
    return envs.make_env("pointmaze3", 0)


@pytest.fixture(scope="module")
def maze_theta(maze):
    ds = envs.generate_demos(maze, 5, seed=0)
    cfg = train.TrainConfig(method="gcbc", total_steps=10, batch_size=8,
                            warmup_steps=2, emb=4, hidden=(8,), latent=6,
                            policy_hidden=(8,), checkpoint_every=0)
    theta, _ = train.train(cfg, ds)
    return theta


def test_binomial_stderr():
    r = TaskResult("t", 1, "goal", "p", successes=7, trials=10)
    assert r.rate == pytest.approx(0.70)
    assert r.stderr == pytest.approx(np.sqrt(0.7 * 0.3 / 10), abs=1e-12)


def test_aggregation_is_trial_weighted():
    rs = [TaskResult("a", 1, "goal", "p", 10, 10),
          TaskResult("b", 1, "goal", "q", 0, 30)]
    rep = EvalReport(rs, env_spec={})
    agg = rep.aggregates()[0]
    assert agg["rate"] == pytest.approx(0.25)  # 10/40, not mean of rates
    assert agg["trials"] == 40


def test_expert_oracle_depth1_and_depth2(maze):
    d1 = [t for t in maze.depth1_tasks() if t.modality == "goal"]
    rep = evaluate.success_table(maze, None, d1, trials_per_task=5,
                                 seed=0, oracle=True)
    assert rep.rate_for(1, "goal") == 1.0
    assert all(r.stderr == 0.0 for r in rep.results)
    comp = [t for t in maze.compositional_tasks(2) if t.modality == "goal"]
    rep2 = evaluate.success_table(maze, None, comp, trials_per_task=5,
                                  seed=0, oracle=True)
    assert rep2.rate_for(2, "goal") == 1.0


def test_rollout_max_steps_zero(maze, maze_theta):
    # predicate already true at reset: settled-room occupancy of start room
    t_true = envs.TaskSpec("x", 1, "goal", "room:1",
                           params=("goto", 1.5, 0.5), start_spec={"room": 1})
    ok, trace = evaluate.rollout(maze, maze_theta, t_true, max_steps=0, seed=0)
    assert ok and trace.shape[0] == 1
    t_false = envs.TaskSpec("y", 1, "goal", "room:2",
                            params=("goto", 2.5, 0.5), start_spec={"room": 1})
    ok, trace = evaluate.rollout(maze, maze_theta, t_false, max_steps=0, seed=0)
    assert not ok and trace.shape[0] == 1


def test_rollout_deterministic(maze, maze_theta):
    task = [t for t in maze.depth1_tasks() if t.modality == "goal"][0]
    ok1, tr1 = evaluate.rollout(maze, maze_theta, task, 50, seed=3)
    ok2, tr2 = evaluate.rollout(maze, maze_theta, task, 50, seed=3)
    assert ok1 == ok2
    np.testing.assert_array_equal(tr1, tr2)


def test_rollout_lang_modality(maze, maze_theta):
    task = [t for t in maze.depth1_tasks() if t.modality == "lang"][0]
    ok, trace = evaluate.rollout(maze, maze_theta, task, 20, seed=0)
    assert trace.shape[0] >= 1  # runs; language conditioning path works


def test_rollout_dim_mismatch(maze_theta):
    table = envs.make_env("rearrange", 0)
    task = table.depth1_tasks()[0]
    with pytest.raises(ValueError, match="d_s"):
        evaluate.rollout(table, maze_theta, task, 10, seed=0)


def test_success_table_reproducible(maze, maze_theta):
    tasks = [t for t in maze.depth1_tasks() if t.modality == "goal"][:2]
    r1 = evaluate.success_table(maze, maze_theta, tasks, 5, seed=9)
    r2 = evaluate.success_table(maze, maze_theta, tasks, 5, seed=9)
    assert [t.successes for t in r1.results] == \
        [t.successes for t in r2.results]


def _self_consistent_dataset(maze, theta, n=4):
    """Trajectories whose actions are the policy's own outputs."""
    trs = []
    task = [t for t in maze.depth1_tasks() if t.modality == "goal"][0]
    for i in range(n):
        rng = np.random.default_rng(i)
        s = maze.reset_eval(task, rng)
        cond, _ = nn.mlp_forward(theta.psi,
                                 maze.goal_for(task, s)[None, :])
        states, actions = [s], []
        for _ in range(10):
            a = evaluate.policy_action(theta, s, cond)
            s = maze.step(s, a)
            states.append(s)
            actions.append(a)
        trs.append(Trajectory(np.asarray(states), np.asarray(actions),
                              np.array([1], dtype=np.uint16), None))
    return Dataset(trs, env_spec=maze.spec.to_dict())


def test_action_mse_zero_for_replay_exact_policy(maze, maze_theta):
    ds = _self_consistent_dataset(maze, maze_theta)
    # conditioning differs from generation (psi of final state), so recompute
    # with the same conditioning to check the zero case exactly:
    # here generation used psi(goal_for(task)) = psi of a fixed point; use
    # goal modality against a dataset built with that same goal state.
    task = [t for t in maze.depth1_tasks() if t.modality == "goal"][0]
    goal = maze.goal_for(task, None)
    for tr in ds.trajectories:
        tr.states[-1] = goal  # make s_H the conditioning goal used above
    mean, stderr = evaluate.action_mse(maze_theta, ds, "goal")
    assert mean < 1e-12


def test_action_mse_matches_brute_force(maze, maze_theta):
    ds = envs.generate_demos(maze, 3, seed=1)
    mean, _ = evaluate.action_mse(maze_theta, ds, "goal")
    total, count = 0.0, 0
    for tr in ds.trajectories:
        goal = tr.states[-1].astype(np.float64)
        cond, _ = nn.mlp_forward(maze_theta.psi, goal[None, :])
        for t in range(tr.horizon):
            mu = evaluate.policy_action(maze_theta,
                                        tr.states[t].astype(np.float64), cond)
            # policy_action clips into the open cube; replicate raw mean
            s_row = tr.states[t].astype(np.float64)[None, :]
            mu_raw, _ = nn.policy_mean(maze_theta, s_row, cond)
            total += ((tr.actions[t].astype(np.float64) - mu_raw[0]) ** 2
                      ).sum() / tr.actions.shape[1]
            count += 1
    assert mean == pytest.approx(total / count, rel=1e-12)


def test_action_mse_lang_and_errors(maze, maze_theta):
    ds = envs.generate_demos(maze, 3, seed=1)
    mean, stderr = evaluate.action_mse(maze_theta, ds, "lang")
    assert np.isfinite(mean) and np.isfinite(stderr)
    with pytest.raises(ValueError):
        evaluate.action_mse(maze_theta, ds, "image")


def test_report_round_trip(maze, maze_theta):
    tasks = [t for t in maze.depth1_tasks() if t.modality == "goal"][:2]
    rep = evaluate.success_table(maze, maze_theta, tasks, 3, seed=0,
                                 method="gcbc")
    d = rep.to_dict()
    rep2 = EvalReport.from_dict(d)
    assert rep2.to_dict() == d
    assert d["env_hash"] == evaluate.env_spec_hash(maze.spec.to_dict())


def test_evaluation_does_not_mutate_theta(maze, maze_theta):
    before = nn.flatten_theta(maze_theta).copy()
    tasks = [t for t in maze.depth1_tasks() if t.modality == "goal"][:1]
    evaluate.success_table(maze, maze_theta, tasks, 2, seed=0)
    np.testing.assert_array_equal(before, nn.flatten_theta(maze_theta))
