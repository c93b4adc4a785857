import numpy as np
import pytest

from tra import envs
from tra.data import Trajectory
from tra.envs import pointmaze as pm
from tra.envs import rearrange as rr


@pytest.fixture(scope="module")
def maze():
    return envs.make_env("pointmaze3", 0)


@pytest.fixture(scope="module")
def table():
    return envs.make_env("rearrange", 0)


@pytest.fixture(scope="module")
def table_dep():
    return envs.make_env("rearrange-dep", 0)


# ---------------------------------------------------------------------------
# Specs and construction


def test_invalid_specs_rejected():
    with pytest.raises(envs.InvalidSpecError):
        envs.make_env(envs.EnvSpec("pointmaze-stitch", rooms=1), 0)
    with pytest.raises(envs.InvalidSpecError):
        envs.make_env(envs.EnvSpec("nosuch"), 0)
    with pytest.raises(envs.InvalidSpecError):
        envs.make_env("nosuch-preset", 0)
    with pytest.raises(envs.InvalidSpecError):
        envs.make_env(envs.EnvSpec("rearrange", n_objects=0), 0)


def test_maze_structure(maze):
    assert maze.d_a == 2 and maze.d_s == 2
    assert maze.demo_units() == ["edge:0:1", "edge:1:2"]
    assert maze.max_depth() == 2


def test_rearrange_structure(table):
    # 3 objects x 2 containers
    assert len(table.demo_units()) == 6
    assert table.d_a == 3
    # hand + per object (x, y, held, two occupancy flags)
    assert table.d_s == 2 + 3 * 5


def test_spec_round_trip():
    spec = envs.PRESETS["rearrange-dep"]
    assert envs.EnvSpec.from_dict(spec.to_dict()) == spec


def test_reset_determinism(maze, table):
    for env in (maze, table):
        task = env.sample_demo_task(env.demo_units()[0],
                                    np.random.default_rng(3))
        s1 = env.reset_demo(task, np.random.default_rng(5))
        s2 = env.reset_demo(task, np.random.default_rng(5))
        np.testing.assert_array_equal(s1, s2)


# ---------------------------------------------------------------------------
# Dynamics


def test_center_action_is_noop(maze):
    s = np.array([0.4, 0.6])
    s2 = maze.step(s, np.array([0.5, 0.5]))
    np.testing.assert_allclose(s2, s)


def test_action_cube_validation(maze):
    s = np.array([0.5, 0.5])
    with pytest.raises(ValueError):
        maze.step(s, np.array([0.0, 0.5]))
    with pytest.raises(ValueError):
        maze.step(s, np.array([0.5, 1.0]))


def test_wall_blocks_and_preserves_tangential(maze):
    # moving right + down into wall x=1 away from the door (door at y=0.75)
    s = np.array([0.95, 0.4])
    s2 = maze.step(s, np.array([0.999, 0.2]))  # vx = +0.0998, vy = -0.06
    assert s2[0] < 1.0  # blocked at the wall
    assert s2[1] == pytest.approx(0.34, abs=1e-9)  # full tangential motion


def test_door_pass(maze):
    s = np.array([0.95, 0.75])  # aligned with door 1
    s2 = maze.step(s, np.array([0.999, 0.5]))
    assert s2[0] > 1.0


def test_outer_walls_clip(maze):
    s = np.array([0.03, 0.03])
    s2 = maze.step(s, np.array([0.001, 0.001]))
    assert s2[0] > 0 and s2[1] > 0


def test_maze_step_deterministic(maze, rng):
    s = np.array([1.3, 0.7])
    a = np.array([0.7, 0.3])
    np.testing.assert_array_equal(maze.step(s, a), maze.step(s, a))


def test_grasp_replay_against_straight_line_trace(table):
    """Drive the hand straight at an object with the gripper closing inside
    the grasp radius; the object must attach exactly when both hold."""
    rng = np.random.default_rng(0)
    task = table.sample_demo_task("insert:1:0", rng)
    s = table.reset_eval(task, rng)
    obj = table.obj_pos(s, 1).copy()
    attached_at = None
    for step in range(100):
        hand = table.hand(s)
        d = np.linalg.norm(hand - obj)
        grip = 0.9 if d <= rr.R_GRASP * 0.9 else 0.1
        v = np.clip(obj - hand, -rr.V_MAX, rr.V_MAX)
        a = np.clip(0.5 + 0.5 * v / rr.V_MAX, 1e-3, 1 - 1e-3)
        s_next = table.step(s, np.array([a[0], a[1], grip]))
        if table.held(s_next, 1) and attached_at is None:
            # attach must happen while the commanded grip was closed and the
            # hand ended within the grasp radius
            assert grip >= rr.GRIP_CLOSE
            assert np.linalg.norm(table.hand(s_next) - obj) <= rr.R_GRASP
            attached_at = step
        s = s_next
    assert attached_at is not None


def test_placed_objects_cannot_be_regrasped(table):
    rng = np.random.default_rng(1)
    task = table.sample_demo_task("insert:0:0", rng)
    s = table.reset_eval(task, rng)
    states, _ = envs.rollout_expert(table, task, s, table.horizon)
    final = states[-1]
    assert table.predicate_true("placed:0:0", states[-3:])
    # hand is at the container; try to grasp
    s2 = table.step(final, np.array([0.5, 0.5, 0.9]))
    assert not table.held(s2, 0)


def test_openable_latch_gates_placement(table_dep):
    rng = np.random.default_rng(2)
    c_open = table_dep.n_normal  # the openable container id
    task = envs.TaskSpec("t", 1, "goal", f"placed:0:{c_open}",
                         params=("insert", 0, c_open))
    s0 = table_dep.reset_eval(task, rng)
    assert not table_dep.is_open(s0, c_open)
    # expert tries to insert into the closed container: the drop must not latch
    states, _ = envs.rollout_expert(table_dep, task, s0, table_dep.horizon)
    assert not table_dep.predicate_true(f"placed:0:{c_open}", states[-3:])
    # open it first, then insert succeeds
    open_task = envs.TaskSpec("o", 1, "goal", f"open:{c_open}",
                              params=("open", c_open))
    states, _ = envs.rollout_expert(table_dep, open_task, s0,
                                    table_dep.horizon)
    assert table_dep.predicate_true(f"open:{c_open}", states[-3:])
    states2, _ = envs.rollout_expert(table_dep, task, states[-1],
                                     table_dep.horizon)
    assert table_dep.predicate_true(f"placed:0:{c_open}", states2[-3:])


# ---------------------------------------------------------------------------
# Scripted expert


def test_expert_noop_at_goal(maze, table):
    task = maze._center_task(0, 1, "goal", "t")
    a = maze.expert_action(maze.center(1), task)
    np.testing.assert_allclose(a, 0.5, atol=1e-9)

    rng = np.random.default_rng(0)
    t2 = table.sample_demo_task("insert:0:0", rng)
    s = table.reset_eval(t2, rng)
    s[2:4] = rr.SENTINEL
    s[2 + 3] = 1.0  # already placed in ctr 0
    s[0:2] = rr.PARK  # retreat finished: parked hand holds still
    a = table.expert_action(s, t2)
    np.testing.assert_allclose(a[:2], 0.5, atol=1e-9)


def test_expert_deterministic(maze):
    task = maze._center_task(0, 1, "goal", "t")
    s = np.array([0.3, 0.2])
    np.testing.assert_array_equal(maze.expert_action(s, task),
                                  maze.expert_action(s, task))


@pytest.mark.parametrize("env_name", ["pointmaze3", "rearrange",
                                      "rearrange-dep"])
def test_expert_completeness_100_starts(env_name):
    """Every depth-1 subtask succeeds from 100 seeded random starts within
    the episode cap."""
    env = envs.make_env(env_name, 0)
    for unit in env.demo_units():
        for trial in range(100):
            rng = np.random.default_rng([hash(unit) % 2**32, trial])
            task = env.sample_demo_task(unit, rng)
            s = env.reset_demo(task, rng)
            states, _ = envs.rollout_expert(env, task, s, env.horizon)
            assert env.predicate_true(task.predicate_id, states[-3:]), \
                f"{env_name}:{unit} failed on trial {trial}"


# ---------------------------------------------------------------------------
# Demo generation


def test_demo_counts_pointmaze3():
    env = envs.make_env("pointmaze3", 0)
    ds = envs.generate_demos(env, 50, seed=0)
    assert len(ds.trajectories) == 100  # 2 edges x 50


def test_demo_generation_deterministic_without_noise():
    env = envs.make_env("pointmaze3", 0)
    d1 = envs.generate_demos(env, 3, seed=4, sigma_expert=0.0)
    d2 = envs.generate_demos(env, 3, seed=4, sigma_expert=0.0)
    from tra.data import dataset_equal
    assert dataset_equal(d1, d2)


def test_demos_cover_both_directions():
    env = envs.make_env("pointmaze3", 0)
    ds = envs.generate_demos(env, 30, seed=0)
    outcomes = {tr.subtask_id for tr in ds.trajectories}
    assert outcomes == {"goto:0", "goto:1", "goto:2"}


@pytest.mark.parametrize("env_name", ["pointmaze3", "rearrange",
                                      "rearrange-dep"])
def test_stitch_property_and_coverage_gap(env_name):
    env = envs.make_env(env_name, 0)
    ds = envs.generate_demos(env, 5, seed=2)
    for tr in ds.trajectories:
        states = tr.states.astype(np.float64)
        flips = envs.predicate_flips(env, states)
        assert len(flips) == 1, f"{tr.subtask_id}: flips {flips}"
        # trajectory's own predicate holds at the end
        assert env.predicate_true(flips[0], states[-3:])
        assert envs.coverage_gap_violations(env, states) == []


def test_rearrange_preplacement_present():
    env = envs.make_env("rearrange", 0)
    ds = envs.generate_demos(env, 40, seed=3)
    flagged = 0
    for tr in ds.trajectories:
        s0 = tr.states[0].astype(np.float64)
        flagged += sum(env.placed(s0, i) for i in range(3))
    assert flagged > 0  # training covers already-set occupancy flags


def test_annotate_language_matches_pool(maze):
    ds = envs.generate_demos(maze, 4, seed=1)
    pools = maze.instruction_pools()
    for tr in ds.trajectories:
        assert tr.tokens.tolist() in pools[tr.subtask_id]
        assert 1 <= len(tr.tokens) <= 8
        assert np.all(tr.tokens < envs.VOCAB_SIZE)


def test_annotate_language_rejects_non_demo(maze):
    # a stationary trajectory completes no subtask
    states = np.tile(np.array([0.2, 0.2]), (11, 1))
    actions = np.full((10, 2), 0.5)
    with pytest.raises(envs.ExpertFailure):
        envs.annotate_language(maze, Trajectory(states, actions))


def test_category_paraphrase_opt_in(table):
    # ambiguous category templates stay out of the default training pools
    assert envs.tok("PUT", "FOOD", "IN", "CTR0") \
        not in table.instruction_pools()["insert:0:0"]
    spec = envs.EnvSpec("rearrange", category_labels=True)
    labeled = envs.make_env(spec, 0)
    assert envs.tok("PUT", "FOOD", "IN", "CTR0") \
        in labeled.instruction_pools()["insert:0:0"]


# ---------------------------------------------------------------------------
# Evaluation tasks


def test_compositional_tasks_pointmaze(maze):
    tasks = envs.compositional_eval_tasks(maze, 2)
    ids = {(t.start_spec["room"], maze.room_of(t.params[1]), t.modality)
           for t in tasks}
    assert ids == {(0, 2, "goal"), (0, 2, "lang"),
                   (2, 0, "goal"), (2, 0, "lang")}
    chain = [t for t in tasks
             if t.modality == "lang" and maze.room_of(t.params[1]) == 2][0]
    assert chain.tokens.tolist() == envs.tok("GO", "ROOM1", "THEN", "ROOM2")


def test_depth_capacity_errors(maze, table):
    with pytest.raises(ValueError):
        envs.compositional_eval_tasks(maze, 3)
    with pytest.raises(ValueError):
        envs.compositional_eval_tasks(maze, 1)
    with pytest.raises(ValueError):
        envs.compositional_eval_tasks(table, 5)


def test_compositional_tasks_rearrange(table, table_dep):
    d2 = envs.compositional_eval_tasks(table, 2)
    preds = {t.predicate_id for t in d2}
    assert "pair:0:1:0" in preds and "cat:FOOD:1" in preds
    assert all(t.depth == 2 for t in d2)
    d2dep = envs.compositional_eval_tasks(table_dep, 2)
    assert any(t.predicate_id.startswith("dep:") for t in d2dep)
    d3 = envs.compositional_eval_tasks(table, 3)
    assert {t.predicate_id for t in d3} == {"all:0", "all:1"}
    for t in d2 + d3:
        if t.tokens is not None:
            assert len(t.tokens) <= 8


def test_eval_tasks_unseen_in_training(table):
    """No training trajectory's final state satisfies a compositional
    predicate."""
    ds = envs.generate_demos(table, 10, seed=5)
    comp = [t.predicate_id for t in envs.compositional_eval_tasks(table, 2)]
    comp += [t.predicate_id for t in envs.compositional_eval_tasks(table, 3)]
    for tr in ds.trajectories:
        states = tr.states.astype(np.float64)
        for pred in set(comp):
            assert not table.predicate_true(pred, states[-3:])


def test_goal_for_satisfies_predicate(maze, table, table_dep):
    rng = np.random.default_rng(0)
    for env in (maze, table, table_dep):
        tasks = env.depth1_tasks() + env.compositional_tasks(2)
        for task in tasks:
            if task.modality != "goal":
                continue
            s0 = env.reset_eval(task, rng)
            g = env.goal_for(task, s0)
            assert env.predicate_true(task.predicate_id, g[None, :])


def test_decompose_chains(maze, table_dep):
    task = [t for t in maze.compositional_tasks(2)
            if t.start_spec["room"] == 0][0]
    subs = maze.decompose(task)
    assert [maze.room_of(s.params[1]) for s in subs] == [1, 2]
    dep = [t for t in table_dep.compositional_tasks(2)
           if t.predicate_id.startswith("dep:")][0]
    subs = table_dep.decompose(dep)
    assert subs[0].params[0] == "open" and subs[1].params[0] == "insert"
