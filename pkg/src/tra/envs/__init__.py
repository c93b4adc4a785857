"""Deterministic stitching environments with scripted experts.

Training data contains single-subtask demonstrations only; evaluation
composes them. `generate_demos` emits fixed-horizon expert episodes,
annotates each with a template instruction (paraphrase pools with >= 2
synonyms per subtask), and verifies the stitch structure by predicate
replay.
"""

from __future__ import annotations

import numpy as np

from ..data import Dataset, Trajectory
from .core import (ACTION_EPS, VOCAB, VOCAB_SIZE, Env, EnvSpec, ExpertFailure,
                   InvalidSpecError, TaskSpec, detok, tok)
from .pointmaze import PointMaze
from .rearrange import Rearrange

__all__ = [
    "ACTION_EPS", "VOCAB", "VOCAB_SIZE", "Env", "EnvSpec", "ExpertFailure",
    "InvalidSpecError", "TaskSpec", "detok", "tok", "PointMaze", "Rearrange",
    "PRESETS", "make_env", "resolve_spec", "generate_demos",
    "annotate_language", "compositional_eval_tasks", "predicate_flips",
    "coverage_gap_violations",
]

PRESETS: dict[str, EnvSpec] = {
    "pointmaze3": EnvSpec("pointmaze-stitch", rooms=3),
    "pointmaze4": EnvSpec("pointmaze-stitch", rooms=4),
    "rearrange": EnvSpec("rearrange", n_objects=3, n_containers=2),
    "rearrange2x1": EnvSpec("rearrange", n_objects=2, n_containers=1),
    "rearrange-dep": EnvSpec("rearrange", n_objects=3, n_containers=2,
                             n_openable=1),
}


def resolve_spec(spec) -> EnvSpec:
    """Accept an EnvSpec, a preset name, or a spec dict."""
    if isinstance(spec, EnvSpec):
        return spec
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise InvalidSpecError(f"unknown env preset {spec!r}; "
                                   f"have {sorted(PRESETS)}")
        return PRESETS[spec]
    if isinstance(spec, dict):
        return EnvSpec.from_dict(spec)
    raise InvalidSpecError(f"cannot interpret env spec {spec!r}")


def make_env(spec, seed: int = 0) -> Env:
    spec = resolve_spec(spec)
    spec.validate()
    if spec.kind == "pointmaze-stitch":
        return PointMaze(spec, seed)
    return Rearrange(spec, seed)


# ---------------------------------------------------------------------------
# Predicate replay helpers


def _window(states: np.ndarray, t: int, size: int = 3) -> np.ndarray:
    return states[max(0, t - size + 1): t + 1]


def predicate_flips(env: Env, states: np.ndarray,
                    predicates: list[str] | None = None) -> list[str]:
    """Predicates that transition false -> true anywhere along a trajectory."""
    if predicates is None:
        predicates = env.outcome_predicates()
    flipped = []
    for pred in predicates:
        prev = env.predicate_true(pred, _window(states, 0))
        for t in range(1, states.shape[0]):
            cur = env.predicate_true(pred, _window(states, t))
            if cur and not prev:
                flipped.append(pred)
                break
            prev = cur
    return flipped


def coverage_gap_violations(env: Env, states: np.ndarray) -> list[str]:
    """Depth>=2 predicates satisfied at the trajectory's final window."""
    return [pred for pred in env.composite_predicates()
            if env.predicate_true(pred, _window(states, states.shape[0] - 1))]


def annotate_language(env: Env, traj: Trajectory,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Instruction for the depth-1 subtask a trajectory completes.

    The subtask is recovered by predicate replay (false -> true transition),
    then a template is drawn from its paraphrase pool.
    """
    states = np.asarray(traj.states, dtype=np.float64)
    flips = predicate_flips(env, states)
    if len(flips) != 1:
        raise ExpertFailure(f"trajectory matches no unique depth-1 subtask "
                            f"(flips: {flips})")
    pool = env.instruction_pools()[env.outcome_id(flips[0])]
    if rng is None:
        choice = pool[0]
    else:
        choice = pool[int(rng.integers(0, len(pool)))]
    return np.asarray(choice, dtype=np.uint16)


# ---------------------------------------------------------------------------
# Demonstration generation


def rollout_expert(env: Env, task: TaskSpec, s0: np.ndarray, steps: int,
                   rng: np.random.Generator | None = None,
                   sigma: float = 0.0):
    """Run the scripted expert for a fixed number of steps.

    Optional isotropic Gaussian action noise of scale sigma is added and
    clipped back into the open cube.
    """
    states = np.empty((steps + 1, env.d_s))
    actions = np.empty((steps, env.d_a))
    s = np.asarray(s0, dtype=np.float64)
    states[0] = s
    for t in range(steps):
        a = env.expert_action(s, task)
        if sigma > 0.0:
            a = np.clip(a + rng.normal(0.0, sigma, size=env.d_a),
                        ACTION_EPS, 1.0 - ACTION_EPS)
        s = env.step(s, a)
        states[t + 1] = s
        actions[t] = a
    return states, actions


def generate_demos(env: Env, n_per_subtask: int, seed: int,
                   sigma_expert: float = 0.01) -> Dataset:
    """Depth-1 expert demonstrations, n episodes per demo unit.

    Every episode is verified: its own predicate must hold at the end, the
    replayed trajectory must flip exactly that one depth-1 predicate, and no
    multi-step predicate may hold at the final state. Any violation aborts
    with diagnostics (deterministic given seeds, so reproducible).
    """
    if n_per_subtask < 1:
        raise ValueError("n_per_subtask must be >= 1")
    trajectories = []
    for u_idx, unit in enumerate(env.demo_units()):
        for episode in range(n_per_subtask):
            rng = np.random.default_rng(
                np.random.SeedSequence([env.seed, int(seed), u_idx, episode]))
            task = env.sample_demo_task(unit, rng)
            s0 = env.reset_demo(task, rng)
            states, actions = rollout_expert(env, task, s0, env.horizon,
                                             rng, sigma_expert)
            if not env.predicate_true(task.predicate_id, states[-3:]):
                raise ExpertFailure(
                    f"expert failed {task.task_id} (unit {unit}, episode "
                    f"{episode}, seed {seed}): predicate "
                    f"{task.predicate_id} false at horizon {env.horizon}")
            traj = Trajectory(states, actions)
            traj.tokens = annotate_language(env, traj, rng)
            flips = predicate_flips(env, states)
            traj.subtask_id = env.outcome_id(flips[0])
            gaps = coverage_gap_violations(env, states)
            if gaps:
                raise ExpertFailure(
                    f"demo for {unit} ends satisfying multi-step predicates "
                    f"{gaps}; training data must stay depth-1")
            trajectories.append(traj)
    return Dataset(trajectories, env_spec=env.spec.to_dict(), seed=int(seed),
                   sigma_expert=float(sigma_expert),
                   paraphrases=env.instruction_pools())


def compositional_eval_tasks(env: Env, depth: int) -> list[TaskSpec]:
    """Unseen multi-subtask evaluation tasks (goal and instruction variants)."""
    if depth < 2:
        raise ValueError("compositional eval tasks require depth >= 2; use "
                         "depth1_tasks() for the in-distribution control set")
    return env.compositional_tasks(depth)
