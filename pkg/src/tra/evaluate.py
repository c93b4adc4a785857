"""Closed-loop evaluation: rollouts, success tables, and action MSE.

Rollouts are deterministic: the policy acts through its mean (no sampling),
conditioned once per episode on psi(goal state) or xi(instruction). Success
means the task predicate holds at some point within the step budget
(flag-based predicates are monotone; the maze predicate requires a short
settle inside the goal radius).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .data import Dataset
from .envs import Env, TaskSpec

_EVAL_STREAM = 0xE7A1


@dataclass
class TaskResult:
    task_id: str
    depth: int
    modality: str
    predicate_id: str
    successes: int
    trials: int

    @property
    def rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    @property
    def stderr(self) -> float:
        if not self.trials:
            return 0.0
        p = self.rate
        return float(np.sqrt(p * (1 - p) / self.trials))


@dataclass
class EvalReport:
    results: list[TaskResult]
    env_spec: dict
    method: str = ""
    seed: int = 0
    trials_per_task: int = 0
    action_mse: dict = field(default_factory=dict)

    def aggregates(self) -> list[dict]:
        """Trial-weighted success rates grouped by (depth, modality)."""
        groups: dict[tuple[int, str], list[TaskResult]] = {}
        for r in self.results:
            groups.setdefault((r.depth, r.modality), []).append(r)
        out = []
        for (depth, modality), rs in sorted(groups.items()):
            successes = sum(r.successes for r in rs)
            trials = sum(r.trials for r in rs)
            p = successes / trials if trials else 0.0
            out.append({
                "depth": depth, "modality": modality,
                "successes": successes, "trials": trials, "rate": p,
                "stderr": float(np.sqrt(p * (1 - p) / trials)) if trials else 0.0,
            })
        return out

    def rate_for(self, depth: int, modality: str) -> float:
        for agg in self.aggregates():
            if agg["depth"] == depth and agg["modality"] == modality:
                return agg["rate"]
        raise KeyError(f"no results for depth={depth} modality={modality}")

    def to_dict(self) -> dict:
        return {
            "env_spec": self.env_spec,
            "env_hash": env_spec_hash(self.env_spec),
            "method": self.method,
            "seed": self.seed,
            "trials_per_task": self.trials_per_task,
            "tasks": [dict(asdict(r), rate=r.rate, stderr=r.stderr)
                      for r in self.results],
            "aggregates": self.aggregates(),
            "action_mse": self.action_mse,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        results = [TaskResult(t["task_id"], t["depth"], t["modality"],
                              t["predicate_id"], t["successes"], t["trials"])
                   for t in d["tasks"]]
        return EvalReport(results, d["env_spec"], d.get("method", ""),
                          d.get("seed", 0), d.get("trials_per_task", 0),
                          d.get("action_mse", {}))


def env_spec_hash(env_spec: dict) -> str:
    blob = json.dumps(env_spec, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Rollouts


def _cond_latent(theta: nn.Theta, env: Env, task: TaskSpec,
                 s0: np.ndarray) -> np.ndarray:
    if task.modality == "goal":
        goal = env.goal_for(task, s0)
        z, _ = nn.mlp_forward(theta.psi, goal[None, :])
    else:
        if task.tokens is None:
            raise ValueError(f"task {task.task_id} has no instruction")
        tokens = np.asarray(task.tokens, dtype=np.int64)[None, :]
        z, _ = nn.token_encode(theta.xi, tokens, np.array([tokens.shape[1]]))
    return z


def policy_action(theta: nn.Theta, s: np.ndarray,
                  cond: np.ndarray) -> np.ndarray:
    """Deterministic eval action: the policy mean, kept inside the open cube."""
    s_row = s[None, :]
    if theta.dims.encode_state:
        s_row, _ = nn.mlp_forward(theta.phi, s_row)
    mu, _ = nn.policy_mean(theta, s_row, cond)
    return np.clip(mu[0], 1e-6, 1.0 - 1e-6)


def _window(states: list[np.ndarray], size: int = 3) -> np.ndarray:
    return np.asarray(states[-size:])


def rollout(env: Env, theta: nn.Theta, task: TaskSpec, max_steps: int = 200,
            seed: int = 0, rng: np.random.Generator | None = None,
            oracle: bool = False):
    """One closed-loop episode; returns (success, trace array).

    With oracle=True the scripted expert replaces the policy, chaining
    through the task's depth-1 decomposition.
    """
    if rng is None:
        rng = np.random.default_rng(
            np.random.SeedSequence([env.seed, _EVAL_STREAM, int(seed)]))
    if theta is not None and theta.dims.d_s != env.d_s:
        raise ValueError(f"theta d_s={theta.dims.d_s} does not match env "
                         f"d_s={env.d_s}")
    s = env.reset_eval(task, rng)
    trace = [s]
    if env.predicate_true(task.predicate_id, _window(trace)):
        return True, np.asarray(trace)
    if oracle:
        subtasks = env.decompose(task)
        sub_idx = 0
    else:
        cond = _cond_latent(theta, env, task, s)
    for _ in range(max_steps):
        if oracle:
            while sub_idx < len(subtasks) - 1 and env.predicate_true(
                    subtasks[sub_idx].predicate_id, _window(trace)):
                sub_idx += 1
            a = env.expert_action(s, subtasks[sub_idx])
        else:
            a = policy_action(theta, s, cond)
        s = env.step(s, a)
        trace.append(s)
        if env.predicate_true(task.predicate_id, _window(trace)):
            return True, np.asarray(trace)
    return False, np.asarray(trace)


def success_table(env: Env, theta: nn.Theta, tasks: list[TaskSpec],
                  trials_per_task: int = 10, seed: int = 0,
                  max_steps: int | None = None, oracle: bool = False,
                  method: str = "") -> EvalReport:
    """Randomized resets per trial; per-task rates with binomial stderr."""
    if trials_per_task < 1:
        raise ValueError("trials_per_task must be >= 1")
    max_steps = max_steps or env.spec.max_episode_steps
    results = []
    for t_idx, task in enumerate(tasks):
        successes = 0
        for trial in range(trials_per_task):
            rng = np.random.default_rng(np.random.SeedSequence(
                [env.seed, _EVAL_STREAM, int(seed), t_idx, trial]))
            ok, _ = rollout(env, theta, task, max_steps, rng=rng,
                            oracle=oracle)
            successes += bool(ok)
        results.append(TaskResult(task.task_id, task.depth, task.modality,
                                  task.predicate_id, successes,
                                  trials_per_task))
    return EvalReport(results, env.spec.to_dict(), method=method, seed=seed,
                      trials_per_task=trials_per_task)


# ---------------------------------------------------------------------------
# Action MSE


def action_mse(theta: nn.Theta, ds: Dataset, modality: str = "goal"):
    """Mean over all (t, i) of ||a - mu(s, cond)||^2 / d_a with cond fixed to
    psi(s_H) or xi(instruction); stderr is over per-trajectory means."""
    if modality not in ("goal", "lang"):
        raise ValueError(f"unknown modality {modality!r}")
    per_traj = []
    total, count = 0.0, 0
    for tr in ds.trajectories:
        states = tr.states.astype(np.float64)
        if modality == "goal":
            cond, _ = nn.mlp_forward(theta.psi, states[-1][None, :])
        else:
            if tr.tokens is None or len(tr.tokens) == 0:
                raise ValueError("trajectory has no instruction for "
                                 "language-conditioned MSE")
            tokens = tr.tokens.astype(np.int64)[None, :]
            cond, _ = nn.token_encode(theta.xi, tokens,
                                      np.array([tokens.shape[1]]))
        s_in = states[:-1]
        if theta.dims.encode_state:
            s_in, _ = nn.mlp_forward(theta.phi, s_in)
        mu, _ = nn.policy_mean(theta, s_in,
                               np.repeat(cond, s_in.shape[0], axis=0))
        se = ((tr.actions.astype(np.float64) - mu) ** 2).sum(axis=1) \
            / tr.actions.shape[1]
        per_traj.append(float(se.mean()))
        total += float(se.sum())
        count += se.size
    mean = total / count
    per_traj = np.asarray(per_traj)
    stderr = float(per_traj.std(ddof=1) / np.sqrt(per_traj.size)) \
        if per_traj.size > 1 else 0.0
    return mean, stderr
