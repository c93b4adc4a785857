"""Shared environment machinery: specs, tasks, and the instruction vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

ACTION_EPS = 1e-3  # expert actions are clipped into [eps, 1-eps]


class InvalidSpecError(ValueError):
    """Environment spec violates an invariant (disconnected layout, bad dims)."""


class ExpertFailure(RuntimeError):
    """The scripted expert failed to complete a depth-1 subtask."""


# ---------------------------------------------------------------------------
# Instruction vocabulary (shared across environments, |V| <= 64)

_VOCAB_NAMES = (
    ["GO", "HEAD", "THEN", "MOVE", "PUT", "TO", "IN", "OPEN", "PULL", "ALL"]
    + [f"ROOM{i}" for i in range(8)]
    + [f"OBJ{i}" for i in range(6)]
    + [f"CTR{i}" for i in range(4)]
    + ["FOOD", "TOOL"]
)
VOCAB = {name: i for i, name in enumerate(_VOCAB_NAMES)}
VOCAB_SIZE = len(_VOCAB_NAMES)
assert VOCAB_SIZE <= 64


def tok(*names: str) -> list[int]:
    return [VOCAB[n] for n in names]


def detok(tokens) -> str:
    return " ".join(_VOCAB_NAMES[int(t)] for t in tokens)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvSpec:
    """Static environment description; fully determines layout and dynamics.

    kind "pointmaze-stitch": `rooms` unit rooms in a line, doors offset in
    alternating corners so multi-room paths are not straight lines.
    kind "rearrange": tabletop with `n_objects` movable objects,
    `n_containers` normal containers plus `n_openable` containers that must
    be opened (one-way latch) before anything can be placed inside.
    """

    kind: str
    rooms: int = 3
    n_objects: int = 3
    n_containers: int = 2
    n_openable: int = 0
    horizon: int = 0              # 0 -> kind default (40 maze / 30 rearrange)
    max_episode_steps: int = 200
    # category paraphrases in the training pools are ambiguous whenever a
    # category has several members; off by default (category instructions
    # stay eval-only)
    category_labels: bool = False

    def validate(self) -> None:
        if self.kind not in ("pointmaze-stitch", "rearrange"):
            raise InvalidSpecError(f"unknown env kind {self.kind!r}")
        if self.max_episode_steps < 1:
            raise InvalidSpecError("max_episode_steps must be >= 1")
        if self.kind == "pointmaze-stitch":
            if self.rooms < 2:
                raise InvalidSpecError("pointmaze needs >= 2 rooms (the line "
                                       "graph would be disconnected otherwise)")
            if self.rooms > 8:
                raise InvalidSpecError("pointmaze supports at most 8 rooms")
        else:
            if self.n_objects < 1 or self.n_objects > 6:
                raise InvalidSpecError("rearrange needs 1..6 objects")
            if self.n_containers < 1 or self.n_containers + self.n_openable > 4:
                raise InvalidSpecError("rearrange needs 1..4 containers")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "EnvSpec":
        return EnvSpec(**d)


@dataclass(eq=False)
class TaskSpec:
    """One evaluation (or demonstration) unit.

    The condition is either a goal state or an instruction, selected by
    `modality`. Rearrange goal states depend on the trial's reset, so they
    are built per-rollout via Env.goal_for; `params` carries the payload the
    scripted expert understands.
    """

    task_id: str
    depth: int
    modality: str                        # "goal" | "lang"
    predicate_id: str
    params: tuple = ()
    tokens: np.ndarray | None = None     # instruction condition
    start_spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("task depth must be >= 1")
        if self.modality not in ("goal", "lang"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.tokens is not None:
            self.tokens = np.asarray(self.tokens, dtype=np.uint16)


class Env:
    """Deterministic environment over immutable state vectors.

    Dynamics are pure: step(s, a) -> s'. All randomness (resets, paraphrase
    draws) flows through explicit numpy Generators, so rollouts parallelize
    with independent streams.
    """

    kind = "abstract"

    def __init__(self, spec: EnvSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.seed = int(seed)

    # dimensions
    d_s: int
    d_a: int
    horizon: int

    # dynamics
    def step(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def expert_action(self, s: np.ndarray, task: TaskSpec) -> np.ndarray:
        raise NotImplementedError

    # resets
    def reset_demo(self, task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def reset_eval(self, task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    # task structure
    def demo_units(self) -> list[str]:
        raise NotImplementedError

    def sample_demo_task(self, unit: str, rng: np.random.Generator) -> TaskSpec:
        raise NotImplementedError

    def depth1_tasks(self) -> list[TaskSpec]:
        raise NotImplementedError

    def compositional_tasks(self, depth: int) -> list[TaskSpec]:
        raise NotImplementedError

    def max_depth(self) -> int:
        raise NotImplementedError

    # predicates / language
    def outcome_predicates(self) -> list[str]:
        """The depth-1 predicate universe used for stitch checks."""
        raise NotImplementedError

    def composite_predicates(self) -> list[str]:
        """Every depth >= 2 predicate the eval protocol can ask about."""
        raise NotImplementedError

    def predicate_true(self, predicate_id: str, window: np.ndarray) -> bool:
        """Evaluate a predicate on the trailing window of a rollout."""
        raise NotImplementedError

    def instruction_pools(self) -> dict[str, list[list[int]]]:
        """Paraphrase pool per outcome id (>= 2 templates each)."""
        raise NotImplementedError

    def goal_for(self, task: TaskSpec, s0: np.ndarray) -> np.ndarray:
        """Goal state for a task given the trial's reset state."""
        raise NotImplementedError

    def _check_action(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (self.d_a,):
            raise ValueError(f"action shape {a.shape}, expected ({self.d_a},)")
        if np.any(a <= 0.0) or np.any(a >= 1.0):
            raise ValueError("action outside the open unit cube")
        return a


def p_control_action(pos: np.ndarray, target: np.ndarray, v_max: float,
                     extra: list[float] | None = None) -> np.ndarray:
    """Proportional controller mapped into the open action cube; the cube
    center is the zero command."""
    v_des = np.clip(target - pos, -v_max, v_max)
    a = 0.5 + 0.5 * (v_des / v_max)
    if extra is not None:
        a = np.concatenate([a, np.asarray(extra, dtype=np.float64)])
    return np.clip(a, ACTION_EPS, 1.0 - ACTION_EPS)
