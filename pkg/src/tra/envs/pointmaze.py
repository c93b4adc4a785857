"""Line maze of unit rooms with offset doorways.

Rooms 0..R-1 occupy [i, i+1] x [0, 1]. Interior walls sit at integer x with
a door gap whose center alternates between y = 0.75 (odd walls) and y = 0.25
(even walls), so crossing two rooms is never a straight line: naive
goal-direction extrapolation slides into a corner instead of the far door.

State is the agent position (x, y); actions remap the open unit square to a
velocity with the cube center as the zero command. Wall contact removes the
motion component into the wall and preserves the tangential one.

Each demonstration traverses exactly one edge of the room graph and settles
at a random point of the target room, so hindsight goals densely cover every
room and the goal clouds of consecutive edges meet at the doorways.
Evaluation tasks condition on room centers and count success as settling
within 0.1 of the center.
"""

from __future__ import annotations

import numpy as np

from .core import Env, EnvSpec, TaskSpec, tok, p_control_action

V_MAX = 0.1
DOOR_HALF = 0.13       # door gap half-width
DOOR_CLEAR = 0.08      # expert aims this far beyond the door plane
GOAL_RADIUS = 0.1      # success radius (room size 1)
SETTLE_WINDOW = 3      # states that must sit inside the radius
START_MARGIN = 0.06
GOAL_MARGIN = 0.12
_EPS = 1e-9

DEFAULT_HORIZON = 40


class PointMaze(Env):
    kind = "pointmaze-stitch"

    def __init__(self, spec: EnvSpec, seed: int = 0):
        super().__init__(spec, seed)
        self.rooms = spec.rooms
        self.d_s = 2
        self.d_a = 2
        self.horizon = spec.horizon or DEFAULT_HORIZON

    # layout ---------------------------------------------------------------

    def door_y(self, wall: int) -> float:
        return 0.75 if wall % 2 == 1 else 0.25

    def center(self, room: int) -> np.ndarray:
        return np.array([room + 0.5, 0.5])

    def room_of(self, x: float) -> int:
        return int(np.clip(np.floor(x), 0, self.rooms - 1))

    # dynamics ---------------------------------------------------------------

    def step(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        a = self._check_action(a)
        v = (a - 0.5) * (2.0 * V_MAX)
        x0, y0 = float(s[0]), float(s[1])
        x1, y1 = x0 + v[0], y0 + v[1]
        for wall in range(1, self.rooms):
            right = x0 < wall <= x1
            left = x0 > wall >= x1
            if not (right or left):
                continue
            t = (wall - x0) / (x1 - x0)
            y_cross = y0 + t * (y1 - y0)
            if abs(y_cross - self.door_y(wall)) > DOOR_HALF:
                x1 = wall - _EPS if right else wall + _EPS
            break  # |v| < room size: at most one wall per step
        x1 = float(np.clip(x1, _EPS, self.rooms - _EPS))
        y1 = float(np.clip(y1, _EPS, 1.0 - _EPS))
        return np.array([x1, y1])

    def expert_action(self, s: np.ndarray, task: TaskSpec) -> np.ndarray:
        op, gx, gy = task.params
        assert op == "goto"
        goal_room = self.room_of(gx)
        room = self.room_of(s[0])
        if room == goal_room:
            target = np.array([gx, gy])
        else:
            direction = 1 if goal_room > room else -1
            wall = room + 1 if direction > 0 else room
            # aim past the door plane; the wall enforces y alignment first
            target = np.array([wall + direction * DOOR_CLEAR,
                               self.door_y(wall)])
        return p_control_action(s, target, V_MAX)

    # resets -----------------------------------------------------------------

    def _sample_in_room(self, room: int, rng: np.random.Generator,
                        margin: float = START_MARGIN) -> np.ndarray:
        x = rng.uniform(room + margin, room + 1 - margin)
        y = rng.uniform(margin, 1 - margin)
        return np.array([x, y])

    def reset_demo(self, task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
        return self._sample_in_room(task.start_spec["room"], rng)

    reset_eval = reset_demo

    # tasks ------------------------------------------------------------------

    def demo_units(self) -> list[str]:
        return [f"edge:{i}:{i + 1}" for i in range(self.rooms - 1)]

    def sample_demo_task(self, unit: str, rng: np.random.Generator) -> TaskSpec:
        _, a, b = unit.split(":")
        a, b = int(a), int(b)
        if rng.integers(0, 2) == 1:
            a, b = b, a  # traversal direction randomized per episode
        goal = self._sample_in_room(b, rng, margin=GOAL_MARGIN)
        gx, gy = float(goal[0]), float(goal[1])
        return TaskSpec(
            task_id=f"pm:demo:{a}->{b}",
            depth=1,
            modality="goal",
            predicate_id=f"reach:{gx!r}:{gy!r}",
            params=("goto", gx, gy),
            start_spec={"room": a},
        )

    def _center_task(self, start: int, goal: int, modality: str,
                     label: str) -> TaskSpec:
        depth = abs(goal - start)
        tokens = None
        if modality == "lang":
            step_dir = 1 if goal > start else -1
            path = list(range(start + step_dir, goal + step_dir, step_dir))
            parts = tok("GO", f"ROOM{path[0]}")
            for r in path[1:]:
                parts += tok("THEN", f"ROOM{r}")
            tokens = parts
        cx, cy = self.center(goal)
        return TaskSpec(
            task_id=f"pm:{label}:{start}->{goal}:{modality}",
            depth=max(depth, 1),
            modality=modality,
            predicate_id=f"at:{goal}",
            params=("goto", float(cx), float(cy)),
            tokens=tokens,
            start_spec={"room": start},
        )

    def depth1_tasks(self) -> list[TaskSpec]:
        tasks = []
        for i in range(self.rooms - 1):
            for start, goal in ((i, i + 1), (i + 1, i)):
                tasks.append(self._center_task(start, goal, "goal", "d1"))
                tasks.append(self._center_task(start, goal, "lang", "d1"))
        return tasks

    def compositional_tasks(self, depth: int) -> list[TaskSpec]:
        if depth < 2:
            raise ValueError("compositional tasks start at depth 2")
        if depth > self.max_depth():
            raise ValueError(f"depth {depth} exceeds env capacity "
                             f"({self.max_depth()})")
        tasks = []
        for start in range(self.rooms):
            for goal in (start - depth, start + depth):
                if 0 <= goal < self.rooms:
                    tasks.append(self._center_task(start, goal, "goal",
                                                   f"d{depth}"))
                    tasks.append(self._center_task(start, goal, "lang",
                                                   f"d{depth}"))
        return tasks

    def max_depth(self) -> int:
        return self.rooms - 1

    def decompose(self, task: TaskSpec) -> list[TaskSpec]:
        """Room-by-room chain of depth-1 hops realizing a distant goal."""
        start = task.start_spec["room"]
        _, gx, gy = task.params
        goal_room = self.room_of(gx)
        step_dir = 1 if goal_room > start else -1
        subs = []
        for r in range(start + step_dir, goal_room, step_dir):
            cx, cy = self.center(r)
            subs.append(TaskSpec(f"{task.task_id}#{r}", 1, task.modality,
                                 f"room:{r}", params=("goto", cx, cy),
                                 start_spec={"room": r - step_dir}))
        subs.append(TaskSpec(f"{task.task_id}#goal", 1, task.modality,
                             task.predicate_id, params=task.params,
                             start_spec={"room": goal_room - step_dir}))
        return subs

    # predicates / language ----------------------------------------------------

    def outcome_predicates(self) -> list[str]:
        # settled room occupancy: the depth-1 universe for stitch replay
        return [f"room:{j}" for j in range(self.rooms)]

    def composite_predicates(self) -> list[str]:
        return []  # room predicates are mutually exclusive; no conjunctions

    def _settled_near(self, window: np.ndarray, point: np.ndarray) -> bool:
        tail = window[-SETTLE_WINDOW:]
        return bool(np.all(np.linalg.norm(tail - point, axis=1) <= GOAL_RADIUS))

    def predicate_true(self, predicate_id: str, window: np.ndarray) -> bool:
        parts = predicate_id.split(":")
        if parts[0] == "at":
            return self._settled_near(window, self.center(int(parts[1])))
        if parts[0] == "reach":
            point = np.array([float(parts[1]), float(parts[2])])
            return self._settled_near(window, point)
        if parts[0] == "room":
            room = int(parts[1])
            tail = window[-SETTLE_WINDOW:]
            return all(self.room_of(x) == room for x in tail[:, 0])
        raise ValueError(f"unknown predicate {predicate_id!r}")

    def instruction_pools(self) -> dict[str, list[list[int]]]:
        return {f"goto:{j}": [tok("GO", f"ROOM{j}"), tok("HEAD", f"ROOM{j}")]
                for j in range(self.rooms)}

    def outcome_id(self, predicate_id: str) -> str:
        return "goto:" + predicate_id.split(":")[1]

    def goal_for(self, task: TaskSpec, s0: np.ndarray) -> np.ndarray:
        return np.array([task.params[1], task.params[2]])
