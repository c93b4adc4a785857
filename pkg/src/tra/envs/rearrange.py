"""Tabletop rearrangement: move objects into containers with a point hand.

State: [hand_xy | per object: x, y, held, in_ctr_0..in_ctr_{C-1} | per
openable: open]. Actions are (vx, vy, grip) in the open unit cube; the xy
part remaps to a velocity (cube center = zero command), grip >= 0.6 asks to
close, grip <= 0.4 asks to open, the middle band holds the current grip.

Grasping attaches the nearest free object within the grasp radius;
releasing over a container deposits the object there: its occupancy flag
for that container latches and its position leaves the table (sentinel at
the origin), the way an object dropped into a bin disappears from the
scene. Releasing elsewhere drops the object in place. Openable containers
accept objects only after their handle has been pulled (hand at the handle
with the gripper closed and empty); the open latch is one-way.

Training demonstrations move exactly one object (or open exactly one
container) and then retreat to a neutral park point, so "my task is done"
states show the hand moving away rather than freezing. Resets may
pre-place *other* objects, one per container and never into the demo's
target container: the data covers acting while occupancy flags are set
without any training episode ending in a state that satisfies a multi-step
predicate.
"""

from __future__ import annotations

import numpy as np

from .core import Env, EnvSpec, InvalidSpecError, TaskSpec, tok, p_control_action

V_MAX = 0.15
R_GRASP = 0.15
R_PLACE = 0.10
R_HANDLE = 0.07
GRIP_CLOSE = 0.6
GRIP_OPEN = 0.4
HANDLE_DY = -0.12
PARK = np.array([0.5, 0.3])    # expert retreats here once its subtask is done
SENTINEL = np.array([0.0, 0.0])  # off-table position of deposited objects

DEFAULT_HORIZON = 30

CATEGORY_NAMES = ("FOOD", "TOOL")


class Rearrange(Env):
    kind = "rearrange"

    def __init__(self, spec: EnvSpec, seed: int = 0):
        super().__init__(spec, seed)
        if spec.n_openable > 1:
            raise InvalidSpecError("rearrange supports at most one openable "
                                   "container")
        self.n_obj = spec.n_objects
        self.n_normal = spec.n_containers
        self.n_openable = spec.n_openable
        self.n_ctr = self.n_normal + self.n_openable
        self.obj_block = 3 + self.n_ctr  # x, y, held, per-container flags
        self.d_s = 2 + self.n_obj * self.obj_block + self.n_openable
        self.d_a = 3
        self.horizon = spec.horizon or DEFAULT_HORIZON

        if self.n_openable:
            xs = np.linspace(0.2, 0.5, self.n_normal) if self.n_normal > 1 \
                else np.array([0.35])
            self.ctr_pos = np.array([[x, 0.82] for x in xs] + [[0.85, 0.82]])
            self.obj_zone = (0.08, 0.60, 0.08, 0.52)  # x_lo, x_hi, y_lo, y_hi
        else:
            xs = np.linspace(0.22, 0.78, self.n_normal) if self.n_normal > 1 \
                else np.array([0.5])
            self.ctr_pos = np.array([[x, 0.82] for x in xs])
            self.obj_zone = (0.08, 0.92, 0.08, 0.52)

    # state access ----------------------------------------------------------

    def hand(self, s):
        return s[0:2]

    def _base(self, i: int) -> int:
        return 2 + i * self.obj_block

    def obj_pos(self, s, i):
        return s[self._base(i): self._base(i) + 2]

    def held(self, s, i):
        return s[self._base(i) + 2] > 0.5

    def placed_in(self, s, i, c):
        return s[self._base(i) + 3 + c] > 0.5

    def placed(self, s, i):
        b = self._base(i)
        return bool(np.any(s[b + 3: b + 3 + self.n_ctr] > 0.5))

    def is_open(self, s, c):
        if c < self.n_normal:
            return True
        return s[2 + self.n_obj * self.obj_block + (c - self.n_normal)] > 0.5

    def _open_idx(self, c: int) -> int:
        return 2 + self.n_obj * self.obj_block + (c - self.n_normal)

    def handle(self, c) -> np.ndarray:
        return self.ctr_pos[c] + np.array([0.0, HANDLE_DY])

    def _held_index(self, s):
        for i in range(self.n_obj):
            if self.held(s, i):
                return i
        return None

    # dynamics ----------------------------------------------------------------

    def step(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        a = self._check_action(a)
        s2 = np.array(s, dtype=np.float64, copy=True)
        hand = np.clip(self.hand(s) + (a[:2] - 0.5) * (2.0 * V_MAX), 0.02, 0.98)
        s2[0:2] = hand
        held_idx = self._held_index(s)
        if held_idx is not None:
            s2[self._base(held_idx): self._base(held_idx) + 2] = hand
        grip = float(a[2])
        if grip >= GRIP_CLOSE and held_idx is None:
            # pulling a handle needs a closed *empty* gripper, so carrying an
            # object past the handle never opens the latch by accident
            for k in range(self.n_openable):
                c = self.n_normal + k
                if np.linalg.norm(hand - self.handle(c)) <= R_HANDLE:
                    s2[self._open_idx(c)] = 1.0  # one-way latch
        if grip >= GRIP_CLOSE and held_idx is None:
            best, best_d = None, R_GRASP
            for i in range(self.n_obj):
                if self.placed(s2, i):
                    continue
                d = float(np.linalg.norm(hand - self.obj_pos(s2, i)))
                if d <= best_d:
                    if best is None or d < best_d:
                        best, best_d = i, d
            if best is not None:
                s2[self._base(best): self._base(best) + 2] = hand
                s2[self._base(best) + 2] = 1.0
        elif grip <= GRIP_OPEN and held_idx is not None:
            b = self._base(held_idx)
            s2[b + 2] = 0.0
            for c in range(self.n_ctr):
                if np.linalg.norm(hand - self.ctr_pos[c]) <= R_PLACE \
                        and self.is_open(s2, c):
                    s2[b: b + 2] = SENTINEL  # deposited: leaves the table
                    s2[b + 3 + c] = 1.0
                    break
        return s2

    def expert_action(self, s: np.ndarray, task: TaskSpec) -> np.ndarray:
        # grip commands sit far outside the 0.4/0.6 thresholds so the cloned
        # (smoothed) grip still crosses them at the right states; after the
        # subtask completes, retreat to the park point
        hand = self.hand(s)
        park = p_control_action(hand, PARK, V_MAX, extra=[0.1])
        op = task.params[0]
        if op == "open":
            c = task.params[1]
            if self.is_open(s, c):
                return park
            handle = self.handle(c)
            grip = 0.9 if np.linalg.norm(hand - handle) <= 2 * R_HANDLE else 0.1
            return p_control_action(hand, handle, V_MAX, extra=[grip])
        assert op == "insert"
        _, i, c = task.params
        if self.placed(s, i):
            return park
        if self.held(s, i):
            target = self.ctr_pos[c]
            near = np.linalg.norm(hand - target) <= R_PLACE * 0.7
            return p_control_action(hand, target, V_MAX,
                                    extra=[0.1 if near else 0.9])
        target = self.obj_pos(s, i)
        # close well before attach range so the smoothed cloned grip has
        # crossed the threshold by the time the hand can actually grasp; only
        # when the target is the nearest free object, so early closing can
        # never grab the wrong one
        d_target = np.linalg.norm(hand - target)
        d_free = [np.linalg.norm(hand - self.obj_pos(s, j))
                  for j in range(self.n_obj)
                  if not self.placed(s, j)]
        near = d_target <= 1.5 * R_GRASP and d_target <= min(d_free) + 1e-12
        return p_control_action(hand, target, V_MAX,
                                extra=[0.9 if near else 0.1])

    # resets --------------------------------------------------------------------

    def _sample_layout(self, rng: np.random.Generator) -> np.ndarray:
        s = np.zeros(self.d_s)
        while True:
            hand = rng.uniform(0.08, 0.92, size=2)
            if all(np.linalg.norm(hand - self.handle(self.n_normal + k)) > 0.12
                   for k in range(self.n_openable)):
                break
        s[0:2] = hand
        x_lo, x_hi, y_lo, y_hi = self.obj_zone
        placed_pts: list[np.ndarray] = []
        for i in range(self.n_obj):
            for _ in range(1000):
                p = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])
                if all(np.linalg.norm(p - q) >= 0.26 for q in placed_pts):
                    break
            placed_pts.append(p)
            s[self._base(i): self._base(i) + 2] = p
        return s

    def reset_demo(self, task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
        s = self._sample_layout(rng)
        op = task.params[0]
        target_obj = task.params[1] if op == "insert" else None
        target_ctr = task.params[2] if op == "insert" else None
        available = [c for c in range(self.n_normal) if c != target_ctr]
        for i in range(self.n_obj):
            if i == target_obj or not available:
                continue
            if rng.uniform() < 0.4:
                c = available.pop(int(rng.integers(0, len(available))))
                s[self._base(i): self._base(i) + 2] = SENTINEL
                s[self._base(i) + 3 + c] = 1.0
        for k in range(self.n_openable):
            c = self.n_normal + k
            if op == "open" and task.params[1] == c:
                s[self._open_idx(c)] = 0.0
            else:
                s[self._open_idx(c)] = float(rng.integers(0, 2))
        return s

    def reset_eval(self, task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
        return self._sample_layout(rng)  # nothing placed, openables closed

    # tasks ------------------------------------------------------------------------

    def demo_units(self) -> list[str]:
        units = [f"insert:{i}:{c}" for i in range(self.n_obj)
                 for c in range(self.n_normal)]
        units += [f"open:{self.n_normal + k}" for k in range(self.n_openable)]
        return units

    def sample_demo_task(self, unit: str, rng: np.random.Generator) -> TaskSpec:
        parts = unit.split(":")
        if parts[0] == "insert":
            i, c = int(parts[1]), int(parts[2])
            return TaskSpec(f"rr:demo:{unit}", 1, "goal", f"placed:{i}:{c}",
                            params=("insert", i, c))
        c = int(parts[1])
        return TaskSpec(f"rr:demo:{unit}", 1, "goal", f"open:{c}",
                        params=("open", c))

    def category_members(self, name: str) -> list[int]:
        half = (self.n_obj + 1) // 2
        if name == "FOOD":
            return list(range(half))
        if name == "TOOL":
            return list(range(half, self.n_obj))
        raise ValueError(f"unknown category {name!r}")

    def category_of(self, i: int) -> str:
        return "FOOD" if i < (self.n_obj + 1) // 2 else "TOOL"

    def _task(self, label, depth, modality, predicate, params, tokens=None):
        return TaskSpec(f"rr:{label}:{modality}", depth, modality, predicate,
                        params=params, tokens=tokens)

    def depth1_tasks(self) -> list[TaskSpec]:
        tasks = []
        for i in range(self.n_obj):
            for c in range(self.n_normal):
                pred = f"placed:{i}:{c}"
                params = ("insert", i, c)
                tasks.append(self._task(f"d1:insert:{i}:{c}", 1, "goal",
                                        pred, params))
                tasks.append(self._task(
                    f"d1:insert:{i}:{c}", 1, "lang", pred, params,
                    tok("MOVE", f"OBJ{i}", "TO", f"CTR{c}")))
        for k in range(self.n_openable):
            c = self.n_normal + k
            tasks.append(self._task(f"d1:open:{c}", 1, "goal",
                                    f"open:{c}", ("open", c)))
            tasks.append(self._task(f"d1:open:{c}", 1, "lang", f"open:{c}",
                                    ("open", c), tok("OPEN", f"CTR{c}")))
        return tasks

    def compositional_tasks(self, depth: int) -> list[TaskSpec]:
        if depth < 2:
            raise ValueError("compositional tasks start at depth 2")
        if depth > self.max_depth():
            raise ValueError(f"depth {depth} exceeds env capacity "
                             f"({self.max_depth()})")
        tasks = []
        if depth == 2:
            for c in range(self.n_normal):
                for i in range(self.n_obj):
                    for j in range(i + 1, self.n_obj):
                        pred = f"pair:{i}:{j}:{c}"
                        params = ("pair", i, j, c)
                        label = f"d2:pair:{i}:{j}:{c}"
                        tasks.append(self._task(label, 2, "goal", pred, params))
                        # elided chain grammar keeps the summed latent near
                        # the norm of training phrases
                        chain = tok("MOVE", f"OBJ{i}", "THEN",
                                    f"OBJ{j}", f"CTR{c}")
                        tasks.append(self._task(label, 2, "lang", pred,
                                                params, chain))
            for name in CATEGORY_NAMES:
                members = self.category_members(name)
                if len(members) != 2:
                    continue
                for c in range(self.n_normal):
                    pred = f"cat:{name}:{c}"
                    params = ("cat", name, c)
                    label = f"d2:cat:{name}:{c}"
                    tasks.append(self._task(label, 2, "goal", pred, params))
                    tasks.append(self._task(label, 2, "lang", pred, params,
                                            tok("PUT", name, "IN", f"CTR{c}")))
            for k in range(self.n_openable):
                c = self.n_normal + k
                for i in range(self.n_obj):
                    pred = f"dep:{i}:{c}"
                    params = ("dep", i, c)
                    label = f"d2:dep:{i}:{c}"
                    tasks.append(self._task(label, 2, "goal", pred, params))
                    chain = tok("OPEN", f"CTR{c}", "THEN",
                                f"OBJ{i}", f"CTR{c}")
                    tasks.append(self._task(label, 2, "lang", pred, params,
                                            chain))
        elif depth == self.n_obj:
            for c in range(self.n_normal):
                pred = f"all:{c}"
                params = ("all", c)
                label = f"d{depth}:all:{c}"
                tasks.append(self._task(label, depth, "goal", pred, params))
                tasks.append(self._task(label, depth, "lang", pred, params,
                                        tok("PUT", "ALL", "IN", f"CTR{c}")))
        return tasks

    def max_depth(self) -> int:
        return max(self.n_obj, 2)

    def decompose(self, task: TaskSpec) -> list[TaskSpec]:
        """Ordered depth-1 subtasks whose completion satisfies the task."""
        op = task.params[0]
        if op in ("insert", "open"):
            return [task]
        if op == "pair":
            _, i, j, c = task.params
            members = [i, j]
        elif op == "cat":
            members = self.category_members(task.params[1])
            c = task.params[2]
        elif op == "all":
            members = list(range(self.n_obj))
            c = task.params[1]
        elif op == "dep":
            _, i, c = task.params
            return [TaskSpec(f"{task.task_id}#open", 1, task.modality,
                             f"open:{c}", params=("open", c)),
                    TaskSpec(f"{task.task_id}#insert", 1, task.modality,
                             f"placed:{i}:{c}", params=("insert", i, c))]
        else:
            raise ValueError(f"cannot decompose {task.params}")
        return [TaskSpec(f"{task.task_id}#{i}", 1, task.modality,
                         f"placed:{i}:{c}", params=("insert", i, c))
                for i in members]

    # predicates / language -------------------------------------------------------

    def outcome_predicates(self) -> list[str]:
        preds = [f"placed:{i}:{c}" for i in range(self.n_obj)
                 for c in range(self.n_normal)]
        preds += [f"open:{self.n_normal + k}" for k in range(self.n_openable)]
        return preds

    def composite_predicates(self) -> list[str]:
        preds = [f"pair:{i}:{j}:{c}" for c in range(self.n_normal)
                 for i in range(self.n_obj) for j in range(i + 1, self.n_obj)]
        for name in CATEGORY_NAMES:
            if len(self.category_members(name)) >= 2:
                preds += [f"cat:{name}:{c}" for c in range(self.n_normal)]
        for k in range(self.n_openable):
            c = self.n_normal + k
            preds += [f"dep:{i}:{c}" for i in range(self.n_obj)]
        if self.n_obj >= 3:
            preds += [f"all:{c}" for c in range(self.n_normal)]
        return preds

    def predicate_true(self, predicate_id: str, window: np.ndarray) -> bool:
        s = window[-1]
        parts = predicate_id.split(":")
        if parts[0] == "placed":
            return self.placed_in(s, int(parts[1]), int(parts[2]))
        if parts[0] == "open":
            return bool(self.is_open(s, int(parts[1])))
        if parts[0] == "pair":
            i, j, c = map(int, parts[1:])
            return self.placed_in(s, i, c) and self.placed_in(s, j, c)
        if parts[0] == "dep":
            i, c = map(int, parts[1:])
            return self.is_open(s, c) and self.placed_in(s, i, c)
        if parts[0] == "cat":
            c = int(parts[2])
            return all(self.placed_in(s, i, c)
                       for i in self.category_members(parts[1]))
        if parts[0] == "all":
            c = int(parts[1])
            return all(self.placed_in(s, i, c) for i in range(self.n_obj))
        raise ValueError(f"unknown predicate {predicate_id!r}")

    def instruction_pools(self) -> dict[str, list[list[int]]]:
        pools = {}
        for i in range(self.n_obj):
            for c in range(self.n_normal):
                pool = [tok("MOVE", f"OBJ{i}", "TO", f"CTR{c}"),
                        tok("PUT", f"OBJ{i}", "IN", f"CTR{c}")]
                if self.spec.category_labels:
                    pool.append(tok("PUT", self.category_of(i), "IN", f"CTR{c}"))
                pools[f"insert:{i}:{c}"] = pool
        for k in range(self.n_openable):
            c = self.n_normal + k
            pools[f"open:{c}"] = [tok("OPEN", f"CTR{c}"), tok("PULL", f"CTR{c}")]
        return pools

    def outcome_id(self, predicate_id: str) -> str:
        parts = predicate_id.split(":")
        if parts[0] == "placed":
            return f"insert:{parts[1]}:{parts[2]}"
        return predicate_id  # open:c keeps its id

    def goal_for(self, task: TaskSpec, s0: np.ndarray) -> np.ndarray:
        g = np.array(s0, dtype=np.float64, copy=True)
        op = task.params[0]
        if op == "open":
            c = task.params[1]
            g[self._open_idx(c)] = 1.0
            g[0:2] = PARK
            return g
        if op == "insert":
            members, c = [task.params[1]], task.params[2]
        elif op == "pair":
            members, c = [task.params[1], task.params[2]], task.params[3]
        elif op == "cat":
            members, c = self.category_members(task.params[1]), task.params[2]
        elif op == "all":
            members, c = list(range(self.n_obj)), task.params[1]
        elif op == "dep":
            members, c = [task.params[1]], task.params[2]
            g[self._open_idx(c)] = 1.0
        else:
            raise ValueError(f"no goal state for {task.params}")
        for i in members:
            g[self._base(i): self._base(i) + 2] = SENTINEL
            g[self._base(i) + 2] = 0.0
            g[self._base(i) + 3 + c] = 1.0
        g[0:2] = PARK
        return g
