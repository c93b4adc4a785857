"""Trajectory storage, serialization, and batch assembly.

Batches pair each state with a geometrically sampled future state:
offset x ~ Geom(1-gamma) on {1, 2, ...} with P(x=j) = (1-gamma) gamma^(j-1),
future index min(t+x, H) clipped at the trajectory end. The hindsight goal
column g is always the trajectory's final state.

Disk format (magic "TRADS1", little-endian):

    magic(6) | n_traj u32 | d_s u32 | d_a u32 | header_len u32 | header JSON
    per trajectory: H u32 | states f32[(H+1)*d_s] | actions f32[H*d_a]
                    | n_tokens u16 | tokens u16[n_tokens]

The JSON header carries provenance (seed, expert noise, generator version),
the environment spec, per-trajectory subtask ids, and the paraphrase pools
used to resample instructions during training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

DATASET_MAGIC = b"TRADS1"
GENERATOR_VERSION = 1


class DatasetFormatError(RuntimeError):
    """Corrupt, truncated, or dimensionally inconsistent dataset file."""


@dataclass
class Trajectory:
    """One expert episode: H+1 states, H actions, optional instruction."""

    states: np.ndarray                 # (H+1, d_s) float32
    actions: np.ndarray                # (H, d_a) float32
    tokens: np.ndarray | None = None   # (L,) uint16
    subtask_id: str | None = None

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32)
        if self.tokens is not None:
            self.tokens = np.ascontiguousarray(self.tokens, dtype=np.uint16)
        if self.states.shape[0] != self.actions.shape[0] + 1:
            raise ValueError("trajectory needs H+1 states for H actions")


@dataclass
class Dataset:
    """Immutable after construction; batch sampling uses cached stacks."""

    trajectories: list[Trajectory]
    env_spec: dict
    seed: int = 0
    sigma_expert: float = 0.0
    generator_version: int = GENERATOR_VERSION
    paraphrases: dict[str, list[list[int]]] = field(default_factory=dict)
    _stack: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("dataset must be non-empty")
        d_s = self.trajectories[0].states.shape[1]
        d_a = self.trajectories[0].actions.shape[1]
        for tr in self.trajectories:
            if tr.states.shape[1] != d_s or tr.actions.shape[1] != d_a:
                raise ValueError("trajectories disagree on d_s/d_a")

    @property
    def d_s(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def d_a(self) -> int:
        return self.trajectories[0].actions.shape[1]

    def stacked(self):
        """(states, actions) stacks when every trajectory shares one horizon,
        else None; computed once."""
        if self._stack is None:
            hs = {tr.horizon for tr in self.trajectories}
            if len(hs) == 1:
                states = np.stack([tr.states for tr in self.trajectories])
                actions = np.stack([tr.actions for tr in self.trajectories])
                self._stack = (states, actions)
            else:
                self._stack = ()  # mixed horizons: no fast path
        return self._stack if self._stack else None


@dataclass
class Batch:
    """K aligned rows: state, action, geometric future state, the immediate
    next state (for advantage surrogates), hindsight goal, instruction."""

    s: np.ndarray        # (K, d_s) float64
    a: np.ndarray        # (K, d_a)
    s_plus: np.ndarray   # (K, d_s)
    s_next: np.ndarray   # (K, d_s)
    g: np.ndarray        # (K, d_s)
    tokens: np.ndarray   # (K, L) int64, padded
    lengths: np.ndarray  # (K,) int64; 0 marks a missing instruction

    @property
    def size(self) -> int:
        return self.s.shape[0]


# ---------------------------------------------------------------------------
# Sampling


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")


def sample_future_offset(gamma: float, rng: np.random.Generator,
                         size=None) -> np.ndarray | int:
    """Raw geometric offset x >= 1 with P(x=j) = (1-gamma) * gamma^(j-1)."""
    _check_gamma(gamma)
    return rng.geometric(1.0 - gamma, size=size)


def sample_future_index(t: int, horizon: int, gamma: float,
                        rng: np.random.Generator) -> int:
    """min(t + x, H) for x ~ Geom(1-gamma); strictly ahead of t until clipped."""
    if not 0 <= t <= horizon:
        raise ValueError(f"t={t} outside [0, {horizon}]")
    x = sample_future_offset(gamma, rng)
    return min(t + int(x), horizon)


def sample_batch(ds: Dataset, k: int, gamma: float,
                 rng: np.random.Generator) -> Batch:
    """Assemble a batch: trajectory uniform, timestep uniform over {0..H-1},
    future via the geometric law, goal = that trajectory's final state, and a
    fresh paraphrase draw for the instruction.

    Draw order is fixed (trajectory, timestep, offset, paraphrase) so batches
    are bit-for-bit reproducible from the generator state.
    """
    if k < 2:
        raise ValueError("contrastive batches need K >= 2")
    _check_gamma(gamma)
    n = len(ds.trajectories)
    idx = rng.integers(0, n, size=k)
    stack = ds.stacked()
    if stack is not None:
        states, actions = stack
        horizon = actions.shape[1]
        t = rng.integers(0, horizon, size=k)
        x = rng.geometric(1.0 - gamma, size=k)
        t_plus = np.minimum(t + x, horizon)
        s = states[idx, t].astype(np.float64)
        a = actions[idx, t].astype(np.float64)
        s_plus = states[idx, t_plus].astype(np.float64)
        s_next = states[idx, t + 1].astype(np.float64)
        g = states[idx, horizon].astype(np.float64)
    else:
        rows_s, rows_a, rows_p, rows_n, rows_g = [], [], [], [], []
        for i in idx:
            tr = ds.trajectories[i]
            t_i = int(rng.integers(0, tr.horizon))
            tp = sample_future_index(t_i, tr.horizon, gamma, rng)
            rows_s.append(tr.states[t_i])
            rows_a.append(tr.actions[t_i])
            rows_p.append(tr.states[tp])
            rows_n.append(tr.states[t_i + 1])
            rows_g.append(tr.states[tr.horizon])
        s = np.array(rows_s, dtype=np.float64)
        a = np.array(rows_a, dtype=np.float64)
        s_plus = np.array(rows_p, dtype=np.float64)
        s_next = np.array(rows_n, dtype=np.float64)
        g = np.array(rows_g, dtype=np.float64)

    token_rows = []
    for i in idx:
        tr = ds.trajectories[i]
        pool = ds.paraphrases.get(tr.subtask_id) if tr.subtask_id else None
        if pool:
            token_rows.append(pool[int(rng.integers(0, len(pool)))])
        elif tr.tokens is not None:
            token_rows.append(tr.tokens.tolist())
        else:
            token_rows.append([])
    l_max = max(1, max(len(r) for r in token_rows))
    tokens = np.zeros((k, l_max), dtype=np.int64)
    lengths = np.zeros(k, dtype=np.int64)
    for j, row in enumerate(token_rows):
        tokens[j, :len(row)] = row
        lengths[j] = len(row)
    return Batch(s, a, s_plus, s_next, g, tokens, lengths)


# ---------------------------------------------------------------------------
# Serialization


def save_dataset(ds: Dataset, path) -> None:
    header = {
        "version": 1,
        "seed": ds.seed,
        "sigma_expert": ds.sigma_expert,
        "generator_version": ds.generator_version,
        "env_spec": ds.env_spec,
        "paraphrases": ds.paraphrases,
        "subtask_ids": [tr.subtask_id for tr in ds.trajectories],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<III", len(ds.trajectories), ds.d_s, ds.d_a))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for tr in ds.trajectories:
            f.write(struct.pack("<I", tr.horizon))
            f.write(tr.states.astype("<f4").tobytes())
            f.write(tr.actions.astype("<f4").tobytes())
            if tr.tokens is None:
                f.write(struct.pack("<H", 0))
            else:
                f.write(struct.pack("<H", len(tr.tokens)))
                f.write(tr.tokens.astype("<u2").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise DatasetFormatError(f"{self.path}: truncated file "
                                     f"(need {n} bytes at offset {self.off})")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    if r.take(len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic bytes (not a dataset)")
    n_traj, d_s, d_a = r.unpack("<III")
    (blob_len,) = r.unpack("<I")
    try:
        header = json.loads(r.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: corrupt header ({e})") from e
    subtask_ids = header.get("subtask_ids") or [None] * n_traj
    if len(subtask_ids) != n_traj:
        raise DatasetFormatError(f"{path}: subtask id count mismatch")
    trajectories = []
    for i in range(n_traj):
        (h,) = r.unpack("<I")
        if h < 1 or h > 1_000_000:
            raise DatasetFormatError(f"{path}: implausible horizon {h}")
        states = np.frombuffer(r.take((h + 1) * d_s * 4), dtype="<f4")
        actions = np.frombuffer(r.take(h * d_a * 4), dtype="<f4")
        (n_tok,) = r.unpack("<H")
        tokens = None
        if n_tok:
            tokens = np.frombuffer(r.take(n_tok * 2), dtype="<u2").copy()
        trajectories.append(Trajectory(
            states.reshape(h + 1, d_s).copy(),
            actions.reshape(h, d_a).copy(),
            tokens, subtask_ids[i]))
    if r.off != len(raw):
        raise DatasetFormatError(f"{path}: {len(raw) - r.off} trailing bytes")
    return Dataset(
        trajectories,
        env_spec=header.get("env_spec", {}),
        seed=int(header.get("seed", 0)),
        sigma_expert=float(header.get("sigma_expert", 0.0)),
        generator_version=int(header.get("generator_version", 0)),
        paraphrases={k: v for k, v in header.get("paraphrases", {}).items()},
    )


def export_jsonl(ds: Dataset, path) -> None:
    """Human-readable debugging export: one JSON object per trajectory."""
    with open(path, "w") as f:
        for tr in ds.trajectories:
            f.write(json.dumps({
                "subtask_id": tr.subtask_id,
                "tokens": None if tr.tokens is None else tr.tokens.tolist(),
                "states": [[float(v) for v in row] for row in tr.states],
                "actions": [[float(v) for v in row] for row in tr.actions],
            }, sort_keys=True))
            f.write("\n")


def dataset_equal(a: Dataset, b: Dataset) -> bool:
    if len(a.trajectories) != len(b.trajectories):
        return False
    if a.env_spec != b.env_spec or a.paraphrases != b.paraphrases:
        return False
    if (a.seed, a.sigma_expert, a.generator_version) != \
       (b.seed, b.sigma_expert, b.generator_version):
        return False
    for ta, tb in zip(a.trajectories, b.trajectories):
        if ta.subtask_id != tb.subtask_id:
            return False
        if not np.array_equal(ta.states, tb.states):
            return False
        if not np.array_equal(ta.actions, tb.actions):
            return False
        if (ta.tokens is None) != (tb.tokens is None):
            return False
        if ta.tokens is not None and not np.array_equal(ta.tokens, tb.tokens):
            return False
    return True
