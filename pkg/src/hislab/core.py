"""Shared value types: states, transitions, trajectories, buffers, config.

The state of every task splits into a controlled real part and a virtual
part.  The virtual part is either replayed from a recorded sequence or
simulated after its first contact with the real part; that distinction is
carried by :class:`VirtualInstance` but deliberately kept out of the
observation vector the policy sees.

All types here are plain immutable values. The replay buffer is the one
mutable container and follows a strict single-writer phase discipline
(collect / insert / update never overlap).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


class HisLabError(Exception):
    """Base class for all package errors."""


class StructuralError(HisLabError):
    """A value violates a shape/index contract."""


class ConfigError(HisLabError):
    """A configuration value or file is invalid."""


class PreconditionError(HisLabError):
    """An operation was called in a state it does not support."""


class AggregationError(HisLabError):
    """Run results cannot be combined (e.g. mixed environments)."""


class Mode(enum.IntEnum):
    """How the virtual part advances: copied from a recording, or simulated."""

    REPLAY = 0
    SIMULATED = 1


class Terminal(enum.IntEnum):
    """Why a transition ended (or did not end) its episode.

    TIME_LIMIT is truncation, not task failure: value targets bootstrap
    through it, while ENV_DONE stops the bootstrap.
    """

    NOT_DONE = 0
    ENV_DONE = 1
    TIME_LIMIT = 2


class Provenance(enum.IntEnum):
    """Where a buffered transition came from."""

    ON_POLICY = 0
    HIS = 1
    HER = 2
    HIS_HER = 3


class Criterion(enum.Enum):
    """Scoring rule used to pick hindsight data for insertion."""

    REWARD_PER_TRANSITION = "reward_per_transition"
    REWARD_PER_EPISODE = "reward_per_episode"
    TD_PER_TRANSITION = "td_per_transition"
    TD_PER_EPISODE = "td_per_episode"
    VIRTUAL_DISPLACEMENT = "virtual_displacement"


class Granularity(enum.Enum):
    TRANSITION = "transition"
    EPISODE = "episode"


# Criteria that score a whole trajectory; they force episode granularity.
EPISODE_CRITERIA = frozenset(
    {
        Criterion.REWARD_PER_EPISODE,
        Criterion.TD_PER_EPISODE,
        Criterion.VIRTUAL_DISPLACEMENT,
    }
)

TD_CRITERIA = frozenset({Criterion.TD_PER_TRANSITION, Criterion.TD_PER_EPISODE})


def _vec(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise StructuralError(f"{name} must be a 1-d vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class VirtualInstance:
    """One virtual object: its state vector plus replay/simulate bookkeeping.

    ``contact_time`` is the step index at which the instance first touched
    the real part; it is set exactly when ``mode`` switches to SIMULATED and
    the switch is one-way within an episode.
    """

    state: np.ndarray
    mode: Mode = Mode.REPLAY
    contact_time: Optional[int] = None
    source_id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "state", _vec(self.state, "virtual state"))
        if self.mode == Mode.REPLAY and self.contact_time is not None:
            raise StructuralError("replay-mode instance cannot carry a contact time")
        if self.mode == Mode.SIMULATED and self.contact_time is None:
            raise StructuralError("simulated-mode instance requires a contact time")


@dataclass(frozen=True)
class HybridState:
    """Factored state: real (controlled) part, virtual part, optional goal."""

    real: np.ndarray
    virt: VirtualInstance
    goal: Optional[np.ndarray] = None
    time: int = 0

    def __post_init__(self):
        object.__setattr__(self, "real", _vec(self.real, "real state"))
        if self.goal is not None:
            object.__setattr__(self, "goal", _vec(self.goal, "goal"))
        if self.virt.mode == Mode.SIMULATED and self.virt.contact_time > self.time:
            raise StructuralError(
                f"contact time {self.virt.contact_time} lies after state time {self.time}"
            )

    def with_goal(self, goal: np.ndarray) -> "HybridState":
        return replace(self, goal=_vec(goal, "goal"))


def compose_observation(state: HybridState, spec=None) -> np.ndarray:
    """Flatten a state to the policy observation ``[real | virt | goal?]``.

    The observation intentionally omits ``mode``/``contact_time``: the policy
    cannot tell a replayed virtual part from a simulated one.  With ``spec``
    given, dimensions are checked against the environment.
    """
    if spec is not None:
        if state.real.shape[0] != spec.d_r:
            raise StructuralError(
                f"real dim {state.real.shape[0]} != spec d_r {spec.d_r}"
            )
        if state.virt.state.shape[0] != spec.d_v:
            raise StructuralError(
                f"virtual dim {state.virt.state.shape[0]} != spec d_v {spec.d_v}"
            )
        if spec.goal_conditioned != (state.goal is not None):
            raise StructuralError("goal presence does not match environment spec")
        if state.goal is not None and state.goal.shape[0] != spec.d_g:
            raise StructuralError(
                f"goal dim {state.goal.shape[0]} != spec d_g {spec.d_g}"
            )
    parts = [state.real, state.virt.state]
    if state.goal is not None:
        parts.append(state.goal)
    return np.concatenate(parts)


@dataclass(frozen=True)
class Transition:
    """One (s, a, r, s') step. Rewards are always recomputable from the
    states by the owning environment; that recomputation is the correctness
    oracle for every relabeling path."""

    state: HybridState
    action: np.ndarray
    reward: float
    next_state: HybridState
    terminal: Terminal = Terminal.NOT_DONE
    provenance: Provenance = Provenance.ON_POLICY

    def __post_init__(self):
        object.__setattr__(self, "action", _vec(self.action, "action"))
        if self.next_state.time != self.state.time + 1:
            raise StructuralError(
                f"next_state.time {self.next_state.time} != state.time+1 "
                f"({self.state.time + 1})"
            )


@dataclass(frozen=True)
class Trajectory:
    """A time-contiguous episode (or hindsight episode) of transitions."""

    transitions: tuple[Transition, ...]
    contact_time: Optional[int] = None
    episode_seed: int = 0
    main_source_id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        for a, b in zip(self.transitions, self.transitions[1:]):
            if b.state.time != a.state.time + 1:
                raise StructuralError("trajectory transitions are not contiguous")

    def __len__(self) -> int:
        return len(self.transitions)

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=np.float64)

    def states(self) -> list[HybridState]:
        """All visited states s_0..s_L (last one from the final transition)."""
        if not self.transitions:
            return []
        return [t.state for t in self.transitions] + [self.transitions[-1].next_state]


@dataclass(frozen=True)
class RecordedDB:
    """Pre-recorded virtual-state sequences, reproducible from their seed.

    ``entries`` has shape (n, T, d_v): n sequences of T virtual states.
    """

    entries: np.ndarray
    generation_seed: int
    env_id: str

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 3:
            raise StructuralError(f"db entries must be (n, T, d_v), got {e.shape}")
        object.__setattr__(self, "entries", e)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def horizon(self) -> int:
        return self.entries.shape[1]

    @property
    def d_v(self) -> int:
        return self.entries.shape[2]


_DB_MAGIC = b"HISDB1"


def save_db(db: RecordedDB, path) -> None:
    """Write a recorded database to its flat binary format.

    Layout: magic "HISDB1", env_id (u32 length + utf-8 bytes), N u32, T u32,
    d_v u32, generation_seed u64, then N*T*d_v little-endian float64.
    """
    env_bytes = db.env_id.encode("utf-8")
    n, t, d = db.entries.shape
    header = _DB_MAGIC + struct.pack(
        "<I", len(env_bytes)
    ) + env_bytes + struct.pack("<IIIQ", n, t, d, db.generation_seed)
    payload = np.ascontiguousarray(db.entries, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_db(path) -> RecordedDB:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(_DB_MAGIC)] != _DB_MAGIC:
        raise StructuralError(f"{path}: not a recorded-database file")
    off = len(_DB_MAGIC)
    (env_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    env_id = raw[off : off + env_len].decode("utf-8")
    off += env_len
    n, t, d, seed = struct.unpack_from("<IIIQ", raw, off)
    off += struct.calcsize("<IIIQ")
    expect = n * t * d * 8
    if len(raw) - off != expect:
        raise StructuralError(
            f"{path}: payload is {len(raw) - off} bytes, expected {expect}"
        )
    entries = np.frombuffer(raw, dtype="<f8", offset=off).reshape(n, t, d).copy()
    return RecordedDB(entries=entries, generation_seed=seed, env_id=env_id)


@dataclass(frozen=True)
class HindsightConfig:
    """Knobs for parallel virtual streams and selective hindsight insertion."""

    num_parallel: int = 0
    criterion: Criterion = Criterion.REWARD_PER_EPISODE
    threshold: float = 0.5
    cap: int = 3
    insert_every: int = 1
    granularity: Granularity = Granularity.EPISODE

    def __post_init__(self):
        if self.num_parallel < 0:
            raise ConfigError("num_parallel must be >= 0")
        if self.cap < 0:
            raise ConfigError("cap must be >= 0")
        if self.insert_every < 1:
            raise ConfigError("insert_every must be >= 1")
        if self.criterion in EPISODE_CRITERIA and self.granularity != Granularity.EPISODE:
            raise ConfigError(
                f"criterion {self.criterion.value} scores whole episodes; "
                "granularity must be 'episode'"
            )


class ReplayBuffer:
    """Fixed-capacity FIFO transition store with uniform sampling.

    Transitions are kept column-wise (one array per field) so the learner can
    sample flat batches without touching Python objects; :meth:`sample`
    materializes :class:`Transition` values on demand.  Single writer; readers
    only between write phases.
    """

    _COL_SPECS = (  # name, per-row width key, dtype
        ("obs", "d_obs", np.float64),
        ("next_obs", "d_obs", np.float64),
        ("action", "d_a", np.float64),
    )

    def __init__(self, capacity: int, d_r: int, d_v: int, d_a: int, d_g: int = 0):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.d_r, self.d_v, self.d_a, self.d_g = d_r, d_v, d_a, d_g
        self.d_obs = d_r + d_v + d_g
        self.count = 0
        self.write_cursor = 0
        self._alloc = 0
        self._f: dict[str, np.ndarray] = {}
        self._i: dict[str, np.ndarray] = {}

    _INT_COLS = (
        "terminal",
        "provenance",
        "time",
        "mode",
        "next_mode",
        "contact",
        "next_contact",
        "source",
    )

    def _grow(self, need: int) -> None:
        new_alloc = min(self.capacity, max(1024, self._alloc * 2, need))
        if new_alloc <= self._alloc:
            return
        widths = {"d_obs": self.d_obs, "d_a": self.d_a}
        for name, wkey, dtype in self._COL_SPECS:
            fresh = np.zeros((new_alloc, widths[wkey]), dtype=dtype)
            if name in self._f:
                fresh[: self._alloc] = self._f[name]
            self._f[name] = fresh
        fresh = np.zeros(new_alloc, dtype=np.float64)
        if "reward" in self._f:
            fresh[: self._alloc] = self._f["reward"]
        self._f["reward"] = fresh
        for name in self._INT_COLS:
            fresh = np.zeros(new_alloc, dtype=np.int64)
            if name in self._i:
                fresh[: self._alloc] = self._i[name]
            self._i[name] = fresh
        self._alloc = new_alloc

    def insert(self, t: Transition) -> None:
        """Store one transition; at capacity the oldest one is overwritten."""
        idx = self.write_cursor
        if idx >= self._alloc:
            self._grow(idx + 1)
        obs = compose_observation(t.state)
        next_obs = compose_observation(t.next_state)
        if obs.shape[0] != self.d_obs or next_obs.shape[0] != self.d_obs:
            raise StructuralError(
                f"observation dim {obs.shape[0]} != buffer d_obs {self.d_obs}"
            )
        if t.action.shape[0] != self.d_a:
            raise StructuralError(
                f"action dim {t.action.shape[0]} != buffer d_a {self.d_a}"
            )
        self._f["obs"][idx] = obs
        self._f["next_obs"][idx] = next_obs
        self._f["action"][idx] = t.action
        self._f["reward"][idx] = t.reward
        self._i["terminal"][idx] = int(t.terminal)
        self._i["provenance"][idx] = int(t.provenance)
        self._i["time"][idx] = t.state.time
        self._i["mode"][idx] = int(t.state.virt.mode)
        self._i["next_mode"][idx] = int(t.next_state.virt.mode)
        ct = t.state.virt.contact_time
        nct = t.next_state.virt.contact_time
        self._i["contact"][idx] = -1 if ct is None else ct
        self._i["next_contact"][idx] = -1 if nct is None else nct
        self._i["source"][idx] = t.state.virt.source_id
        self.write_cursor = (self.write_cursor + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def extend(self, transitions: Sequence[Transition]) -> None:
        for t in transitions:
            self.insert(t)

    def _rebuild(self, idx: int) -> Transition:
        obs = self._f["obs"][idx]
        next_obs = self._f["next_obs"][idx]
        goal = obs[self.d_r + self.d_v :].copy() if self.d_g else None
        next_goal = next_obs[self.d_r + self.d_v :].copy() if self.d_g else None
        tm = int(self._i["time"][idx])
        src = int(self._i["source"][idx])

        def inst(vec, mode, contact):
            return VirtualInstance(
                state=vec.copy(),
                mode=Mode(mode),
                contact_time=None if contact < 0 else int(contact),
                source_id=src,
            )

        state = HybridState(
            real=obs[: self.d_r].copy(),
            virt=inst(
                obs[self.d_r : self.d_r + self.d_v],
                self._i["mode"][idx],
                self._i["contact"][idx],
            ),
            goal=goal,
            time=tm,
        )
        next_state = HybridState(
            real=next_obs[: self.d_r].copy(),
            virt=inst(
                next_obs[self.d_r : self.d_r + self.d_v],
                self._i["next_mode"][idx],
                self._i["next_contact"][idx],
            ),
            goal=next_goal,
            time=tm + 1,
        )
        return Transition(
            state=state,
            action=self._f["action"][idx].copy(),
            reward=float(self._f["reward"][idx]),
            next_state=next_state,
            terminal=Terminal(int(self._i["terminal"][idx])),
            provenance=Provenance(int(self._i["provenance"][idx])),
        )

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.count < 1:
            raise PreconditionError("cannot sample from an empty buffer")
        return rng.integers(0, self.count, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        """Draw n transitions uniformly with replacement."""
        return [self._rebuild(i) for i in self.sample_indices(n, rng)]

    def sample_arrays(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Uniform batch as flat arrays (the learner's fast path)."""
        idx = self.sample_indices(n, rng)
        return {
            "obs": self._f["obs"][idx],
            "action": self._f["action"][idx],
            "reward": self._f["reward"][idx],
            "next_obs": self._f["next_obs"][idx],
            "done_env": (self._i["terminal"][idx] == int(Terminal.ENV_DONE)).astype(
                np.float64
            ),
        }

    def __len__(self) -> int:
        return self.count
