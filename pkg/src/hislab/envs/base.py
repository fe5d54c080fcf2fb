"""Environment contract shared by the three desk-scale tasks.

Each environment factors its state into a controlled real part (paddle or
gripper) and a virtual object (ball, box, puck).  The real part advances as a
pure function of (real state, action) and never sees the virtual object; the
virtual object is replayed from a recorded sequence until its first contact
with the real part and simulated afterwards.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import rng as rngmod
from ..core import (
    ConfigError,
    HybridState,
    Mode,
    RecordedDB,
    StructuralError,
    Trajectory,
    VirtualInstance,
)
from ..kernels import EV_CONTACT

log = logging.getLogger("hislab.envs")


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    d_r: int
    d_v: int
    d_a: int
    d_g: int
    T: int
    action_low: np.ndarray
    action_high: np.ndarray
    goal_conditioned: bool
    success_radius: float
    dt: float


class Env(ABC):
    """Deterministic dynamics handle; all randomness comes in through rng
    arguments.  Instances are cheap and stateless between calls."""

    spec: EnvSpec
    uses_db: bool = False
    delta_move: float = 1e-3

    # -- real part ---------------------------------------------------------

    @abstractmethod
    def initial_real(self) -> np.ndarray:
        """Real-part internal state at episode start (fixed, not sampled)."""

    @abstractmethod
    def step_real(self, real: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Advance the real part one step. Never reads any virtual state."""

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64)
        lo, hi = self.spec.action_low, self.spec.action_high
        if np.any(a < lo) or np.any(a > hi):
            log.debug("%s: clipping out-of-bound action %s", self.spec.env_id, a)
            a = np.clip(a, lo, hi)
        return a

    # -- virtual part ------------------------------------------------------

    @abstractmethod
    def sample_source(self, db: Optional[RecordedDB], rng: np.random.Generator
                      ) -> tuple[int, np.ndarray]:
        """Draw one virtual source: (source_id, entry of shape (T+1, d_v)).

        Ball trajectories come from the recorded database; box/puck poses are
        sampled fresh from the initial-object distribution and expanded to a
        constant sequence.
        """

    @abstractmethod
    def advance(self, virt: np.ndarray, modes: np.ndarray, rec_next: np.ndarray,
                real_next: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Advance K virtual streams one step against the real part's next
        state.  Returns (next virt (K,d_v), next modes (K,), events (K,))."""

    def step_virtual(self, real: np.ndarray, inst: VirtualInstance,
                     recorded_entry: np.ndarray, t: int) -> VirtualInstance:
        """Single-instance step: replay until contact, then simulate.

        ``real`` is the real part's state at the end of the step (time t+1);
        contact is resolved against it.  Wraps the batched kernel with K=1 so
        the public operation and the rollout path cannot drift apart.
        """
        if t >= self.spec.T:
            raise StructuralError(f"step index {t} beyond horizon {self.spec.T}")
        virt = inst.state[None, :]
        modes = np.array([int(inst.mode)], dtype=np.int64)
        rec_next = np.asarray(recorded_entry, dtype=np.float64)[t + 1][None, :]
        out, new_modes, events = self.advance(virt, modes, rec_next, real)
        if inst.mode == Mode.REPLAY and events[0] == EV_CONTACT:
            return VirtualInstance(state=out[0], mode=Mode.SIMULATED,
                                   contact_time=t, source_id=inst.source_id)
        return VirtualInstance(state=out[0], mode=Mode(int(new_modes[0])),
                               contact_time=inst.contact_time,
                               source_id=inst.source_id)

    def stream_ends_on_event(self, event: int) -> bool:
        """Whether an event code terminates that virtual stream's episode."""
        return False

    # -- goals and rewards -------------------------------------------------

    def sample_goal(self, rng: np.random.Generator) -> Optional[np.ndarray]:
        return None

    def achieved_goal(self, virt_state: np.ndarray) -> np.ndarray:
        raise ConfigError(f"{self.spec.env_id} is not goal-conditioned")

    @abstractmethod
    def reward(self, state: HybridState, action: np.ndarray,
               next_state: HybridState) -> float:
        """Sparse 0/1 reward, a pure function of its arguments."""

    @abstractmethod
    def rewards_from_arrays(self, virt_states: np.ndarray, modes: np.ndarray,
                            goal: Optional[np.ndarray]) -> np.ndarray:
        """Vector of the L per-step rewards for one stream's history
        (L+1 virtual states and mode codes).  Must agree exactly with
        :meth:`reward` on the materialized transitions; the scoring fast
        path depends on it."""

    # -- episode predicates ------------------------------------------------

    def success(self, traj: Trajectory) -> bool:
        return bool(any(t.reward >= 0.5 for t in traj.transitions))

    def nontrivial(self, traj: Trajectory) -> bool:
        """True when the main virtual object actually moved this episode."""
        if not traj.transitions:
            return False
        first = traj.transitions[0].state.virt.state[:2]
        last = traj.transitions[-1].next_state.virt.state[:2]
        return bool(np.linalg.norm(last - first) > self.delta_move)

    # -- construction ------------------------------------------------------

    def apply_overrides(self, overrides: dict) -> None:
        for key, value in overrides.items():
            if key not in self._OVERRIDABLE:
                raise ConfigError(
                    f"unknown override {key!r} for {self.spec.env_id}; "
                    f"allowed: {sorted(self._OVERRIDABLE)}")
            setattr(self, key, type(getattr(self, key))(value))
        self._rebuild_spec()

    _OVERRIDABLE: frozenset = frozenset()

    @abstractmethod
    def _rebuild_spec(self) -> None:
        """Recompute self.spec after overrides changed parameters."""

    @abstractmethod
    def record_entries(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n virtual source sequences, shape (n, T+1, d_v), deterministic."""


def advance_hybrid(env: Env, real: np.ndarray, action: np.ndarray,
                   insts: list[VirtualInstance], rec_next: np.ndarray,
                   t: int) -> tuple[np.ndarray, list[VirtualInstance]]:
    """One full hybrid step: real part first, then every virtual stream.

    The real successor is computed before any virtual state is touched, which
    pins the independence property this split exists for.
    """
    real_next = env.step_real(real, action)
    virt = np.stack([i.state for i in insts])
    modes = np.array([int(i.mode) for i in insts], dtype=np.int64)
    out, new_modes, events = env.advance(virt, modes, rec_next, real_next)
    nxt = []
    for k, inst in enumerate(insts):
        if inst.mode == Mode.REPLAY and events[k] == EV_CONTACT:
            nxt.append(VirtualInstance(state=out[k], mode=Mode.SIMULATED,
                                       contact_time=t, source_id=inst.source_id))
        else:
            nxt.append(VirtualInstance(state=out[k], mode=Mode(int(new_modes[k])),
                                       contact_time=inst.contact_time,
                                       source_id=inst.source_id))
    return real_next, nxt


# ---------------------------------------------------------------- factory ---

ENV_IDS = ("volley2d", "pushbox2d", "slidedisk2d")


def make_env(env_id: str, overrides: Optional[dict] = None) -> Env:
    from .volley import VolleyEnv
    from .pushslide import PushBoxEnv, SlideDiskEnv

    classes = {"volley2d": VolleyEnv, "pushbox2d": PushBoxEnv,
               "slidedisk2d": SlideDiskEnv}
    if env_id not in classes:
        raise ConfigError(f"unknown environment {env_id!r}; known: {ENV_IDS}")
    env = classes[env_id]()
    if overrides:
        env.apply_overrides(dict(overrides))
    return env


def generate_recorded_db(env_id: str, n_r: int, seed: int) -> RecordedDB:
    """Deterministically record n_r virtual source sequences.

    Entries carry T+1 states (one per step boundary) so that every step of a
    full-length episode has a recorded successor.
    """
    if n_r < 1:
        raise ConfigError("recorded database needs at least one entry")
    env = make_env(env_id)
    gen = rngmod.stream(seed, rngmod.DBGEN)
    entries = env.record_entries(n_r, gen)
    return RecordedDB(entries=entries, generation_seed=seed, env_id=env_id)
