"""Hindsight machinery: hybrid rollouts with parallel virtual streams,
relabeling, criterion scoring, gated insertion, and goal relabeling.

A rollout advances one real system and M+1 virtual objects (the main one the
policy watches, plus M extras) under a single action sequence.  Afterwards
each extra stream can be turned into a full alternative episode by swapping
its virtual states into the collected transitions and recomputing rewards;
a scoring criterion with threshold and cap decides which of those alternative
episodes (or single transitions) enter the replay buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import rng as rngmod
from .core import (
    ConfigError,
    Criterion,
    EPISODE_CRITERIA,
    Granularity,
    HindsightConfig,
    HybridState,
    Mode,
    PreconditionError,
    Provenance,
    RecordedDB,
    ReplayBuffer,
    StructuralError,
    Terminal,
    Trajectory,
    Transition,
    VirtualInstance,
)
from .envs.base import Env
from .kernels import EV_CONTACT, EV_NONE


@dataclass
class EpisodeRngs:
    """Purpose-keyed generators consumed by one episode's rollout."""

    action: np.random.Generator
    draw: np.random.Generator
    streams: np.random.Generator
    goal: np.random.Generator

    @classmethod
    def for_episode(cls, run_seed: int, episode: int) -> "EpisodeRngs":
        return cls(
            action=rngmod.stream(run_seed, rngmod.ACTION, episode),
            draw=rngmod.stream(run_seed, rngmod.DRAW, episode),
            streams=rngmod.stream(run_seed, rngmod.STREAMS, episode),
            goal=rngmod.stream(run_seed, rngmod.GOAL, episode),
        )

    @classmethod
    def single(cls, gen: np.random.Generator) -> "EpisodeRngs":
        """All purposes share one generator (evaluation episodes)."""
        return cls(action=gen, draw=gen, streams=gen, goal=gen)


@dataclass
class StreamBundle:
    """One episode's real trace plus the histories of all virtual streams.

    Row 0 of the stream arrays is the main virtual object; rows 1..M are the
    extra streams.  ``total_len`` covers the main episode plus any tail
    appended by :func:`continue_tail`; ``tail_start`` is the main episode's
    length.
    """

    env_id: str
    num_streams: int
    reals: np.ndarray          # (T+1, d_r), filled up to total_len
    actions: np.ndarray        # (T, d_a)
    virt_hist: np.ndarray      # (M+1, T+1, d_v)
    entries: np.ndarray        # (M+1, T+1, d_v) recorded sources
    source_ids: np.ndarray     # (M+1,)
    contact: np.ndarray        # (M+1,), -1 while uncontacted
    end_step: np.ndarray       # (M+1,) transitions recorded per stream
    terminal: np.ndarray       # (M+1,) Terminal codes for each stream's end
    alive: np.ndarray          # (M+1,) streams that can still be extended
    goal: Optional[np.ndarray]
    tail_start: int
    total_len: int
    episode_seed: int
    main: Trajectory = field(default=None)  # type: ignore[assignment]

    @property
    def main_source_id(self) -> int:
        return int(self.source_ids[0])

    @property
    def streams(self) -> list[list[VirtualInstance]]:
        """Materialized per-stream instance sequences (diagnostics/tests)."""
        return [
            [_instance_at(self, m + 1, t) for t in range(int(self.end_step[m + 1]) + 1)]
            for m in range(self.num_streams)
        ]

    @property
    def tail(self) -> Optional[tuple[np.ndarray, np.ndarray]]:
        if self.total_len <= self.tail_start:
            return None
        return (self.reals[self.tail_start: self.total_len + 1],
                self.actions[self.tail_start: self.total_len])


def _instance_at(bundle: StreamBundle, row: int, t: int) -> VirtualInstance:
    tc = int(bundle.contact[row])
    simulated = tc >= 0 and t > tc
    return VirtualInstance(
        state=bundle.virt_hist[row, t].copy(),
        mode=Mode.SIMULATED if simulated else Mode.REPLAY,
        contact_time=tc if simulated else None,
        source_id=int(bundle.source_ids[row]),
    )


def _state_at(bundle: StreamBundle, row: int, t: int) -> HybridState:
    return HybridState(
        real=bundle.reals[t].copy(),
        virt=_instance_at(bundle, row, t),
        goal=None if bundle.goal is None else bundle.goal,
        time=t,
    )


def _materialize(env: Env, bundle: StreamBundle, row: int,
                 provenance: Provenance) -> Trajectory:
    end = int(bundle.end_step[row])
    last_terminal = Terminal(int(bundle.terminal[row]))
    if bundle.alive[row]:
        # stream cut off mid-flight: truncation, value may bootstrap
        last_terminal = Terminal.TIME_LIMIT
    transitions = []
    state = _state_at(bundle, row, 0)
    for t in range(end):
        nxt = _state_at(bundle, row, t + 1)
        r = env.reward(state, bundle.actions[t], nxt)
        transitions.append(Transition(
            state=state,
            action=bundle.actions[t].copy(),
            reward=r,
            next_state=nxt,
            terminal=last_terminal if t == end - 1 else Terminal.NOT_DONE,
            provenance=provenance,
        ))
        state = nxt
    tc = int(bundle.contact[row])
    return Trajectory(
        transitions=tuple(transitions),
        contact_time=None if tc < 0 else tc,
        episode_seed=bundle.episode_seed,
        main_source_id=int(bundle.source_ids[row]),
    )


# ---------------------------------------------------------------- rollout ---


def rollout_hysr(policy, env: Env, db: Optional[RecordedDB],
                 config: Optional[HindsightConfig], rngs: EpisodeRngs,
                 episode_seed: int = 0) -> StreamBundle:
    """Collect one episode while advancing M extra virtual streams.

    The policy only ever sees the main stream; the extras ride along under
    the same actions.  With ``config`` None or M=0 this is a plain rollout.
    """
    spec = env.spec
    m_extra = config.num_parallel if config is not None else 0
    k = m_extra + 1

    entries = np.empty((k, spec.T + 1, spec.d_v))
    source_ids = np.empty(k, dtype=np.int64)
    sid, entry = env.sample_source(db, rngs.draw)
    entries[0] = entry
    source_ids[0] = sid
    for m in range(m_extra):
        sid, entry = env.sample_source(db, rngs.streams)
        entries[m + 1] = entry
        source_ids[m + 1] = sid
    goal = env.sample_goal(rngs.goal)

    reals = np.empty((spec.T + 1, spec.d_r))
    actions = np.empty((spec.T, spec.d_a))
    virt_hist = np.empty((k, spec.T + 1, spec.d_v))
    reals[0] = env.initial_real()
    virt_hist[:, 0] = entries[:, 0]
    cur = entries[:, 0].copy()
    modes = np.zeros(k, dtype=np.int64)
    contact = np.full(k, -1, dtype=np.int64)
    end_step = np.zeros(k, dtype=np.int64)
    terminal = np.full(k, int(Terminal.NOT_DONE), dtype=np.int64)
    alive = np.ones(k, dtype=bool)

    bundle = StreamBundle(
        env_id=spec.env_id, num_streams=m_extra, reals=reals, actions=actions,
        virt_hist=virt_hist, entries=entries, source_ids=source_ids,
        contact=contact, end_step=end_step, terminal=terminal, alive=alive,
        goal=goal, tail_start=0, total_len=0, episode_seed=episode_seed)

    t = 0
    while t < spec.T:
        obs = _compose_fast(reals[t], cur[0], goal)
        a, _ = policy.act(obs, deterministic=False, rng=rngs.action)
        actions[t] = a
        reals[t + 1] = env.step_real(reals[t], a)
        _advance_alive(env, bundle, cur, modes, t)
        t += 1
        if not alive[0]:
            break

    _close_at(bundle, t, spec.T)
    bundle.tail_start = t
    bundle.total_len = t
    bundle.main = _materialize(env, bundle, 0, Provenance.ON_POLICY)
    return bundle


def _compose_fast(real, virt, goal) -> np.ndarray:
    if goal is None:
        return np.concatenate([real, virt])
    return np.concatenate([real, virt, goal])


def _advance_alive(env: Env, bundle: StreamBundle, cur: np.ndarray,
                   modes: np.ndarray, t: int) -> None:
    """Advance every live stream through step t; dead streams stay frozen."""
    alive = bundle.alive
    out, new_modes, events = env.advance(cur, modes, bundle.entries[:, t + 1],
                                         bundle.reals[t + 1])
    upd = alive.copy()
    hit = upd & (modes == 0) & (events == EV_CONTACT)
    bundle.contact[hit] = t
    cur[upd] = out[upd]
    modes[upd] = new_modes[upd]
    bundle.virt_hist[upd, t + 1] = out[upd]
    if getattr(env, "streams_end_on_any_event", False):
        ends = upd & (events != EV_NONE)
        bundle.end_step[ends] = t + 1
        bundle.terminal[ends] = int(Terminal.ENV_DONE)
        bundle.alive[ends] = False


def _close_at(bundle: StreamBundle, length: int, cap: int) -> None:
    """Finalize streams still live at ``length``: cap means truncation, an
    earlier stop leaves non-main streams open for a tail."""
    alive = bundle.alive
    bundle.end_step[alive] = length
    if length >= cap:
        bundle.terminal[alive] = int(Terminal.TIME_LIMIT)
        bundle.alive[:] = False


def continue_tail(policy, env: Env, bundle: StreamBundle,
                  rng: np.random.Generator) -> StreamBundle:
    """Keep acting for streams that outlived the main episode.

    The policy is conditioned on the lowest-index unfinished stream; when it
    finishes, conditioning moves to the next one.  Tail transitions extend
    only the hindsight episodes of streams still in flight.
    """
    spec = env.spec
    t = bundle.total_len
    if not bundle.alive.any() or t >= spec.T:
        return bundle
    cur = bundle.virt_hist[:, t].copy()
    modes = np.where(bundle.contact >= 0, 1, 0).astype(np.int64)
    while t < spec.T and bundle.alive.any():
        j = int(np.flatnonzero(bundle.alive)[0])
        obs = _compose_fast(bundle.reals[t], cur[j], bundle.goal)
        a, _ = policy.act(obs, deterministic=False, rng=rng)
        bundle.actions[t] = a
        bundle.reals[t + 1] = env.step_real(bundle.reals[t], a)
        _advance_alive(env, bundle, cur, modes, t)
        t += 1
    _close_at(bundle, t, spec.T)
    bundle.total_len = t
    return bundle


# ---------------------------------------------------------------- relabel ---


def relabel(env: Env, bundle: StreamBundle, m: int) -> Trajectory:
    """Hindsight episode for extra stream m: same real states and actions,
    virtual part swapped, rewards recomputed, provenance HiS."""
    if not 0 <= m < bundle.num_streams:
        raise StructuralError(
            f"stream index {m} out of range for M={bundle.num_streams}")
    return _materialize(env, bundle, m + 1, Provenance.HIS)


# ---------------------------------------------------------------- scoring ---


@dataclass
class ScoredCandidate:
    payload: Union[Transition, Trajectory, tuple]
    score: float
    criterion: Criterion
    stream_index: int

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise StructuralError(f"candidate score {self.score} is not finite")


def _traj_arrays(traj: Trajectory):
    obs = np.stack([_compose_fast(t.state.real, t.state.virt.state, t.state.goal)
                    for t in traj.transitions])
    nxt = np.stack([_compose_fast(t.next_state.real, t.next_state.virt.state,
                                  t.next_state.goal) for t in traj.transitions])
    act = np.stack([t.action for t in traj.transitions])
    rew = traj.rewards()
    done = np.array([1.0 if t.terminal == Terminal.ENV_DONE else 0.0
                     for t in traj.transitions])
    return obs, act, rew, nxt, done


def score(payload: Union[Transition, Trajectory], criterion: Criterion,
          learner=None) -> float:
    """Score one candidate under the given criterion.

    Per-transition criteria take a Transition, per-episode criteria a
    Trajectory; TD criteria need a learner for its current value estimates.
    """
    if criterion in EPISODE_CRITERIA:
        if not isinstance(payload, Trajectory):
            raise StructuralError(f"{criterion.value} scores whole trajectories")
    elif not isinstance(payload, Transition):
        raise StructuralError(f"{criterion.value} scores single transitions")
    if criterion in (Criterion.TD_PER_TRANSITION, Criterion.TD_PER_EPISODE):
        if learner is None:
            raise PreconditionError(f"{criterion.value} needs an initialized learner")

    if criterion == Criterion.REWARD_PER_TRANSITION:
        return float(payload.reward)
    if criterion == Criterion.REWARD_PER_EPISODE:
        return float(np.sum(payload.rewards()))
    if criterion == Criterion.TD_PER_TRANSITION:
        return abs(learner.td_error(payload))
    if criterion == Criterion.TD_PER_EPISODE:
        obs, act, rew, nxt, done = _traj_arrays(payload)
        return float(np.sum(np.abs(learner.td_error_batch(obs, act, rew, nxt, done))))
    if criterion == Criterion.VIRTUAL_DISPLACEMENT:
        first = payload.transitions[0].state.virt.state
        last = payload.transitions[-1].next_state.virt.state
        dx = float(last[0] - first[0])
        dy = float(last[1] - first[1])
        return float(np.sqrt(dx * dx + dy * dy))
    raise ConfigError(f"unknown criterion {criterion}")


def select(candidates: list[ScoredCandidate], psi: float, k: int
           ) -> list[ScoredCandidate]:
    """Both gates at once: score strictly above psi AND among the k best.

    Descending by score; exact ties go to the lower stream index, then to
    earlier submission order.
    """
    eligible = [c for c in candidates if c.score > psi]
    eligible.sort(key=lambda c: (-c.score, c.stream_index))
    return eligible[: max(k, 0)]


# -------------------------------------------------------------- insertion ---


class HisInserter:
    """Accumulates relabeled candidates and flushes them through score/select
    into the replay buffer every ``insert_every`` episodes.

    Scoring runs on the bundle's flat arrays; only selected winners are
    materialized into transition objects.  After a flush,
    ``last_selected_trajectories`` holds the winner episodes (or, for
    per-transition granularity, the distinct source episodes of the winning
    transitions) so the caller can count successes or feed goal relabeling.
    """

    def __init__(self, config: HindsightConfig, env: Env):
        self.cfg = config
        self.env = env
        self.pending: list[StreamBundle] = []
        self.last_selected_trajectories: list[Trajectory] = []
        self.last_selected_transitions: list[Transition] = []

    def his_insert(self, buffer: ReplayBuffer, bundle: StreamBundle,
                   learner, episode_index: int) -> int:
        """Returns the number of selected units (episodes or transitions)
        inserted this call; 0 on non-flush episodes."""
        self.last_selected_trajectories = []
        self.last_selected_transitions = []
        if self.cfg.num_parallel > 0:
            self.pending.append(bundle)
        if (episode_index + 1) % self.cfg.insert_every != 0:
            return 0
        candidates = self._collect_candidates(learner)
        self.pending = []
        if not candidates:
            return 0
        chosen = select(candidates, self.cfg.threshold, self.cfg.cap)
        traj_cache: dict[tuple[int, int], Trajectory] = {}
        for cand in chosen:
            b, m = cand.payload[0], cand.payload[1]
            key = (id(b), m)
            if key not in traj_cache:
                traj_cache[key] = relabel(self.env, b, m)
            traj = traj_cache[key]
            if self.cfg.granularity == Granularity.EPISODE:
                for tr in traj.transitions:
                    buffer.insert(tr)
                self.last_selected_trajectories.append(traj)
            else:
                tr = traj.transitions[cand.payload[2]]
                buffer.insert(tr)
                self.last_selected_transitions.append(tr)
        if self.cfg.granularity == Granularity.TRANSITION:
            self.last_selected_trajectories = list(traj_cache.values())
        return len(chosen)

    # scoring over raw arrays; equivalence with score() is test-enforced
    def _collect_candidates(self, learner) -> list[ScoredCandidate]:
        crit = self.cfg.criterion
        if crit in (Criterion.TD_PER_TRANSITION, Criterion.TD_PER_EPISODE) \
                and learner is None:
            raise PreconditionError(f"{crit.value} needs an initialized learner")
        out: list[ScoredCandidate] = []
        for b in self.pending:
            for m in range(b.num_streams):
                row = m + 1
                end = int(b.end_step[row])
                if end < 1:
                    continue
                if crit in (Criterion.REWARD_PER_TRANSITION,
                            Criterion.REWARD_PER_EPISODE):
                    vals = self._rewards(b, row, end)
                    if crit == Criterion.REWARD_PER_EPISODE:
                        out.append(ScoredCandidate((b, m), float(np.sum(vals)), crit, m))
                    else:
                        out.extend(ScoredCandidate((b, m, t), float(vals[t]), crit, m)
                                   for t in range(end))
                elif crit in (Criterion.TD_PER_TRANSITION, Criterion.TD_PER_EPISODE):
                    deltas = np.abs(self._tds(b, row, end, learner))
                    if crit == Criterion.TD_PER_EPISODE:
                        out.append(ScoredCandidate((b, m), float(np.sum(deltas)), crit, m))
                    else:
                        out.extend(ScoredCandidate((b, m, t), float(deltas[t]), crit, m)
                                   for t in range(end))
                else:
                    dx = float(b.virt_hist[row, end, 0] - b.virt_hist[row, 0, 0])
                    dy = float(b.virt_hist[row, end, 1] - b.virt_hist[row, 0, 1])
                    disp = float(np.sqrt(dx * dx + dy * dy))
                    out.append(ScoredCandidate((b, m), disp, crit, m))
        return out

    def _rewards(self, b: StreamBundle, row: int, end: int) -> np.ndarray:
        tc = int(b.contact[row])
        times = np.arange(end + 1)
        modes = np.where((tc >= 0) & (times > tc), 1, 0)
        return self.env.rewards_from_arrays(
            b.virt_hist[row, : end + 1], modes, b.goal)

    def _tds(self, b: StreamBundle, row: int, end: int, learner) -> np.ndarray:
        rew = self._rewards(b, row, end)
        goal_cols = () if b.goal is None else (np.tile(b.goal, (end + 1, 1)),)
        flat = np.concatenate(
            [b.reals[: end + 1], b.virt_hist[row, : end + 1], *goal_cols], axis=1)
        done = np.zeros(end)
        if not b.alive[row] and b.terminal[row] == int(Terminal.ENV_DONE):
            done[end - 1] = 1.0
        return learner.td_error_batch(
            flat[:end], b.actions[:end], rew, flat[1: end + 1], done)


def his_insert(inserter: HisInserter, buffer: ReplayBuffer,
               bundle: StreamBundle, learner, episode_index: int) -> int:
    return inserter.his_insert(buffer, bundle, learner, episode_index)


# -------------------------------------------------------------------- HER ---


def her_relabel(traj: Trajectory, n_sampled_goal: int, strategy: str,
                rng: np.random.Generator, env: Env) -> list[Transition]:
    """Future-strategy goal relabeling: each transition spawns
    ``n_sampled_goal`` copies whose goal is the object position achieved at a
    uniformly drawn strictly later state of the same episode."""
    if not env.spec.goal_conditioned:
        raise ConfigError(f"{env.spec.env_id} has no goals to relabel")
    if strategy != "future":
        raise ConfigError(f"unsupported goal selection strategy {strategy!r}")
    if n_sampled_goal < 1:
        raise ConfigError("n_sampled_goal must be >= 1")
    states = traj.states()
    achieved = [env.achieved_goal(s.virt.state) for s in states]
    length = len(traj)
    out: list[Transition] = []
    for idx, tr in enumerate(traj.transitions):
        for _ in range(n_sampled_goal):
            t_future = int(rng.integers(idx + 1, length + 1))
            g = achieved[t_future]
            s = tr.state.with_goal(g)
            s_next = tr.next_state.with_goal(g)
            r = env.reward(s, tr.action, s_next)
            prov = (Provenance.HIS_HER if tr.provenance == Provenance.HIS
                    else Provenance.HER)
            out.append(Transition(
                state=s, action=tr.action, reward=r, next_state=s_next,
                terminal=tr.terminal, provenance=prov))
    return out
