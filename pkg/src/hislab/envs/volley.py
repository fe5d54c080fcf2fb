"""Interception task: keep a 1-DoF paddle under a ballistic ball and strike
it so the rebound lands on a target spot.

The paddle slides vertically at x=0 behind two cascaded first-order lags (a
sluggish actuator standing in for hard-to-model plant dynamics).  Balls are
launched from the right with leftward velocity; the recorded database holds
their free flight.  An episode ends at the strike, when the ball drops to the
floor or drifts past the paddle, or at the step cap.  Reward 1 is given on
the strike step only, when the analytically propagated landing point of the
rebound is within ``success_radius`` of ``target_x``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..core import ConfigError, HybridState, Mode, RecordedDB
from ..kernels import EV_NONE, volley_advance
from .base import Env, EnvSpec


class VolleyEnv(Env):
    uses_db = True
    streams_end_on_any_event = True

    _OVERRIDABLE = frozenset({
        "T", "dt", "gravity", "tau", "gain", "pad_halflen", "ball_radius",
        "restitution", "target_x", "success_radius", "delta_move",
        "pad_y_min", "pad_y_max", "hittable_lo", "hittable_hi",
    })

    def __init__(self):
        self.T = 60
        self.dt = 0.05
        self.gravity = 0.5
        # paddle: vertical position y in [pad_y_min, pad_y_max] at x = pad_x
        self.pad_x = 0.0
        self.pad_halflen = 0.08
        self.pad_y_min = 0.0
        self.pad_y_max = 0.5
        self.tau = 0.1          # lag time constant of each first-order stage
        self.gain = 0.8         # commanded velocity per unit action
        self.ball_radius = 0.04
        self.restitution = 0.8
        self.target_x = -0.7
        self.success_radius = 0.04
        self.delta_move = 1e-3
        # launch distribution (rightward position, leftward velocity)
        self.launch_x = (0.9, 1.1)
        self.launch_y = (0.25, 0.45)
        self.launch_vx = (-0.75, -0.55)
        self.launch_vy = (0.1, 0.4)
        # recording keeps only balls that cross the paddle column inside this
        # reachable height band
        self.hittable_lo = 0.05
        self.hittable_hi = 0.45
        self._rebuild_spec()

    def _rebuild_spec(self):
        self.spec = EnvSpec(
            env_id="volley2d", d_r=3, d_v=4, d_a=1, d_g=0, T=self.T,
            action_low=np.array([-1.0]), action_high=np.array([1.0]),
            goal_conditioned=False, success_radius=self.success_radius,
            dt=self.dt)

    # -- real part ---------------------------------------------------------

    def initial_real(self) -> np.ndarray:
        return np.array([0.25, 0.0, 0.0])

    def step_real(self, real, action):
        a = self.clip_action(action)
        u = float(a[0]) * self.gain
        y, v1, v2 = float(real[0]), float(real[1]), float(real[2])
        k = self.dt / self.tau
        # Jacobi update: the second stage filters the first stage's previous
        # output, which is what the closed-form step response assumes
        v1n = v1 + (u - v1) * k
        v2n = v2 + (v1 - v2) * k
        yn = min(max(y + v2n * self.dt, self.pad_y_min), self.pad_y_max)
        return np.array([yn, v1n, v2n])

    # -- virtual part ------------------------------------------------------

    def sample_source(self, db: Optional[RecordedDB], rng):
        if db is None or db.size < 1:
            raise ConfigError("volley2d replays recorded balls; db is empty")
        idx = int(rng.integers(0, db.size))
        return idx, db.entries[idx]

    def advance(self, virt, modes, rec_next, real_next):
        return volley_advance(
            virt, modes, rec_next, self.pad_x, float(real_next[0]),
            float(real_next[2]), self.pad_halflen, self.ball_radius,
            self.restitution, self.gravity, self.dt)

    def stream_ends_on_event(self, event: int) -> bool:
        return event != EV_NONE

    # -- reward ------------------------------------------------------------

    def landing_x(self, virt_state: np.ndarray) -> float:
        """Touchdown x of a ballistic flight started from ``virt_state``."""
        x, y, vx, vy = (float(virt_state[0]), float(virt_state[1]),
                        float(virt_state[2]), float(virt_state[3]))
        g = self.gravity
        t_land = (vy + np.sqrt(max(vy * vy + 2.0 * g * max(y, 0.0), 0.0))) / g
        return x + vx * t_land

    def reward(self, state: HybridState, action, next_state: HybridState) -> float:
        struck = (state.virt.mode == Mode.REPLAY
                  and next_state.virt.mode == Mode.SIMULATED)
        if not struck:
            return 0.0
        err = abs(self.landing_x(next_state.virt.state) - self.target_x)
        return 1.0 if err <= self.success_radius else 0.0

    def rewards_from_arrays(self, virt_states, modes, goal=None):
        length = len(virt_states) - 1
        r = np.zeros(length)
        switches = np.flatnonzero((modes[:-1] == 0) & (modes[1:] == 1))
        for t in switches:
            err = abs(self.landing_x(virt_states[t + 1]) - self.target_x)
            r[t] = 1.0 if err <= self.success_radius else 0.0
        return r

    # -- recording ---------------------------------------------------------

    def _integrate_launch(self, launch: np.ndarray) -> np.ndarray:
        rows = np.empty((self.T + 1, 4))
        x, y, vx, vy = launch
        for t in range(self.T + 1):
            rows[t, 0], rows[t, 1], rows[t, 2], rows[t, 3] = x, y, vx, vy
            x = x + vx * self.dt
            y = y + vy * self.dt
            vy = vy - self.gravity * self.dt
        return rows

    def _crosses_paddle_column(self, rows: np.ndarray) -> bool:
        in_col = np.abs(rows[:, 0] - self.pad_x) <= self.pad_halflen
        band = (rows[:, 1] >= self.hittable_lo) & (rows[:, 1] <= self.hittable_hi)
        return bool(np.any(in_col & band))

    def record_entries(self, n: int, rng) -> np.ndarray:
        """Launch balls until n of them pass through the paddle column at a
        reachable height; unreturnable launches are discarded."""
        kept = []
        while len(kept) < n:
            launch = np.array([
                rng.uniform(*self.launch_x),
                rng.uniform(*self.launch_y),
                rng.uniform(*self.launch_vx),
                rng.uniform(*self.launch_vy),
            ])
            rows = self._integrate_launch(launch)
            if self._crosses_paddle_column(rows):
                kept.append(rows)
        return np.stack(kept)
