"""Planar manipulation tasks: push a box to a goal, or shoot a puck at a
goal outside the gripper's workspace.

Both tasks share a point gripper driven by a proportional controller with a
per-step speed cap.  Episodes have fixed length; the object sits still (its
recorded sequence is a constant pose) until the gripper first touches it.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..core import HybridState, RecordedDB
from ..kernels import push_advance, slide_advance
from .base import Env, EnvSpec


class _GripperEnv(Env):
    """Common d_r=2 proportional-control gripper in a box workspace."""

    def initial_real(self) -> np.ndarray:
        return np.array(self.grip_start)

    def step_real(self, real, action):
        a = self.clip_action(action)
        gx, gy = float(real[0]), float(real[1])
        tx = min(max(gx + float(a[0]) * self.reach_gain, self.ws_x[0]), self.ws_x[1])
        ty = min(max(gy + float(a[1]) * self.reach_gain, self.ws_y[0]), self.ws_y[1])
        sx = (tx - gx) * self.kp
        sy = (ty - gy) * self.kp
        step = np.sqrt(sx * sx + sy * sy)
        if step > self.speed_cap:
            scale = self.speed_cap / step
            sx *= scale
            sy *= scale
        return np.array([gx + sx, gy + sy])

    def sample_source(self, db: Optional[RecordedDB], rng):
        del db  # objects are sampled fresh; the db exists only for recording
        pose = self._sample_object(rng)
        entry = np.broadcast_to(pose, (self.T + 1, self.spec.d_v))
        self._draw_counter += 1
        return self._draw_counter - 1, entry

    def achieved_goal(self, virt_state: np.ndarray) -> np.ndarray:
        return np.asarray(virt_state[:2], dtype=np.float64).copy()

    def reward(self, state: HybridState, action, next_state: HybridState) -> float:
        goal = next_state.goal
        obj = next_state.virt.state
        dx = obj[0] - goal[0]
        dy = obj[1] - goal[1]
        d = np.sqrt(dx * dx + dy * dy)
        return 1.0 if d <= self.success_radius else 0.0

    def rewards_from_arrays(self, virt_states, modes, goal):
        del modes  # proximity reward; replay/simulated makes no difference
        dx = virt_states[1:, 0] - goal[0]
        dy = virt_states[1:, 1] - goal[1]
        d = np.sqrt(dx * dx + dy * dy)
        return (d <= self.success_radius).astype(np.float64)

    def record_entries(self, n: int, rng) -> np.ndarray:
        poses = np.stack([self._sample_object(rng) for _ in range(n)])
        return np.repeat(poses[:, None, :], self.T + 1, axis=1)


class PushBoxEnv(_GripperEnv):
    _OVERRIDABLE = frozenset({
        "T", "dt", "reach_gain", "kp", "speed_cap", "box_half", "grip_half",
        "success_radius", "delta_move",
    })

    def __init__(self):
        self.T = 50
        self.dt = 0.1
        self.grip_start = (0.5, 0.15)
        self.ws_x = (0.0, 1.0)
        self.ws_y = (0.0, 1.0)
        self.reach_gain = 0.15
        self.kp = 0.5
        self.speed_cap = 0.04
        self.box_half = 0.04     # box half-side
        self.grip_half = 0.03    # gripper treated as a square of this half-side
        self.box_init_x = (0.35, 0.65)
        self.box_init_y = (0.35, 0.65)
        self.goal_x = (0.25, 0.75)
        self.goal_y = (0.25, 0.75)
        self.success_radius = 0.05
        self.delta_move = 1e-3
        self._draw_counter = 0
        self._rebuild_spec()

    def _rebuild_spec(self):
        self.spec = EnvSpec(
            env_id="pushbox2d", d_r=2, d_v=2, d_a=2, d_g=2, T=self.T,
            action_low=np.array([-1.0, -1.0]), action_high=np.array([1.0, 1.0]),
            goal_conditioned=True, success_radius=self.success_radius,
            dt=self.dt)

    def _sample_object(self, rng) -> np.ndarray:
        return np.array([rng.uniform(*self.box_init_x),
                         rng.uniform(*self.box_init_y)])

    def sample_goal(self, rng):
        return np.array([rng.uniform(*self.goal_x), rng.uniform(*self.goal_y)])

    def advance(self, virt, modes, rec_next, real_next):
        return push_advance(
            virt, modes, rec_next, float(real_next[0]), float(real_next[1]),
            self.box_half, self.grip_half,
            self.box_half, 1.0 - self.box_half)


class SlideDiskEnv(_GripperEnv):
    _OVERRIDABLE = frozenset({
        "T", "dt", "reach_gain", "kp", "speed_cap", "puck_radius", "grip_radius",
        "friction", "success_radius", "delta_move",
    })

    def __init__(self):
        self.T = 50
        self.dt = 0.1
        self.grip_start = (0.5, 0.25)
        # gripper stays in the lower band; goals live above it, out of reach
        self.ws_x = (0.05, 0.95)
        self.ws_y = (0.05, 0.45)
        self.reach_gain = 0.2
        self.kp = 0.6
        self.speed_cap = 0.05
        self.puck_radius = 0.035
        self.grip_radius = 0.03
        self.friction = 0.15     # speed lost per second while coasting
        self.puck_init_x = (0.4, 0.6)
        self.puck_init_y = (0.2, 0.3)
        self.goal_x = (0.2, 0.8)
        self.goal_y = (0.55, 0.9)
        self.success_radius = 0.05
        self.delta_move = 1e-3
        self._draw_counter = 0
        self._rebuild_spec()

    def _rebuild_spec(self):
        self.spec = EnvSpec(
            env_id="slidedisk2d", d_r=2, d_v=4, d_a=2, d_g=2, T=self.T,
            action_low=np.array([-1.0, -1.0]), action_high=np.array([1.0, 1.0]),
            goal_conditioned=True, success_radius=self.success_radius,
            dt=self.dt)

    def _sample_object(self, rng) -> np.ndarray:
        return np.array([rng.uniform(*self.puck_init_x),
                         rng.uniform(*self.puck_init_y), 0.0, 0.0])

    def sample_goal(self, rng):
        return np.array([rng.uniform(*self.goal_x), rng.uniform(*self.goal_y)])

    def advance(self, virt, modes, rec_next, real_next):
        return slide_advance(
            virt, modes, rec_next, float(real_next[0]), float(real_next[1]),
            self.puck_radius, self.grip_radius, self.friction, self.dt,
            self.puck_radius, 1.0 - self.puck_radius)
