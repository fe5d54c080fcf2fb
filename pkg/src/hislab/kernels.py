"""Batched virtual-stream dynamics kernels.

Advancing many parallel virtual objects one timestep is the hot loop of a
rollout, so each environment's per-step update exists twice: a numba-compiled
loop and a vectorized numpy version.  The two are kept bitwise identical
(same elementwise expressions, same evaluation order, no reductions) so the
backend choice never changes results, only speed.

Backend selection, checked once at import:
  HIS_LAB_BACKEND=numba   require numba (raise if missing)
  HIS_LAB_BACKEND=numpy   force the plain numpy path
  unset                   numba when importable, else numpy

Event codes returned per stream: 0 no event, 1 contact this step,
2 hit the ground, 3 passed out of reach.  Mode codes: 0 replay, 1 simulated.
"""

from __future__ import annotations

import os

import numpy as np

from .core import ConfigError

EV_NONE = 0
EV_CONTACT = 1
EV_GROUND = 2
EV_PASSED = 3

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------- volley ----


def volley_advance_numpy(virt, mode, rec_next, pad_x, pad_y, pad_v,
                         halflen, r_b, e, g, dt):
    """One step for M volley balls.

    Replay streams take their candidate next state from ``rec_next`` and test
    it against the paddle's next pose; on contact the vertical velocity is
    reflected with restitution ``e`` plus the paddle's own velocity.
    Simulated streams fly ballistically.
    """
    x, y, vx, vy = virt[:, 0], virt[:, 1], virt[:, 2], virt[:, 3]
    sim = mode == 1

    # candidate for replay streams
    cx, cy, cvx, cvy = rec_next[:, 0], rec_next[:, 1], rec_next[:, 2], rec_next[:, 3]
    hit = (np.abs(cx - pad_x) <= halflen) & (np.abs(cy - pad_y) <= r_b)
    struck_vy = -e * cvy + (1.0 + e) * pad_v

    # ballistic flight for simulated streams
    sx = x + vx * dt
    sy = y + vy * dt
    svy = vy - g * dt

    nx = np.where(sim, sx, cx)
    ny = np.where(sim, sy, cy)
    nvx = np.where(sim, vx, cvx)
    nvy = np.where(sim, svy, np.where(hit, struck_vy, cvy))

    event = np.zeros(virt.shape[0], dtype=np.int64)
    grounded = ny <= 0.0
    passed = nx < pad_x - halflen - r_b
    event = np.where(grounded, EV_GROUND, event)
    event = np.where(passed & ~grounded, EV_PASSED, event)
    event = np.where(~sim & hit, EV_CONTACT, event)

    out = np.empty_like(virt)
    out[:, 0], out[:, 1], out[:, 2], out[:, 3] = nx, ny, nvx, nvy
    new_mode = np.where(~sim & hit, 1, mode).astype(mode.dtype)
    return out, new_mode, event


@njit(cache=True)
def _volley_advance_numba(virt, mode, rec_next, pad_x, pad_y, pad_v,
                          halflen, r_b, e, g, dt):
    m = virt.shape[0]
    out = np.empty_like(virt)
    new_mode = mode.copy()
    event = np.zeros(m, dtype=np.int64)
    for i in range(m):
        if mode[i] == 1:
            nx = virt[i, 0] + virt[i, 2] * dt
            ny = virt[i, 1] + virt[i, 3] * dt
            nvx = virt[i, 2]
            nvy = virt[i, 3] - g * dt
            hit = False
        else:
            cx = rec_next[i, 0]
            cy = rec_next[i, 1]
            cvx = rec_next[i, 2]
            cvy = rec_next[i, 3]
            hit = abs(cx - pad_x) <= halflen and abs(cy - pad_y) <= r_b
            nx = cx
            ny = cy
            nvx = cvx
            if hit:
                nvy = -e * cvy + (1.0 + e) * pad_v
            else:
                nvy = cvy
        out[i, 0] = nx
        out[i, 1] = ny
        out[i, 2] = nvx
        out[i, 3] = nvy
        if ny <= 0.0:
            event[i] = EV_GROUND
        elif nx < pad_x - halflen - r_b:
            event[i] = EV_PASSED
        if mode[i] == 0 and hit:
            event[i] = EV_CONTACT
            new_mode[i] = 1
    return out, new_mode, event


def volley_advance_numba(virt, mode, rec_next, pad_x, pad_y, pad_v,
                         halflen, r_b, e, g, dt):
    return _volley_advance_numba(
        np.ascontiguousarray(virt), np.ascontiguousarray(mode),
        np.ascontiguousarray(rec_next),
        float(pad_x), float(pad_y), float(pad_v),
        float(halflen), float(r_b), float(e), float(g), float(dt))


# --------------------------------------------------------------- pushbox ----


def push_advance_numpy(virt, mode, rec_next, grip_x, grip_y,
                       h_b, r_g, lo, hi):
    """One step for M boxes pushed by a square gripper.

    A box only moves while the gripper overlaps it; the overlap is resolved
    along the axis of least penetration.  Kinematic, no box velocity.
    """
    sim = mode == 1
    bx = np.where(sim, virt[:, 0], rec_next[:, 0])
    by = np.where(sim, virt[:, 1], rec_next[:, 1])

    reach = h_b + r_g
    dx = bx - grip_x
    dy = by - grip_y
    ox = reach - np.abs(dx)
    oy = reach - np.abs(dy)
    overlap = (ox > 0.0) & (oy > 0.0)
    sgn_x = np.where(dx >= 0.0, 1.0, -1.0)
    sgn_y = np.where(dy >= 0.0, 1.0, -1.0)
    push_x = ox <= oy
    nx = np.where(overlap & push_x, bx + sgn_x * ox, bx)
    ny = np.where(overlap & ~push_x, by + sgn_y * oy, by)
    nx = np.minimum(np.maximum(nx, lo), hi)
    ny = np.minimum(np.maximum(ny, lo), hi)

    out = np.empty_like(virt)
    out[:, 0], out[:, 1] = nx, ny
    event = np.where(overlap, EV_CONTACT, EV_NONE).astype(np.int64)
    new_mode = np.where(overlap, 1, mode).astype(mode.dtype)
    return out, new_mode, event


@njit(cache=True)
def _push_advance_numba(virt, mode, rec_next, grip_x, grip_y,
                        h_b, r_g, lo, hi):
    m = virt.shape[0]
    out = np.empty_like(virt)
    new_mode = mode.copy()
    event = np.zeros(m, dtype=np.int64)
    reach = h_b + r_g
    for i in range(m):
        if mode[i] == 1:
            bx = virt[i, 0]
            by = virt[i, 1]
        else:
            bx = rec_next[i, 0]
            by = rec_next[i, 1]
        dx = bx - grip_x
        dy = by - grip_y
        ox = reach - abs(dx)
        oy = reach - abs(dy)
        if ox > 0.0 and oy > 0.0:
            if ox <= oy:
                if dx >= 0.0:
                    bx = bx + ox
                else:
                    bx = bx - ox
            else:
                if dy >= 0.0:
                    by = by + oy
                else:
                    by = by - oy
            event[i] = EV_CONTACT
            new_mode[i] = 1
        bx = min(max(bx, lo), hi)
        by = min(max(by, lo), hi)
        out[i, 0] = bx
        out[i, 1] = by
    return out, new_mode, event


def push_advance_numba(virt, mode, rec_next, grip_x, grip_y, h_b, r_g, lo, hi):
    return _push_advance_numba(
        np.ascontiguousarray(virt), np.ascontiguousarray(mode),
        np.ascontiguousarray(rec_next),
        float(grip_x), float(grip_y),
        float(h_b), float(r_g), float(lo), float(hi))


# -------------------------------------------------------------- slidedisk ---


def slide_advance_numpy(virt, mode, rec_next, grip_x, grip_y,
                        r_p, r_g, mu, dt, lo, hi):
    """One step for M pucks struck by a round gripper.

    Simulated pucks coast with Coulomb friction; a gripper overlap is
    resolved along the centre line and sets the puck velocity to the
    separation speed.  Walls stop the puck dead.
    """
    sim = mode == 1
    px = np.where(sim, virt[:, 0] + virt[:, 2] * dt, rec_next[:, 0])
    py = np.where(sim, virt[:, 1] + virt[:, 3] * dt, rec_next[:, 1])
    pvx = np.where(sim, virt[:, 2], rec_next[:, 2])
    pvy = np.where(sim, virt[:, 3], rec_next[:, 3])

    speed = np.sqrt(pvx * pvx + pvy * pvy)
    safe_speed = np.where(speed > 0.0, speed, 1.0)
    scale = np.where(speed > 0.0,
                     np.maximum(speed - mu * dt, 0.0) / safe_speed, 0.0)
    pvx = np.where(sim, pvx * scale, pvx)
    pvy = np.where(sim, pvy * scale, pvy)

    dx = px - grip_x
    dy = py - grip_y
    dist = np.sqrt(dx * dx + dy * dy)
    reach = r_p + r_g
    touching = dist < reach
    safe_dist = np.where(dist > 0.0, dist, 1.0)
    nx_c = np.where(dist > 0.0, dx / safe_dist, 1.0)
    ny_c = np.where(dist > 0.0, dy / safe_dist, 0.0)
    depth = reach - dist
    sep = depth / dt
    px = np.where(touching, px + nx_c * depth, px)
    py = np.where(touching, py + ny_c * depth, py)
    pvx = np.where(touching, nx_c * sep, pvx)
    pvy = np.where(touching, ny_c * sep, pvy)

    hit_x = (px < lo) | (px > hi)
    hit_y = (py < lo) | (py > hi)
    px = np.minimum(np.maximum(px, lo), hi)
    py = np.minimum(np.maximum(py, lo), hi)
    stopped = hit_x | hit_y
    pvx = np.where(stopped, 0.0, pvx)
    pvy = np.where(stopped, 0.0, pvy)

    out = np.empty_like(virt)
    out[:, 0], out[:, 1], out[:, 2], out[:, 3] = px, py, pvx, pvy
    event = np.where(touching, EV_CONTACT, EV_NONE).astype(np.int64)
    new_mode = np.where(touching, 1, mode).astype(mode.dtype)
    return out, new_mode, event


@njit(cache=True)
def _slide_advance_numba(virt, mode, rec_next, grip_x, grip_y,
                         r_p, r_g, mu, dt, lo, hi):
    m = virt.shape[0]
    out = np.empty_like(virt)
    new_mode = mode.copy()
    event = np.zeros(m, dtype=np.int64)
    reach = r_p + r_g
    for i in range(m):
        if mode[i] == 1:
            px = virt[i, 0] + virt[i, 2] * dt
            py = virt[i, 1] + virt[i, 3] * dt
            pvx = virt[i, 2]
            pvy = virt[i, 3]
            speed = np.sqrt(pvx * pvx + pvy * pvy)
            if speed > 0.0:
                scale = max(speed - mu * dt, 0.0) / speed
            else:
                scale = 0.0
            pvx = pvx * scale
            pvy = pvy * scale
        else:
            px = rec_next[i, 0]
            py = rec_next[i, 1]
            pvx = rec_next[i, 2]
            pvy = rec_next[i, 3]

        dx = px - grip_x
        dy = py - grip_y
        dist = np.sqrt(dx * dx + dy * dy)
        if dist < reach:
            if dist > 0.0:
                nx_c = dx / dist
                ny_c = dy / dist
            else:
                nx_c = 1.0
                ny_c = 0.0
            depth = reach - dist
            px = px + nx_c * depth
            py = py + ny_c * depth
            pvx = nx_c * (depth / dt)
            pvy = ny_c * (depth / dt)
            event[i] = EV_CONTACT
            new_mode[i] = 1

        stopped = px < lo or px > hi or py < lo or py > hi
        px = min(max(px, lo), hi)
        py = min(max(py, lo), hi)
        if stopped:
            pvx = 0.0
            pvy = 0.0
        out[i, 0] = px
        out[i, 1] = py
        out[i, 2] = pvx
        out[i, 3] = pvy
    return out, new_mode, event


def slide_advance_numba(virt, mode, rec_next, grip_x, grip_y,
                        r_p, r_g, mu, dt, lo, hi):
    return _slide_advance_numba(
        np.ascontiguousarray(virt), np.ascontiguousarray(mode),
        np.ascontiguousarray(rec_next),
        float(grip_x), float(grip_y),
        float(r_p), float(r_g), float(mu), float(dt), float(lo), float(hi))


# ------------------------------------------------------------- selection ----


def _resolve_backend() -> str:
    want = os.environ.get("HIS_LAB_BACKEND", "").strip().lower()
    if want not in ("", "numba", "numpy"):
        raise ConfigError(
            f"HIS_LAB_BACKEND must be 'numba' or 'numpy', got {want!r}")
    if want == "numba" and not _HAVE_NUMBA:
        raise ConfigError("HIS_LAB_BACKEND=numba but numba is not installed")
    if want == "":
        want = "numba" if _HAVE_NUMBA else "numpy"
    return want


BACKEND = _resolve_backend()

if BACKEND == "numba":
    volley_advance = volley_advance_numba
    push_advance = push_advance_numba
    slide_advance = slide_advance_numba
else:
    volley_advance = volley_advance_numpy
    push_advance = push_advance_numpy
    slide_advance = slide_advance_numpy
