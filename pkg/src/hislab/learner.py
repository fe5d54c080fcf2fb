"""Off-policy actor-critic learner (SAC-style), implemented directly on
numpy arrays.

Gradients are hand-derived: the squashed-Gaussian policy is trained by the
reparameterization path through the twin Q networks (which requires Q-input
gradients), the critics regress a shared soft target computed from polyak-
averaged target copies, and the entropy coefficient can be tuned against a
fixed target entropy.  Everything is float64 and deterministic given the rng
arguments; there is no hidden state beyond the parameters and optimizer
moments.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from .core import (
    ConfigError,
    PreconditionError,
    ReplayBuffer,
    StructuralError,
    Terminal,
    Transition,
    compose_observation,
)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class LearnerConfig:
    gamma: float = 0.99
    learning_rate: float = 3e-4
    batch_size: int = 256
    num_layers: int = 2
    num_hidden: int = 64
    gradient_steps: int = 1
    train_freq: int = 1
    train_freq_unit: str = "step"          # "step" or "episode"
    buffer_size: int = 1_000_000
    learning_starts: int = 100
    ent_coef: Union[float, str] = "auto"   # fixed value, or "auto"
    polyak: float = 0.005
    activation: str = "tanh"

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.num_layers < 1 or self.num_hidden < 1:
            raise ConfigError("network needs at least one hidden layer/unit")
        if self.train_freq_unit not in ("step", "episode"):
            raise ConfigError("train_freq_unit must be 'step' or 'episode'")
        if self.train_freq < 1 or self.gradient_steps < 0:
            raise ConfigError("train_freq >= 1 and gradient_steps >= 0 required")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError("activation must be 'tanh' or 'relu'")
        if isinstance(self.ent_coef, str):
            if self.ent_coef != "auto":
                raise ConfigError("ent_coef must be a number or 'auto'")
        elif float(self.ent_coef) < 0.0:
            raise ConfigError("fixed ent_coef must be >= 0")


class DenseNet:
    """Plain MLP with linear output; caches activations for backprop."""

    def __init__(self, sizes, activation="tanh", rng=None, out_scale=1.0):
        self.sizes = list(sizes)
        self.activation = activation
        self.W = []
        self.b = []
        for i in range(len(self.sizes) - 1):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            s = 1.0 / np.sqrt(fan_in)
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.uniform(-s, s, size=(fan_in, fan_out))
            if i == len(self.sizes) - 2:
                w = w * out_scale
            self.W.append(w)
            self.b.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.W, self.b):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "DenseNet":
        other = DenseNet(self.sizes, self.activation)
        other.W = [w.copy() for w in self.W]
        other.b = [b.copy() for b in self.b]
        return other

    def _act(self, z):
        if self.activation == "tanh":
            return np.tanh(z)
        return np.maximum(z, 0.0)

    def _act_deriv(self, a):
        # derivative expressed through the post-activation value
        if self.activation == "tanh":
            return 1.0 - a * a
        return (a > 0.0).astype(np.float64)

    def forward(self, x: np.ndarray):
        """Returns (output, cache); x is (B, n_in)."""
        h = [x]
        a = x
        last = len(self.W) - 1
        for i, (w, b) in enumerate(zip(self.W, self.b)):
            z = a @ w + b
            a = z if i == last else self._act(z)
            h.append(a)
        return a, h

    def backward(self, h, grad_out):
        """Backprop grad_out (B, n_out) through cached forward pass.

        Returns (param grads in self.params order, grad w.r.t. input).
        """
        last = len(self.W) - 1
        grads: list[Optional[np.ndarray]] = [None] * (2 * len(self.W))
        g = grad_out
        for i in range(last, -1, -1):
            gz = g if i == last else g * self._act_deriv(h[i + 1])
            grads[2 * i] = h[i].T @ gz
            grads[2 * i + 1] = gz.sum(axis=0)
            g = gz @ self.W[i].T
        return grads, g


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def polyak(targets: list[np.ndarray], online: list[np.ndarray], tau: float) -> None:
    """target <- (1-tau)*target + tau*online, in place."""
    if len(targets) != len(online):
        raise StructuralError("parameter list lengths differ")
    for t, o in zip(targets, online):
        if t.shape != o.shape:
            raise StructuralError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o


def squash_log_prob(z: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """log-density of a = tanh(z) where z ~ N(mean, exp(log_std)^2).

    Uses the numerically safe form log(1 - tanh(z)^2) =
    2*(log 2 - z - softplus(-2z)).
    """
    std = np.exp(log_std)
    eps = (z - mean) / std
    gauss = -0.5 * eps * eps - log_std - _HALF_LOG_2PI
    squash = 2.0 * (np.log(2.0) - z - np.logaddexp(0.0, -2.0 * z))
    return np.sum(gauss - squash, axis=-1)


class SacLearner:
    """Twin-Q soft actor-critic over flat observations."""

    def __init__(self, d_obs: int, d_a: int, config: LearnerConfig,
                 rng: Optional[np.random.Generator] = None):
        self.d_obs = d_obs
        self.d_a = d_a
        self.cfg = config
        hid = [config.num_hidden] * config.num_layers
        act = config.activation
        self.policy = DenseNet([d_obs] + hid + [2 * d_a], act, rng, out_scale=1e-2)
        self.q1 = DenseNet([d_obs + d_a] + hid + [1], act, rng)
        self.q2 = DenseNet([d_obs + d_a] + hid + [1], act, rng)
        self.tq1 = self.q1.copy()
        self.tq2 = self.q2.copy()
        lr = config.learning_rate
        self.opt_policy = Adam(self.policy.params, lr)
        self.opt_q1 = Adam(self.q1.params, lr)
        self.opt_q2 = Adam(self.q2.params, lr)
        self.auto_alpha = config.ent_coef == "auto"
        if self.auto_alpha:
            self.log_alpha = np.zeros(1)
            self.target_entropy = -float(d_a)
            self.opt_alpha = Adam([self.log_alpha], lr)
        else:
            self.log_alpha = None
            self._alpha_fixed = float(config.ent_coef)
        self.updates_done = 0

    @property
    def alpha(self) -> float:
        if self.auto_alpha:
            return float(np.exp(self.log_alpha[0]))
        return self._alpha_fixed

    # -- policy ------------------------------------------------------------

    def _policy_heads(self, obs: np.ndarray):
        out, cache = self.policy.forward(obs)
        mean = out[:, : self.d_a]
        raw = out[:, self.d_a:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        # gradient flows only where the clip is inactive
        std_mask = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(np.float64)
        return mean, log_std, std_mask, cache

    def act(self, obs: np.ndarray, deterministic: bool,
            rng: Optional[np.random.Generator] = None):
        """Single-observation action in (-1,1)^d_a plus its log-probability."""
        obs2 = np.asarray(obs, dtype=np.float64)[None, :]
        mean, log_std, _, _ = self._policy_heads(obs2)
        if deterministic:
            z = mean
        else:
            if rng is None:
                raise PreconditionError("stochastic action needs an rng")
            z = mean + np.exp(log_std) * rng.standard_normal((1, self.d_a))
        action = np.tanh(z)
        logp = squash_log_prob(z, mean, log_std)
        return action[0], float(logp[0])

    # -- TD error (scoring hook) --------------------------------------------

    def td_error_batch(self, obs, action, reward, next_obs, done_env) -> np.ndarray:
        """delta = r + gamma*(1-done_env)*min target-Q(s', mean-action)
        - min online-Q(s, a); entropy plays no part here."""
        mean_n, _, _, _ = self._policy_heads(next_obs)
        a_next = np.tanh(mean_n)
        xin_n = np.concatenate([next_obs, a_next], axis=1)
        tq = np.minimum(self.tq1.forward(xin_n)[0][:, 0],
                        self.tq2.forward(xin_n)[0][:, 0])
        xin = np.concatenate([obs, action], axis=1)
        q = np.minimum(self.q1.forward(xin)[0][:, 0],
                       self.q2.forward(xin)[0][:, 0])
        return reward + self.cfg.gamma * (1.0 - done_env) * tq - q

    def td_error(self, transition: Transition) -> float:
        obs = compose_observation(transition.state)[None, :]
        nxt = compose_observation(transition.next_state)[None, :]
        act = np.asarray(transition.action, dtype=np.float64)[None, :]
        rew = np.array([transition.reward])
        done = np.array([1.0 if transition.terminal == Terminal.ENV_DONE else 0.0])
        return float(self.td_error_batch(obs, act, rew, nxt, done)[0])

    # -- update ------------------------------------------------------------

    def update(self, buffer: ReplayBuffer, rng: np.random.Generator) -> dict:
        """One round of cfg.gradient_steps optimization iterations.

        No-op (empty report) until the buffer holds learning_starts
        transitions.
        """
        if len(buffer) < max(self.cfg.learning_starts, 1):
            return {}
        report = {}
        for _ in range(self.cfg.gradient_steps):
            report = self._update_once(buffer, rng)
        return report

    def _update_once(self, buffer, rng) -> dict:
        cfg = self.cfg
        batch = buffer.sample_arrays(cfg.batch_size, rng)
        obs = batch["obs"]
        action = batch["action"]
        reward = batch["reward"]
        next_obs = batch["next_obs"]
        done = batch["done_env"]
        b = float(len(reward))
        alpha = self.alpha

        # critic target from the target networks and a fresh next action
        mean_n, log_std_n, _, _ = self._policy_heads(next_obs)
        z_n = mean_n + np.exp(log_std_n) * rng.standard_normal(mean_n.shape)
        a_n = np.tanh(z_n)
        logp_n = squash_log_prob(z_n, mean_n, log_std_n)
        xin_n = np.concatenate([next_obs, a_n], axis=1)
        tq_min = np.minimum(self.tq1.forward(xin_n)[0][:, 0],
                            self.tq2.forward(xin_n)[0][:, 0])
        y = reward + cfg.gamma * (1.0 - done) * (tq_min - alpha * logp_n)

        xin = np.concatenate([obs, action], axis=1)
        q1_out, h1 = self.q1.forward(xin)
        q2_out, h2 = self.q2.forward(xin)
        d1 = q1_out[:, 0] - y
        d2 = q2_out[:, 0] - y
        q_loss = 0.5 * float(np.mean(d1 * d1) + np.mean(d2 * d2))
        g1, _ = self.q1.backward(h1, (d1 / b)[:, None])
        g2, _ = self.q2.backward(h2, (d2 / b)[:, None])
        self.opt_q1.step(self.q1.params, g1)
        self.opt_q2.step(self.q2.params, g2)

        # policy through the freshly updated critics
        mean, log_std, std_mask, cache = self._policy_heads(obs)
        std = np.exp(log_std)
        noise = rng.standard_normal(mean.shape)
        z = mean + std * noise
        a_pi = np.tanh(z)
        logp = squash_log_prob(z, mean, log_std)
        xpi = np.concatenate([obs, a_pi], axis=1)
        qp1, hp1 = self.q1.forward(xpi)
        qp2, hp2 = self.q2.forward(xpi)
        q_stack = np.stack([qp1[:, 0], qp2[:, 0]])
        which = np.argmin(q_stack, axis=0)
        q_min = q_stack[which, np.arange(q_stack.shape[1])]
        policy_loss = float(np.mean(alpha * logp - q_min))

        # dq/da for the min head of each sample
        sel1 = (which == 0).astype(np.float64)[:, None]
        _, gx1 = self.q1.backward(hp1, sel1)
        _, gx2 = self.q2.backward(hp2, 1.0 - sel1)
        dq_da = (gx1 + gx2)[:, self.d_obs:]

        # d/dz of (alpha*logp - q_min):  alpha*2a from the squash correction,
        # minus the Q path through a = tanh(z)
        dz = alpha * 2.0 * a_pi - dq_da * (1.0 - a_pi * a_pi)
        g_mean = dz / b
        g_logstd = (dz * std * noise - alpha) / b
        grad_out = np.concatenate([g_mean, g_logstd * std_mask], axis=1)
        gp, _ = self.policy.backward(cache, grad_out)
        self.opt_policy.step(self.policy.params, gp)

        if self.auto_alpha:
            g_la = -float(np.mean(logp + self.target_entropy))
            self.opt_alpha.step([self.log_alpha], [np.array([g_la])])

        polyak(self.tq1.params, self.q1.params, cfg.polyak)
        polyak(self.tq2.params, self.q2.params, cfg.polyak)
        self.updates_done += 1
        return {
            "q_loss": q_loss,
            "policy_loss": policy_loss,
            "entropy_coef": self.alpha,
            "mean_q": float(np.mean(q_min)),
        }


# ------------------------------------------------------------ checkpoints ---

_CKPT_MAGIC = b"HISCKPT1"


def _named_arrays(learner: SacLearner) -> list[tuple[str, np.ndarray]]:
    out = []
    for net_name in ("policy", "q1", "q2", "tq1", "tq2"):
        net = getattr(learner, net_name)
        for i, p in enumerate(net.params):
            out.append((f"{net_name}.{i}", p))
    for opt_name in ("opt_policy", "opt_q1", "opt_q2"):
        opt = getattr(learner, opt_name)
        for i, m in enumerate(opt.m):
            out.append((f"{opt_name}.m.{i}", m))
        for i, v in enumerate(opt.v):
            out.append((f"{opt_name}.v.{i}", v))
    if learner.auto_alpha:
        out.append(("log_alpha", learner.log_alpha))
        out.append(("opt_alpha.m.0", learner.opt_alpha.m[0]))
        out.append(("opt_alpha.v.0", learner.opt_alpha.v[0]))
    return out


def save_checkpoint(learner: SacLearner, path, counters: Optional[dict] = None) -> None:
    """Self-describing binary: magic, u32 JSON-header length, JSON header,
    then the listed little-endian float64 arrays back to back."""
    arrays = _named_arrays(learner)
    header = {
        "format": "HISCKPT1",
        "d_obs": learner.d_obs,
        "d_a": learner.d_a,
        "config": asdict(learner.cfg),
        "counters": dict(counters or {}),
        "updates_done": learner.updates_done,
        "opt_t": {name: getattr(learner, name).t
                  for name in ("opt_policy", "opt_q1", "opt_q2")},
        "alpha_opt_t": learner.opt_alpha.t if learner.auto_alpha else None,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[SacLearner, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise StructuralError(f"{path}: not a checkpoint file")
    off = len(_CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off: off + hlen].decode("utf-8"))
    off += hlen
    cfg = LearnerConfig(**header["config"])
    learner = SacLearner(header["d_obs"], header["d_a"], cfg, rng=None)
    slots = {name: arr for name, arr in _named_arrays(learner)}
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(raw, dtype="<f8", offset=off, count=n).reshape(shape)
        off += n * 8
        slots[meta["name"]][...] = vals
    for name, t in header["opt_t"].items():
        getattr(learner, name).t = t
    if learner.auto_alpha and header["alpha_opt_t"] is not None:
        learner.opt_alpha.t = header["alpha_opt_t"]
    learner.updates_done = header["updates_done"]
    return learner, header["counters"]
