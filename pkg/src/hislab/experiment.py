"""Experiment orchestration: validated run configs, the per-episode
collect/insert/update loop, deterministic evaluation, metrics and manifest
persistence, and cross-run aggregation.

Everything written to ``metrics.csv`` is a pure function of the config, so a
repeated run produces a byte-identical file.  The ``wall_clock_s`` column
therefore reports *accounted* compute: deterministic operation counts priced
with fixed per-operation costs (calibrated once on the development machine).
The actually measured process CPU time of each run is stored in
``manifest.json``, which also carries timestamps and is excluded from the
reproducibility contract.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from . import rng as rngmod
from .core import (
    AggregationError,
    ConfigError,
    Criterion,
    Granularity,
    HindsightConfig,
    ReplayBuffer,
    load_db,
)
from .envs import generate_recorded_db, make_env
from .hindsight import EpisodeRngs, HisInserter, continue_tail, her_relabel, rollout_hysr
from .learner import LearnerConfig, SacLearner, save_checkpoint

VERSION = "hislab-0.1.0"


@dataclass(frozen=True)
class HerConfig:
    n_sampled_goal: int = 4
    strategy: str = "future"

    def __post_init__(self):
        if self.n_sampled_goal < 1:
            raise ConfigError("n_sampled_goal must be >= 1")
        if self.strategy != "future":
            raise ConfigError("only the 'future' goal selection strategy exists")


@dataclass
class RunConfig:
    env_id: str
    env_overrides: dict
    learner: LearnerConfig
    hindsight: Optional[HindsightConfig]
    her: Optional[HerConfig]
    total_episodes: int
    eval_every: int
    eval_episodes: int
    seed: int
    output_dir: str
    db_size: int = 100
    db_seed: int = 1234
    db_path: Optional[str] = None
    raw: Optional[dict] = None

    def __post_init__(self):
        if not self.total_episodes >= self.eval_every >= 1:
            raise ConfigError("need total_episodes >= eval_every >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if (self.her is not None and self.hindsight is not None
                and self.hindsight.num_parallel > 0
                and self.hindsight.granularity != Granularity.EPISODE):
            raise ConfigError(
                "combining goal relabeling with hindsight streams needs "
                "granularity 'episode' (whole episodes in the buffer)")

    @property
    def variant(self) -> str:
        his = self.hindsight is not None and self.hindsight.num_parallel > 0
        her = self.her is not None
        if his and her:
            return "her_his"
        if his:
            return "his"
        if her:
            return "her"
        return "vanilla"


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def parse_config(raw: dict) -> RunConfig:
    """Strict schema check; unknown keys anywhere are rejected."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys("config", raw, {
        "env", "learner", "hindsight", "her", "total_episodes", "eval_every",
        "eval_episodes", "seed", "output_dir", "recorded_db"})
    for key in ("env", "learner", "total_episodes", "eval_every",
                "eval_episodes", "seed", "output_dir"):
        if key not in raw:
            raise ConfigError(f"config is missing required key {key!r}")

    env_sec = raw["env"]
    _check_keys("env", env_sec, {"id", "overrides"})
    if "id" not in env_sec:
        raise ConfigError("env section needs an 'id'")

    lrn_sec = dict(raw["learner"])
    _check_keys("learner", lrn_sec, {f.name for f in fields(LearnerConfig)})
    learner = LearnerConfig(**lrn_sec)

    hin = None
    if raw.get("hindsight") is not None:
        h = dict(raw["hindsight"])
        _check_keys("hindsight", h, {
            "num_parallel", "criterion", "threshold", "cap", "insert_every",
            "granularity"})
        try:
            if "criterion" in h:
                h["criterion"] = Criterion(h["criterion"])
            if "granularity" in h:
                h["granularity"] = Granularity(h["granularity"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        hin = HindsightConfig(**h)

    her = None
    if raw.get("her") is not None:
        h = dict(raw["her"])
        _check_keys("her", h, {"n_sampled_goal", "strategy"})
        her = HerConfig(**h)

    db_size, db_seed, db_path = 100, 1234, None
    if raw.get("recorded_db") is not None:
        d = dict(raw["recorded_db"])
        _check_keys("recorded_db", d, {"size", "seed", "path"})
        db_size = int(d.get("size", db_size))
        db_seed = int(d.get("seed", db_seed))
        db_path = d.get("path")

    return RunConfig(
        env_id=env_sec["id"],
        env_overrides=dict(env_sec.get("overrides") or {}),
        learner=learner,
        hindsight=hin,
        her=her,
        total_episodes=int(raw["total_episodes"]),
        eval_every=int(raw["eval_every"]),
        eval_episodes=int(raw["eval_episodes"]),
        seed=int(raw["seed"]),
        output_dir=str(raw["output_dir"]),
        db_size=db_size,
        db_seed=db_seed,
        db_path=db_path,
        raw=json.loads(json.dumps(raw)),
    )


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# ------------------------------------------------------------------ metrics -

@dataclass
class MetricsRow:
    episode: int
    env_steps: int
    success_rate: float
    successful_nontrivial_count: int
    his_inserted_count: int
    her_inserted_count: int
    buffer_fill: int
    wall_clock_s: float
    q_loss: float
    policy_loss: float
    entropy_coef: float
    mean_q: float


METRICS_FIELDS = [f.name for f in fields(MetricsRow)]
_INT_FIELDS = {"episode", "env_steps", "successful_nontrivial_count",
               "his_inserted_count", "her_inserted_count", "buffer_fill"}


def _fmt(name: str, value) -> str:
    if name in _INT_FIELDS:
        return str(int(value))
    return repr(float(value))


def write_metrics(rows: list[MetricsRow], path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(METRICS_FIELDS) + "\n")
        for row in rows:
            d = asdict(row)
            f.write(",".join(_fmt(n, d[n]) for n in METRICS_FIELDS) + "\n")
    os.replace(tmp, path)


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_FIELDS:
            raise AggregationError(f"{path}: unexpected metrics header")
        rows = list(reader)
    out = {}
    for name in METRICS_FIELDS:
        conv = int if name in _INT_FIELDS else float
        out[name] = np.array([conv(r[name]) for r in rows])
    return out


# The accounted-cost price list (seconds per operation), calibrated once on
# the reference machine.  These make wall_clock_s a deterministic function of
# what the run did; measured CPU time is reported in the manifest instead.
COST = {
    "env_step": 6e-5,        # policy forward + real and main-stream step
    "stream_step": 3e-6,     # each extra virtual stream, per step
    "update_iter": 4.5e-4,   # one gradient iteration
    "candidate": 1.5e-5,     # scoring one hindsight candidate
    "insert": 8e-6,          # one buffer insertion
    "eval_step": 4e-5,       # evaluation episode step
}


def accounted_seconds(counts: dict) -> float:
    return float(sum(COST[k] * counts.get(k, 0) for k in COST))


# --------------------------------------------------------------------- run --


def _atomic_json(obj, path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def evaluate(policy, env, n: int, seed: int, db=None) -> float:
    """Deterministic-policy success rate over a fixed per-seed suite of n
    episodes; never touches any buffer."""
    if n < 1:
        raise ConfigError("evaluation needs n >= 1 episodes")
    hits = 0
    for j in range(n):
        gen = rngmod.stream(seed, rngmod.EVAL, j)
        bundle = rollout_hysr(policy, env, db, None, EpisodeRngs.single(gen),
                              episode_seed=j, deterministic=True)
        if env.success(bundle.main):
            hits += 1
    return hits / n


def run(cfg: RunConfig) -> dict:
    """Execute one training run; returns the manifest (also written to disk).

    Per episode: collect (with parallel streams and tail), insert the main
    episode, gate hindsight candidates in, goal-relabel, then update.
    """
    env = make_env(cfg.env_id, cfg.env_overrides)
    if cfg.her is not None and not env.spec.goal_conditioned:
        raise ConfigError(f"{cfg.env_id} is not goal-conditioned; drop 'her'")
    db = None
    if env.uses_db:
        if cfg.db_path is not None:
            db = load_db(cfg.db_path)
            if db.env_id != cfg.env_id:
                raise ConfigError(
                    f"db {cfg.db_path} was recorded for {db.env_id}")
        else:
            db = generate_recorded_db(cfg.env_id, cfg.db_size, cfg.db_seed)

    spec = env.spec
    d_obs = spec.d_r + spec.d_v + spec.d_g
    learner = SacLearner(d_obs, spec.d_a, cfg.learner,
                         rng=rngmod.stream(cfg.seed, rngmod.INIT))
    buffer = ReplayBuffer(cfg.learner.buffer_size, spec.d_r, spec.d_v,
                          spec.d_a, spec.d_g)
    use_his = cfg.hindsight is not None and cfg.hindsight.num_parallel > 0
    inserter = HisInserter(cfg.hindsight, env) if use_his else None

    os.makedirs(cfg.output_dir, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    cpu0 = time.process_time()

    rows: list[MetricsRow] = []
    counts = {k: 0 for k in COST}
    env_steps = 0
    snt = 0                      # successful nontrivial trajectories inserted
    his_total = 0
    her_total = 0
    pending_steps = 0
    report: dict = {}
    ckpt_paths: list[str] = []

    for ep in range(cfg.total_episodes):
        rngs = EpisodeRngs.for_episode(cfg.seed, ep)
        bundle = rollout_hysr(learner, env, db, cfg.hindsight, rngs,
                              episode_seed=ep)
        if bundle.alive.any():
            continue_tail(learner, env, bundle, rngs.action)
        main = bundle.main
        env_steps += bundle.total_len
        counts["env_step"] += bundle.total_len
        counts["stream_step"] += bundle.total_len * bundle.num_streams

        for tr in main.transitions:
            buffer.insert(tr)
        counts["insert"] += len(main)
        if env.success(main) and env.nontrivial(main):
            snt += 1

        his_trajs = []
        if inserter is not None:
            n_sel = inserter.his_insert(buffer, bundle, learner, ep)
            his_total += n_sel
            counts["candidate"] += bundle.num_streams
            his_trajs = inserter.last_selected_trajectories
            for traj in his_trajs:
                counts["insert"] += len(traj)
                if env.success(traj) and env.nontrivial(traj):
                    snt += 1

        if cfg.her is not None:
            rng_her = rngmod.stream(cfg.seed, rngmod.HER, ep)
            for traj in [main] + his_trajs:
                new = her_relabel(traj, cfg.her.n_sampled_goal,
                                  cfg.her.strategy, rng_her, env)
                for tr in new:
                    buffer.insert(tr)
                her_total += len(new)
                counts["insert"] += len(new)
                if env.nontrivial(traj) and any(t.reward >= 0.5 for t in new):
                    snt += cfg.her.n_sampled_goal

        rng_update = rngmod.stream(cfg.seed, rngmod.UPDATE, ep)
        n_calls = 0
        if cfg.learner.train_freq_unit == "step":
            pending_steps += len(main)
            n_calls = pending_steps // cfg.learner.train_freq
            pending_steps -= n_calls * cfg.learner.train_freq
        elif (ep + 1) % cfg.learner.train_freq == 0:
            n_calls = 1
        for _ in range(n_calls):
            r = learner.update(buffer, rng_update)
            if r:
                report = r
                counts["update_iter"] += cfg.learner.gradient_steps

        if (ep + 1) % cfg.eval_every == 0:
            sr = evaluate(learner, env, cfg.eval_episodes, cfg.seed, db)
            counts["eval_step"] += cfg.eval_episodes * spec.T
            rows.append(MetricsRow(
                episode=ep + 1,
                env_steps=env_steps,
                success_rate=sr,
                successful_nontrivial_count=snt,
                his_inserted_count=his_total,
                her_inserted_count=her_total,
                buffer_fill=len(buffer),
                wall_clock_s=accounted_seconds(counts),
                q_loss=report.get("q_loss", float("nan")),
                policy_loss=report.get("policy_loss", float("nan")),
                entropy_coef=report.get("entropy_coef", learner.alpha),
                mean_q=report.get("mean_q", float("nan")),
            ))
        if (ep + 1) % 1000 == 0:
            path = os.path.join(cfg.output_dir, f"checkpoint_ep{ep + 1}.hisckpt")
            save_checkpoint(learner, path,
                            {"episode": ep + 1, "env_steps": env_steps})
            ckpt_paths.append(path)

    final_path = os.path.join(cfg.output_dir, "checkpoint_final.hisckpt")
    save_checkpoint(learner, final_path,
                    {"episode": cfg.total_episodes, "env_steps": env_steps})
    ckpt_paths.append(final_path)

    metrics_path = os.path.join(cfg.output_dir, "metrics.csv")
    write_metrics(rows, metrics_path)
    manifest = {
        "version": VERSION,
        "env_id": cfg.env_id,
        "variant": cfg.variant,
        "seed": cfg.seed,
        "config": cfg.raw,
        "config_hash": config_hash(cfg.raw) if cfg.raw is not None else None,
        "total_episodes": cfg.total_episodes,
        "env_steps": env_steps,
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "cpu_seconds": time.process_time() - cpu0,
        "accounted_seconds": accounted_seconds(counts),
        "counters": {
            "successful_nontrivial": snt,
            "his_inserted": his_total,
            "her_inserted": her_total,
            "buffer_fill": len(buffer),
        },
        "metrics": "metrics.csv",
        "checkpoints": [os.path.basename(p) for p in ckpt_paths],
    }
    _atomic_json(manifest, os.path.join(cfg.output_dir, "manifest.json"))
    return manifest


# --------------------------------------------------------------- aggregate --

SMOOTH_WINDOW = 200


def smoothed(episodes: np.ndarray, values: np.ndarray,
             window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing mean over the rows inside the last ``window`` episodes."""
    out = np.empty_like(values, dtype=np.float64)
    for i, ep in enumerate(episodes):
        mask = (episodes > ep - window) & (episodes <= ep)
        out[i] = float(np.mean(values[mask]))
    return out


def episodes_to_match(episodes: np.ndarray, curve: np.ndarray,
                      target: float) -> Optional[int]:
    """First episode at which the smoothed curve reaches ``target``."""
    for ep, v in zip(episodes, curve):
        if v >= target:
            return int(ep)
    return None


def aggregate(run_dirs: list) -> dict:
    """Combine runs into per-variant summaries and cross-variant tables."""
    if not run_dirs:
        raise AggregationError("no run directories given")
    loaded = []
    for d in run_dirs:
        with open(os.path.join(d, "manifest.json"), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        metrics = read_metrics(os.path.join(d, "metrics.csv"))
        loaded.append((d, manifest, metrics))
    env_ids = {m["env_id"] for _, m, _ in loaded}
    if len(env_ids) != 1:
        raise AggregationError(f"runs mix environments: {sorted(env_ids)}")

    by_variant: dict[str, list] = {}
    for d, m, met in loaded:
        by_variant.setdefault(m["variant"], []).append((d, m, met))

    variants = {}
    for name, runs in sorted(by_variant.items()):
        ep_axis = runs[0][2]["episode"]
        for _, _, met in runs:
            if not np.array_equal(met["episode"], ep_axis):
                raise AggregationError(
                    f"variant {name}: runs disagree on evaluation points")
        curves = np.stack([met["success_rate"] for _, _, met in runs])
        mean_curve = curves.mean(axis=0)
        sm = smoothed(ep_axis, mean_curve)
        finals = [float(smoothed(ep_axis, c)[-1]) for c in curves]
        fig4 = None
        if np.any(ep_axis == 1000):
            i = int(np.flatnonzero(ep_axis == 1000)[0])
            fig4 = float(np.mean(
                [met["successful_nontrivial_count"][i] for _, _, met in runs]))
        variants[name] = {
            "runs": [d for d, _, _ in runs],
            "seeds": [m["seed"] for _, m, _ in runs],
            "episodes": ep_axis.tolist(),
            "mean_curve": mean_curve.tolist(),
            "smoothed_mean_curve": sm.tolist(),
            "final_smoothed_mean": float(np.mean(finals)),
            "final_smoothed_std": float(np.std(finals)),
            "fig4_count_at_1000": fig4,
            "cpu_seconds_mean": float(np.mean(
                [m["cpu_seconds"] for _, m, _ in runs])),
            "accounted_seconds_mean": float(np.mean(
                [m["accounted_seconds"] for _, m, _ in runs])),
            "env_steps_mean": float(np.mean(
                [m["env_steps"] for _, m, _ in runs])),
        }

    summary = {"env_id": env_ids.pop(), "variants": variants}
    if "vanilla" in variants:
        base = variants["vanilla"]
        for name, v in variants.items():
            v["wall_clock_ratio_vs_vanilla"] = (
                v["cpu_seconds_mean"] / base["cpu_seconds_mean"]
                if base["cpu_seconds_mean"] > 0 else None)
            v["accounted_ratio_vs_vanilla"] = (
                v["accounted_seconds_mean"] / base["accounted_seconds_mean"]
                if base["accounted_seconds_mean"] > 0 else None)
            v["episodes_to_match_vanilla"] = episodes_to_match(
                np.array(v["episodes"]), np.array(v["smoothed_mean_curve"]),
                base["final_smoothed_mean"])
    return summary


# ----------------------------------------------------------------- presets --


def preset(name: str, seed: int = 0, output_dir: str = "runs/run") -> dict:
    """Named config dictionaries; 'paper_*' mirror the reference
    hyperparameter tables, 'desk_*' are the fast desk-scale settings the
    acceptance studies use."""
    builders = {
        "paper_volley": _paper_volley,
        "paper_push": _paper_push,
        "desk_volley_vanilla": lambda: _desk_volley("vanilla"),
        "desk_volley_his": lambda: _desk_volley("his"),
        "desk_volley_his_td": lambda: _desk_volley("his_td"),
        "desk_push_vanilla": lambda: _desk_push("vanilla"),
        "desk_push_his": lambda: _desk_push("his"),
        "desk_push_her": lambda: _desk_push("her"),
        "desk_push_her_his": lambda: _desk_push("her_his"),
    }
    if name not in builders:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(builders)}")
    raw = builders[name]()
    raw["seed"] = seed
    raw["output_dir"] = output_dir
    return raw


def _paper_volley() -> dict:
    return {
        "env": {"id": "volley2d", "overrides": {}},
        "learner": {
            "gamma": 0.9999, "learning_rate": 3e-4, "batch_size": 256,
            "num_layers": 1, "num_hidden": 200, "gradient_steps": 500,
            "train_freq": 1, "train_freq_unit": "episode",
            "buffer_size": 5_000_000, "learning_starts": 10_000,
            "ent_coef": 0.0, "polyak": 0.005, "activation": "relu",
        },
        "hindsight": {
            "num_parallel": 20, "criterion": "reward_per_episode",
            "threshold": 0.5, "cap": 3, "insert_every": 1,
            "granularity": "episode",
        },
        "her": None,
        "total_episodes": 30_000,
        "eval_every": 500,
        "eval_episodes": 50,
        "recorded_db": {"size": 100, "seed": 1234},
    }


def _paper_push() -> dict:
    return {
        "env": {"id": "pushbox2d", "overrides": {}},
        "learner": {
            "gamma": 0.95, "learning_rate": 1e-3, "batch_size": 256,
            "num_layers": 2, "num_hidden": 256, "gradient_steps": 1,
            "train_freq": 1, "train_freq_unit": "step",
            "buffer_size": 1_000_000, "learning_starts": 1000,
            "ent_coef": "auto", "polyak": 0.005, "activation": "relu",
        },
        "hindsight": {
            "num_parallel": 100, "criterion": "virtual_displacement",
            "threshold": 0.02, "cap": 3, "insert_every": 1,
            "granularity": "episode",
        },
        "her": {"n_sampled_goal": 4, "strategy": "future"},
        "total_episodes": 20_000,
        "eval_every": 500,
        "eval_episodes": 50,
        "recorded_db": {"size": 100, "seed": 1234},
    }


def _desk_volley(variant: str) -> dict:
    cfg = {
        "env": {"id": "volley2d", "overrides": {"success_radius": 0.2}},
        "learner": {
            "gamma": 0.98, "learning_rate": 1e-3, "batch_size": 64,
            "num_layers": 1, "num_hidden": 64, "gradient_steps": 40,
            "train_freq": 1, "train_freq_unit": "episode",
            "buffer_size": 200_000, "learning_starts": 500,
            "ent_coef": "auto", "polyak": 0.01, "activation": "relu",
        },
        "hindsight": None,
        "her": None,
        "total_episodes": 600,
        "eval_every": 50,
        "eval_episodes": 40,
        "recorded_db": {"size": 100, "seed": 1234},
    }
    if variant == "his":
        cfg["hindsight"] = {
            "num_parallel": 20, "criterion": "reward_per_episode",
            "threshold": 0.5, "cap": 3, "insert_every": 1,
            "granularity": "episode",
        }
    elif variant == "his_td":
        cfg["hindsight"] = {
            "num_parallel": 20, "criterion": "td_per_transition",
            "threshold": 0.05, "cap": 90, "insert_every": 1,
            "granularity": "transition",
        }
    elif variant != "vanilla":
        raise ConfigError(f"unknown desk volley variant {variant!r}")
    return cfg


def _desk_push(variant: str) -> dict:
    cfg = {
        "env": {"id": "pushbox2d", "overrides": {}},
        "learner": {
            "gamma": 0.95, "learning_rate": 1e-3, "batch_size": 64,
            "num_layers": 2, "num_hidden": 64, "gradient_steps": 1,
            "train_freq": 1, "train_freq_unit": "step",
            "buffer_size": 300_000, "learning_starts": 500,
            "ent_coef": "auto", "polyak": 0.005, "activation": "relu",
        },
        "hindsight": None,
        "her": None,
        "total_episodes": 1000,
        "eval_every": 100,
        "eval_episodes": 40,
        "recorded_db": {"size": 100, "seed": 1234},
    }
    his = {
        "num_parallel": 100, "criterion": "virtual_displacement",
        "threshold": 0.02, "cap": 3, "insert_every": 1,
        "granularity": "episode",
    }
    her = {"n_sampled_goal": 4, "strategy": "future"}
    if variant in ("his", "her_his"):
        cfg["hindsight"] = his
    if variant in ("her", "her_his"):
        cfg["her"] = her
    if variant not in ("vanilla", "his", "her", "her_his"):
        raise ConfigError(f"unknown desk push variant {variant!r}")
    return cfg
