"""Experiment driver: configuration, training loop, evaluation, checkpoints."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from wmnav import baselines
from wmnav.checkpoint import CheckpointError, check_compatible, load_checkpoint, save_checkpoint
from wmnav.dreamer import AgentConfig, DreamerAgent, ReturnNormState
from wmnav.env import COLLISION, SUCCESS, TIMEOUT, EnvConfig, NavEnv
from wmnav.sim import builtin_stage
from wmnav.world_model import WMConfig

log = logging.getLogger(__name__)

ALGORITHMS = ("dreamer", "sac", "ddpg", "td3")
LOSS_COLUMNS = {
    "dreamer": ("recon", "kl", "reward", "continue", "actor_loss", "critic_loss", "entropy"),
    "sac": ("critic_loss", "actor_loss", "entropy"),
    "ddpg": ("critic_loss", "actor_loss"),
    "td3": ("critic_loss", "actor_loss"),
}
METRIC_COLUMNS = ("episode", "steps", "return", "outcome", "success_rate", "wall_clock")
SUCCESS_WINDOW = 100


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    algorithm: str = "dreamer"
    stage: int = 1
    n_beams: int = 10
    episodes: int = 5000
    eval_episodes: int = 100
    seed: int = 0
    init_from: str | None = None
    train_ratio: float = 1.0
    out: str = "runs/default"
    realtime: bool = False
    random_heading: bool = False
    dtype: str = "float32"
    # periodic deterministic evaluation; 0 disables
    eval_every: int = 0
    # stop once a periodic evaluation reaches this success rate
    target_success: float | None = None
    # dreamer
    prefill: int = 1000
    batch_size: int = 16
    seq_len: int = 64
    model_hidden: int = 512
    agent_hidden: int = 512
    recurrent_dim: int = 256
    latent_dim: int = 32
    latent_kind: str = "gaussian"
    horizon: int = 15
    imag_starts: int = 0
    model_lr: float = 3e-4
    actor_lr: float = 3e-5
    critic_lr: float = 3e-5
    entropy_scale: float = 3e-4
    beam_weight: float = 1.0
    # model-free
    start_steps: int = 1000

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.stage not in range(1, 7):
            raise ConfigError(f"stage must be 1-6, got {self.stage}")
        if self.n_beams not in (10, 360):
            raise ConfigError(f"n_beams must be 10 or 360, got {self.n_beams}")
        if self.episodes < 0 or self.eval_episodes < 0:
            raise ConfigError("episode counts must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.train_ratio < 0:
            raise ConfigError("train_ratio must be non-negative")
        if self.init_from and not Path(self.init_from).exists():
            raise ConfigError(f"init_from checkpoint {self.init_from} does not exist")


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; values are JSON literals or bare strings. '#' starts a comment."""
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def load_config(path: str | Path, **overrides) -> RunConfig:
    values = parse_config_text(Path(path).read_text("utf-8"))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in dataclasses.asdict(cfg).items())


@contextlib.contextmanager
def default_dtype(name: str):
    old = torch.get_default_dtype()
    torch.set_default_dtype(getattr(torch, name))
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def build_agent(cfg: RunConfig):
    obs_dim = cfg.n_beams + 4
    with default_dtype(cfg.dtype):
        if cfg.algorithm == "dreamer":
            wm = WMConfig(obs_dim=obs_dim, hidden=cfg.model_hidden, recurrent_dim=cfg.recurrent_dim,
                          latent_dim=cfg.latent_dim, latent_kind=cfg.latent_kind, lr=cfg.model_lr,
                          beam_weight=cfg.beam_weight)
            ag = AgentConfig(horizon=cfg.horizon, hidden=cfg.agent_hidden, actor_lr=cfg.actor_lr,
                             critic_lr=cfg.critic_lr, entropy_scale=cfg.entropy_scale,
                             imag_starts=cfg.imag_starts)
            return DreamerAgent(obs_dim, wm, ag, batch_size=cfg.batch_size, seq_len=cfg.seq_len, seed=cfg.seed)
        return baselines.make_agent(cfg.algorithm, obs_dim, cfg.n_beams, seed=cfg.seed,
                                    start_steps=cfg.start_steps)


def agent_tensors(agent) -> dict[str, np.ndarray]:
    out = {}
    for mod_name, module in agent.modules().items():
        for key, value in module.state_dict().items():
            out[f"{mod_name}.{key}"] = value.detach().cpu().numpy()
    return out


def save_agent(path, agent, cfg: RunConfig, extra: dict | None = None) -> None:
    meta = {"algorithm": cfg.algorithm, "n_beams": cfg.n_beams, "stage": cfg.stage,
            "config": dataclasses.asdict(cfg), **(extra or {})}
    if isinstance(agent, DreamerAgent):
        meta["retnorm"] = [agent.retnorm.low, agent.retnorm.high]
    save_checkpoint(path, agent_tensors(agent), meta)


def restore_agent(agent, tensors: dict[str, np.ndarray], meta: dict) -> None:
    for mod_name, module in agent.modules().items():
        prefix = mod_name + "."
        state = {k[len(prefix):]: torch.as_tensor(v) for k, v in tensors.items() if k.startswith(prefix)}
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint does not fit module '{mod_name}': {exc}") from None
    if isinstance(agent, DreamerAgent) and "retnorm" in meta:
        lo, hi = meta["retnorm"]
        agent.retnorm = ReturnNormState(lo, hi, agent.retnorm.decay, agent.retnorm.percentiles)


def load_agent(path) -> tuple[object, RunConfig]:
    tensors, meta = load_checkpoint(path)
    cfg = RunConfig(**meta["config"])
    agent = build_agent(cfg)
    restore_agent(agent, tensors, meta)
    return agent, cfg


def make_env(cfg: RunConfig, seed: int, stage: int | None = None) -> NavEnv:
    env_cfg = EnvConfig(n_beams=cfg.n_beams, realtime=cfg.realtime, random_heading=cfg.random_heading)
    return NavEnv(builtin_stage(stage or cfg.stage), env_cfg, seed=seed)


def run_episodes(env: NavEnv, policy: Callable[[np.ndarray], np.ndarray], episodes: int,
                 seed: int, reset: Callable[[], None] = lambda: None) -> list[dict]:
    """Roll out ``policy`` for ``episodes`` episodes; episode i resets with seed + i."""
    rows = []
    for i in range(episodes):
        obs = env.reset(seed=seed + i).vector()
        reset()
        ret, steps = 0.0, 0
        while True:
            res = env.step(policy(obs))
            ret += res.reward
            steps += 1
            obs = res.obs.vector()
            if res.done:
                break
        rows.append({"episode": i, "steps": steps, "return": ret, "outcome": res.outcome})
    return rows


def summarize(rows: list[dict]) -> dict:
    n = max(len(rows), 1)
    return {"success_rate": sum(r["outcome"] == SUCCESS for r in rows) / n,
            "collision_rate": sum(r["outcome"] == COLLISION for r in rows) / n,
            "timeout_rate": sum(r["outcome"] == TIMEOUT for r in rows) / n,
            "episodes": len(rows)}


def evaluate_agent(agent, cfg: RunConfig, episodes: int, seed: int, stage: int | None = None) -> list[dict]:
    env = make_env(cfg, seed, stage)
    return run_episodes(env, lambda o: agent.act(o, explore=False), episodes, seed, agent.reset)


def evaluate(checkpoint, stage: int | None = None, episodes: int = 100, seed: int = 0,
             out: str | Path | None = None) -> dict:
    """Deterministic-policy evaluation of a saved agent; optionally writes outcomes CSV."""
    agent, cfg = load_agent(checkpoint)
    rows = evaluate_agent(agent, cfg, episodes, seed, stage)
    if out is not None:
        _write_csv(out, ("episode", "steps", "return", "outcome"), rows)
    return {**summarize(rows), "outcomes": [r["outcome"] for r in rows]}


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def train(cfg: RunConfig, progress: Callable[[dict], None] | None = None) -> dict:
    """Run the training loop and write artifacts into ``cfg.out``.

    Artifacts: ``metrics.csv`` (one row per episode), ``evals.csv`` (one row
    per periodic evaluation), ``config.resolved`` and ``final.ckpt``.
    """
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(format_config(cfg), "utf-8")

    torch.manual_seed(cfg.seed)
    agent = build_agent(cfg)
    if cfg.init_from:
        tensors, meta = load_checkpoint(cfg.init_from)
        check_compatible(meta, cfg.algorithm, cfg.n_beams)
        restore_agent(agent, tensors, meta)
    is_dreamer = isinstance(agent, DreamerAgent)
    env = make_env(cfg, cfg.seed)
    explore_rng = np.random.default_rng(cfg.seed + 7919)

    loss_cols = LOSS_COLUMNS[cfg.algorithm]
    columns = METRIC_COLUMNS + loss_cols
    metrics_fh = open(out / "metrics.csv", "w", newline="")
    writer = csv.writer(metrics_fh, lineterminator="\r\n")
    writer.writerow(columns)
    eval_rows: list[dict] = []
    recent: deque[float] = deque(maxlen=SUCCESS_WINDOW)
    start = time.monotonic()
    total_steps, credit = 0, 0.0
    last_eval = None
    episodes_run = 0
    try:
        for ep in range(cfg.episodes):
            obs = env.reset().vector()
            agent.reset()
            prev_action = np.zeros(2)
            if is_dreamer:
                agent.store(obs, prev_action, 0.0, 1.0, True)
            ret, steps, losses = 0.0, 0, {k: [] for k in loss_cols}
            while True:
                if is_dreamer and total_steps < cfg.prefill:
                    action = np.array([explore_rng.uniform(0, 1), explore_rng.uniform(-1, 1)])
                    agent.observe_only(obs, action)
                else:
                    action = agent.act(obs, explore=True)
                res = env.step(action)
                nxt = res.obs.vector()
                ret += res.reward
                steps += 1
                total_steps += 1
                if is_dreamer:
                    agent.store(nxt, action, res.reward, 0.0 if res.done else 1.0, False)
                    if total_steps >= cfg.prefill:
                        credit += cfg.train_ratio
                        while credit >= 1.0:
                            credit -= 1.0
                            _collect(losses, agent.train_step())
                else:
                    agent.store(obs, action, res.reward, nxt, res.done)
                    _collect(losses, agent.train_step())
                obs = nxt
                if res.done:
                    break
            recent.append(1.0 if res.outcome == SUCCESS else 0.0)
            row = [ep, steps, ret, res.outcome, sum(recent) / len(recent), round(time.monotonic() - start, 3)]
            row += [np.mean(losses[k]) if losses[k] else "" for k in loss_cols]
            writer.writerow([_fmt(v) for v in row])
            metrics_fh.flush()
            episodes_run = ep + 1
            if progress:
                progress(dict(zip(columns, row)))

            if cfg.eval_every and (ep + 1) % cfg.eval_every == 0:
                stats = summarize(evaluate_agent(agent, cfg, cfg.eval_episodes, cfg.seed + 100_000))
                last_eval = {"episode": ep + 1, **stats}
                eval_rows.append(last_eval)
                _write_csv(out / "evals.csv", ("episode", "success_rate", "collision_rate", "timeout_rate"),
                           eval_rows)
                log.info("eval after %d episodes: %.2f success", ep + 1, stats["success_rate"])
                if cfg.target_success is not None and stats["success_rate"] >= cfg.target_success:
                    break
    finally:
        metrics_fh.close()
    save_agent(out / "final.ckpt", agent, cfg, {"episodes_trained": episodes_run})
    return {"episodes": episodes_run, "steps": total_steps, "last_eval": last_eval, "evals": eval_rows,
            "metrics": str(out / "metrics.csv"), "checkpoint": str(out / "final.ckpt"),
            "wall_clock": time.monotonic() - start}


def _collect(store: dict[str, list], metrics: dict[str, float]) -> None:
    for k, v in metrics.items():
        if k in store:
            store[k].append(v)
