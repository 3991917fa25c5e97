"""Model-free continuous-control baselines: SAC, DDPG and TD3.

All three consume the raw observation vector (LIDAR ranges divided by
``d_max``) through [400, 300] ReLU networks. Critics take the state and
action concatenated at the input.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from wmnav.ops import Optimizer, mlp, soft_update
from wmnav.replay import TransitionBuffer

log = logging.getLogger(__name__)

ACTION_DIM = 2


@dataclass
class MFConfig:
    actor_lr: float
    critic_lr: float
    tau: float
    gamma: float = 0.99
    buffer_size: int = 100_000
    batch_size: int = 128
    layers: tuple[int, ...] = (400, 300)
    reward_scale: float = 1.0
    alpha: float = 1.0  # SAC entropy temperature, fixed
    expl_noise: float = 0.1
    expl_noise_final: float = 0.1
    expl_noise_decay_steps: int = 1
    target_noise: float = 0.1
    target_noise_clip: float = 0.3
    policy_delay: int = 1
    start_steps: int = 1000
    d_max: float = 3.5
    n_beams: int = 10


def default_config(algorithm: str, n_beams: int = 10, **overrides) -> MFConfig:
    """Published per-algorithm hyperparameters, with optional overrides."""
    table = {
        "sac": dict(actor_lr=3e-4, critic_lr=3e-4, tau=0.001, reward_scale=2.0),
        "ddpg": dict(actor_lr=1e-4, critic_lr=1e-3, tau=0.001, expl_noise=0.1, expl_noise_final=0.01,
                     expl_noise_decay_steps=200_000),
        "td3": dict(actor_lr=1e-3, critic_lr=1e-3, tau=0.005, expl_noise=0.1, expl_noise_final=0.1,
                    target_noise=0.1, policy_delay=2),
    }
    if algorithm not in table:
        raise ValueError(f"unknown model-free algorithm {algorithm!r}")
    params = {**table[algorithm], "n_beams": n_beams}
    for key, value in overrides.items():
        if params.get(key) != value:
            log.info("%s: overriding %s=%r", algorithm, key, value)
        params[key] = value
    return MFConfig(**params)


def to_env_action(u):
    """[-1, 1]^2 -> [0, 1] x [-1, 1]; accepts numpy or torch."""
    if isinstance(u, torch.Tensor):
        return torch.stack([(u[..., 0] + 1.0) * 0.5, u[..., 1]], -1)
    u = np.asarray(u)
    return np.stack([(u[..., 0] + 1.0) * 0.5, u[..., 1]], -1)


def from_env_action(a):
    a = np.asarray(a)
    return np.stack([a[..., 0] * 2.0 - 1.0, a[..., 1]], -1)


class QNetwork(nn.Module):
    def __init__(self, obs_dim: int, layers):
        super().__init__()
        self.net = mlp(obs_dim + ACTION_DIM, layers, 1)

    def forward(self, obs, action):
        return self.net(torch.cat([obs, action], -1)).squeeze(-1)


class DeterministicActor(nn.Module):
    def __init__(self, obs_dim: int, layers):
        super().__init__()
        self.net = mlp(obs_dim, layers, ACTION_DIM)

    def forward(self, obs):
        """Env-box action."""
        return to_env_action(torch.tanh(self.net(obs)))


class GaussianActor(nn.Module):
    LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0

    def __init__(self, obs_dim: int, layers):
        super().__init__()
        self.net = mlp(obs_dim, layers, 2 * ACTION_DIM)

    def forward(self, obs):
        mean, log_std = self.net(obs).chunk(2, -1)
        return mean, log_std.clamp(self.LOG_STD_MIN, self.LOG_STD_MAX)

    def sample(self, obs):
        """Reparameterised env-box action and its log-density."""
        mean, log_std = self(obs)
        std = log_std.exp()
        raw = mean + std * torch.randn_like(mean)
        u = torch.tanh(raw)
        logp = torch.distributions.Normal(mean, std).log_prob(raw).sum(-1)
        logp = logp - torch.log(1.0 - u ** 2 + 1e-6).sum(-1) + math.log(2.0)
        return to_env_action(u), logp

    def mode(self, obs):
        mean, _ = self(obs)
        return to_env_action(torch.tanh(mean))


def td3_target(reward, gamma, done, q1_next, q2_next):
    """r + gamma * (1 - done) * min(Q1', Q2')."""
    return reward + gamma * (1.0 - done) * torch.minimum(q1_next, q2_next)


class ModelFreeAgent:
    """Shared machinery: replay, observation scaling, acting, update cadence."""

    algorithm = ""

    def __init__(self, obs_dim: int, cfg: MFConfig, seed: int = 0):
        self.obs_dim, self.cfg = obs_dim, cfg
        self.buffer = TransitionBuffer(obs_dim, ACTION_DIM, cfg.buffer_size)
        self.rng = np.random.default_rng(seed)
        self.total_steps = 0
        self.updates = 0
        self._warned = False
        self.scale = np.ones(obs_dim)
        self.scale[:cfg.n_beams] = 1.0 / cfg.d_max
        self._build()

    def _build(self):
        raise NotImplementedError

    def modules(self) -> dict[str, nn.Module]:
        raise NotImplementedError

    @property
    def dtype(self):
        return next(iter(self.modules().values())).net[0].weight.dtype

    def preprocess(self, obs) -> torch.Tensor:
        return torch.as_tensor(np.asarray(obs) * self.scale, dtype=self.dtype)

    def reset(self) -> None:
        pass

    def _batch(self):
        b = self.buffer.sample(self.cfg.batch_size, self.rng)
        t = lambda x: torch.as_tensor(x, dtype=self.dtype)
        return (self.preprocess(b["obs"]), t(b["actions"]), t(b["rewards"]),
                self.preprocess(b["next_obs"]), t(b["dones"]))

    def store(self, obs, action, reward, next_obs, done) -> None:
        self.buffer.append(obs, action, reward, next_obs, done)
        self.total_steps += 1

    def ready(self) -> bool:
        if len(self.buffer) < self.cfg.batch_size:
            if not self._warned:
                log.warning("%s: update skipped, buffer holds %d < %d transitions",
                            self.algorithm, len(self.buffer), self.cfg.batch_size)
                self._warned = True
            return False
        return True

    def train_step(self) -> dict[str, float]:
        if not self.ready():
            return {}
        out = self.update(*self._batch())
        self.updates += 1
        return out

    def random_action(self) -> np.ndarray:
        return to_env_action(self.rng.uniform(-1.0, 1.0, size=ACTION_DIM))

    def noise_std(self) -> float:
        c = self.cfg
        frac = min(self.total_steps / max(c.expl_noise_decay_steps, 1), 1.0)
        return c.expl_noise + frac * (c.expl_noise_final - c.expl_noise)


class SAC(ModelFreeAgent):
    algorithm = "sac"

    def _build(self):
        c = self.cfg
        self.actor = GaussianActor(self.obs_dim, c.layers)
        self.q1, self.q2 = QNetwork(self.obs_dim, c.layers), QNetwork(self.obs_dim, c.layers)
        self.q1_target, self.q2_target = copy.deepcopy(self.q1), copy.deepcopy(self.q2)
        self.actor_opt = Optimizer(self.actor.parameters(), c.actor_lr)
        self.critic_opt = Optimizer(list(self.q1.parameters()) + list(self.q2.parameters()), c.critic_lr)

    def modules(self):
        return {"actor": self.actor, "q1": self.q1, "q2": self.q2,
                "q1_target": self.q1_target, "q2_target": self.q2_target}

    @torch.no_grad()
    def act(self, obs, explore: bool = True) -> np.ndarray:
        if explore and self.total_steps < self.cfg.start_steps:
            return self.random_action()
        o = self.preprocess(obs)[None]
        a = self.actor.sample(o)[0] if explore else self.actor.mode(o)
        return a[0].numpy().astype(np.float64)

    def critic_target(self, reward, next_obs, done):
        c = self.cfg
        with torch.no_grad():
            next_a, next_logp = self.actor.sample(next_obs)
            q_next = torch.minimum(self.q1_target(next_obs, next_a), self.q2_target(next_obs, next_a))
            return c.reward_scale * reward + c.gamma * (1.0 - done) * (q_next - c.alpha * next_logp)

    def update(self, obs, action, reward, next_obs, done):
        c = self.cfg
        y = self.critic_target(reward, next_obs, done)
        critic_loss = ((self.q1(obs, action) - y) ** 2).mean() + ((self.q2(obs, action) - y) ** 2).mean()
        self.critic_opt.step(critic_loss)

        new_a, logp = self.actor.sample(obs)
        q = torch.minimum(self.q1(obs, new_a), self.q2(obs, new_a))
        actor_loss = (c.alpha * logp - q).mean()
        self.actor_opt.step(actor_loss)
        for p in list(self.q1.parameters()) + list(self.q2.parameters()):
            p.grad = None

        soft_update(self.q1_target, self.q1, c.tau)
        soft_update(self.q2_target, self.q2, c.tau)
        return {"critic_loss": critic_loss.item(), "actor_loss": actor_loss.item(),
                "entropy": -logp.mean().item()}


class DDPG(ModelFreeAgent):
    algorithm = "ddpg"

    def _build(self):
        c = self.cfg
        self.actor = DeterministicActor(self.obs_dim, c.layers)
        self.critic = QNetwork(self.obs_dim, c.layers)
        self.actor_target, self.critic_target = copy.deepcopy(self.actor), copy.deepcopy(self.critic)
        self.actor_opt = Optimizer(self.actor.parameters(), c.actor_lr)
        self.critic_opt = Optimizer(self.critic.parameters(), c.critic_lr)

    def modules(self):
        return {"actor": self.actor, "critic": self.critic,
                "actor_target": self.actor_target, "critic_target": self.critic_target}

    @torch.no_grad()
    def act(self, obs, explore: bool = True) -> np.ndarray:
        if explore and self.total_steps < self.cfg.start_steps:
            return self.random_action()
        a = self.actor(self.preprocess(obs)[None])[0].numpy().astype(np.float64)
        if explore:
            u = from_env_action(a) + self.rng.normal(0.0, self.noise_std(), size=ACTION_DIM)
            a = to_env_action(np.clip(u, -1.0, 1.0))
        return a

    def update(self, obs, action, reward, next_obs, done):
        c = self.cfg
        with torch.no_grad():
            y = reward + c.gamma * (1.0 - done) * self.critic_target(next_obs, self.actor_target(next_obs))
        critic_loss = ((self.critic(obs, action) - y) ** 2).mean()
        self.critic_opt.step(critic_loss)

        actor_loss = -self.critic(obs, self.actor(obs)).mean()
        self.actor_opt.step(actor_loss)
        for p in self.critic.parameters():
            p.grad = None

        soft_update(self.actor_target, self.actor, c.tau)
        soft_update(self.critic_target, self.critic, c.tau)
        return {"critic_loss": critic_loss.item(), "actor_loss": actor_loss.item()}


class TD3(ModelFreeAgent):
    algorithm = "td3"

    def _build(self):
        c = self.cfg
        self.actor = DeterministicActor(self.obs_dim, c.layers)
        self.q1, self.q2 = QNetwork(self.obs_dim, c.layers), QNetwork(self.obs_dim, c.layers)
        self.actor_target = copy.deepcopy(self.actor)
        self.q1_target, self.q2_target = copy.deepcopy(self.q1), copy.deepcopy(self.q2)
        self.actor_opt = Optimizer(self.actor.parameters(), c.actor_lr)
        self.critic_opt = Optimizer(list(self.q1.parameters()) + list(self.q2.parameters()), c.critic_lr)
        self.last_actor_loss = 0.0

    def modules(self):
        return {"actor": self.actor, "q1": self.q1, "q2": self.q2, "actor_target": self.actor_target,
                "q1_target": self.q1_target, "q2_target": self.q2_target}

    @torch.no_grad()
    def act(self, obs, explore: bool = True) -> np.ndarray:
        if explore and self.total_steps < self.cfg.start_steps:
            return self.random_action()
        a = self.actor(self.preprocess(obs)[None])[0].numpy().astype(np.float64)
        if explore:
            u = from_env_action(a) + self.rng.normal(0.0, self.noise_std(), size=ACTION_DIM)
            a = to_env_action(np.clip(u, -1.0, 1.0))
        return a

    def smoothing_noise(self, shape) -> torch.Tensor:
        c = self.cfg
        noise = torch.randn(shape, dtype=self.dtype) * c.target_noise
        return noise.clamp(-c.target_noise_clip, c.target_noise_clip)

    def update(self, obs, action, reward, next_obs, done):
        c = self.cfg
        with torch.no_grad():
            u_next = torch.tanh(self.actor_target.net(next_obs))
            u_next = (u_next + self.smoothing_noise(u_next.shape)).clamp(-1.0, 1.0)
            a_next = to_env_action(u_next)
            y = td3_target(reward, c.gamma, done, self.q1_target(next_obs, a_next), self.q2_target(next_obs, a_next))
        critic_loss = ((self.q1(obs, action) - y) ** 2).mean() + ((self.q2(obs, action) - y) ** 2).mean()
        self.critic_opt.step(critic_loss)

        # Critic updates are counted from 1; the actor moves on multiples of the delay.
        if (self.updates + 1) % c.policy_delay == 0:
            actor_loss = -self.q1(obs, self.actor(obs)).mean()
            self.actor_opt.step(actor_loss)
            for p in self.q1.parameters():
                p.grad = None
            self.last_actor_loss = actor_loss.item()
            soft_update(self.actor_target, self.actor, c.tau)
            soft_update(self.q1_target, self.q1, c.tau)
            soft_update(self.q2_target, self.q2, c.tau)
        return {"critic_loss": critic_loss.item(), "actor_loss": self.last_actor_loss}


AGENTS = {"sac": SAC, "ddpg": DDPG, "td3": TD3}


def make_agent(algorithm: str, obs_dim: int, n_beams: int, seed: int = 0, **overrides) -> ModelFreeAgent:
    return AGENTS[algorithm](obs_dim, default_config(algorithm, n_beams, **overrides), seed=seed)
