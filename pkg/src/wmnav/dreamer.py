"""Actor-critic trained inside the world model's imagination."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from wmnav.ops import (Optimizer, mlp, symlog, symlog_bins, twohot_loss, twohot_value,
                       zero_value_logits)
from wmnav.replay import EpisodeBuffer
from wmnav.world_model import LatentState, NonFiniteLossError, WMConfig, WorldModel

_LOG2 = math.log(2.0)


@dataclass
class AgentConfig:
    horizon: int = 15
    gamma: float = 0.997
    lam: float = 0.95
    entropy_scale: float = 3e-4
    return_percentiles: tuple[float, float] = (5.0, 95.0)
    norm_decay: float = 0.99
    hidden: int = 512
    layers: int = 2
    critic_ema_decay: float = 0.98
    slow_reg: float = 1.0
    actor_lr: float = 3e-5
    critic_lr: float = 3e-5
    eps: float = 1e-5
    clip: float = 100.0
    std_min: float = 0.1
    std_max: float = 1.0
    value_bins: int = 41
    # number of replayed states that seed imagination; 0 uses all of them
    imag_starts: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must be in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def to_env_action(u: torch.Tensor) -> torch.Tensor:
    """Map a squashed action in [-1, 1]^2 onto the env box [0, 1] x [-1, 1]."""
    return torch.stack([(u[..., 0] + 1.0) * 0.5, u[..., 1]], -1)


class Actor(nn.Module):
    """Tanh-squashed diagonal Gaussian policy over the two velocity commands."""

    def __init__(self, feat_dim: int, cfg: AgentConfig, action_dim: int = 2):
        super().__init__()
        self.cfg = cfg
        self.net = mlp(feat_dim, [cfg.hidden] * cfg.layers, 2 * action_dim, act="silu", norm=True)

    def forward(self, feat):
        mean, std_raw = self.net(feat).chunk(2, -1)
        std = (self.cfg.std_max - self.cfg.std_min) * torch.sigmoid(std_raw + 2.0) + self.cfg.std_min
        return mean, std

    def sample(self, feat):
        mean, std = self(feat)
        raw = mean + std * torch.randn_like(mean)
        return to_env_action(torch.tanh(raw)), raw

    def mode(self, feat):
        mean, _ = self(feat)
        return to_env_action(torch.tanh(mean))

    def log_prob(self, feat, raw):
        """Log-density of the env-space action produced by pre-squash ``raw``."""
        mean, std = self(feat)
        base = torch.distributions.Normal(mean, std).log_prob(raw).sum(-1)
        squash = torch.log(1.0 - torch.tanh(raw) ** 2 + 1e-6).sum(-1)
        # the [-1, 1] -> [0, 1] rescale of the linear command halves the support
        return base - squash + _LOG2

    def entropy(self, feat):
        """Entropy of the pre-squash Gaussian."""
        _, std = self(feat)
        return (0.5 * math.log(2 * math.pi * math.e) + torch.log(std)).sum(-1)


class Critic(nn.Module):
    """State-value head as a categorical distribution over symlog bins."""

    def __init__(self, feat_dim: int, cfg: AgentConfig):
        super().__init__()
        self.net = mlp(feat_dim, [cfg.hidden] * cfg.layers, cfg.value_bins, act="silu", norm=True)
        nn.init.zeros_(self.net[-1].weight)
        self.register_buffer("bins", symlog_bins(cfg.value_bins, dtype=torch.get_default_dtype()))
        with torch.no_grad():
            self.net[-1].bias.copy_(zero_value_logits(self.bins))

    def forward(self, feat):
        return self.net(feat)

    def value(self, feat=None, logits=None):
        if logits is None:
            logits = self(feat)
        return twohot_value(logits, self.bins)


def lambda_returns(rewards, values, continues, gamma: float, lam: float):
    """Bootstrapped lambda-returns along axis 0.

    ``rewards``/``continues`` have H entries, ``values`` H + 1. Works on numpy
    arrays and torch tensors alike.
    """
    H = len(rewards)
    if len(values) != H + 1 or len(continues) != H:
        raise ValueError(f"lambda_returns: lengths rewards={H}, values={len(values)}, "
                         f"continues={len(continues)}; need values = rewards + 1 = continues + 1")
    out = [None] * H
    nxt = values[H]
    for t in reversed(range(H)):
        nxt = rewards[t] + gamma * continues[t] * ((1 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    if isinstance(rewards, torch.Tensor):
        return torch.stack(out)
    return np.stack(out)


@dataclass
class ReturnNormState:
    low: float = 0.0
    high: float = 0.0
    decay: float = 0.99
    percentiles: tuple[float, float] = (5.0, 95.0)

    @property
    def scale(self) -> float:
        return max(self.high - self.low, 1.0)


def return_normalize(returns, state: ReturnNormState):
    """Update the running percentile range from a batch of returns.

    Returns (divisor, updated state). The divisor is never below 1, so
    advantages are only ever scaled down.
    """
    r = torch.as_tensor(returns).detach().reshape(-1).to(torch.float64)
    if r.numel() == 0:
        raise ValueError("return_normalize needs a nonempty batch")
    lo_q, hi_q = state.percentiles
    lo = float(torch.quantile(r, lo_q / 100.0))
    hi = float(torch.quantile(r, hi_q / 100.0))
    d = state.decay
    new = ReturnNormState(low=d * state.low + (1 - d) * lo, high=d * state.high + (1 - d) * hi,
                          decay=d, percentiles=state.percentiles)
    return new.scale, new


class DreamerAgent:
    """World model plus imagination actor-critic, with its own episode replay."""

    algorithm = "dreamer"

    def __init__(self, obs_dim: int, wm_cfg: WMConfig | None = None, ag_cfg: AgentConfig | None = None,
                 batch_size: int = 16, seq_len: int = 64, replay_capacity: int = 1_000_000,
                 seed: int = 0):
        self.wm_cfg = wm_cfg or WMConfig(obs_dim=obs_dim)
        self.cfg = ag_cfg or AgentConfig()
        self.batch_size, self.seq_len = batch_size, seq_len
        self.wm = WorldModel(self.wm_cfg)
        feat = self.wm_cfg.feat_dim
        self.actor = Actor(feat, self.cfg)
        self.critic = Critic(feat, self.cfg)
        self.slow_critic = copy.deepcopy(self.critic)
        for p in self.slow_critic.parameters():
            p.requires_grad_(False)
        self.wm_opt = Optimizer(self.wm.parameters(), self.wm_cfg.lr, eps=self.wm_cfg.eps, clip=self.wm_cfg.clip)
        self.actor_opt = Optimizer(self.actor.parameters(), self.cfg.actor_lr, eps=self.cfg.eps, clip=self.cfg.clip)
        self.critic_opt = Optimizer(self.critic.parameters(), self.cfg.critic_lr, eps=self.cfg.eps,
                                    clip=self.cfg.clip)
        self.retnorm = ReturnNormState(decay=self.cfg.norm_decay, percentiles=self.cfg.return_percentiles)
        self.replay = EpisodeBuffer(obs_dim, capacity=replay_capacity)
        self.rng = np.random.default_rng(seed)
        self.updates = 0
        self.reset()

    @property
    def dtype(self):
        return self.wm.bins.dtype

    def modules(self) -> dict[str, nn.Module]:
        return {"wm": self.wm, "actor": self.actor, "critic": self.critic, "slow_critic": self.slow_critic}

    # -- acting -----------------------------------------------------------------
    def reset(self) -> None:
        self.state = self.wm.initial_state(1)
        self.prev_action = torch.zeros(1, 2, dtype=self.dtype)

    @torch.no_grad()
    def act(self, obs: np.ndarray, explore: bool = True) -> np.ndarray:
        """Filter the belief with ``obs`` and pick the next normalized action.

        The recurrent state is advanced with the previously returned action;
        after ``reset`` it starts from zeros with a zero previous action.
        """
        o = torch.as_tensor(obs, dtype=self.dtype).reshape(1, -1)
        self.state, _ = self.wm.observe_step(self.state, self.prev_action, o, mode=not explore)
        feat = self.state.features()
        action = self.actor.sample(feat)[0] if explore else self.actor.mode(feat)
        self.prev_action = action
        return action[0].numpy().astype(np.float64)

    @torch.no_grad()
    def observe_only(self, obs: np.ndarray, action: np.ndarray) -> None:
        """Track the belief while an external policy (e.g. prefill) chooses ``action``."""
        o = torch.as_tensor(obs, dtype=self.dtype).reshape(1, -1)
        self.state, _ = self.wm.observe_step(self.state, self.prev_action, o)
        self.prev_action = torch.as_tensor(action, dtype=self.dtype).reshape(1, 2)

    # -- learning -----------------------------------------------------------------
    def store(self, obs, prev_action, reward, cont, is_first) -> None:
        self.replay.append(obs, prev_action, reward, cont, is_first)

    def train_step(self) -> dict[str, float]:
        batch = self.replay.sample(self.batch_size, self.seq_len, self.rng)
        self.wm.train()
        total, metrics, states = self.wm.loss(batch)
        self.wm_opt.step(total)

        start = states.flatten().detach()
        weight = (torch.as_tensor(batch.continues, dtype=self.dtype)
                  * torch.as_tensor(batch.mask, dtype=self.dtype)).reshape(-1)
        k = self.cfg.imag_starts
        if 0 < k < len(weight):
            idx = torch.as_tensor(self.rng.choice(len(weight), size=k, replace=False))
            start = LatentState(start.h[idx], start.c[idx], start.z[idx])
            weight = weight[idx]
        traj = self.wm.imagine(start, self.actor.sample, self.cfg.horizon)
        metrics.update(self.agent_update(traj, start_weight=weight))
        self.updates += 1
        return metrics

    def agent_update(self, traj: dict, start_weight: torch.Tensor | None = None) -> dict[str, float]:
        """One actor and critic step on an imagined batch ([H+1, N, F] features)."""
        cfg = self.cfg
        feats = traj["features"].detach()
        rewards, conts = traj["rewards"].detach(), traj["continues"].detach()
        H, N = rewards.shape
        with torch.no_grad():
            values = self.critic.value(feats)
            returns = lambda_returns(rewards, values, conts, cfg.gamma, cfg.lam)
            w0 = torch.ones(N, dtype=feats.dtype) if start_weight is None else start_weight
            weight = torch.cumprod(torch.cat([w0[None], conts[:-1]], 0), 0)
            scale, self.retnorm = return_normalize(returns, self.retnorm)
            adv = (returns - values[:-1]) / scale
            slow_target = symlog(self.slow_critic.value(feats[:-1]))

        logits = self.critic(feats[:-1])
        critic_loss = twohot_loss(logits, symlog(returns), self.critic.bins)
        critic_loss = critic_loss + cfg.slow_reg * twohot_loss(logits, slow_target, self.critic.bins)
        critic_loss = (critic_loss * weight).mean()

        logp = self.actor.log_prob(feats[:-1], traj["raw"].detach())
        ent = self.actor.entropy(feats[:-1])
        actor_loss = -((logp * adv + cfg.entropy_scale * ent) * weight).mean()

        for name, value in (("critic", critic_loss), ("actor", actor_loss)):
            if not torch.isfinite(value):
                raise NonFiniteLossError(name)
        self.critic_opt.step(critic_loss)
        self.actor_opt.step(actor_loss)
        with torch.no_grad():
            d = cfg.critic_ema_decay
            for ps, pf in zip(self.slow_critic.parameters(), self.critic.parameters()):
                ps.mul_(d).add_(pf, alpha=1 - d)
        return {"actor_loss": actor_loss.item(), "critic_loss": critic_loss.item(),
                "entropy": ent.mean().item(), "return_mean": float(returns.mean()),
                "return_scale": float(scale)}

