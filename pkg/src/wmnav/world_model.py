"""Latent world model over LIDAR observations.

An MLP variational autoencoder compresses each symlog-transformed
observation into a stochastic latent ``z``; an LSTM carries the belief
``(h, c)`` forward from ``[z, action]`` and predicts the next latent (prior),
the reward (two-hot over symlog bins) and the continue flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from wmnav.ops import (LOG_SIGMA_MAX, LOG_SIGMA_MIN, LSTMCell, gaussian_sample, kl_diag_gaussians, mlp,
                       symlog, symlog_bins, twohot_loss, twohot_value, zero_value_logits)
from wmnav.replay import SequenceBatch


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str):
        super().__init__(f"non-finite value in loss component '{component}'")
        self.component = component


@dataclass
class WMConfig:
    obs_dim: int
    action_dim: int = 2
    hidden: int = 512
    layers: int = 2
    latent_dim: int = 32
    latent_classes: int = 32  # only used when latent_kind == "categorical"
    recurrent_dim: int = 256
    free_nats: float = 1.0
    kl_scale: float = 1.0
    recon_scale: float = 1.0
    dyn_scale: float = 0.5
    rep_scale: float = 0.1
    reward_bins: int = 41
    latent_kind: str = "gaussian"
    encoder_uses_h: bool = True
    # reconstruction weight of each leading range-reading feature (the rest weigh 1)
    beam_weight: float = 1.0
    lr: float = 3e-4
    eps: float = 1e-8
    clip: float = 100.0

    def __post_init__(self):
        if min(self.obs_dim, self.hidden, self.layers, self.latent_dim, self.recurrent_dim) <= 0:
            raise ValueError("world-model dimensions must be positive")
        if self.free_nats < 0:
            raise ValueError("free_nats must be >= 0")
        if self.latent_kind not in ("gaussian", "categorical"):
            raise ValueError(f"unknown latent_kind {self.latent_kind!r}")

    @property
    def z_dim(self) -> int:
        if self.latent_kind == "categorical":
            return self.latent_dim * self.latent_classes
        return self.latent_dim

    @property
    def stats_dim(self) -> int:
        return self.z_dim if self.latent_kind == "categorical" else 2 * self.latent_dim

    @property
    def feat_dim(self) -> int:
        return self.recurrent_dim + self.z_dim


@dataclass
class LatentState:
    h: torch.Tensor
    c: torch.Tensor
    z: torch.Tensor

    def features(self) -> torch.Tensor:
        return torch.cat([self.h, self.z], -1)

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.c.detach(), self.z.detach())

    def flatten(self) -> "LatentState":
        return LatentState(*(t.reshape(-1, t.shape[-1]) for t in (self.h, self.c, self.z)))


@dataclass
class DynamicsOut:
    h: torch.Tensor
    c: torch.Tensor
    prior: torch.Tensor  # raw distribution statistics
    z: torch.Tensor  # sample from the prior
    reward_logits: torch.Tensor
    continue_prob: torch.Tensor

    @property
    def state(self) -> LatentState:
        return LatentState(self.h, self.c, self.z)


class WorldModel(nn.Module):
    def __init__(self, cfg: WMConfig):
        super().__init__()
        self.cfg = cfg
        hid = [cfg.hidden] * cfg.layers
        enc_in = cfg.obs_dim + (cfg.recurrent_dim if cfg.encoder_uses_h else 0)
        self.encoder = mlp(enc_in, hid, cfg.stats_dim, act="silu", norm=True)
        self.decoder = mlp(cfg.feat_dim, hid, cfg.obs_dim, act="silu", norm=True)
        self.rnn = LSTMCell(cfg.z_dim + cfg.action_dim, cfg.recurrent_dim)
        self.prior_net = mlp(cfg.recurrent_dim, [cfg.hidden], cfg.stats_dim, act="silu", norm=True)
        self.reward_head = mlp(cfg.feat_dim, hid, cfg.reward_bins, act="silu", norm=True)
        self.continue_head = mlp(cfg.feat_dim, hid, 1, act="silu", norm=True)
        nn.init.zeros_(self.reward_head[-1].weight)
        self.register_buffer("bins", symlog_bins(cfg.reward_bins, dtype=torch.get_default_dtype()))
        with torch.no_grad():
            self.reward_head[-1].bias.copy_(zero_value_logits(self.bins))

    # -- latent distributions -------------------------------------------------
    def _split(self, stats):
        mu, log_sigma = stats.chunk(2, -1)
        return mu, log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)

    def _sample(self, stats, noise=None, mode=False):
        if self.cfg.latent_kind == "categorical":
            probs = self._cat_probs(stats)
            if mode:
                idx = probs.argmax(-1)
            else:
                idx = torch.multinomial(probs.reshape(-1, probs.shape[-1]), 1).reshape(probs.shape[:-1])
            onehot = F.one_hot(idx, probs.shape[-1]).to(probs.dtype)
            sample = onehot + probs - probs.detach()  # straight-through
            return sample.reshape(*stats.shape[:-1], -1)
        mu, log_sigma = self._split(stats)
        if mode:
            return mu
        if noise is None:
            noise = torch.randn_like(mu)
        return gaussian_sample(mu, log_sigma, noise)

    def _cat_probs(self, stats):
        logits = stats.reshape(*stats.shape[:-1], self.cfg.latent_dim, self.cfg.latent_classes)
        probs = torch.softmax(logits, -1)
        return 0.99 * probs + 0.01 / self.cfg.latent_classes

    def kl(self, post, prior):
        """KL(post || prior) per state, summed over latent dimensions."""
        if self.cfg.latent_kind == "categorical":
            p, q = self._cat_probs(post), self._cat_probs(prior)
            return (p * (torch.log(p) - torch.log(q))).sum((-1, -2))
        mu_q, ls_q = self._split(post)
        mu_p, ls_p = self._split(prior)
        return kl_diag_gaussians(mu_q, ls_q.exp(), mu_p, ls_p.exp())

    # -- components -------------------------------------------------------------
    def initial_state(self, batch: int) -> LatentState:
        dt = self.bins.dtype
        return LatentState(torch.zeros(batch, self.cfg.recurrent_dim, dtype=dt),
                           torch.zeros(batch, self.cfg.recurrent_dim, dtype=dt),
                           torch.zeros(batch, self.cfg.z_dim, dtype=dt))

    def encode(self, obs, h, noise=None, mode=False):
        """Posterior statistics and sample for raw observations ``obs`` given ``h``.

        Returns (mu, log_sigma, z) for Gaussian latents; for categorical
        latents the first two entries are the logits and ``None``.
        """
        x = symlog(obs)
        if self.cfg.encoder_uses_h:
            x = torch.cat([x, h], -1)
        stats = self.encoder(x)
        z = self._sample(stats, noise, mode)
        if self.cfg.latent_kind == "categorical":
            return stats, None, z
        mu, log_sigma = self._split(stats)
        return mu, log_sigma, z

    def _posterior(self, obs, h, noise=None, mode=False):
        x = symlog(obs)
        if self.cfg.encoder_uses_h:
            x = torch.cat([x, h], -1)
        stats = self.encoder(x)
        return stats, self._sample(stats, noise, mode)

    def decode(self, z, h):
        """Reconstruction in symlog space."""
        return self.decoder(torch.cat([h, z], -1))

    def recurrent(self, state: LatentState, action):
        return self.rnn(torch.cat([state.z, action], -1), (state.h, state.c))

    def head_logits(self, h, z):
        """Reward logits over the bins and the continue logit."""
        feat = torch.cat([h, z], -1)
        return self.reward_head(feat), self.continue_head(feat).squeeze(-1)

    def heads(self, h, z):
        reward_logits, cont_logit = self.head_logits(h, z)
        return reward_logits, torch.sigmoid(cont_logit)

    def reward_mean(self, reward_logits):
        return twohot_value(reward_logits, self.bins)

    def dynamics_step(self, prev: LatentState, action, noise=None, mode=False) -> DynamicsOut:
        """Advance the belief one step without an observation."""
        h, c = self.recurrent(prev, action)
        prior = self.prior_net(h)
        z = self._sample(prior, noise, mode)
        reward_logits, cont = self.heads(h, z)
        return DynamicsOut(h, c, prior, z, reward_logits, cont)

    def observe_step(self, prev: LatentState, action, obs, mode=False):
        """Filtering step used while acting: advance with ``action``, then
        condition on ``obs``. Returns (posterior state, posterior stats)."""
        h, c = self.recurrent(prev, action)
        stats, z = self._posterior(obs, h, mode=mode)
        return LatentState(h, c, z), stats

    # -- training ---------------------------------------------------------------
    def observe(self, obs, prev_actions, is_first):
        """Teacher-forced unroll over [B, L] sequences.

        Returns posterior states (h, c, z stacked on axis 1), posterior stats
        and prior stats, each with one entry per time step.
        """
        B, L = obs.shape[:2]
        state = self.initial_state(B)
        hs, cs, zs, posts, priors = [], [], [], [], []
        for t in range(L):
            reset = is_first[:, t:t + 1]
            state = LatentState(state.h * (1 - reset), state.c * (1 - reset), state.z * (1 - reset))
            h, c = self.recurrent(state, prev_actions[:, t])
            prior = self.prior_net(h)
            post, z = self._posterior(obs[:, t], h)
            state = LatentState(h, c, z)
            hs.append(h), cs.append(c), zs.append(z), posts.append(post), priors.append(prior)
        states = LatentState(torch.stack(hs, 1), torch.stack(cs, 1), torch.stack(zs, 1))
        return states, torch.stack(posts, 1), torch.stack(priors, 1)

    def loss(self, batch: SequenceBatch):
        """World-model objective on a replayed batch.

        Returns (total, metrics, posterior states). Metrics hold the
        component losses plus ``recon_mse`` (mean squared error per feature)
        and ``kl`` (raw posterior-to-prior KL per step).
        """
        cfg = self.cfg
        dt = self.bins.dtype
        obs = torch.as_tensor(batch.obs, dtype=dt)
        acts = torch.as_tensor(batch.prev_actions, dtype=dt)
        rew = torch.as_tensor(batch.rewards, dtype=dt)
        cont = torch.as_tensor(batch.continues, dtype=dt)
        first = torch.as_tensor(batch.is_first, dtype=dt)
        mask = torch.as_tensor(batch.mask, dtype=dt)
        denom = mask.sum().clamp_min(1.0)

        states, post, prior = self.observe(obs, acts, first)
        recon = self.decode(states.z, states.h)
        sq = (recon - symlog(obs)) ** 2
        weights = torch.ones(cfg.obs_dim, dtype=dt)
        weights[:cfg.obs_dim - 4] = cfg.beam_weight
        recon_loss = ((sq * weights).sum(-1) * mask).sum() / denom
        recon_mse = (sq.mean(-1) * mask).sum() / denom

        dyn = self.kl(post.detach(), prior)
        rep = self.kl(post, prior.detach())
        kl_raw = (dyn.detach() * mask).sum() / denom
        dyn_loss = (torch.clamp(dyn, min=cfg.free_nats) * mask).sum() / denom
        rep_loss = (torch.clamp(rep, min=cfg.free_nats) * mask).sum() / denom
        kl_loss = cfg.dyn_scale * dyn_loss + cfg.rep_scale * rep_loss

        reward_logits, cont_logit = self.head_logits(states.h, states.z)
        reward_loss = (twohot_loss(reward_logits, symlog(rew), self.bins) * mask).sum() / denom
        cont_loss = (F.binary_cross_entropy_with_logits(cont_logit, cont, reduction="none")
                     * mask).sum() / denom

        total = cfg.recon_scale * recon_loss + cfg.kl_scale * kl_loss + reward_loss + cont_loss
        metrics = {"recon": recon_loss, "kl": kl_raw, "kl_loss": kl_loss,
                   "reward": reward_loss, "continue": cont_loss, "recon_mse": recon_mse}
        for name, value in metrics.items():
            if not torch.isfinite(value):
                raise NonFiniteLossError(name)
        return total, {k: v.item() for k, v in metrics.items()}, states

    def imagine(self, start: LatentState, policy, horizon: int):
        """Roll the learned dynamics forward ``horizon`` steps from ``start``.

        ``policy(features)`` returns (env action, raw sample) and is called on
        the detached features of each state. Runs without gradients, so world
        model parameters receive none from the agent update.
        """
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        state = start.detach()
        feats, actions, raws, rewards, conts = [state.features()], [], [], [], []
        with torch.no_grad():
            for _ in range(horizon):
                action, raw = policy(state.features())
                out = self.dynamics_step(state, action)
                state = out.state
                feats.append(state.features())
                actions.append(action)
                raws.append(raw)
                rewards.append(self.reward_mean(out.reward_logits))
                conts.append(out.continue_prob)
        return {"features": torch.stack(feats), "actions": torch.stack(actions), "raw": torch.stack(raws),
                "rewards": torch.stack(rewards), "continues": torch.stack(conts)}


def to_tensor(x, dtype=None) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.get_default_dtype())
