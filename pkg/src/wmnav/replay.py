"""Replay storage: a transition ring buffer for the model-free agents and an
episode store that serves fixed-length windows for world-model training."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class NotReadyError(RuntimeError):
    """The buffer holds too little data for the requested sample."""


class TransitionBuffer:
    def __init__(self, obs_dim: int, action_dim: int = 2, capacity: int = 100_000):
        self.obs_dim, self.action_dim, self.capacity = obs_dim, action_dim, capacity
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self.pos = 0
        self.size = 0

    def __len__(self):
        return self.size

    def append(self, obs, action, reward, next_obs, done) -> None:
        obs, next_obs = np.asarray(obs), np.asarray(next_obs)
        if obs.shape != (self.obs_dim,) or next_obs.shape != (self.obs_dim,):
            raise ValueError(f"observation shape {obs.shape}/{next_obs.shape}, expected ({self.obs_dim},)")
        if np.shape(action) != (self.action_dim,):
            raise ValueError(f"action shape {np.shape(action)}, expected ({self.action_dim},)")
        i = self.pos
        self.obs[i], self.actions[i], self.rewards[i] = obs, action, reward
        self.next_obs[i], self.dones[i] = next_obs, float(done)
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def index_of_oldest(self) -> int:
        return self.pos if self.size == self.capacity else 0

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if batch_size > self.size:
            raise NotReadyError(f"need {batch_size} transitions, have {self.size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return {"obs": self.obs[idx], "actions": self.actions[idx], "rewards": self.rewards[idx],
                "next_obs": self.next_obs[idx], "dones": self.dones[idx]}

    def dump(self, path) -> None:
        np.savez(path, obs=self.obs[:self.size], actions=self.actions[:self.size],
                 rewards=self.rewards[:self.size], next_obs=self.next_obs[:self.size],
                 dones=self.dones[:self.size])


@dataclass
class SequenceBatch:
    """Arrays shaped [B, L, ...]. ``mask`` is 0 on padding past an episode end.

    Step t holds the observation o_t, the action that led to it (zero at an
    episode start), the reward received on arriving, and continue = 0 only
    on the terminal step.
    """
    obs: np.ndarray
    prev_actions: np.ndarray
    rewards: np.ndarray
    continues: np.ndarray
    is_first: np.ndarray
    mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.obs.shape[:2]


class EpisodeBuffer:
    """Whole-episode storage with a cap on total steps (oldest episodes evicted)."""

    def __init__(self, obs_dim: int, action_dim: int = 2, capacity: int = 1_000_000):
        self.obs_dim, self.action_dim, self.capacity = obs_dim, action_dim, capacity
        self.episodes: list[dict[str, np.ndarray]] = []
        self._current: dict[str, list] | None = None
        self.total_steps = 0

    def __len__(self):
        return self.total_steps

    def append(self, obs, prev_action, reward: float, cont: float, is_first: bool) -> None:
        """Add one step; ``is_first`` opens a new episode, ``cont == 0`` closes it."""
        obs = np.asarray(obs, dtype=np.float32)
        if obs.shape != (self.obs_dim,):
            raise ValueError(f"observation shape {obs.shape}, expected ({self.obs_dim},)")
        if is_first or self._current is None:
            self._finish()
            self._current = {"obs": [], "prev_actions": [], "rewards": [], "continues": []}
        cur = self._current
        cur["obs"].append(obs)
        cur["prev_actions"].append(np.asarray(prev_action, dtype=np.float32))
        cur["rewards"].append(float(reward))
        cur["continues"].append(float(cont))
        if cont == 0.0:
            self._finish()

    def _finish(self) -> None:
        cur, self._current = self._current, None
        if not cur or not cur["obs"]:
            return
        ep = {k: np.asarray(v, dtype=np.float32) for k, v in cur.items()}
        self.episodes.append(ep)
        self.total_steps += len(ep["obs"])
        while self.total_steps > self.capacity and len(self.episodes) > 1:
            self.total_steps -= len(self.episodes.pop(0)["obs"])

    def _stored(self) -> list[dict[str, np.ndarray]]:
        eps = list(self.episodes)
        if self._current and self._current["obs"]:
            eps.append({k: np.asarray(v, dtype=np.float32) for k, v in self._current.items()})
        return eps

    def sample(self, batch: int, length: int, rng: np.random.Generator) -> SequenceBatch:
        """``batch`` windows of ``length`` steps, each inside a single episode.

        For an episode of ``n >= length`` steps the window start is drawn
        from the ``n + length - 1`` positions whose window overlaps it, and
        the overlap is kept (padded at the end). Every step, the first and
        the terminal one included, then lies in exactly ``length`` of those
        windows, and weighting episodes by the count makes every stored step
        equally likely to be covered. Shorter episodes are taken whole, padded
        and masked.
        """
        eps = self._stored()
        if not eps:
            raise NotReadyError("episode buffer is empty")
        lengths = np.array([len(e["obs"]) for e in eps])
        weights = np.where(lengths >= length, lengths + length - 1, length)
        probs = weights / weights.sum()
        out = {
            "obs": np.zeros((batch, length, self.obs_dim), np.float32),
            "prev_actions": np.zeros((batch, length, self.action_dim), np.float32),
            "rewards": np.zeros((batch, length), np.float32),
            "continues": np.zeros((batch, length), np.float32),
            "is_first": np.zeros((batch, length), np.float32),
            "mask": np.zeros((batch, length), np.float32),
        }
        for b in range(batch):
            k = rng.choice(len(eps), p=probs)
            ep, n = eps[k], lengths[k]
            offset = int(rng.integers(1 - length, n)) if n >= length else 0
            start, stop = max(offset, 0), min(offset + length, n)
            m = stop - start
            for key in ("obs", "prev_actions", "rewards", "continues"):
                out[key][b, :m] = ep[key][start:stop]
            out["is_first"][b, 0] = 1.0
            out["mask"][b, :m] = 1.0
        return SequenceBatch(**out)

    def dump(self, path) -> None:
        arrays = {}
        for i, ep in enumerate(self._stored()):
            for k, v in ep.items():
                arrays[f"ep{i:06d}_{k}"] = v
        np.savez(Path(path), **arrays)
