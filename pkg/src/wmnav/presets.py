"""Run configurations for the reduced-scale stage-1 verification runs."""

from __future__ import annotations

from wmnav.harness import RunConfig

ACCEPTANCE_EPISODES = 3000
EVAL_EVERY = 100
TARGET_SUCCESS = 0.9


def sac_stage1(seed: int, out: str) -> RunConfig:
    return RunConfig(algorithm="sac", stage=1, n_beams=10, episodes=ACCEPTANCE_EPISODES, eval_episodes=100,
                     seed=seed, out=out, eval_every=EVAL_EVERY, target_success=TARGET_SUCCESS)

# Reduced dreamer: narrower networks, shorter replay windows and a subsample
# of imagination starts so a stage-1 run fits a single CPU core.
DREAMER_SMOKE = dict(
    model_hidden=128, agent_hidden=128, recurrent_dim=128, latent_dim=16,
    batch_size=16, seq_len=32, imag_starts=256, train_ratio=0.25, prefill=2000,
    actor_lr=1e-4, critic_lr=1e-4,
)
SCALING_EPISODES = 1500


def dreamer_stage1(seed: int, out: str, n_beams: int = 10, **overrides) -> RunConfig:
    params = dict(algorithm="dreamer", stage=1, n_beams=n_beams, episodes=ACCEPTANCE_EPISODES, eval_episodes=100,
                  seed=seed, out=out, eval_every=EVAL_EVERY, target_success=TARGET_SUCCESS, **DREAMER_SMOKE)
    params.update(overrides)
    return RunConfig(**params)


def dreamer_scaling(seed: int, out: str) -> RunConfig:
    """360-beam stability run: fixed length, no early stop.

    Each beam's reconstruction term is weighted 10/360 so the scan as a whole
    weighs what it does with 10 beams; left at 1 the 360 beam terms drown out
    the goal distance and bearing and the latent stops encoding them.
    """
    return dreamer_stage1(seed, out, n_beams=360, episodes=SCALING_EPISODES, target_success=None,
                          beam_weight=10 / 360)
