"""Differentiable building blocks shared by every agent.

Reverse-mode differentiation comes from torch autograd; this module adds the
pieces the agents need on top of it: symlog transforms, two-hot regression,
reparameterised Gaussians, the LSTM cell, MLP stacks, parameter counting and
the Adam step with optional global-norm clipping.
"""

from __future__ import annotations

import math
from typing import Iterable

import torch
from torch import nn

LOG_SIGMA_MIN, LOG_SIGMA_MAX = -5.0, 2.0


def symlog(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.log1p(torch.abs(x))


def symexp(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.expm1(torch.abs(x))


def symlog_bins(n_bins: int = 41, low: float = -15.0, high: float = 150.0,
                dtype=torch.float64) -> torch.Tensor:
    """Bins evenly spaced in symlog space between symlog(low) and symlog(high)."""
    lo = math.copysign(math.log1p(abs(low)), low)
    hi = math.copysign(math.log1p(abs(high)), high)
    return torch.linspace(lo, hi, n_bins, dtype=dtype)


def twohot(y: torch.Tensor, bins: torch.Tensor) -> torch.Tensor:
    """Encode scalars as weights on the two bracketing bins.

    ``y`` of any shape gives weights of shape ``y.shape + (len(bins),)``.
    Values outside the bin range are clipped to the end bins.
    """
    if bins.ndim != 1 or len(bins) < 2:
        raise ValueError("twohot needs a 1-D grid of at least 2 bins")
    y = torch.as_tensor(y, dtype=bins.dtype).clamp(bins[0], bins[-1])
    upper = torch.searchsorted(bins, y.detach().contiguous(), right=True).clamp(1, len(bins) - 1)
    lower = upper - 1
    lo_val, hi_val = bins[lower], bins[upper]
    w_hi = ((y - lo_val) / (hi_val - lo_val)).clamp(0.0, 1.0)
    out = torch.zeros(*y.shape, len(bins), dtype=bins.dtype, device=bins.device)
    out.scatter_(-1, lower.unsqueeze(-1), (1.0 - w_hi).unsqueeze(-1))
    out.scatter_add_(-1, upper.unsqueeze(-1), w_hi.unsqueeze(-1))
    return out


def twohot_expectation(probs: torch.Tensor, bins: torch.Tensor) -> torch.Tensor:
    return (probs * bins).sum(-1)


def twohot_value(logits: torch.Tensor, bins: torch.Tensor) -> torch.Tensor:
    """Scalar read-out of a categorical over symlog bins: symexp of the expected bin."""
    return symexp(twohot_expectation(torch.softmax(logits, -1), bins))


def zero_value_logits(bins: torch.Tensor, iters: int = 100) -> torch.Tensor:
    """Logits ``beta * bins`` whose ``twohot_value`` read-out is zero.

    This is the maximum-entropy distribution over the grid with a zero
    read-out. Used to initialise output biases: the grid is not symmetric
    about zero, so uniform logits would read out as a positive value.
    """
    lo, hi = -10.0, 0.0
    for _ in range(iters):  # read-out increases with beta
        beta = 0.5 * (lo + hi)
        if twohot_value(beta * bins, bins) > 0:
            hi = beta
        else:
            lo = beta
    return torch.log_softmax(0.5 * (lo + hi) * bins, -1)


def twohot_loss(logits: torch.Tensor, target: torch.Tensor, bins: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of ``logits`` against the two-hot encoding of ``target``
    (``target`` already in bin space). Returns per-element loss."""
    weights = twohot(target.detach(), bins).to(logits.dtype)
    return -(weights * torch.log_softmax(logits, -1)).sum(-1)


def gaussian_sample(mu: torch.Tensor, log_sigma: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw mu + exp(log_sigma) * noise."""
    if mu.shape != log_sigma.shape or mu.shape != noise.shape:
        raise ValueError(f"gaussian_sample: shapes differ {tuple(mu.shape)}, "
                         f"{tuple(log_sigma.shape)}, {tuple(noise.shape)}")
    return mu + torch.exp(log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)) * noise


def kl_diag_gaussians(mu_q, sigma_q, mu_p, sigma_p) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    kl = (torch.log(sigma_p / sigma_q)
          + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p ** 2) - 0.5)
    return kl.sum(-1)


def lstm_cell(x, h, c, w_ih, w_hh, bias):
    """One LSTM step. Gate blocks are stacked in the order input, forget,
    candidate, output along the first weight axis."""
    if w_ih.shape[1] != x.shape[-1] or w_hh.shape[1] != h.shape[-1]:
        raise ValueError(f"lstm_cell: input {tuple(x.shape)} / hidden {tuple(h.shape)} do not match "
                         f"weights {tuple(w_ih.shape)} / {tuple(w_hh.shape)}")
    gates = x @ w_ih.T + h @ w_hh.T + bias
    i, f, g, o = gates.chunk(4, -1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


class LSTMCell(nn.Module):
    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size, self.hidden_size = input_size, hidden_size
        bound = 1.0 / math.sqrt(hidden_size)
        self.w_ih = nn.Parameter(torch.empty(4 * hidden_size, input_size).uniform_(-bound, bound))
        self.w_hh = nn.Parameter(torch.empty(4 * hidden_size, hidden_size).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(4 * hidden_size))

    def forward(self, x, state):
        h, c = state
        return lstm_cell(x, h, c, self.w_ih, self.w_hh, self.bias)


def mlp(in_dim: int, hidden: Iterable[int], out_dim: int, act: str = "relu",
        norm: bool = False) -> nn.Sequential:
    """Dense stack. ``norm`` inserts LayerNorm before each hidden activation."""
    acts = {"relu": nn.ReLU, "silu": nn.SiLU, "tanh": nn.Tanh}
    layers: list[nn.Module] = []
    d = in_dim
    for width in hidden:
        layers.append(nn.Linear(d, width))
        if norm:
            layers.append(nn.LayerNorm(width))
        layers.append(acts[act]())
        d = width
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


def count_parameters(*modules: nn.Module) -> int:
    """Total element count of all trainable tensors across the given modules."""
    return sum(p.numel() for m in modules for p in m.parameters())


def gradients(loss: torch.Tensor, params: list[torch.Tensor]) -> list[torch.Tensor]:
    """d loss / d params, with zeros for parameters the loss does not reach."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


class Optimizer:
    """Adam over a fixed parameter list, with optional global-norm clipping.

    ``step(loss)`` runs backward, clips, applies Adam and zeroes gradients.
    """

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.clip = clip
        self.opt = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps, foreach=True)

    def step(self, loss: torch.Tensor | None = None) -> float:
        if loss is not None:
            self.opt.zero_grad(set_to_none=True)
            loss.backward()
        return adam_step(self.opt, self.params, self.clip)

    def state_dict(self):
        return self.opt.state_dict()

    def load_state_dict(self, state):
        self.opt.load_state_dict(state)


def adam_step(opt: torch.optim.Optimizer, params: list[torch.Tensor], clip: float | None = None) -> float:
    """Clip populated gradients to global norm ``clip``, step, zero.

    Returns the pre-clip gradient norm (0.0 when clipping is disabled).
    """
    norm = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    if clip is not None and grads:
        total = torch.linalg.vector_norm(torch.stack(torch._foreach_norm(grads)))
        norm = float(total)
        if norm > clip:
            torch._foreach_mul_(grads, clip / norm)
    opt.step()
    opt.zero_grad(set_to_none=True)
    return norm


@torch.no_grad()
def soft_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    """target <- (1 - tau) * target + tau * source, matched by parameter name."""
    src = dict(source.named_parameters())
    tgt = dict(target.named_parameters())
    if src.keys() != tgt.keys():
        raise ValueError(f"soft_update: parameter names differ: {sorted(src.keys() ^ tgt.keys())}")
    names = list(tgt)
    for name in names:
        if tgt[name].shape != src[name].shape:
            raise ValueError(f"soft_update: shape mismatch for {name}")
    torch._foreach_lerp_([tgt[n] for n in names], [src[n] for n in names], float(tau))
