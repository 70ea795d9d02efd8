"""Training objectives: expectile value regression, advantage-weighted state
prediction (with an explicit-value alternative), InfoNCE-style contrastive
regularization, and the imitation + contrastive controller objective.

All losses are masked means over valid timesteps; padded positions contribute
exactly zero to the value and the gradient. Functions accept precomputed
forward passes so a training step can share one set of rollouts across the
three objectives without changing any semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import PreconditionError
from .nets import (
    TorchBatch,
    decode_actions,
    encode_common,
    encode_task,
    encode_task_rows,
    value_sequence,
)

_ADVANTAGE_SOURCES = ("predicted", "dataset")


@dataclass
class LossConfig:
    gamma: float = 0.99
    epsilon_expectile: float = 0.9
    alpha: float = 10.0
    beta: float = 0.05
    sigma_temp: float = 0.1
    weight_clip: float = 100.0
    advantage_source: str = "predicted"

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if not 0.0 < self.epsilon_expectile < 1.0:
            raise ValueError("epsilon_expectile must be in (0, 1)")
        if min(self.alpha, self.beta, self.sigma_temp, self.weight_clip) < 0 or (
            self.alpha == 0 or self.sigma_temp == 0 or self.weight_clip == 0
        ):
            raise ValueError("alpha, sigma_temp and weight_clip must be positive")
        if self.advantage_source not in _ADVANTAGE_SOURCES:
            raise ValueError(f"advantage_source must be one of {_ADVANTAGE_SOURCES}")


def expectile_term(eps: float, n):
    """Asymmetric squared error |eps - 1(n < 0)| * n^2."""
    if isinstance(n, torch.Tensor):
        return torch.where(n >= 0, eps * n * n, (1.0 - eps) * n * n)
    return (eps if n >= 0 else 1.0 - eps) * n * n


def masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    total = mask.sum()
    if total.item() == 0:
        raise ValueError("empty valid mask")
    return (values * mask).sum() / total


def advantage_weight(r, v_next_target, v_now, cfg: LossConfig):
    """exp of the scaled TD-residual, clamped at weight_clip; constant w.r.t.
    gradients."""
    cap = math.log(cfg.weight_clip)
    if isinstance(r, torch.Tensor) or isinstance(v_now, torch.Tensor):
        adv = (r + cfg.gamma * v_next_target - v_now) / cfg.alpha
        w = torch.exp(torch.clamp(adv, max=cap)).clamp(max=cfg.weight_clip)
        return w.detach()
    adv = (r + cfg.gamma * v_next_target - v_now) / cfg.alpha
    return min(math.exp(min(adv, cap)), cfg.weight_clip)


def value_loss(
    batch: TorchBatch,
    value_net,
    target_net,
    cfg: LossConfig,
    v_tot: torch.Tensor | None = None,
    v_tot_target: torch.Tensor | None = None,
) -> torch.Tensor:
    """Expectile regression of V_tot onto one-step bootstrapped returns.

    Gradient reaches only the online value parameters; the target pass is
    non-differentiable and the bootstrap is gated by the done flag.
    """
    if v_tot is None:
        _, v_tot = value_sequence(value_net, batch)
    if v_tot_target is None:
        with torch.no_grad():
            _, v_tot_target = value_sequence(target_net, batch, include_final=True)
    v_tot_target = v_tot_target.detach()
    target = batch.rewards + cfg.gamma * (1.0 - batch.dones) * v_tot_target[:, 1:]
    residual = target - v_tot
    return masked_mean(expectile_term(cfg.epsilon_expectile, residual), batch.valid)


def prediction_error(s_pred: torch.Tensor, s_target: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((s_pred - s_target) ** 2).sum(dim=-1)


def _next_value_estimate(batch, target_net, local, cfg):
    """V-bar of the successor, per the configured advantage source, gated by done."""
    with torch.no_grad():
        if cfg.advantage_source == "predicted":
            _, v_next = target_net.forward_local(local.detach())
        else:
            _, v_seq = value_sequence(target_net, batch, include_final=True)
            v_next = v_seq[:, 1:]
        return v_next * (1.0 - batch.dones)


def planner_loss(
    batch: TorchBatch,
    encoder,
    predictor,
    value_net,
    target_net,
    cfg: LossConfig,
    skills: torch.Tensor | None = None,
    v_tot_now: torch.Tensor | None = None,
    weights: torch.Tensor | None = None,
):
    """Advantage-weighted next-state prediction.

    The weight exp((r + gamma*Vbar - V) / alpha) is a stop-gradient factor;
    gradients flow to the skill encoder and predictor only. Returns the loss
    and the mean advantage weight over valid positions (for logging).
    """
    if skills is None:
        skills = encode_common(encoder, batch)
    s_pred, local = predictor(skills, batch.spec.n_enemies)
    err = prediction_error(s_pred, batch.global_states[:, 1:])

    if weights is None:
        with torch.no_grad():
            if v_tot_now is None:
                _, v_tot_now = value_sequence(value_net, batch)
            v_next = _next_value_estimate(batch, target_net, local, cfg)
            weights = advantage_weight(
                batch.rewards, v_next, v_tot_now.detach(), cfg
            )
    loss = masked_mean(weights * err, batch.valid)
    mean_weight = masked_mean(weights, batch.valid)
    return loss, mean_weight


def planner_loss_explicit(
    batch: TorchBatch,
    encoder,
    predictor,
    target_net,
    cfg: LossConfig,
    alpha: float | None = None,
    skills: torch.Tensor | None = None,
    include_value_term: bool = True,
) -> torch.Tensor:
    """Explicit trade-off mode: -Vbar(l) + alpha * prediction error.

    The value term differentiates through the predicted local embeddings
    (the frozen target parameters pass gradients to their inputs).
    """
    alpha = cfg.alpha if alpha is None else alpha
    if skills is None:
        skills = encode_common(encoder, batch)
    s_pred, local = predictor(skills, batch.spec.n_enemies)
    err = alpha * prediction_error(s_pred, batch.global_states[:, 1:])
    if include_value_term:
        _, v_next = target_net.forward_local(local)
        err = err - v_next
    return masked_mean(err, batch.valid)


def contrastive_loss(
    q: torch.Tensor,
    k_pos: torch.Tensor,
    k_negs: torch.Tensor,
    sigma: float,
) -> torch.Tensor:
    """Softmax-over-similarities loss with shared negatives.

    q: [n, d] online embeddings (differentiable); k_pos: [n, d] momentum
    keys; k_negs: [m, d] momentum negatives shared across queries. All
    vectors are expected to be unit-norm so dot products are cosines.
    """
    if k_negs.ndim != 2 or k_negs.shape[0] < 1:
        raise ValueError("need at least one negative sample")
    pos = (q * k_pos.detach()).sum(dim=-1) / sigma
    neg = q @ k_negs.detach().transpose(0, 1) / sigma
    logits = torch.cat([pos.unsqueeze(-1), neg], dim=-1)
    return (torch.logsumexp(logits, dim=-1) - pos).mean()


def masked_nll(logits, actions, avail, valid):
    """Per-position negative log-likelihood under a masked softmax."""
    masked = logits.masked_fill(~avail, float("-inf"))
    logp = torch.log_softmax(masked, dim=-1)
    nll = -logp.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    return masked_mean(nll, valid.unsqueeze(-1).expand_as(nll))


def sample_positive_pairs(batch: TorchBatch, rng: np.random.Generator):
    """Two distinct alive agents per valid timestep, or None if no timestep
    has at least two alive agents."""
    alive = batch.alive[:, : batch.length].numpy()
    valid = batch.valid.numpy() > 0
    eligible = valid & (alive.sum(-1) >= 2)
    if not eligible.any():
        return None
    scores = rng.random(alive.shape) + (~alive) * 10.0
    order = np.argsort(scores, axis=-1)
    b_idx, t_idx = np.nonzero(eligible)
    return b_idx, t_idx, order[b_idx, t_idx, 0], order[b_idx, t_idx, 1]


def controller_loss(
    batch: TorchBatch,
    decoder,
    encoder,
    task_encoder,
    task_momentum,
    negatives: torch.Tensor | None,
    cfg: LossConfig,
    pair_rng: np.random.Generator | None = None,
    beta: float | None = None,
    skills: torch.Tensor | None = None,
    task_skills: torch.Tensor | None = None,
    hidden_seq: torch.Tensor | None = None,
):
    """Masked action imitation plus contrastive task-skill regularization.

    The common skills are inputs here (frozen for this call); gradients
    reach the decoder and the online task encoder only. Positive pairs are
    two random alive agents at a shared timestep, queries through the online
    encoder and keys through the momentum encoder; negatives come from other
    tasks. Returns (loss, bc term, contrastive term).
    """
    beta = cfg.beta if beta is None else beta
    if skills is None:
        with torch.no_grad():
            skills = encode_common(encoder, batch)
    skills = skills.detach()
    if task_skills is None:
        task_skills = encode_task(task_encoder, batch)

    logits = decode_actions(decoder, batch, skills, task_skills, hidden_seq=hidden_seq)
    bc = masked_nll(logits, batch.actions, batch.avail[:, : batch.length], batch.valid)

    if beta == 0.0:
        zero = torch.zeros((), dtype=bc.dtype)
        return bc, bc, zero

    if negatives is None:
        raise ValueError("need at least one negative sample")
    pairs = sample_positive_pairs(batch, pair_rng or np.random.default_rng(0))
    if pairs is None:
        raise PreconditionError(
            "no contrastive positives: fewer than 2 alive agents at every timestep"
        )
    b_idx, t_idx, m_idx, n_idx = pairs
    with torch.no_grad():
        k_pos = encode_task_rows(task_momentum, batch, b_idx, t_idx, n_idx)
    q = task_skills[b_idx, t_idx, m_idx]
    contrast = contrastive_loss(q, k_pos, negatives, cfg.sigma_temp)
    return bc + beta * contrast, bc, contrast
