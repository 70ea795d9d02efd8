"""Independent verification tools.

Three oracles that never share code with the training path:

* exact enumeration of the contrastive/KL inequality on small discrete
  worlds (finite observation sets, finite skill alphabet);
* the expectile identity (the minimizer of the asymmetric squared loss is
  the expectile, found two independent ways);
* a central finite-difference gradient check for any loss closure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class DiscreteSkillWorld:
    """A fully enumerable multi-task world.

    encoder[i, x, z] is the probability of skill z given observation x of
    task i (rows stochastic over z); obs_probs[i, x] the probability of
    drawing x within task i; priors[i, z] each task's skill prior. Tasks are
    sampled uniformly.
    """

    encoder: np.ndarray    # [N, n_obs, n_skills]
    obs_probs: np.ndarray  # [N, n_obs]
    priors: np.ndarray     # [N, n_skills]

    def __post_init__(self):
        self.encoder = np.asarray(self.encoder, dtype=np.float64)
        self.obs_probs = np.asarray(self.obs_probs, dtype=np.float64)
        self.priors = np.asarray(self.priors, dtype=np.float64)
        if self.encoder.ndim != 3:
            raise ValueError("encoder table must be [tasks, obs, skills]")
        for name, table in (
            ("encoder", self.encoder),
            ("obs_probs", self.obs_probs),
            ("priors", self.priors),
        ):
            if (table < 0).any():
                raise ValueError(f"{name} has negative probabilities")
            sums = table.sum(axis=-1)
            if not np.allclose(sums, 1.0, atol=1e-12):
                raise ValueError(f"{name} rows do not sum to 1")

    @property
    def n_tasks(self) -> int:
        return self.encoder.shape[0]

    @property
    def n_skills(self) -> int:
        return self.encoder.shape[2]

    def skill_marginal(self) -> np.ndarray:
        """p(z) under uniform task choice."""
        per_task = np.einsum("ix,ixz->iz", self.obs_probs, self.encoder)
        return per_task.mean(axis=0)


def random_world(
    rng: np.random.Generator,
    n_tasks: int | None = None,
    max_obs: int = 6,
    max_skills: int = 8,
) -> DiscreteSkillWorld:
    n = int(n_tasks or rng.integers(1, 5))
    n_obs = int(rng.integers(2, max_obs + 1))
    n_skills = int(rng.integers(2, max_skills + 1))
    return DiscreteSkillWorld(
        encoder=rng.dirichlet(np.ones(n_skills), size=(n, n_obs)),
        obs_probs=rng.dirichlet(np.ones(n_obs), size=n),
        priors=rng.dirichlet(np.ones(n_skills), size=n),
    )


@dataclass
class Theorem1Result:
    lhs: float          # contrastive bound, one negative observation per other task
    mutual_info: float  # I(z; task)
    rhs: float          # -E[KL(encoder || task prior)]
    expected_kl: float
    holds: bool

    @property
    def margin_lhs(self) -> float:
        return self.lhs - self.rhs

    @property
    def margin_kl(self) -> float:
        return self.expected_kl - self.mutual_info


def _safe_log(x: np.ndarray) -> np.ndarray:
    out = np.full_like(x, -np.inf)
    np.log(x, out=out, where=x > 0)
    return out


def theorem1_check(world: DiscreteSkillWorld, tol: float = 1e-9) -> Theorem1Result:
    """Exact enumeration of both sides of the contrastive/KL sandwich.

    The left expectation draws one observation from every other task as the
    negatives; the enumeration walks every combination, so the returned
    numbers are exact up to float rounding.
    """
    n, n_obs, n_skills = world.encoder.shape
    p_z = world.skill_marginal()
    z_live = p_z > 0
    # h[i, x, z] = encoder / marginal, only meaningful where p(z) > 0
    h = np.zeros_like(world.encoder)
    np.divide(world.encoder, p_z[None, None, :], out=h, where=z_live[None, None, :])

    lhs = 0.0
    for i in range(n):
        # enumerate negative combinations over the other tasks
        denom_sum = np.zeros((1, n_skills))
        weight = np.ones(1)
        for j in range(n):
            if j == i:
                continue
            denom_sum = (denom_sum[:, None, :] + h[j][None, :, :]).reshape(
                -1, n_skills
            )
            weight = (weight[:, None] * world.obs_probs[j][None, :]).reshape(-1)
        ratio_log = _safe_log(h[i][:, None, :]) - _safe_log(
            h[i][:, None, :] + denom_sum[None, :, :]
        )
        # expectation over x ~ D^i, z ~ g(.|x), and the negative draws
        mass = (
            world.obs_probs[i][:, None, None]
            * weight[None, :, None]
            * world.encoder[i][:, None, :]
        )
        lhs -= float(np.sum(np.where(mass > 0, mass * ratio_log, 0.0))) / n

    p_z_task = np.einsum("ix,ixz->iz", world.obs_probs, world.encoder)
    ratio = np.zeros_like(p_z_task)
    np.divide(p_z_task, p_z[None, :], out=ratio, where=(p_z_task > 0) & z_live)
    mi_terms = np.where(p_z_task > 0, p_z_task * _safe_log(ratio), 0.0)
    mutual_info = float(mi_terms.sum() / n)

    kl_log = _safe_log(world.encoder) - _safe_log(world.priors[:, None, :])
    kl_terms = np.where(world.encoder > 0, world.encoder * kl_log, 0.0)
    expected_kl = float(
        np.einsum("ix,ix->", world.obs_probs, kl_terms.sum(axis=-1)) / n
    )

    rhs = -expected_kl
    holds = (lhs >= rhs - tol) and (mutual_info <= expected_kl + tol)
    return Theorem1Result(lhs, mutual_info, rhs, expected_kl, holds)


def verify_random_worlds(seed: int, n_worlds: int, tol: float = 1e-9):
    """Run the enumeration on seeded random worlds; returns the result list."""
    rng = np.random.default_rng(seed)
    return [theorem1_check(random_world(rng), tol) for _ in range(n_worlds)]


# --------------------------------------------------------------------------
# Expectile identity
# --------------------------------------------------------------------------

def expectile_loss_minimizer(samples, eps: float, tol: float = 1e-10) -> float:
    """Golden-section minimization of sum_i |eps - 1(x_i < v)| (x_i - v)^2."""
    xs = np.asarray(samples, dtype=np.float64)

    def f(v):
        d = xs - v
        return float(np.sum(np.where(d >= 0, eps, 1.0 - eps) * d * d))

    lo, hi = float(xs.min()) - 1.0, float(xs.max()) + 1.0
    a, b = hi - _GOLDEN * (hi - lo), lo + _GOLDEN * (hi - lo)
    fa, fb = f(a), f(b)
    while hi - lo > tol:
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - _GOLDEN * (hi - lo)
            fa = f(a)
        else:
            lo, a, fa = a, b, fb
            b = lo + _GOLDEN * (hi - lo)
            fb = f(b)
    return (lo + hi) / 2


def expectile_root(samples, eps: float, tol: float = 1e-12) -> float:
    """Bisection on the stationarity condition sum |eps - 1(x < v)| (x - v) = 0."""
    xs = np.asarray(samples, dtype=np.float64)

    def psi(v):
        d = xs - v
        return float(np.sum(np.where(d >= 0, eps, 1.0 - eps) * d))

    lo, hi = float(xs.min()), float(xs.max())
    if lo == hi:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if psi(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def expectile_identity_check(samples, eps: float) -> tuple[float, float]:
    """Returns (loss minimizer, root-solved expectile); they must agree."""
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must be in (0, 1)")
    return expectile_loss_minimizer(samples, eps), expectile_root(samples, eps)


# --------------------------------------------------------------------------
# Finite-difference gradient check
# --------------------------------------------------------------------------

def gradcheck(
    loss_closure,
    params: dict[str, torch.Tensor],
    perturb: float = 1e-5,
    max_entries: int = 1000,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    Checks every parameter entry, or a seeded random subset when the total
    entry count exceeds ``max_entries``. Relative error is
    |analytic - numeric| / max(1, |numeric|).
    """
    params = dict(sorted(params.items()))
    if not params:
        return 0.0
    loss = loss_closure()
    if not torch.isfinite(loss):
        raise ValueError("loss is not finite at the given parameters")
    grads = torch.autograd.grad(
        loss, list(params.values()), allow_unused=True
    )
    analytic = {
        name: (g if g is not None else torch.zeros_like(p)).reshape(-1)
        for (name, p), g in zip(params.items(), grads)
    }

    entries = [(name, i) for name, p in params.items() for i in range(p.numel())]
    if len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[int(i)] for i in chosen]

    worst = 0.0
    for name, idx in entries:
        flat = params[name].data.reshape(-1)
        original = flat[idx].item()
        flat[idx] = original + perturb
        f_plus = loss_closure().item()
        flat[idx] = original - perturb
        f_minus = loss_closure().item()
        flat[idx] = original
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError(f"non-finite loss when perturbing '{name}'[{idx}]")
        numeric = (f_plus - f_minus) / (2.0 * perturb)
        err = abs(analytic[name][idx].item() - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
