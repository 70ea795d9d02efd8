import math

import numpy as np
import pytest
import torch

from conftest import toy_batch

from hissd import losses, nets, oracle
from hissd.errors import PreconditionError
from hissd.losses import (
    LossConfig,
    advantage_weight,
    contrastive_loss,
    controller_loss,
    expectile_term,
    planner_loss,
    planner_loss_explicit,
    value_loss,
)
from hissd.nets import DTYPE


def unit_rows(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn(*shape, generator=gen, dtype=DTYPE)
    return v / v.norm(dim=-1, keepdim=True)


class ConstantValue:
    """Duck-typed value net whose V_tot is one learnable scalar."""

    def __init__(self, v0=0.0):
        self.v = torch.tensor(float(v0), dtype=DTYPE, requires_grad=True)

    def sequence_values(self, batch, include_final=False):
        T = batch.length + (1 if include_final else 0)
        values = self.v.expand(batch.size, T, batch.spec.n_allies)
        return values, self.v.expand(batch.size, T)

    def forward_local(self, local):
        shape = local.shape[:-1]
        return self.v.expand(shape), self.v.expand(shape[:-1])


class PerfectPredictor:
    """Returns the batch's true next global states."""

    def __init__(self, batch):
        self.states = batch.global_states[:, 1:]
        self.local = torch.zeros(
            *batch.global_states.shape[:2], batch.spec.n_allies, 64, dtype=DTYPE
        )[:, 1:]

    def __call__(self, skills, n_enemies):
        return self.states, self.local


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(gamma=1.0)
    with pytest.raises(ValueError):
        LossConfig(epsilon_expectile=0.0)
    with pytest.raises(ValueError):
        LossConfig(sigma_temp=0.0)
    with pytest.raises(ValueError):
        LossConfig(advantage_source="guess")


# -------------------- expectile term --------------------

def test_expectile_term_unit_values():
    assert abs(expectile_term(0.9, 2.0) - 3.6) < 1e-9
    assert abs(expectile_term(0.9, -2.0) - 0.4) < 1e-9
    for n in (-1.7, 2.3):
        assert abs(expectile_term(0.5, n) - 0.5 * n * n) < 1e-12


def test_expectile_term_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        eps = float(rng.uniform(0.05, 0.95))
        n = float(rng.normal() * 10)
        t = float(rng.uniform(0.1, 5))
        assert expectile_term(eps, 0.0) == 0.0
        assert expectile_term(eps, n) > 0.0 or n == 0.0
        # quadratic scaling
        assert abs(expectile_term(eps, t * n) - t * t * expectile_term(eps, n)) < 1e-9
        # continuity at zero
        assert expectile_term(eps, 1e-12) < 1e-20


def test_expectile_term_tensor_matches_scalar():
    n = torch.tensor([-2.0, -0.5, 0.0, 1.5], dtype=DTYPE)
    out = expectile_term(0.9, n)
    expected = [expectile_term(0.9, float(x)) for x in n]
    assert np.allclose(out.numpy(), expected)


# -------------------- advantage weight --------------------

def test_advantage_weight_values():
    cfg = LossConfig()
    assert abs(advantage_weight(1.0, 0.0, 1.0, cfg) - 1.0) < 1e-12
    # advantage exactly alpha: weight e
    w = advantage_weight(10.0, 0.0, 0.0, cfg)
    assert abs(w - math.e) < 1e-12
    # ten alphas: clipped at weight_clip
    assert advantage_weight(100.0, 0.0, 0.0, cfg) == cfg.weight_clip


def test_advantage_weight_monotone_bounded():
    cfg = LossConfig()
    prev = 0.0
    for adv in np.linspace(-100, 300, 80):
        w = advantage_weight(float(adv), 0.0, 0.0, cfg)
        assert w >= prev
        assert w <= cfg.weight_clip
        prev = w


def test_advantage_weight_is_stop_gradient():
    cfg = LossConfig()
    r = torch.tensor([1.0], dtype=DTYPE, requires_grad=True)
    w = advantage_weight(r, torch.zeros(1, dtype=DTYPE), torch.zeros(1, dtype=DTYPE), cfg)
    assert not w.requires_grad


# -------------------- value loss --------------------

def test_value_loss_single_transition():
    batch = toy_batch(steps=1, n_episodes=1)
    batch.rewards = torch.ones_like(batch.rewards)
    batch.dones = torch.ones_like(batch.dones)
    net, target = ConstantValue(0.0), ConstantValue(0.0)
    loss = value_loss(batch, net, target, LossConfig())
    assert abs(loss.item() - 0.9) < 1e-12


def test_value_loss_stationary_at_expectile():
    batch = toy_batch(steps=3, n_episodes=2)
    batch.dones = torch.ones_like(batch.dones)  # targets are just the rewards
    rewards = batch.rewards[batch.valid > 0].numpy()
    for eps in (0.1, 0.5, 0.9):
        v_star = oracle.expectile_root(rewards, eps)
        net = ConstantValue(v_star)
        loss = value_loss(batch, net, ConstantValue(0.0), LossConfig(epsilon_expectile=eps))
        (grad,) = torch.autograd.grad(loss, net.v)
        assert abs(grad.item()) < 1e-6


def test_value_loss_rejects_empty_mask():
    batch = toy_batch(steps=2)
    batch.valid = torch.zeros_like(batch.valid)
    with pytest.raises(ValueError, match="empty valid mask"):
        value_loss(batch, ConstantValue(), ConstantValue(), LossConfig())


def test_value_loss_gradient_only_reaches_online(model):
    batch = toy_batch()
    loss = value_loss(batch, model.value, model.value_target, LossConfig())
    loss.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.value.parameters())
    assert all(p.grad is None for p in model.value_target.parameters())
    model.zero_grad()


# -------------------- planner losses --------------------

def test_planner_loss_zero_for_perfect_predictor(model):
    batch = toy_batch()
    loss, _ = planner_loss(
        batch, model.encoder, PerfectPredictor(batch), model.value,
        model.value_target, LossConfig(),
    )
    assert loss.item() == 0.0


def test_planner_loss_unit_weights_is_half_mse(model):
    batch = toy_batch()
    cfg = LossConfig()
    ones = torch.ones_like(batch.rewards)
    loss, mean_w = planner_loss(
        batch, model.encoder, model.predictor, model.value, model.value_target,
        cfg, weights=ones,
    )
    skills = nets.encode_common(model.encoder, batch)
    s_pred, _ = model.predictor(skills, batch.spec.n_enemies)
    err = 0.5 * ((s_pred - batch.global_states[:, 1:]) ** 2).sum(-1)
    expected = losses.masked_mean(err, batch.valid)
    assert torch.allclose(loss, expected)
    assert abs(mean_w.item() - 1.0) < 1e-12


def test_planner_zero_advantage_gives_unit_weights(model):
    batch = toy_batch()
    batch.rewards = torch.zeros_like(batch.rewards)
    net = ConstantValue(0.0)
    _, mean_w = planner_loss(
        batch, model.encoder, model.predictor, net, ConstantValue(0.0), LossConfig(),
    )
    assert abs(mean_w.item() - 1.0) < 1e-12


def test_planner_explicit_perfect_prediction(model):
    batch = toy_batch()
    cfg = LossConfig()
    loss = planner_loss_explicit(
        batch, model.encoder, PerfectPredictor(batch), model.value_target, cfg,
    )
    # residual term vanishes; only the negated value of the (zero) locals remains
    zero_local = torch.zeros(batch.size, batch.length, batch.spec.n_allies, 64, dtype=DTYPE)
    _, v = model.value_target.forward_local(zero_local)
    expected = -losses.masked_mean(v, batch.valid)
    assert torch.allclose(loss, expected)


def test_planner_explicit_alpha_dominance(model):
    batch = toy_batch()
    cfg = LossConfig()
    big = 1e8
    loss_big = planner_loss_explicit(
        batch, model.encoder, model.predictor, model.value_target, cfg, alpha=big,
    )
    pred_only = planner_loss_explicit(
        batch, model.encoder, model.predictor, model.value_target, cfg,
        alpha=1.0, include_value_term=False,
    )
    assert abs(loss_big.item() / big - pred_only.item()) < 1e-6


def test_planner_explicit_matches_weighted_prediction_term(model):
    batch = toy_batch()
    cfg = LossConfig()
    ones = torch.ones_like(batch.rewards)
    weighted, _ = planner_loss(
        batch, model.encoder, model.predictor, model.value, model.value_target,
        cfg, weights=ones,
    )
    explicit = planner_loss_explicit(
        batch, model.encoder, model.predictor, model.value_target, cfg,
        alpha=1.0, include_value_term=False,
    )
    assert torch.allclose(weighted, explicit)


def test_planner_gradients_reach_encoder_and_predictor_only(model):
    batch = toy_batch()
    loss, _ = planner_loss(
        batch, model.encoder, model.predictor, model.value, model.value_target,
        LossConfig(),
    )
    loss.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.encoder.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.predictor.parameters())
    assert all(p.grad is None for p in model.value.parameters())
    assert all(p.grad is None for p in model.value_target.parameters())
    model.zero_grad()


# -------------------- contrastive loss --------------------

def test_contrastive_equal_logits():
    # one negative with the same similarity as the positive
    q = unit_rows(1, 64, seed=1)
    loss = contrastive_loss(q, q, q.clone(), sigma=1.0)
    assert abs(loss.item() - math.log(2.0)) < 1e-12
    # invariant to the shared similarity value and the temperature
    k = unit_rows(1, 64, seed=2)
    for sigma in (0.1, 0.5, 2.0):
        loss = contrastive_loss(q, k, k.clone(), sigma)
        assert abs(loss.item() - math.log(2.0)) < 1e-12


def test_contrastive_orthogonal_negatives():
    d = 8
    q = torch.zeros(1, d, dtype=DTYPE)
    q[0, 0] = 1.0
    k_pos = q.clone()
    negs = torch.zeros(2, d, dtype=DTYPE)
    negs[0, 1] = 1.0
    negs[1, 2] = 1.0
    loss = contrastive_loss(q, k_pos, negs, sigma=1.0)
    assert abs(loss.item() - math.log(1.0 + 2.0 * math.exp(-1.0))) < 1e-12


def test_contrastive_temperature_limit():
    q = unit_rows(4, 16, seed=2)
    negs = -q[:1].clone()  # maximally dissimilar negative
    prev = None
    for sigma in (1.0, 0.3, 0.1, 0.03):
        loss = contrastive_loss(q, q, negs, sigma).item()
        if prev is not None:
            assert loss < prev
        prev = loss
    assert prev < 1e-8


def test_contrastive_requires_negatives():
    q = unit_rows(3, 8)
    with pytest.raises(ValueError):
        contrastive_loss(q, q, torch.zeros(0, 8, dtype=DTYPE), 0.1)


def test_contrastive_nonnegative_lower_bound():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n, m, d = int(rng.integers(1, 6)), int(rng.integers(1, 6)), 16
        q = unit_rows(n, d, seed=int(rng.integers(1 << 30)))
        k = unit_rows(n, d, seed=int(rng.integers(1 << 30)))
        negs = unit_rows(m, d, seed=int(rng.integers(1 << 30)))
        sigma = float(rng.uniform(0.05, 2.0))
        loss = contrastive_loss(q, k, negs, sigma).item()
        assert loss >= 0.0
        # worst case: positive similarity 1, negatives at -1
        bound = math.log(1.0 + m * math.exp(-2.0 / sigma))
        assert loss >= bound - 1e-12


# -------------------- controller loss --------------------

def test_controller_perfect_imitation_is_zero(model):
    batch = toy_batch()
    # leave only the taken action available: masked softmax assigns it prob 1
    avail = torch.zeros_like(batch.avail)
    for b in range(batch.size):
        for t in range(batch.length):
            for k in range(batch.actions.shape[-1]):
                avail[b, t, k, batch.actions[b, t, k]] = True
    avail[:, batch.length:, :, 0] = True
    batch.avail = avail
    loss, bc, contrast = controller_loss(
        batch, model.decoder, model.encoder, model.task_encoder,
        model.task_momentum, None, LossConfig(), beta=0.0,
    )
    assert abs(loss.item()) < 1e-12
    assert contrast.item() == 0.0


def test_controller_beta_zero_is_masked_cross_entropy(model):
    batch = toy_batch()
    cfg = LossConfig()
    loss, bc, _ = controller_loss(
        batch, model.decoder, model.encoder, model.task_encoder,
        model.task_momentum, None, cfg, beta=0.0,
    )
    with torch.no_grad():
        skills = nets.encode_common(model.encoder, batch)
        z = nets.encode_task(model.task_encoder, batch)
        logits = nets.decode_actions(model.decoder, batch, skills, z)
        expected = losses.masked_nll(
            logits, batch.actions, batch.avail[:, : batch.length], batch.valid
        )
    assert loss.item() == expected.item()
    assert bc.item() == loss.item()


def test_controller_loss_with_contrastive_term(model):
    batch = toy_batch()
    negs = unit_rows(4, 64, seed=5)
    cfg = LossConfig()
    loss, bc, contrast = controller_loss(
        batch, model.decoder, model.encoder, model.task_encoder,
        model.task_momentum, negs, cfg, np.random.default_rng(0),
    )
    assert abs(loss.item() - (bc.item() + cfg.beta * contrast.item())) < 1e-12
    assert contrast.item() > 0.0


def test_controller_requires_positive_pairs(model):
    batch = toy_batch()
    batch.alive = torch.zeros_like(batch.alive)  # nobody alive anywhere
    with pytest.raises(PreconditionError, match="alive"):
        controller_loss(
            batch, model.decoder, model.encoder, model.task_encoder,
            model.task_momentum, unit_rows(2, 64), LossConfig(),
            np.random.default_rng(0),
        )


def test_controller_gradients_reach_decoder_and_task_encoder(model):
    batch = toy_batch()
    loss, _, _ = controller_loss(
        batch, model.decoder, model.encoder, model.task_encoder,
        model.task_momentum, unit_rows(4, 64), LossConfig(),
        np.random.default_rng(0),
    )
    loss.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.decoder.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.task_encoder.parameters())
    assert all(p.grad is None for p in model.encoder.parameters())
    assert all(p.grad is None for p in model.task_momentum.parameters())
    model.zero_grad()


# -------------------- masking invariant --------------------

def test_masked_positions_contribute_nothing(model):
    batch_a = toy_batch(n_episodes=2, steps=3)
    # episodes of different lengths force padding; corrupt the padded region
    short = toy_batch(n_episodes=1, steps=2)
    from hissd import datagen as dg
    from conftest import truncate_episode
    import hissd.gridbattle as gb

    spec = gb.TaskSpec("2v2", 2, 2, 8)
    eps = [
        truncate_episode(dg.run_episode(spec, dg.scripted_policy(0.3, i), i, 0.3), t)
        for i, t in ((0, 3), (1, 1))
    ]
    clean = nets.TorchBatch(dg.make_batch(spec, eps))
    dirty = nets.TorchBatch(dg.make_batch(spec, eps))
    pad = dirty.valid == 0  # [B, L]
    gen = torch.Generator().manual_seed(0)
    noise = lambda t: torch.randn(t.shape, generator=gen, dtype=DTYPE)
    dirty.rewards = dirty.rewards + noise(dirty.rewards) * pad
    dirty.global_states[:, 1:] += noise(dirty.global_states[:, 1:]) * pad.unsqueeze(-1)
    dirty.obs_own[:, 1:] += noise(dirty.obs_own[:, 1:]) * pad[..., None, None]

    cfg = LossConfig()
    negs = unit_rows(3, 64, seed=9)
    for make in (
        lambda b: value_loss(b, model.value, model.value_target, cfg),
        lambda b: planner_loss(b, model.encoder, model.predictor, model.value,
                               model.value_target, cfg)[0],
        lambda b: controller_loss(b, model.decoder, model.encoder,
                                  model.task_encoder, model.task_momentum,
                                  negs, cfg, np.random.default_rng(4))[0],
    ):
        assert make(clean).item() == make(dirty).item()
