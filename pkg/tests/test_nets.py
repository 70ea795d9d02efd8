import copy

import numpy as np
import pytest
import torch

from conftest import toy_batch

from hissd import datagen as dg
from hissd import gridbattle as gb
from hissd import nets
from hissd.nets import DTYPE, MomentOptimizer, NetConfig, build_model, ema_update


def rand(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=gen, dtype=DTYPE)


def test_net_config_validation():
    with pytest.raises(ValueError):
        NetConfig(hidden_dim=0)
    with pytest.raises(ValueError):
        NetConfig(heads=2)
    with pytest.raises(ValueError):
        NetConfig(skill_dim=32)


# -------------------- portion embedding --------------------

def test_embedding_zero_input_gives_biases(model):
    emb = model.encoder.embed
    own = torch.zeros(1, gb.OWN_FEATS, dtype=DTYPE)
    allies = torch.zeros(1, 2, gb.ENTITY_FEATS, dtype=DTYPE)
    enemies = torch.zeros(1, 3, gb.ENTITY_FEATS, dtype=DTYPE)
    tokens = emb(own, allies, enemies)
    assert tokens.shape == (1, 6, 64)
    assert torch.allclose(tokens[0, 0], emb.own.bias)
    assert torch.allclose(tokens[0, 1], emb.ally.bias)
    assert torch.allclose(tokens[0, 3], emb.enemy.bias)


def test_embedding_population_invariance(model):
    emb = model.encoder.embed
    small = emb(rand(1, 4), rand(1, 2, 5), rand(1, 3, 5))
    large = emb(rand(1, 4), rand(1, 4, 5), rand(1, 6, 5))
    assert small.shape == (1, 6, 64)
    assert large.shape == (1, 11, 64)


def test_embedding_rejects_bad_portion(model):
    with pytest.raises(ValueError):
        model.encoder.embed(rand(1, 3), rand(1, 2, 5), rand(1, 3, 5))


# -------------------- attention block --------------------

def test_attention_single_token(model):
    block = model.encoder.block
    token = rand(1, 1, 64, seed=3)
    w = block.attention_weights(token)
    assert torch.allclose(w, torch.ones_like(w))
    out = block(token)
    expected = torch.tanh(block.ff(block.wv(token)))
    assert torch.allclose(out, expected)


def test_attention_rows_sum_to_one(model):
    block = model.encoder.block
    w = block.attention_weights(rand(2, 7, 64, seed=5))
    assert (w.sum(-1) - 1.0).abs().max().item() < 1e-12


def test_attention_permutation_equivariance(model):
    block = model.encoder.block
    tokens = rand(1, 5, 64, seed=9)
    perm = torch.tensor([2, 0, 4, 1, 3])
    out = block(tokens)
    out_perm = block(tokens[:, perm])
    assert torch.allclose(out_perm, out[:, perm], atol=1e-12)


def test_attention_rejects_empty(model):
    with pytest.raises(ValueError):
        model.encoder.block(torch.zeros(1, 0, 64, dtype=DTYPE))


# -------------------- common skill encoder --------------------

def test_common_encoder_deterministic(model):
    own, allies, enemies = rand(1, 4), rand(1, 2, 5), rand(1, 3, 5)
    h0 = torch.zeros(1, 64, dtype=DTYPE)
    c1, h1 = model.encoder(own, allies, enemies, h0)
    c2, h2 = model.encoder(own, allies, enemies, h0)
    assert torch.equal(c1, c2) and torch.equal(h1, h2)


def test_common_encoder_recurrence_is_live(model):
    own, allies, enemies = rand(1, 4), rand(1, 2, 5), rand(1, 3, 5)
    c_a, _ = model.encoder(own, allies, enemies, torch.zeros(1, 64, dtype=DTYPE))
    c_b, _ = model.encoder(own, allies, enemies, rand(1, 64, seed=11))
    assert not torch.allclose(c_a, c_b)


# -------------------- task skill encoder --------------------

def test_task_encoder_unit_norm(model):
    z = model.task_encoder(rand(6, 4), rand(6, 2, 5), rand(6, 3, 5))
    assert (z.norm(dim=-1) - 1.0).abs().max().item() < 1e-9


def test_momentum_copy_syncs_at_rate_one(model):
    m = copy.deepcopy(model)
    with torch.no_grad():
        for p in m.task_encoder.parameters():
            p.add_(0.1)
    ema_update(m.task_momentum, m.task_encoder, 1.0)
    own, allies, enemies = rand(2, 4), rand(2, 2, 5), rand(2, 3, 5)
    assert torch.equal(
        m.task_encoder(own, allies, enemies), m.task_momentum(own, allies, enemies)
    )


def test_task_skills_differ_between_agents(model, small_dataset):
    batch = nets.TorchBatch(dg.sample_batch(small_dataset, 2, np.random.default_rng(0)))
    z = nets.encode_task(model.task_encoder, batch)
    assert not torch.allclose(z[0, 0, 0], z[0, 0, 1])


# -------------------- forward predictor --------------------

def test_predictor_layout(model):
    skills = rand(4, 3, 64, seed=2)
    state, local = model.predictor(skills, n_enemies=3)
    assert state.shape == (4, 30)
    assert local.shape == (4, 3, 64)


def test_predictor_single_agent(model):
    state, local = model.predictor(rand(1, 1, 64), n_enemies=2)
    assert state.shape == (1, 15) and local.shape == (1, 1, 64)


def test_predictor_equivariant_over_agents(model):
    skills = rand(1, 4, 64, seed=8)
    state, local = model.predictor(skills, n_enemies=2)
    perm = torch.tensor([3, 1, 0, 2])
    state_p, local_p = model.predictor(skills[:, perm], n_enemies=2)
    assert torch.allclose(local_p, local[:, perm], atol=1e-12)
    # ally blocks permute with the agents; enemy blocks are unchanged
    blocks = state.reshape(1, 6, 5)
    blocks_p = state_p.reshape(1, 6, 5)
    assert torch.allclose(blocks_p[:, :4], blocks[:, perm], atol=1e-12)
    assert torch.allclose(blocks_p[:, 4:], blocks[:, 4:], atol=1e-12)


# -------------------- value net --------------------

def test_value_single_agent_mixer_weight_is_one(model):
    own, allies, enemies = rand(3, 1, 4), rand(3, 1, 0, 5), rand(3, 1, 2, 5)
    h = torch.zeros(3, 1, 64, dtype=DTYPE)
    values, v_tot, _ = model.value.forward_obs(own, allies, enemies, h)
    assert torch.allclose(v_tot, values.squeeze(-1), atol=1e-12)


def test_value_permutation_invariant(model):
    own, allies, enemies = rand(2, 4, 4), rand(2, 4, 3, 5), rand(2, 4, 2, 5)
    h = torch.zeros(2, 4, 64, dtype=DTYPE)
    _, v_tot, _ = model.value.forward_obs(own, allies, enemies, h)
    perm = torch.tensor([2, 3, 1, 0])
    _, v_tot_p, _ = model.value.forward_obs(
        own[:, perm], allies[:, perm], enemies[:, perm], h
    )
    assert (v_tot - v_tot_p).abs().max().item() < 1e-9


def test_value_mixer_weights_nonnegative_sum_k(model):
    own, allies, enemies = rand(1, 5, 4), rand(1, 5, 4, 5), rand(1, 5, 3, 5)
    h = torch.zeros(1, 5, 64, dtype=DTYPE)
    tokens = model.value.embed(own, allies, enemies)
    tokens = torch.cat([tokens, h.unsqueeze(-2)], dim=-2)
    summaries = model.value.block(tokens)[..., 0, :]
    scores = (summaries @ model.value.mix_query) * model.value.scale
    weights = torch.softmax(scores, dim=-1) * 5
    assert (weights >= 0).all()
    assert abs(weights.sum().item() - 5.0) < 1e-12


def test_value_local_path(model):
    local = rand(2, 3, 64, seed=4)
    values, v_tot = model.value.forward_local(local)
    assert values.shape == (2, 3) and v_tot.shape == (2,)


# -------------------- action decoder --------------------

def test_decoder_logit_count_tracks_enemies(model):
    h = torch.zeros(1, 64, dtype=DTYPE)
    c, z = rand(1, 64, seed=1), rand(1, 64, seed=2)
    logits3, _ = model.decoder(rand(1, 4), rand(1, 2, 5), rand(1, 3, 5), c, z, h)
    logits6, _ = model.decoder(rand(1, 4), rand(1, 4, 5), rand(1, 6, 5), c, z, h)
    assert logits3.shape == (1, 8)
    assert logits6.shape == (1, 11)


def test_decoder_attack_logits_permute_with_enemies(model):
    h = torch.zeros(1, 64, dtype=DTYPE)
    c, z = rand(1, 64, seed=1), rand(1, 64, seed=2)
    own, allies, enemies = rand(1, 4), rand(1, 2, 5), rand(1, 3, 5, seed=6)
    logits, _ = model.decoder(own, allies, enemies, c, z, h)
    perm = torch.tensor([2, 0, 1])
    logits_p, _ = model.decoder(own, allies, enemies[:, perm], c, z, h)
    assert torch.allclose(logits_p[:, :5], logits[:, :5], atol=1e-12)
    assert torch.allclose(logits_p[:, 5:], logits[:, 5:][:, perm], atol=1e-12)


def test_decoder_masked_softmax_normalizes(model):
    h = torch.zeros(1, 64, dtype=DTYPE)
    logits, _ = model.decoder(
        rand(1, 4), rand(1, 2, 5), rand(1, 3, 5), rand(1, 64), rand(1, 64), h
    )
    avail = torch.tensor([[True, True, False, True, False, False, True, False]])
    probs = torch.softmax(logits.masked_fill(~avail, float("-inf")), dim=-1)
    assert abs(probs.sum().item() - 1.0) < 1e-12
    assert probs[~avail].max().item() == 0.0


# -------------------- EMA --------------------

def test_ema_rates(model):
    shadow = copy.deepcopy(model.task_encoder)
    online = model.task_encoder
    with torch.no_grad():
        for p in online.parameters():
            p.add_(0.5)
    before = [p.clone() for p in shadow.parameters()]
    ema_update(shadow, online, 0.0)
    assert all(torch.equal(a, b) for a, b in zip(before, shadow.parameters()))
    ema_update(shadow, online, 1.0)
    assert all(
        torch.equal(a, b)
        for a, b in zip(online.parameters(), shadow.parameters())
    )
    ema_update(shadow, online, 0.37)  # fixed point once equal
    assert all(
        torch.equal(a, b)
        for a, b in zip(online.parameters(), shadow.parameters())
    )


def test_ema_monotone_blend(model):
    shadow = copy.deepcopy(model.task_encoder)
    online = copy.deepcopy(model.task_encoder)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in online.parameters():
            p.add_(torch.rand(p.shape, generator=gen, dtype=DTYPE) - 0.5)
    old = [p.clone() for p in shadow.parameters()]
    ema_update(shadow, online, 0.25)
    for prev, now, target in zip(old, shadow.parameters(), online.parameters()):
        lo = torch.minimum(prev, target) - 1e-15
        hi = torch.maximum(prev, target) + 1e-15
        assert ((now >= lo) & (now <= hi)).all()


def test_ema_shape_mismatch(model):
    with pytest.raises(ValueError):
        ema_update(model.task_encoder, model.value, 0.5)


# -------------------- optimizer --------------------

def test_optimizer_zero_grad_is_fixed_point():
    p = torch.tensor([1.0, -2.0], dtype=DTYPE, requires_grad=True)
    opt = MomentOptimizer({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = torch.zeros_like(p)
    opt.step()
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0], dtype=DTYPE))


def test_optimizer_first_step_moves_by_lr():
    p = torch.zeros(1, dtype=DTYPE, requires_grad=True)
    opt = MomentOptimizer({"p": p}, lr=0.1)
    loss = p.sum()
    loss.backward()
    opt.step()
    assert abs(p.item() + 0.1) < 1e-9


def test_optimizer_converges_on_quadratic():
    p = torch.tensor([3.0], dtype=DTYPE, requires_grad=True)
    opt = MomentOptimizer({"p": p}, lr=0.05)
    last = None
    for i in range(100):
        opt.zero_grad()
        loss = (p**2).sum()
        loss.backward()
        opt.step()
        if i in (0, 99):
            last = loss.item() if last is None else last
    assert (p**2).sum().item() < last


def test_optimizer_rejects_non_finite():
    p = torch.zeros(1, dtype=DTYPE, requires_grad=True)
    opt = MomentOptimizer({"widget": p}, lr=0.1)
    p.grad = torch.tensor([float("nan")], dtype=DTYPE)
    with pytest.raises(ValueError, match="widget"):
        opt.step()


def test_optimizer_weight_decay_shrinks():
    p = torch.tensor([1.0], dtype=DTYPE, requires_grad=True)
    opt = MomentOptimizer({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = torch.zeros_like(p)
    opt.step()
    assert abs(p.item() - 0.95) < 1e-12


# -------------------- parameter store / checkpoints --------------------

def test_param_groups_are_disjoint(model):
    groups = model.param_groups()
    ids = {}
    for gname, params in groups.items():
        for pname, p in params.items():
            assert id(p) not in ids, f"{pname} in both {gname} and {ids[id(p)]}"
            ids[id(p)] = gname
    # shadows belong to no trainable group
    for p in model.value_target.parameters():
        assert id(p) not in ids
        assert not p.requires_grad


def test_shadow_shapes_match(model):
    online = dict(model.value.named_parameters())
    shadow = dict(model.value_target.named_parameters())
    assert online.keys() == shadow.keys()
    assert all(online[k].shape == shadow[k].shape for k in online)


def test_checkpoint_round_trip(model, tmp_path):
    path1 = tmp_path / "a.ckpt"
    path2 = tmp_path / "b.ckpt"
    nets.save_checkpoint(model, path1, step=123)
    loaded, step = nets.load_checkpoint(path1)
    assert step == 123
    nets.save_checkpoint(loaded, path2, step=123)
    assert path1.read_bytes() == path2.read_bytes()
    for (n1, p1), (n2, p2) in zip(
        model.state_dict().items(), loaded.state_dict().items()
    ):
        assert n1 == n2 and torch.equal(p1, p2)


def test_checkpoint_corrupt_manifest(model, tmp_path):
    path = tmp_path / "a.ckpt"
    nets.save_checkpoint(model, path, step=1)
    blob = bytearray(path.read_bytes())
    # break the magic
    blob[0] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="magic"):
        nets.load_checkpoint(bad)

    blob = path.read_bytes()
    size = int.from_bytes(blob[8:16], "little")
    manifest = blob[16 : 16 + size].decode()
    broken = manifest.replace('"step"', '"stop"', 1).encode()
    bad2 = tmp_path / "bad2.ckpt"
    bad2.write_bytes(blob[:8] + len(broken).to_bytes(8, "little") + broken + blob[16 + size :])
    with pytest.raises(ValueError, match="step"):
        nets.load_checkpoint(bad2)


def test_model_runs_on_unseen_population(model):
    # one parameter set, two different task shapes, no reshaping
    for allies, enemies in ((2, 2), (4, 5)):
        batch = toy_batch(allies=allies, enemies=enemies, epsilon=0.0)
        skills = nets.encode_common(model.encoder, batch)
        state, local = model.predictor(skills, enemies)
        assert state.shape[-1] == 5 * (allies + enemies)
        z = nets.encode_task(model.task_encoder, batch)
        logits = nets.decode_actions(model.decoder, batch, skills, z)
        assert logits.shape[-1] == 5 + enemies


def test_build_model_deterministic():
    m1 = build_model(NetConfig(), seed=3)
    m2 = build_model(NetConfig(), seed=3)
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)


# -------------------- fast sequence paths match module forwards --------------------

def naive_encode_common(encoder, batch):
    h = torch.zeros(batch.size, batch.spec.n_allies, 64, dtype=DTYPE)
    out = []
    for t in range(batch.length):
        c, h = encoder(*batch.obs_at(t), h)
        out.append(c)
    return torch.stack(out, dim=1)


def test_encode_common_matches_module(model):
    batch = toy_batch(steps=4, n_episodes=2)
    fast = nets.encode_common(model.encoder, batch)
    slow = naive_encode_common(model.encoder, batch)
    assert (fast - slow).abs().max().item() < 1e-12


def test_value_sequence_matches_module(model):
    batch = toy_batch(steps=4, n_episodes=2)
    fast_v, fast_tot = nets.value_sequence(model.value, batch, include_final=True)
    h = torch.zeros(batch.size, batch.spec.n_allies, 64, dtype=DTYPE)
    values, totals = [], []
    for t in range(batch.length + 1):
        v, v_tot, h = model.value.forward_obs(*batch.obs_at(t), h)
        values.append(v)
        totals.append(v_tot)
    assert (fast_v - torch.stack(values, 1)).abs().max().item() < 1e-12
    assert (fast_tot - torch.stack(totals, 1)).abs().max().item() < 1e-12


def test_decode_actions_matches_module(model):
    batch = toy_batch(steps=4, n_episodes=2)
    with torch.no_grad():
        skills = nets.encode_common(model.encoder, batch)
        z = nets.encode_task(model.task_encoder, batch)
    fast = nets.decode_actions(model.decoder, batch, skills, z)
    h = torch.zeros(batch.size, batch.spec.n_allies, 64, dtype=DTYPE)
    slow = []
    for t in range(batch.length):
        logits, h = model.decoder(*batch.obs_at(t), skills[:, t], z[:, t], h)
        slow.append(logits)
    assert (fast - torch.stack(slow, 1)).abs().max().item() < 1e-12


def test_encode_task_matches_module(model):
    batch = toy_batch(steps=4, n_episodes=2)
    fast = nets.encode_task(model.task_encoder, batch)
    slow = model.task_encoder(
        batch.obs_own[:, :batch.length],
        batch.obs_allies[:, :batch.length],
        batch.obs_enemies[:, :batch.length],
    )
    assert (fast - slow).abs().max().item() < 1e-12


def test_encode_task_rows_matches_full(model):
    batch = toy_batch(steps=4, n_episodes=2)
    full = nets.encode_task(model.task_encoder, batch)
    b = np.array([0, 1, 1])
    t = np.array([0, 2, 3])
    k = np.array([1, 0, 1])
    rows = nets.encode_task_rows(model.task_encoder, batch, b, t, k)
    assert (rows - full[b, t, k]).abs().max().item() < 1e-12
