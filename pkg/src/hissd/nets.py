"""Entity-token networks, parameter storage, optimizer, and checkpointing.

Five networks share one architectural vocabulary: observations are split
into portions (own features, other-ally features, enemy features), each
portion is embedded by its own affine map into a 64-dim token, and a
single-head scaled dot-product attention block mixes the tokens. Because
parameters never depend on token count, one parameter set serves any
ally/enemy population, and outputs are permutation-equivariant across
same-role tokens.

Recurrent networks (common-skill encoder, value trunk, action decoder)
append the previous hidden state as an extra token and read the new hidden
state from that token's output. During training the hidden sequences are
rolled forward without a graph and enter the objectives as constants
(backpropagation truncates at timestep boundaries), which lets every
network run as one batched attention pass over the whole sequence;
execution carries the full recurrence step by step.

Modules default to float64 (verification precision); training typically
runs them in float32 for speed, which changes nothing about determinism.
"""

from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import gridbattle as gb
from .datagen import Batch

DTYPE = torch.float64

CHECKPOINT_MAGIC = b"HSSDCKPT"
CHECKPOINT_FORMAT = "hissd-checkpoint-v1"


@dataclass(frozen=True)
class NetConfig:
    hidden_dim: int = 64
    attention_dim: int = 64
    skill_dim: int = 64
    mlp_hidden: int = 128
    heads: int = 1

    def __post_init__(self):
        if min(self.hidden_dim, self.attention_dim, self.skill_dim, self.mlp_hidden) < 1:
            raise ValueError("all dimensions must be positive")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")
        if self.skill_dim != self.hidden_dim:
            raise ValueError("skill vectors are read from token outputs; "
                             "skill_dim must equal hidden_dim")


def _init_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(lin.in_features)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        if lin.bias is not None:
            lin.bias.uniform_(-bound, bound, generator=gen)


class PortionEmbedding(nn.Module):
    """One affine map per portion kind, shared across agents and tasks."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.own = nn.Linear(gb.OWN_FEATS, d)
        self.ally = nn.Linear(gb.ENTITY_FEATS, d)
        self.enemy = nn.Linear(gb.ENTITY_FEATS, d)

    def forward(self, own, allies, enemies):
        if own.shape[-1] != gb.OWN_FEATS or allies.shape[-1] != gb.ENTITY_FEATS:
            raise ValueError("portion length mismatch")
        tokens = [self.own(own).unsqueeze(-2)]
        if allies.shape[-2]:
            tokens.append(self.ally(allies))
        if enemies.shape[-2]:
            tokens.append(self.enemy(enemies))
        return torch.cat(tokens, dim=-2)


class AttentionBlock(nn.Module):
    """Single-head self-attention followed by a position-wise affine + tanh."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        d, a = cfg.hidden_dim, cfg.attention_dim
        self.wq = nn.Linear(d, a, bias=False)
        self.wk = nn.Linear(d, a, bias=False)
        self.wv = nn.Linear(d, a, bias=False)
        self.ff = nn.Linear(a, d)
        self.scale = 1.0 / math.sqrt(a)

    def attention_weights(self, tokens):
        q, k = self.wq(tokens), self.wk(tokens)
        return torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)

    def forward(self, tokens):
        if tokens.shape[-2] == 0:
            raise ValueError("empty token sequence")
        mixed = self.attention_weights(tokens) @ self.wv(tokens)
        return torch.tanh(self.ff(mixed))


class CommonSkillEncoder(nn.Module):
    """Maps one agent's observation tokens plus hidden state to a common skill."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.hidden_dim = cfg.hidden_dim
        self.embed = PortionEmbedding(cfg)
        self.block = AttentionBlock(cfg)

    def forward(self, own, allies, enemies, h_prev):
        tokens = self.embed(own, allies, enemies)
        tokens = torch.cat([tokens, h_prev.unsqueeze(-2)], dim=-2)
        out = self.block(tokens)
        return out[..., 0, :], out[..., -1, :]


class TaskSkillEncoder(nn.Module):
    """Produces the unit-norm task-specific skill from one observation."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.embed = PortionEmbedding(cfg)
        self.block = AttentionBlock(cfg)
        self.head = nn.Linear(cfg.hidden_dim, cfg.skill_dim)

    def forward(self, own, allies, enemies):
        out = self.block(self.embed(own, allies, enemies))
        z = self.head(out[..., 0, :])
        return z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class ForwardPredictor(nn.Module):
    """Two-stage attention from all agents' common skills to the next state.

    Stage one attends over skill tokens plus a learned enemy query (tiled to
    the enemy count) and emits per-enemy feature blocks; stage two attends
    over per-skill ally tokens plus the stage-one enemy outputs and emits
    per-ally blocks and the per-agent local-information embeddings. Blocks
    concatenate into the environment's global-state layout (allies first).
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.skill_in = nn.Linear(d, d)
        self.enemy_query = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.block1 = AttentionBlock(cfg)
        self.enemy_head = nn.Linear(d, gb.STATE_FEATS)
        self.ally_in = nn.Linear(d, d)
        self.block2 = AttentionBlock(cfg)
        self.ally_head = nn.Linear(d, gb.STATE_FEATS)
        self.local_head = nn.Linear(d, d)

    def forward(self, skills, n_enemies: int):
        if skills.shape[-2] < 1:
            raise ValueError("need at least one agent skill")
        k = skills.shape[-2]
        queries = self.enemy_query.expand(*skills.shape[:-2], n_enemies, -1)
        out1 = self.block1(torch.cat([self.skill_in(skills), queries], dim=-2))
        enemy_tokens = out1[..., k:, :]
        enemy_blocks = self.enemy_head(enemy_tokens)

        out2 = self.block2(torch.cat([self.ally_in(skills), enemy_tokens], dim=-2))
        ally_tokens = out2[..., :k, :]
        ally_blocks = self.ally_head(ally_tokens)
        local = self.local_head(ally_tokens)

        state = torch.cat(
            [ally_blocks.flatten(-2), enemy_blocks.flatten(-2)], dim=-1
        )
        return state, local


class ValueNet(nn.Module):
    """Per-agent value trunk plus an attention mixer.

    The trunk accepts either raw observation portions (embedded first, with
    a recurrent hidden token) or already-embedded local-information vectors
    (fed straight in as the agent token). The mixer turns per-agent summary
    tokens into nonnegative weights that sum to the agent count and returns
    the weighted sum of per-agent values.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.hidden_dim = d
        self.embed = PortionEmbedding(cfg)
        self.block = AttentionBlock(cfg)
        self.head = nn.Linear(d, 1)
        self.mix_query = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.scale = 1.0 / math.sqrt(d)

    def _mix(self, summaries, values):
        scores = (summaries @ self.mix_query) * self.scale
        weights = torch.softmax(scores, dim=-1) * summaries.shape[-2]
        return (weights * values).sum(dim=-1)

    def forward_obs(self, own, allies, enemies, h_prev):
        """own [..., K, F]; returns (per-agent values, V_tot, h_next)."""
        tokens = self.embed(own, allies, enemies)
        tokens = torch.cat([tokens, h_prev.unsqueeze(-2)], dim=-2)
        out = self.block(tokens)
        summaries = out[..., 0, :]
        values = self.head(summaries).squeeze(-1)
        return values, self._mix(summaries, values), out[..., -1, :]

    def forward_local(self, local):
        """local [..., K, d] predicted embeddings; returns (values, V_tot)."""
        out = self.block(local.unsqueeze(-2))
        summaries = out[..., 0, :]
        values = self.head(summaries).squeeze(-1)
        return values, self._mix(summaries, values)


class ActionDecoder(nn.Module):
    """Skill-conditioned action head with a population-tracking logit layout.

    The common skill joins the token sequence; the own-token output
    concatenated with the task skill feeds an MLP for the five fixed logits
    (no-op + moves), and each enemy-token output concatenated with the task
    skill feeds a shared MLP for that enemy's attack logit, so the action
    dimension follows the enemy count with no reshaping.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        d, m = cfg.hidden_dim, cfg.mlp_hidden
        self.hidden_dim = d
        self.embed = PortionEmbedding(cfg)
        self.block = AttentionBlock(cfg)
        self.move_head = nn.Sequential(
            nn.Linear(2 * d, m), nn.Tanh(), nn.Linear(m, gb.N_FIXED_ACTIONS)
        )
        self.attack_head = nn.Sequential(
            nn.Linear(2 * d, m), nn.Tanh(), nn.Linear(m, 1)
        )

    def forward(self, own, allies, enemies, c, z, h_prev):
        n_allies = allies.shape[-2] + 1
        n_enemies = enemies.shape[-2]
        tokens = self.embed(own, allies, enemies)
        tokens = torch.cat(
            [tokens, c.unsqueeze(-2), h_prev.unsqueeze(-2)], dim=-2
        )
        out = self.block(tokens)
        own_out = out[..., 0, :]
        enemy_out = out[..., n_allies : n_allies + n_enemies, :]
        h_next = out[..., -1, :]

        fixed = self.move_head(torch.cat([own_out, z], dim=-1))
        z_tiled = z.unsqueeze(-2).expand(*enemy_out.shape[:-1], z.shape[-1])
        attack = self.attack_head(torch.cat([enemy_out, z_tiled], dim=-1)).squeeze(-1)
        return torch.cat([fixed, attack], dim=-1), h_next


class SkillModel(nn.Module):
    """All trainable parameters plus the target/momentum shadow copies.

    Parameter groups: ``value`` trains through the expectile objective,
    ``planner`` (common-skill encoder + forward predictor) through the
    weighted prediction objective, ``controller`` (action decoder +
    task-skill encoder) through imitation + contrastive regularization.
    Shadows (``value_target``, ``task_momentum``) never receive gradients
    and change only through EMA updates.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = CommonSkillEncoder(cfg)
        self.predictor = ForwardPredictor(cfg)
        self.value = ValueNet(cfg)
        self.task_encoder = TaskSkillEncoder(cfg)
        self.decoder = ActionDecoder(cfg)
        self.value_target = copy.deepcopy(self.value)
        self.task_momentum = copy.deepcopy(self.task_encoder)
        for p in self.value_target.parameters():
            p.requires_grad_(False)
        for p in self.task_momentum.parameters():
            p.requires_grad_(False)

    def param_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        groups = {
            "value": self.value,
            "planner": nn.ModuleList([self.encoder, self.predictor]),
            "controller": nn.ModuleList([self.decoder, self.task_encoder]),
        }
        return {
            name: dict(module.named_parameters()) for name, module in groups.items()
        }

    def hidden_zeros(self, *shape) -> torch.Tensor:
        return torch.zeros(*shape, self.cfg.hidden_dim, dtype=DTYPE)


def build_model(cfg: NetConfig, seed: int, dtype: torch.dtype = DTYPE) -> SkillModel:
    """Construct and deterministically initialize a model."""
    model = SkillModel(cfg).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    for module in model.modules():
        if isinstance(module, nn.Linear):
            _init_linear(module, gen)
    with torch.no_grad():
        bound = 1.0 / math.sqrt(cfg.hidden_dim)
        model.predictor.enemy_query.uniform_(-bound, bound, generator=gen)
        model.value.mix_query.uniform_(-bound, bound, generator=gen)
    # shadows start as exact copies of their online networks
    ema_update(model.value_target, model.value, 1.0)
    ema_update(model.task_momentum, model.task_encoder, 1.0)
    return model


# --------------------------------------------------------------------------
# EMA and optimizer
# --------------------------------------------------------------------------

def ema_update(shadow: nn.Module, online: nn.Module, rate: float) -> None:
    """shadow <- rate * online + (1 - rate) * shadow, parameter by parameter."""
    shadow_params = dict(shadow.named_parameters())
    online_params = dict(online.named_parameters())
    if shadow_params.keys() != online_params.keys():
        raise ValueError("shadow/online parameter names differ")
    with torch.no_grad():
        for name, sp in shadow_params.items():
            op = online_params[name]
            if sp.shape != op.shape:
                raise ValueError(f"shape mismatch for parameter '{name}'")
            if rate == 1.0:
                sp.copy_(op)
            else:
                sp.mul_(1.0 - rate).add_(op, alpha=rate)


class MomentOptimizer:
    """Adaptive-moment optimizer with bias correction and decoupled weight decay."""

    def __init__(self, params: dict[str, torch.Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise ValueError(f"non-finite gradient for parameter '{name}'")
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            if self.weight_decay:
                p.mul_(1.0 - self.lr * self.weight_decay)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m / bc1, denom, value=-self.lr)


# --------------------------------------------------------------------------
# Batch tensors and sequence rollouts
# --------------------------------------------------------------------------

class TorchBatch:
    """Torch view of a padded numpy batch (float64 unless told otherwise)."""

    def __init__(self, batch: Batch, dtype: torch.dtype = DTYPE):
        self.spec = batch.spec
        self.obs_own = torch.from_numpy(batch.obs_own).to(dtype)
        self.obs_allies = torch.from_numpy(batch.obs_allies).to(dtype)
        self.obs_enemies = torch.from_numpy(batch.obs_enemies).to(dtype)
        self.global_states = torch.from_numpy(batch.global_states).to(dtype)
        self.actions = torch.from_numpy(batch.actions)
        self.avail = torch.from_numpy(batch.avail)
        self.rewards = torch.from_numpy(batch.rewards).to(dtype)
        self.dones = torch.from_numpy(batch.dones).to(dtype)
        self.valid = torch.from_numpy(batch.valid).to(dtype)
        self.alive = torch.from_numpy(batch.alive)
        self.size = batch.size
        self.length = batch.length

    def obs_at(self, t: int):
        return self.obs_own[:, t], self.obs_allies[:, t], self.obs_enemies[:, t]


def _module_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def _sequence_tokens(embed: PortionEmbedding, batch: TorchBatch, t_end: int):
    return embed(
        batch.obs_own[:, :t_end],
        batch.obs_allies[:, :t_end],
        batch.obs_enemies[:, :t_end],
    )


def _attend_rows(block: AttentionBlock, tokens_obs, extras, rows):
    """Batched attention outputs for selected observation-token rows.

    extras are per-step constant tokens (recurrent state, skills) appended
    to the key/value set; queries are taken from the listed obs-token rows.
    """
    keys = torch.cat([block.wk(tokens_obs), block.wk(extras)], dim=-2)
    vals = torch.cat([block.wv(tokens_obs), block.wv(extras)], dim=-2)
    q = block.wq(tokens_obs[..., rows, :])
    attn = torch.softmax(q @ keys.transpose(-1, -2) * block.scale, dim=-1)
    return torch.tanh(block.ff(attn @ vals))


def _hidden_prepass(block: AttentionBlock, tokens_obs, n_steps: int,
                    extra_at=None):
    """Roll the hidden token forward without building an autograd graph.

    Returns the hidden-state INPUT for every timestep, [B, n_steps, K, d]
    with h_0 = 0. Training treats these as constants (backpropagation is
    truncated at timestep boundaries); decentralized execution still carries
    the full recurrence, this only decouples the training graph.
    """
    B, _, K = tokens_obs.shape[:3]
    d = block.ff.out_features
    h = torch.zeros(B, K, d, dtype=tokens_obs.dtype)
    states = [h]
    with torch.no_grad():
        k_obs = block.wk(tokens_obs)
        v_obs = block.wv(tokens_obs)
        for t in range(n_steps - 1):
            h_tok = h.unsqueeze(-2)
            extra = [h_tok] if extra_at is None else [extra_at(t), h_tok]
            extra = torch.cat(extra, dim=-2)
            keys = torch.cat([k_obs[:, t], block.wk(extra)], dim=-2)
            vals = torch.cat([v_obs[:, t], block.wv(extra)], dim=-2)
            q_h = block.wq(h_tok)
            attn = torch.softmax(q_h @ keys.transpose(-1, -2) * block.scale, dim=-1)
            h = torch.tanh(block.ff(attn @ vals))[..., 0, :]
            states.append(h)
    return torch.stack(states, dim=1)


def encode_common(encoder: CommonSkillEncoder, batch: TorchBatch,
                  hidden_seq: torch.Tensor | None = None) -> torch.Tensor:
    """Common skills for every timestep, [B, L, K, d].

    The recurrent hidden inputs come from the no-grad prepass (or are
    supplied precomputed); the skill outputs themselves are differentiable.
    """
    tokens = _sequence_tokens(encoder.embed, batch, batch.length)
    if hidden_seq is None:
        hidden_seq = _hidden_prepass(encoder.block, tokens.detach(), batch.length)
    out = _attend_rows(encoder.block, tokens, hidden_seq.unsqueeze(-2), [0])
    return out[..., 0, :]


def encoder_hidden_states(encoder: CommonSkillEncoder, batch: TorchBatch):
    tokens = _sequence_tokens(encoder.embed, batch, batch.length)
    return _hidden_prepass(encoder.block, tokens.detach(), batch.length)


def encode_task(encoder: TaskSkillEncoder, batch: TorchBatch,
                include_final: bool = False) -> torch.Tensor:
    """Batched (non-recurrent) task-skill pass; returns [B, T, K, d]."""
    t_end = batch.length + 1 if include_final else batch.length
    tokens = _sequence_tokens(encoder.embed, batch, t_end)
    keys = encoder.block.wk(tokens)
    vals = encoder.block.wv(tokens)
    q_own = encoder.block.wq(tokens[..., [0], :])
    attn = torch.softmax(q_own @ keys.transpose(-1, -2) * encoder.block.scale, dim=-1)
    own_out = torch.tanh(encoder.block.ff(attn @ vals))[..., 0, :]
    z = encoder.head(own_out)
    return z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def encode_task_rows(encoder: TaskSkillEncoder, batch: TorchBatch,
                     b_idx, t_idx, k_idx) -> torch.Tensor:
    """Task skills for selected (episode, timestep, agent) rows only."""
    own = batch.obs_own[b_idx, t_idx, k_idx]
    allies = batch.obs_allies[b_idx, t_idx, k_idx]
    enemies = batch.obs_enemies[b_idx, t_idx, k_idx]
    return encoder(own, allies, enemies)


def value_sequence(value_net: ValueNet, batch: TorchBatch,
                   include_final: bool = False,
                   hidden_seq: torch.Tensor | None = None):
    """Per-agent values and V_tot over time: ([B, T, K], [B, T])."""
    override = getattr(value_net, "sequence_values", None)
    if override is not None:
        return override(batch, include_final)
    t_end = batch.length + 1 if include_final else batch.length
    tokens = _sequence_tokens(value_net.embed, batch, t_end)
    if hidden_seq is None:
        hidden_seq = _hidden_prepass(value_net.block, tokens.detach(), t_end)
    out = _attend_rows(value_net.block, tokens, hidden_seq.unsqueeze(-2), [0])
    summaries = out[..., 0, :]
    values = value_net.head(summaries).squeeze(-1)
    return values, value_net._mix(summaries, values)


def value_hidden_states(value_net: ValueNet, batch: TorchBatch,
                        include_final: bool = False):
    t_end = batch.length + 1 if include_final else batch.length
    tokens = _sequence_tokens(value_net.embed, batch, t_end)
    return _hidden_prepass(value_net.block, tokens.detach(), t_end)


def decode_actions(decoder: ActionDecoder, batch: TorchBatch,
                   skills: torch.Tensor, task_skills: torch.Tensor,
                   hidden_seq: torch.Tensor | None = None) -> torch.Tensor:
    """Action logits for every timestep, [B, L, K, A]."""
    K, E = batch.spec.n_allies, batch.spec.n_enemies
    tokens = _sequence_tokens(decoder.embed, batch, batch.length)
    skill_tok = skills.unsqueeze(-2)
    if hidden_seq is None:
        hidden_seq = _hidden_prepass(
            decoder.block, tokens.detach(), batch.length,
            extra_at=lambda t: skill_tok[:, t].detach(),
        )
    extras = torch.cat([skill_tok, hidden_seq.unsqueeze(-2)], dim=-2)
    out = _attend_rows(
        decoder.block, tokens, extras, [0] + list(range(K, K + E))
    )
    own_out, enemy_out = out[..., 0, :], out[..., 1:, :]
    fixed = decoder.move_head(torch.cat([own_out, task_skills], dim=-1))
    z_tiled = task_skills.unsqueeze(-2).expand(
        *enemy_out.shape[:-1], task_skills.shape[-1]
    )
    attack = decoder.attack_head(torch.cat([enemy_out, z_tiled], dim=-1)).squeeze(-1)
    return torch.cat([fixed, attack], dim=-1)


def decoder_hidden_states(decoder: ActionDecoder, batch: TorchBatch,
                          skills: torch.Tensor):
    tokens = _sequence_tokens(decoder.embed, batch, batch.length)
    skill_tok = skills.unsqueeze(-2)
    return _hidden_prepass(
        decoder.block, tokens.detach(), batch.length,
        extra_at=lambda t: skill_tok[:, t].detach(),
    )


def rollout_policy_step(model: SkillModel, own, allies, enemies, h_enc, h_dec):
    """One decentralized policy step for K agents of one environment.

    Inputs are per-agent tensors [K, ...]; returns (logits, h_enc, h_dec).
    Only local observations are consumed.
    """
    c, h_enc = model.encoder(own, allies, enemies, h_enc)
    z = model.task_encoder(own, allies, enemies)
    logits, h_dec = model.decoder(own, allies, enemies, c, z, h_dec)
    return logits, c, z, h_enc, h_dec


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: SkillModel, path, step: int = 0) -> None:
    """Write a named-tensor container with a manifest; exact round-trip."""
    state = model.state_dict()
    names = sorted(state.keys())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "step": int(step),
        "config": {
            "hidden_dim": model.cfg.hidden_dim,
            "attention_dim": model.cfg.attention_dim,
            "skill_dim": model.cfg.skill_dim,
            "mlp_hidden": model.cfg.mlp_hidden,
            "heads": model.cfg.heads,
        },
        "tensors": [
            {"name": n, "shape": list(state[n].shape)} for n in names
        ],
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(len(payload).to_bytes(8, "little"))
    buf.write(payload)
    for n in names:
        buf.write(state[n].detach().numpy().astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, dtype: torch.dtype = DTYPE) -> tuple[SkillModel, int]:
    """Rebuild a model from a checkpoint file; returns (model, step)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    size = int.from_bytes(blob[off : off + 8], "little")
    off += 8
    try:
        manifest = json.loads(blob[off : off + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupted checkpoint manifest: {exc}") from exc
    off += size
    for key in ("format", "step", "config", "tensors"):
        if key not in manifest:
            raise ValueError(f"corrupted checkpoint manifest: missing '{key}'")
    if manifest["format"] != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest['format']!r}")

    model = SkillModel(NetConfig(**manifest["config"])).to(dtype)
    state = model.state_dict()
    expected = sorted(state.keys())
    listed = [t["name"] for t in manifest["tensors"]]
    if listed != expected:
        raise ValueError("checkpoint manifest tensor names do not match model")
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if tuple(state[name].shape) != shape:
            raise ValueError(f"shape mismatch for tensor '{name}'")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(blob[off : off + nbytes], dtype="<f8").reshape(shape)
        off += nbytes
        with torch.no_grad():
            state[name].copy_(torch.from_numpy(arr.copy()).to(dtype))
    if off != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return model, int(manifest["step"])
