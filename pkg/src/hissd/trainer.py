"""Offline training loop: per-step task sampling, sequential value/planner/
controller updates, target and momentum EMA, metrics, checkpoints.

Each step samples one task and one batch, computes all forward passes on the
pre-update parameters, then applies the three optimizations in order (value,
planner, controller), followed by the EMA updates. The three objectives share
the same batch and the same encoder/value forwards, which keeps a step cheap
and the run bit-reproducible.

Modes:
  hissd             full method (weighted prediction objective)
  hissd_explicit    planner trained with the explicit value/prediction trade-off
  hissd_no_planner  value and planner untouched; skills stay at init
  bc                behavior cloning only (controller without the contrastive term)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses as L
from .datagen import Dataset, dumps_record, sample_batch
from .errors import PreconditionError
from .nets import (
    MomentOptimizer,
    NetConfig,
    SkillModel,
    TorchBatch,
    build_model,
    ema_update,
    encode_common,
    save_checkpoint,
    value_sequence,
)

MODES = ("hissd", "bc", "hissd_no_planner", "hissd_explicit")


@dataclass
class TrainConfig:
    steps: int = 30000
    batch: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    target_rate: float = 0.005
    momentum_rate: float = 0.01
    negatives_per_task: int = 2
    seed: int = 0
    mode: str = "hissd"
    dtype: str = "float32"
    metrics_interval: int = 500
    debug_isolation: bool = False
    net: NetConfig = field(default_factory=NetConfig)
    loss: L.LossConfig = field(default_factory=L.LossConfig)

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")
        if not (0.0 < self.target_rate <= 1.0 and 0.0 < self.momentum_rate <= 1.0):
            raise ValueError("EMA rates must be in (0, 1]")
        if self.negatives_per_task < 1:
            raise ValueError("negatives_per_task must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64


def _group_hash(params: dict[str, torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(params[name].detach().numpy().tobytes())
    return digest.hexdigest()


def _sample_negatives(
    datasets: dict[str, Dataset],
    current: str,
    per_task: int,
    rng: np.random.Generator,
    model: SkillModel,
) -> torch.Tensor:
    """Fresh observations from every other task, momentum-encoded."""
    own, allies, enemies = [], [], []
    for name in sorted(datasets):
        if name == current:
            continue
        ds = datasets[name]
        for _ in range(per_task):
            ep = ds.episodes[int(rng.integers(len(ds)))]
            t = agent = 0
            for _attempt in range(8):  # prefer a living agent's view
                t = int(rng.integers(ep.length))
                agent = int(rng.integers(ep.obs_own.shape[1]))
                if ep.obs_own[t, agent, 3] > 0.5:
                    break
            own.append(ep.obs_own[t, agent])
            allies.append(ep.obs_allies[t, agent])
            enemies.append(ep.obs_enemies[t, agent])
    with torch.no_grad():
        dtype = next(model.task_momentum.parameters()).dtype
        z = []
        # tasks differ in entity counts, so encode one by one
        for o, a, e in zip(own, allies, enemies):
            z.append(
                model.task_momentum(
                    torch.from_numpy(o).to(dtype).unsqueeze(0),
                    torch.from_numpy(a).to(dtype).unsqueeze(0),
                    torch.from_numpy(e).to(dtype).unsqueeze(0),
                )[0]
            )
    return torch.stack(z)


class _Window:
    """Running means for one metrics interval."""

    def __init__(self):
        self.sums = {}
        self.count = 0

    def add(self, **values):
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
        self.count += 1

    def flush(self, step):
        rec = {"step": step}
        for k in ("value_loss", "planner_loss", "controller_loss",
                  "contrastive", "mean_advantage_weight"):
            rec[k] = self.sums.get(k, 0.0) / max(self.count, 1)
        self.sums = {}
        self.count = 0
        return rec


@dataclass
class TrainResult:
    model: SkillModel
    records: list
    task_draws: dict[str, int]


def train(
    datasets: dict[str, Dataset],
    cfg: TrainConfig,
    metrics_path=None,
    checkpoint_path=None,
) -> TrainResult:
    """Run the full offline optimization."""
    torch.set_num_threads(1)  # keeps runs bit-reproducible
    if not datasets:
        raise ValueError("need at least one dataset")
    if cfg.mode != "bc" and len(datasets) < 2:
        raise PreconditionError("contrastive negatives unavailable: "
                                "need at least two source tasks")

    model = build_model(cfg.net, cfg.seed, cfg.torch_dtype)
    groups = model.param_groups()
    opt_value = MomentOptimizer(groups["value"], cfg.lr, weight_decay=cfg.weight_decay)
    opt_planner = MomentOptimizer(groups["planner"], cfg.lr, weight_decay=cfg.weight_decay)
    opt_controller = MomentOptimizer(groups["controller"], cfg.lr, weight_decay=cfg.weight_decay)

    batch_rng = np.random.default_rng([cfg.seed, 1])
    pair_rng = np.random.default_rng([cfg.seed, 2])
    neg_rng = np.random.default_rng([cfg.seed, 3])

    train_value = cfg.mode in ("hissd", "hissd_explicit")
    contrastive = cfg.mode != "bc"
    beta = cfg.loss.beta if contrastive else 0.0
    task_names = sorted(datasets)

    metrics_file = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    records = []
    task_draws = {name: 0 for name in task_names}
    window = _Window()
    try:
        for step in range(1, cfg.steps + 1):
            task = task_names[int(batch_rng.integers(len(task_names)))]
            task_draws[task] += 1
            batch = TorchBatch(
                sample_batch(datasets[task], cfg.batch, batch_rng), cfg.torch_dtype
            )

            if cfg.debug_isolation:
                hashes = {g: _group_hash(p) for g, p in groups.items()}

            # forward passes on the pre-update parameters (shared by all
            # three objectives)
            if train_value:
                _, v_tot = value_sequence(model.value, batch)
                with torch.no_grad():
                    _, v_tot_target = value_sequence(
                        model.value_target, batch, include_final=True
                    )
            if train_value or contrastive:
                need_grad = train_value  # planner trains the encoder
                with torch.set_grad_enabled(need_grad):
                    skills = encode_common(model.encoder, batch)

            stats = {}
            if train_value:
                loss_v = L.value_loss(
                    batch, model.value, model.value_target, cfg.loss,
                    v_tot=v_tot, v_tot_target=v_tot_target,
                )
                opt_value.zero_grad()
                loss_v.backward()
                opt_value.step()
                stats["value_loss"] = loss_v.item()
                if cfg.debug_isolation:
                    _assert_only_changed(groups, hashes, "value")
                    hashes["value"] = _group_hash(groups["value"])

                if cfg.mode == "hissd":
                    loss_p, mean_w = L.planner_loss(
                        batch, model.encoder, model.predictor, model.value,
                        model.value_target, cfg.loss,
                        skills=skills, v_tot_now=v_tot.detach(),
                    )
                    stats["mean_advantage_weight"] = mean_w.item()
                else:
                    loss_p = L.planner_loss_explicit(
                        batch, model.encoder, model.predictor,
                        model.value_target, cfg.loss, skills=skills,
                    )
                opt_planner.zero_grad()
                loss_p.backward()
                opt_planner.step()
                stats["planner_loss"] = loss_p.item()
                if cfg.debug_isolation:
                    _assert_only_changed(groups, hashes, "planner")
                    hashes["planner"] = _group_hash(groups["planner"])

            negatives = None
            if contrastive:
                negatives = _sample_negatives(
                    datasets, task, cfg.negatives_per_task, neg_rng, model
                )
            loss_c, bc_term, contrast_term = L.controller_loss(
                batch, model.decoder, model.encoder, model.task_encoder,
                model.task_momentum, negatives, cfg.loss, pair_rng,
                beta=beta,
                skills=skills.detach() if (train_value or contrastive) else None,
            )
            opt_controller.zero_grad()
            loss_c.backward()
            opt_controller.step()
            stats["controller_loss"] = loss_c.item()
            stats["contrastive"] = contrast_term.item()
            if cfg.debug_isolation:
                _assert_only_changed(groups, hashes, "controller")

            if train_value:
                ema_update(model.value_target, model.value, cfg.target_rate)
            if contrastive:
                ema_update(model.task_momentum, model.task_encoder, cfg.momentum_rate)

            window.add(**stats)
            if step % cfg.metrics_interval == 0 or step == cfg.steps:
                rec = window.flush(step)
                records.append(rec)
                if metrics_file:
                    metrics_file.write(dumps_record(rec) + "\n")
                    metrics_file.flush()
    finally:
        if metrics_file:
            metrics_file.close()

    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, step=cfg.steps)
    return TrainResult(model, records, task_draws)


def _assert_only_changed(groups, hashes, expected):
    for name, params in groups.items():
        now = _group_hash(params)
        if name == expected:
            continue
        if now != hashes[name]:
            raise AssertionError(
                f"optimizing {expected} modified parameter group {name}"
            )
