"""Decentralized execution, win-rate evaluation, and skill-embedding export.

At test time each agent sees only its own observation: the policy path
computes the common skill (with its recurrent hidden state), the task skill,
and masked action logits per agent, never touching the global state. The
scripted expert can be wrapped as a policy object for cross-checks; it is
the only policy kind that receives the true world state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from . import gridbattle as gb
from .datagen import expert_team_actions
from .nets import SkillModel

SKILL_DIM = 64


class ModelPolicy:
    """Greedy or sampling decentralized policy around a trained model.

    Consumes per-agent observations and availability masks only. Hidden
    states persist across timesteps within an episode and reset on
    start_episode.
    """

    wants_state = False

    def __init__(self, model: SkillModel, greedy: bool = True, rng=None):
        self.model = model
        self.greedy = greedy
        self.rng = rng or np.random.default_rng(0)
        self.dtype = next(model.parameters()).dtype
        self._h_enc = None
        self._h_dec = None
        self.last_skills = None

    def start_episode(self, spec: gb.TaskSpec):
        k, d = spec.n_allies, self.model.cfg.hidden_dim
        self._h_enc = torch.zeros(k, d, dtype=self.dtype)
        self._h_dec = torch.zeros(k, d, dtype=self.dtype)

    @torch.no_grad()
    def act(self, obs: list[dict], masks: np.ndarray) -> list[int]:
        own = torch.from_numpy(np.stack([o["own"] for o in obs])).to(self.dtype)
        allies = torch.from_numpy(np.stack([o["allies"] for o in obs])).to(self.dtype)
        enemies = torch.from_numpy(np.stack([o["enemies"] for o in obs])).to(self.dtype)

        c, self._h_enc = self.model.encoder(own, allies, enemies, self._h_enc)
        z = self.model.task_encoder(own, allies, enemies)
        logits, self._h_dec = self.model.decoder(
            own, allies, enemies, c, z, self._h_dec
        )
        self.last_skills = (c.numpy().copy(), z.numpy().copy())

        avail = torch.from_numpy(masks)
        masked = logits.masked_fill(~avail, float("-inf"))
        if self.greedy:
            return [int(row.argmax()) for row in masked]
        probs = torch.softmax(masked.double(), dim=-1).numpy()
        return [
            int(self.rng.choice(len(p), p=p / p.sum())) for p in probs
        ]


class ScriptedPolicy:
    """The data-collection expert wrapped with the policy interface."""

    wants_state = True

    def start_episode(self, spec):
        pass

    def act(self, obs, masks, state):
        return expert_team_actions(state)


@dataclass
class RolloutResult:
    ret: float
    won: bool
    length: int
    coercions: int
    actions: list = field(default_factory=list)
    skills: list = field(default_factory=list)  # (t, agent, alive, c, z)


def rollout(policy, spec: gb.TaskSpec, seed: int,
            collect_skills: bool = False) -> RolloutResult:
    """Run one decentralized episode; the policy never sees the global state."""
    state, obs, _ = gb.reset(spec, seed)
    policy.start_episode(spec)
    ret = 0.0
    done = False
    won = False
    t = 0
    taken = []
    skills = []
    while not done:
        masks = gb.all_masks(state)
        if getattr(policy, "wants_state", False):
            actions = policy.act(obs, masks, state)
        else:
            actions = policy.act(obs, masks)
        if collect_skills and getattr(policy, "last_skills", None) is not None:
            c, z = policy.last_skills
            for k in range(spec.n_allies):
                alive = bool(obs[k]["own"][3] > 0.5)
                skills.append((t, k, alive, c[k].copy(), z[k].copy()))
        taken.append(list(actions))
        state, obs, _, reward, done, won = gb.step(state, actions)
        ret += reward
        t += 1
    return RolloutResult(ret, won, t, state.coercions, taken, skills)


@dataclass
class TaskReport:
    task: str
    unseen: bool
    episodes: int
    win_rate: float
    win_std: float
    mean_return: float
    return_std: float
    coercions: int

    def to_record(self) -> dict:
        return {
            "task": self.task,
            "unseen": self.unseen,
            "episodes": self.episodes,
            "win_rate": self.win_rate,
            "win_std": self.win_std,
            "mean_return": self.mean_return,
            "return_std": self.return_std,
            "coercions": self.coercions,
        }


@dataclass
class EvalReport:
    rows: list[TaskReport]
    checkpoint: str
    base_seed: int
    greedy: bool

    def to_records(self) -> list[dict]:
        meta = {
            "checkpoint": self.checkpoint,
            "base_seed": self.base_seed,
            "greedy": self.greedy,
        }
        return [meta] + [row.to_record() for row in self.rows]

    def to_table(self) -> str:
        header = f"{'task':<10} {'kind':<7} {'episodes':>8} {'win rate':>16} {'return':>16}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            kind = "unseen" if r.unseen else "source"
            lines.append(
                f"{r.task:<10} {kind:<7} {r.episodes:>8d} "
                f"{r.win_rate:>8.3f} ± {r.win_std:<5.3f} "
                f"{r.mean_return:>8.3f} ± {r.return_std:<5.3f}"
            )
        return "\n".join(lines)


def evaluate(
    policy_factory,
    specs: list[gb.TaskSpec],
    episodes: int = 32,
    base_seed: int = 0,
    unseen: set | None = None,
    checkpoint_id: str = "",
    greedy: bool = True,
) -> EvalReport:
    """Aggregate rollouts per task over seeded episodes.

    policy_factory() builds a fresh policy (its per-episode state is reset
    through start_episode). Episode seeds are base_seed + index, so a report
    is deterministic given the seed and spec list.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    unseen = unseen or set()
    rows = []
    for spec in specs:
        policy = policy_factory()
        wins, rets, coercions = [], [], 0
        for i in range(episodes):
            result = rollout(policy, spec, base_seed + i)
            wins.append(float(result.won))
            rets.append(result.ret)
            coercions += result.coercions
        rows.append(
            TaskReport(
                task=spec.name,
                unseen=spec.name in unseen,
                episodes=episodes,
                win_rate=float(np.mean(wins)),
                win_std=float(np.std(wins)),
                mean_return=float(np.mean(rets)),
                return_std=float(np.std(rets)),
                coercions=coercions,
            )
        )
    return EvalReport(rows, checkpoint_id, base_seed, greedy)


def export_skills(
    model: SkillModel,
    specs: list[gb.TaskSpec],
    episodes: int,
    out_path,
    base_seed: int = 0,
    greedy: bool = True,
) -> int:
    """Write per-timestep skill vectors to CSV; returns the row count.

    Columns: task, episode, timestep, time_window (1..4 quartile of the
    episode), agent, alive, then 64 common-skill and 64 task-skill
    components.
    """
    header = ["task", "episode", "timestep", "time_window", "agent", "alive"]
    header += [f"c_{i:02d}" for i in range(SKILL_DIM)]
    header += [f"z_{i:02d}" for i in range(SKILL_DIM)]
    rows = 0
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for spec in specs:
            policy = ModelPolicy(model, greedy=greedy)
            for ep in range(episodes):
                result = rollout(policy, spec, base_seed + ep, collect_skills=True)
                for t, agent, alive, c, z in result.skills:
                    window = min(4, int(4 * t / result.length) + 1)
                    writer.writerow(
                        [spec.name, ep, t, window, agent, int(alive)]
                        + [repr(float(x)) for x in c]
                        + [repr(float(x)) for x in z]
                    )
                    rows += 1
    return rows
