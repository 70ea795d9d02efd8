"""Scripted behavior policies, dataset-quality calibration, and offline episode files.

Dataset files are UTF-8 JSON lines: line 1 is a meta record (task spec,
quality, seeds, statistics), each following line is one episode. Floats are
written with 17 significant digits so every value round-trips exactly; an
episode can always be replayed bit-for-bit by feeding its stored actions
into the environment from its stored seed.

Quality regimes follow the usual offline-RL convention: expert data comes
from the scripted expert; medium data from an epsilon-noisy expert calibrated
so its win rate is roughly half the expert's; medium-expert is a 50/50
concatenation; medium-replay anneals epsilon from 1.0 down to the calibrated
value across the run, emulating the replay buffer of an improving policy.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from . import gridbattle as gb
from .errors import DatasetError, PreconditionError

FORMAT_VERSION = "hissd-dataset-v1"
DEFAULT_BATCH = 32  # trajectories per batch


class Quality(enum.Enum):
    EXPERT = "expert"
    MEDIUM = "medium"
    MEDIUM_EXPERT = "medium_expert"
    MEDIUM_REPLAY = "medium_replay"


# --------------------------------------------------------------------------
# Scripted policies
# --------------------------------------------------------------------------

def expert_action(state: gb.WorldState, agent_id: int) -> int:
    """Deterministic heuristic: focus the weakest reachable enemy.

    Attacks the lowest-hp enemy in range (ties broken by enemy index);
    otherwise moves one step along the axis with the larger distance toward
    the nearest living enemy, falling back to the other axis when blocked.
    Dead agents no-op.
    """
    me = state.entities[agent_id]
    if not me.alive:
        return 0
    mask = gb.available_actions(state, agent_id)

    best_j = -1
    best_hp = None
    for j, enemy in enumerate(state.enemies):
        if mask[gb.N_FIXED_ACTIONS + j]:
            if best_hp is None or enemy.hp < best_hp:
                best_j, best_hp = j, enemy.hp
    if best_j >= 0:
        return gb.N_FIXED_ACTIONS + best_j

    target = None
    best_d = None
    for enemy in state.enemies:
        if not enemy.alive:
            continue
        d = max(abs(enemy.x - me.x), abs(enemy.y - me.y))
        if best_d is None or d < best_d:
            target, best_d = enemy, d
    if target is None:
        return 0

    dx = target.x - me.x
    dy = target.y - me.y
    # action ids: 1=N(y+1) 2=S(y-1) 3=E(x+1) 4=W(x-1)
    x_move = 3 if dx > 0 else 4
    y_move = 1 if dy > 0 else 2
    prefs = []
    if abs(dx) >= abs(dy):
        if dx != 0:
            prefs.append(x_move)
        if dy != 0:
            prefs.append(y_move)
    else:
        prefs.append(y_move)
        if dx != 0:
            prefs.append(x_move)
    for a in prefs:
        if mask[a]:
            return a
    return 0


def expert_team_actions(state: gb.WorldState) -> list[int]:
    return [expert_action(state, k) for k in range(state.spec.n_allies)]


def noisy_policy(epsilon: float, seed: int):
    """Policy closure: with probability epsilon pick uniformly among available
    actions, otherwise follow the expert. Uses its own seeded generator."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    rng = np.random.default_rng([int(seed), 104729])

    def policy(state: gb.WorldState, masks: np.ndarray) -> list[int]:
        actions = []
        for k in range(state.spec.n_allies):
            if epsilon > 0.0 and rng.random() < epsilon:
                legal = np.flatnonzero(masks[k])
                actions.append(int(legal[rng.integers(len(legal))]))
            else:
                actions.append(expert_action(state, k))
        return actions

    return policy


def scripted_policy(epsilon: float, seed: int):
    """Like noisy_policy but with the epsilon == 0 fast path (pure expert)."""
    if epsilon == 0.0:
        return lambda state, masks: expert_team_actions(state)
    return noisy_policy(epsilon, seed)


# --------------------------------------------------------------------------
# Episodes
# --------------------------------------------------------------------------

@dataclass
class EpisodeData:
    """One padded-free trajectory with everything the losses consume.

    Observation and global-state arrays have T+1 entries (the last is the
    state after the final action, needed as the bootstrap/prediction target);
    actions, rewards, dones and masks have T entries.
    """

    seed: int
    epsilon: float
    won: bool
    ret: float
    actions: np.ndarray       # [T, K] int64
    rewards: np.ndarray       # [T]
    dones: np.ndarray         # [T] bool
    avail: np.ndarray         # [T, K, A] bool
    obs_own: np.ndarray       # [T+1, K, 4]
    obs_allies: np.ndarray    # [T+1, K, K-1, 5]
    obs_enemies: np.ndarray   # [T+1, K, E, 5]
    global_states: np.ndarray  # [T+1, G]

    @property
    def length(self) -> int:
        return self.actions.shape[0]


def run_episode(spec: gb.TaskSpec, policy, seed: int, epsilon: float = 0.0) -> EpisodeData:
    """Roll one full episode under a (state, masks) -> actions policy."""
    state, obs, gs = gb.reset(spec, seed)
    obs_own = [np.stack([o["own"] for o in obs])]
    obs_al = [np.stack([o["allies"] for o in obs])]
    obs_en = [np.stack([o["enemies"] for o in obs])]
    globals_ = [gs]
    actions, rewards, dones, avail = [], [], [], []

    done = False
    won = False
    while not done:
        masks = gb.all_masks(state)
        acts = policy(state, masks)
        state, obs, gs, r, done, won = gb.step(state, acts)
        actions.append(acts)
        rewards.append(r)
        dones.append(done)
        avail.append(masks)
        obs_own.append(np.stack([o["own"] for o in obs]))
        obs_al.append(np.stack([o["allies"] for o in obs]))
        obs_en.append(np.stack([o["enemies"] for o in obs]))
        globals_.append(gs)

    return EpisodeData(
        seed=seed,
        epsilon=epsilon,
        won=won,
        ret=float(sum(rewards)),
        actions=np.asarray(actions, dtype=np.int64),
        rewards=np.asarray(rewards, dtype=np.float64),
        dones=np.asarray(dones, dtype=bool),
        avail=np.asarray(avail, dtype=bool),
        obs_own=np.stack(obs_own),
        obs_allies=np.stack(obs_al),
        obs_enemies=np.stack(obs_en),
        global_states=np.stack(globals_),
    )


def replay_rewards(spec: gb.TaskSpec, episode: EpisodeData) -> tuple[np.ndarray, bool]:
    """Re-run an episode's stored actions from its seed; used to verify files."""
    state, _, _ = gb.reset(spec, episode.seed)
    rewards = []
    won = False
    for acts in episode.actions:
        state, _, _, r, done, won = gb.step(state, acts)
        rewards.append(r)
    return np.asarray(rewards), won


def measure_win_rate(
    spec: gb.TaskSpec, epsilon: float, episodes: int, base_seed: int
) -> float:
    """Rollout oracle: win rate of the epsilon-noisy expert over seeded episodes."""
    wins = 0
    for i in range(episodes):
        policy = scripted_policy(epsilon, base_seed + i)
        ep = run_episode(spec, policy, base_seed + i, epsilon)
        wins += int(ep.won)
    return wins / episodes


# --------------------------------------------------------------------------
# Medium calibration
# --------------------------------------------------------------------------

def calibrate_medium(
    spec: gb.TaskSpec,
    seed: int,
    target_ratio: float = 0.5,
    tolerance: float = 0.1,
    episodes: int = 200,
    max_iters: int = 20,
) -> tuple[float, float]:
    """Bisect epsilon until the noisy win rate lands in the target band.

    The band is [(target_ratio - tolerance), (target_ratio + tolerance)]
    times the measured expert rate. All measurements share one seed stream
    (common random numbers), which keeps the rate monotone enough in epsilon
    for bisection. Returns (epsilon, measured win rate).
    """
    expert_rate = measure_win_rate(spec, 0.0, episodes, seed)
    if expert_rate <= 0.0:
        raise PreconditionError("uncalibratable: expert win rate is 0")
    lo_band = (target_ratio - tolerance) * expert_rate
    hi_band = (target_ratio + tolerance) * expert_rate

    def in_band(rate):
        return lo_band <= rate <= hi_band

    if in_band(expert_rate):
        return 0.0, expert_rate

    lo, hi = 0.0, 1.0
    rate_hi = measure_win_rate(spec, 1.0, episodes, seed)
    if in_band(rate_hi):
        return 1.0, rate_hi
    best = (abs(expert_rate - (lo_band + hi_band) / 2), 0.0, expert_rate)
    for _ in range(max_iters):
        mid = (lo + hi) / 2
        rate = measure_win_rate(spec, mid, episodes, seed)
        gap = abs(rate - (lo_band + hi_band) / 2)
        if gap < best[0]:
            best = (gap, mid, rate)
        if in_band(rate):
            return mid, rate
        if rate > hi_band:
            lo = mid
        else:
            hi = mid
    raise PreconditionError(
        f"calibration failed after {max_iters} bisection steps; "
        f"closest rate {best[2]:.4f} at epsilon {best[1]:.6f}"
    )


# --------------------------------------------------------------------------
# Serialization: JSON lines with 17-significant-digit floats
# --------------------------------------------------------------------------

def _write_value(obj, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        f = float(obj)
        if not math.isfinite(f):
            raise ValueError("non-finite float in dataset record")
        out.append("%.17g" % f)
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _write_value(v, out)
        out.append("]")
    elif isinstance(obj, dict):
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _write_value(v, out)
        out.append("}")
    else:
        raise TypeError(f"cannot serialize {type(obj)!r}")


def dumps_record(obj: dict) -> str:
    out: list[str] = []
    _write_value(obj, out)
    return "".join(out)


def _spec_to_dict(spec: gb.TaskSpec) -> dict:
    return {
        "name": spec.name,
        "n_allies": spec.n_allies,
        "n_enemies": spec.n_enemies,
        "grid_size": spec.grid_size,
        "max_steps": spec.max_steps,
        "unit_hp": spec.unit_hp,
        "attack_range": spec.attack_range,
        "attack_damage": spec.attack_damage,
        "sight_range": spec.sight_range,
    }


def spec_from_dict(d: dict) -> gb.TaskSpec:
    return gb.TaskSpec(**d)


def _episode_to_record(ep: EpisodeData) -> dict:
    return {
        "seed": ep.seed,
        "epsilon": ep.epsilon,
        "won": ep.won,
        "ret": ep.ret,
        "actions": ep.actions.tolist(),
        "rewards": ep.rewards.tolist(),
        "dones": ep.dones.astype(int).tolist(),
        "avail": ep.avail.astype(int).tolist(),
        "obs_own": ep.obs_own.tolist(),
        "obs_allies": ep.obs_allies.tolist(),
        "obs_enemies": ep.obs_enemies.tolist(),
        "global_states": ep.global_states.tolist(),
    }


_EPISODE_KEYS = (
    "seed", "epsilon", "won", "ret", "actions", "rewards", "dones", "avail",
    "obs_own", "obs_allies", "obs_enemies", "global_states",
)


def _episode_from_record(rec: dict) -> EpisodeData:
    missing = [k for k in _EPISODE_KEYS if k not in rec]
    if missing:
        raise KeyError(f"missing fields {missing}")
    return EpisodeData(
        seed=int(rec["seed"]),
        epsilon=float(rec["epsilon"]),
        won=bool(rec["won"]),
        ret=float(rec["ret"]),
        actions=np.asarray(rec["actions"], dtype=np.int64),
        rewards=np.asarray(rec["rewards"], dtype=np.float64),
        dones=np.asarray(rec["dones"], dtype=bool),
        avail=np.asarray(rec["avail"], dtype=bool),
        obs_own=np.asarray(rec["obs_own"], dtype=np.float64),
        obs_allies=np.asarray(rec["obs_allies"], dtype=np.float64),
        obs_enemies=np.asarray(rec["obs_enemies"], dtype=np.float64),
        global_states=np.asarray(rec["global_states"], dtype=np.float64),
    )


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    spec: gb.TaskSpec
    meta: dict
    episodes: list[EpisodeData]

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def returns(self) -> np.ndarray:
        return np.asarray([ep.ret for ep in self.episodes])


def _epsilon_schedule(quality: Quality, n: int, epsilon) -> list[float]:
    if quality is Quality.EXPERT:
        return [0.0] * n
    if epsilon is None:
        raise PreconditionError(
            f"quality {quality.value} requires a calibrated epsilon"
        )
    epsilon = float(epsilon)
    if quality is Quality.MEDIUM:
        return [epsilon] * n
    if quality is Quality.MEDIUM_EXPERT:
        half = n // 2
        return [0.0] * half + [epsilon] * (n - half)
    # medium_replay: linear anneal from fully random down to the medium level
    if n == 1:
        return [epsilon]
    return [1.0 + (epsilon - 1.0) * i / (n - 1) for i in range(n)]


def generate(
    spec: gb.TaskSpec,
    quality: Quality | str,
    n_episodes: int,
    seed: int,
    out_path,
    epsilon: float | None = None,
) -> dict:
    """Generate a dataset file; returns the meta record that was written."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    quality = Quality(quality) if not isinstance(quality, Quality) else quality
    schedule = _epsilon_schedule(quality, n_episodes, epsilon)

    episodes = []
    for i, eps in enumerate(schedule):
        policy = scripted_policy(eps, seed + i)
        episodes.append(run_episode(spec, policy, seed + i, eps))

    meta = {
        "format": FORMAT_VERSION,
        "task": spec.name,
        "task_spec": _spec_to_dict(spec),
        "quality": quality.value,
        "episodes": n_episodes,
        "base_seed": seed,
        "epsilon": None if quality is Quality.EXPERT else float(epsilon),
        "mean_return": float(np.mean([ep.ret for ep in episodes])),
        "win_rate": float(np.mean([ep.won for ep in episodes])),
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(dumps_record(meta))
        fh.write("\n")
        for ep in episodes:
            fh.write(dumps_record(_episode_to_record(ep)))
            fh.write("\n")
    return meta


_META_KEYS = (
    "format", "task", "task_spec", "quality", "episodes", "base_seed",
    "epsilon", "mean_return", "win_rate",
)


def load(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty dataset file")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: line 1: bad meta record ({exc})") from exc
    missing = [k for k in _META_KEYS if k not in meta]
    if missing or meta.get("format") != FORMAT_VERSION:
        raise DatasetError(f"{path}: line 1: bad meta record (missing {missing})")
    spec = spec_from_dict(meta["task_spec"])

    episodes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            episodes.append(_episode_from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
    if len(episodes) != meta["episodes"]:
        raise DatasetError(
            f"{path}: meta announces {meta['episodes']} episodes, "
            f"found {len(episodes)}"
        )
    return Dataset(spec=spec, meta=meta, episodes=episodes)


# --------------------------------------------------------------------------
# Padded batches
# --------------------------------------------------------------------------

@dataclass
class Batch:
    """B same-task episodes padded to the longest length in the batch.

    Padding conventions: observations/global states are zero, actions are
    no-op, availability allows only no-op, and the valid mask is False, so
    masked positions contribute exactly zero to every loss.
    """

    spec: gb.TaskSpec
    obs_own: np.ndarray       # [B, L+1, K, 4]
    obs_allies: np.ndarray    # [B, L+1, K, K-1, 5]
    obs_enemies: np.ndarray   # [B, L+1, K, E, 5]
    global_states: np.ndarray  # [B, L+1, G]
    actions: np.ndarray       # [B, L, K]
    avail: np.ndarray         # [B, L+1, K, A] bool
    rewards: np.ndarray       # [B, L]
    dones: np.ndarray         # [B, L]
    valid: np.ndarray         # [B, L] bool
    alive: np.ndarray         # [B, L+1, K] bool

    @property
    def size(self) -> int:
        return self.obs_own.shape[0]

    @property
    def length(self) -> int:
        return self.actions.shape[1]


def make_batch(spec: gb.TaskSpec, episodes: list[EpisodeData]) -> Batch:
    B = len(episodes)
    L = max(ep.length for ep in episodes)
    K, E, A, G = spec.n_allies, spec.n_enemies, spec.n_actions, spec.state_dim

    obs_own = np.zeros((B, L + 1, K, gb.OWN_FEATS))
    obs_allies = np.zeros((B, L + 1, K, K - 1, gb.ENTITY_FEATS))
    obs_enemies = np.zeros((B, L + 1, K, E, gb.ENTITY_FEATS))
    global_states = np.zeros((B, L + 1, G))
    actions = np.zeros((B, L, K), dtype=np.int64)
    avail = np.zeros((B, L + 1, K, A), dtype=bool)
    avail[..., 0] = True
    rewards = np.zeros((B, L))
    dones = np.ones((B, L))
    valid = np.zeros((B, L), dtype=bool)

    for b, ep in enumerate(episodes):
        T = ep.length
        obs_own[b, : T + 1] = ep.obs_own
        obs_allies[b, : T + 1] = ep.obs_allies
        obs_enemies[b, : T + 1] = ep.obs_enemies
        global_states[b, : T + 1] = ep.global_states
        actions[b, :T] = ep.actions
        avail[b, :T] = ep.avail
        rewards[b, :T] = ep.rewards
        dones[b, :T] = ep.dones.astype(np.float64)
        valid[b, :T] = True

    alive = obs_own[..., 3] > 0.5
    return Batch(
        spec=spec,
        obs_own=obs_own,
        obs_allies=obs_allies,
        obs_enemies=obs_enemies,
        global_states=global_states,
        actions=actions,
        avail=avail,
        rewards=rewards,
        dones=dones,
        valid=valid,
        alive=alive,
    )


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform without-replacement draw of full trajectories."""
    n = len(dataset)
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    idx = rng.choice(n, size=batch_size, replace=False)
    return make_batch(dataset.spec, [dataset.episodes[int(i)] for i in idx])
