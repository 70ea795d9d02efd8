"""Deterministic multi-task cooperative battle environment on a small grid.

Two teams of identical units fight on a square grid. Allies are controlled
by the caller through discrete per-agent actions; enemies follow a built-in
script (advance toward the nearest living ally, attack the lowest-hp ally in
range). Tasks differ only in unit counts, so one policy with an entity-based
input layout can play every task.

Everything is deterministic: the only randomness is the seed-derived initial
placement, so (reset, fixed action sequence) is bit-reproducible.

Action ids: 0 = no-op, 1..4 = move N/S/E/W, 5 + j = attack enemy j.
Distances are Chebyshev (max of coordinate deltas), which keeps all range
checks in integer arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OWN_FEATS = 4      # hp, x, y, alive
ENTITY_FEATS = 5   # visible, rel x, rel y, hp, team
STATE_FEATS = 5    # x, y, hp, alive, team
N_FIXED_ACTIONS = 5  # no-op + 4 moves

# Raw reward constants before normalization; mirrors the damage/kill/win
# shaping of classic micromanagement benchmarks.
KILL_BONUS = 10.0
WIN_BONUS = 200.0
MAX_RETURN = 20.0

# Action id -> (dx, dy). y grows north.
_MOVE_DELTAS = {1: (0, 1), 2: (0, -1), 3: (1, 0), 4: (-1, 0)}


class EpisodeFinished(RuntimeError):
    """Raised when stepping an episode that is already done."""


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of one battle task."""

    name: str
    n_allies: int
    n_enemies: int
    grid_size: int
    max_steps: int = 60
    unit_hp: int = 10
    attack_range: int = 2
    attack_damage: int = 2
    sight_range: int = 6

    def __post_init__(self):
        if self.n_allies < 1 or self.n_enemies < 1:
            raise ValueError("need at least one ally and one enemy")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.unit_hp < 1 or self.attack_damage < 1:
            raise ValueError("unit_hp and attack_damage must be positive")
        if not (0 <= self.attack_range <= self.sight_range <= self.grid_size):
            raise ValueError("require attack_range <= sight_range <= grid_size")

    @property
    def n_actions(self) -> int:
        return N_FIXED_ACTIONS + self.n_enemies

    @property
    def n_entities(self) -> int:
        return self.n_allies + self.n_enemies

    @property
    def state_dim(self) -> int:
        return STATE_FEATS * self.n_entities

    @property
    def max_raw_return(self) -> float:
        return self.n_enemies * (self.unit_hp + KILL_BONUS) + WIN_BONUS

    @property
    def reward_scale(self) -> float:
        return MAX_RETURN / self.max_raw_return


@dataclass
class Entity:
    id: int
    team: str  # "ally" or "enemy"
    x: int
    y: int
    hp: int

    @property
    def alive(self) -> bool:
        return self.hp > 0


@dataclass
class WorldState:
    spec: TaskSpec
    tick: int
    entities: list[Entity]  # allies first, stable order for the episode
    rng_state: np.random.Generator
    done: bool = False
    won: bool = False
    coercions: int = field(default=0)

    @property
    def allies(self) -> list[Entity]:
        return self.entities[: self.spec.n_allies]

    @property
    def enemies(self) -> list[Entity]:
        return self.entities[self.spec.n_allies :]


def _chebyshev(a: Entity, b: Entity) -> int:
    return max(abs(a.x - b.x), abs(a.y - b.y))


def _column(rng: np.random.Generator, xs: list[int], count: int, grid: int, y0: int):
    """Cells of a formation: vertical columns anchored at y0, filled in order."""
    per_col = min(count, grid)
    y0 = min(max(y0, 0), grid - per_col)
    x0 = int(rng.integers(0, len(xs) - (count - 1) // grid))
    return [(xs[x0 + i // grid], (y0 + i) % grid) for i in range(count)]


def reset(spec: TaskSpec, seed: int):
    """Start an episode. Returns (state, per-agent observations, global state).

    Each team spawns as a seed-derived column formation, allies in the left
    third of the grid and enemies in the right third, with roughly facing
    anchors so formations meet head-on. Columns keep a team together, which
    is what rewards coordinated focus fire. The same seed always produces
    the same placement.
    """
    rng = np.random.default_rng(seed)
    third = max(1, spec.grid_size // 3)
    if spec.n_allies > third * spec.grid_size or spec.n_enemies > third * spec.grid_size:
        raise ValueError("grid too small for the requested unit counts")

    span = min(max(spec.n_allies, spec.n_enemies), spec.grid_size)
    y_anchor = int(rng.integers(0, spec.grid_size - span + 1))
    ally_cells = _column(
        rng, list(range(third)), spec.n_allies, spec.grid_size, y_anchor
    )
    enemy_cells = _column(
        rng,
        list(range(spec.grid_size - 1, spec.grid_size - third - 1, -1)),
        spec.n_enemies,
        spec.grid_size,
        y_anchor + int(rng.integers(-1, 2)),
    )

    entities = []
    for i, (x, y) in enumerate(ally_cells):
        entities.append(Entity(id=i, team="ally", x=x, y=y, hp=spec.unit_hp))
    for j, (x, y) in enumerate(enemy_cells):
        entities.append(
            Entity(id=spec.n_allies + j, team="enemy", x=x, y=y, hp=spec.unit_hp)
        )

    state = WorldState(spec=spec, tick=0, entities=entities, rng_state=rng)
    return state, observations(state), global_state(state)


def available_actions(state: WorldState, agent_id: int) -> np.ndarray:
    """Boolean mask over the action space for one ally.

    Dead agents may only no-op. Moves into walls or cells occupied by a
    living unit are unavailable. Attack j is available iff enemy j is alive
    and within attack range.
    """
    spec = state.spec
    if not 0 <= agent_id < spec.n_allies:
        raise ValueError(f"agent_id {agent_id} out of range")
    mask = np.zeros(spec.n_actions, dtype=bool)
    mask[0] = True
    me = state.entities[agent_id]
    if not me.alive:
        return mask

    occupied = {(e.x, e.y) for e in state.entities if e.alive and e is not me}
    for action, (dx, dy) in _MOVE_DELTAS.items():
        nx, ny = me.x + dx, me.y + dy
        if 0 <= nx < spec.grid_size and 0 <= ny < spec.grid_size:
            mask[action] = (nx, ny) not in occupied
    for j, enemy in enumerate(state.enemies):
        if enemy.alive and _chebyshev(me, enemy) <= spec.attack_range:
            mask[N_FIXED_ACTIONS + j] = True
    return mask


def all_masks(state: WorldState) -> np.ndarray:
    return np.stack(
        [available_actions(state, k) for k in range(state.spec.n_allies)]
    )


def observations(state: WorldState) -> list[dict]:
    """Per-ally observation as {'own': (4,), 'allies': (K-1,5), 'enemies': (E,5)}.

    Entities beyond sight range (and all entities, for a dead observer) have
    visible flag 0 and zeroed relative features; the team flag is structural
    and always present. Coordinates are normalized by grid size, hp by
    maximum hp.
    """
    spec = state.spec
    g = float(spec.grid_size)
    hp_max = float(spec.unit_hp)
    obs = []
    for k in range(spec.n_allies):
        me = state.entities[k]
        own = np.zeros(OWN_FEATS)
        allies = np.zeros((spec.n_allies - 1, ENTITY_FEATS))
        enemies = np.zeros((spec.n_enemies, ENTITY_FEATS))
        allies[:, 4] = 1.0
        if me.alive:
            own[:] = (me.hp / hp_max, me.x / g, me.y / g, 1.0)
            row = 0
            for other in state.allies:
                if other.id == me.id:
                    continue
                if other.alive and _chebyshev(me, other) <= spec.sight_range:
                    allies[row, :4] = (
                        1.0,
                        (other.x - me.x) / g,
                        (other.y - me.y) / g,
                        other.hp / hp_max,
                    )
                row += 1
            for j, other in enumerate(state.enemies):
                if other.alive and _chebyshev(me, other) <= spec.sight_range:
                    enemies[j, :4] = (
                        1.0,
                        (other.x - me.x) / g,
                        (other.y - me.y) / g,
                        other.hp / hp_max,
                    )
        obs.append({"own": own, "allies": allies, "enemies": enemies})
    return obs


def global_state(state: WorldState) -> np.ndarray:
    """Concatenated per-entity blocks (x, y, hp, alive, team), allies first."""
    spec = state.spec
    g = float(spec.grid_size)
    hp_max = float(spec.unit_hp)
    out = np.zeros((spec.n_entities, STATE_FEATS))
    for i, e in enumerate(state.entities):
        out[i] = (
            e.x / g,
            e.y / g,
            e.hp / hp_max if e.alive else 0.0,
            1.0 if e.alive else 0.0,
            1.0 if e.team == "ally" else 0.0,
        )
    return out.reshape(-1)


def _script_move(unit: Entity, target: Entity, occupied: set) -> None:
    """Move one step toward target along the larger-delta axis, in place.

    Falls back to the other axis if the preferred cell is taken; stays put
    when both are blocked. Bounds can never be exceeded when homing.
    """
    dx = target.x - unit.x
    dy = target.y - unit.y
    steps = []
    primary_x = abs(dx) >= abs(dy)
    if primary_x and dx != 0:
        steps.append((int(np.sign(dx)), 0))
    if dy != 0:
        steps.append((0, int(np.sign(dy))))
    if not primary_x and dx != 0:
        steps.append((int(np.sign(dx)), 0))
    for sx, sy in steps:
        cell = (unit.x + sx, unit.y + sy)
        if cell not in occupied:
            occupied.discard((unit.x, unit.y))
            unit.x, unit.y = cell
            occupied.add(cell)
            return


def _nearest(unit: Entity, candidates: list[Entity]) -> Entity | None:
    best = None
    best_d = None
    for c in candidates:
        if not c.alive:
            continue
        d = _chebyshev(unit, c)
        if best_d is None or d < best_d:
            best, best_d = c, d
    return best


def step(state: WorldState, actions) -> tuple:
    """Advance one tick. Returns (state, obs, global state, reward, done, won).

    Resolution order: ally moves (agent index order), ally attacks
    (simultaneous), win check, scripted enemy phase (moves then simultaneous
    attacks), elimination/timeout check. Illegal actions are coerced to no-op
    and counted on ``state.coercions``. The state is updated in place.
    """
    spec = state.spec
    if state.done:
        raise EpisodeFinished("episode finished")
    actions = list(actions)
    if len(actions) != spec.n_allies:
        raise ValueError("need one action per ally")

    masks = all_masks(state)
    legal = []
    for k, a in enumerate(actions):
        a = int(a)
        if a < 0 or a >= spec.n_actions or not masks[k][a]:
            state.coercions += 1
            a = 0
        legal.append(a)

    # Enemy decisions are committed now, from the same pre-tick state the
    # allies acted on (simultaneous play). Enemies idle until an ally comes
    # within sight; once aggroed they attack the lowest-hp ally in range,
    # otherwise advance toward the nearest living ally.
    enemy_plans = []
    living_allies = [a for a in state.allies if a.alive]
    for enemy in state.enemies:
        if not enemy.alive:
            continue
        if all(_chebyshev(enemy, a) > spec.sight_range for a in living_allies):
            continue
        in_range = [
            a for a in living_allies if _chebyshev(enemy, a) <= spec.attack_range
        ]
        if in_range:
            target = min(in_range, key=lambda a: (a.hp, a.id))
            enemy_plans.append((enemy, "attack", target))
        else:
            target = _nearest(enemy, living_allies)
            if target is not None:
                enemy_plans.append((enemy, "move", target))

    raw_reward = 0.0

    # Ally move phase: sequential in index order against live positions.
    occupied = {(e.x, e.y) for e in state.entities if e.alive}
    for k, a in enumerate(legal):
        if a in _MOVE_DELTAS:
            me = state.entities[k]
            dx, dy = _MOVE_DELTAS[a]
            cell = (me.x + dx, me.y + dy)
            if (
                0 <= cell[0] < spec.grid_size
                and 0 <= cell[1] < spec.grid_size
                and cell not in occupied
            ):
                occupied.discard((me.x, me.y))
                me.x, me.y = cell
                occupied.add(cell)

    # Ally attack phase: simultaneous against pre-phase hp.
    incoming = np.zeros(spec.n_enemies)
    for k, a in enumerate(legal):
        if a >= N_FIXED_ACTIONS:
            incoming[a - N_FIXED_ACTIONS] += spec.attack_damage
    for j, enemy in enumerate(state.enemies):
        if incoming[j] > 0 and enemy.alive:
            dealt = min(enemy.hp, int(incoming[j]))
            enemy.hp -= dealt
            raw_reward += dealt
            if enemy.hp == 0:
                raw_reward += KILL_BONUS

    if not any(e.alive for e in state.enemies):
        raw_reward += WIN_BONUS
        state.done = True
        state.won = True
    else:
        # Enemy phase: execute the pre-committed plans. A planned attack
        # only lands if the target is still alive and in range; a planned
        # move chases the target's current position.
        occupied = {(e.x, e.y) for e in state.entities if e.alive}
        for enemy, kind, target in enemy_plans:
            if not enemy.alive or kind != "move" or not target.alive:
                continue
            _script_move(enemy, target, occupied)

        hit = np.zeros(spec.n_allies)
        for enemy, kind, target in enemy_plans:
            if (
                enemy.alive
                and kind == "attack"
                and target.alive
                and _chebyshev(enemy, target) <= spec.attack_range
            ):
                hit[target.id] += spec.attack_damage
        for k, ally in enumerate(state.allies):
            if hit[k] > 0 and ally.alive:
                ally.hp -= min(ally.hp, int(hit[k]))

        if not any(a.alive for a in state.allies):
            state.done = True

    state.tick += 1
    if state.tick >= spec.max_steps:
        state.done = True

    reward = raw_reward * spec.reward_scale
    return state, observations(state), global_state(state), reward, state.done, state.won
