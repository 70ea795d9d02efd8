import numpy as np
import pytest

from hissd import datagen as dg
from hissd import gridbattle as gb
from hissd import nets


def truncate_episode(ep: dg.EpisodeData, steps: int) -> dg.EpisodeData:
    """Clip an episode to its first `steps` transitions (for toy batches)."""
    T = min(steps, ep.length)
    return dg.EpisodeData(
        seed=ep.seed,
        epsilon=ep.epsilon,
        won=False,
        ret=float(ep.rewards[:T].sum()),
        actions=ep.actions[:T],
        rewards=ep.rewards[:T],
        dones=ep.dones[:T],
        avail=ep.avail[:T],
        obs_own=ep.obs_own[: T + 1],
        obs_allies=ep.obs_allies[: T + 1],
        obs_enemies=ep.obs_enemies[: T + 1],
        global_states=ep.global_states[: T + 1],
    )


def toy_batch(seed=0, n_episodes=2, steps=3, allies=2, enemies=2, epsilon=0.3):
    """Tiny batch of real environment transitions (2 agents, 3 steps)."""
    spec = gb.TaskSpec(f"{allies}v{enemies}", allies, enemies, 8)
    episodes = [
        truncate_episode(
            dg.run_episode(spec, dg.scripted_policy(epsilon, seed + i), seed + i, epsilon),
            steps,
        )
        for i in range(n_episodes)
    ]
    return nets.TorchBatch(dg.make_batch(spec, episodes))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    spec = gb.TaskSpec("3v3", 3, 3, 8)
    path = tmp_path_factory.mktemp("data") / "3v3_expert.jsonl"
    dg.generate(spec, "expert", 12, 0, path)
    return dg.load(path)


@pytest.fixture(scope="session")
def model():
    return nets.build_model(nets.NetConfig(), seed=7)
