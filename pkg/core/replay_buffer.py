from dataclasses import dataclass
from typing import Dict

import numpy as np


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


class ReplayBuffer:
    """Fixed-capacity FIFO store of (s, a, r, s', done) with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros((self.capacity, action_dim))
        self.rewards = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.dones = np.zeros(self.capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs: np.ndarray, action: np.ndarray, reward: float, next_obs: np.ndarray, done: bool) -> None:
        index = self.cursor
        self.obs[index] = obs
        self.actions[index] = action
        self.rewards[index] = reward
        self.next_obs[index] = next_obs
        self.dones[index] = float(done)
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("Cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(batch_size, rng)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])

    def ordered(self) -> Batch:
        """Stored transitions from oldest to newest."""
        if self.size < self.capacity:
            order = np.arange(self.size)
        else:
            order = (np.arange(self.capacity) + self.cursor) % self.capacity
        return Batch(self.obs[order], self.actions[order], self.rewards[order], self.next_obs[order], self.dones[order])

    def state_dict(self) -> Dict[str, np.ndarray]:
        data = self.ordered()
        return {'capacity': np.array(self.capacity), 'obs': data.obs, 'actions': data.actions,
                'rewards': data.rewards, 'next_obs': data.next_obs, 'dones': data.dones}

    @classmethod
    def from_state_dict(cls, state: Dict[str, np.ndarray]) -> 'ReplayBuffer':
        obs = np.asarray(state['obs'])
        actions = np.asarray(state['actions'])
        buffer = cls(int(state['capacity']), obs.shape[1], actions.shape[1])
        for row in range(obs.shape[0]):
            buffer.add(obs[row], actions[row], float(state['rewards'][row]), state['next_obs'][row],
                       bool(state['dones'][row]))
        return buffer
