"""Flat-array ring replay buffer with an owned sampling stream."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError


@dataclass
class TransitionBatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray  # 1.0 only on true termination, never on time-limit truncation


class ReplayBuffer:
    """FIFO ring over preallocated float64 arrays; uniform sampling with replacement."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, rng):
        if capacity < 1:
            raise ContractError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.count = 0  # total insertions, monotone
        self.rng = rng

    def __len__(self):
        return min(self.count, self.capacity)

    def add(self, s, a, r, s_next, done) -> None:
        a = np.asarray(a, dtype=np.float64)
        if np.any(np.abs(a) > 1.0):
            raise ContractError(f"action outside [-1, 1]: {a}")
        if not np.isfinite(r):
            raise ContractError(f"non-finite reward {r}")
        i = self.count % self.capacity
        self.s[i] = s
        self.a[i] = a
        self.r[i] = float(r)
        self.s_next[i] = s_next
        self.done[i] = 1.0 if done else 0.0
        self.count += 1

    def sample(self, batch_size: int) -> TransitionBatch:
        n = len(self)
        if n == 0:
            raise ContractError("sample from empty buffer")
        idx = self.rng.integers(0, n, size=batch_size)
        return TransitionBatch(self.s[idx], self.a[idx], self.r[idx],
                               self.s_next[idx], self.done[idx])
