"""
Finite MDP, policy and transition-data types for off-policy evaluation
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dfiv.exceptions import DimensionMismatchError
from dfiv.models.features import Mat

_ROW_TOL = 1e-12


def _check_rows(probs: Mat, name: str) -> None:
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=-1), 1.0, rtol=0.0, atol=_ROW_TOL):
        raise ValueError(f"{name} rows must be probability distributions")


@dataclass
class MdpSpec:
    """
    transitions[s, a, s'] and reward_means[s, a, s'] describe the dynamics of
    the executed action; with probability ``action_noise`` the executed action
    is drawn uniformly instead of the chosen one.
    """

    transitions: Mat
    reward_means: Mat
    initial: Mat
    gamma: float
    reward_noise_sd: float = 0.0
    action_noise: float = 0.0

    def __post_init__(self) -> None:
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.reward_means = np.asarray(self.reward_means, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        if self.transitions.ndim != 3 or self.transitions.shape[0] != self.transitions.shape[2]:
            raise DimensionMismatchError("transitions must have shape (S, A, S)")
        if self.reward_means.shape != self.transitions.shape:
            raise DimensionMismatchError("reward_means must match the transition tensor")
        if self.initial.shape != (self.n_states,):
            raise DimensionMismatchError("initial distribution must have one entry per state")
        _check_rows(self.transitions, "transition")
        _check_rows(self.initial, "initial distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.action_noise <= 0.5:
            raise ValueError("action noise must lie in [0, 0.5]")
        if self.reward_noise_sd < 0:
            raise ValueError("reward noise sd must be non-negative")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


@dataclass
class Policy:
    probs: Mat

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise DimensionMismatchError("policy must be a (S, A) matrix")
        _check_rows(self.probs, "policy")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.shape[0], n_actions))
        probs[np.arange(actions.shape[0]), actions] = 1.0
        return cls(probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass
class TransitionDataset:
    states: Mat
    actions: Mat
    rewards: Mat
    next_states: Mat
    n_states: int
    n_actions: int
    gamma: float

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.next_states = np.asarray(self.next_states, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        size = self.states.shape[0]
        if not (self.actions.shape[0] == self.rewards.shape[0] == self.next_states.shape[0] == size):
            raise DimensionMismatchError("transition columns differ in length")
        if size and (
            self.states.min() < 0 or self.states.max() >= self.n_states
            or self.next_states.min() < 0 or self.next_states.max() >= self.n_states
            or self.actions.min() < 0 or self.actions.max() >= self.n_actions
        ):
            raise ValueError("state or action index out of range")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    def __len__(self) -> int:
        return self.states.shape[0]

    def counts(self) -> Mat:
        """Number of transitions per (s, a)."""
        out = np.zeros((self.n_states, self.n_actions), dtype=np.int64)
        np.add.at(out, (self.states, self.actions), 1)
        return out

    def subset(self, index) -> "TransitionDataset":
        return TransitionDataset(
            states=self.states[index],
            actions=self.actions[index],
            rewards=self.rewards[index],
            next_states=self.next_states[index],
            n_states=self.n_states,
            n_actions=self.n_actions,
            gamma=self.gamma,
        )
