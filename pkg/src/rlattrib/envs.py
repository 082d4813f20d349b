"""Small deterministic discrete environments.

Three environments share one interface (``reset``, ``step``, ``obs_dim``,
``n_actions``): FrozenLake 4x4 (non-slippery), an 8x8 empty MiniGrid-style
room with an egocentric view, and a chain MDP used as an analytic oracle.
The two tabular ones additionally expose their transition model so exact
policy evaluation is possible.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class EnvError(Exception):
    pass


class StepAfterDone(EnvError):
    pass


class NotTabular(EnvError):
    pass


class EnvId(str, Enum):
    FROZENLAKE = "frozenlake"
    EMPTYGRID = "emptygrid"
    CHAIN = "chain"


@dataclass(frozen=True)
class EnvSpec:
    id: EnvId
    max_steps: int
    gamma_default: float = 0.99

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 <= self.gamma_default <= 1.0:
            raise ValueError("gamma_default must lie in [0, 1]")


@dataclass(frozen=True)
class StepResult:
    next_obs: np.ndarray
    reward: float
    done: bool
    truncated: bool


class DiscreteEnv:
    """Shared episode bookkeeping; subclasses implement ``_reset`` and ``_transition``."""

    spec: EnvSpec
    obs_dim: int
    n_actions: int
    tabular = False

    def __init__(self):
        self._steps = 0
        self._terminal = True
        self._seed = None

    @property
    def step_count(self) -> int:
        return self._steps

    def reset(self, seed: int | None = None) -> np.ndarray:
        # All built-in envs have a single start state; the seed is recorded
        # for interface uniformity only.
        self._seed = seed
        self._steps = 0
        self._terminal = False
        return self._reset()

    def step(self, action: int) -> StepResult:
        if self._terminal:
            raise StepAfterDone(f"{self.spec.id.value}: step() called on a finished episode")
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} outside [0, {self.n_actions})")
        self._steps += 1
        obs, reward, done = self._transition(action)
        truncated = (not done) and self._steps >= self.spec.max_steps
        self._terminal = done or truncated
        return StepResult(obs, float(reward), bool(done), bool(truncated))

    def enumerate_states(self) -> list[int]:
        raise NotTabular(f"{self.spec.id.value} is not tabular")

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _transition(self, action: int):
        raise NotImplementedError


class TabularEnv(DiscreteEnv):
    """Env whose observation is a one-hot over ``n_states`` positions."""

    tabular = True
    n_states: int
    start_state = 0

    def _reset(self):
        self._state = self.start_state
        return self.encode(self._state)

    def _transition(self, action):
        s2, r, done = self.model(self._state, action)
        self._state = s2
        return self.encode(s2), r, done

    @property
    def state(self) -> int:
        return self._state

    def encode(self, state: int) -> np.ndarray:
        obs = np.zeros(self.n_states)
        obs[state] = 1.0
        return obs

    def state_of(self, obs: np.ndarray) -> int:
        return int(np.argmax(obs))

    def enumerate_states(self) -> list[int]:
        return list(range(self.n_states))

    def terminal_states(self) -> set[int]:
        return set()

    def model(self, state: int, action: int) -> tuple[int, float, bool]:
        """Deterministic transition ``(next_state, reward, done)``."""
        raise NotImplementedError


FROZENLAKE_4X4 = ("SFFF", "FHFH", "FFFH", "HFFG")


class FrozenLake(TabularEnv):
    """FrozenLake 4x4, non-slippery. Actions: 0 Left, 1 Down, 2 Right, 3 Up."""

    n_actions = 4

    def __init__(self, max_steps: int = 100, desc=FROZENLAKE_4X4):
        super().__init__()
        self.desc = tuple(desc)
        self.nrow, self.ncol = len(desc), len(desc[0])
        self.n_states = self.nrow * self.ncol
        self.obs_dim = self.n_states
        self.spec = EnvSpec(EnvId.FROZENLAKE, max_steps)
        flat = "".join(desc)
        self.start_state = flat.index("S")
        self._holes = {i for i, c in enumerate(flat) if c == "H"}
        self._goals = {i for i, c in enumerate(flat) if c == "G"}

    def terminal_states(self):
        return self._holes | self._goals

    def model(self, state, action):
        if state in self._holes or state in self._goals:
            return state, 0.0, True
        row, col = divmod(state, self.ncol)
        if action == 0:
            col = max(col - 1, 0)
        elif action == 1:
            row = min(row + 1, self.nrow - 1)
        elif action == 2:
            col = min(col + 1, self.ncol - 1)
        else:
            row = max(row - 1, 0)
        s2 = row * self.ncol + col
        if s2 in self._goals:
            return s2, 1.0, True
        return s2, 0.0, s2 in self._holes


class ChainMDP(TabularEnv):
    """States 0..L-1, actions {0: left, 1: right}; moving right off the end pays 1 and ends."""

    n_actions = 2

    def __init__(self, length: int = 5, max_steps: int | None = None):
        super().__init__()
        if length < 1:
            raise ValueError("chain length must be >= 1")
        self.length = length
        self.n_states = length
        self.obs_dim = length
        self.spec = EnvSpec(EnvId.CHAIN, max_steps if max_steps is not None else 4 * length)

    def model(self, state, action):
        if action == 1:
            if state == self.length - 1:
                return state, 1.0, True
            return state + 1, 0.0, False
        return max(state - 1, 0), 0.0, False


# MiniGrid encodings (object index, color index)
_EMPTY = (1, 0, 0)
_WALL = (2, 5, 0)
_GOAL = (8, 1, 0)
_DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))  # right, down, left, up
VIEW = 7


class EmptyGrid(DiscreteEnv):
    """8x8 empty room (walls on the border), goal in the bottom-right corner.

    Actions follow MiniGrid: 0 turn left, 1 turn right, 2 forward, 3 pickup,
    4 drop, 5 toggle, 6 done; the last four are no-ops here. Observation is
    the 7x7 egocentric (type, color, state) view, channel-first and divided
    by 10, flattened to 147 values. Walls are see-through as in MiniGrid's
    Empty rooms.
    """

    n_actions = 7
    obs_dim = 3 * VIEW * VIEW
    _SCALE = 10.0

    def __init__(self, size: int = 8, max_steps: int | None = None):
        super().__init__()
        self.size = size
        self.spec = EnvSpec(EnvId.EMPTYGRID, max_steps if max_steps is not None else 4 * size * size)
        self.goal = (size - 2, size - 2)

    def _cell(self, x, y):
        if x <= 0 or y <= 0 or x >= self.size - 1 or y >= self.size - 1:
            return _WALL
        if (x, y) == self.goal:
            return _GOAL
        return _EMPTY

    def _reset(self):
        self.agent_pos = (1, 1)
        self.agent_dir = 0
        return self.observe()

    def view(self) -> np.ndarray:
        """The (7, 7, 3) image indexed ``[i, j]`` with the agent at ``(3, 6)`` facing up."""
        fx, fy = _DIRS[self.agent_dir]
        rx, ry = -fy, fx
        ax, ay = self.agent_pos
        img = np.zeros((VIEW, VIEW, 3))
        for i in range(VIEW):
            for j in range(VIEW):
                fwd, lat = VIEW - 1 - j, i - VIEW // 2
                img[i, j] = self._cell(ax + fx * fwd + rx * lat, ay + fy * fwd + ry * lat)
        # the agent's own cell is reported empty
        img[VIEW // 2, VIEW - 1] = _EMPTY
        return img

    def observe(self) -> np.ndarray:
        return self.view().transpose(2, 0, 1).reshape(-1) / self._SCALE

    def _transition(self, action):
        reward, done = 0.0, False
        if action == 0:
            self.agent_dir = (self.agent_dir - 1) % 4
        elif action == 1:
            self.agent_dir = (self.agent_dir + 1) % 4
        elif action == 2:
            fx, fy = _DIRS[self.agent_dir]
            nx, ny = self.agent_pos[0] + fx, self.agent_pos[1] + fy
            cell = self._cell(nx, ny)
            if cell != _WALL:
                self.agent_pos = (nx, ny)
            if cell == _GOAL:
                done = True
                reward = 1.0 - 0.9 * (self._steps / self.spec.max_steps)
        return self.observe(), reward, done


def make_env(env_id: str, **kwargs) -> DiscreteEnv:
    key = EnvId(env_id.lower())
    if key is EnvId.FROZENLAKE:
        return FrozenLake(**kwargs)
    if key is EnvId.EMPTYGRID:
        return EmptyGrid(**kwargs)
    return ChainMDP(**kwargs)
