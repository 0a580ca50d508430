"""Shared machinery for the turn-based two-player grid games."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

UP, DOWN, LEFT, RIGHT, PASS, PICK = range(6)
ACTION_NAMES = ("up", "down", "left", "right", "pass", "pick")
MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


class TurnError(RuntimeError):
    """Raised when an agent acts out of turn or after the episode ended."""


@dataclass
class GameState:
    """Full state of one episode. Coordinates are (row, col)."""

    height: int
    width: int
    positions: list
    goals: list[int]
    first_actor: int
    turn: int
    max_steps: int
    step: int = 0
    done: bool = False
    # object layer: coin colour / item type per cell, -1 when empty
    grid: np.ndarray | None = None
    # coins collected, shape (agents, colours)
    tallies: np.ndarray | None = None
    inventories: list = field(default_factory=lambda: [[], []])
    actions_taken: list = field(default_factory=lambda: [0, 0])
    reached_goal: int | None = None
    blocks: frozenset = frozenset()

    def copy(self) -> "GameState":
        return copy.deepcopy(self)

    def same_as(self, other: "GameState") -> bool:
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


@dataclass
class StepResult:
    events: list
    rewards: list[float]
    done: bool


def encode_planes(height: int, width: int, nplanes: int, marks) -> np.ndarray:
    """Few-hot (height, width, planes) volume flattened row-major.

    ``marks`` yields (row, col, plane); ``None`` positions are skipped.
    """
    vol = np.zeros((height, width, nplanes))
    for r, c, p in marks:
        vol[r, c, p] = 1.0
    return vol.reshape(-1)


def plane_view(obs: np.ndarray, height: int, width: int, nplanes: int) -> np.ndarray:
    return np.asarray(obs).reshape(height, width, nplanes)


def moved(pos, action):
    dr, dc = MOVES[action]
    return pos[0] + dr, pos[1] + dc


class Game:
    """Interface every game implements.

    Subclasses define ``name``, ``ngoals``, ``nactions``, ``nplanes`` and the
    hooks ``_reset``, ``_apply``, ``_marks``, ``returns``.
    """

    name = "base"
    ngoals = 1
    nactions = 5
    nplanes = 1
    self_plane = 0
    other_plane = 1

    def __init__(self, height: int, width: int, max_steps: int):
        self.height = height
        self.width = width
        self.max_steps = max_steps

    @property
    def nfeatures(self) -> int:
        return self.height * self.width * self.nplanes

    def config(self) -> dict:
        raise NotImplementedError

    def reset(self, seed: int, goals: list[int] | None = None) -> GameState:
        """Deterministic function of (config, seed, goals)."""
        rng = np.random.Generator(np.random.PCG64(seed))
        state = self._reset(rng, goals)
        # a zero-step limit gives an episode that is over before it starts
        state.done = state.max_steps <= 0
        return state

    def acting_agent(self, state: GameState) -> int:
        return state.turn

    def non_acting_agent(self, state: GameState) -> int:
        return 1 - state.turn

    def observe(self, state: GameState, perspective: int) -> np.ndarray:
        return encode_planes(self.height, self.width, self.nplanes,
                             self._marks(state, perspective))

    def _agent_marks(self, state: GameState, perspective: int):
        me, other = state.positions[perspective], state.positions[1 - perspective]
        if me is not None:
            yield me[0], me[1], self.self_plane
        if other is not None:
            yield other[0], other[1], self.other_plane

    def in_bounds(self, pos) -> bool:
        return 0 <= pos[0] < self.height and 0 <= pos[1] < self.width

    def step(self, state: GameState, actor: int, action: int) -> StepResult:
        """Apply ``action`` for ``actor`` in place."""
        if state.done:
            raise TurnError("episode already finished")
        if actor != state.turn:
            raise TurnError(f"agent {actor} acted out of turn (turn holder is {state.turn})")
        if not 0 <= action < self.nactions:
            raise ValueError(f"action {action} outside [0, {self.nactions})")
        rewards = [0.0, 0.0]
        events = self._apply(state, actor, action, rewards)
        state.actions_taken[actor] += 1
        state.step += 1
        state.turn = 1 - actor
        if state.step >= state.max_steps:
            state.done = True
        if state.done:
            self._terminal(state, rewards)
        return StepResult(events, rewards, state.done)

    def _terminal(self, state: GameState, rewards: list[float]) -> None:
        pass

    def _move(self, state: GameState, actor: int, action: int) -> bool:
        if action not in MOVES:
            return False
        target = moved(state.positions[actor], action)
        if not self.passable(state, state.positions[actor], target):
            return False
        state.positions[actor] = target
        return True

    def passable(self, state: GameState, src, dst) -> bool:
        return self.in_bounds(dst) and dst not in state.blocks

    def returns(self, state: GameState) -> list[float]:
        """Undiscounted per-agent episode return."""
        raise NotImplementedError

    def won(self, state: GameState, agent: int) -> bool:
        raise NotImplementedError

    def decode(self, obs: np.ndarray) -> dict[str, Any]:
        raise NotImplementedError

    def render(self, state: GameState) -> str:
        raise NotImplementedError


# ---------------------------------------------------------------- replays

@dataclass
class EpisodeReplay:
    seed: int
    game: str
    config: dict
    goals: list[int]
    first_actor: int
    records: list = field(default_factory=list)   # (actor, action, events)
    rewards: list | None = None

    def to_lines(self) -> list[str]:
        head = {"type": "header", "seed": self.seed, "game": self.game, "config": self.config,
                "goals": self.goals, "first_actor": self.first_actor}
        lines = [json.dumps(head, sort_keys=True)]
        for t, (actor, action, events) in enumerate(self.records):
            lines.append(json.dumps({"type": "action", "t": t, "actor": actor,
                                     "action": action, "events": events}, sort_keys=True))
        if self.rewards is not None:
            lines.append(json.dumps({"type": "end", "rewards": self.rewards}, sort_keys=True))
        return lines

    def dumps(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str, source: str = "<replay>") -> "EpisodeReplay":
        lines = [ln for ln in text.splitlines()]
        replay = None
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["type"]
                if replay is None:
                    if kind != "header":
                        raise ValueError("first record must be the header")
                    replay = cls(int(rec["seed"]), rec["game"], rec["config"],
                                 list(rec["goals"]), int(rec["first_actor"]))
                elif kind == "action":
                    if replay.rewards is not None:
                        raise ValueError("action after end record")
                    if rec["t"] != len(replay.records):
                        raise ValueError(f"expected step {len(replay.records)}, got {rec['t']}")
                    replay.records.append((int(rec["actor"]), int(rec["action"]),
                                           _untuple(rec["events"])))
                elif kind == "end":
                    replay.rewards = list(rec["rewards"])
                else:
                    raise ValueError(f"unknown record type {kind!r}")
            except (ValueError, KeyError, TypeError) as exc:
                raise ReplayParseError(f"{source}:{lineno}: {exc}") from exc
        if replay is None:
            raise ReplayParseError(f"{source}:1: empty replay")
        if replay.rewards is None:
            raise ReplayParseError(f"{source}:{len(lines)}: truncated replay (no end record)")
        return replay

    @classmethod
    def load(cls, path) -> "EpisodeReplay":
        with open(path) as fh:
            return cls.loads(fh.read(), source=str(path))


def _untuple(events):
    return [list(e) for e in events]


class ReplayParseError(ValueError):
    pass
