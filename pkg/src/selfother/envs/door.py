"""Cooperative door game with asymmetric roles.

Layout (rows x cols = 5 x 9 by default): goal ``d`` sits at (d, 0) behind
door ``d`` at (d, 1); switch ``d`` is at (d, width-1). Door ``d`` can be
entered only while some agent stands on switch ``d``. Goal cells are walled
off from each other, so a goal is reachable only through its own door.
"""

from __future__ import annotations

import numpy as np

from .base import LEFT, PASS, Game, GameState, plane_view
from .coin import _where, greedy_toward

GOAL_REWARD = 3.0
STEP_PENALTY = 0.1


class DoorGame(Game):
    name = "door"
    nactions = 5
    # 5 goals, 5 door-open flags, 5 switches, self, other, block, 2 spare
    nplanes = 20
    self_plane = 15
    other_plane = 16
    block_plane = 17

    def __init__(self, height: int = 5, width: int = 9, max_steps: int = 22,
                 blocks: tuple = ()):
        if height != 5:
            raise ValueError("the door game has exactly five doors, one per row")
        if width < 4:
            raise ValueError("need room between the doors and the switches")
        super().__init__(height, width, max_steps)
        self.ngoals = height
        self.blocks = frozenset(tuple(b) for b in blocks)
        self.goal_cells = [(d, 0) for d in range(height)]
        self.door_cells = [(d, 1) for d in range(height)]
        self.switch_cells = [(d, width - 1) for d in range(height)]
        fixed = set(self.goal_cells) | set(self.door_cells) | set(self.switch_cells) | self.blocks
        self.free_cells = [(r, c) for r in range(height) for c in range(width) if (r, c) not in fixed]

    def config(self) -> dict:
        return dict(height=self.height, width=self.width, max_steps=self.max_steps,
                    blocks=sorted(list(b) for b in self.blocks))

    def _reset(self, rng, goals=None) -> GameState:
        # always draw, so forcing goals leaves the layout unchanged
        drawn = [int(g) for g in rng.integers(self.ngoals, size=2)]
        if goals is None:
            goals = drawn
        picks = rng.choice(len(self.free_cells), 2, replace=False)
        positions = [self.free_cells[int(k)] for k in picks]
        first = int(rng.integers(2))
        return GameState(self.height, self.width, positions, list(goals), first, first,
                         self.max_steps, blocks=self.blocks)

    def door_open(self, state: GameState, door: int) -> bool:
        return self.switch_cells[door] in state.positions

    def passable(self, state, src, dst) -> bool:
        if not self.in_bounds(dst) or dst in self.blocks:
            return False
        if dst[1] == 1 and not self.door_open(state, dst[0]):
            return False
        if src[1] == 0 and dst[1] == 0:
            return False
        return True

    def _apply(self, state, actor, action, rewards):
        rewards[actor] -= STEP_PENALTY
        if action == PASS:
            return []
        if not self._move(state, actor, action):
            return [["invalid"]]
        if state.positions[actor] == self.goal_cells[state.goals[actor]]:
            state.reached_goal = actor
            state.done = True
            rewards[0] += GOAL_REWARD
            rewards[1] += GOAL_REWARD
            return [["goal"]]
        return []

    def returns(self, state):
        bonus = GOAL_REWARD if state.reached_goal is not None else 0.0
        return [bonus - STEP_PENALTY * state.actions_taken[a] for a in range(2)]

    def won(self, state, agent):
        return state.reached_goal is not None

    def _marks(self, state, perspective):
        for d in range(self.ngoals):
            yield self.goal_cells[d][0], self.goal_cells[d][1], d
            if self.door_open(state, d):
                yield self.door_cells[d][0], self.door_cells[d][1], 5 + d
            yield self.switch_cells[d][0], self.switch_cells[d][1], 10 + d
        for r, c in sorted(self.blocks):
            yield r, c, self.block_plane
        yield from self._agent_marks(state, perspective)

    def decode(self, obs):
        vol = plane_view(obs, self.height, self.width, self.nplanes)
        return {
            "goals": [_where(vol[:, :, d]) for d in range(self.ngoals)],
            "open": [bool(vol[:, :, 5 + d].any()) for d in range(self.ngoals)],
            "switches": [_where(vol[:, :, 10 + d]) for d in range(self.ngoals)],
            "blocks": frozenset(map(tuple, np.argwhere(vol[:, :, self.block_plane] > 0).tolist())),
            "self": _where(vol[:, :, self.self_plane]),
            "other": _where(vol[:, :, self.other_plane]),
        }

    def render(self, state):
        rows = []
        for r in range(self.height):
            line = []
            for c in range(self.width):
                cell = (r, c)
                if cell in self.goal_cells:
                    ch = str(self.goal_cells.index(cell) + 1)
                elif cell in self.door_cells:
                    ch = "|" if not self.door_open(state, r) else "_"
                elif cell in self.switch_cells:
                    ch = "s"
                elif cell in self.blocks:
                    ch = "#"
                else:
                    ch = "."
                if state.positions[0] == cell:
                    ch = "A" if state.positions[1] != cell else "X"
                elif state.positions[1] == cell:
                    ch = "B"
                line.append(ch)
            rows.append("".join(line))
        return "\n".join(rows)


    def greedy_action(self, state: GameState, agent: int) -> int:
        """Walk to the cell in front of the own door, then wait there and
        step through once the partner opens it."""
        goal = state.goals[agent]
        front = (goal, 2)
        pos = state.positions[agent]
        if pos == front:
            return LEFT if self.door_open(state, goal) else PASS
        if pos == self.door_cells[goal]:
            return LEFT
        return greedy_toward(pos, np.array([front]))
