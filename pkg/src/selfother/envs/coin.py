"""Cooperative coin game: both agents are paid for their two colours and
penalised for the third."""

from __future__ import annotations

import numpy as np

from .base import DOWN, LEFT, PASS, RIGHT, UP, Game, GameState, plane_view


def coin_reward(a: int, b: int, c: int, d: int, e: int, f: int) -> float:
    """Shared terminal reward from the six category tallies.

    (a, b): own-colour coins taken by self / other, (c, d): partner-colour
    coins taken by self / other, (e, f): third-colour coins taken by self /
    other.
    """
    return float((a + b) ** 2 + (c + d) ** 2 - (e + f) ** 2)


class CoinGame(Game):
    name = "coin"
    nactions = 5
    nplanes = 6          # 3 colours, self, other, spare (always zero)
    self_plane = 3
    other_plane = 4

    def __init__(self, height: int = 8, width: int = 8, coins_per_color: int = 4,
                 ncolors: int = 3, max_steps: int = 20):
        super().__init__(height, width, max_steps)
        if ncolors != 3:
            raise ValueError("the coin reward needs exactly three colours")
        self.coins_per_color = coins_per_color
        self.ncolors = ncolors
        self.ngoals = ncolors
        if coins_per_color * ncolors + 2 > height * width:
            raise ValueError("grid too small for coins and agents")

    def config(self) -> dict:
        return dict(height=self.height, width=self.width, coins_per_color=self.coins_per_color,
                    ncolors=self.ncolors, max_steps=self.max_steps)

    def _reset(self, rng: np.random.Generator, goals=None) -> GameState:
        # always draw, so forcing goals leaves the layout unchanged
        drawn = [int(g) for g in rng.choice(self.ncolors, 2, replace=False)]
        if goals is None:
            goals = drawn
        elif goals[0] == goals[1]:
            raise ValueError("coin game agents need distinct colours")
        ncoins = self.coins_per_color * self.ncolors
        cells = rng.choice(self.height * self.width, ncoins + 2, replace=False)
        grid = np.full((self.height, self.width), -1, dtype=np.int64)
        for k, cell in enumerate(cells[2:]):
            grid[divmod(int(cell), self.width)] = k % self.ncolors
        positions = [divmod(int(cells[0]), self.width), divmod(int(cells[1]), self.width)]
        first = int(rng.integers(2))
        return GameState(self.height, self.width, positions, list(goals), first, first,
                         self.max_steps, grid=grid,
                         tallies=np.zeros((2, self.ncolors), dtype=np.int64))

    def _apply(self, state, actor, action, rewards):
        if action == PASS:
            return []
        if not self._move(state, actor, action):
            return [["invalid"]]
        r, c = state.positions[actor]
        color = int(state.grid[r, c])
        if color < 0:
            return []
        state.grid[r, c] = -1
        state.tallies[actor, color] += 1
        return [["coin", color]]

    def _terminal(self, state, rewards):
        value = self.returns(state)[0]
        rewards[0] += value
        rewards[1] += value

    def category_tallies(self, state: GameState, agent: int) -> tuple[int, ...]:
        """(self/own, other/own, self/partner, other/partner, self/neither, other/neither)."""
        return category_tallies(state.tallies, state.goals, agent)

    def returns(self, state):
        if not state.done:
            return [0.0, 0.0]
        value = coin_reward(*self.category_tallies(state, 0))
        return [value, value]

    def won(self, state, agent):
        return False

    def _marks(self, state, perspective):
        rows, cols = np.nonzero(state.grid >= 0)
        for r, c in zip(rows, cols):
            yield int(r), int(c), int(state.grid[r, c])
        yield from self._agent_marks(state, perspective)

    def decode(self, obs):
        vol = plane_view(obs, self.height, self.width, self.nplanes)
        grid = np.full((self.height, self.width), -1, dtype=np.int64)
        for color in range(self.ncolors):
            grid[vol[:, :, color] > 0] = color
        return {"grid": grid, "self": _where(vol[:, :, self.self_plane]),
                "other": _where(vol[:, :, self.other_plane])}

    def render(self, state):
        rows = []
        for r in range(self.height):
            line = []
            for c in range(self.width):
                ch = "." if state.grid[r, c] < 0 else "abc"[state.grid[r, c]]
                if state.positions[0] == (r, c):
                    ch = "1" if state.positions[1] != (r, c) else "X"
                elif state.positions[1] == (r, c):
                    ch = "2"
                line.append(ch)
            rows.append("".join(line))
        return "\n".join(rows)

    def greedy_action(self, state: GameState, agent: int) -> int:
        """Step toward the nearest coin of the agent's own colour, or pass."""
        return greedy_toward(state.positions[agent], np.argwhere(state.grid == state.goals[agent]))


def category_tallies(tallies: np.ndarray, goals, agent: int) -> tuple[int, ...]:
    other = 1 - agent
    own_c, partner_c = goals[agent], goals[other]
    neither = 3 - own_c - partner_c
    return (int(tallies[agent, own_c]), int(tallies[other, own_c]),
            int(tallies[agent, partner_c]), int(tallies[other, partner_c]),
            int(tallies[agent, neither]), int(tallies[other, neither]))


def _where(plane):
    hits = np.argwhere(plane > 0)
    return tuple(int(v) for v in hits[0]) if len(hits) else None


def greedy_toward(pos, targets) -> int:
    """Action that shortens the Manhattan distance to the closest target.

    Ties between targets go to the first in row-major order; vertical moves
    are preferred over horizontal ones. Passes when there is no target or
    the agent already stands on one.
    """
    if len(targets) == 0:
        return PASS
    dists = np.abs(targets[:, 0] - pos[0]) + np.abs(targets[:, 1] - pos[1])
    tr, tc = targets[int(np.argmin(dists))]
    if tr < pos[0]:
        return UP
    if tr > pos[0]:
        return DOWN
    if tc < pos[1]:
        return LEFT
    if tc > pos[1]:
        return RIGHT
    return PASS
