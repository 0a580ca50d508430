"""Adversarial recipe game: two agents race for scarce items."""

from __future__ import annotations

from collections import Counter

import numpy as np

from .base import PASS, PICK, Game, GameState, plane_view
from .coin import _where, greedy_toward

ITEMS = ("sun", "star", "moon", "lightning")
# recipe k needs two of item k and one of item k+1
RECIPES = tuple((k, k, (k + 1) % 4) for k in range(4))

CRAFT_REWARD = 1.0
EXTRA_ITEM_PENALTY = 0.1


def recipes_overlap(a: int, b: int) -> bool:
    return bool(set(RECIPES[a]) & set(RECIPES[b]))


def crafted(inventory, goal: int) -> bool:
    have = Counter(inventory)
    return all(have[item] >= n for item, n in Counter(RECIPES[goal]).items())


def extra_items(inventory, goal: int) -> int:
    """Picked items left over once the recipe's multiset is taken out."""
    left = Counter(inventory)
    left.subtract(Counter(RECIPES[goal]))
    return int(sum(max(v, 0) for v in left.values()))


def recipe_reward(inventory, goal: int) -> float:
    return (CRAFT_REWARD if crafted(inventory, goal) else 0.0) - EXTRA_ITEM_PENALTY * extra_items(inventory, goal)


class RecipeGame(Game):
    name = "recipe"
    ngoals = 4
    nactions = 6
    nplanes = 8          # 4 item types, self, other, 2 spare (always zero)
    self_plane = 4
    other_plane = 5

    def __init__(self, height: int = 4, width: int = 6, max_steps: int = 50,
                 overlap: bool = True):
        if width != 6:
            raise ValueError("the mirrored item layout assumes 6 columns")
        if height < 4:
            raise ValueError("need at least 4 rows to place one item of each type per band")
        super().__init__(height, width, max_steps)
        self.overlap = overlap

    def config(self) -> dict:
        return dict(height=self.height, width=self.width, max_steps=self.max_steps,
                    overlap=self.overlap)

    def assign_goals(self, rng: np.random.Generator) -> list[int]:
        first = int(rng.integers(4))
        if self.overlap:
            options = [g for g in range(4) if recipes_overlap(first, g)]
        else:
            options = [g for g in range(4) if not recipes_overlap(first, g)]
        second = int(options[int(rng.integers(len(options)))])
        goals = [first, second]
        if rng.integers(2):
            goals.reverse()
        return goals

    def _reset(self, rng, goals=None) -> GameState:
        # always draw, so forcing goals leaves the layout unchanged
        drawn = self.assign_goals(rng)
        if goals is None:
            goals = drawn
        grid = np.full((self.height, self.width), -1, dtype=np.int64)
        band = [(r, c) for r in range(self.height) for c in (1, 2)]
        picks = rng.choice(len(band), 4, replace=False)
        for item, k in enumerate(picks):
            r, c = band[int(k)]
            grid[r, c] = item
            grid[r, self.width - 1 - c] = item
        row = int(rng.integers(self.height))
        left = int(rng.integers(2))
        positions = [None, None]
        positions[left] = (row, 0)
        positions[1 - left] = (row, self.width - 1)
        first = int(rng.integers(2))
        return GameState(self.height, self.width, positions, list(goals), first, first,
                         self.max_steps, grid=grid, inventories=[[], []])

    def _apply(self, state, actor, action, rewards):
        if action == PASS:
            return []
        if action == PICK:
            r, c = state.positions[actor]
            item = int(state.grid[r, c])
            if item < 0:
                return [["invalid"]]
            state.grid[r, c] = -1
            state.inventories[actor].append(item)
            return [["pick", item]]
        if not self._move(state, actor, action):
            return [["invalid"]]
        return []

    def _terminal(self, state, rewards):
        for agent, value in enumerate(self.returns(state)):
            rewards[agent] += value

    def returns(self, state):
        if not state.done:
            return [0.0, 0.0]
        return [recipe_reward(state.inventories[a], state.goals[a]) for a in range(2)]

    def won(self, state, agent):
        return state.done and crafted(state.inventories[agent], state.goals[agent])

    def _marks(self, state, perspective):
        rows, cols = np.nonzero(state.grid >= 0)
        for r, c in zip(rows, cols):
            yield int(r), int(c), int(state.grid[r, c])
        yield from self._agent_marks(state, perspective)

    def decode(self, obs):
        vol = plane_view(obs, self.height, self.width, self.nplanes)
        grid = np.full((self.height, self.width), -1, dtype=np.int64)
        for item in range(4):
            grid[vol[:, :, item] > 0] = item
        return {"grid": grid, "self": _where(vol[:, :, self.self_plane]),
                "other": _where(vol[:, :, self.other_plane])}

    def render(self, state):
        rows = []
        for r in range(self.height):
            line = []
            for c in range(self.width):
                ch = "." if state.grid[r, c] < 0 else "SXML"[state.grid[r, c]]
                if state.positions[0] == (r, c):
                    ch = "1" if state.positions[1] != (r, c) else "X"
                elif state.positions[1] == (r, c):
                    ch = "2"
                line.append(ch)
            rows.append("".join(line))
        inv = "  ".join(f"inv{a + 1}={[ITEMS[i] for i in state.inventories[a]]}" for a in range(2))
        return "\n".join(rows) + "\n" + inv

    def greedy_action(self, state: GameState, agent: int) -> int:
        """Pick a still-needed item underfoot, else walk to the nearest one."""
        need = Counter(RECIPES[state.goals[agent]])
        need.subtract(Counter(state.inventories[agent]))
        wanted = [item for item, n in need.items() if n > 0]
        r, c = state.positions[agent]
        if state.grid[r, c] in wanted:
            return PICK
        targets = np.argwhere(np.isin(state.grid, wanted)) if wanted else np.empty((0, 2))
        return greedy_toward(state.positions[agent], targets)
