"""Turn-based two-player grid games: coin, recipe and door."""

from .base import (ACTION_NAMES, DOWN, LEFT, PASS, PICK, RIGHT, UP, EpisodeReplay, Game,
                   GameState, ReplayParseError, StepResult, TurnError, encode_planes)
from .coin import CoinGame, category_tallies, coin_reward
from .door import GOAL_REWARD, STEP_PENALTY, DoorGame
from .recipe import RECIPES, RecipeGame, crafted, extra_items, recipe_reward, recipes_overlap

GAMES = {"coin": CoinGame, "recipe": RecipeGame, "door": DoorGame}

# hidden size used for each game's policy net
DEFAULT_HIDDEN = {"coin": 64, "recipe": 64, "door": 128}


def make_game(name: str, **config) -> Game:
    try:
        cls = GAMES[name]
    except KeyError:
        raise ValueError(f"unknown game {name!r}; choose from {sorted(GAMES)}") from None
    return cls(**config)


__all__ = [
    "ACTION_NAMES", "DEFAULT_HIDDEN", "DOWN", "GAMES", "GOAL_REWARD", "LEFT", "PASS", "PICK",
    "RECIPES", "RIGHT", "STEP_PENALTY", "UP", "CoinGame", "DoorGame", "EpisodeReplay", "Game",
    "GameState", "RecipeGame", "ReplayParseError", "StepResult", "TurnError", "category_tallies",
    "coin_reward", "crafted", "encode_planes", "extra_items", "make_game", "recipe_reward",
    "recipes_overlap",
]
