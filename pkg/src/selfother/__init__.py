"""Agents that infer a partner's hidden goal by running their own policy
network in the partner's place, with the games, baselines and trainer
needed to study them."""

__version__ = "0.1.0"
