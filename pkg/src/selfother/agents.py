"""SOM agent, the TOG / NOM / IPP / SPP comparison agents, and scripted players.

Every agent follows the same episode protocol driven by
:func:`selfother.training.run_episode`:

``reset_episode`` -> (``act`` when holding the turn, ``observe_other`` after
the other player moved, ``add_reward``)* -> ``episode_loss``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .neural import PolicyValueNet, RecurrentState

VARIANTS = ("som", "tog", "nom", "ipp", "spp", "scripted", "random")


def one_hot(index: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[index] = 1.0
    return v


class GoalEstimate:
    """Belief over the other player's goal, stored as unconstrained logits."""

    def __init__(self, ngoals: int):
        if ngoals < 1:
            raise ValueError("ngoals must be >= 1")
        self.logits = np.zeros(ngoals)

    @property
    def ngoals(self) -> int:
        return self.logits.shape[0]

    def simplex(self) -> np.ndarray:
        e = np.exp(self.logits - self.logits.max())
        return e / e.sum()

    def argmax(self) -> int:
        # np.argmax returns the lowest index among ties
        return int(np.argmax(self.logits))

    def one_hot(self) -> np.ndarray:
        return one_hot(self.argmax(), self.ngoals)


@dataclass
class StepRecord:
    logits: Tensor
    value: Tensor
    action: int
    reward: float = 0.0


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    aux_terms: list = field(default_factory=list)   # cross-entropy Tensors
    carry: float = 0.0                               # reward seen before the first own step

    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]


def sample_action(probs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> int:
    if greedy:
        return int(np.argmax(probs))
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


class Agent:
    """Base class; concrete agents fill in ``act`` and friends."""

    variant = "base"
    learns = False
    needs_other_goal = False

    def __init__(self):
        self.index = 0
        self.goal = 0
        self.ngoals = 1
        self.greedy = False
        self.trajectory = Trajectory()

    def reset_episode(self, index: int, goal: int, ngoals: int, other_goal: int | None = None) -> None:
        self.index = index
        self.goal = goal
        self.ngoals = ngoals
        self.trajectory = Trajectory()

    def act(self, obs: np.ndarray, state, rng: np.random.Generator) -> int:
        raise NotImplementedError

    def observe_other(self, obs_other: np.ndarray, action: int, rng: np.random.Generator) -> None:
        """Called after the other player acted; ``obs_other`` is the pre-action
        state from the other player's perspective."""

    def add_reward(self, reward: float) -> None:
        if self.trajectory.steps:
            self.trajectory.steps[-1].reward += reward
        else:
            self.trajectory.carry += reward

    def param_sets(self) -> dict:
        return {}

    @property
    def inference_trace(self) -> list[int] | None:
        return None

    def _record(self, out, action: int) -> None:
        step = StepRecord(out.logits, out.value, action)
        if not self.trajectory.steps and self.trajectory.carry:
            step.reward += self.trajectory.carry
            self.trajectory.carry = 0.0
        self.trajectory.steps.append(step)


class NetAgent(Agent):
    learns = True

    def __init__(self, net: PolicyValueNet):
        super().__init__()
        self.net = net
        self.rec_self = net.initial_state()

    def reset_episode(self, index, goal, ngoals, other_goal=None):
        if ngoals != self.net.ngoals:
            raise ValueError(f"game has {ngoals} goals but the net was built for {self.net.ngoals}")
        super().reset_episode(index, goal, ngoals, other_goal)
        self.z_self = one_hot(goal, ngoals)
        self.rec_self = self.net.initial_state()

    def param_sets(self):
        return {"policy": self.net.params}

    def _goal_inputs(self) -> list:
        raise NotImplementedError

    def act(self, obs, state, rng):
        out = self.net.forward(obs, self._goal_inputs(), self.rec_self)
        self.rec_self = out.rec
        action = sample_action(out.probs.data, rng, self.greedy)
        self._record(out, action)
        return action


class NomAgent(NetAgent):
    """Acts from its own goal only."""

    variant = "nom"

    def _goal_inputs(self):
        return [self.z_self]


class TogAgent(NetAgent):
    """Is handed the other player's true goal."""

    variant = "tog"
    needs_other_goal = True

    def reset_episode(self, index, goal, ngoals, other_goal=None):
        if other_goal is None:
            raise ValueError("TOG needs the other agent's true goal")
        super().reset_episode(index, goal, ngoals, other_goal)
        self.z_other = one_hot(other_goal, ngoals)

    def _goal_inputs(self):
        return [self.z_self, self.z_other]


class IppAgent(NomAgent):
    """NOM plus an auxiliary head predicting the other's next action."""

    variant = "ipp"

    def reset_episode(self, index, goal, ngoals, other_goal=None):
        super().reset_episode(index, goal, ngoals, other_goal)
        self._pending: Tensor | None = None
        self.predictions: list[tuple[int, int]] = []

    def act(self, obs, state, rng):
        out = self.net.forward(obs, self._goal_inputs(), self.rec_self)
        self.rec_self = out.rec
        action = sample_action(out.probs.data, rng, self.greedy)
        self._record(out, action)
        self._pending = ad.softmax(out.aux_logits)
        return action

    def observe_other(self, obs_other, action, rng):
        if self._pending is None:
            return
        self.trajectory.aux_terms.append(ad.cross_entropy(self._pending, action))
        self.predictions.append((int(np.argmax(self._pending.data)), action))
        self._pending = None

    def prediction_accuracy(self) -> float | None:
        if not self.predictions:
            return None
        return float(np.mean([p == t for p, t in self.predictions]))


class SppAgent(Agent):
    """Separate opponent-prediction LSTM whose hidden state feeds the policy."""

    variant = "spp"
    learns = True

    def __init__(self, policy_net: PolicyValueNet, opponent_net: PolicyValueNet):
        super().__init__()
        if policy_net.extra_inputs != opponent_net.hidden:
            raise ValueError("policy net extra input must match the opponent net's hidden size")
        self.net = policy_net
        self.opp_net = opponent_net

    def reset_episode(self, index, goal, ngoals, other_goal=None):
        super().reset_episode(index, goal, ngoals, other_goal)
        self.z_self = one_hot(goal, ngoals)
        self.rec_self = self.net.initial_state()
        self.rec_opp = self.opp_net.initial_state()
        self._pending: Tensor | None = None
        self.predictions: list[tuple[int, int]] = []

    def param_sets(self):
        return {"policy": self.net.params, "opponent": self.opp_net.params}

    def act(self, obs, state, rng):
        opp = self.opp_net.forward(obs, [self.z_self], self.rec_opp, need_value=False)
        self.rec_opp = opp.rec
        self._pending = opp.probs
        # the opponent net is trained only by its own prediction loss
        hidden = opp.rec.h.detach()
        out = self.net.forward(obs, [self.z_self], self.rec_self, extra=hidden)
        self.rec_self = out.rec
        action = sample_action(out.probs.data, rng, self.greedy)
        self._record(out, action)
        return action

    observe_other = IppAgent.observe_other
    prediction_accuracy = IppAgent.prediction_accuracy


@dataclass
class InferenceConfig:
    n_steps: int = 10
    lr: float = 0.1
    temperature: float = 1.0


class SomAgent(NetAgent):
    """Self other-modeling: one net, used as f_self to act and as f_other
    (goal slots swapped) to infer the other player's goal online."""

    variant = "som"

    def __init__(self, net: PolicyValueNet, inference: InferenceConfig | None = None):
        if net.goal_slots != 2:
            raise ValueError("SOM needs a two-slot net")
        super().__init__(net)
        self.inference = inference or InferenceConfig()
        self.estimate = GoalEstimate(net.ngoals)
        self.rec_other = net.initial_state()
        self.rec_other_steps = 0
        self.trace: list[int] = []

    def reset_episode(self, index, goal, ngoals, other_goal=None):
        super().reset_episode(index, goal, ngoals, other_goal)
        self.estimate = GoalEstimate(ngoals)
        self.rec_other = self.net.initial_state()
        self.rec_other_steps = 0
        self.trace = []

    @property
    def inference_trace(self):
        return self.trace

    def _goal_inputs(self):
        return [self.z_self, self.estimate.one_hot()]

    def f_self(self, s, z_other, rec, frozen=False):
        return self.net.forward(s, [self.z_self, z_other], rec, frozen=frozen)

    def f_other(self, s_other, z_other, rec, frozen=True, need_value=False):
        return self.net.forward(s_other, [z_other, self.z_self], rec, frozen=frozen,
                                need_value=need_value)

    def infer_goal(self, s_other: np.ndarray, observed_action: int, rng: np.random.Generator,
                   n_steps: int | None = None) -> GoalEstimate:
        """Gradient steps on the goal logits so that f_other explains the
        observed action. Parameters are never touched."""
        n_steps = self.inference.n_steps if n_steps is None else n_steps
        if n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        saved = self.rec_other.snapshot()
        if self.estimate.ngoals > 1:
            logits = Tensor(self.estimate.logits.copy(), requires_grad=True)
            for _ in range(n_steps):
                z = ad.gumbel_softmax(logits, self.inference.temperature, rng)
                out = self.f_other(s_other, z, RecurrentState.restore(saved))
                loss = ad.cross_entropy(out.probs, observed_action)
                grad = ad.backward(loss)[logits]
                logits.data -= self.inference.lr * grad
            self.estimate.logits = logits.data.copy()
        # advance the persistent other-state once per observed game step
        out = self.f_other(s_other, self.estimate.one_hot(), RecurrentState.restore(saved))
        self.rec_other = out.rec.detached()
        self.rec_other_steps += 1
        self.trace.append(self.estimate.argmax())
        return self.estimate

    def observe_other(self, obs_other, action, rng):
        self.infer_goal(obs_other, action, rng)


class ScriptedAgent(Agent):
    """Non-learning player: ``greedy`` heads for its own goal using the game's
    hand-written policy, ``random`` acts uniformly."""

    def __init__(self, game, mode: str = "greedy", nactions: int | None = None):
        super().__init__()
        if mode not in ("greedy", "random"):
            raise ValueError(f"unknown scripted mode {mode!r}")
        self.game = game
        self.mode = mode
        self.variant = "scripted" if mode == "greedy" else "random"
        self.nactions = nactions or game.nactions

    def act(self, obs, state, rng):
        if self.mode == "random":
            return int(rng.integers(self.nactions))
        return int(self.game.greedy_action(state, self.index))


def build_agent(variant: str, nfeatures: int, ngoals: int, hidden: int, nactions: int,
                rng: np.random.Generator, inference: InferenceConfig | None = None,
                game=None) -> Agent:
    """Fresh agent of the requested variant with semi-orthogonal init."""
    if variant == "som":
        return SomAgent(PolicyValueNet(nfeatures, ngoals, hidden, nactions, 2, rng=rng), inference)
    if variant == "tog":
        return TogAgent(PolicyValueNet(nfeatures, ngoals, hidden, nactions, 2, rng=rng))
    if variant == "nom":
        return NomAgent(PolicyValueNet(nfeatures, ngoals, hidden, nactions, 1, rng=rng))
    if variant == "ipp":
        return IppAgent(PolicyValueNet(nfeatures, ngoals, hidden, nactions, 1,
                                       aux_actions=nactions, rng=rng))
    if variant == "spp":
        opp = PolicyValueNet(nfeatures, ngoals, hidden, nactions, 1, rng=rng)
        pol = PolicyValueNet(nfeatures, ngoals, hidden, nactions, 1, extra_inputs=hidden, rng=rng)
        return SppAgent(pol, opp)
    if variant in ("scripted", "random"):
        if game is None:
            raise ValueError("scripted agents need the game")
        return ScriptedAgent(game, "greedy" if variant == "scripted" else "random")
    raise ValueError(f"unknown agent variant {variant!r}; choose from {VARIANTS}")


def init_from_nom(agent: Agent, nom_state: dict[str, np.ndarray], nfeatures: int, ngoals: int) -> None:
    """Start any net-based agent from a pretrained NOM parameter set.

    The NOM input columns (state, own goal) are copied in place; columns for
    inputs NOM never saw (second goal slot, SPP hidden feed) start at zero,
    so the initialised agent behaves exactly like the NOM net. Heads NOM
    lacks (IPP auxiliary head) keep their fresh initialisation.
    """
    nets = [agent.net] + ([agent.opp_net] if isinstance(agent, SppAgent) else [])
    d = nfeatures + ngoals
    for net in nets:
        for name, tensor in net.params.items():
            if name not in nom_state:
                continue
            src = np.asarray(nom_state[name])
            if name == "fc1.w":
                w = np.zeros_like(tensor.data)
                w[:, :d] = src[:, :d]
                tensor.data[...] = w
            else:
                tensor.data[...] = src
