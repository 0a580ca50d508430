"""Episode orchestration, actor-critic loss, Adam and the training loops."""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .agents import (Agent, InferenceConfig, NetAgent, SomAgent, SppAgent, build_agent,
                     init_from_nom, one_hot)
from .autodiff import ParamSet, Tensor
from .envs import DEFAULT_HIDDEN, EpisodeReplay, Game, make_game
from .envs.coin import CoinGame, category_tallies
from .metrics import t_inf
from .neural import RecurrentState

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    inference_lr: float = 0.1
    n_inference_steps: int = 10
    temperature: float = 1.0
    aux_weight: float = 1.0
    workers: int = 1
    episodes: int = 1000
    seed: int = 0
    hidden: int | None = None
    pool_size: int = 5

    def validate(self) -> None:
        for name in ("entropy_coef", "value_coef", "lr", "inference_lr", "temperature", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.n_inference_steps < 0:
            raise ValueError("n_inference_steps must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.pool_size < 2:
            raise ValueError("pool_size must be >= 2")

    def inference(self) -> InferenceConfig:
        return InferenceConfig(self.n_inference_steps, self.inference_lr, self.temperature)


# ---------------------------------------------------------------- returns & loss

def discounted_returns(rewards, gamma: float) -> list[float]:
    """G_t = r_t + gamma * G_{t+1}, with nothing after the last step.

    The recursion runs in exact rational arithmetic on the given doubles and
    rounds once, so the result is the correctly rounded discounted sum.
    """
    g = Fraction(gamma)
    out = [0.0] * len(rewards)
    running = Fraction(0)
    for t in range(len(rewards) - 1, -1, -1):
        running = Fraction(rewards[t]) + g * running
        out[t] = float(running)
    return out


def a3c_loss(steps, gamma: float = 0.99, entropy_coef: float = 0.01,
             value_coef: float = 0.5, advantages=None) -> Tensor:
    """Sum over steps of policy-gradient, entropy-bonus and value-regression
    terms. The advantage in the policy term is treated as a constant.

    ``advantages`` overrides G_t - V(s_t); finite-difference checks pass the
    values from an unperturbed pass so the constant stays fixed.
    """
    if not steps:
        return Tensor(0.0)
    returns = discounted_returns([s.reward for s in steps], gamma)
    if advantages is None:
        advantages = [g - float(s.value.data) for s, g in zip(steps, returns)]
    terms = []
    for s, g, advantage in zip(steps, returns, advantages):
        logp = ad.log_softmax(s.logits)[s.action]
        policy = ad.mul(logp, -advantage)
        entropy = ad.mul(ad.entropy_from_logits(s.logits), -entropy_coef)
        value = ad.mul(ad.square(ad.sub(g, s.value)), value_coef)
        terms.append(ad.stack_sum([policy, entropy, value]))
    return ad.stack_sum(terms)


def agent_loss(agent: Agent, config: TrainConfig) -> Tensor:
    loss = a3c_loss(agent.trajectory.steps, config.gamma, config.entropy_coef, config.value_coef)
    if agent.trajectory.aux_terms:
        aux = ad.mul(ad.stack_sum(agent.trajectory.aux_terms), config.aux_weight)
        loss = ad.add(loss, aux)
    return loss


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam, applied in place to the parameter arrays."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != tensor.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {tensor.data.shape}")
        if weight_decay:
            g = g + weight_decay * tensor.data
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------- one episode

@dataclass
class EpisodeResult:
    replay: EpisodeReplay
    returns: list[float]
    wins: list[bool]
    goals: list[int]
    traces: list            # per agent: argmax goal after each observation, or None
    tallies: list           # per agent: coin category tallies, or None
    losses: list            # per agent: scalar loss Tensor, or None
    trajectories: list


def run_episode(game: Game, agents: list[Agent], config: TrainConfig, rng: np.random.Generator,
                goals: list[int] | None = None, env_seed: int | None = None) -> EpisodeResult:
    """Play one episode; inference happens right after every action."""
    if env_seed is None:
        env_seed = int(rng.integers(2 ** 62))
    state = game.reset(env_seed, goals)
    agent_rngs = ad.split_rng(rng, 2)
    for i, agent in enumerate(agents):
        other_goal = state.goals[1 - i] if agent.needs_other_goal else None
        agent.reset_episode(i, state.goals[i], game.ngoals, other_goal)
    replay = EpisodeReplay(env_seed, game.name, game.config(), list(state.goals), state.first_actor)
    while not state.done:
        i = game.acting_agent(state)
        j = 1 - i
        obs_i = game.observe(state, i)
        action = agents[i].act(obs_i, state, agent_rngs[i])
        result = game.step(state, i, action)
        replay.records.append((i, action, result.events))
        # obs_i is the pre-action state as seen by the player who just moved
        agents[j].observe_other(obs_i, action, agent_rngs[j])
        for k in (0, 1):
            if result.rewards[k]:
                agents[k].add_reward(result.rewards[k])
    returns = game.returns(state)
    replay.rewards = list(returns)
    tallies = None
    if isinstance(game, CoinGame):
        tallies = [category_tallies(state.tallies, state.goals, k) for k in (0, 1)]
    losses = [agent_loss(a, config) if a.learns else None for a in agents]
    return EpisodeResult(
        replay=replay,
        returns=list(returns),
        wins=[bool(game.won(state, k)) for k in (0, 1)],
        goals=list(state.goals),
        traces=[a.inference_trace for a in agents],
        tallies=tallies if tallies is None else [list(t) for t in tallies],
        losses=losses,
        trajectories=[a.trajectory for a in agents],
    )


def episode_grads(agent: Agent, loss: Tensor) -> dict[str, dict[str, np.ndarray]]:
    grads = ad.backward(loss)
    return {key: ps.grad_of(grads) for key, ps in agent.param_sets().items()}


# ---------------------------------------------------------------- shared store

class ParameterStore:
    """Master copy of every learner's parameters plus its Adam state.

    Workers pull a snapshot before an episode and push whole-episode
    gradients, which are applied atomically under one lock.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.masters: dict[str, Agent] = {}
        self.adam: dict[tuple[str, str], AdamState] = {}
        self.updates: dict[str, int] = {}
        self._lock = threading.Lock()

    def register(self, key: str, agent: Agent) -> None:
        self.masters[key] = agent
        self.updates[key] = 0
        for part in agent.param_sets():
            self.adam[(key, part)] = AdamState()

    def pull(self, key: str, local: Agent) -> None:
        with self._lock:
            for part, ps in self.masters[key].param_sets().items():
                local.param_sets()[part].load_state_dict(ps.state_dict())

    def push(self, key: str, grads: dict[str, dict[str, np.ndarray]]) -> None:
        c = self.config
        with self._lock:
            for part, ps in self.masters[key].param_sets().items():
                adam_step(ps, grads[part], self.adam[(key, part)], c.lr, c.beta1, c.beta2,
                          c.adam_eps, c.weight_decay)
            self.updates[key] += 1


# ---------------------------------------------------------------- metrics records

def episode_record(index: int, worker: int, learners: list[str], variants: list[str],
                   result: EpisodeResult, n_steps: int) -> dict:
    inference_correct = []
    for k, trace in enumerate(result.traces):
        if trace is None:
            inference_correct.append(None)
        else:
            inference_correct.append(t_inf(trace, result.goals[1 - k]) is not None)
    return {
        "episode": index,
        "worker": worker,
        "seed": result.replay.seed,
        "learners": learners,
        "variants": variants,
        "goals": result.goals,
        "rewards": result.returns,
        "wins": result.wins,
        "tallies": result.tallies,
        "traces": result.traces,
        "inference_correct": inference_correct,
        "n_inference_steps": n_steps,
    }


class MetricsStream:
    """Collects per-episode records; optionally mirrors them as JSON lines."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self._lock = threading.Lock()
        self._fh = open(path, "w") if path else None

    def emit(self, record: dict) -> None:
        with self._lock:
            self.records.append(record)
            if self._fh:
                self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    store: ParameterStore
    records: list[dict]
    game: Game
    variants: dict[str, str]


def _game_hidden(game: Game, config: TrainConfig) -> int:
    return config.hidden or DEFAULT_HIDDEN.get(game.name, 64)


def make_learners(game: Game, variants: list[str], config: TrainConfig,
                  rng: np.random.Generator) -> dict[str, Agent]:
    hidden = _game_hidden(game, config)
    return {f"p{k}": build_agent(v, game.nfeatures, game.ngoals, hidden, game.nactions, r,
                                 config.inference(), game)
            for k, (v, r) in enumerate(zip(variants, ad.split_rng(rng, len(variants))))}


def pool_pair(rng: np.random.Generator, pool_size: int) -> tuple[int, int]:
    """Two distinct pool members in random seat order."""
    a, b = rng.choice(pool_size, 2, replace=False)
    return int(a), int(b)


def train(game: Game, variants: list[str], config: TrainConfig, *,
          learners: dict[str, Agent] | None = None, pool: bool = False,
          metrics: MetricsStream | None = None, learn: bool = True,
          on_episode: Callable[[dict, EpisodeResult], None] | None = None) -> TrainResult:
    """Episode-level actor-critic training.

    ``variants`` lists one agent variant per seat; with ``pool=True`` (door
    game) every entry of ``variants`` is replicated ``config.pool_size``
    times and each episode samples a distinct pair. Only learners that took
    part in an episode are updated from it.
    """
    config.validate()
    root = ad.make_rng(config.seed)
    init_rng, run_rng = ad.split_rng(root, 2)
    if learners is None:
        if pool:
            variants = [variants[0]] * config.pool_size
            learners = {f"a{k}": a for k, a in enumerate(
                make_learners(game, variants, config, init_rng).values())}
        else:
            learners = make_learners(game, variants, config, init_rng)
    store = ParameterStore(config)
    for key, agent in learners.items():
        store.register(key, agent)
    metrics = metrics or MetricsStream()
    keys = list(learners)

    worker_rngs = ad.split_rng(run_rng, config.workers)
    episode_ids = list(range(config.episodes))

    def run_worker(w: int, my_episodes: list[int]) -> None:
        rng = worker_rngs[w]
        # worker-local copies, synced from the store before each episode
        if config.workers == 1:
            local = learners
        else:
            local = {k: _clone_agent(a, game, config) for k, a in learners.items()}
        for ep in my_episodes:
            ep_rng = ad.split_rng(rng, 1)[0]
            if pool:
                a, b = pool_pair(ep_rng, len(keys))
                seat_keys = [keys[a], keys[b]]
            else:
                seat_keys = keys[:2]
            seats = [local[k] for k in seat_keys]
            if config.workers > 1:
                for k, agent in zip(seat_keys, seats):
                    if agent.learns:
                        store.pull(k, agent)
            result = run_episode(game, seats, config, ep_rng)
            if learn:
                for k, agent, loss in zip(seat_keys, seats, result.losses):
                    if loss is not None and agent.learns and loss.requires_grad:
                        store.push(k, episode_grads(agent, loss))
            record = episode_record(ep, w, seat_keys, [s.variant for s in seats], result,
                                    config.n_inference_steps)
            metrics.emit(record)
            if on_episode:
                on_episode(record, result)

    if config.workers == 1:
        run_worker(0, episode_ids)
    else:
        shards = [episode_ids[w::config.workers] for w in range(config.workers)]
        with ThreadPoolExecutor(config.workers) as pool_exec:
            futures = [pool_exec.submit(run_worker, w, shard) for w, shard in enumerate(shards)]
            for f in futures:
                f.result()
        metrics.records.sort(key=lambda r: r["episode"])
    return TrainResult(store, metrics.records, game, {k: a.variant for k, a in learners.items()})


def _clone_agent(agent: Agent, game: Game, config: TrainConfig) -> Agent:
    if not agent.learns:
        return build_agent(agent.variant, game.nfeatures, game.ngoals, _game_hidden(game, config),
                           game.nactions, ad.make_rng(0), config.inference(), game)
    clone = build_agent(agent.variant, game.nfeatures, game.ngoals, agent.net.hidden,
                        game.nactions, ad.make_rng(0), config.inference(), game)
    for part, ps in agent.param_sets().items():
        clone.param_sets()[part].load_state_dict(ps.state_dict())
    return clone


# ---------------------------------------------------------------- evaluation

def evaluate(game: Game, agents: list[Agent], config: TrainConfig, episodes: int, seed: int,
             greedy: bool = False) -> list[dict]:
    """Frozen-parameter rollouts; returns per-episode records."""
    rng = ad.make_rng(seed)
    for a in agents:
        a.greedy = greedy
    out = []
    try:
        for ep in range(episodes):
            ep_rng = ad.split_rng(rng, 1)[0]
            result = run_episode(game, agents, config, ep_rng)
            out.append(episode_record(ep, 0, [f"p{k}" for k in range(2)],
                                      [a.variant for a in agents], result,
                                      config.n_inference_steps))
    finally:
        for a in agents:
            a.greedy = False
    return out


# ---------------------------------------------------------------- checkpoints

def save_agent(agent: Agent, path, config: TrainConfig | None = None, extra: dict | None = None) -> None:
    """Neural checkpoint plus variant tag and inference settings."""
    from .neural import save_checkpoint
    tensors = {}
    nets = {}
    for part, ps in agent.param_sets().items():
        for name, arr in ps.state_dict().items():
            tensors[f"{part}/{name}"] = arr
    nets["policy"] = agent.net.config()
    if isinstance(agent, SppAgent):
        nets["opponent"] = agent.opp_net.config()
    meta = {"variant": agent.variant, "nets": nets, "format": "selfother-agent"}
    if isinstance(agent, SomAgent):
        meta["inference"] = asdict(agent.inference)
    if config is not None:
        meta["train_config"] = asdict(config)
    if extra:
        meta.update(extra)
    save_checkpoint(path, tensors, meta)


def load_agent(path, game: Game | None = None, inference: InferenceConfig | None = None) -> Agent:
    from .agents import IppAgent, NomAgent, TogAgent
    from .neural import PolicyValueNet, load_checkpoint
    tensors, meta = load_checkpoint(path)
    nets = {part: PolicyValueNet(**cfg) for part, cfg in meta["nets"].items()}
    if game is not None:
        pol = nets["policy"]
        if pol.nfeatures != game.nfeatures or pol.ngoals != game.ngoals or pol.nactions != game.nactions:
            raise ValueError(
                f"checkpoint expects (features, goals, actions) = "
                f"({pol.nfeatures}, {pol.ngoals}, {pol.nactions}) but game {game.name} has "
                f"({game.nfeatures}, {game.ngoals}, {game.nactions})")
    for part, net in nets.items():
        net.params.load_state_dict({n: tensors[f"{part}/{n}"] for n in net.params.names()})
    variant = meta["variant"]
    if variant == "som":
        inf = inference or InferenceConfig(**meta.get("inference", {}))
        return SomAgent(nets["policy"], inf)
    if variant == "tog":
        return TogAgent(nets["policy"])
    if variant == "nom":
        return NomAgent(nets["policy"])
    if variant == "ipp":
        return IppAgent(nets["policy"])
    if variant == "spp":
        return SppAgent(nets["policy"], nets["opponent"])
    raise ValueError(f"{path}: unknown variant {variant!r}")


# ---------------------------------------------------------------- recipe pretraining

@dataclass
class PretrainResult:
    agent: NetAgent
    episodes: int
    success_rate: float
    reached_target: bool
    history: list = field(default_factory=list)


def pretrain_recipe(config: TrainConfig, target: float = 0.9, window: int = 200,
                    game: Game | None = None, checkpoint: str | Path | None = None) -> PretrainResult:
    """Self-play a single NOM net on the non-overlapping recipe game.

    Both seats share the net; their episode gradients are summed into one
    Adam step. Stops once the rolling craft rate over ``window`` episodes
    reaches ``target`` or the episode budget runs out. The checkpoint is
    written either way, with ``reached_target`` recorded in its metadata.
    """
    config.validate()
    game = game or make_game("recipe", overlap=False)
    if getattr(game, "overlap", False):
        raise ValueError("pretraining runs on the non-overlapping recipe variant")
    root = ad.make_rng(config.seed)
    init_rng, run_rng = ad.split_rng(root, 2)
    agent = build_agent("nom", game.nfeatures, game.ngoals, _game_hidden(game, config),
                        game.nactions, init_rng)
    twin = NomAgentView(agent)
    adam = AdamState()
    recent: deque = deque(maxlen=window)
    history = []
    rate = 0.0
    ep = 0
    for ep in range(1, config.episodes + 1):
        ep_rng = ad.split_rng(run_rng, 1)[0]
        result = run_episode(game, [agent, twin], config, ep_rng)
        loss = ad.add(result.losses[0], result.losses[1])
        grads = agent.net.params.grad_of(ad.backward(loss))
        adam_step(agent.net.params, grads, adam, config.lr, config.beta1, config.beta2,
                  config.adam_eps, config.weight_decay)
        recent.extend(result.wins)
        rate = float(np.mean(recent))
        history.append(rate)
        if len(recent) == recent.maxlen and rate >= target:
            break
    reached = len(recent) == recent.maxlen and rate >= target
    if checkpoint is not None:
        save_agent(agent, checkpoint, config, {"pretrain": {"episodes": ep, "success_rate": rate,
                                                            "reached_target": reached}})
    return PretrainResult(agent, ep, rate, reached, history)


class NomAgentView(NetAgent):
    """Second seat driven by the same net as ``base`` (shared parameters)."""

    variant = "nom"

    def __init__(self, base: NetAgent):
        super().__init__(base.net)

    def _goal_inputs(self):
        return [self.z_self]


# ---------------------------------------------------------------- imitation harness

def scripted_sequences(game: Game, episodes: int, rng: np.random.Generator) -> list:
    """Self-play of the game's goal-greedy script. Each seat of each episode
    yields (own goal, partner goal, [(observation, action), ...])."""
    from .agents import ScriptedAgent
    data = []
    for _ in range(episodes):
        seats = [ScriptedAgent(game), ScriptedAgent(game)]
        state = game.reset(int(rng.integers(2 ** 62)))
        for i, s in enumerate(seats):
            s.reset_episode(i, state.goals[i], game.ngoals)
        seqs = [[], []]
        while not state.done:
            i = state.turn
            obs = game.observe(state, i)
            a = seats[i].act(obs, state, rng)
            seqs[i].append((obs, a))
            game.step(state, i, a)
        for i in (0, 1):
            if seqs[i]:
                data.append((state.goals[i], state.goals[1 - i], seqs[i]))
    return data


def fit_imitation(net, game: Game, episodes: int, rng: np.random.Generator, lr: float = 1e-3,
                  epochs: int = 1, batch: int = 32) -> list[float]:
    """Supervised fit of a two-slot net to the game's goal-greedy script.

    Inputs per step are (state from the acting seat, own goal, partner
    goal); the target is the scripted action. Sequences are processed
    ``batch`` at a time, one per column. Returns per-epoch mean
    cross-entropy per step.
    """
    data = scripted_sequences(game, episodes, rng)
    eye = np.eye(game.ngoals)
    adam = AdamState()
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(order), batch):
            chunk = sorted((data[int(k)] for k in order[start:start + batch]),
                           key=lambda d: -len(d[2]))
            tokens = sum(len(d[2]) for d in chunk)
            own = eye[[d[0] for d in chunk]].T
            other = eye[[d[1] for d in chunk]].T
            rec = RecurrentState.zeros(net.hidden, len(chunk))
            terms = []
            for t in range(len(chunk[0][2])):
                k = sum(1 for d in chunk if len(d[2]) > t)
                if k < rec.h.shape[1]:
                    cut = (slice(None), slice(0, k))
                    rec = RecurrentState(ad.take(rec.h, cut), ad.take(rec.c, cut))
                obs = np.stack([d[2][t][0] for d in chunk[:k]], axis=1)
                acts = [d[2][t][1] for d in chunk[:k]]
                logits, rec = net.forward_columns(obs, [own[:, :k], other[:, :k]], rec)
                terms.append(ad.mul(ad.softmax_cross_entropy(logits, acts), k / tokens))
            loss = ad.stack_sum(terms)
            grads = net.params.grad_of(ad.backward(loss))
            adam_step(net.params, grads, adam, lr)
            total += loss.item() * tokens
            count += tokens
        history.append(total / max(count, 1))
    return history


def inference_harness(game: Game, net, episodes: int, seed: int, n_steps: int,
                      inference_lr: float = 0.1, temperature: float = 1.0) -> list[dict]:
    """SOM (using ``net``) plays with a goal-greedy scripted partner and
    infers its goal; returns metrics records for the SOM seat only."""
    from .agents import ScriptedAgent
    config = TrainConfig(n_inference_steps=n_steps, inference_lr=inference_lr,
                         temperature=temperature)
    som = SomAgent(net, InferenceConfig(n_steps, inference_lr, temperature))
    rng = ad.make_rng(seed)
    records = []
    for ep in range(episodes):
        ep_rng = ad.split_rng(rng, 1)[0]
        seats = [som, ScriptedAgent(game)] if ep % 2 == 0 else [ScriptedAgent(game), som]
        result = run_episode(game, seats, config, ep_rng)
        k = seats.index(som)
        rec = episode_record(ep, 0, ["som", "scripted"], [s.variant for s in seats], result, n_steps)
        rec["som_seat"] = k
        records.append(rec)
    return records
