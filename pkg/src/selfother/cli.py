"""Command-line entry point: train, eval, sweep and replay.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import __version__
from . import autodiff as ad
from .agents import VARIANTS, InferenceConfig, ScriptedAgent, SomAgent, init_from_nom
from .envs import GAMES, EpisodeReplay, ReplayParseError, make_game
from .envs.coin import CoinGame
from .metrics import group_by_steps, ninf_sweep, write_csv, write_sweep, write_tables
from .training import (MetricsStream, TrainConfig, evaluate, load_agent, pretrain_recipe,
                       save_agent, train)

log = logging.getLogger("selfother")

OUT_ENV = "SELFOTHER_OUT"
DEFAULT_OUT_ROOT = "runs"

EPISODE_COLUMNS = ("episode", "seed", "variant_0", "variant_1", "reward_0", "reward_1",
                   "win_0", "win_1", "goal_0", "goal_1", "inferred_0", "inferred_1")


class ConfigError(Exception):
    """Invalid or incomplete run configuration (exit code 2)."""


@dataclass
class RunConfig:
    game: str
    agents: list[str]
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None
    game_config: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: bool = False
    pretrain_episodes: int = 2000
    pretrain_target: float = 0.9
    replay_every: int = 0

    def echo(self) -> dict:
        d = asdict(self)
        d["train"] = asdict(self.train)
        return d


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_RUN_FIELDS = {f.name for f in fields(RunConfig)} - {"train"}


def _parse_agents(value) -> list[str]:
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    agents = [str(v) for v in value]
    for a in agents:
        if a not in VARIANTS:
            raise ConfigError(f"agents: unknown variant {a!r}; choose from {', '.join(VARIANTS)}")
    return agents


def build_run_config(args: argparse.Namespace, need_agents: bool = True) -> RunConfig:
    """Merge defaults, command-line flags and the config file (which wins)."""
    values: dict = {}
    train_values: dict = {}
    for name in ("game", "agents", "out", "pretrain", "episodes", "workers", "n_inference_steps"):
        v = getattr(args, name, None)
        if v is None or v is False:
            continue
        (train_values if name in _TRAIN_FIELDS else values)[name] = v
    if getattr(args, "seed", None) is not None:
        values["seeds"] = [args.seed]
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: {path} is not valid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config: {path} must hold a key-value mapping")
        for key, v in loaded.items():
            if key in _TRAIN_FIELDS:
                train_values[key] = v
            elif key == "seed":
                values["seeds"] = [v]
            elif key in _RUN_FIELDS:
                values[key] = v
            else:
                raise ConfigError(f"{key}: unknown config field")
    if "game" not in values or values["game"] in (None, ""):
        raise ConfigError("game: missing required field `game` (use --game or a config file)")
    if values["game"] not in GAMES:
        raise ConfigError(f"game: unknown game {values['game']!r}; choose from {', '.join(sorted(GAMES))}")
    if need_agents:
        if "agents" not in values:
            raise ConfigError("agents: missing required field `agents` (e.g. --agents som,som)")
        values["agents"] = _parse_agents(values["agents"])
        n = len(values["agents"])
        if values["game"] == "door":
            if n not in (1, 2) or len(set(values["agents"])) != 1:
                raise ConfigError("agents: the door game trains one pool of a single variant")
        elif n != 2:
            raise ConfigError(f"agents: expected two variants (one per player), got {n}")
        if all(a in ("scripted", "random") for a in values["agents"]):
            raise ConfigError("agents: at least one player must be a learning agent")
    else:
        values.setdefault("agents", [])
    seeds = values.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds: must be a nonempty list of integers")
    try:
        values["seeds"] = [int(s) for s in seeds]
    except (TypeError, ValueError):
        raise ConfigError("seeds: must be a nonempty list of integers") from None
    if not isinstance(values.get("game_config", {}), dict):
        raise ConfigError("game_config: must be a key-value mapping")
    defaults = TrainConfig()
    for key, v in list(train_values.items()):
        expected = type(getattr(defaults, key))
        try:
            train_values[key] = None if v is None else (float(v) if expected is float else int(v))
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {v!r}") from None
    tc = TrainConfig(**train_values)
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc).replace(" must", ": must", 1)) from None
    rc = RunConfig(train=tc, **values)
    if rc.pretrain and rc.game != "recipe":
        raise ConfigError("pretrain: pretraining is defined for the recipe game only")
    try:
        make_game(rc.game, **rc.game_config)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"game_config: {exc}") from None
    return rc


def out_root(args_out: str | None, default_name: str) -> Path:
    if args_out:
        return Path(args_out)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT_ROOT)) / default_name


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run_dir: Path, payload: dict) -> Path:
    artifacts = {str(p.relative_to(run_dir)): sha256(p)
                 for p in sorted(run_dir.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    payload = dict(payload, version=__version__, artifacts=artifacts)
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def episode_rows(records):
    for r in records:
        inferred = [None if t is None else (t[-1] if t else None) for t in r["traces"]]
        yield (r["episode"], r["seed"], *r["variants"], *r["rewards"], int(r["wins"][0]),
               int(r["wins"][1]), *r["goals"], *("" if v is None else v for v in inferred))


# ---------------------------------------------------------------- train

def _train_one(rc: RunConfig, seed: int, run_dir: Path, n_steps: int | None = None):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    (run_dir / "replays").mkdir(exist_ok=True)
    tc = TrainConfig(**{**asdict(rc.train), "seed": seed})
    if n_steps is not None:
        tc.n_inference_steps = n_steps
    game = make_game(rc.game, **rc.game_config)
    pool = rc.game == "door"
    variants = rc.agents[:1] if pool else rc.agents
    learners = None
    if rc.pretrain:
        pre_cfg = TrainConfig(**{**asdict(tc), "episodes": rc.pretrain_episodes})
        pre_game = make_game("recipe", **{**rc.game_config, "overlap": False})
        result = pretrain_recipe(pre_cfg, rc.pretrain_target, game=pre_game,
                                 checkpoint=run_dir / "checkpoints" / "pretrain_nom.ckpt")
        if not result.reached_target:
            log.warning("pretraining stopped at %.3f craft success after %d episodes (target %.2f)",
                        result.success_rate, result.episodes, rc.pretrain_target)
        from .training import make_learners
        learners = make_learners(game, variants, tc, ad.split_rng(ad.make_rng(seed), 2)[0])
        nom_state = result.agent.net.params.state_dict()
        for agent in learners.values():
            if agent.learns:
                init_from_nom(agent, nom_state, game.nfeatures, game.ngoals)
    metrics = MetricsStream(run_dir / "metrics.jsonl")
    replay_dir = run_dir / "replays"
    last = {}

    def on_episode(record, result):
        ep = record["episode"]
        last["replay"] = (ep, result.replay)
        if rc.replay_every and ep % rc.replay_every == 0:
            result.replay.save(replay_dir / f"episode_{ep:07d}.jsonl")

    try:
        res = train(game, variants, tc, learners=learners, pool=pool, metrics=metrics,
                    on_episode=on_episode)
    finally:
        metrics.close()
    if "replay" in last:
        ep, replay = last["replay"]
        replay.save(replay_dir / f"episode_{ep:07d}.jsonl")
    meta = {"game": rc.game, "game_config": game.config(), "seed": seed}
    for key, agent in res.store.masters.items():
        if agent.learns:
            save_agent(agent, run_dir / "checkpoints" / f"{key}.ckpt", tc, meta)
    write_csv(run_dir / "episodes.csv", EPISODE_COLUMNS, episode_rows(res.records))
    write_tables(run_dir, res.records, coin=isinstance(game, CoinGame))
    write_manifest(run_dir, {"command": "train", "run_config": rc.echo(), "seed": seed,
                             "train_config": asdict(tc)})
    return res


def cmd_train(args) -> int:
    rc = build_run_config(args)
    root = out_root(rc.out, f"{rc.game}_{'_'.join(rc.agents)}")
    for seed in rc.seeds:
        run_dir = root / f"seed_{seed}"
        res = _train_one(rc, seed, run_dir)
        rewards = [r["rewards"] for r in res.records]
        tail = rewards[-min(100, len(rewards)):]
        mean = [sum(r[k] for r in tail) / max(len(tail), 1) for k in (0, 1)]
        print(f"seed {seed}: {len(rewards)} episodes, last-{len(tail)} mean reward "
              f"{mean[0]:.3f} / {mean[1]:.3f} -> {run_dir}")
    return 0


# ---------------------------------------------------------------- eval

def _load_for_eval(path: str, game, n_steps: int | None):
    inference = None
    if n_steps is not None:
        inference = InferenceConfig(n_steps=n_steps)
    try:
        return load_agent(path, game, inference)
    except FileNotFoundError:
        raise ConfigError(f"checkpoints: no such file {path}") from None
    except ValueError as exc:
        raise ConfigError(f"checkpoints: {exc}") from None


def _checkpoint_game(path: str) -> tuple[str | None, dict]:
    from .neural import load_checkpoint
    try:
        _, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoints: no such file {path}") from None
    except ValueError as exc:
        raise ConfigError(f"checkpoints: {exc}") from None
    return meta.get("game"), meta.get("game_config", {})


def cmd_eval(args) -> int:
    if args.episodes < 0:
        raise ConfigError("episodes: must be >= 0")
    if not 1 <= len(args.checkpoints) <= 2:
        raise ConfigError("checkpoints: pass one or two checkpoint files")
    saved_game, saved_config = _checkpoint_game(args.checkpoints[0])
    game_name = args.game or saved_game
    if game_name is None:
        raise ConfigError("game: missing required field `game` (checkpoint does not record it)")
    if game_name not in GAMES:
        raise ConfigError(f"game: unknown game {game_name!r}")
    game_config = saved_config if game_name == saved_game else {}
    if args.config:
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        game_config = loaded.get("game_config", game_config)
    game = make_game(game_name, **game_config)
    agents = [_load_for_eval(p, game, args.n_inference_steps) for p in args.checkpoints]
    if args.partner:
        if len(agents) == 2:
            raise ConfigError("partner: use either two checkpoints or --partner")
        agents.append(ScriptedAgent(game, "greedy" if args.partner == "scripted" else "random"))
    elif len(agents) == 1:
        agents.append(_load_for_eval(args.checkpoints[0], game, args.n_inference_steps))
    n_steps = args.n_inference_steps
    if n_steps is None:
        n_steps = next((a.inference.n_steps for a in agents if isinstance(a, SomAgent)), 0)
    config = TrainConfig(n_inference_steps=max(n_steps, 0))
    records = evaluate(game, agents, config, args.episodes, args.seed, greedy=args.greedy)
    run_dir = out_root(args.out, f"eval_{game_name}_seed{args.seed}")
    run_dir.mkdir(parents=True, exist_ok=True)
    write_csv(run_dir / "episodes.csv", EPISODE_COLUMNS, episode_rows(records))
    paths = write_tables(run_dir, records, coin=isinstance(game, CoinGame))
    write_manifest(run_dir, {"command": "eval", "checkpoints": list(args.checkpoints),
                             "game": game_name, "game_config": game.config(),
                             "episodes": args.episodes, "seed": args.seed, "greedy": args.greedy})
    summary = json.loads(paths["summary"].read_text())
    print(f"{args.episodes} episodes: mean reward {summary['mean_reward']}, "
          f"inference accuracy {summary['inference_accuracy']:.3f} -> {run_dir}")
    return 0


# ---------------------------------------------------------------- sweep

def parse_steps(values: list[str]) -> list[int]:
    out = []
    for v in values:
        for part in str(v).split(","):
            part = part.strip()
            if not part:
                continue
            try:
                n = int(part)
            except ValueError:
                raise ConfigError(f"steps: {part!r} is not an integer") from None
            if n < 0:
                raise ConfigError(f"steps: inference step counts must be >= 0, got {n}")
            out.append(n)
    if not out:
        raise ConfigError("steps: give at least one inference step count")
    unique = sorted(set(out))
    if len(unique) != len(out):
        log.warning("steps: duplicate values removed, sweeping %s", unique)
    return unique


def cmd_sweep(args) -> int:
    steps = parse_steps(args.steps)
    rc = build_run_config(args)
    if "som" not in rc.agents:
        log.warning("agents: no SOM player, the inference step count has no effect")
    root = out_root(rc.out, f"sweep_{rc.game}")
    all_records = []
    for n in steps:
        for seed in rc.seeds:
            run_dir = root / f"steps_{n}" / f"seed_{seed}"
            res = _train_one(rc, seed, run_dir, n_steps=n)
            keys = list(res.store.masters)[:2]
            agents = [res.store.masters[k] for k in keys]
            tc = TrainConfig(**{**asdict(rc.train), "seed": seed, "n_inference_steps": n})
            for a in agents:
                if isinstance(a, SomAgent):
                    a.inference = InferenceConfig(n, tc.inference_lr, tc.temperature)
            records = evaluate(res.game, agents, tc, args.eval_episodes, seed + 1_000_003)
            all_records.extend(records)
    rows = ninf_sweep(group_by_steps(all_records))
    root.mkdir(parents=True, exist_ok=True)
    write_sweep(root / "ninf.csv", rows)
    write_manifest(root, {"command": "sweep", "steps": steps, "run_config": rc.echo(),
                          "eval_episodes": args.eval_episodes})
    for r in rows:
        print(f"n_steps={r.n_steps}: reward {r.mean_reward:.3f} ± {r.std_reward:.3f}, "
              f"accuracy {r.mean_accuracy:.3f} ± {r.std_accuracy:.3f}")
    return 0


# ---------------------------------------------------------------- replay

class ReplayMismatch(Exception):
    pass


def verify_replay(replay: EpisodeReplay, out=None) -> list[float]:
    """Re-simulate a replay, optionally printing a transcript; returns the
    recomputed rewards or raises ReplayMismatch."""
    try:
        game = make_game(replay.game, **replay.config)
    except (TypeError, ValueError) as exc:
        raise ReplayMismatch(f"cannot rebuild game: {exc}") from None
    state = game.reset(replay.seed, replay.goals)
    emit = out.write if out else (lambda s: None)
    emit(f"game {replay.game} seed {replay.seed} goals {replay.goals} first actor {replay.first_actor}\n")
    if state.first_actor != replay.first_actor:
        raise ReplayMismatch(f"first actor {state.first_actor} != stored {replay.first_actor}")
    from .envs import ACTION_NAMES
    for t, (actor, action, events) in enumerate(replay.records):
        if state.done:
            raise ReplayMismatch(f"step {t}: episode already over")
        try:
            result = game.step(state, actor, action)
        except (ValueError, RuntimeError) as exc:
            raise ReplayMismatch(f"step {t}: {exc}") from None
        if result.events != events:
            raise ReplayMismatch(f"step {t}: events {result.events} != stored {events}")
        emit(f"\nstep {t}: agent {actor} {ACTION_NAMES[action]}"
             + (f" {events}" if events else "") + "\n")
        emit(game.render(state) + "\n")
    if not state.done:
        raise ReplayMismatch(f"episode not finished after {len(replay.records)} steps")
    rewards = game.returns(state)
    if list(rewards) != list(replay.rewards):
        raise ReplayMismatch(f"recomputed rewards {rewards} != stored {replay.rewards}")
    if replay.records:
        emit(f"\nrewards {rewards}\n")
    return rewards


def cmd_replay(args) -> int:
    try:
        replay = EpisodeReplay.load(args.file)
    except FileNotFoundError:
        raise ConfigError(f"file: no such replay {args.file}") from None
    except ReplayParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        verify_replay(replay, None if args.quiet else sys.stdout)
    except ReplayMismatch as exc:
        print(f"error: {args.file}: {exc}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file; its values override the flags below")
    p.add_argument("--game", choices=sorted(GAMES))
    p.add_argument("--agents", help="comma-separated variants, one per player "
                                    f"({', '.join(VARIANTS)}); the door game takes one variant")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--n-inference-steps", dest="n_inference_steps", type=int)
    p.add_argument("--pretrain", action="store_true",
                   help="recipe only: pretrain a NOM net on non-overlapping recipes first")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT_ROOT})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfother",
        description="Goal inference through one's own policy: training and analysis.",
        epilog=f"Config files are YAML mappings. Keys: game, agents, seeds, out, game_config, "
               f"pretrain, pretrain_episodes, pretrain_target, replay_every and every training "
               f"hyperparameter ({', '.join(sorted(_TRAIN_FIELDS))}). Values in the config file "
               f"override command-line flags. ${OUT_ENV} sets the default output root.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train agents and write checkpoints, metrics and replays")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="frozen-parameter rollouts of trained checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--game", help="defaults to the game recorded in the checkpoint")
    p.add_argument("--config", help="YAML file whose game_config is used")
    p.add_argument("--partner", choices=("scripted", "random"),
                   help="second player for a single checkpoint (default: a copy of it)")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-inference-steps", dest="n_inference_steps", type=int)
    p.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate once per inference step count")
    _add_run_flags(p)
    p.add_argument("--steps", nargs="+", required=True, help="e.g. 1 5 10 20 or 1,5,10,20")
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int, default=100)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="print and verify a recorded episode")
    p.add_argument("file")
    p.add_argument("-q", "--quiet", action="store_true", help="verify only")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
