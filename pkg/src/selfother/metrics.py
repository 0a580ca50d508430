"""Analysis quantities computed from per-episode records, and their tables.

Every function here is a pure function of the record set. Records are
:class:`EpisodeRecord` instances or the plain dicts emitted by the
training metrics stream (see :func:`as_record`).
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_WINDOW = 100

# fixed column names of the emitted tables
COIN_STRATEGY_COLUMNS = ("agents", "episodes", "self", "other", "neither")
CDF_COLUMNS = ("step", "cumulative_fraction")
WIN_COLUMNS = ("matchup", "episode", "win_fraction")
NINF_COLUMNS = ("n_steps", "episodes", "mean_reward", "std_reward", "mean_accuracy", "std_accuracy")


@dataclass
class EpisodeRecord:
    episode: int
    seed: int
    rewards: list
    wins: list
    goals: list
    tallies: list | None = None     # per agent: 6 coin category tallies
    traces: list | None = None      # per agent: argmax goal after each observation, or None
    variants: list = field(default_factory=list)
    n_inference_steps: int | None = None

    def trace_pairs(self):
        """(trace, true goal of the other player) for every agent that infers."""
        for k, trace in enumerate(self.traces or ()):
            if trace is not None:
                yield trace, self.goals[1 - k]


_FIELDS = {f.name for f in fields(EpisodeRecord)}


def as_record(r) -> EpisodeRecord:
    if isinstance(r, EpisodeRecord):
        return r
    return EpisodeRecord(**{k: v for k, v in r.items() if k in _FIELDS})


def _records(records) -> list[EpisodeRecord]:
    return [as_record(r) for r in records]


# ---------------------------------------------------------------- coin strategy

@dataclass
class CoinStrategy:
    self: float
    other: float
    neither: float
    count: int


def coin_strategy(records, agents: Sequence[int] = (0, 1)) -> CoinStrategy:
    """Mean coins collected per agent-episode by category, from the
    collector's point of view: own colour, the partner's colour, the third.

    Averages over the listed seats of every episode (both by default).
    """
    rows = []
    for r in _records(records):
        for k in agents:
            t = r.tallies[k]
            rows.append((t[0], t[2], t[4]))
    if not rows:
        return CoinStrategy(0.0, 0.0, 0.0, 0)
    m = np.mean(np.asarray(rows, dtype=float), axis=0)
    return CoinStrategy(float(m[0]), float(m[1]), float(m[2]), len(rows))


# ---------------------------------------------------------------- inference

def t_inf(trace: Sequence[int], truth: int) -> int | None:
    """1-based step at which the estimate first equals ``truth``, provided it
    stays equal for every later step; None otherwise.

    A trace that is right, then wrong, then right again does not count.
    """
    for k, guess in enumerate(trace):
        if guess == truth:
            return k + 1 if all(g == truth for g in trace[k:]) else None
    return None


def inference_accuracy(records) -> float:
    """Fraction of (episode, inferring agent) pairs whose estimate, once
    correct, stays correct until the end of the episode."""
    hits = [t_inf(trace, truth) is not None
            for r in _records(records) for trace, truth in r.trace_pairs()]
    return float(np.mean(hits)) if hits else 0.0


@dataclass
class CdfTable:
    steps: list[int]
    fractions: list[float]
    correct: int
    empty: bool

    def at(self, step: int) -> float:
        """Cumulative fraction at ``step`` (0 before the first step)."""
        value = 0.0
        for s, f in zip(self.steps, self.fractions):
            if s > step:
                break
            value = f
        return value

    def rows(self):
        return list(zip(self.steps, self.fractions))


def inference_step_cdf(records, max_step: int | None = None) -> CdfTable:
    """Distribution of t_inf over the correctly inferred subset."""
    found = [t_inf(trace, truth) for r in _records(records) for trace, truth in r.trace_pairs()]
    found = [t for t in found if t is not None]
    if not found:
        return CdfTable([], [], 0, True)
    top = max(found) if max_step is None else max(max_step, max(found))
    counts = np.bincount(found, minlength=top + 1)[1:]
    cum = np.cumsum(counts) / len(found)
    return CdfTable(list(range(1, top + 1)), [float(v) for v in cum], len(found), False)


# ---------------------------------------------------------------- wins

def win_fraction(flags: Sequence, window: int = DEFAULT_WINDOW) -> list[float]:
    """Rolling mean of win flags over ``window`` episodes, one value per
    complete window; a window longer than the series gives the overall mean."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(flags, dtype=float)
    if len(x) == 0:
        return []
    if window >= len(x):
        return [float(x.mean())]
    c = np.concatenate([[0.0], np.cumsum(x)])
    return [float(v) for v in (c[window:] - c[:-window]) / window]


def win_fraction_by_matchup(records, window: int = DEFAULT_WINDOW, seat: int = 0) -> dict[str, list[float]]:
    """Rolling win fraction of ``seat`` per "variantA-vs-variantB" matchup."""
    groups: dict[str, list] = defaultdict(list)
    for r in _records(records):
        key = "-vs-".join(r.variants) if r.variants else "all"
        groups[key].append(r.wins[seat])
    return {k: win_fraction(v, window) for k, v in groups.items()}


# ---------------------------------------------------------------- inference-step sweep

@dataclass
class SweepRow:
    n_steps: int
    episodes: int
    mean_reward: float
    std_reward: float
    mean_accuracy: float
    std_accuracy: float


def _mean_std(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return 0.0, 0.0
    return float(x.mean()), float(x.std(ddof=1)) if len(x) > 1 else 0.0


def ninf_sweep(groups: dict[int, Iterable]) -> list[SweepRow]:
    """Per inference-step count: mean and 1-sigma (sample standard deviation)
    of the per-episode mean reward and per-episode inference accuracy."""
    rows = []
    for n in sorted(groups):
        recs = _records(groups[n])
        rewards = [float(np.mean(r.rewards)) for r in recs]
        accs = []
        for r in recs:
            pairs = list(r.trace_pairs())
            if pairs:
                accs.append(np.mean([t_inf(t, g) is not None for t, g in pairs]))
        mr, sr = _mean_std(rewards)
        ma, sa = _mean_std(accs)
        rows.append(SweepRow(int(n), len(recs), mr, sr, ma, sa))
    return rows


def group_by_steps(records) -> dict[int, list[EpisodeRecord]]:
    groups: dict[int, list] = defaultdict(list)
    for r in _records(records):
        groups[r.n_inference_steps].append(r)
    return dict(groups)


# ---------------------------------------------------------------- output

def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def summarize(records, window: int = DEFAULT_WINDOW, coin: bool = False) -> dict:
    recs = _records(records)
    cdf = inference_step_cdf(recs)
    out = {
        "episodes": len(recs),
        "mean_reward": [float(np.mean([r.rewards[k] for r in recs])) if recs else 0.0 for k in (0, 1)],
        "win_rate": [float(np.mean([r.wins[k] for r in recs])) if recs else 0.0 for k in (0, 1)],
        "inference_accuracy": inference_accuracy(recs),
        "inference_cdf": {"correct": cdf.correct, "empty": cdf.empty,
                          "at_step_5": cdf.at(5) if not cdf.empty else None},
    }
    if coin:
        out["coin_strategy"] = asdict(coin_strategy(recs))
    return out


def write_tables(out_dir, records, window: int = DEFAULT_WINDOW, coin: bool = False) -> dict[str, Path]:
    """Write every table for one record set plus ``summary.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recs = _records(records)
    paths = {}
    if coin:
        cs = coin_strategy(recs)
        paths["coin_strategy"] = write_csv(out_dir / "coin_strategy.csv", COIN_STRATEGY_COLUMNS,
                                           [("both", cs.count, cs.self, cs.other, cs.neither)])
    paths["inference_cdf"] = write_csv(out_dir / "inference_cdf.csv", CDF_COLUMNS,
                                       inference_step_cdf(recs).rows())
    win_rows = []
    for matchup, values in sorted(win_fraction_by_matchup(recs, window).items()):
        offset = min(window, sum(1 for r in recs if "-vs-".join(r.variants) == matchup) or 1)
        win_rows.extend((matchup, offset - 1 + i, v) for i, v in enumerate(values))
    paths["win_fraction"] = write_csv(out_dir / "win_fraction.csv", WIN_COLUMNS, win_rows)
    summary = summarize(recs, window, coin)
    paths["summary"] = out_dir / "summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths


def write_sweep(path, rows: list[SweepRow]) -> Path:
    return write_csv(path, NINF_COLUMNS,
                     [(r.n_steps, r.episodes, r.mean_reward, r.std_reward, r.mean_accuracy,
                       r.std_accuracy) for r in rows])
