"""Reverse-mode automatic differentiation over small dense numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a
vector-Jacobian product closure. Nodes whose parents are all constants are
folded into constants, so a graph only contains the paths that actually lead
back to something trainable.

    >>> x = Tensor(np.array(3.0), requires_grad=True)
    >>> y = Tensor(np.array(4.0), requires_grad=True)
    >>> grads = backward(x * y)
    >>> float(grads[x])
    4.0
"""

from __future__ import annotations

import heapq
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-20

# creation order doubles as a topological order: inputs always exist first
_clock = itertools.count()


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; interior nodes come out of the op functions
    below. ``data`` is always a float64 ndarray.
    """

    __slots__ = ("data", "requires_grad", "parents", "vjp", "name", "seq", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 vjp: Callable | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.seq = next(_clock)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.vjp is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _raw(data: np.ndarray, requires_grad: bool, parents: tuple, vjp) -> Tensor:
    # skips the asarray conversion in __init__; ``data`` is already float64
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = requires_grad
    t.parents = parents
    t.vjp = vjp
    t.name = None
    t.seq = next(_clock)
    return t


def _node(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    for p in parents:
        if p.requires_grad:
            return _raw(data, True, parents, vjp)
    return _raw(data, False, (), None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a, floor: float = 0.0) -> Tensor:
    """Natural log; with ``floor > 0`` inputs below the floor are clamped and
    receive zero gradient."""
    a = as_tensor(a)
    ad = a.data
    if floor > 0.0:
        clamped = np.maximum(ad, floor)
        live = ad >= floor
        return _node(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),))
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def elu(a) -> Tensor:
    """ELU with unit scale. The derivative at exactly 0 is taken as 1."""
    a = as_tensor(a)
    ad = a.data
    neg_part = np.expm1(np.minimum(ad, 0.0))
    out = np.where(ad > 0.0, ad, neg_part)
    # neg_part is 0 at x == 0, so deriv = neg_part + 1 gives 1 there too
    deriv = neg_part + 1.0
    return _node(out, (a,), lambda g: (g * deriv,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------- reductions

def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _node(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


def stack_sum(items: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors as a single node."""
    items = [as_tensor(t) for t in items]
    out = items[0].data.copy()
    for t in items[1:]:
        out = out + t.data
    return _node(out, tuple(items), lambda g: tuple(g for _ in items))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 1:
            return (np.outer(g, bd) if a.requires_grad else None,
                    ad.T @ g if b.requires_grad else None)
        if ad.ndim == 1 and bd.ndim == 2:
            return (bd @ g if a.requires_grad else None,
                    np.outer(ad, g) if b.requires_grad else None)
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _node(ad @ bd, (a, b), vjp)


def linear(w, x, b) -> Tensor:
    """``w @ x + b`` for a matrix ``w`` and a vector ``x``, or a matrix ``x``
    holding one input per column (``b`` is then added to every column)."""
    w, x, b = as_tensor(w), as_tensor(x), as_tensor(b)
    wd, xd = w.data, x.data
    if xd.ndim == 1:
        def vjp(g):
            return (np.outer(g, xd) if w.requires_grad else None,
                    wd.T @ g if x.requires_grad else None,
                    g)

        return _node(wd @ xd + b.data, (w, x, b), vjp)

    def vjp_cols(g):
        return (g @ xd.T if w.requires_grad else None,
                wd.T @ g if x.requires_grad else None,
                g.sum(axis=1))

    return _node(wd @ xd + b.data[:, None], (w, x, b), vjp_cols)


# ---------------------------------------------------------------- shape ops

def concat(items: Sequence) -> Tensor:
    items = [as_tensor(t) for t in items]
    bounds = []
    start = 0
    for t in items:
        bounds.append((start, start + t.data.shape[0]))
        start += t.data.shape[0]
    return _node(np.concatenate([t.data for t in items]), tuple(items),
                 lambda g: tuple(g[lo:hi] for lo, hi in bounds))


def take(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _node(np.array(a.data[index]), (a,), vjp)


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------- probability

def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax(v) -> Tensor:
    """Softmax of a 1-D tensor, max-shifted for stability."""
    v = as_tensor(v)
    p = _softmax(v.data)
    return _node(p, (v,), lambda g: (p * (g - g @ p),))


def log_softmax(v) -> Tensor:
    v = as_tensor(v)
    shifted = v.data - v.data.max()
    lse = np.log(np.exp(shifted).sum())
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (v,), lambda g: (g - p * g.sum(),))


def cross_entropy(p, k: int) -> Tensor:
    """``-log p[k]`` for a probability vector ``p``, clamped at ``LOG_FLOOR``."""
    p = as_tensor(p)
    pk = p.data[k]
    n = p.shape[0]
    if pk < LOG_FLOOR:
        return _node(np.asarray(-np.log(LOG_FLOOR)), (p,), lambda g: (np.zeros(n),))

    def vjp(g):
        out = np.zeros(n)
        out[k] = -g / pk
        return (out,)

    return _node(np.asarray(-np.log(pk)), (p,), vjp)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean of ``-log softmax(logits[:, j])[targets[j]]`` over the columns of
    an (A, B) logits matrix; fused so the gradient is (p - onehot) / B."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    shifted = z - z.max(axis=0)
    logp = shifted - np.log(np.exp(shifted).sum(axis=0))
    cols = np.arange(z.shape[1])
    nb = z.shape[1]
    value = -logp[targets, cols].mean()

    def vjp(g):
        d = np.exp(logp)
        d[targets, cols] -= 1.0
        return (d * (g / nb),)

    return _node(np.asarray(value), (logits,), vjp)


def entropy_from_logits(v) -> Tensor:
    """Shannon entropy (nats) of softmax(v)."""
    v = as_tensor(v)
    shifted = v.data - v.data.max()
    logp = shifted - np.log(np.exp(shifted).sum())
    p = np.exp(logp)
    h = -(p @ logp)

    def vjp(g):
        # dH/dv = -p * (logp + H)
        return (-g * p * (logp + h),)

    return _node(np.asarray(h), (v,), vjp)


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log u)``; u of exactly 0 or 1 is redrawn."""
    u = rng.random(shape)
    bad = (u <= 0.0) | (u >= 1.0)
    while bad.any():
        u[bad] = rng.random(int(bad.sum()))
        bad = (u <= 0.0) | (u >= 1.0)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, temperature: float, rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None) -> Tensor:
    """A relaxed one-hot sample ``softmax((logits + g) / temperature)``.

    ``noise`` may be passed explicitly (tests); otherwise it is drawn from
    ``rng``.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    logits = as_tensor(logits)
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax needs an rng or explicit noise")
        noise = gumbel_noise(logits.shape, rng)
    y = _softmax((logits.data + noise) / temperature)
    return _node(y, (logits,), lambda g: (y * (g - g @ y) / temperature,))


# ---------------------------------------------------------------- recurrent cell

def lstm_cell(x, h, c, w_ih, w_hh, b) -> Tensor:
    """One step of a standard LSTM; gate order (input, forget, cell, output).

    Returns a (2, hidden) tensor whose rows are the new hidden and cell
    vectors; index it with ``out[0]`` / ``out[1]``. Column-batched inputs
    (``x`` of shape (in, B), ``h``/``c`` of shape (hidden, B)) give a
    (2, hidden, B) result.
    """
    x, h, c, w_ih, w_hh, b = (as_tensor(t) for t in (x, h, c, w_ih, w_hh, b))
    n = h.shape[0]
    xd, hd, cd = x.data, h.data, c.data
    cols = xd.ndim == 2
    pre = w_ih.data @ xd + w_hh.data @ hd + (b.data[:, None] if cols else b.data)
    act = _sigmoid(pre)
    gg = np.tanh(pre[2 * n:3 * n])
    i, f, o = act[:n], act[n:2 * n], act[3 * n:]
    out = np.empty((2,) + cd.shape)
    c_new = out[1]
    np.multiply(f, cd, out=c_new)
    c_new += i * gg
    tc = np.tanh(c_new)
    np.multiply(o, tc, out=out[0])

    def vjp(g):
        gh, gc = g[0], g[1]
        dc = gc + gh * o * (1.0 - tc * tc)
        dpre = np.empty_like(pre)
        dpre[:n] = dc * gg
        dpre[n:2 * n] = dc * cd
        dpre[2 * n:3 * n] = 0.0
        dpre[3 * n:] = gh * tc
        dpre *= act * (1.0 - act)
        dpre[2 * n:3 * n] = dc * i * (1.0 - gg * gg)
        if cols:
            dw_ih = dpre @ xd.T if w_ih.requires_grad else None
            dw_hh = dpre @ hd.T if w_hh.requires_grad else None
            db = dpre.sum(axis=1)
        else:
            dw_ih = np.outer(dpre, xd) if w_ih.requires_grad else None
            dw_hh = np.outer(dpre, hd) if w_hh.requires_grad else None
            db = dpre
        return (
            w_ih.data.T @ dpre if x.requires_grad else None,
            w_hh.data.T @ dpre if h.requires_grad else None,
            dc * f,
            dw_ih,
            dw_hh,
            db,
        )

    return _node(out, (x, h, c, w_ih, w_hh, b), vjp)


# ---------------------------------------------------------------- backward

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through grad-requiring edges, inputs first.

    This is the graph (tape) a backward pass walks, in reverse.
    """
    seen: dict[int, Tensor] = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t.seq)


class Gradients(dict):
    """Mapping from leaf Tensor to its gradient array (identity-keyed)."""

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        return dict.__getitem__(self, id(leaf))

    def get(self, leaf: Tensor, default=None):
        return dict.get(self, id(leaf), default)

    def __contains__(self, leaf) -> bool:
        return dict.__contains__(self, id(leaf))


def backward(loss: Tensor, params: "ParamSet | None" = None) -> Gradients:
    """Reverse-accumulate d(loss)/d(leaf) for every grad-requiring leaf.

    Nodes are visited newest-first, so every node has received all of its
    upstream gradient before its own vjp runs, and each node runs once. The
    graph is never mutated; repeated calls give identical results. When
    ``params`` is given the gradients are also added into its accumulators.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    result = Gradients()
    if not loss.requires_grad:
        return result
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    heap = [(-loss.seq, loss)]
    while heap:
        node = heapq.heappop(heap)[1]
        g = pending.pop(id(node))
        if node.vjp is None:
            dict.__setitem__(result, id(node), g)
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
                heapq.heappush(heap, (-parent.seq, parent))
    if params is not None:
        params.accumulate(result)
    return result


# ---------------------------------------------------------------- parameters

class ParamSet:
    """Named trainable leaves plus their accumulated gradients."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64, order="C"), requires_grad=True, name=name)
        self._tensors[name] = t
        self.grads[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(np.sum([t.data.size for t in self._tensors.values()]))

    def zero_grad(self) -> None:
        for name, t in self._tensors.items():
            self.grads[name] = np.zeros_like(t.data)

    def accumulate(self, grads: Gradients) -> None:
        for name, t in self._tensors.items():
            g = grads.get(t)
            if g is not None:
                self.grads[name] = self.grads[name] + g

    def grad_of(self, grads: Gradients) -> dict[str, np.ndarray]:
        """Per-name view of a Gradients mapping (zeros where absent)."""
        return {name: (grads.get(t) if t in grads else np.zeros_like(t.data))
                for name, t in self._tensors.items()}

    def frozen(self) -> dict[str, Tensor]:
        """Constant views sharing storage; ops built on them record no graph."""
        return {name: Tensor(t.data, name=name) for name, t in self._tensors.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._tensors.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.data.shape:
                raise ValueError(f"{name}: expected shape {t.data.shape}, got {value.shape}")
            t.data[...] = value


# ---------------------------------------------------------------- checking

def grad_check(f: Callable[[], Tensor], params: ParamSet | Iterable[Tensor],
               eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` must rebuild its graph from the current parameter values on each
    call. Error per coordinate is ``|a - n| / max(1, |a| + |n|)``. With
    ``max_coords`` only a random subset of coordinates per tensor is probed.
    """
    leaves = list(params._tensors.values()) if isinstance(params, ParamSet) else list(params)
    grads = backward(f())
    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf)
        if analytic is None:
            analytic = np.zeros_like(leaf.data)
        data = leaf.data
        coords = np.arange(data.size)
        if max_coords is not None and data.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(data.size, max_coords, replace=False)
        for i in coords:
            # index in place: reshape(-1) would copy a non-contiguous array
            idx = np.unravel_index(int(i), data.shape)
            orig = data[idx]
            data[idx] = orig + eps
            up = f().item()
            data[idx] = orig - eps
            down = f().item()
            data[idx] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[idx]
            err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- randomness

def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams (per agent / per worker)."""
    return rng.spawn(n)
