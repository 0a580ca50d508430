"""Recurrent policy-value network shared by every agent variant.

Layout: ``[state, goal slot A, goal slot B, extra] -> linear+ELU -> linear+ELU
-> LSTM -> (softmax policy, linear value[, auxiliary action head])``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

CHECKPOINT_MAGIC = b"SOMCKPT\x00"
CHECKPOINT_VERSION = 1


def orthogonal_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Semi-orthogonal matrix from the QR factorisation of a Gaussian draw.

    Rows are orthonormal when ``rows <= cols``, columns otherwise.
    """
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init needs positive dimensions")
    tall = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal(tall))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    q = q * d
    return q if rows >= cols else q.T


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None) -> "RecurrentState":
        shape = hidden if batch is None else (hidden, batch)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.h.data.copy(), self.c.data.copy()

    @classmethod
    def restore(cls, saved: tuple[np.ndarray, np.ndarray]) -> "RecurrentState":
        return cls(Tensor(saved[0].copy()), Tensor(saved[1].copy()))

    def detached(self) -> "RecurrentState":
        return RecurrentState(Tensor(self.h.data), Tensor(self.c.data))


@dataclass
class NetOutput:
    logits: Tensor
    probs: Tensor
    value: Tensor | None
    rec: RecurrentState
    aux_logits: Tensor | None = None


class PolicyValueNet:
    """Two ELU layers, one LSTM cell, a policy head and a value head.

    ``goal_slots`` goal vectors of length ``ngoals`` are appended to the state
    features (2 for SOM/TOG, 1 for NOM-style nets). ``extra_inputs`` widens
    the input for the SPP policy net, ``aux_actions`` adds the IPP head.
    """

    def __init__(self, nfeatures: int, ngoals: int, hidden: int, nactions: int,
                 goal_slots: int = 2, extra_inputs: int = 0, aux_actions: int = 0,
                 rng: np.random.Generator | None = None):
        self.nfeatures = nfeatures
        self.ngoals = ngoals
        self.hidden = hidden
        self.nactions = nactions
        self.goal_slots = goal_slots
        self.extra_inputs = extra_inputs
        self.aux_actions = aux_actions
        rng = rng if rng is not None else ad.make_rng(0)

        h = hidden
        self.params = ParamSet()
        p = self.params
        p.add("fc1.w", orthogonal_init(h, self.input_dim, rng))
        p.add("fc1.b", np.zeros(h))
        p.add("fc2.w", orthogonal_init(h, h, rng))
        p.add("fc2.b", np.zeros(h))
        p.add("lstm.w_ih", orthogonal_init(4 * h, h, rng))
        p.add("lstm.w_hh", orthogonal_init(4 * h, h, rng))
        p.add("lstm.b", np.zeros(4 * h))
        p.add("pi.w", orthogonal_init(nactions, h, rng))
        p.add("pi.b", np.zeros(nactions))
        p.add("v.w", orthogonal_init(1, h, rng))
        p.add("v.b", np.zeros(1))
        if aux_actions:
            p.add("aux.w", orthogonal_init(aux_actions, h, rng))
            p.add("aux.b", np.zeros(aux_actions))
        self._frozen = p.frozen()

    @property
    def input_dim(self) -> int:
        return self.nfeatures + self.goal_slots * self.ngoals + self.extra_inputs

    @staticmethod
    def expected_param_count(nfeatures: int, ngoals: int, hidden: int, nactions: int,
                             goal_slots: int = 2, extra_inputs: int = 0,
                             aux_actions: int = 0) -> int:
        d = nfeatures + goal_slots * ngoals + extra_inputs
        h = hidden
        n = (h * d + h) + (h * h + h) + (8 * h * h + 4 * h) + (nactions * h + nactions) + (h + 1)
        if aux_actions:
            n += aux_actions * h + aux_actions
        return n

    def config(self) -> dict:
        return dict(nfeatures=self.nfeatures, ngoals=self.ngoals, hidden=self.hidden,
                    nactions=self.nactions, goal_slots=self.goal_slots,
                    extra_inputs=self.extra_inputs, aux_actions=self.aux_actions)

    def initial_state(self) -> RecurrentState:
        return RecurrentState.zeros(self.hidden)

    def forward(self, s, goals, rec: RecurrentState, extra=None, *, frozen: bool = False,
                need_value: bool = True) -> NetOutput:
        """One recurrent step.

        ``goals`` is a sequence of ``goal_slots`` vectors in slot order, i.e.
        (own-goal slot, other-goal slot) for a two-slot net. With
        ``frozen=True`` the parameters enter as constants so no parameter
        gradients are recorded (used by goal inference).
        """
        if len(goals) != self.goal_slots:
            raise ValueError(f"expected {self.goal_slots} goal vectors, got {len(goals)}")
        parts = [ad.as_tensor(s)]
        if parts[0].shape != (self.nfeatures,):
            raise ValueError(f"state has shape {parts[0].shape}, net expects ({self.nfeatures},)")
        for z in goals:
            z = ad.as_tensor(z)
            if z.shape != (self.ngoals,):
                raise ValueError(f"goal vector has shape {z.shape}, net expects ({self.ngoals},)")
            parts.append(z)
        if self.extra_inputs:
            if extra is None:
                raise ValueError("this net needs an extra input vector")
            extra = ad.as_tensor(extra)
            if extra.shape != (self.extra_inputs,):
                raise ValueError(f"extra input has shape {extra.shape}, expected ({self.extra_inputs},)")
            parts.append(extra)
        p = self._frozen if frozen else self.params
        x = ad.concat(parts)
        x = ad.elu(ad.linear(p["fc1.w"], x, p["fc1.b"]))
        x = ad.elu(ad.linear(p["fc2.w"], x, p["fc2.b"]))
        hc = ad.lstm_cell(x, rec.h, rec.c, p["lstm.w_ih"], p["lstm.w_hh"], p["lstm.b"])
        h, c = hc[0], hc[1]
        logits = ad.linear(p["pi.w"], h, p["pi.b"])
        probs = ad.softmax(logits)
        value = ad.linear(p["v.w"], h, p["v.b"])[0] if need_value else None
        aux = ad.linear(p["aux.w"], h, p["aux.b"]) if self.aux_actions else None
        return NetOutput(logits, probs, value, RecurrentState(h, c), aux)

    def forward_columns(self, s, goals, rec: RecurrentState) -> tuple[Tensor, RecurrentState]:
        """Policy logits for B inputs at once, one per column: ``s`` is
        (nfeatures, B), each goal (ngoals, B), ``rec`` holds (hidden, B)
        arrays. Used for supervised fitting; extra inputs are not supported."""
        if self.extra_inputs:
            raise ValueError("column-batched forward does not support extra inputs")
        x = ad.concat([ad.as_tensor(s)] + [ad.as_tensor(z) for z in goals])
        if x.shape[0] != self.input_dim:
            raise ValueError(f"stacked input has {x.shape[0]} rows, net expects {self.input_dim}")
        p = self.params
        x = ad.elu(ad.linear(p["fc1.w"], x, p["fc1.b"]))
        x = ad.elu(ad.linear(p["fc2.w"], x, p["fc2.b"]))
        hc = ad.lstm_cell(x, rec.h, rec.c, p["lstm.w_ih"], p["lstm.w_hh"], p["lstm.b"])
        h, c = hc[0], hc[1]
        return ad.linear(p["pi.w"], h, p["pi.b"]), RecurrentState(h, c)

    # -- persistence --------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        info = {"net": self.config()}
        if meta:
            info.update(meta)
        save_checkpoint(path, self.params.state_dict(), info)

    @classmethod
    def load(cls, path) -> tuple["PolicyValueNet", dict]:
        tensors, meta = load_checkpoint(path)
        net = cls(**meta["net"])
        net.params.load_state_dict(tensors)
        return net, meta


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Binary container: magic, version, JSON header, raw little-endian doubles."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = data.reshape(shape).astype(np.float64)
    return tensors, header["meta"]
