"""Neuron and request records, scalar and struct-of-arrays forms.

A neuron record carries the full per-neuron state that moves through the
hash table: weights, bias, Adam moments, gradient accumulators, per-input
activation/delta lanes, the dummy flag, and the dummy reservoir's target
bucket.  ``NeuronBlock`` is the vectorized struct-of-arrays form used by
the engine; ``NeuronRecord`` is the scalar form used by the record-level
oblivious copy and by tests.

``RECORD_LAYOUT`` fixes the publicly-known field order that every
record-level oblivious operation walks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# (field name, kind); kind "scalar" takes one conditional-set, "array" one
# block conditional-set over the whole field.
RECORD_LAYOUT: tuple[tuple[str, str], ...] = (
    ("id", "scalar"),
    ("weights", "array"),
    ("bias", "scalar"),
    ("m", "array"),
    ("v", "array"),
    ("m_bias", "scalar"),
    ("v_bias", "scalar"),
    ("grad", "array"),
    ("grad_bias", "scalar"),
    ("last_act", "array"),
    ("delta", "array"),
    ("target", "scalar"),
    ("is_dummy", "scalar"),
)


@dataclass
class NeuronRecord:
    """Scalar neuron record; array fields are 1-D numpy arrays."""

    id: int
    weights: np.ndarray
    bias: float
    m: np.ndarray
    v: np.ndarray
    m_bias: float
    v_bias: float
    grad: np.ndarray
    grad_bias: float
    last_act: np.ndarray
    delta: np.ndarray
    target: int = 0
    is_dummy: int = 0

    @classmethod
    def dummy(cls, dim: int, lanes: int, sentinel_id: int, target: int = 0) -> "NeuronRecord":
        z = lambda k: np.zeros(k, dtype=np.float32)
        return cls(
            id=sentinel_id, weights=z(dim), bias=0.0, m=z(dim), v=z(dim),
            m_bias=0.0, v_bias=0.0, grad=z(dim), grad_bias=0.0,
            last_act=z(lanes), delta=z(lanes), target=target, is_dummy=1,
        )


# Array fields of a NeuronBlock that are 2-D (rows x dim or rows x lanes).
_BLOCK_2D = ("weights", "m", "v", "grad", "last_act", "delta")
_BLOCK_1D_F = ("bias", "m_bias", "v_bias", "grad_bias")
_BLOCK_1D_I = ("ids", "target")


class NeuronBlock:
    """Struct-of-arrays over ``n`` neuron records.

    ``dim`` is the weight dimension of the layer the neurons belong to and
    ``lanes`` the batch size (one activation/delta lane per batch input).
    """

    def __init__(self, n: int, dim: int, lanes: int) -> None:
        self.n = n
        self.dim = dim
        self.lanes = lanes
        self.ids = np.zeros(n, dtype=np.int64)
        self.target = np.zeros(n, dtype=np.int64)
        self.is_dummy = np.ones(n, dtype=np.uint8)
        self.weights = np.zeros((n, dim), dtype=np.float32)
        self.bias = np.zeros(n, dtype=np.float32)
        self.m = np.zeros((n, dim), dtype=np.float32)
        self.v = np.zeros((n, dim), dtype=np.float32)
        self.m_bias = np.zeros(n, dtype=np.float32)
        self.v_bias = np.zeros(n, dtype=np.float32)
        self.grad = np.zeros((n, dim), dtype=np.float32)
        self.grad_bias = np.zeros(n, dtype=np.float32)
        self.last_act = np.zeros((n, lanes), dtype=np.float32)
        self.delta = np.zeros((n, lanes), dtype=np.float32)

    def _arrays(self):
        for name in _BLOCK_1D_I + ("is_dummy",) + _BLOCK_1D_F + _BLOCK_2D:
            yield name, getattr(self, name)

    def copy(self) -> "NeuronBlock":
        out = NeuronBlock(self.n, self.dim, self.lanes)
        for name, arr in self._arrays():
            getattr(out, name)[...] = arr
        return out

    def gather(self, rows: np.ndarray) -> "NeuronBlock":
        out = NeuronBlock(len(rows), self.dim, self.lanes)
        for name, arr in self._arrays():
            getattr(out, name)[...] = arr[rows]
        return out

    def set_rows(self, dst_rows: np.ndarray, src: "NeuronBlock", src_rows: np.ndarray) -> None:
        for name, arr in self._arrays():
            arr[dst_rows] = getattr(src, name)[src_rows]

    def permute_entries(self, perm: np.ndarray, rows_per_entry: int) -> None:
        """Reorder groups of ``rows_per_entry`` consecutive rows by ``perm``."""
        if rows_per_entry == 1:
            row_perm = perm
        else:
            row_perm = (
                perm[:, None] * rows_per_entry + np.arange(rows_per_entry)
            ).ravel()
        for name, arr in self._arrays():
            arr[...] = arr[row_perm]

    @classmethod
    def concat(cls, blocks: list["NeuronBlock"]) -> "NeuronBlock":
        dim, lanes = blocks[0].dim, blocks[0].lanes
        out = cls(sum(b.n for b in blocks), dim, lanes)
        at = 0
        for b in blocks:
            rows = np.arange(at, at + b.n)
            out.set_rows(rows, b, np.arange(b.n))
            at += b.n
        return out

    def row(self, i: int) -> NeuronRecord:
        return NeuronRecord(
            id=int(self.ids[i]), weights=self.weights[i].copy(), bias=float(self.bias[i]),
            m=self.m[i].copy(), v=self.v[i].copy(), m_bias=float(self.m_bias[i]),
            v_bias=float(self.v_bias[i]), grad=self.grad[i].copy(),
            grad_bias=float(self.grad_bias[i]), last_act=self.last_act[i].copy(),
            delta=self.delta[i].copy(), target=int(self.target[i]),
            is_dummy=int(self.is_dummy[i]),
        )

    def set_row(self, i: int, rec: NeuronRecord) -> None:
        self.ids[i] = rec.id
        self.target[i] = rec.target
        self.is_dummy[i] = rec.is_dummy
        self.weights[i] = rec.weights
        self.bias[i] = rec.bias
        self.m[i] = rec.m
        self.v[i] = rec.v
        self.m_bias[i] = rec.m_bias
        self.v_bias[i] = rec.v_bias
        self.grad[i] = rec.grad
        self.grad_bias[i] = rec.grad_bias
        self.last_act[i] = rec.last_act
        self.delta[i] = rec.delta


class RequestBlock:
    """Fixed-size array of request entries.

    Entry ``e`` owns buffer rows ``e*pad .. (e+1)*pad-1`` of ``buffers``,
    so probe ``t`` slot ``s`` of an input is row ``((i-1)*len_seq+t)*pad + s``.
    ``slot_tag`` carries the hash-table slot captured during the
    feedforward build so the write-back table can be rebuilt by a single
    oblivious sort.
    """

    def __init__(self, n_entries: int, pad: int, dim: int, lanes: int) -> None:
        self.n = n_entries
        self.pad = pad
        self.bucket = np.zeros(n_entries, dtype=np.int64)
        self.rank = np.zeros(n_entries, dtype=np.int64)
        self.is_dummy = np.zeros(n_entries, dtype=np.uint8)
        self.slot_tag = np.full(n_entries, -1, dtype=np.int64)
        self.buffers = NeuronBlock(n_entries * pad, dim, lanes)

    def entry_rows(self, e: int) -> slice:
        return slice(e * self.pad, (e + 1) * self.pad)

    def fields(self) -> list[np.ndarray]:
        return [self.bucket, self.rank, self.is_dummy, self.slot_tag]
