"""Plain non-oblivious trainer used as the engine's correctness oracle.

Shares the engine's initialization, hidden-layer forward, probe
generation, delta/gradient formulas, and Adam arithmetic, but indexes
neurons directly: duplicate bucket copies never exist, gradients
accumulate straight into per-class arrays in ascending-id order, and
only neurons of probed buckets receive optimizer updates.  Floating
summation order differs from the merge-based engine, so equivalence is
tolerance-based, not bitwise.

Also hosts the double-precision loss evaluator used for finite-difference
gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import Batch, Model, PublicParams, adam_rate, dense_forward, make_batches
from .lsh import encode_bucket_block, make_hash_fns, mp_wta_probes, wta_top3_block
from .records import NeuronBlock


class RefModel:
    """Directly indexed two-layer model (no dummies, no padding)."""

    def __init__(self, params: PublicParams) -> None:
        self.params = params
        self.fns = make_hash_fns(
            params.lsh.k, params.lsh.m, params.n_hidden, params.seed_lsh
        )
        self.dense = NeuronBlock(params.n_hidden, params.d_input, params.batch_size)
        c, n0 = params.n_classes, params.n_hidden
        self.w_out = np.zeros((c, n0), dtype=np.float32)
        self.b_out = np.zeros(c, dtype=np.float32)
        self.m_out = np.zeros((c, n0), dtype=np.float32)
        self.v_out = np.zeros((c, n0), dtype=np.float32)
        self.mb_out = np.zeros(c, dtype=np.float32)
        self.vb_out = np.zeros(c, dtype=np.float32)
        self.bucket_of = np.zeros(c, dtype=np.int64)
        self.in_table = np.ones(c, dtype=bool)
        self.step = 0

    def refresh_assignments(self) -> None:
        """Mirror the oblivious refresh: bucket by current signature and
        keep the pad_size lowest-id neurons per bucket; the rest are
        excluded until the next refresh."""
        cfg = self.params.lsh
        sigs = np.zeros((self.params.n_classes, cfg.k), dtype=np.int64)
        for i, fn in enumerate(self.fns):
            p1, _, _ = wta_top3_block(self.w_out[:, fn.sampled_order])
            sigs[:, i] = p1
        self.bucket_of = encode_bucket_block(sigs, cfg)
        self.in_table[:] = True
        for b in np.unique(self.bucket_of):
            members = np.nonzero(self.bucket_of == b)[0]
            if len(members) > cfg.pad_size:
                self.in_table[members[cfg.pad_size:]] = False


def init_ref_model(params: PublicParams) -> RefModel:
    """Same seeded draws, in the same order, as the engine init."""
    model = RefModel(params)
    rng = np.random.default_rng(params.seed_weights)
    s0 = 1.0 / math.sqrt(params.d_input)
    model.dense.ids[:] = np.arange(params.n_hidden)
    model.dense.is_dummy[:] = 0
    model.dense.weights[:] = rng.uniform(
        -s0, s0, size=(params.n_hidden, params.d_input)
    ).astype(np.float32)
    s1 = 1.0 / math.sqrt(params.n_hidden)
    model.w_out[:] = rng.uniform(
        -s1, s1, size=(params.n_classes, params.n_hidden)
    ).astype(np.float32)
    model.refresh_assignments()
    return model


def active_set(model: RefModel, hidden_i: np.ndarray) -> np.ndarray:
    """Neuron ids of every probed bucket's residents, ascending."""
    probes = mp_wta_probes(hidden_i, model.fns, model.params.lsh)
    mask = model.in_table & np.isin(model.bucket_of, probes)
    return np.nonzero(mask)[0]


def _adam_rows(model: RefModel, rows: np.ndarray, grad_w: np.ndarray,
               grad_b: np.ndarray, alpha_t: np.float32) -> None:
    p = model.params
    b1, b2 = np.float32(p.beta1), np.float32(p.beta2)
    one, epsf = np.float32(1.0), np.float32(p.eps)
    g = grad_w[rows]
    m = b1 * model.m_out[rows] + (one - b1) * g
    v = b2 * model.v_out[rows] + (one - b2) * g * g
    model.m_out[rows] = m
    model.v_out[rows] = v
    model.w_out[rows] += alpha_t * m / (np.sqrt(v) + epsf)
    gb = grad_b[rows]
    mb = b1 * model.mb_out[rows] + (one - b1) * gb
    vb = b2 * model.vb_out[rows] + (one - b2) * gb * gb
    model.mb_out[rows] = mb
    model.vb_out[rows] = vb
    model.b_out[rows] += alpha_t * mb / (np.sqrt(vb) + epsf)


def ref_batch_step(model: RefModel, batch: Batch) -> float:
    """Identical selection and formulas with direct indexing; returns the
    mean batch loss."""
    p = model.params
    model.step += 1
    hidden = dense_forward(model.dense, batch)
    c = p.n_classes
    grad_w = np.zeros((c, p.n_hidden), dtype=np.float32)
    grad_b = np.zeros(c, dtype=np.float32)
    touched = np.zeros(c, dtype=bool)
    bsz = np.float32(p.batch_size)
    loss_total = 0.0

    model.dense.delta[:, :p.batch_size] = 0
    for i in range(p.batch_size):
        act = active_set(model, hidden[i])
        touched[act] = True
        y = batch.labels[i]
        a = model.b_out[act] + model.w_out[act] @ hidden[i]
        m_i = np.float32(a.max()) if len(a) else np.float32(0)
        z = np.exp(a - m_i, dtype=np.float32)
        nc = np.float32(z.sum())
        nc = nc if nc > 0 else np.float32(1)
        prob = z / nc
        is_label = np.isin(act, y)
        inv_y = np.float32(1.0 / max(len(y), 1))
        delta = np.where(is_label, (inv_y - prob) / bsz, -prob / bsz).astype(np.float32)
        if len(y):
            loss_total += (
                float(m_i) + math.log(float(nc))
                - float(a[is_label].sum()) / len(y)
            )

        grad_w[act] += np.outer(delta, hidden[i])
        grad_b[act] += delta
        inc = model.w_out[act].T @ delta
        gate = model.dense.last_act[:, i] > 0
        model.dense.delta[:, i] += np.where(gate, inc, np.float32(0))

    for i in range(p.batch_size):
        idx, val = batch.indices[i], batch.values[i]
        delta_v = model.dense.delta[:, i]
        if len(idx):
            model.dense.grad[:, idx] += np.outer(delta_v, val)
        model.dense.grad_bias += delta_v

    alpha_t = adam_rate(p.lr, p.beta1, p.beta2, model.step)
    rows = np.nonzero(touched)[0]
    _adam_rows(model, rows, grad_w, grad_b, alpha_t)
    from .engine import adam_apply_block

    adam_apply_block(model.dense, alpha_t, p.beta1, p.beta2, p.eps)
    return loss_total / p.batch_size


def ref_train(
    examples: list, params: PublicParams, model: Optional[RefModel] = None,
    max_batches: Optional[int] = None,
) -> RefModel:
    """Mirror of the engine's schedule, including periodic reassignment."""
    if model is None:
        model = init_ref_model(params)
    batches = make_batches(examples, params.batch_size)
    period = params.lsh.rebuild_period
    total = 0
    for _ in range(params.epochs):
        for b in batches:
            if max_batches is not None and total >= max_batches:
                return model
            ref_batch_step(model, b)
            total += 1
            if period and total % period == 0:
                model.refresh_assignments()
    return model


@dataclass
class ModelDeviation:
    max_rel: float
    location: str
    passed: bool


def compare_models(model: Model, ref: RefModel, tol: float) -> ModelDeviation:
    """Per-weight relative deviation, denominator max(|a|, |b|, 1e-8)."""
    from .engine import output_layer_arrays

    w_out, b_out = output_layer_arrays(model)
    if w_out.shape != ref.w_out.shape or model.dense.weights.shape != ref.dense.weights.shape:
        raise ValueError("model shapes do not match")
    worst = 0.0
    where = "none"
    for name, a, b in (
        ("out.weights", w_out, ref.w_out),
        ("out.bias", b_out, ref.b_out),
        ("dense.weights", model.dense.weights, ref.dense.weights),
        ("dense.bias", model.dense.bias, ref.dense.bias),
    ):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        rel = np.abs(a.astype(np.float64) - b.astype(np.float64)) / denom
        peak = float(rel.max()) if rel.size else 0.0
        if peak > worst:
            worst = peak
            where = f"{name}[{np.unravel_index(int(rel.argmax()), rel.shape)}]"
    return ModelDeviation(max_rel=worst, location=where, passed=worst <= tol)


# ---------------------------------------------------------------------
# Double-precision loss for finite-difference gradient checks
# ---------------------------------------------------------------------


def batch_loss_f64(
    dense_w: np.ndarray, dense_b: np.ndarray,
    out_w: np.ndarray, out_b: np.ndarray,
    batch: Batch, active_sets: list[np.ndarray],
) -> float:
    """The training loss over fixed active sets, evaluated in float64.

    Per input: logsumexp over the active pre-activations minus the mean
    active-label pre-activation; averaged over the batch.  The gradient
    of this quantity is exactly the negative of the per-slot delta rule.
    """
    total = 0.0
    bsz = len(batch.indices)
    for i in range(bsz):
        idx, val = batch.indices[i], batch.values[i]
        pre = dense_b.astype(np.float64).copy()
        if len(idx):
            pre += dense_w[:, idx].astype(np.float64) @ val.astype(np.float64)
        h = np.where(pre > 0, pre, 0.0)
        act = active_sets[i]
        if len(act) == 0:
            continue
        a = out_b[act].astype(np.float64) + out_w[act].astype(np.float64) @ h
        m_i = a.max()
        lse = m_i + math.log(np.exp(a - m_i).sum())
        total += lse
        y = batch.labels[i]
        if len(y):
            mask = np.isin(act, y)
            total -= float(a[mask].sum()) / len(y)
    return total / bsz


def fd_gradient(
    loss_fn, arr: np.ndarray, coords: list[tuple], h: float = 1e-4
) -> np.ndarray:
    """Central finite differences of ``loss_fn()`` w.r.t. arr[coord]."""
    out = np.zeros(len(coords))
    for j, coord in enumerate(coords):
        orig = arr[coord]
        arr[coord] = orig + h
        up = loss_fn()
        arr[coord] = orig - h
        down = loss_fn()
        arr[coord] = orig
        out[j] = (up - down) / (2 * h)
    return out
