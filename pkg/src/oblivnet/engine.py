"""The oblivious batch step and training loop for the two-layer network.

One batch step runs: multi-probe requester -> hash-table fetch (read) ->
fixed-shape feedforward -> backpropagation -> oblivious merge -> Adam ->
hash-table fetch (write), with phase marks separating the components.
Layer 0 is dense and scanned in full public order; the wide output layer
is reached only through the padded LSH table, so every loop bound, array
shape, and access offset is a function of public parameters.

Dummy neurons carry all-zero numeric state and flow through the identical
arithmetic, which keeps them neutral: zero activation, zero delta, zero
gradient, zero Adam update.
"""

from __future__ import annotations

import json
import math
import struct
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import oht as oht_mod
from .lsh import LshConfig, LshTable, make_hash_fns, mp_wta_probes, refresh
from .oht import BinScheduler, LayoutRecord, OhtConfig, bins_for, build_scheduler
from .records import NeuronBlock, RequestBlock
from .trace import Kind, TraceLog, TraceRecorder

READ, WRITE = "read", "write"

CHECKPOINT_MAGIC = b"TNNR"
CHECKPOINT_VERSION = 1


@dataclass
class PublicParams:
    """The adversary-visible parameter set.

    Everything here (plus each input's nnz, non-zero indices, and label
    count, which live in the dataset) determines the shapes of all
    intermediate arrays, every loop bound, and the full memory-traversal
    schedule.  Values of data, weights, and optimizer state stay private.
    """

    d_input: int
    n_hidden: int
    n_classes: int
    lsh: LshConfig
    batch_size: int = 8
    epochs: int = 1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    oht: Optional[OhtConfig] = None
    o1: bool = True
    o2: bool = True
    o3: bool = True
    workers: int = 1
    seed_weights: int = 0
    seed_lsh: int = 1

    def __post_init__(self) -> None:
        if self.lsh.m > self.n_hidden:
            raise ValueError("WTA window size exceeds the hidden width")
        if self.n_classes > self.lsh.num_buckets * self.lsh.pad_size:
            raise ValueError("output neurons exceed the LSH table capacity")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.oht is None:
            self.oht = OhtConfig.derive(self.n_requests, self.batch_size)

    @property
    def len_seq(self) -> int:
        return self.lsh.len_seq

    @property
    def n_requests(self) -> int:
        return self.batch_size * self.len_seq

    @property
    def slots_per_input(self) -> int:
        return self.len_seq * self.lsh.pad_size

    def as_dict(self) -> dict:
        d = {
            "d_input": self.d_input, "n_hidden": self.n_hidden,
            "n_classes": self.n_classes, "batch_size": self.batch_size,
            "epochs": self.epochs, "lr": self.lr, "beta1": self.beta1,
            "beta2": self.beta2, "eps": self.eps,
            "o1": self.o1, "o2": self.o2, "o3": self.o3,
            "workers": self.workers, "seed_weights": self.seed_weights,
            "seed_lsh": self.seed_lsh,
            "lsh": {
                "k": self.lsh.k, "m": self.lsh.m,
                "pad_size": self.lsh.pad_size, "r": self.lsh.r,
                "n_perturb": self.lsh.n_perturb,
                "rebuild_period": self.lsh.rebuild_period,
            },
            "oht": {
                "num_bins": self.oht.num_bins, "bin_cap": self.oht.bin_cap,
                "seed1": self.oht.seed1, "seed2": self.oht.seed2,
            },
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PublicParams":
        lsh = LshConfig(**d["lsh"])
        oht = OhtConfig(**d["oht"]) if "oht" in d and d["oht"] else None
        kw = {k: v for k, v in d.items() if k not in ("lsh", "oht")}
        return cls(lsh=lsh, oht=oht, **kw)


@dataclass
class Batch:
    """One padded batch: per-input feature indices/values and label sets.

    Padding inputs are all-zero with empty labels; their count is part of
    the public schedule.
    """

    indices: list[np.ndarray]
    values: list[np.ndarray]
    labels: list[np.ndarray]

    @property
    def size(self) -> int:
        return len(self.indices)


def make_batches(examples: list, batch_size: int) -> list[Batch]:
    """Fixed-order batching; the last batch is padded to full size."""
    batches = []
    for at in range(0, len(examples), batch_size):
        chunk = examples[at:at + batch_size]
        idx = [np.asarray([i for i, _ in ex.features], dtype=np.int64) for ex in chunk]
        val = [np.asarray([v for _, v in ex.features], dtype=np.float32) for ex in chunk]
        lab = [np.asarray(sorted(ex.labels), dtype=np.int64) for ex in chunk]
        while len(idx) < batch_size:
            idx.append(np.zeros(0, dtype=np.int64))
            val.append(np.zeros(0, dtype=np.float32))
            lab.append(np.zeros(0, dtype=np.int64))
        batches.append(Batch(idx, val, lab))
    return batches


@dataclass
class ActiveState:
    """Fixed-capacity per-batch activation scratch (never resized)."""

    nodes: np.ndarray       # (B, R) neuron ids
    vals: np.ndarray        # (B, R) softmax-pass values
    preacts: np.ndarray     # (B, R) pre-activation copies
    max_val: np.ndarray     # (B,)
    norm_const: np.ndarray  # (B,)

    @classmethod
    def alloc(cls, batch_size: int, slots: int) -> "ActiveState":
        return cls(
            nodes=np.zeros((batch_size, slots), dtype=np.int64),
            vals=np.zeros((batch_size, slots), dtype=np.float32),
            preacts=np.zeros((batch_size, slots), dtype=np.float32),
            max_val=np.zeros(batch_size, dtype=np.float32),
            norm_const=np.ones(batch_size, dtype=np.float32),
        )


class Model:
    """Dense hidden layer plus the LSH-resident wide output layer."""

    def __init__(self, params: PublicParams) -> None:
        self.params = params
        self.fns = make_hash_fns(
            params.lsh.k, params.lsh.m, params.n_hidden, params.seed_lsh
        )
        self.dense = NeuronBlock(params.n_hidden, params.d_input, params.batch_size)
        self.table = LshTable(params.lsh, params.n_hidden, params.batch_size)
        self.step = 0
        self.scheduler: Optional[BinScheduler] = None

    @property
    def dummy_id(self) -> int:
        return self.params.n_classes

    def ensure_scheduler(self) -> BinScheduler:
        if self.scheduler is None:
            self.scheduler = build_scheduler(
                self.params.oht, self.params.lsh.num_buckets, self.params.workers
            )
        return self.scheduler


def init_model(params: PublicParams, rec: Optional[TraceRecorder] = None) -> Model:
    """Seeded uniform initialization and the initial table construction."""
    model = Model(params)
    rng = np.random.default_rng(params.seed_weights)
    s0 = 1.0 / math.sqrt(params.d_input)
    model.dense.ids[:] = np.arange(params.n_hidden)
    model.dense.is_dummy[:] = 0
    model.dense.weights[:] = rng.uniform(
        -s0, s0, size=(params.n_hidden, params.d_input)
    ).astype(np.float32)

    s1 = 1.0 / math.sqrt(params.n_hidden)
    reals = NeuronBlock(params.n_classes, params.n_hidden, params.batch_size)
    reals.ids[:] = np.arange(params.n_classes)
    reals.is_dummy[:] = 0
    reals.weights[:] = rng.uniform(
        -s1, s1, size=(params.n_classes, params.n_hidden)
    ).astype(np.float32)
    refresh(model.table, model.fns, rec=rec, init_reals=reals)
    return model


# ---------------------------------------------------------------------
# Components of one batch step
# ---------------------------------------------------------------------


def dense_forward(
    dense: NeuronBlock, batch: Batch, rec: Optional[TraceRecorder] = None,
) -> np.ndarray:
    """Public-order scan of all hidden neurons over each input's public
    non-zero feature indices; returns the (B, N0) ReLU activations."""
    n0 = dense.n
    hidden = np.zeros((batch.size, n0), dtype=np.float32)
    for i in range(batch.size):
        idx, val = batch.indices[i], batch.values[i]
        pre = dense.bias.copy()
        if len(idx):
            pre += dense.weights[:, idx] @ val
        act = np.where(pre > 0, pre, np.float32(0))
        hidden[i] = act
        dense.last_act[:, i] = act
        if rec is not None:
            rec.run(Kind.CMPSET, "FF.dense", 0, n0)
    return hidden


def neuron_requester(
    hidden: np.ndarray, model: Model, rec: Optional[TraceRecorder] = None,
) -> RequestBlock:
    """Build the statically sized request array: entry (i-1)*lenSeq + t
    holds input i's t-th probe, batch rank i, and a dummy-padded buffer."""
    p = model.params
    ls = p.len_seq
    req = RequestBlock(p.n_requests, p.lsh.pad_size, p.n_hidden, p.batch_size)
    req.buffers.ids[:] = model.dummy_id
    req.buffers.is_dummy[:] = 1
    if rec is not None:
        rec.phase("requester", 0)
    for i in range(p.batch_size):
        probes = mp_wta_probes(hidden[i], model.fns, p.lsh, rec=rec)
        req.bucket[i * ls:(i + 1) * ls] = probes
        req.rank[i * ls:(i + 1) * ls] = i + 1
        if rec is not None:
            rec.run(Kind.WRITE, "ReqArray", i * ls, ls)
    if rec is not None:
        rec.phase("requester", 1)
    return req


def slot_node(req: RequestBlock, i: int, r: int, len_seq: int) -> int:
    """Buffer row of public slot (i, r); i in 1..B, r in 1..R."""
    pad = req.pad
    if not (1 <= r <= len_seq * pad):
        raise IndexError("slot index out of range")
    if not (1 <= i <= req.n // len_seq):
        raise IndexError("input index out of range")
    t = (r - 1) // pad
    s = (r - 1) % pad
    ind = (i - 1) * len_seq + t
    return ind * pad + s


def _scan_visit(
    table: LshTable, tier: oht_mod.TierTable, tier_idx: int, bin_cap: int,
    b: int, bin_: int, mode: str,
    rec: Optional[TraceRecorder], fault_inject: bool,
) -> None:
    pad = table.cfg.pad_size
    slots = np.arange(bin_ * bin_cap, (bin_ + 1) * bin_cap)
    match = tier.bucket[slots] == b
    if mode == WRITE:
        match &= tier.is_dummy[slots] == 0
    sel = slots[match]
    bucket_rows = np.arange(b * pad, (b + 1) * pad)
    if mode == READ:
        if len(sel):
            dst = (sel[:, None] * pad + np.arange(pad)).ravel()
            src = np.tile(bucket_rows, len(sel))
            tier.buffers.set_rows(dst, table.main, src)
    else:
        if len(sel):
            src = (sel[:, None] * pad + np.arange(pad)).ravel()
            table.main.set_rows(np.tile(bucket_rows, len(sel)), tier.buffers, src)
    if rec is None:
        return
    obj = f"OHT.t{tier_idx + 1}"
    if fault_inject:
        # Deliberately non-oblivious scan used by the audit fault check:
        # events are emitted only for matching slots.
        for s in sel.tolist():
            rec.event(Kind.CMPSET, obj, s, 1)
            rec.event(Kind.WRITE if mode == READ else Kind.READ,
                      obj + ".buf", s * pad, pad)
        return
    if mode == READ:
        rec.event(Kind.READ, "LSH", b * pad, pad)
        rec.run(Kind.CMPSET, obj, bin_ * bin_cap, bin_cap)
        rec.stage(Kind.WRITE, obj + ".buf", slots * pad, np.full(bin_cap, pad))
    else:
        rec.run(Kind.CMPSET, obj, bin_ * bin_cap, bin_cap)
        rec.stage(Kind.READ, obj + ".buf", slots * pad, np.full(bin_cap, pad))
        rec.stage(Kind.WRITE, "LSH", np.full(bin_cap, b * pad), np.full(bin_cap, pad))


def _scan(
    oht: oht_mod.Oht, table: LshTable, mode: str, params: PublicParams,
    scheduler: Optional[BinScheduler],
    rec: Optional[TraceRecorder], fault_inject: bool,
) -> None:
    nb = params.lsh.num_buckets
    cap = params.oht.bin_cap
    if params.o2:
        sched = scheduler
        workers = params.workers
        ctx = rec.parallel(workers) if rec is not None else nullcontext()
        with ctx:
            for w in range(workers):
                wctx = rec.worker(w) if rec is not None else None
                if wctx is not None:
                    wctx.__enter__()
                try:
                    for tier_idx in (0, 1):
                        for bin_, buckets in sched.assignments(w, tier_idx):
                            for b in buckets.tolist():
                                _scan_visit(
                                    table, oht.tiers[tier_idx], tier_idx, cap,
                                    b, bin_, mode, rec, fault_inject,
                                )
                finally:
                    if wctx is not None:
                        wctx.__exit__(None, None, None)
    else:
        for b in range(nb):
            b1, b2 = bins_for(b, params.oht)
            for tier_idx, bin_ in ((0, b1), (1, b2)):
                _scan_visit(
                    table, oht.tiers[tier_idx], tier_idx, cap,
                    b, bin_, mode, rec, fault_inject,
                )


def neuron_fetcher(
    req: RequestBlock, model: Model, mode: str,
    rec: Optional[TraceRecorder] = None,
    layout: Optional[LayoutRecord] = None,
    fault_inject: bool = False,
) -> tuple[RequestBlock, LayoutRecord]:
    """Reverse-mapping fetch: build/reuse the request hash table, scan all
    LSH buckets once against it, then restore the request array.

    Read mode moves bucket contents into matching buffers; write mode
    moves non-dummy merged buffers back into their buckets.
    """
    p = model.params
    if rec is not None:
        rec.phase(f"fetch.{mode}", 0)
    if mode == READ:
        table = oht_mod.build(req, p.oht, defer_payload=p.o1,
                              dummy_id=model.dummy_id, rec=rec)
    elif p.o3 and layout is not None:
        table = oht_mod.rebuild_from_layout(req, layout, rec=rec)
    else:
        table = oht_mod.build(req, p.oht, defer_payload=False,
                              dummy_id=model.dummy_id, rec=rec)
    scheduler = model.ensure_scheduler() if p.o2 else None
    _scan(table, model.table, mode, p, scheduler, rec, fault_inject)
    out, layout_out = oht_mod.extract(table, req.n, rec=rec)
    if rec is not None:
        rec.phase(f"fetch.{mode}", 1)
    return out, layout_out


def feed_forward(
    req: RequestBlock, hidden: np.ndarray, model: Model,
    rec: Optional[TraceRecorder] = None,
) -> ActiveState:
    """Output-layer pass over the fixed slot layout with the stable
    softmax transform; dummy slots are zeroed so padding contributes
    nothing to the normalizer, which is guarded to stay >= 1."""
    p = model.params
    r_slots = p.slots_per_input
    state = ActiveState.alloc(p.batch_size, r_slots)
    if rec is not None:
        rec.phase("updater.ff", 0)
    buf = req.buffers
    ls = p.len_seq
    for i in range(p.batch_size):
        rows = slice(i * ls * req.pad, (i + 1) * ls * req.pad)
        pre = buf.bias[rows] + buf.weights[rows] @ hidden[i]
        state.nodes[i] = buf.ids[rows]
        state.preacts[i] = pre
        m_i = np.float32(pre.max()) if r_slots else np.float32(0)
        state.max_val[i] = m_i
        z = np.exp(pre - m_i, dtype=np.float32)
        z = np.where(buf.is_dummy[rows].astype(bool), np.float32(0), z)
        state.vals[i] = z
        buf.last_act[rows, i] = z
        nc = np.float32(z.sum())
        state.norm_const[i] = nc if nc > 0 else np.float32(1)
        if rec is not None:
            rec.run(Kind.CMPSET, "FF.out.max", i * r_slots, r_slots)
            rec.run(Kind.CMPSET, "FF.out.softmax", i * r_slots, r_slots)
    if rec is not None:
        rec.phase("updater.ff", 1)
    return state


def backprop(
    req: RequestBlock, model: Model, state: ActiveState, hidden: np.ndarray,
    batch: Batch, rec: Optional[TraceRecorder] = None,
) -> float:
    """Delta computation, fixed-shape propagation into the dense layer,
    and gradient accumulation; returns the mean batch loss."""
    p = model.params
    dense = model.dense
    buf = req.buffers
    ls, pad = p.len_seq, req.pad
    r_slots = p.slots_per_input
    bsz = np.float32(p.batch_size)
    if rec is not None:
        rec.phase("updater.bp", 0)

    loss_total = 0.0
    # Phase 1: output-layer deltas via label scan.
    for i in range(p.batch_size):
        rows = slice(i * ls * pad, (i + 1) * ls * pad)
        y = batch.labels[i]
        z = state.vals[i]
        prob = z / state.norm_const[i]
        buf.last_act[rows, i] = prob
        is_label = np.isin(state.nodes[i], y)
        inv_y = np.float32(1.0 / max(len(y), 1))
        delta = np.where(
            is_label, (inv_y - prob) / bsz, -prob / bsz
        ).astype(np.float32)
        buf.delta[rows, i] = delta
        lse = float(state.max_val[i]) + math.log(float(state.norm_const[i]))
        if len(y):
            loss_total += lse - float(state.preacts[i][is_label].sum()) / len(y)
        if rec is not None:
            rec.run(Kind.CMPSET, "BP.label", i * r_slots, r_slots * len(y))
            rec.run(Kind.CMPSET, "BP.delta", i * r_slots, r_slots)

    # Public reset of the dense delta scratch.
    dense.delta[:, :p.batch_size] = 0
    if rec is not None:
        rec.run(Kind.WRITE, "BP.reset", 0, p.batch_size * dense.n)

    # Phase 2: propagate into the dense layer and accumulate weight grads.
    for i in range(p.batch_size):
        rows = slice(i * ls * pad, (i + 1) * ls * pad)
        delta_u = buf.delta[rows, i]
        w_u = buf.weights[rows]
        inc = w_u.T @ delta_u
        gate = dense.last_act[:, i] > 0
        dense.delta[:, i] += np.where(gate, inc, np.float32(0))
        buf.grad[rows] += np.outer(delta_u, dense.last_act[:, i])
        buf.grad_bias[rows] += delta_u
        if rec is not None:
            rec.run(Kind.CMPSET, "BP.prop", i * r_slots * dense.n, r_slots * dense.n)

    # Phase 3: dense-layer gradients from the public input sparsity.
    for i in range(p.batch_size):
        idx, val = batch.indices[i], batch.values[i]
        delta_v = dense.delta[:, i]
        if len(idx):
            dense.grad[:, idx] += np.outer(delta_v, val)
        dense.grad_bias += delta_v
        if rec is not None:
            rec.run(Kind.WRITE, "BP.dense", i * dense.n, dense.n * len(idx))
            rec.run(Kind.WRITE, "BP.dense.bias", i * dense.n, dense.n)
    if rec is not None:
        rec.phase("updater.bp", 1)
    return loss_total / p.batch_size


def obl_merge_requests(
    req: RequestBlock, rec: Optional[TraceRecorder] = None,
) -> None:
    """Group entries by bucket, fold each donor's slot-aligned gradient
    state into its predecessor, mark donors dummy, push dummies last.

    The fold moves (adds then clears) the accumulators, so the total of
    every gradient coordinate over the array is preserved.
    """
    from .oblivious import obl_sort_block

    t = req.n
    if rec is not None:
        rec.phase("merge", 0)
    obl_sort_block(
        t, [req.bucket], rec=rec, obj="Merge.sort1",
        fields=req.fields(), blocks=[(req.buffers, req.pad)],
    )
    buf = req.buffers
    pad = req.pad
    for j in range(t - 1, 0, -1):
        same = np.float32(req.bucket[j] == req.bucket[j - 1])
        jr = slice(j * pad, (j + 1) * pad)
        pr = slice((j - 1) * pad, j * pad)
        buf.grad[pr] += same * buf.grad[jr]
        buf.grad[jr] *= np.float32(1) - same
        buf.grad_bias[pr] += same * buf.grad_bias[jr]
        buf.grad_bias[jr] *= np.float32(1) - same
        req.is_dummy[j] = max(int(req.is_dummy[j]), int(same))
        if rec is not None:
            rec.event(Kind.CMPSET, "Merge.fold", j, 1)
    obl_sort_block(
        t, [req.is_dummy.astype(np.int64)], rec=rec, obj="Merge.sort2",
        fields=req.fields(), blocks=[(req.buffers, req.pad)],
    )
    if rec is not None:
        rec.phase("merge", 1)


def adam_rate(lr: float, beta1: float, beta2: float, step: int) -> np.float32:
    """Bias-corrected learning rate shared by engine and oracle."""
    return np.float32(lr * math.sqrt(1.0 - beta2 ** step) / (1.0 - beta1 ** step))


def adam_apply_block(
    blk: NeuronBlock, alpha_t: np.float32, beta1: float, beta2: float, eps: float,
) -> None:
    """Adam over every record of a block; resets the gradient accumulators.

    Identical arithmetic on dummy slots (zero gradients leave them
    unchanged).  In-place, single precision.
    """
    b1, b2 = np.float32(beta1), np.float32(beta2)
    one, epsf = np.float32(1.0), np.float32(eps)
    blk.m[...] = b1 * blk.m + (one - b1) * blk.grad
    blk.v[...] = b2 * blk.v + (one - b2) * blk.grad * blk.grad
    blk.weights[...] += alpha_t * blk.m / (np.sqrt(blk.v) + epsf)
    blk.grad[...] = 0
    blk.m_bias[...] = b1 * blk.m_bias + (one - b1) * blk.grad_bias
    blk.v_bias[...] = b2 * blk.v_bias + (one - b2) * blk.grad_bias * blk.grad_bias
    blk.bias[...] += alpha_t * blk.m_bias / (np.sqrt(blk.v_bias) + epsf)
    blk.grad_bias[...] = 0


def adam_update(
    req: RequestBlock, model: Model, rec: Optional[TraceRecorder] = None,
) -> None:
    """Flat scan over all request slots plus the public-order dense scan."""
    p = model.params
    alpha_t = adam_rate(p.lr, p.beta1, p.beta2, model.step)
    if rec is not None:
        rec.phase("adam", 0)
    adam_apply_block(req.buffers, alpha_t, p.beta1, p.beta2, p.eps)
    adam_apply_block(model.dense, alpha_t, p.beta1, p.beta2, p.eps)
    if rec is not None:
        rec.run(Kind.WRITE, "Adam.req", 0, req.buffers.n)
        rec.run(Kind.WRITE, "Adam.dense", 0, model.dense.n)
        rec.phase("adam", 1)


def batch_step(
    model: Model, batch: Batch, rec: Optional[TraceRecorder] = None,
    fault_inject: bool = False,
) -> float:
    """One full oblivious training step; returns the mean batch loss."""
    model.step += 1
    hidden = dense_forward(model.dense, batch, rec=rec)
    req = neuron_requester(hidden, model, rec=rec)
    req, layout = neuron_fetcher(req, model, READ, rec=rec, fault_inject=fault_inject)
    state = feed_forward(req, hidden, model, rec=rec)
    loss = backprop(req, model, state, hidden, batch, rec=rec)
    obl_merge_requests(req, rec=rec)
    adam_update(req, model, rec=rec)
    neuron_fetcher(req, model, WRITE, rec=rec, layout=layout,
                   fault_inject=fault_inject)
    return loss


# ---------------------------------------------------------------------
# Training loop, evaluation, checkpoints
# ---------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    batch_seconds: list[float] = field(default_factory=list)

    @property
    def mean_batch_seconds(self) -> float:
        return float(np.mean(self.batch_seconds)) if self.batch_seconds else 0.0


def train_loop(
    train_examples: list, params: PublicParams,
    eval_examples: Optional[list] = None,
    rec: Optional[TraceRecorder] = None,
    model: Optional[Model] = None,
    fault_inject: bool = False,
    max_batches: Optional[int] = None,
) -> TrainResult:
    """Initial table construction, then the public schedule of batch steps
    with a refresh after every ``rebuild_period`` steps."""
    if model is None:
        model = init_model(params, rec=rec)
    batches = make_batches(train_examples, params.batch_size)
    period = params.lsh.rebuild_period
    metrics: list[dict] = []
    batch_seconds: list[float] = []
    total = 0
    for epoch in range(params.epochs):
        t_epoch = time.perf_counter()
        losses = []
        for b in batches:
            if max_batches is not None and total >= max_batches:
                break
            t0 = time.perf_counter()
            losses.append(batch_step(model, b, rec=rec, fault_inject=fault_inject))
            batch_seconds.append(time.perf_counter() - t0)
            total += 1
            if period and total % period == 0:
                refresh(model.table, model.fns, rec=rec)
        wall = time.perf_counter() - t_epoch
        p1 = float("nan")
        if eval_examples:
            p1 = evaluate_p_at_1(model, eval_examples)
        metrics.append({
            "epoch": epoch, "batch": total, "p_at_1": p1,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "wall_seconds": wall,
        })
        if max_batches is not None and total >= max_batches:
            break
    return TrainResult(model=model, metrics=metrics, batch_seconds=batch_seconds)


def output_layer_arrays(model: Model) -> tuple[np.ndarray, np.ndarray]:
    """Materialize (C, N0) output weights and biases from the table reals."""
    p = model.params
    blk, ids = model.table.real_rows()
    w = np.zeros((p.n_classes, p.n_hidden), dtype=np.float32)
    b = np.zeros(p.n_classes, dtype=np.float32)
    w[ids] = blk.weights
    b[ids] = blk.bias
    return w, b


def predict_scores(model: Model, examples: list) -> np.ndarray:
    """Dense forward over all output neurons (evaluation path, not
    oblivious); returns the (n, C) score matrix."""
    p = model.params
    w_out, b_out = output_layer_arrays(model)
    scores = np.zeros((len(examples), p.n_classes), dtype=np.float32)
    for i, ex in enumerate(examples):
        idx = np.asarray([j for j, _ in ex.features], dtype=np.int64)
        val = np.asarray([v for _, v in ex.features], dtype=np.float32)
        pre = model.dense.bias.copy()
        if len(idx):
            pre += model.dense.weights[:, idx] @ val
        h = np.where(pre > 0, pre, np.float32(0))
        scores[i] = w_out @ h + b_out
    return scores


def evaluate_p_at_1(model: Model, examples: list) -> float:
    """Fraction of examples whose top-scored label is a true label."""
    if not examples:
        raise ValueError("empty evaluation set")
    scores = predict_scores(model, examples)
    top = np.argmax(scores, axis=1)
    hits = sum(1 for i, ex in enumerate(examples) if int(top[i]) in ex.labels)
    return hits / len(examples)


# -- checkpoint ----------------------------------------------------------


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    dt = arr.dtype.str.encode("ascii")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<H", len(dt)))
    fh.write(dt)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_array(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode("utf-8")
    (dlen,) = struct.unpack("<H", fh.read(2))
    dt = np.dtype(fh.read(dlen).decode("ascii"))
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(fh.read(count * dt.itemsize), dtype=dt).reshape(shape)
    return name, arr


def save_checkpoint(model: Model, path: str, extra_config: Optional[dict] = None) -> None:
    """Binary checkpoint: magic, version, public-parameter block, dense
    layer, and the table's real neurons (re-insertable via refresh)."""
    reals, ids = model.table.real_rows()
    header = {
        "params": model.params.as_dict(),
        "step": model.step,
        "config": extra_config or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = {
        "dense.ids": model.dense.ids, "dense.weights": model.dense.weights,
        "dense.bias": model.dense.bias, "dense.m": model.dense.m,
        "dense.v": model.dense.v, "dense.m_bias": model.dense.m_bias,
        "dense.v_bias": model.dense.v_bias,
        "out.ids": ids, "out.weights": reals.weights, "out.bias": reals.bias,
        "out.m": reals.m, "out.v": reals.v, "out.m_bias": reals.m_bias,
        "out.v_bias": reals.v_bias,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            _write_array(fh, name, arr)


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (n_arr,) = struct.unpack("<I", fh.read(4))
        arrays = dict(_read_array(fh) for _ in range(n_arr))
    params = PublicParams.from_dict(header["params"])
    model = Model(params)
    model.step = header["step"]
    d = model.dense
    d.ids[:] = arrays["dense.ids"]
    d.is_dummy[:] = 0
    d.weights[:] = arrays["dense.weights"]
    d.bias[:] = arrays["dense.bias"]
    d.m[:] = arrays["dense.m"]
    d.v[:] = arrays["dense.v"]
    d.m_bias[:] = arrays["dense.m_bias"]
    d.v_bias[:] = arrays["dense.v_bias"]
    reals = NeuronBlock(len(arrays["out.ids"]), params.n_hidden, params.batch_size)
    reals.ids[:] = arrays["out.ids"]
    reals.is_dummy[:] = 0
    reals.weights[:] = arrays["out.weights"]
    reals.bias[:] = arrays["out.bias"]
    reals.m[:] = arrays["out.m"]
    reals.v[:] = arrays["out.v"]
    reals.m_bias[:] = arrays["out.m_bias"]
    reals.v_bias[:] = arrays["out.v_bias"]
    refresh(model.table, model.fns, init_reals=reals)
    return model


def run_traced(
    train_examples: list, params: PublicParams, fault_inject: bool = False,
    max_batches: Optional[int] = None,
) -> tuple[TrainResult, TraceLog]:
    """Full pipeline under a fresh recorder; the audit entry point."""
    rec = TraceRecorder(enabled=True)
    result = train_loop(
        train_examples, params, rec=rec, fault_inject=fault_inject,
        max_batches=max_batches,
    )
    return result, rec.log
