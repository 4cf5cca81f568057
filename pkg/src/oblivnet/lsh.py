"""WTA hash family, multi-probe sequence generation, and the padded table.

A WTA hash function samples a fixed window of M feature indices (a prefix
of a random permutation) and emits the *window position* of the maximum
sampled value, so a K-function signature lives in ``[0, M)^K`` and the
bucket space has exactly ``M**K`` buckets.  Multi-probe widens a lookup by
substituting second/third-maximum positions into up to ``n_perturb``
signature positions, walking position subsets and replacement tuples in a
fixed canonical order, so the probe schedule is data-independent.

The table keeps every bucket padded to ``pad_size`` records and a
public-size overflow region; the refresh pass reassigns every record by a
recomputed signature using two oblivious sorts and a branch-free capacity
scan, with a trace that depends only on the flattened entry count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations, product
from typing import Optional

import numpy as np

from .oblivious import obl_max3_in_window, obl_sort_block
from .records import NeuronBlock
from .trace import Kind, TraceRecorder


@dataclass
class LshConfig:
    k: int
    m: int
    pad_size: int
    r: int = 3
    n_perturb: Optional[int] = None
    rebuild_period: int = 0

    def __post_init__(self) -> None:
        if self.n_perturb is None:
            self.n_perturb = min(3, self.k)
        if not (2 <= self.r <= self.m):
            raise ValueError("fallback depth r must satisfy 2 <= r <= m")
        if not (1 <= self.n_perturb <= self.k):
            raise ValueError("n_perturb must satisfy 1 <= n <= k")
        if self.pad_size < 1:
            raise ValueError("pad_size must be positive")

    @property
    def num_buckets(self) -> int:
        return self.m ** self.k

    @property
    def len_seq(self) -> int:
        return len_seq(self.k, self.r, self.n_perturb)


def len_seq(k: int, r: int = 3, n_perturb: int = 3) -> int:
    """Probe-sequence length: 1 + sum_{i=1..N} C(K,i) * (r-1)^i."""
    return 1 + sum(math.comb(k, i) * (r - 1) ** i for i in range(1, n_perturb + 1))


@dataclass(frozen=True)
class WtaHashFn:
    """One hash function: a window of M distinct feature indices."""

    sampled_order: np.ndarray  # int64, length M

    def __post_init__(self) -> None:
        if len(np.unique(self.sampled_order)) != len(self.sampled_order):
            raise ValueError("sampled indices must be distinct")


def make_hash_fns(k: int, m: int, dim: int, seed: int) -> list[WtaHashFn]:
    """K windows, each the M-prefix of an independent random permutation."""
    if m > dim:
        raise ValueError("window size exceeds feature dimension")
    rng = np.random.default_rng(seed)
    return [
        WtaHashFn(np.asarray(rng.permutation(dim)[:m], dtype=np.int64))
        for _ in range(k)
    ]


def wta_signature_top3(
    q: np.ndarray, fns: list[WtaHashFn], rec: Optional[TraceRecorder] = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First/second/third-maximum window positions per hash function.

    Fixed M-step scan per function; ties resolve to the earlier sampled
    position, so the trace is independent of the vector's values.
    """
    k = len(fns)
    h = np.zeros(k, dtype=np.int64)
    h2 = np.zeros(k, dtype=np.int64)
    h3 = np.zeros(k, dtype=np.int64)
    for i, fn in enumerate(fns):
        window = np.asarray(q)[fn.sampled_order]
        h[i], h2[i], h3[i] = obl_max3_in_window(window, rec=rec, obj=f"WTA.{i}")
    return h, h2, h3


def wta_top3_block(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized top-3 scan over rows; same update rule as the scalar op."""
    n, m = values.shape
    neg = np.float64(-np.inf)
    b1v = np.full(n, neg)
    b2v = np.full(n, neg)
    b3v = np.full(n, neg)
    b1 = np.zeros(n, dtype=np.int64)
    b2 = np.zeros(n, dtype=np.int64)
    b3 = np.zeros(n, dtype=np.int64)
    for j in range(m):
        v = values[:, j].astype(np.float64)
        g1 = v > b1v
        g2 = v > b2v
        g3 = v > b3v
        n3 = np.where(g1, b2, np.where(g2, b2, np.where(g3, j, b3)))
        n3v = np.where(g1, b2v, np.where(g2, b2v, np.where(g3, v, b3v)))
        n2 = np.where(g1, b1, np.where(g2, j, b2))
        n2v = np.where(g1, b1v, np.where(g2, v, b2v))
        b1 = np.where(g1, j, b1)
        b1v = np.where(g1, v, b1v)
        b2, b2v, b3, b3v = n2, n2v, n3, n3v
    return b1, b2, b3


def encode_bucket(sig: np.ndarray, cfg: LshConfig) -> int:
    """Mixed-radix signature encoding: sum sig[i] * M^i, bijective."""
    val = 0
    for i in range(len(sig) - 1, -1, -1):
        val = val * cfg.m + int(sig[i])
    return val


def encode_bucket_block(sigs: np.ndarray, cfg: LshConfig) -> np.ndarray:
    out = np.zeros(sigs.shape[0], dtype=np.int64)
    for i in range(sigs.shape[1] - 1, -1, -1):
        out = out * cfg.m + sigs[:, i]
    return out


def perturbation_schedule(
    k: int, n_perturb: int, r: int = 3
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Fixed (positions, ranks) pairs: subsets lexicographic by position
    tuple, replacement ranks lexicographic over {2..r}^|S|."""
    sched = []
    for n in range(1, n_perturb + 1):
        for subset in combinations(range(k), n):
            for ranks in product(range(2, r + 1), repeat=n):
                sched.append((subset, ranks))
    return sched


def mp_wta_probes(
    q: np.ndarray, fns: list[WtaHashFn], cfg: LshConfig,
    rec: Optional[TraceRecorder] = None,
) -> np.ndarray:
    """Bucket ids to probe, unperturbed signature first.

    Length equals the closed-form sequence length; which positions are
    replaced at which index is fixed by (K, r, n_perturb) alone.
    """
    h, h2, h3 = wta_signature_top3(q, fns, rec=rec)
    probes = [encode_bucket(h, cfg)]
    alt = {2: h2, 3: h3}
    for subset, ranks in perturbation_schedule(cfg.k, cfg.n_perturb, cfg.r):
        sig = h.copy()
        for pos, rk in zip(subset, ranks):
            sig[pos] = alt[rk][pos]
        probes.append(encode_bucket(sig, cfg))
    out = np.asarray(probes, dtype=np.int64)
    if len(out) != cfg.len_seq:
        raise AssertionError("probe schedule length mismatch")
    return out


def pairwise_order(x: np.ndarray, y: np.ndarray) -> int:
    """Count of feature pairs on which two vectors agree in order.

    Testing oracle only (quadratic, not oblivious).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("pairwise_order: length mismatch")
    dx = x[:, None] - x[None, :]
    dy = y[:, None] - y[None, :]
    agree = (dx * dy) > 0
    return int(np.sum(np.tril(agree, k=-1)))


def pairwise_order_signs(xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-vector positive/negative pair-order indicator matrices.

    ``PO(x, y) == P[x] @ P[y] + N[x] @ N[y]`` where P/N mark the strictly
    increasing/decreasing pairs; used to batch pairwise-order lookups.
    """
    n, d = xs.shape
    iu, ju = np.tril_indices(d, k=-1)
    diff = xs[:, iu] - xs[:, ju]
    pos = (diff > 0).astype(np.float32)
    neg = (diff < 0).astype(np.float32)
    return pos, neg


# ---------------------------------------------------------------------
# Padded LSH table and oblivious refresh
# ---------------------------------------------------------------------


class LshTable:
    """``num_buckets`` buckets of exactly ``pad_size`` neuron slots plus a
    same-size overflow region; every slot always holds a record."""

    def __init__(self, cfg: LshConfig, dim: int, lanes: int) -> None:
        self.cfg = cfg
        self.dim = dim
        self.lanes = lanes
        n_main = cfg.num_buckets * cfg.pad_size
        self.main = NeuronBlock(n_main, dim, lanes)
        self.overflow = NeuronBlock(n_main, dim, lanes)
        self.overflow_real_count = 0
        self._initialized = False

    @property
    def n_main(self) -> int:
        return self.cfg.num_buckets * self.cfg.pad_size

    def bucket_rows(self, b: int) -> slice:
        p = self.cfg.pad_size
        return slice(b * p, (b + 1) * p)

    def real_rows(self) -> tuple[NeuronBlock, np.ndarray]:
        """All non-dummy records (main then overflow) with their ids."""
        blk = NeuronBlock.concat([self.main, self.overflow])
        mask = blk.is_dummy == 0
        rows = np.nonzero(mask)[0]
        return blk.gather(rows), blk.ids[rows]


def _refresh_signatures(
    block: NeuronBlock, fns: list[WtaHashFn], cfg: LshConfig,
    rec: Optional[TraceRecorder],
) -> np.ndarray:
    sigs = np.zeros((block.n, len(fns)), dtype=np.int64)
    for i, fn in enumerate(fns):
        vals = block.weights[:, fn.sampled_order]
        p1, _, _ = wta_top3_block(vals)
        sigs[:, i] = p1
        if rec is not None:
            rec.run(Kind.CMPSET, f"Refresh.wta.{i}", 0, block.n * cfg.m)
    return encode_bucket_block(sigs, cfg)


def enforce_capacity(
    sorted_ids: np.ndarray, pad_size: int, rec: Optional[TraceRecorder] = None,
    obj: str = "Refresh.cap",
) -> np.ndarray:
    """Overflow flags for an array already grouped by bucket id.

    Single forward scan with a bucket-local counter that resets on bucket
    change; positions beyond ``pad_size`` within their bucket are flagged.
    Branch-free: the scan shape depends only on the array length.
    """
    n = len(sorted_ids)
    if rec is not None:
        rec.run(Kind.CMPSET, obj, 0, n)
    if n == 0:
        return np.zeros(0, dtype=np.uint8)
    idx = np.arange(n, dtype=np.int64)
    change = np.ones(n, dtype=bool)
    change[1:] = sorted_ids[1:] != sorted_ids[:-1]
    group_start = np.maximum.accumulate(np.where(change, idx, 0))
    local = idx - group_start
    return (local >= pad_size).astype(np.uint8)


def refresh(
    table: LshTable, fns: list[WtaHashFn],
    rec: Optional[TraceRecorder] = None,
    init_reals: Optional[NeuronBlock] = None,
) -> None:
    """Recompute every record's bucket and rebuild main + overflow regions.

    On the initial call ``init_reals`` supplies the freshly initialized
    real neurons; the fixed dummy reservoir (pad_size dummies per target
    bucket, plus overflow filler) is created once and reused by every
    later refresh, so each bucket is always backfilled to exactly
    ``pad_size`` slots.  The trace is a function of the flattened entry
    count and the configuration only.
    """
    cfg = table.cfg
    is_init = init_reals is not None
    if rec is not None:
        rec.phase("refresh", 0)
    if is_init:
        if table._initialized:
            raise ValueError("table already initialized")
        n_real = init_reals.n
        if n_real > table.n_main:
            raise ValueError("more real neurons than main-region slots")
        reservoir = NeuronBlock(table.n_main, table.dim, table.lanes)
        reservoir.ids[:] = _dummy_sentinel(init_reals)
        reservoir.target[:] = np.arange(table.n_main) // cfg.pad_size
        blk = NeuronBlock.concat([init_reals, reservoir])
    else:
        if not table._initialized:
            raise ValueError("refresh before initialization")
        blk = NeuronBlock.concat([table.main, table.overflow])

    new_id = _refresh_signatures(blk, fns, cfg, rec)
    # Dummies keep their public reservoir targets; reals use the fresh hash.
    dummy = blk.is_dummy.astype(bool)
    new_id = np.where(dummy, blk.target, new_id)
    if rec is not None:
        rec.run(Kind.CMPSET, "Refresh.newid", 0, blk.n)

    keycols = [new_id, blk.is_dummy.astype(np.int64), blk.ids]
    order_fields = [new_id]
    obl_sort_block(
        blk.n, keycols, rec=rec, obj="Refresh.sort1",
        fields=order_fields, blocks=[(blk, 1)],
    )
    over = enforce_capacity(new_id, cfg.pad_size, rec=rec)
    obl_sort_block(
        blk.n,
        [over.astype(np.int64), new_id, blk.is_dummy.astype(np.int64), blk.ids],
        rec=rec, obj="Refresh.sort2",
        fields=[new_id, over], blocks=[(blk, 1)],
    )

    n_main = table.n_main
    rows_main = np.arange(n_main)
    table.main.set_rows(rows_main, blk, rows_main)
    n_over = blk.n - n_main
    if is_init:
        # First construction: park the displaced entries, then fill the
        # rest of the overflow region with fresh reservoir dummies.
        table.overflow = NeuronBlock(n_main, table.dim, table.lanes)
        table.overflow.ids[:] = _dummy_sentinel(blk)
        table.overflow.target[:] = np.arange(n_main) % cfg.num_buckets
        if n_over > 0:
            table.overflow.set_rows(
                np.arange(n_over), blk, np.arange(n_main, blk.n)
            )
        table._initialized = True
    else:
        table.overflow.set_rows(np.arange(n_over), blk, np.arange(n_main, blk.n))
    if rec is not None:
        rec.event(Kind.WRITE, "LSH", 0, n_main)
        rec.event(Kind.WRITE, "LSH.overflow", 0, table.overflow.n)
        rec.phase("refresh", 1)
    # No recovery semantics exist for a real neuron displaced to overflow;
    # count and surface the condition.
    table.overflow_real_count = int(np.sum(table.overflow.is_dummy == 0))


def _dummy_sentinel(blk: NeuronBlock) -> int:
    # One past the largest real label id present; engine always uses C.
    reals = blk.ids[blk.is_dummy == 0]
    return int(reals.max()) + 1 if len(reals) else 0
