"""Oblivious two-tier hash table keyed by LSH bucket id.

Construction is sort-based: requests routed by the tier-1 hash are padded
with per-bin fillers, a branch-free capacity scan marks per-bin excess,
and a second sort packs exactly ``bin_cap`` slots per bin; tier-1 excess
re-routes through the same procedure under the tier-2 hash.  Both hash
functions are fixed by public seeds before any data is seen and there are
no data-dependent retries, so build and extract traces depend only on
(T, num_bins, bin_cap).

A request entry that cannot be placed violates the public capacity
contract and raises ``CapacityError`` -- the sizing must make that
impossible for the workload.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .oblivious import obl_sort_block
from .records import NeuronBlock, RequestBlock
from .trace import Kind, TraceRecorder

_P61 = (1 << 61) - 1


class CapacityError(Exception):
    """A non-dummy request could not be placed within the bin capacities."""


@dataclass(frozen=True)
class OhtConfig:
    num_bins: int
    bin_cap: int
    seed1: int = 101
    seed2: int = 202

    @classmethod
    def derive(cls, n_requests: int, batch_size: int,
               seed1: int = 101, seed2: int = 202) -> "OhtConfig":
        """Default sizing for a request array of ``n_requests`` entries.

        One bucket can appear up to ``batch_size`` times (once per input),
        so the bin capacity covers a fully duplicated bucket plus slack on
        top of the usual load bound.
        """
        num_bins = 1 << max(int(n_requests) - 1, 0).bit_length()
        num_bins = max(num_bins, 2)
        load = -(-3 * n_requests // num_bins)
        bin_cap = max(4, load + 4, min(batch_size, n_requests) + 4)
        return cls(num_bins=num_bins, bin_cap=bin_cap, seed1=seed1, seed2=seed2)

    @property
    def slots_per_tier(self) -> int:
        return self.num_bins * self.bin_cap

    def _hash_params(self, tier: int) -> tuple[int, int]:
        rng = np.random.default_rng(self.seed1 if tier == 0 else self.seed2)
        a = int(rng.integers(1, 1 << 31))
        c = int(rng.integers(0, 1 << 31))
        return a, c

    def bin_of(self, buckets: np.ndarray, tier: int) -> np.ndarray:
        a, c = self._hash_params(tier)
        x = np.asarray(buckets, dtype=np.int64)
        return ((a * x + c) % _P61) % self.num_bins


def bins_for(bucket: int, cfg: OhtConfig) -> tuple[int, int]:
    """Tier-1 / tier-2 bin pair for one bucket id (public map)."""
    b = np.asarray([bucket], dtype=np.int64)
    return int(cfg.bin_of(b, 0)[0]), int(cfg.bin_of(b, 1)[0])


@dataclass
class BinScheduler:
    """Per-tier bin -> bucket lists plus a contiguous per-worker partition.

    Derived only from (num_lsh_buckets, the tier hashes, worker count);
    no bin belongs to two workers.
    """

    cfg: OhtConfig
    num_lsh_buckets: int
    workers: int
    regions: list[tuple[int, int]]
    by_tier: list[dict[int, np.ndarray]]

    def assignments(self, worker: int, tier: int) -> list[tuple[int, np.ndarray]]:
        lo, hi = self.regions[worker]
        out = []
        for b in range(lo, hi):
            buckets = self.by_tier[tier].get(b)
            if buckets is not None:
                out.append((b, buckets))
        return out


def build_scheduler(cfg: OhtConfig, num_lsh_buckets: int, workers: int) -> BinScheduler:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    bounds = np.linspace(0, cfg.num_bins, workers + 1).astype(int)
    regions = [(int(bounds[w]), int(bounds[w + 1])) for w in range(workers)]
    by_tier = []
    all_buckets = np.arange(num_lsh_buckets, dtype=np.int64)
    for tier in (0, 1):
        bins = cfg.bin_of(all_buckets, tier)
        table: dict[int, np.ndarray] = {}
        for b in range(cfg.num_bins):
            members = all_buckets[bins == b]
            if len(members):
                table[b] = members
        by_tier.append(table)
    return BinScheduler(cfg, num_lsh_buckets, workers, regions, by_tier)


class TierTable:
    """One tier: num_bins * bin_cap entry slots, every slot populated."""

    def __init__(self, cfg: OhtConfig, pad: int, dim: int, lanes: int) -> None:
        n = cfg.slots_per_tier
        self.bucket = np.full(n, -1, dtype=np.int64)
        self.rank = np.zeros(n, dtype=np.int64)
        self.is_dummy = np.ones(n, dtype=np.uint8)
        self.slot_tag = np.zeros(n, dtype=np.int64)
        self.buffers = NeuronBlock(n * pad, dim, lanes)
        self.pad = pad

    def slot_rows(self, s: int) -> slice:
        return slice(s * self.pad, (s + 1) * self.pad)


@dataclass
class Oht:
    cfg: OhtConfig
    pad: int
    n_requests: int
    tiers: list[TierTable]


@dataclass
class LayoutRecord:
    """Slot assignment of a build, carried for the write-back rebuild.

    Entries keep their flat slot in ``slot_tag``; the stash holds the
    slots that extraction dropped, so entries + stash cover every slot
    exactly once and one oblivious sort restores the full table.
    """

    cfg: OhtConfig
    pad: int
    n_requests: int
    stash_bucket: np.ndarray
    stash_rank: np.ndarray
    stash_dummy: np.ndarray
    stash_slot: np.ndarray
    stash_buffers: NeuronBlock


def _route_round(
    cfg: OhtConfig,
    bucket: np.ndarray, rank: np.ndarray, is_dummy: np.ndarray,
    is_filler: np.ndarray, key_bin: np.ndarray,
    buffers: Optional[NeuronBlock], pad: int, dim: int, lanes: int,
    rec: Optional[TraceRecorder], obj: str,
):
    """One sort-route-pack round; returns (table arrays, leftover arrays)."""
    n_in = len(bucket)
    n_fill = cfg.slots_per_tier
    fill_bin = np.arange(n_fill, dtype=np.int64) // cfg.bin_cap

    w_bucket = np.concatenate([bucket, np.full(n_fill, -1, np.int64)])
    w_rank = np.concatenate([rank, np.zeros(n_fill, np.int64)])
    w_dummy = np.concatenate([is_dummy, np.ones(n_fill, np.uint8)])
    w_filler = np.concatenate([is_filler, np.ones(n_fill, np.uint8)])
    w_bin = np.concatenate([key_bin, fill_bin])

    n = n_in + n_fill
    fields = [w_bucket, w_rank, w_dummy, w_filler, w_bin]
    perm1 = obl_sort_block(
        n, [w_bin, w_filler.astype(np.int64)], rec=rec, obj=f"{obj}.group",
        fields=fields,
    )
    # Branch-free per-bin position scan; keep the first bin_cap of each bin.
    idx = np.arange(n, dtype=np.int64)
    change = np.ones(n, dtype=bool)
    change[1:] = w_bin[1:] != w_bin[:-1]
    local = idx - np.maximum.accumulate(np.where(change, idx, 0))
    over = (local >= cfg.bin_cap).astype(np.int64)
    if rec is not None:
        rec.run(Kind.CMPSET, f"{obj}.cap", 0, n)
    perm2 = obl_sort_block(
        n, [over, w_bin, w_filler.astype(np.int64)], rec=rec, obj=f"{obj}.pack",
        fields=fields + [over],
    )
    k = cfg.slots_per_tier
    if buffers is None:
        buf_table = buf_rest = None
    else:
        # Compose both sort permutations and fetch payload rows once;
        # rows past the input belong to the all-dummy fillers.
        comb = perm1[perm2]
        row_perm = (comb[:, None] * pad + np.arange(pad)).ravel()
        w_buf = NeuronBlock.concat([buffers, NeuronBlock(n_fill * pad, dim, lanes)])
        buf_table = w_buf.gather(row_perm[:k * pad])
        buf_rest = w_buf.gather(row_perm[k * pad:])
    table = (w_bucket[:k], w_rank[:k], w_dummy[:k], w_filler[:k], buf_table)
    rest = (w_bucket[k:], w_rank[k:], w_dummy[k:], w_filler[k:], buf_rest)
    return table, rest


def build(
    req: RequestBlock, cfg: OhtConfig, defer_payload: bool,
    dummy_id: int, rec: Optional[TraceRecorder] = None,
) -> Oht:
    """Place the request entries into two tiers of fixed-capacity bins.

    With ``defer_payload`` the routing sorts move only the light entry
    fields and every slot's neuron buffer is instantiated with dummies
    after placement (valid whenever the buffers hold only dummies, i.e.
    the read path).  The trace depends only on (T, num_bins, bin_cap).
    """
    dim, lanes = req.buffers.dim, req.buffers.lanes
    pad = req.pad
    payload = None if defer_payload else req.buffers
    t1, rest = _route_round(
        cfg, req.bucket, req.rank, req.is_dummy.astype(np.uint8),
        np.zeros(req.n, np.uint8), cfg.bin_of(req.bucket, 0),
        payload, pad, dim, lanes, rec, "OHT.t1",
    )
    # Spent fillers re-route past the last real bin so they sort behind
    # every packed group and can never enter the tier-2 table.
    r_bucket, r_rank, r_dummy, r_filler, r_buf = rest
    r_bin = np.where(
        r_filler.astype(bool), np.int64(cfg.num_bins), cfg.bin_of(r_bucket, 1)
    )
    t2, rest2 = _route_round(
        cfg, r_bucket, r_rank, r_dummy, r_filler, r_bin,
        r_buf, pad, dim, lanes, rec, "OHT.t2",
    )
    lost = (rest2[3] == 0) & (rest2[2] == 0)
    if np.any(lost):
        raise CapacityError(
            f"{int(lost.sum())} request entries exceeded the OHT capacity "
            f"contract (num_bins={cfg.num_bins}, bin_cap={cfg.bin_cap})"
        )

    oht = Oht(cfg=cfg, pad=pad, n_requests=req.n,
              tiers=[TierTable(cfg, pad, dim, lanes) for _ in range(2)])
    k = cfg.slots_per_tier
    for tier_idx, src in ((0, t1), (1, t2)):
        tt = oht.tiers[tier_idx]
        s_bucket, s_rank, s_dummy, s_filler, s_buf = src
        tt.bucket[:] = np.where(s_filler.astype(bool), -1, s_bucket)
        tt.rank[:] = s_rank
        tt.is_dummy[:] = np.maximum(s_dummy, s_filler)
        tt.slot_tag[:] = np.arange(k) + tier_idx * k
        if s_buf is not None:
            tt.buffers = s_buf
        else:
            tt.buffers.ids[:] = dummy_id
            tt.buffers.is_dummy[:] = 1
    return oht


def extract(
    oht: Oht, n_requests: int, rec: Optional[TraceRecorder] = None,
) -> tuple[RequestBlock, LayoutRecord]:
    """Flatten both tiers, sort non-dummy entries first grouped by batch
    rank, and return the first T entries as the restored request array.

    The remaining slots form the layout stash used by the write-back
    rebuild.  The trace depends only on (T, num_bins, bin_cap).
    """
    t1, t2 = oht.tiers
    pad = oht.pad
    dim, lanes = t1.buffers.dim, t1.buffers.lanes
    bucket = np.concatenate([t1.bucket, t2.bucket])
    rank = np.concatenate([t1.rank, t2.rank])
    dummy = np.concatenate([t1.is_dummy, t2.is_dummy])
    slot = np.concatenate([t1.slot_tag, t2.slot_tag])
    buffers = NeuronBlock.concat([t1.buffers, t2.buffers])
    n = len(bucket)
    fields = [bucket, rank, dummy, slot]
    # Light fields ride the network; payload rows are gathered straight
    # into their destinations through the resulting permutation.
    perm = obl_sort_block(
        n, [dummy.astype(np.int64), rank], rec=rec, obj="OHT.extract",
        fields=fields,
    )
    row_perm = (perm[:, None] * pad + np.arange(pad)).ravel()
    out = RequestBlock(n_requests, pad, dim, lanes)
    out.bucket[:] = bucket[:n_requests]
    out.rank[:] = rank[:n_requests]
    out.is_dummy[:] = dummy[:n_requests]
    out.slot_tag[:] = slot[:n_requests]
    out.buffers.set_rows(
        np.arange(n_requests * pad), buffers, row_perm[:n_requests * pad]
    )
    rest = np.arange(n_requests, n)
    layout = LayoutRecord(
        cfg=oht.cfg, pad=pad, n_requests=n_requests,
        stash_bucket=bucket[rest].copy(), stash_rank=rank[rest].copy(),
        stash_dummy=dummy[rest].copy(), stash_slot=slot[rest].copy(),
        stash_buffers=buffers.gather(row_perm[n_requests * pad:]),
    )
    return out, layout


def rebuild_from_layout(
    req: RequestBlock, layout: LayoutRecord,
    rec: Optional[TraceRecorder] = None,
) -> Oht:
    """Restore the build-time table with a single oblivious sort.

    Entries and stash together carry every flat slot exactly once, so
    sorting by the recorded slot id places each request at its previous
    (tier, bin, slot) position; the scheduler stays valid unchanged.
    """
    if req.n != layout.n_requests:
        raise ValueError("layout does not match the request array length")
    cfg, pad = layout.cfg, layout.pad
    dim, lanes = req.buffers.dim, req.buffers.lanes
    bucket = np.concatenate([req.bucket, layout.stash_bucket])
    rank = np.concatenate([req.rank, layout.stash_rank])
    dummy = np.concatenate([req.is_dummy.astype(np.uint8), layout.stash_dummy])
    slot = np.concatenate([req.slot_tag, layout.stash_slot])
    buffers = NeuronBlock.concat([req.buffers, layout.stash_buffers])
    n = len(bucket)
    perm = obl_sort_block(
        n, [slot], rec=rec, obj="OHT.rebuild",
        fields=[bucket, rank, dummy, slot],
    )
    row_perm = (perm[:, None] * pad + np.arange(pad)).ravel()
    oht = Oht(cfg=cfg, pad=pad, n_requests=req.n,
              tiers=[TierTable(cfg, pad, dim, lanes) for _ in range(2)])
    k = cfg.slots_per_tier
    for tier_idx in (0, 1):
        tt = oht.tiers[tier_idx]
        sl = slice(tier_idx * k, (tier_idx + 1) * k)
        tt.bucket[:] = bucket[sl]
        tt.rank[:] = rank[sl]
        tt.is_dummy[:] = dummy[sl]
        tt.slot_tag[:] = slot[sl]
        tt.buffers.set_rows(
            np.arange(k * pad), buffers,
            row_perm[tier_idx * k * pad:(tier_idx + 1) * k * pad],
        )
    return oht
