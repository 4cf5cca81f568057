"""Branch-free primitives and the fixed-schedule oblivious sort.

Every primitive here has a control flow and an emitted trace that depend
only on public shape parameters (operand count, buffer length, record
layout), never on operand values or predicate outcomes.  Predicates are
plain 0/1 integers produced by ``obl_compare``/``obl_gt`` and are only
ever consumed by the ``obl_choose`` family -- they are never branched on.

Selection is implemented with bit-mask / index arithmetic at the source
level; the trace-equality tests are the executable check that no
data-dependent structure leaks through.

The sort is an iterative bitonic network.  Its compare-exchange schedule
is a pure function of the element count ``n``: non-power-of-two counts
split as ``n = m + (n - m)`` with ``m`` the largest power of two below
``n``, sort the first part in reverse, recurse on the remainder, and
finish with a bitonic merge.
"""

from __future__ import annotations

import math
import struct
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .records import RECORD_LAYOUT, NeuronBlock, NeuronRecord
from .trace import Kind, TraceRecorder

# Chunk cascade for block selection, largest first down to one byte.
_CHUNKS = (32, 16, 8, 4, 2, 1)


# ---------------------------------------------------------------------
# Scalar predicates and selection
# ---------------------------------------------------------------------


def float_order_key(x: float) -> int:
    """Map a float to an integer preserving the IEEE total order.

    Sign-flip trick on the raw bit pattern: negative values have their
    bits inverted, positive values get the sign bit set.  This makes
    -0.0 < +0.0 and gives NaN a fixed position, so comparisons are
    deterministic for every bit pattern.
    """
    (bits,) = struct.unpack("<Q", struct.pack("<d", float(x)))
    if bits & (1 << 63):
        return (~bits) & ((1 << 64) - 1)
    return bits | (1 << 63)


def _ord(x) -> int:
    if isinstance(x, (float, np.floating)):
        return float_order_key(float(x))
    return int(x)


def obl_compare(a, b, rec: Optional[TraceRecorder] = None,
                obj: str = "scalar", offset: int = 0) -> int:
    """Equality predicate: 1 iff a == b; emits exactly one CmpSet event."""
    pred = int((_ord(a) ^ _ord(b)) == 0)
    if rec is not None:
        rec.event(Kind.CMPSET, obj, offset, 1)
    return pred


def obl_gt(a, b, rec: Optional[TraceRecorder] = None,
           obj: str = "scalar", offset: int = 0) -> int:
    """Strict greater-than predicate under the fixed total order."""
    pred = int(_ord(a) > _ord(b))
    if rec is not None:
        rec.event(Kind.CMPSET, obj, offset, 1)
    return pred


def obl_choose(pred: int, v1, v0, rec: Optional[TraceRecorder] = None,
               obj: str = "scalar", offset: int = 0):
    """Return v1 if pred == 1 else v0, by bit-mask selection."""
    if rec is not None:
        rec.event(Kind.CMPSET, obj, offset, 1)
    return _select(pred, v1, v0)


def _select(pred: int, v1, v0):
    if isinstance(v1, (float, np.floating)) or isinstance(v0, (float, np.floating)):
        b1 = struct.unpack("<Q", struct.pack("<d", float(v1)))[0]
        b0 = struct.unpack("<Q", struct.pack("<d", float(v0)))[0]
        mask = -int(pred) & ((1 << 64) - 1)
        bits = (b1 & mask) | (b0 & ~mask & ((1 << 64) - 1))
        return struct.unpack("<d", struct.pack("<Q", bits))[0]
    mask = -int(pred)
    return (int(v1) & mask) | (int(v0) & ~mask)


def chunk_schedule(n: int) -> list[int]:
    """Fixed chunk decomposition of an n-byte block copy."""
    out = []
    k = 0
    while k + _CHUNKS[0] <= n:
        out.append(_CHUNKS[0])
        k += _CHUNKS[0]
    for c in _CHUNKS[1:]:
        if k + c <= n:
            out.append(c)
            k += c
    return out


def obl_choose_block(pred: int, n: int, t_buf, f_buf, dst,
                     rec: Optional[TraceRecorder] = None,
                     obj: str = "block", offset: int = 0) -> None:
    """dst := pred ? t_buf : f_buf over n bytes, chunk by fixed chunk.

    All three buffers must have length n; the chunk decomposition (and
    therefore the trace) depends only on n.
    """
    t = np.frombuffer(bytes(t_buf), dtype=np.uint8)
    f = np.frombuffer(bytes(f_buf), dtype=np.uint8)
    if len(t) != n or len(f) != n or len(dst) != n:
        raise ValueError("obl_choose_block: buffer length mismatch")
    mask = np.uint8(0xFF if pred else 0x00)
    is_arr = isinstance(dst, np.ndarray)
    k = 0
    for c in chunk_schedule(n):
        sel = (t[k:k + c] & mask) | (f[k:k + c] & ~mask)
        if is_arr:
            dst[k:k + c] = sel
        else:
            dst[k:k + c] = sel.tobytes()
        if rec is not None:
            rec.event(Kind.CMPSET, obj, offset + k, c)
        k += c


def obl_copy_record(pred: int, src: NeuronRecord, dst: NeuronRecord,
                    rec: Optional[TraceRecorder] = None,
                    obj: str = "record", offset: int = 0) -> None:
    """Conditional structural copy, fields walked in fixed public order.

    One conditional-set event per scalar field and one per array field,
    emitted whether or not pred selects the source (pred = 0 performs
    the self-assignment writes).
    """
    for name, kind in RECORD_LAYOUT:
        s = getattr(src, name)
        d = getattr(dst, name)
        if kind == "scalar":
            setattr(dst, name, _select(pred, s, d))
            if rec is not None:
                rec.event(Kind.CMPSET, obj, offset, 1)
        else:
            d[...] = np.where(bool(pred), s, d)
            if rec is not None:
                rec.event(Kind.CMPSET, obj, offset, len(d))


def obl_max3_in_window(values: Sequence[float],
                       rec: Optional[TraceRecorder] = None,
                       obj: str = "max3") -> tuple[int, int, int]:
    """Positions of the three largest values under a fixed M-step scan.

    Ties resolve to the earlier position in the scan order (strict
    greater-than never displaces an equal incumbent).  M must be >= 3.
    """
    m_len = len(values)
    if m_len < 3:
        raise ValueError("obl_max3_in_window: window must hold at least 3 values")
    neg = -math.inf
    b1v = b2v = b3v = neg
    b1 = b2 = b3 = 0
    for j in range(m_len):
        v = float(values[j])
        g1 = obl_gt(v, b1v)
        g2 = obl_gt(v, b2v)
        g3 = obl_gt(v, b3v)
        n3 = _select(g1, b2, _select(g2, b2, _select(g3, j, b3)))
        n3v = _select(g1, b2v, _select(g2, b2v, _select(g3, v, b3v)))
        n2 = _select(g1, b1, _select(g2, j, b2))
        n2v = _select(g1, b1v, _select(g2, v, b2v))
        b1 = _select(g1, j, b1)
        b1v = _select(g1, v, b1v)
        b2, b2v, b3, b3v = n2, n2v, n3, n3v
        if rec is not None:
            rec.event(Kind.CMPSET, obj, j, 1)
    return b1, b2, b3


# ---------------------------------------------------------------------
# Bitonic sort schedule
# ---------------------------------------------------------------------


def _grt_pow2_lt(n: int) -> int:
    p = 1
    while (p << 1) < n:
        p <<= 1
    return p


def _iter_pow2_stages(lo: int, n: int, asc: bool) -> list:
    stages = []
    i_all = np.arange(n, dtype=np.int64)
    k = 2
    while k <= n:
        j = k >> 1
        while j >= 1:
            partner = i_all ^ j
            m = partner > i_all
            lows = i_all[m]
            highs = partner[m]
            desc = (lows & k) != 0
            if not asc:
                desc = ~desc
            stages.append((lows + lo, highs + lo, desc))
            j >>= 1
        k <<= 1
    return stages


def _zip_stages(a: list, b: list) -> list:
    # Stages from disjoint index ranges at the same depth combine into one.
    out = []
    for i in range(max(len(a), len(b))):
        parts = []
        if i < len(a):
            parts.append(a[i])
        if i < len(b):
            parts.append(b[i])
        if len(parts) == 1:
            out.append(parts[0])
        else:
            out.append(tuple(np.concatenate([p[k] for p in parts]) for k in range(3)))
    return out


def _merge_stages(lo: int, n: int, asc: bool) -> list:
    if n <= 1:
        return []
    m = _grt_pow2_lt(n)
    cnt = n - m
    i = np.arange(cnt, dtype=np.int64)
    first = (i + lo, i + lo + m, np.full(cnt, not asc))
    sub = _zip_stages(_merge_stages(lo, m, asc), _merge_stages(lo + m, n - m, asc))
    return [first] + sub


def _sort_stages(lo: int, n: int, asc: bool) -> list:
    if n <= 1:
        return []
    if n & (n - 1) == 0:
        return _iter_pow2_stages(lo, n, asc)
    m = _grt_pow2_lt(n)
    head = _zip_stages(
        _iter_pow2_stages(lo, m, not asc),
        _sort_stages(lo + m, n - m, asc),
    )
    return head + _merge_stages(lo, n, asc)


@lru_cache(maxsize=None)
def bitonic_schedule(n: int) -> tuple:
    """Compare-exchange schedule for an ascending sort of n elements.

    Returns a tuple of stages ``(lows, highs, descending)``; pairs within
    one stage are disjoint.  A pure function of n.
    """
    stages = _sort_stages(0, int(n), True)
    for lows, highs, desc in stages:
        lows.setflags(write=False)
        highs.setflags(write=False)
        desc.setflags(write=False)
    return tuple(stages)


def exchange_count(n: int) -> int:
    return sum(len(s[0]) for s in bitonic_schedule(n))


def _emit_stages(rec: Optional[TraceRecorder], obj: str, stages) -> None:
    if rec is None:
        return
    for lows, highs, _ in stages:
        rec.stage(Kind.SORTEX, obj, lows, highs - lows)


def obl_sort(records: list, key: Callable, rec: Optional[TraceRecorder] = None,
             obj: str = "sort") -> None:
    """In-place ascending sort of a Python list by tuple key.

    One SortExchange event per compare-exchange; the schedule depends
    only on len(records).  Not stable.
    """
    n = len(records)
    for lows, highs, desc in bitonic_schedule(n):
        for lo, hi, d in zip(lows.tolist(), highs.tolist(), desc.tolist()):
            ka = _key_tuple(key(records[lo]))
            kb = _key_tuple(key(records[hi]))
            s = int(kb > ka) if d else int(ka > kb)
            pair = (records[lo], records[hi])
            records[lo] = pair[s]
            records[hi] = pair[1 - s]
            if rec is not None:
                rec.event(Kind.SORTEX, obj, lo, hi - lo)


def _key_tuple(k) -> tuple:
    if not isinstance(k, tuple):
        k = (k,)
    return tuple(_ord(x) for x in k)


def _lex_swap(cols: list[np.ndarray], lows: np.ndarray, highs: np.ndarray,
              desc: np.ndarray) -> np.ndarray:
    gt = np.zeros(len(lows), dtype=bool)
    lt = np.zeros(len(lows), dtype=bool)
    eq = np.ones(len(lows), dtype=bool)
    for c in cols:
        a = c[lows]
        b = c[highs]
        gt |= eq & (a > b)
        lt |= eq & (a < b)
        eq &= a == b
    return np.where(desc, lt, gt)


def obl_sort_block(n: int, key_cols: Sequence[np.ndarray],
                   rec: Optional[TraceRecorder] = None, obj: str = "sort",
                   fields: Sequence[np.ndarray] = (),
                   blocks: Sequence[tuple[NeuronBlock, int]] = ()) -> np.ndarray:
    """Vectorized network sort over integer key columns (lexicographic).

    The key columns and the entry permutation are driven through the
    exact exchange schedule stage by stage; attached field arrays and
    payload blocks receive the resulting permutation in one application.
    The emitted trace is the per-exchange schedule, identical to the
    record-at-a-time form.  Returns the permutation (old index of the
    entry now at each position).
    """
    stages = bitonic_schedule(n)
    _emit_stages(rec, obj, stages)
    perm = np.arange(n, dtype=np.int64)
    if n > 1:
        cols = [np.asarray(c, dtype=np.int64).copy() for c in key_cols]
        for lows, highs, desc in stages:
            swap = _lex_swap(cols, lows, highs, desc)
            if swap.any():
                l = lows[swap]
                h = highs[swap]
                for c in cols:
                    tmp = c[l].copy()
                    c[l] = c[h]
                    c[h] = tmp
                tmp = perm[l].copy()
                perm[l] = perm[h]
                perm[h] = tmp
    for f in fields:
        f[...] = f[perm]
    for blk, rows_per in blocks:
        blk.permute_entries(perm, rows_per)
    return perm
