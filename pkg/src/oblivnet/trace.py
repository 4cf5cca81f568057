"""Canonical symbolic access-trace recording and comparison.

Every oblivious-relevant access in the pipeline is recorded as a symbolic
event (object label, element offset, element count, worker index).  Event
fields are functions of public parameters and public loop indices only;
no construction site may read model values, activations, labels, or
predicate outcomes.  Two runs with identical public parameters must
produce byte-identical canonical traces -- that equality is the
executable form of the access-pattern-independence claim.

Recording is a runtime mode: with a ``TraceRecorder`` of ``enabled=False``
(or ``None`` passed through the pipeline) every emission site is a no-op,
so production runs pay nothing.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, NamedTuple, Optional

import numpy as np

MAGIC = b"OTR1"

_ENC = "utf-8"


class Kind(IntEnum):
    READ = 0
    WRITE = 1
    CMPSET = 2
    SORTEX = 3
    PHASE = 4


class TraceEvent(NamedTuple):
    kind: int
    obj: str
    offset: int
    length: int
    worker: int


class TraceError(Exception):
    pass


@dataclass
class Divergence:
    """First point where two canonical traces disagree."""

    index: int
    left: Optional[TraceEvent]
    right: Optional[TraceEvent]

    def __str__(self) -> str:
        return (
            f"traces diverge at event {self.index}: "
            f"left={self.left!r} right={self.right!r}"
        )


# Internal segment encodings.  "ev" is a single event, "run" a run of
# unit-length events at offsets start..start+count-1, "arr" an explicit
# vector of (offset, length) pairs.  Arrays are stored by reference; they
# come from public schedules and are never mutated.
_EV, _RUN, _ARR = 0, 1, 2


class TraceLog:
    """Ordered symbolic trace with sequential and parallel sections."""

    def __init__(self) -> None:
        # section: ("seq", segments) or ("par", n_workers, [segments_w])
        self.sections: list = []
        self._open_par = None

    # -- construction ------------------------------------------------

    def _seq_segments(self) -> list:
        if self.sections and self.sections[-1][0] == "seq":
            return self.sections[-1][1]
        segs: list = []
        self.sections.append(("seq", segs))
        return segs

    def begin_parallel(self, n_workers: int) -> None:
        if self._open_par is not None:
            raise TraceError("nested parallel phases are not supported")
        worker_segs = [[] for _ in range(n_workers)]
        self._open_par = ("par", n_workers, worker_segs)
        self.sections.append(self._open_par)

    def end_parallel(self) -> None:
        if self._open_par is None:
            raise TraceError("no parallel phase open")
        self._open_par = None

    def worker_segments(self, w: int) -> list:
        if self._open_par is None:
            raise TraceError("worker emission outside a parallel phase")
        return self._open_par[2][w]

    # -- inspection --------------------------------------------------

    def events(self) -> Iterator[TraceEvent]:
        """Expand to individual events in canonical order."""
        if self._open_par is not None:
            raise TraceError("unclosed parallel phase")
        for sec in self.sections:
            if sec[0] == "seq":
                yield from _expand(sec[1], 0)
            else:
                _, n_workers, worker_segs = sec
                for w in range(n_workers):
                    yield from _expand(worker_segs[w], w)

    def __len__(self) -> int:
        return sum(1 for _ in self.events())


def _expand(segments: list, worker: int) -> Iterator[TraceEvent]:
    for seg in segments:
        tag = seg[0]
        if tag == _EV:
            _, kind, obj, off, ln = seg
            yield TraceEvent(kind, obj, off, ln, worker)
        elif tag == _RUN:
            _, kind, obj, start, count = seg
            for i in range(count):
                yield TraceEvent(kind, obj, start + i, 1, worker)
        else:
            _, kind, obj, offs, lens = seg
            for off, ln in zip(offs.tolist(), lens.tolist()):
                yield TraceEvent(kind, obj, off, ln, worker)


class TraceRecorder:
    """Emission front-end; a disabled recorder drops everything."""

    def __init__(self, enabled: bool = True) -> None:
        self.enabled = enabled
        self._log = TraceLog()
        self._worker_segs: Optional[list] = None

    @property
    def log(self) -> TraceLog:
        return self._log

    def _target(self) -> list:
        if self._worker_segs is not None:
            return self._worker_segs
        return self._log._seq_segments()

    def event(self, kind: int, obj: str, offset: int, length: int = 1) -> None:
        if not self.enabled:
            return
        self._target().append((_EV, int(kind), obj, int(offset), int(length)))

    def run(self, kind: int, obj: str, start: int, count: int) -> None:
        if not self.enabled or count <= 0:
            return
        self._target().append((_RUN, int(kind), obj, int(start), int(count)))

    def stage(self, kind: int, obj: str, offsets: np.ndarray, lengths: np.ndarray) -> None:
        if not self.enabled or len(offsets) == 0:
            return
        self._target().append((_ARR, int(kind), obj, offsets, lengths))

    def phase(self, name: str, mark: int) -> None:
        """Component delimiter; mark 0 = enter, 1 = exit."""
        self.event(Kind.PHASE, name, mark, 0)

    @contextmanager
    def phase_scope(self, name: str):
        self.phase(name, 0)
        try:
            yield
        finally:
            self.phase(name, 1)

    @contextmanager
    def parallel(self, n_workers: int):
        if not self.enabled:
            yield
            return
        self._log.begin_parallel(n_workers)
        try:
            yield
        finally:
            self._log.end_parallel()

    @contextmanager
    def worker(self, w: int):
        if not self.enabled:
            yield
            return
        prev = self._worker_segs
        self._worker_segs = self._log.worker_segments(w)
        try:
            yield
        finally:
            self._worker_segs = prev


# ---------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------
#
# One event serializes to:
#   u32 payload_len | u8 kind | u32 worker | u16 obj_len | obj utf-8
#   | i64 offset | i64 length
# all little-endian.  An empty log canonicalizes to the empty byte string.


def _event_dtype(obj_len: int) -> np.dtype:
    return np.dtype(
        {
            "names": ["plen", "kind", "worker", "olen", "obj", "offset", "length"],
            "formats": ["<u4", "u1", "<u4", "<u2", f"S{max(obj_len, 1)}", "<i8", "<i8"],
            "offsets": [0, 4, 5, 9, 11, 11 + obj_len, 19 + obj_len],
            "itemsize": 27 + obj_len,
        }
    )


def _encode_block(
    kind: int, obj: str, worker: int, offs: np.ndarray, lens: np.ndarray
) -> bytes:
    raw = obj.encode(_ENC)
    dt = _event_dtype(len(raw))
    arr = np.zeros(len(offs), dtype=dt)
    arr["plen"] = 23 + len(raw)
    arr["kind"] = kind
    arr["worker"] = worker
    arr["olen"] = len(raw)
    arr["obj"] = raw
    arr["offset"] = offs
    arr["length"] = lens
    return arr.tobytes()


def _encode_segments(segments: list, worker: int, out: list) -> None:
    for seg in segments:
        tag = seg[0]
        if tag == _EV:
            _, kind, obj, off, ln = seg
            out.append(
                _encode_block(
                    kind, obj, worker,
                    np.array([off], dtype=np.int64),
                    np.array([ln], dtype=np.int64),
                )
            )
        elif tag == _RUN:
            _, kind, obj, start, count = seg
            offs = np.arange(start, start + count, dtype=np.int64)
            out.append(_encode_block(kind, obj, worker, offs, np.ones(count, np.int64)))
        else:
            _, kind, obj, offs, lens = seg
            out.append(
                _encode_block(
                    kind, obj, worker,
                    np.asarray(offs, dtype=np.int64),
                    np.asarray(lens, dtype=np.int64),
                )
            )


def canonicalize(log: TraceLog) -> bytes:
    """Deterministic byte serialization of the canonical event order.

    Sequential sections appear in program order; each parallel section is
    expanded worker 0..W-1, every worker's events in its own program
    order.  Raises ``TraceError`` on an unclosed parallel phase.
    """
    if log._open_par is not None:
        raise TraceError("unclosed parallel phase")
    chunks: list = []
    for sec in log.sections:
        if sec[0] == "seq":
            _encode_segments(sec[1], 0, chunks)
        else:
            _, n_workers, worker_segs = sec
            for w in range(n_workers):
                _encode_segments(worker_segs[w], w, chunks)
    return b"".join(chunks)


def digest(log: TraceLog) -> str:
    return hashlib.sha256(canonicalize(log)).hexdigest()


def write_trace_file(log: TraceLog, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(canonicalize(log))


def assert_equal(a: TraceLog, b: TraceLog) -> tuple[bool, Optional[Divergence]]:
    """True iff both logs canonicalize to identical bytes.

    On mismatch the report carries the index of the first differing
    event together with both events (or None past either log's end).
    """
    if canonicalize(a) == canonicalize(b):
        return True, None
    sentinel = object()
    ita, itb = a.events(), b.events()
    idx = 0
    while True:
        ea = next(ita, sentinel)
        eb = next(itb, sentinel)
        if ea is sentinel and eb is sentinel:
            # Same events, different bytes cannot happen; defensive.
            return False, Divergence(idx, None, None)
        if ea is sentinel or eb is sentinel or ea != eb:
            return False, Divergence(
                idx,
                None if ea is sentinel else ea,
                None if eb is sentinel else eb,
            )
        idx += 1


def count_events(log: TraceLog, kind: Optional[int] = None, obj: Optional[str] = None) -> int:
    n = 0
    for ev in log.events():
        if kind is not None and ev.kind != kind:
            continue
        if obj is not None and ev.obj != obj:
            continue
        n += 1
    return n
