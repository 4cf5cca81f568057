"""Acceptance criteria T1-T10, one test per criterion.

Each test pins its tolerance in-line and prints one pass/fail line
(visible with ``pytest -s``).  The tiny configuration is 50 input dims,
8 hidden units, 64 classes, K=2/M=4 hashing, bucket capacity 8, batch
size 4, three batch steps plus one refresh.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import tiny_params
from oblivnet.bench import bench_csv, run_bench
from oblivnet.dataio import randomize_private, synth_xc
from oblivnet.engine import (READ, PublicParams, backprop, dense_forward,
                             feed_forward, init_model, make_batches,
                             neuron_fetcher, neuron_requester,
                             obl_merge_requests, output_layer_arrays,
                             run_traced, train_loop)
from oblivnet.estimators import MPWTAIndex
from oblivnet.lsh import (LshConfig, enforce_capacity, len_seq, make_hash_fns,
                          wta_signature_top3, encode_bucket, refresh, LshTable)
from oblivnet.oblivious import obl_sort_block
from oblivnet.oht import OhtConfig
from oblivnet.records import NeuronBlock, RequestBlock
from oblivnet.reference import (batch_loss_f64, compare_models, fd_gradient,
                                ref_train)
from oblivnet.trace import Kind, TraceRecorder, assert_equal, canonicalize


def report(tag: str, ok: bool, detail: str, started: float, limit: float):
    elapsed = time.perf_counter() - started
    status = "PASS" if ok and elapsed < limit else "FAIL"
    print(f"[{tag}] {status} ({elapsed:.1f}s/<{limit:.0f}s) {detail}")
    assert ok, f"{tag}: {detail}"
    assert elapsed < limit, f"{tag}: exceeded {limit}s ({elapsed:.1f}s)"


def test_t1_trace_independence():
    """20 pairs of runs, identical public parameters, fresh private data
    and weights: canonical traces must be byte-identical (exact)."""
    t0 = time.perf_counter()
    base = synth_xc(d_input=50, n_classes=64, n=12, nnz=10, clusters=4, seed=3)
    all_equal = True
    detail = "20/20 pairs byte-identical"
    for trial in range(20):
        ds_a = randomize_private(base, seed=100 + 2 * trial)
        ds_b = randomize_private(base, seed=100 + 2 * trial + 1)
        pa = tiny_params(seed_weights=500 + 2 * trial)
        pb = tiny_params(seed_weights=500 + 2 * trial + 1)
        _, log_a = run_traced(ds_a.examples, pa)
        _, log_b = run_traced(ds_b.examples, pb)
        ok, div = assert_equal(log_a, log_b)
        if not ok:
            all_equal = False
            detail = f"pair {trial} diverged: {div}"
            break
    report("T1", all_equal, detail, t0, limit=60)


def test_t2_oracle_equivalence():
    """Five batch steps: engine vs direct-indexing oracle within 1e-4
    relative on every weight."""
    t0 = time.perf_counter()
    params = tiny_params()
    ds = synth_xc(d_input=50, n_classes=64, n=20, nnz=10, clusters=4, seed=3)
    res = train_loop(ds.examples, params)
    ref = ref_train(ds.examples, params)
    dev = compare_models(res.model, ref, tol=1e-4)
    report("T2", dev.passed,
           f"max rel deviation {dev.max_rel:.2e} at {dev.location} (tol 1e-4)",
           t0, limit=30)


def test_t3_gradient_check():
    """Post-merge accumulators vs float64 central differences (h=1e-4) on
    a 10-weight slice: relative error <= 1e-4 per weight.

    The slice is the five largest-magnitude output-weight accumulators
    plus the five largest dense-weight accumulators.
    """
    t0 = time.perf_counter()
    params = tiny_params()
    ds = synth_xc(d_input=50, n_classes=64, n=4, nnz=10, clusters=4, seed=3)
    model = init_model(params)
    batch = make_batches(ds.examples, 4)[0]
    w0 = model.dense.weights.astype(np.float64)
    b0 = model.dense.bias.astype(np.float64)
    wout, bout = output_layer_arrays(model)
    wout64, bout64 = wout.astype(np.float64), bout.astype(np.float64)

    model.step += 1
    hidden = dense_forward(model.dense, batch)
    req = neuron_requester(hidden, model)
    req, _ = neuron_fetcher(req, model, READ)
    state = feed_forward(req, hidden, model)
    backprop(req, model, state, hidden, batch)
    active_sets = [np.unique(state.nodes[i][state.nodes[i] < params.n_classes])
                   for i in range(params.batch_size)]
    obl_merge_requests(req)

    eng_out = np.zeros_like(wout64)
    pad = params.lsh.pad_size
    for e in np.nonzero(req.is_dummy == 0)[0]:
        rows = slice(int(e) * pad, (int(e) + 1) * pad)
        for s in range(pad):
            nid = int(req.buffers.ids[rows][s])
            if nid < params.n_classes:
                eng_out[nid] += req.buffers.grad[rows][s]
    eng_dense = model.dense.grad.astype(np.float64)

    loss = lambda: batch_loss_f64(w0, b0, wout64, bout64, batch, active_sets)
    out_coords = [tuple(np.unravel_index(int(i), eng_out.shape))
                  for i in np.argsort(-np.abs(eng_out).ravel())[:5]]
    dense_coords = [tuple(np.unravel_index(int(i), eng_dense.shape))
                    for i in np.argsort(-np.abs(eng_dense).ravel())[:5]]
    worst = 0.0
    for arr, grads, coords in ((wout64, eng_out, out_coords),
                               (w0, eng_dense, dense_coords)):
        fd = fd_gradient(loss, arr, coords, h=1e-4)
        for j, c in enumerate(coords):
            rel = abs(grads[c] - (-fd[j])) / max(abs(grads[c]), abs(fd[j]), 1e-8)
            worst = max(worst, rel)
    report("T3", worst <= 1e-4,
           f"10-weight slice, worst relative error {worst:.2e} (tol 1e-4)",
           t0, limit=10)


def test_t4_bitonic_sort():
    """Correct order for n=1..64 over 100 random key sets each; exactly 6
    compare-exchange events at n=4; per-n traces invariant to the input
    permutation."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ok = True
    detail = "all n in 1..64 sorted, n=4 emits 6 exchanges, traces permutation-invariant"
    for n in range(1, 65):
        for _ in range(100):
            keys = rng.integers(-1000, 1000, size=n)
            out = keys.copy()
            obl_sort_block(n, [out], fields=[out])
            if not np.array_equal(out, np.sort(keys)):
                ok, detail = False, f"wrong order at n={n}"
                break
        if not ok:
            break
        logs = []
        for _ in range(2):
            rec = TraceRecorder()
            arr = rng.permutation(n).astype(np.int64)
            obl_sort_block(n, [arr], rec=rec, obj="s")
            logs.append(canonicalize(rec.log))
        if logs[0] != logs[1]:
            ok, detail = False, f"trace varies with permutation at n={n}"
            break
    rec = TraceRecorder()
    obl_sort_block(4, [np.array([4, 3, 2, 1])], rec=rec, obj="s")
    n4 = sum(1 for e in rec.log.events() if e.kind == Kind.SORTEX)
    if n4 != 6:
        ok, detail = False, f"n=4 emitted {n4} exchanges"
    report("T4", ok, detail, t0, limit=10)


def test_t5_mp_wta_structure():
    """Probe-sequence lengths match the closed form for K=1..6 (27 at K=3,
    131 at K=5); recall over the probe schedule is monotone for every
    query on 1,000 rank-structured vectors; the single-table multi-probe
    index at full budget beats the single-probe lookup on every trial.

    Numerical replication of the full-scale multi-table accuracy curves
    is out of scope; the comparison table against up to 50 tables is
    emitted for inspection instead.
    """
    t0 = time.perf_counter()
    ok = all(len_seq(k, 3, min(3, k)) ==
             {1: 3, 2: 9, 3: 27, 4: 65, 5: 131, 6: 233}[k] for k in range(1, 7))
    detail = "lenSeq closed form holds for K=1..6"

    from oblivnet.bench import rank_corpus, true_neighbors
    corpus, queries = rank_corpus(1000, 40, dim=24, clusters=8, seed=7)
    truth = true_neighbors(corpus, queries, top_k=8)
    index = MPWTAIndex(k=3, m=8, random_state=7).fit(corpus)
    assert index.probe_budget == 27
    for qi in range(len(queries)):
        seq = index.probe_sequence(queries[qi])
        found: set = set()
        prev = -1.0
        first = None
        for b in seq.tolist():
            found |= set(index.buckets_.get(b, ()))
            rec = len(found & set(truth[qi].tolist())) / truth.shape[1]
            if first is None:
                first = rec
            if rec < prev - 1e-12:
                ok, detail = False, f"recall not monotone for query {qi}"
                break
            prev = rec
        if not ok:
            break
        if prev < first:
            ok, detail = False, f"27-probe recall below single probe for query {qi}"
            break

    rows = run_bench(n_points=400, n_queries=20, dim=24, clusters=8,
                     k=3, m=8, max_tables=50, top_k=8, seed=7)
    table = bench_csv(rows)
    print(table)
    if ok:
        detail += "; recall monotone per query; bench table emitted"
    report("T5", ok, detail, t0, limit=60)


def test_t6_oht_behavioral_contract():
    """200 random request multisets (T <= 256) under the capacity
    contract: every non-dummy request's buffer is populated by a read
    fetch, and build/extract traces are functions of (T, bins, capacity)
    only."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    lsh = LshConfig(k=2, m=8, pad_size=2)
    ok, detail = True, "100 trace pairs identical; all buffers populated"
    for trial in range(100):
        t_req = int(rng.integers(1, 257))
        params = PublicParams(
            d_input=10, n_hidden=8, n_classes=64, lsh=lsh,
            batch_size=8, oht=OhtConfig.derive(t_req, 8),
            seed_weights=trial, seed_lsh=1,
        )
        model = init_model(params)
        logs = []
        for sub in range(2):
            req = RequestBlock(t_req, lsh.pad_size, params.n_hidden, params.batch_size)
            req.buffers.ids[:] = model.dummy_id
            req.buffers.is_dummy[:] = 1
            # duplicates bounded by the batch size, as the requester produces
            base = rng.choice(lsh.num_buckets, size=t_req, replace=True)
            req.bucket[:] = base
            for b in np.unique(base):
                pos = np.nonzero(base == b)[0][8:]
                req.bucket[pos] = (b + 1 + np.arange(len(pos))) % lsh.num_buckets
            req.rank[:] = rng.integers(1, 9, size=t_req)
            rec = TraceRecorder()
            out, _ = neuron_fetcher(req, model, READ, rec=rec)
            logs.append(canonicalize(rec.log))
            for e in range(out.n):
                b = int(out.bucket[e])
                rows = slice(e * lsh.pad_size, (e + 1) * lsh.pad_size)
                want = model.table.main.ids[model.table.bucket_rows(b)]
                if not np.array_equal(out.buffers.ids[rows], want):
                    ok, detail = False, f"trial {trial}: buffer not populated"
                    break
            if not ok:
                break
        if not ok:
            break
        if logs[0] != logs[1]:
            ok, detail = False, f"trial {trial}: trace depends on bucket values"
            break
    report("T6", ok, detail, t0, limit=30)


def test_t7_refresh_and_capacity():
    """Capacity scan equals a brute-force per-bucket counter on 500 random
    instances; after refresh every real neuron re-hashes to its bucket and
    the overflow region holds only dummies (ample capacity)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    ok, detail = True, "500 capacity instances match oracle; rehash clean"
    for _ in range(500):
        ids = np.sort(rng.integers(0, 8, size=rng.integers(1, 60)))
        pad = int(rng.integers(1, 7))
        got = enforce_capacity(ids, pad)
        want = np.zeros(len(ids), np.uint8)
        for b in np.unique(ids):
            pos = np.where(ids == b)[0]
            want[pos[pad:]] = 1
        if not np.array_equal(got, want):
            ok, detail = False, "capacity scan disagrees with counting oracle"
            break
    if ok:
        cfg = LshConfig(k=2, m=4, pad_size=16)
        fns = make_hash_fns(2, 4, 8, seed=9)
        table = LshTable(cfg, dim=8, lanes=1)
        reals = NeuronBlock(24, 8, 1)
        reals.ids[:] = np.arange(24)
        reals.is_dummy[:] = 0
        reals.weights[:] = rng.normal(size=(24, 8)).astype(np.float32)
        refresh(table, fns, init_reals=reals)
        refresh(table, fns)
        for b in range(cfg.num_buckets):
            rows = table.bucket_rows(b)
            for i in range(rows.start, rows.stop):
                if table.main.is_dummy[i] == 0:
                    h, _, _ = wta_signature_top3(table.main.weights[i], fns)
                    if encode_bucket(h, cfg) != b:
                        ok, detail = False, f"neuron in bucket {b} re-hashes elsewhere"
        if ok and not np.all(table.overflow.is_dummy == 1):
            ok, detail = False, "overflow region holds a real neuron"
    report("T7", ok, detail, t0, limit=20)


def test_t8_optimization_neutrality():
    """The trained model is bitwise-identical across the eight O1/O2/O3
    combinations at one worker, and metric-identical at 1 vs 4 workers."""
    t0 = time.perf_counter()
    ds = synth_xc(d_input=50, n_classes=64, n=20, nnz=10, clusters=4, seed=3)
    test = synth_xc(d_input=50, n_classes=64, n=8, nnz=10, clusters=4, seed=5)
    golden = None
    ok, detail = True, "8 toggle combinations bitwise-identical; workers metric-identical"
    for o1, o2, o3 in itertools.product((False, True), repeat=3):
        p = tiny_params(o1=o1, o2=o2, o3=o3)
        res = train_loop(ds.examples, p)
        w, b = output_layer_arrays(res.model)
        sig = (w.tobytes(), b.tobytes(), res.model.dense.weights.tobytes(),
               res.model.dense.bias.tobytes())
        if golden is None:
            golden = sig
        elif sig != golden:
            ok, detail = False, f"model differs at O1={o1} O2={o2} O3={o3}"
            break
    if ok:
        metrics = []
        for workers in (1, 4):
            p = tiny_params(workers=workers)
            res = train_loop(ds.examples, p, eval_examples=test.examples)
            metrics.append([(m["p_at_1"], m["loss"]) for m in res.metrics])
        if metrics[0] != metrics[1]:
            ok, detail = False, "metrics differ between 1 and 4 workers"
    report("T8", ok, detail, t0, limit=60)


def test_t9_learning_sanity():
    """Synthetic clustered data, 64 classes, 2000 train / 500 test: after
    10 epochs the top-1 precision is at least five times the 1/64 random
    baseline.  Full-scale accuracy curves are not reproduced."""
    t0 = time.perf_counter()
    full = synth_xc(d_input=128, n_classes=64, n=2500, nnz=8, clusters=8, seed=11)
    params = PublicParams(
        d_input=128, n_hidden=32, n_classes=64,
        lsh=LshConfig(k=1, m=4, pad_size=32, rebuild_period=25),
        oht=OhtConfig(num_bins=8, bin_cap=16),
        batch_size=8, epochs=10, lr=2e-3, seed_weights=0, seed_lsh=1,
    )
    res = train_loop(full.examples[:2000], params,
                     eval_examples=full.examples[2000:])
    p1 = res.metrics[-1]["p_at_1"]
    target = 5.0 / 64
    report("T9", p1 >= target,
           f"p@1 {p1:.3f} >= {target:.3f} (5x the 1/64 baseline)",
           t0, limit=300)


def test_t10_non_reproduction_declaration():
    """Hardware-scale speedup comparisons against an ORAM baseline need a
    trusted-execution testbed and are declared out of scope; the artifact
    reports its own per-batch wall time per worker count instead."""
    t0 = time.perf_counter()
    ds = synth_xc(d_input=50, n_classes=64, n=12, nnz=10, clusters=4, seed=3)
    timings = {}
    for workers in (1, 4):
        p = tiny_params(workers=workers)
        res = train_loop(ds.examples, p)
        timings[workers] = res.mean_batch_seconds
    ok = all(v > 0 for v in timings.values())
    detail = ("speedup-vs-ORAM-baseline not reproducible here; "
              + "; ".join(f"workers={w}: {s*1000:.1f} ms/batch"
                          for w, s in timings.items()))
    report("T10", ok, detail, t0, limit=60)
