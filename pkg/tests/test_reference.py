"""Reference trainer equivalence and the finite-difference loss oracle."""

import numpy as np
import pytest

from conftest import tiny_params
from oblivnet.dataio import synth_xc
from oblivnet.engine import (READ, backprop, dense_forward, feed_forward,
                             init_model, make_batches, neuron_fetcher,
                             neuron_requester, output_layer_arrays, train_loop)
from oblivnet.reference import (batch_loss_f64, compare_models, fd_gradient,
                                init_ref_model, ref_batch_step, ref_train)


class TestRefModel:
    def test_same_initialization_as_engine(self, params):
        eng = init_model(params)
        ref = init_ref_model(params)
        w, b = output_layer_arrays(eng)
        np.testing.assert_array_equal(w, ref.w_out)
        np.testing.assert_array_equal(eng.dense.weights, ref.dense.weights)

    def test_same_bucket_assignment_as_engine(self, params):
        eng = init_model(params)
        ref = init_ref_model(params)
        pad = params.lsh.pad_size
        for b in range(params.lsh.num_buckets):
            rows = eng.table.bucket_rows(b)
            ids = eng.table.main.ids[rows][eng.table.main.is_dummy[rows] == 0]
            ref_ids = np.nonzero(ref.in_table & (ref.bucket_of == b))[0]
            assert sorted(ids.tolist()) == sorted(ref_ids.tolist())

    def test_deterministic(self, params, dataset12):
        outs = []
        for _ in range(2):
            ref = ref_train(dataset12.examples, params)
            outs.append((ref.w_out.tobytes(), ref.b_out.tobytes()))
        assert outs[0] == outs[1]

    def test_zero_gradient_step_keeps_model(self, params):
        ref = init_ref_model(params)
        w0 = ref.w_out.copy()
        batch = make_batches(
            synth_xc(d_input=50, n_classes=64, n=4, nnz=0, clusters=1, seed=0).examples,
            4,
        )[0]
        for b in batch.labels:
            b.resize(0, refcheck=False)
        # zero inputs, no labels: hidden = relu(0) and all deltas vanish
        ref_batch_step(ref, batch)
        np.testing.assert_array_equal(ref.dense.grad, 0)
        np.testing.assert_array_equal(ref.w_out, w0)


class TestCompareModels:
    def test_identical_models_zero_deviation(self, params):
        eng = init_model(params)
        ref = init_ref_model(params)
        dev = compare_models(eng, ref, tol=1e-4)
        assert dev.max_rel == 0.0 and dev.passed

    def test_single_weight_off(self, params):
        eng = init_model(params)
        ref = init_ref_model(params)
        ref.dense.weights[0, 0] = eng.dense.weights[0, 0] + np.float32(1e-3)
        eng.dense.weights[0, 0] = np.float32(1.0)
        ref.dense.weights[0, 0] = np.float32(1.0 + 1e-3)
        dev = compare_models(eng, ref, tol=1e-4)
        assert not dev.passed
        assert np.isclose(dev.max_rel, 1e-3 / (1 + 1e-3), rtol=1e-3)
        assert dev.location.startswith("dense.weights")

    def test_shape_mismatch(self, params):
        eng = init_model(params)
        other = tiny_params(n_hidden=4, lsh=params.lsh)
        ref = init_ref_model(other)
        with pytest.raises(ValueError):
            compare_models(eng, ref, tol=1e-4)


class TestEquivalence:
    def test_selection_sets_match(self, params, dataset12):
        from oblivnet.reference import active_set
        eng = init_model(params)
        ref = init_ref_model(params)
        batch = make_batches(dataset12.examples, 4)[0]
        eng.step += 1
        hidden = dense_forward(eng.dense, batch)
        req = neuron_requester(hidden, eng)
        req, _ = neuron_fetcher(req, eng, READ)
        hidden_ref = dense_forward(ref.dense, batch)
        pad = params.lsh.pad_size
        for i in range(4):
            rows = slice(i * params.len_seq * pad, (i + 1) * params.len_seq * pad)
            ids = req.buffers.ids[rows]
            eng_set = sorted(set(int(x) for x in ids if x < params.n_classes))
            ref_set = sorted(active_set(ref, hidden_ref[i]).tolist())
            assert eng_set == ref_set

    def test_five_steps_within_tolerance(self, params, dataset20):
        res = train_loop(dataset20.examples, params)
        ref = ref_train(dataset20.examples, params)
        dev = compare_models(res.model, ref, tol=1e-4)
        assert dev.passed, dev


class TestFiniteDifference:
    def test_fd_matches_analytic_on_quadratic(self):
        arr = np.array([[2.0, -1.0]])
        loss = lambda: float((arr ** 2).sum())
        g = fd_gradient(loss, arr, [(0, 0), (0, 1)], h=1e-5)
        np.testing.assert_allclose(g, [4.0, -2.0], rtol=1e-6)

    def test_engine_gradients_match_fd(self, params, dataset12):
        from oblivnet.engine import obl_merge_requests
        model = init_model(params)
        batch = make_batches(dataset12.examples, 4)[0]
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
        active_sets = [
            np.unique(state.nodes[i][state.nodes[i] < params.n_classes])
            for i in range(4)
        ]
        obl_merge_requests(req)

        eng_grad = np.zeros_like(wout64)
        pad = params.lsh.pad_size
        for e in np.nonzero(req.is_dummy == 0)[0]:
            rows = slice(int(e) * pad, (int(e) + 1) * pad)
            for s in range(pad):
                nid = int(req.buffers.ids[rows][s])
                if nid < params.n_classes:
                    eng_grad[nid] += req.buffers.grad[rows][s]

        loss = lambda: batch_loss_f64(w0, b0, wout64, bout64, batch, active_sets)
        coords = [tuple(c) for c in
                  np.argwhere(np.abs(eng_grad) > np.percentile(np.abs(eng_grad), 99.8))][:4]
        fd = fd_gradient(loss, wout64, coords, h=1e-4)
        for j, c in enumerate(coords):
            rel = abs(eng_grad[c] - (-fd[j])) / max(abs(eng_grad[c]), abs(fd[j]), 1e-8)
            assert rel <= 1e-4
