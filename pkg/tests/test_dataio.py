"""Sparse text format, synthetic generation, and cover-and-fill subsetting."""

import json

import numpy as np
import pytest

from oblivnet.dataio import (DataFormatError, Dataset, SparseExample, parse_xc,
                             randomize_private, subset_cover_fill, synth_xc,
                             write_subset, write_xc)


def write_lines(tmp_path, name, lines):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n")
    return str(p)


class TestParse:
    def test_basic(self, tmp_path):
        path = write_lines(tmp_path, "a.txt", [
            "2 10 5",
            "1,3 2:0.5 7:1.25",
            "0 4:2.0",
        ])
        ds = parse_xc(path)
        assert (ds.num_examples, ds.num_features, ds.num_labels) == (2, 10, 5)
        assert ds.examples[0].labels == {1, 3}
        assert ds.examples[0].features == [(2, 0.5), (7, 1.25)]

    def test_header_counts_passthrough(self, tmp_path):
        path = write_lines(tmp_path, "h.txt", ["0 101938 30938"])
        ds = parse_xc(path)
        assert ds.num_features == 101938 and ds.num_labels == 30938

    def test_label_list_example(self, tmp_path):
        path = write_lines(tmp_path, "b.txt", ["1 20 12", "5,10 3:0.5 7:1.2"])
        ex = parse_xc(path).examples[0]
        assert ex.labels == {5, 10}
        assert ex.features == [(3, 0.5), (7, 1.2)]

    def test_labels_only_line(self, tmp_path):
        path = write_lines(tmp_path, "c.txt", ["1 20 12", "5,10"])
        ex = parse_xc(path).examples[0]
        assert ex.labels == {5, 10} and ex.nnz == 0

    def test_empty_label_list(self, tmp_path):
        path = write_lines(tmp_path, "d.txt", ["1 20 12", "3:0.5 7:1.2"])
        ex = parse_xc(path).examples[0]
        assert ex.labels == set() and ex.nnz == 2

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = write_lines(tmp_path, "e.txt", ["2 20 12", "1 3:0.5", "1 nope:x"])
        with pytest.raises(DataFormatError, match=":3:"):
            parse_xc(path)

    def test_feature_index_out_of_range(self, tmp_path):
        path = write_lines(tmp_path, "f.txt", ["1 4 12", "1 9:0.5"])
        with pytest.raises(DataFormatError):
            parse_xc(path)

    def test_indices_must_increase(self, tmp_path):
        path = write_lines(tmp_path, "g.txt", ["1 20 12", "1 7:0.5 3:1.0"])
        with pytest.raises(DataFormatError):
            parse_xc(path)

    def test_label_out_of_range(self, tmp_path):
        path = write_lines(tmp_path, "h2.txt", ["1 20 3", "7 1:0.5"])
        with pytest.raises(DataFormatError):
            parse_xc(path)

    def test_roundtrip(self, tmp_path):
        ds = synth_xc(d_input=30, n_classes=12, n=17, nnz=5, clusters=3, seed=4)
        path = tmp_path / "rt.txt"
        write_xc(ds, str(path))
        back = parse_xc(str(path))
        assert back == ds


class TestSynth:
    def test_empty(self):
        ds = synth_xc(d_input=10, n_classes=4, n=0, nnz=2, clusters=2, seed=0)
        assert ds.num_examples == 0 and ds.examples == []

    def test_deterministic(self):
        a = synth_xc(d_input=30, n_classes=12, n=20, nnz=5, clusters=3, seed=4)
        b = synth_xc(d_input=30, n_classes=12, n=20, nnz=5, clusters=3, seed=4)
        assert a == b

    def test_labels_match_cluster_blocks(self):
        ds = synth_xc(d_input=64, n_classes=64, n=40, nnz=4, clusters=4, seed=1)
        lab_block = 64 // 4
        feat_block = 64 // 4
        for ex in ds.examples:
            clusters = {y // lab_block for y in ex.labels}
            assert len(clusters) == 1
            cl = clusters.pop()
            for j, _ in ex.features:
                assert cl == j // feat_block

    def test_fixed_nnz(self):
        ds = synth_xc(d_input=30, n_classes=12, n=25, nnz=5, clusters=3, seed=4)
        assert {ex.nnz for ex in ds.examples} == {5}

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            synth_xc(d_input=0, n_classes=4, n=1, nnz=2, clusters=2, seed=0)
        with pytest.raises(ValueError):
            synth_xc(d_input=8, n_classes=4, n=1, nnz=9, clusters=2, seed=0)


class TestRandomizePrivate:
    def test_public_shape_preserved(self):
        ds = synth_xc(d_input=30, n_classes=12, n=20, nnz=5, clusters=3, seed=4)
        other = randomize_private(ds, seed=9)
        assert other.num_examples == ds.num_examples
        for a, b in zip(ds.examples, other.examples):
            assert [i for i, _ in a.features] == [i for i, _ in b.features]
            assert len(a.labels) == len(b.labels)

    def test_values_change(self):
        ds = synth_xc(d_input=30, n_classes=12, n=20, nnz=5, clusters=3, seed=4)
        other = randomize_private(ds, seed=9)
        assert any(a.features != b.features
                   for a, b in zip(ds.examples, other.examples))


def toy_source():
    #           labels                     features
    rows = [
        ({0, 1}, [(0, 1.0)]),
        ({2}, [(1, 1.0)]),
        ({0}, [(2, 1.0)]),
        ({3, 4}, [(3, 1.0)]),
        ({1, 2}, [(4, 1.0)]),
        ({5}, [(5, 1.0)]),
    ]
    exs = [SparseExample(labels=set(l), features=f) for l, f in rows]
    train = Dataset(6, 8, 6, exs)
    test = Dataset(3, 8, 6, [
        SparseExample({0, 5}, [(0, 1.0)]),
        SparseExample({5}, [(1, 1.0)]),
        SparseExample({3}, [(2, 1.0)]),
    ])
    return train, test


class TestSubset:
    def test_targets_from_multiplier(self):
        train, test = toy_source()
        res = subset_cover_fill(train, test, multiplier=2, seed=0)
        assert res.stats["target_instances"] == 28292
        assert res.stats["target_labels"] == 61876

    def test_label_budget_respected(self):
        train, test = toy_source()
        res = subset_cover_fill(train, test, multiplier=1, seed=0,
                                base_instances=4, base_labels=3)
        assert res.stats["realized_labels"] <= 3
        # ALL policy: every kept instance's labels inside the kept set
        kept = set(res.label_map)
        for i in res.kept_train_idx:
            assert train.examples[i].labels <= kept

    def test_phase_b_adds_subset_instances(self):
        train, test = toy_source()
        res = subset_cover_fill(train, test, multiplier=1, seed=0,
                                base_instances=4, base_labels=3)
        # the greedy picks labels {0,1,2} via rows 0 and 4; rows 1 and 2
        # introduce nothing new and fill the quota
        kept = set(res.label_map)
        assert kept == {0, 1, 2}
        assert set(res.kept_train_idx) == {0, 4, 1, 2}

    def test_test_filtered_by_any_policy(self):
        train, test = toy_source()
        res = subset_cover_fill(train, test, multiplier=1, seed=0,
                                base_instances=4, base_labels=3)
        # out-of-set labels dropped; instances without kept labels removed
        new_ids = set(res.label_map.values())
        for ex in res.test.examples:
            assert ex.labels and ex.labels <= new_ids

    def test_label_map_contiguous_bijection(self):
        train, test = toy_source()
        res = subset_cover_fill(train, test, multiplier=1, seed=0,
                                base_instances=6, base_labels=6)
        vals = sorted(res.label_map.values())
        assert vals == list(range(len(res.label_map)))

    def test_budget_unattainable_flagged(self):
        train, test = toy_source()
        res = subset_cover_fill(train, test, multiplier=3, seed=0,
                                base_instances=100, base_labels=2)
        assert not res.stats["budget_attained"]

    def test_five_output_files(self, tmp_path):
        train, test = toy_source()
        res = subset_cover_fill(train, test, multiplier=1, seed=0,
                                base_instances=4, base_labels=3)
        paths = write_subset(res, str(tmp_path / "out"))
        names = sorted(p.split("/")[-1] for p in paths)
        assert names == sorted([
            "train.small.txt", "test.small.txt", "label_map.json",
            "kept_train_idx.txt", "stats.json",
        ])
        stats = json.loads((tmp_path / "out" / "stats.json").read_text())
        assert stats["realized_instances"] <= stats["target_instances"]

    def test_rerun_deterministic(self, tmp_path):
        train, test = toy_source()
        outs = []
        for run in range(2):
            res = subset_cover_fill(train, test, multiplier=1, seed=5,
                                    base_instances=4, base_labels=3)
            d = tmp_path / f"o{run}"
            write_subset(res, str(d))
            outs.append({p.name: p.read_bytes() for p in d.iterdir()})
        assert outs[0] == outs[1]
