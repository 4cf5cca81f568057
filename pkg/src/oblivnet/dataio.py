"""Sparse multi-label dataset I/O, synthesis, and label-budgeted subsetting.

The on-disk format is the extreme-classification repository text layout:
a header line ``N D C`` followed by one example per line,
``l1,l2,... i1:v1 i2:v2 ...`` with 0-based ids, strictly increasing
feature indices, and possibly empty label lists.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SparseExample:
    labels: set[int]
    features: list[tuple[int, float]]

    @property
    def nnz(self) -> int:
        return len(self.features)


@dataclass
class Dataset:
    num_examples: int
    num_features: int
    num_labels: int
    examples: list[SparseExample] = field(default_factory=list)

    def validate(self) -> None:
        if self.num_examples != len(self.examples):
            raise ValueError("header example count does not match content")


class DataFormatError(ValueError):
    pass


def parse_xc(path: str) -> Dataset:
    """Parse the header + example lines; malformed input reports the
    offending line number."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 3:
        raise DataFormatError(f"{path}:1: header must be 'N D C'")
    try:
        n, d, c = (int(x) for x in head)
    except ValueError as exc:
        raise DataFormatError(f"{path}:1: non-integer header field") from exc
    if len(lines) - 1 < n:
        raise DataFormatError(f"{path}: header promises {n} examples, "
                              f"found {len(lines) - 1}")
    examples = []
    for ln in range(1, n + 1):
        examples.append(_parse_line(lines[ln], d, c, path, ln + 1))
    return Dataset(num_examples=n, num_features=d, num_labels=c, examples=examples)


def _parse_line(line: str, d: int, c: int, path: str, lineno: int) -> SparseExample:
    toks = line.split()
    labels: set[int] = set()
    feats: list[tuple[int, float]] = []
    start = 0
    if toks and ":" not in toks[0]:
        try:
            labels = {int(x) for x in toks[0].split(",") if x != ""}
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad label list") from exc
        start = 1
    for tok in toks[start:]:
        if ":" not in tok:
            raise DataFormatError(f"{path}:{lineno}: expected index:value, got {tok!r}")
        istr, vstr = tok.split(":", 1)
        try:
            idx, val = int(istr), float(vstr)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad feature {tok!r}") from exc
        if idx >= d or idx < 0:
            raise DataFormatError(f"{path}:{lineno}: feature index {idx} out of range")
        if feats and idx <= feats[-1][0]:
            raise DataFormatError(f"{path}:{lineno}: indices must increase strictly")
        feats.append((idx, val))
    for y in labels:
        if y >= c or y < 0:
            raise DataFormatError(f"{path}:{lineno}: label {y} out of range")
    return SparseExample(labels=labels, features=feats)


def write_xc(ds: Dataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{ds.num_examples} {ds.num_features} {ds.num_labels}\n")
        for ex in ds.examples:
            labels = ",".join(str(y) for y in sorted(ex.labels))
            feats = " ".join(f"{i}:{v!r}" for i, v in ex.features)
            fh.write(f"{labels} {feats}".strip() + "\n")


def synth_xc(
    d_input: int, n_classes: int, n: int, nnz: int, clusters: int, seed: int,
    labels_per_example: int = 1, noise: float = 0.05,
) -> Dataset:
    """Cluster-structured synthetic data with learnable label structure.

    Labels are grouped into per-cluster blocks and each cluster owns a
    contiguous feature block; every label carries its own positive base
    pattern over its cluster's features.  An example draws its primary
    label round-robin, samples a fixed number of block features, and
    takes that label's base values plus small multiplicative noise, so
    same-cluster examples share rank structure and labels are decodable
    from the values.  nnz is constant across examples to keep the
    public shapes uniform.
    """
    if min(d_input, n_classes, clusters) <= 0 or nnz < 0:
        raise ValueError("synth_xc parameters must be positive")
    rng = np.random.default_rng(seed)
    feat_block = d_input // clusters
    lab_block = n_classes // clusters
    if nnz > feat_block:
        raise ValueError("nnz exceeds the per-cluster feature block")
    cluster_bases = rng.uniform(0.5, 2.0, size=(clusters, feat_block))
    label_bases = np.zeros((n_classes, feat_block))
    peaks = np.zeros(n_classes, dtype=np.int64)
    for y in range(n_classes):
        cl = min(y // lab_block, clusters - 1)
        label_bases[y] = cluster_bases[cl] * rng.uniform(0.6, 1.4, size=feat_block)
        # distinct dominant coordinate per label; anchors rank structure
        peaks[y] = (y % lab_block) * max(feat_block // max(lab_block, 1), 1) % feat_block
        label_bases[y][peaks[y]] *= 3.0
    examples = []
    for i in range(n):
        y0 = i % n_classes
        cl = min(y0 // lab_block, clusters - 1)
        if nnz > 0:
            others = rng.choice(feat_block - 1, size=nnz - 1, replace=False)
            others = np.where(others >= peaks[y0], others + 1, others)
            offs = np.sort(np.concatenate([[peaks[y0]], others]))
        else:
            offs = np.zeros(0, dtype=np.int64)
        vals = label_bases[y0][offs] * (1.0 + noise * rng.standard_normal(nnz))
        idx = offs + cl * feat_block
        labels = {y0}
        if labels_per_example > 1:
            extra = rng.choice(lab_block, size=labels_per_example - 1, replace=False)
            labels |= {int(x) + cl * lab_block for x in extra}
        examples.append(SparseExample(
            labels=labels,
            features=[(int(a), float(b)) for a, b in zip(idx, vals)],
        ))
    return Dataset(n, d_input, n_classes, examples)


def randomize_private(ds: Dataset, seed: int) -> Dataset:
    """Fresh private content under identical public shapes.

    Keeps every example's non-zero indices and label-set size; redraws
    the feature values and label identities.
    """
    rng = np.random.default_rng(seed)
    examples = []
    for ex in ds.examples:
        vals = rng.uniform(0.1, 2.0, size=len(ex.features))
        feats = [(i, float(v)) for (i, _), v in zip(ex.features, vals)]
        k = len(ex.labels)
        labels = set(int(x) for x in rng.choice(ds.num_labels, size=k, replace=False))
        examples.append(SparseExample(labels=labels, features=feats))
    return Dataset(ds.num_examples, ds.num_features, ds.num_labels, examples)


# ---------------------------------------------------------------------
# Cover-and-fill subsetting
# ---------------------------------------------------------------------

BASE_INSTANCES = 14146
BASE_LABELS = 30938


@dataclass
class SubsetResult:
    train: Dataset
    test: Dataset
    label_map: dict[int, int]
    kept_train_idx: list[int]
    stats: dict


def subset_cover_fill(
    src_train: Dataset, src_test: Dataset, multiplier: int, seed: int,
    base_instances: int = BASE_INSTANCES, base_labels: int = BASE_LABELS,
) -> SubsetResult:
    """Two-phase label-budgeted subsetting.

    Phase A greedily keeps instances that introduce many new labels
    (ties broken toward more frequent labels) while the label union
    stays within the budget; phase B fills the instance quota with
    instances whose labels are all already kept (ALL policy, no partial
    label deletion).  Test instances keep any example with at least one
    kept label and drop out-of-set labels (ANY policy).  Kept labels are
    remapped to a contiguous range.
    """
    n_target = multiplier * base_instances
    l_target = multiplier * base_labels

    freq: dict[int, int] = {}
    for ex in src_train.examples:
        for y in ex.labels:
            freq[y] = freq.get(y, 0) + 1
    # rank 0 = most frequent; ties by label id for determinism
    order = sorted(freq, key=lambda y: (-freq[y], y))
    rank = {y: r for r, y in enumerate(order)}

    kept_labels: set[int] = set()
    kept_idx: list[int] = []
    kept_flag = np.zeros(src_train.num_examples, dtype=bool)

    def score(i: int) -> tuple[int, float]:
        new = [y for y in src_train.examples[i].labels if y not in kept_labels]
        if not new or len(kept_labels) + len(new) > l_target:
            return 0, 0.0
        return len(new), float(np.mean([rank[y] for y in new]))

    # Phase A: lazy max-heap on (#new labels, frequent-label tiebreak).
    heap = []
    for i, ex in enumerate(src_train.examples):
        s, tb = score(i)
        if s:
            heap.append((-s, tb, i))
    heapq.heapify(heap)
    while heap and len(kept_idx) < n_target:
        neg_s, tb, i = heapq.heappop(heap)
        if kept_flag[i]:
            continue
        s_now, tb_now = score(i)
        if s_now == 0:
            continue
        if (-neg_s, tb) != (s_now, tb_now):
            heapq.heappush(heap, (-s_now, tb_now, i))
            continue
        kept_flag[i] = True
        kept_idx.append(i)
        kept_labels |= src_train.examples[i].labels

    # Phase B: fill the quota with subset-labelled instances, source order.
    for i, ex in enumerate(src_train.examples):
        if len(kept_idx) >= n_target:
            break
        if kept_flag[i] or not ex.labels:
            continue
        if ex.labels <= kept_labels:
            kept_flag[i] = True
            kept_idx.append(i)

    label_map = {y: j for j, y in enumerate(sorted(kept_labels))}
    train_examples = [
        SparseExample(
            labels={label_map[y] for y in src_train.examples[i].labels},
            features=list(src_train.examples[i].features),
        )
        for i in kept_idx
    ]
    test_examples = []
    for ex in src_test.examples:
        kept = {label_map[y] for y in ex.labels if y in kept_labels}
        if kept:
            test_examples.append(SparseExample(labels=kept, features=list(ex.features)))

    train = Dataset(len(train_examples), src_train.num_features,
                    len(label_map), train_examples)
    test = Dataset(len(test_examples), src_test.num_features,
                   len(label_map), test_examples)
    stats = {
        "multiplier": multiplier,
        "seed": seed,
        "target_instances": n_target,
        "target_labels": l_target,
        "realized_instances": len(train_examples),
        "realized_labels": len(label_map),
        "realized_test_instances": len(test_examples),
        "budget_attained": len(train_examples) >= n_target,
    }
    return SubsetResult(train=train, test=test, label_map=label_map,
                        kept_train_idx=kept_idx, stats=stats)


def write_subset(result: SubsetResult, out_dir: str) -> list[str]:
    """Emit the five subset artifacts into ``out_dir``."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "train": os.path.join(out_dir, "train.small.txt"),
        "test": os.path.join(out_dir, "test.small.txt"),
        "label_map": os.path.join(out_dir, "label_map.json"),
        "kept": os.path.join(out_dir, "kept_train_idx.txt"),
        "stats": os.path.join(out_dir, "stats.json"),
    }
    write_xc(result.train, paths["train"])
    write_xc(result.test, paths["test"])
    with open(paths["label_map"], "w", encoding="utf-8") as fh:
        json.dump({str(k): v for k, v in sorted(result.label_map.items())}, fh, indent=0)
    with open(paths["kept"], "w", encoding="utf-8") as fh:
        fh.write("\n".join(str(i) for i in result.kept_train_idx) + "\n")
    with open(paths["stats"], "w", encoding="utf-8") as fh:
        json.dump(result.stats, fh, indent=2)
    return list(paths.values())
