"""Recall benchmark: multi-table single-probe WTA vs single-table MP-WTA.

Ground truth is rank-order similarity: for each query, the top
``top_k`` corpus vectors by pairwise-order agreement.  The corpus is
built from per-cluster base vectors with small multiplicative noise, so
neighbors genuinely share rank structure.  Recall at a probe budget is
the fraction of true neighbors found in the union of probed buckets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import MPWTAIndex
from .lsh import pairwise_order_signs


def rank_corpus(
    n_points: int, n_queries: int, dim: int, clusters: int, seed: int,
    noise: float = 0.05,
) -> tuple[np.ndarray, np.ndarray]:
    """Noisy copies of per-cluster base vectors; queries drawn the same way."""
    rng = np.random.default_rng(seed)
    bases = rng.uniform(0.0, 1.0, size=(clusters, dim))

    def draw(n):
        cl = rng.integers(0, clusters, size=n)
        out = bases[cl] * (1.0 + noise * rng.standard_normal((n, dim)))
        return out

    return draw(n_points), draw(n_queries)


def true_neighbors(corpus: np.ndarray, queries: np.ndarray, top_k: int) -> np.ndarray:
    """Top-k corpus rows per query under pairwise-order agreement."""
    cp, cn = pairwise_order_signs(corpus)
    qp, qn = pairwise_order_signs(queries)
    po = qp @ cp.T + qn @ cn.T
    # Highest agreement first; ties broken by row id for determinism.
    order = np.argsort(-po - np.arange(corpus.shape[0])[None, :] * 1e-9, axis=1)
    return order[:, :top_k]


def recall_of(found: np.ndarray, truth_row: np.ndarray) -> float:
    return len(np.intersect1d(found, truth_row)) / len(truth_row)


@dataclass
class BenchRow:
    method: str
    tables: int
    probes: int
    recall: float
    table_mem: int

    def as_csv(self) -> str:
        return f"{self.method},{self.tables},{self.probes},{self.recall:.4f},{self.table_mem}"


def run_bench(
    n_points: int = 1000, n_queries: int = 50, dim: int = 24, clusters: int = 8,
    k: int = 3, m: int = 8, max_tables: int = 50, top_k: int = 8, seed: int = 0,
) -> list[BenchRow]:
    """Emit recall rows for WTA(L tables, 1 probe each) and MP-WTA(1 table).

    The WTA index with one table shares the MP-WTA table's hash functions,
    so the MP-WTA row at any probe budget dominates the single-table WTA
    row by construction (its probe set is a superset).
    """
    corpus, queries = rank_corpus(n_points, n_queries, dim, clusters, seed)
    truth = true_neighbors(corpus, queries, top_k)

    rows: list[BenchRow] = []
    bucket_count = m ** k

    # Multi-table WTA: table j uses an independent hash family; a budget of
    # t tables probes one bucket in each of the first t tables.
    indexes = [
        MPWTAIndex(k=k, m=m, random_state=seed + j).fit(corpus)
        for j in range(max_tables)
    ]
    per_table_hits = []
    for j in range(max_tables):
        per_table_hits.append(indexes[j].query(queries, probes=1))
    table_budgets = sorted({1, 2, 5, 10, 20, max_tables})
    for t in table_budgets:
        if t > max_tables:
            continue
        rec = 0.0
        for qi in range(len(queries)):
            found = np.unique(np.concatenate([per_table_hits[j][qi] for j in range(t)]))
            rec += recall_of(found, truth[qi])
        rows.append(BenchRow("wta", t, t, rec / len(queries), t * bucket_count))

    # Single-table MP-WTA at increasing probe budgets.
    mp = indexes[0]
    probe_budgets = sorted({1, 3, 9, mp.probe_budget})
    for pb in probe_budgets:
        if pb > mp.probe_budget:
            continue
        rec = 0.0
        for qi, found in enumerate(mp.query(queries, probes=pb)):
            rec += recall_of(found, truth[qi])
        rows.append(BenchRow("mp-wta", 1, pb, rec / len(queries), bucket_count))
    return rows


def bench_csv(rows: list[BenchRow]) -> str:
    return "method,tables,probes,recall,table_mem\n" + "\n".join(
        r.as_csv() for r in rows
    ) + "\n"
