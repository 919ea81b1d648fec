"""Exact top-k nearest-neighbor search under L2 distance.

The search runs in two passes per block of queries:

1. a coarse pass computes squared distances through the expansion
   ``|q|^2 + |r|^2 - 2<q, r>`` with float32 matrix products over reference
   chunks, keeping every reference whose coarse distance lies within a
   rounding-error margin of the running k-th best;
2. the surviving candidates are re-scored with float64 direct differences
   and ordered by (distance, reference row).

The margin is a bound on the float32 error, so the candidate set always
contains the exact top-k. Because the final ordering comes from the exact
pass, results do not depend on thread count, chunking or BLAS internals.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, EmptyInputError, InputError
from .model import CandidateList, DescriptorSet

QUERY_BLOCK = 256
REF_CHUNK = 16384
THREADS_ENV = "COPYDET_THREADS"


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else $COPYDET_THREADS, else 1."""
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise InputError(f"{THREADS_ENV}={env!r} is not an integer") from None
        else:
            threads = 1
    if threads < 1:
        raise InputError("thread count must be >= 1")
    return threads


@dataclass(frozen=True)
class SearchResult:
    """Per-query neighbor lists, all of length min(k, |refs|).

    ``indices`` are reference row numbers, ``sq_distances`` exact squared L2
    distances (float64). Scores are the negated squared distances.
    """

    query_ids: tuple[str, ...]
    reference_ids: tuple[str, ...]
    indices: np.ndarray
    sq_distances: np.ndarray

    @property
    def k(self) -> int:
        return int(self.indices.shape[1])

    @property
    def distances(self) -> np.ndarray:
        return np.sqrt(self.sq_distances)

    @property
    def scores(self) -> np.ndarray:
        return -self.sq_distances

    def __len__(self) -> int:
        return len(self.query_ids)

    def neighbors(self, i: int) -> list[tuple[str, float, float]]:
        """``(reference_id, distance, score)`` for query row ``i``."""
        d2 = self.sq_distances[i]
        return [
            (self.reference_ids[j], float(np.sqrt(x)), float(-x))
            for j, x in zip(self.indices[i].tolist(), d2.tolist())
        ]

    def to_candidates(self) -> CandidateList:
        nq, k = self.indices.shape
        if nq == 0 or k == 0:
            return CandidateList.empty()
        qids = np.repeat(np.asarray(self.query_ids), k)
        rids = np.asarray(self.reference_ids)[self.indices.reshape(-1)]
        return CandidateList(qids, rids, -self.sq_distances.reshape(-1), check=False)


def _coarse_margin(qn: np.ndarray, rn_max: float, dim: int, eps: float) -> np.ndarray:
    # Worst-case rounding of a length-dim dot product plus the two norms, doubled
    # because both the candidate and the k-th best carry an error.
    return 2.0 * (dim + 4) * eps * (qn + rn_max + 2.0 * np.sqrt(qn * rn_max)) + 1e-30


def _search_block(Q, R, rn, rn_max, k, compensated):
    """Exact top-k for one block of query rows. Returns (indices, sq_dist)."""
    nq, dim = Q.shape
    n = R.shape[0]
    ctype = np.float64 if compensated else np.float32
    eps = float(np.finfo(ctype).eps)
    Qc = Q.astype(ctype, copy=False)
    qn = np.einsum("ij,ij->i", Qc, Qc)
    margin = _coarse_margin(qn.astype(np.float64), rn_max, dim, eps)

    cand_rows, cand_cols, cand_val = [], [], []
    for start in range(0, n, REF_CHUNK):
        stop = min(start + REF_CHUNK, n)
        Rc = R[start:stop].astype(ctype, copy=False)
        d2 = Qc @ Rc.T
        d2 *= -2.0
        d2 += qn[:, None]
        d2 += rn[start:stop].astype(ctype, copy=False)[None, :]
        np.maximum(d2, 0.0, out=d2)
        kk = min(k, stop - start)
        kth = np.partition(d2, kk - 1, axis=1)[:, kk - 1].astype(np.float64)
        keep = d2 <= (kth + margin).astype(ctype)[:, None]
        rows, cols = np.nonzero(keep)
        cand_rows.append(rows)
        cand_cols.append(cols + start)
        cand_val.append(d2[rows, cols].astype(np.float64))

    rows = np.concatenate(cand_rows)
    cols = np.concatenate(cand_cols)
    vals = np.concatenate(cand_val)
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    bounds = np.searchsorted(rows, np.arange(nq + 1))

    out_idx = np.empty((nq, k), dtype=np.int64)
    out_d2 = np.empty((nq, k), dtype=np.float64)
    Q64 = Q.astype(np.float64)
    for i in range(nq):
        a, b = bounds[i], bounds[i + 1]
        c, v = cols[a:b], vals[a:b]
        kth = np.partition(v, k - 1)[k - 1]
        c = c[v <= kth + margin[i]]
        diff = R[c].astype(np.float64) - Q64[i]
        exact = np.einsum("ij,ij->i", diff, diff)
        sel = np.lexsort((c, exact))[:k]
        out_idx[i] = c[sel]
        out_d2[i] = exact[sel]
    return out_idx, out_d2


def knn_search(
    queries: DescriptorSet,
    refs: DescriptorSet,
    k: int,
    *,
    threads: int | None = None,
    compensated: bool = False,
) -> SearchResult:
    """Exact k nearest references for every query, ties by reference row.

    ``compensated=True`` runs the coarse pass in float64; the final
    distances are float64-exact either way.
    """
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise InputError(f"k must be a positive integer, got {k!r}")
    if len(refs) == 0:
        raise EmptyInputError("reference set is empty")
    if len(queries) and queries.dim != refs.dim:
        raise DimensionMismatchError(f"query dim {queries.dim} != reference dim {refs.dim}")
    threads = resolve_threads(threads)
    k = int(min(k, len(refs)))
    nq = len(queries)
    if nq == 0:
        return SearchResult((), refs.ids, np.zeros((0, k), np.int64), np.zeros((0, k)))

    R = refs.data
    ctype = np.float64 if compensated else np.float32
    Rc = R.astype(ctype, copy=False)
    rn = np.einsum("ij,ij->i", Rc, Rc)
    rn_max = float(rn.max())
    Q = queries.data
    blocks = [(s, min(s + QUERY_BLOCK, nq)) for s in range(0, nq, QUERY_BLOCK)]

    def run(b):
        return _search_block(Q[b[0]:b[1]], R, rn, rn_max, k, compensated)

    if threads == 1 or len(blocks) == 1:
        parts = [run(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, blocks))
    indices = np.concatenate([p[0] for p in parts])
    sq = np.concatenate([p[1] for p in parts])
    indices.flags.writeable = False
    sq.flags.writeable = False
    return SearchResult(queries.ids, refs.ids, indices, sq)


def pairwise_scores(
    queries: DescriptorSet, refs: DescriptorSet, pairs
) -> CandidateList:
    """Negated squared L2 distance for each requested (query_id, reference_id)."""
    pairs = list(pairs)
    if not pairs:
        return CandidateList.empty()
    if queries.dim != refs.dim:
        raise DimensionMismatchError(f"query dim {queries.dim} != reference dim {refs.dim}")
    qids = [p[0] for p in pairs]
    rids = [p[1] for p in pairs]
    qi = queries.rows(qids)
    ri = refs.rows(rids)
    diff = refs.data[ri].astype(np.float64) - queries.data[qi].astype(np.float64)
    return CandidateList(qids, rids, -np.einsum("ij,ij->i", diff, diff))
