"""Candidate evaluation for files larger than the in-memory row budget.

The candidate CSV is read in blocks. Each block is written twice as a
sorted run: once by (query, reference) for duplicate detection and
per-query ranks, once in global (score desc, query, reference) order for
micro-AP. The runs are then merged with ``heapq.merge``. Results equal the
in-memory path exactly.
"""

from __future__ import annotations

import csv
import heapq
import os
import tempfile
from collections.abc import Iterator, Mapping
from itertools import groupby

import numpy as np

from .errors import DuplicatePairError, InputError
from .io import iter_candidate_chunks
from .metrics import MicroAPAccumulator

MERGE_BATCH = 65536


def _write_run(path, q, r, s, order):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        for i in order.tolist():
            w.writerow((q[i], r[i], repr(float(s[i]))))


def _read_run(path) -> Iterator[tuple[str, str, float]]:
    with open(path, newline="", encoding="utf-8") as f:
        for q, r, s in csv.reader(f):
            yield q, r, float(s)


def evaluate_streaming(path, gt: Mapping[str, str], budget: int, tmpdir=None):
    """``(aps, micro_ap, n_rows)`` for the candidate file at ``path``."""
    if budget < 1:
        raise InputError("row budget must be >= 1")
    with tempfile.TemporaryDirectory(dir=tmpdir, prefix="copydet-sort-") as tmp:
        by_pair, by_score = [], []
        n_rows = 0
        for i, chunk in enumerate(iter_candidate_chunks(path, budget)):
            q = chunk.query_ids.tolist()
            r = chunk.reference_ids.tolist()
            s = chunk.scores
            a = os.path.join(tmp, f"pair{i:06d}.csv")
            b = os.path.join(tmp, f"score{i:06d}.csv")
            _write_run(a, q, r, s, np.lexsort((chunk.reference_ids, chunk.query_ids)))
            _write_run(b, q, r, s, chunk.global_order())
            by_pair.append(a)
            by_score.append(b)
            n_rows += len(chunk)

        ranks: dict[str, int] = {}
        merged = heapq.merge(*(_read_run(p) for p in by_pair), key=lambda t: (t[0], t[1]))
        for qid, group in groupby(merged, key=lambda t: t[0]):
            rows = list(group)
            for x, y in zip(rows, rows[1:]):
                if x[1] == y[1]:
                    raise DuplicatePairError(f"duplicate candidate pair ({qid}, {x[1]})")
            truth = gt.get(qid)
            if truth is None:
                continue
            hit = [t for t in rows if t[1] == truth]
            if not hit:
                continue
            st = hit[0][2]
            ranks[qid] = 1 + sum(1 for t in rows if t[2] > st or (t[2] == st and t[1] < truth))
        aps = {q: (1.0 / ranks[q] if q in ranks else 0.0) for q in sorted(gt)}

        acc = MicroAPAccumulator(gt)
        merged = heapq.merge(*(_read_run(p) for p in by_score), key=lambda t: (-t[2], t[0], t[1]))
        qs, rs = [], []
        for q, r, _ in merged:
            qs.append(q)
            rs.append(r)
            if len(qs) >= MERGE_BATCH:
                acc.update(np.array(qs, dtype=object), np.array(rs, dtype=object))
                qs, rs = [], []
        if qs:
            acc.update(np.array(qs, dtype=object), np.array(rs, dtype=object))
        mu = acc.value if n_rows else 0.0
    return aps, mu, n_rows
