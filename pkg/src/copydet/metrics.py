"""Ranking metrics: per-query AP, mAP over query subsets, and global micro-AP.

Orderings are fully deterministic. Within one query, candidates are ranked
by score descending then reference id ascending. Globally (micro-AP) the
order is score descending, then query id, then reference id.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from .errors import DuplicatePairError, EmptyInputError, InputError
from .model import CandidateList, GroundTruth, first_duplicate_pair


@dataclass(frozen=True)
class PrPoint:
    rank: int
    precision: float
    recall: float


class PrCurve:
    """Precision/recall after each rank of the globally sorted candidate list."""

    def __init__(self, precision: np.ndarray, recall: np.ndarray):
        self.precision = np.asarray(precision, dtype=np.float64)
        self.recall = np.asarray(recall, dtype=np.float64)

    @property
    def rank(self) -> np.ndarray:
        return np.arange(1, len(self.precision) + 1)

    def __len__(self) -> int:
        return len(self.precision)

    def __iter__(self) -> Iterator[PrPoint]:
        for r, p, c in zip(range(1, len(self) + 1), self.precision.tolist(), self.recall.tolist()):
            yield PrPoint(r, p, c)

    def __getitem__(self, i) -> PrPoint:
        i = range(len(self))[i]
        return PrPoint(i + 1, float(self.precision[i]), float(self.recall[i]))

    def to_csv(self, path_or_buf=None) -> str | None:
        buf = io.StringIO()
        buf.write("rank,precision,recall\n")
        for r, p, c in zip(range(1, len(self) + 1), self.precision.tolist(), self.recall.tolist()):
            buf.write(f"{r},{p!r},{c!r}\n")
        if path_or_buf is None:
            return buf.getvalue()
        with open(path_or_buf, "w", encoding="utf-8", newline="") as f:
            f.write(buf.getvalue())
        return None


# ---------------------------------------------------------------------------
# per-query AP
# ---------------------------------------------------------------------------


def average_precision(relevant_in_rank_order, n_relevant: int) -> float:
    """Uninterpolated AP of a ranked list of 0/1 relevance flags.

    With a single relevant item at rank r this is exactly 1/r.
    """
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    if n_relevant < 1:
        raise InputError("n_relevant must be >= 1")
    if rel.sum() > n_relevant:
        raise InputError("more relevant items retrieved than exist")
    if not rel.any():
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.nonzero(rel)[0] + 1
    return math.fsum((hits[rel] / ranks).tolist()) / n_relevant


def per_query_ap(candidates: CandidateList, gt: GroundTruth) -> float:
    """AP of one query's candidate list: 1/rank of its true reference, 0 if absent."""
    if len(candidates) == 0:
        raise EmptyInputError("per_query_ap needs at least one candidate; use per_query_aps for missing queries")
    qids = np.unique(candidates.query_ids)
    if len(qids) != 1:
        raise InputError(f"candidates span {len(qids)} queries, expected one")
    q = str(qids[0])
    if q not in gt:
        raise InputError(f"query {q!r} has no ground-truth match")
    true_ref = gt[q]
    hit = np.nonzero(candidates.reference_ids == true_ref)[0]
    if len(hit) == 0:
        return 0.0
    s_true = candidates.scores[hit[0]]
    s = candidates.scores
    better = np.count_nonzero(s > s_true) + np.count_nonzero((s == s_true) & (candidates.reference_ids < true_ref))
    return 1.0 / (better + 1)


def true_match_ranks(candidates: CandidateList, gt: GroundTruth) -> dict[str, int]:
    """Rank of the true reference for every ground-truth query that retrieved it."""
    if len(candidates) == 0:
        return {}
    q, r, s = candidates.query_ids, candidates.reference_ids, candidates.scores
    o = np.lexsort((r, -s, q))
    qs, rs = q[o], r[o]
    start = np.ones(len(qs), dtype=bool)
    start[1:] = qs[1:] != qs[:-1]
    first = np.maximum.accumulate(np.where(start, np.arange(len(qs)), 0))
    pos = np.arange(len(qs)) - first + 1
    truth = np.array([gt.get(x) for x in qs.tolist()], dtype=object)
    tp = np.nonzero(rs.astype(object) == truth)[0]
    return {str(qs[i]): int(pos[i]) for i in tp.tolist()}


def per_query_aps(candidates: CandidateList, gt: GroundTruth) -> dict[str, float]:
    """AP for every query in ``gt`` (0.0 when its match was not retrieved)."""
    ranks = true_match_ranks(candidates, gt)
    return {q: (1.0 / ranks[q] if q in ranks else 0.0) for q in sorted(gt)}


# ---------------------------------------------------------------------------
# mAP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeanAP:
    value: float
    n: int

    def __float__(self):
        return self.value


def mean_ap(aps: Mapping[str, float] | Iterable[float], subset: Iterable[str] | None = None) -> MeanAP:
    """Arithmetic mean of per-query APs, optionally restricted to ``subset``."""
    if isinstance(aps, Mapping):
        if subset is None:
            values = [aps[k] for k in sorted(aps)]
        else:
            keys = sorted(set(subset))
            missing = [k for k in keys if k not in aps]
            if missing:
                raise InputError(f"{len(missing)} subset queries have no AP (e.g. {missing[0]!r})")
            values = [aps[k] for k in keys]
    else:
        if subset is not None:
            raise InputError("subset selection needs a query-id mapping")
        values = list(aps)
    if not values:
        raise EmptyInputError("mAP over an empty query set")
    return MeanAP(math.fsum(values) / len(values), len(values))


# ---------------------------------------------------------------------------
# micro-AP
# ---------------------------------------------------------------------------


def _true_flags(query_ids: np.ndarray, reference_ids: np.ndarray, gt: Mapping[str, str]) -> np.ndarray:
    truth = [gt.get(q) for q in query_ids.tolist()]
    return np.fromiter((t is not None and t == r for t, r in zip(truth, reference_ids.tolist())), dtype=bool, count=len(truth))


def micro_ap(
    candidates: CandidateList, gt: GroundTruth, total_positives: int | None = None
) -> tuple[float, PrCurve]:
    """Micro-average precision over the globally sorted candidate list.

    Sum of precision at every true-positive position divided by
    ``total_positives`` (defaults to the number of ground-truth pairs), so
    unretrieved pairs cost recall.
    """
    if total_positives is None:
        total_positives = len(gt)
    if total_positives < 1:
        raise InputError("total_positives must be >= 1")
    if len(candidates) == 0:
        return 0.0, PrCurve(np.zeros(0), np.zeros(0))
    dup = first_duplicate_pair(candidates.query_ids, candidates.reference_ids)
    if dup is not None:
        raise DuplicatePairError(f"duplicate candidate pair ({dup[0]}, {dup[1]})")
    c = candidates.sorted_globally()
    tp = _true_flags(c.query_ids, c.reference_ids, gt)
    n_tp = int(tp.sum())
    if n_tp > total_positives:
        raise InputError(f"{n_tp} true pairs retrieved but total_positives={total_positives}")
    hits = np.cumsum(tp)
    precision = hits / np.arange(1, len(tp) + 1)
    recall = hits / total_positives
    ap = math.fsum(precision[tp].tolist()) / total_positives
    return ap, PrCurve(precision, recall)


class MicroAPAccumulator:
    """Micro-AP over candidate blocks that arrive already in global order.

    Feeding the globally sorted list in consecutive pieces gives exactly the
    value :func:`micro_ap` computes on the whole list.
    """

    def __init__(self, gt: Mapping[str, str], total_positives: int | None = None):
        self.gt = gt
        self.total_positives = len(gt) if total_positives is None else total_positives
        if self.total_positives < 1:
            raise InputError("total_positives must be >= 1")
        self.seen = 0
        self.hits = 0
        self._terms: list[float] = []

    def update(self, query_ids: np.ndarray, reference_ids: np.ndarray) -> None:
        tp = _true_flags(np.asarray(query_ids), np.asarray(reference_ids), self.gt)
        if not len(tp):
            return
        hits = self.hits + np.cumsum(tp)
        ranks = self.seen + np.arange(1, len(tp) + 1)
        self._terms.extend((hits[tp] / ranks[tp]).tolist())
        self.seen += len(tp)
        self.hits = int(hits[-1])

    @property
    def value(self) -> float:
        if self.hits > self.total_positives:
            raise InputError(f"{self.hits} true pairs retrieved but total_positives={self.total_positives}")
        return math.fsum(self._terms) / self.total_positives


# ---------------------------------------------------------------------------
# mAP vs micro-AP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MapComparison:
    rows: tuple[tuple[str, float, int], ...]  # (subset, mAP, n)
    micro_ap: float

    def to_dict(self) -> dict:
        return {
            "micro_ap": self.micro_ap,
            "subsets": [{"subset": s, "n": n, "mAP": m} for s, m, n in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subset", "n", "mAP"])
        for s, m, n in self.rows:
            w.writerow([s, n, repr(m)])
        return buf.getvalue()

    @property
    def gap(self) -> float:
        """mAP of the first subset minus micro-AP."""
        return self.rows[0][1] - self.micro_ap


def map_vs_microap_report(
    candidates: CandidateList,
    gt: GroundTruth,
    subsets: Mapping[str, Iterable[str]] | None = None,
) -> MapComparison:
    """mAP per query subset next to the global micro-AP.

    A large gap between the two points at scores that are poorly calibrated
    across queries. ``subsets`` defaults to ``{"all": every matched query}``.
    """
    if len(gt) == 0:
        raise EmptyInputError("ground truth is empty")
    aps = per_query_aps(candidates, gt)
    if subsets is None:
        subsets = {"all": list(gt)}
    rows = []
    for name, ids in subsets.items():
        ids = list(ids)
        outside = [q for q in ids if q not in gt]
        if outside:
            raise InputError(f"subset {name!r} contains unmatched query {outside[0]!r}")
        m = mean_ap(aps, ids)
        rows.append((str(name), m.value, m.n))
    mu, _ = micro_ap(candidates, gt)
    return MapComparison(tuple(rows), mu)
