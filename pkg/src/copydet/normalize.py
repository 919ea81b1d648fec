"""Score and descriptor normalization against a background (training) set.

Matching-track form: every score of query q is shifted by its background
similarity, ``s(q, r) - beta * b(q)``, where ``b(q)`` is the (weighted) mean
of the n highest similarities between q and the background set. Similarity
is the negated squared L2 distance, as in :mod:`copydet.knn`.

Descriptor-track form, applied to the vectors before any search:

* subtract: ``v <- unit(v - beta * m(v))`` with ``m(v)`` the mean of the n
  nearest background vectors;
* rescale: ``v <- v * dbar(v) / c`` with ``dbar(v)`` the mean distance to the
  n nearest background vectors and ``c`` the mean of ``dbar`` over the set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ComputationError, DimensionMismatchError, InputError
from .knn import knn_search
from .model import CandidateList, DescriptorSet

DEFAULT_N = 10
DEFAULT_BETA = 1.0


@dataclass(frozen=True)
class BackgroundIndex:
    train: DescriptorSet
    n: int = DEFAULT_N
    beta: float = DEFAULT_BETA
    weights: tuple[float, ...] | None = None  # per-rank weights; None = plain mean

    def __post_init__(self):
        if len(self.train) == 0:
            raise InputError("background set is empty")
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise InputError(f"background neighbor count must be >= 1, got {self.n!r}")
        if self.n > len(self.train):
            raise InputError(f"background neighbor count {self.n} exceeds background size {len(self.train)}")
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise InputError(f"beta must be a finite value >= 0, got {self.beta!r}")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if len(w) != self.n:
                raise InputError(f"{len(w)} rank weights for n={self.n}")
            if not all(math.isfinite(x) for x in w):
                raise InputError("rank weights must be finite")
            object.__setattr__(self, "weights", w)

    @property
    def weight_vector(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.n, 1.0 / self.n)
        return np.asarray(self.weights, dtype=np.float64)


def _check_dim(ds: DescriptorSet, bg: BackgroundIndex):
    if len(ds) and ds.dim != bg.train.dim:
        raise DimensionMismatchError(f"descriptor dim {ds.dim} != background dim {bg.train.dim}")


def background_similarity(queries: DescriptorSet, bg: BackgroundIndex, *, threads=None) -> np.ndarray:
    """b(q) for every row of ``queries``: weighted mean of its top-n background scores."""
    _check_dim(queries, bg)
    res = knn_search(queries, bg.train, bg.n, threads=threads)
    return res.scores @ bg.weight_vector


def normalize_scores(
    candidates: CandidateList, queries: DescriptorSet, bg: BackgroundIndex, *, threads=None
) -> CandidateList:
    """Shift each query's scores by ``beta`` times its background similarity."""
    if bg.beta == 0 or len(candidates) == 0:
        return candidates
    qids = np.unique(candidates.query_ids)
    sub = queries.subset(qids.tolist())
    b = background_similarity(sub, bg, threads=threads)
    pos = np.searchsorted(qids, candidates.query_ids)
    return candidates.with_scores(candidates.scores - bg.beta * b[pos])


def _nearest_background(ds: DescriptorSet, bg: BackgroundIndex, threads):
    _check_dim(ds, bg)
    return knn_search(ds, bg.train, bg.n, threads=threads)


def normalize_descriptor_subtract(ds: DescriptorSet, bg: BackgroundIndex, *, threads=None) -> DescriptorSet:
    """``unit(v - beta * m(v))`` row by row; output rows have unit L2 norm."""
    if len(ds) == 0:
        return ds
    V = ds.data.astype(np.float64)
    if bg.beta != 0:
        res = _nearest_background(ds, bg, threads)
        T = bg.train.data.astype(np.float64)
        w = bg.weight_vector
        m = np.einsum("k,ikd->id", w, T[res.indices])
        V = V - bg.beta * m
    norms = np.sqrt(np.einsum("ij,ij->i", V, V))
    bad = np.nonzero(~(norms > 1e-12 * max(1.0, float(np.abs(V).max(initial=0.0)))))[0]
    if len(bad):
        ids = [ds.ids[i] for i in bad[:10]]
        raise ComputationError(
            f"{len(bad)} descriptor(s) vanish after background subtraction: {', '.join(ids)}"
        )
    return ds.with_data((V / norms[:, None]).astype(np.float32))


def background_distance(ds: DescriptorSet, bg: BackgroundIndex, *, threads=None) -> np.ndarray:
    """dbar(v): weighted mean L2 distance to the n nearest background vectors."""
    res = _nearest_background(ds, bg, threads)
    return res.distances @ bg.weight_vector


def normalize_descriptor_rescale(ds: DescriptorSet, bg: BackgroundIndex, *, threads=None) -> DescriptorSet:
    """Scale each vector by ``dbar(v) / mean(dbar)``.

    Vectors close to the background mass shrink, isolated vectors grow.
    ``beta`` interpolates the exponent: the factor is ``(dbar / c) ** beta``.
    """
    if len(ds) == 0 or bg.beta == 0:
        return ds
    d = background_distance(ds, bg, threads=threads)
    zero = np.nonzero(~(d > 0))[0]
    if len(zero):
        ids = [ds.ids[i] for i in zero[:10]]
        raise ComputationError(f"{len(zero)} descriptor(s) coincide with the background: {', '.join(ids)}")
    c = math.fsum(d.tolist()) / len(d)
    g = d / c
    if bg.beta != 1:
        g = g ** bg.beta
    return ds.with_data((ds.data.astype(np.float64) * g[:, None]).astype(np.float32))
