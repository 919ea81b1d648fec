"""Additive penalty model and marginalized mAP.

Each transformation t carries a penalty P_t and a query that went through
steps t_1..t_N is modelled as ``AP = 1 - sum_i P_{t_i}``. The penalties are
fit by (optionally ridge-regularized) least squares on the per-query APs of
automatically edited queries. There is deliberately no intercept: the model
pins it at 1.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, InputError, SingularSystemError
from .metrics import mean_ap
from .model import PenaltyModel, QueryMetadata, Registry, default_registry
from .table import Table

DEFAULT_LAMBDA = 1e-6
RANK_TOL = 1e-10
CROP_BINS = (0.0, 0.06, 0.12, 0.25, 0.5, 1.0)
OVERLAY_BINS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class DesignMatrix:
    query_ids: tuple[str, ...]
    names: tuple[str, ...]
    X: np.ndarray  # (n_queries, n_names) 0/1
    target: np.ndarray  # 1 - AP

    @property
    def counts(self) -> dict[str, int]:
        return dict(zip(self.names, self.X.sum(axis=0).astype(int).tolist()))

    def take(self, rows) -> "DesignMatrix":
        rows = np.asarray(rows)
        return DesignMatrix(tuple(self.query_ids[i] for i in rows), self.names, self.X[rows], self.target[rows])


def _by_id(metadata: Iterable[QueryMetadata]) -> dict[str, QueryMetadata]:
    out = {}
    for m in metadata:
        if m.query_id in out:
            raise InputError(f"duplicate metadata for query {m.query_id!r}")
        out[m.query_id] = m
    return out


def build_design(
    metadata: Iterable[QueryMetadata],
    aps: Mapping[str, float],
    registry: Registry | None = None,
) -> DesignMatrix:
    """Indicator matrix over the transformations that occur, target 1 - AP.

    Only automatically edited queries enter; manual queries are skipped
    because they carry no step metadata.
    """
    registry = registry or default_registry()
    meta = _by_id(metadata)
    rows = []
    for q in sorted(aps):
        m = meta.get(q)
        if m is None:
            raise InputError(f"query {q!r} has an AP but no metadata")
        if m.edit_mode != "automatic":
            continue
        if not m.steps:
            raise InputError(f"automatic query {q!r} has an AP but no transformation steps")
        rows.append((q, m.transformation_names))
    present = {n for _, names in rows for n in names}
    for n in present:
        registry[n]  # raises on unknown names
    names = tuple(n for n in registry.names if n in present)
    col = {n: j for j, n in enumerate(names)}
    X = np.zeros((len(rows), len(names)), dtype=np.float64)
    for i, (_, steps) in enumerate(rows):
        for n in steps:
            X[i, col[n]] = 1.0
    target = np.array([1.0 - aps[q] for q, _ in rows], dtype=np.float64)
    return DesignMatrix(tuple(q for q, _ in rows), names, X, target)


def _cholesky_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    # cholesky raises LinAlgError when A is not positive definite
    L = np.linalg.cholesky(A)
    return np.linalg.solve(L.T, np.linalg.solve(L, b))


def fit_penalties(d: DesignMatrix, lam: float = DEFAULT_LAMBDA) -> PenaltyModel:
    """Solve ``min_p |target - X p|^2 + lam |p|^2`` through the normal equations."""
    if not (lam >= 0 and math.isfinite(lam)):
        raise InputError(f"lambda must be finite and >= 0, got {lam!r}")
    n_rows, n_cols = d.X.shape
    if n_cols == 0:
        raise EmptyInputError("design matrix has no columns")
    if n_rows < n_cols and lam == 0:
        raise SingularSystemError(f"{n_rows} rows for {n_cols} unknowns needs lambda > 0")
    G = d.X.T @ d.X
    A = G + lam * np.eye(n_cols)
    b = d.X.T @ d.target
    # deficiency is a property of the data, judged before the ridge term
    eig = np.linalg.eigvalsh(G)
    rank_deficient = bool(eig[0] < RANK_TOL * eig[-1]) if eig[-1] > 0 else True
    if rank_deficient and lam == 0:
        raise SingularSystemError("normal equations are singular; use lambda > 0")
    try:
        p = _cholesky_solve(A, b)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"normal equations not positive definite: {e}") from e
    resid = d.target - d.X @ p
    return PenaltyModel(
        penalties=dict(zip(d.names, p.tolist())),
        residual_norm=float(np.sqrt(resid @ resid)),
        rank_deficient=rank_deficient,
        regularization=float(lam),
        n_queries=d.counts,
    )


def penalty_table(model: PenaltyModel, registry: Registry | None = None) -> Table:
    registry = registry or default_registry()
    t = Table("penalties", ["transformation", "class", "n_queries", "penalty"])
    for name, p in model.penalties.items():
        t.rows.append({
            "transformation": name,
            "class": registry[name].cls,
            "n_queries": model.n_queries.get(name, 0),
            "penalty": p,
        })
    t.meta = {
        "regularization": model.regularization,
        "residual_norm": model.residual_norm,
        "rank_deficient": model.rank_deficient,
    }
    return t


# ---------------------------------------------------------------------------
# marginalized mAP
# ---------------------------------------------------------------------------

GroupFn = Callable[[QueryMetadata], "Hashable | Sequence[Hashable] | None"]


def order_groups(rows: list[dict]) -> list[dict]:
    """Descending n, then group key as text."""
    return sorted(rows, key=lambda r: (-r["n"], str(r["group"])))


def marginalized_map(
    metadata: Iterable[QueryMetadata],
    aps: Mapping[str, float],
    group_fn: GroupFn,
    *,
    name: str = "marginalized",
    order: Sequence | None = None,
) -> Table:
    """mAP within groups of queries sharing a characteristic.

    ``group_fn`` returns a key, a list of keys (the query joins several
    groups) or None (query left out). Rows are ordered by descending n unless
    ``order`` lists the keys explicitly.
    """
    meta = _by_id(metadata)
    groups: dict = {}
    for q in sorted(aps):
        m = meta.get(q)
        if m is None:
            continue
        keys = group_fn(m)
        if keys is None:
            continue
        if isinstance(keys, (str, int, float)) or not isinstance(keys, Iterable):
            keys = [keys]
        for k in keys:
            groups.setdefault(k, {})[q] = aps[q]
    if not groups:
        raise EmptyInputError("no query falls in any group")
    rows = []
    for k, sub in groups.items():
        m = mean_ap(sub)
        rows.append({"group": k, "n": m.n, "mAP": m.value})
    if order is None:
        rows = order_groups(rows)
    else:
        rank = {k: i for i, k in enumerate(order)}
        rows.sort(key=lambda r: (rank.get(r["group"], len(rank)), str(r["group"])))
    return Table(name, ["group", "n", "mAP"], rows)


# canonical group functions


def by_transformation(m: QueryMetadata):
    return list(m.transformation_names) or None


def by_step_count(m: QueryMetadata):
    return len(m.steps) if m.edit_mode == "automatic" and m.steps else None


def by_attack_model(m: QueryMetadata):
    return m.attack_model


def bin_label(lo: float, hi: float, first: bool) -> str:
    return f"{'[' if first else '('}{lo:g},{hi:g}]"


def bucket(value: float, edges: Sequence[float]) -> str | None:
    """Label of the bin holding ``value``; bins are (lo, hi], the first one closed."""
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        if (lo < value <= hi) or (i == 0 and value == lo):
            return bin_label(lo, hi, i == 0)
    return None


def by_intensity_bucket(transformation: str, edges: Sequence[float] = CROP_BINS) -> GroupFn:
    def fn(m: QueryMetadata):
        s = m.step(transformation)
        if s is None or s.intensity is None:
            return None
        return bucket(s.intensity, edges)

    return fn


def by_intensity_kind(kind: str, edges: Sequence[float], registry: Registry | None = None) -> GroupFn:
    """Bucket by the intensity of whichever step has intensity kind ``kind``."""
    registry = registry or default_registry()

    def fn(m: QueryMetadata):
        for s in m.steps:
            if s.intensity is not None and registry[s.name].intensity == kind:
                return bucket(s.intensity, edges)
        return None

    return fn


def bin_labels(edges: Sequence[float]) -> list[str]:
    return [bin_label(edges[i], edges[i + 1], i == 0) for i in range(len(edges) - 1)]
