"""Core data types: descriptors, ground truth, query provenance, candidates.

All containers are immutable after construction. Arrays handed out by them
are flagged read-only so that accidental in-place edits fail loudly.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

from .errors import (
    DimensionMismatchError,
    DuplicateIdError,
    DuplicatePairError,
    InputError,
    NonFiniteValueError,
    UnknownIdError,
)

DEFAULT_MAX_DIM = 256
CLASSES = ("G", "L", "O", "P", "I", "A")
SOURCES = ("face", "generic")
EDIT_MODES = ("manual", "automatic")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# transformation registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformationSpec:
    name: str
    cls: str
    intensity: str | None  # None, "remaining_surface" or "non_source_fraction"
    n_queries: int | None  # population count in the published table, used as sampling weight

    @property
    def intensity_bearing(self) -> bool:
        return self.intensity is not None


class Registry:
    """Name -> class lookup for the known transformations.

    Loaded from a JSON data file so that new transformations can be added
    without touching code.
    """

    def __init__(self, specs: Iterable[TransformationSpec], attack_models: Mapping[str, int] | None = None):
        self._specs: dict[str, TransformationSpec] = {}
        for s in specs:
            if s.cls not in CLASSES:
                raise InputError(f"transformation {s.name!r}: unknown class {s.cls!r}")
            if s.name in self._specs:
                raise InputError(f"transformation {s.name!r} registered twice")
            self._specs[s.name] = s
        self.attack_models: dict[str, int] = dict(attack_models or {})

    @classmethod
    def from_file(cls, path=None) -> "Registry":
        if path is None:
            text = resources.files("copydet").joinpath("data/transformations.json").read_text("utf-8")
        else:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        doc = json.loads(text)
        specs = [
            TransformationSpec(t["name"], t["class"], t.get("intensity"), t.get("n_queries"))
            for t in doc["transformations"]
        ]
        return cls(specs, doc.get("attack_models"))

    def __getitem__(self, name: str) -> TransformationSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise InputError(f"unknown transformation {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._specs

    def __iter__(self) -> Iterator[TransformationSpec]:
        return iter(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)

    @property
    def names(self) -> list[str]:
        return list(self._specs)

    def by_class(self, cls: str) -> list[TransformationSpec]:
        return [s for s in self._specs.values() if s.cls == cls]


_DEFAULT_REGISTRY: Registry | None = None


def default_registry() -> Registry:
    global _DEFAULT_REGISTRY
    if _DEFAULT_REGISTRY is None:
        _DEFAULT_REGISTRY = Registry.from_file()
    return _DEFAULT_REGISTRY


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------


class DescriptorSet:
    """Id-addressed float32 matrix, one row per id."""

    def __init__(self, ids: Iterable[str], data, max_dim: int | None = DEFAULT_MAX_DIM):
        ids = tuple(str(i) for i in ids)
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        if arr.ndim == 1 and len(ids) == 0 and arr.size == 0:
            arr = arr.reshape(0, 0)
        if arr.ndim != 2:
            raise DimensionMismatchError(f"descriptor data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] != len(ids):
            raise DimensionMismatchError(f"{len(ids)} ids but {arr.shape[0]} rows")
        if arr.shape[0] and arr.shape[1] < 1:
            raise DimensionMismatchError("descriptor dimension must be positive")
        if max_dim is not None and arr.shape[1] > max_dim:
            raise DimensionMismatchError(f"dimension {arr.shape[1]} exceeds maximum {max_dim}")
        if not np.isfinite(arr).all():
            row = int(np.nonzero(~np.isfinite(arr).all(axis=1))[0][0])
            raise NonFiniteValueError(f"non-finite value in descriptor {ids[row]!r}")
        if len(set(ids)) != len(ids):
            seen = set()
            for i in ids:
                if i in seen:
                    raise DuplicateIdError(f"duplicate descriptor id {i!r}")
                seen.add(i)
        if arr is data:
            arr = arr.copy()
        self.ids = ids
        self.data = _frozen(arr)

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __repr__(self):
        return f"DescriptorSet(n={len(self)}, dim={self.dim})"

    @cached_property
    def index(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.ids)}

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        """Row indices for ``ids``; raises UnknownIdError on the first miss."""
        idx = self.index
        out = []
        for i in ids:
            try:
                out.append(idx[i])
            except KeyError:
                raise UnknownIdError(f"unknown descriptor id {i!r}") from None
        return np.asarray(out, dtype=np.int64)

    def vector(self, id_: str) -> np.ndarray:
        return self.data[self.rows([id_])[0]]

    def subset(self, ids: Iterable[str]) -> "DescriptorSet":
        ids = list(ids)
        return DescriptorSet(ids, self.data[self.rows(ids)], max_dim=None)

    def with_data(self, data) -> "DescriptorSet":
        """Same ids, new matrix (e.g. after a normalization)."""
        return DescriptorSet(self.ids, data, max_dim=None)

    def __eq__(self, other):
        if not isinstance(other, DescriptorSet):
            return NotImplemented
        return self.ids == other.ids and np.array_equal(self.data, other.data)

    __hash__ = None


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


class GroundTruth(Mapping):
    """query id -> its single true reference id. Distractors are absent."""

    def __init__(self, pairs: Iterable[tuple[str, str]] | Mapping[str, str] = ()):
        if isinstance(pairs, Mapping):
            pairs = pairs.items()
        d: dict[str, str] = {}
        for q, r in pairs:
            q, r = str(q), str(r)
            if q in d:
                raise DuplicateIdError(f"query {q!r} appears more than once in ground truth")
            d[q] = r
        self._pairs = d

    def __getitem__(self, q):
        return self._pairs[q]

    def __iter__(self):
        return iter(self._pairs)

    def __len__(self):
        return len(self._pairs)

    def __repr__(self):
        return f"GroundTruth(n={len(self)})"

    def pairs(self) -> list[tuple[str, str]]:
        return list(self._pairs.items())


# ---------------------------------------------------------------------------
# query provenance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformationStep:
    name: str
    cls: str
    intensity: float | None = None
    attack_model: str | None = None

    def problems(self, registry: Registry | None = None) -> list[str]:
        registry = registry or default_registry()
        out = []
        if self.name not in registry:
            return [f"unknown transformation {self.name!r}"]
        spec = registry[self.name]
        if self.cls != spec.cls:
            out.append(f"{self.name}: class {self.cls!r} does not match registry class {spec.cls!r}")
        if self.intensity is not None:
            if not spec.intensity_bearing:
                out.append(f"{self.name}: intensity given for a transformation without intensity")
            elif not (isinstance(self.intensity, (int, float)) and 0.0 <= self.intensity <= 1.0):
                out.append(f"{self.name}: intensity {self.intensity!r} outside [0, 1]")
        if self.attack_model is not None and self.cls != "A":
            out.append(f"{self.name}: attack_model only allowed on class A steps")
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "class": self.cls,
            "intensity": self.intensity,
            "attack_model": self.attack_model,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransformationStep":
        intensity = d.get("intensity")
        return cls(
            name=d["name"],
            cls=d["class"],
            intensity=None if intensity is None else float(intensity),
            attack_model=d.get("attack_model"),
        )


def intensity_from_percent(value: float) -> float:
    """Map a percentage (0-100) onto the stored [0, 1] intensity scale."""
    return float(value) / 100.0


@dataclass(frozen=True)
class QueryMetadata:
    query_id: str
    source: str
    edit_mode: str
    editor_id: str | None = None
    steps: tuple[TransformationStep, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not isinstance(self.steps, tuple):
            object.__setattr__(self, "steps", tuple(self.steps))

    def problems(self, registry: Registry | None = None) -> list[str]:
        """Every rule this record breaks (empty list when valid)."""
        out = []
        if self.source not in SOURCES:
            out.append(f"source {self.source!r} not in {SOURCES}")
        if self.edit_mode not in EDIT_MODES:
            out.append(f"edit_mode {self.edit_mode!r} not in {EDIT_MODES}")
        if self.edit_mode == "manual":
            if not self.editor_id:
                out.append("manual query without editor_id")
            if self.steps:
                out.append("manual query must not carry transformation steps")
        elif self.edit_mode == "automatic":
            if self.editor_id is not None:
                out.append("automatic query must not carry an editor_id")
            if len(self.steps) > 6:
                out.append(f"{len(self.steps)} steps (at most 6)")
            classes = [s.cls for s in self.steps]
            dup = sorted({c for c in classes if classes.count(c) > 1})
            if dup:
                out.append(f"more than one step of class {','.join(dup)}")
            if len(self.steps) == 5 and "A" not in classes:
                out.append("5-step sequence without an adversarial (class A) step")
        for s in self.steps:
            out.extend(s.problems(registry))
        return out

    def validate(self, registry: Registry | None = None) -> "QueryMetadata":
        probs = self.problems(registry)
        if probs:
            raise InputError(f"query {self.query_id!r}: " + "; ".join(probs))
        return self

    @property
    def transformation_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.steps)

    def step(self, name: str) -> TransformationStep | None:
        for s in self.steps:
            if s.name == name:
                return s
        return None

    @property
    def attack_model(self) -> str | None:
        for s in self.steps:
            if s.cls == "A":
                return s.attack_model
        return None

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "source": self.source,
            "edit_mode": self.edit_mode,
            "editor_id": self.editor_id,
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "QueryMetadata":
        editor = d.get("editor_id")
        return cls(
            query_id=str(d["query_id"]),
            source=d["source"],
            edit_mode=d["edit_mode"],
            editor_id=None if editor is None else str(editor),
            steps=tuple(TransformationStep.from_dict(s) for s in d.get("steps") or ()),
        )


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------


def _str_array(values) -> np.ndarray:
    a = np.asarray(values)
    if a.size == 0:
        return np.zeros(0, dtype="<U1")
    if a.dtype.kind != "U":
        a = a.astype(str)
    return a


class CandidateList:
    """Scored (query, reference) pairs held as three parallel arrays.

    ``sorted`` is True when the rows are in the global evaluation order:
    score descending, then query id, then reference id ascending.
    """

    def __init__(self, query_ids, reference_ids, scores, *, sorted: bool = False, check: bool = True):
        q = _str_array(query_ids)
        r = _str_array(reference_ids)
        s = np.asarray(scores, dtype=np.float64).reshape(-1)
        if not (q.shape == r.shape == s.shape) or q.ndim != 1:
            raise InputError(
                f"candidate columns have mismatched lengths {q.shape}, {r.shape}, {s.shape}"
            )
        if check:
            if not np.isfinite(s).all():
                k = int(np.nonzero(~np.isfinite(s))[0][0])
                raise NonFiniteValueError(f"non-finite score for pair ({q[k]}, {r[k]})")
            dup = first_duplicate_pair(q, r)
            if dup is not None:
                raise DuplicatePairError(f"duplicate candidate pair ({dup[0]}, {dup[1]})")
        self.query_ids = _frozen(q.copy())
        self.reference_ids = _frozen(r.copy())
        self.scores = _frozen(s.copy())
        self.sorted = bool(sorted)

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[str, str, float]], **kw) -> "CandidateList":
        triples = list(triples)
        if not triples:
            return cls.empty()
        q, r, s = zip(*triples)
        return cls(list(q), list(r), list(s), **kw)

    @classmethod
    def empty(cls) -> "CandidateList":
        return cls(np.zeros(0, "<U1"), np.zeros(0, "<U1"), np.zeros(0), sorted=True)

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    def __iter__(self) -> Iterator[tuple[str, str, float]]:
        for q, r, s in zip(self.query_ids.tolist(), self.reference_ids.tolist(), self.scores.tolist()):
            yield q, r, s

    def __repr__(self):
        return f"CandidateList(n={len(self)}, sorted={self.sorted})"

    def __eq__(self, other):
        if not isinstance(other, CandidateList):
            return NotImplemented
        return (
            np.array_equal(self.query_ids, other.query_ids)
            and np.array_equal(self.reference_ids, other.reference_ids)
            and np.array_equal(self.scores, other.scores)
        )

    __hash__ = None

    def global_order(self) -> np.ndarray:
        """Permutation putting rows in evaluation order (score desc, qid, rid)."""
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.lexsort((self.reference_ids, self.query_ids, -self.scores))

    def sorted_globally(self) -> "CandidateList":
        if self.sorted:
            return self
        o = self.global_order()
        return CandidateList(
            self.query_ids[o], self.reference_ids[o], self.scores[o], sorted=True, check=False
        )

    def with_scores(self, scores) -> "CandidateList":
        return CandidateList(self.query_ids, self.reference_ids, scores, sorted=False)

    def take(self, idx) -> "CandidateList":
        idx = np.asarray(idx)
        return CandidateList(
            self.query_ids[idx], self.reference_ids[idx], self.scores[idx], sorted=False, check=False
        )

    def for_query(self, query_id: str) -> "CandidateList":
        return self.take(np.nonzero(self.query_ids == query_id)[0])

    def group_by_query(self) -> dict[str, np.ndarray]:
        """query id -> row indices (in row order), queries in sorted id order."""
        if len(self) == 0:
            return {}
        o = np.argsort(self.query_ids, kind="stable")
        qs = self.query_ids[o]
        cut = np.nonzero(qs[1:] != qs[:-1])[0] + 1
        bounds = np.concatenate(([0], cut, [len(qs)]))
        return {str(qs[a]): o[a:b] for a, b in zip(bounds[:-1], bounds[1:])}

    @staticmethod
    def concat(parts: Iterable["CandidateList"]) -> "CandidateList":
        parts = [p for p in parts if len(p)]
        if not parts:
            return CandidateList.empty()
        return CandidateList(
            np.concatenate([p.query_ids for p in parts]),
            np.concatenate([p.reference_ids for p in parts]),
            np.concatenate([p.scores for p in parts]),
        )


def first_duplicate_pair(q: np.ndarray, r: np.ndarray):
    if q.size < 2:
        return None
    o = np.lexsort((r, q))
    qs, rs = q[o], r[o]
    same = (qs[1:] == qs[:-1]) & (rs[1:] == rs[:-1])
    if not same.any():
        return None
    k = int(np.nonzero(same)[0][0])
    return str(qs[k]), str(rs[k])


# ---------------------------------------------------------------------------
# fitted penalties
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PenaltyModel:
    penalties: dict[str, float]
    residual_norm: float = 0.0
    rank_deficient: bool = False
    regularization: float = 0.0
    n_queries: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.regularization < 0 or math.isnan(self.regularization):
            raise InputError("regularization must be >= 0")

    def predict_ap(self, names: Iterable[str]) -> float:
        """AP the additive model predicts for a query with these steps."""
        return 1.0 - math.fsum(self.penalties[n] for n in names)

    def vector(self, names: Iterable[str]) -> np.ndarray:
        return np.array([self.penalties[n] for n in names], dtype=np.float64)
