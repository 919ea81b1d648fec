"""Synthetic datasets with planted ground truth, metadata and penalties.

Every matched query is its reference vector pushed along a random unit
direction ``g``: ``q = ref + s * g``. Another reference ``x`` ends up closer
to ``q`` than ``ref`` exactly when ``s > t_x`` with

    t_x = |ref - x|^2 / (2 <x - ref, g>)      (only for <x - ref, g> > 0)

so the rank of the true match is ``1 + #{x : t_x < s}``, a step function of
``s``. Any wanted rank is hit exactly by picking ``s`` between two
consecutive order statistics of ``t``. A target AP ``a`` is then realized in
expectation with a two-point rank mixture whose mean inverse rank is ``a``.

Randomness comes from numpy's Philox counter-based generator; each query
draws from its own substream keyed by (seed, stream id), so results do not
depend on evaluation order or thread count.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .errors import InputError
from .io import ensure_dir, save_descriptors, save_ground_truth, save_metadata
from .knn import resolve_threads
from .model import (
    CLASSES,
    CandidateList,
    DescriptorSet,
    GroundTruth,
    PenaltyModel,
    QueryMetadata,
    Registry,
    TransformationStep,
    default_registry,
)

PRNG_ID = "numpy.random.Philox(4x64-10); key=(seed, stream)"

# stream ids; per-query streams are offset so they never collide
_S_REFS, _S_TRAIN, _S_DISTRACT, _S_LAYOUT, _S_ATTACK, _S_IDS = range(6)
_S_QUERY = 1 << 32
_S_PLANT = 2 << 32

# Penalties of one strong descriptor-track submission (published per
# transformation table), used as realistic planted defaults.
DEFAULT_PENALTIES = {
    "change_aspect_ratio": -0.01, "hflip": -0.01, "pad_square": -0.00,
    "perspective_transform": 0.09, "vflip": 0.04, "pixelization": 0.01,
    "overlay_text": 0.02, "apply_pil_filter": 0.01, "encoding_quality": -0.01,
    "apply_ig_filter": 0.04, "overlay_emoji": 0.06, "grayscale": 0.05,
    "rotate": 0.11, "saturation": 0.05, "shuffle_pixels": 0.04,
    "clip_image_size": -0.12, "random_noise": 0.09, "brightness": 0.10,
    "legofy": 0.08, "apply_ar_effect": 0.10, "convert_color": 0.15,
    "overlay_stripes": 0.22, "blur": 0.19, "adversarial_attack": 0.02,
    "overlay_onto_screenshot": 0.35, "crop": 0.42, "overlay_onto_image": 0.43,
    "overlay_blurred_mask": 0.43, "collage": 0.65,
}

# manual editors: id -> number of queries produced
DEFAULT_EDITORS = {
    "44416353": 793, "45457694": 708, "45085877": 658, "46678181": 456,
    "44404376": 402, "46663385": 324, "46200700": 282, "45583187": 208,
    "45612795": 112, "46220431": 66, "45747509": 31,
}
# per-editor mAP reported for the same submission
DEFAULT_EDITOR_AP = {
    "44416353": 0.5356, "45457694": 0.8637, "45085877": 0.7098, "46678181": 0.7169,
    "44404376": 0.7606, "46663385": 0.8262, "46200700": 0.6442, "45583187": 0.8338,
    "45612795": 0.7024, "46220431": 0.8995, "45747509": 0.6215,
}

DEFAULT_STEP_WEIGHTS = (0.0, 0.15, 0.25, 0.40, 0.13, 0.07)


def substream(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for ``stream`` under master ``seed``."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]))


@dataclass
class SynthConfig:
    n_refs: int = 50_000
    n_queries_matched: int = 5_000
    n_distractors: int = 20_000
    n_train: int = 50_000
    dim: int = 256
    seed: int = 0
    face_fraction: float = 0.05
    manual_fraction: float = 0.404
    step_count_weights: tuple[float, ...] = DEFAULT_STEP_WEIGHTS  # P(|steps| = 1..6)
    planted_penalties: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PENALTIES))
    noise_sigma: float = 0.0
    k: int = 10  # search depth the rank planting is tuned for
    editors: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_EDITORS))
    editor_ap: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_EDITOR_AP))
    attack_models: dict[str, float] | None = None  # None: registry counts
    attack_model_penalty: dict[str, float] = field(default_factory=dict)
    face_penalty: float = 0.0
    intensity_slope: float = 0.0
    n_adversarial: int | None = None  # exact number of automatic queries with a class A step
    max_resample: int = 10_000

    def __post_init__(self):
        self.step_count_weights = tuple(float(w) for w in self.step_count_weights)
        self.planted_penalties = {str(k): float(v) for k, v in self.planted_penalties.items()}
        self.validate()

    def validate(self) -> "SynthConfig":
        for name in ("n_refs", "n_queries_matched", "n_distractors", "n_train", "dim", "k", "max_resample"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise InputError(f"{name} must be a non-negative integer, got {v!r}")
        if self.dim < 2:
            raise InputError("dim must be >= 2")
        if self.k < 1:
            raise InputError("k must be >= 1")
        if self.n_queries_matched > self.n_refs:
            raise InputError("more matched queries than references")
        for name in ("face_fraction", "manual_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must lie in [0, 1], got {v!r}")
        w = self.step_count_weights
        if len(w) != 6 or any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-9:
            raise InputError("step_count_weights must be 6 non-negative weights summing to 1")
        if not self.noise_sigma >= 0:
            raise InputError("noise_sigma must be >= 0")
        if self.manual_fraction > 0 and not self.editors:
            raise InputError("manual queries requested but no editors configured")
        missing = [e for e in self.editors if e not in self.editor_ap]
        if missing:
            raise InputError(f"editor {missing[0]!r} has no planted AP")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_count_weights"] = list(self.step_count_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise InputError(f"unknown config key(s): {', '.join(extra)}")
        return cls(**dict(d))

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        with open(path, encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise InputError(f"{path}: invalid JSON: {e}") from None
        return cls.from_dict(doc)


# ---------------------------------------------------------------------------
# metadata sampling
# ---------------------------------------------------------------------------


def allocate(total: int, weights: Mapping[str, float]) -> dict[str, int]:
    """Split ``total`` proportionally to ``weights`` (largest remainder)."""
    keys = list(weights)
    w = np.array([float(weights[k]) for k in keys])
    if total == 0 or not len(keys):
        return {k: 0 for k in keys}
    if w.sum() <= 0:
        raise InputError("allocation weights sum to zero")
    exact = w / w.sum() * total
    base = np.floor(exact).astype(int)
    rest = total - int(base.sum())
    order = sorted(range(len(keys)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return dict(zip(keys, base.tolist()))


class _Sampler:
    """Draws transformation sequences under the one-per-class rules."""

    def __init__(self, config: SynthConfig, registry: Registry):
        self.config = config
        self.registry = registry
        self.pool: dict[str, tuple[list[str], np.ndarray]] = {}
        self.class_w: dict[str, float] = {}
        for c in CLASSES:
            specs = [s for s in registry.by_class(c) if s.n_queries and s.name in config.planted_penalties]
            if specs:
                w = np.array([s.n_queries for s in specs], dtype=np.float64)
                self.pool[c] = ([s.name for s in specs], w / w.sum())
                self.class_w[c] = float(w.sum())
        if not self.pool:
            raise InputError("no transformation has both a sampling weight and a planted penalty")
        self.count_p = np.asarray(config.step_count_weights)

    def _pick(self, rng, pool: list[str], m: int) -> list[str]:
        # weighted draw without replacement, class weight = summed sampling weight
        w = np.array([self.class_w[c] for c in pool])
        return [pool[i] for i in rng.choice(len(pool), m, replace=False, p=w / w.sum())]

    def _classes(self, rng, n: int, adversarial: bool | None) -> list[str] | None:
        avail = [c for c in CLASSES if c in self.pool]
        others = [c for c in avail if c != "A"]
        if adversarial is True and "A" not in avail:
            return None
        if n == 6:
            return list(CLASSES) if len(avail) == 6 and adversarial is not False else None
        if n == 5:
            if "A" not in avail or adversarial is False or len(others) < 4:
                return None
            return ["A"] + self._pick(rng, others, 4)
        if adversarial is True:
            return ["A"] + self._pick(rng, others, n - 1) if len(others) >= n - 1 else None
        pool = others if adversarial is False else avail
        return self._pick(rng, pool, n) if len(pool) >= n else None

    def steps(self, rng, adversarial: bool | None = None) -> tuple[list[TransformationStep], int]:
        """One valid sequence with 0 <= sum of penalties <= 1, plus the number of rejected draws."""
        rejected = 0
        pen = self.config.planted_penalties
        # the step count is drawn once; rejections only redraw the sequence,
        # so the step-count histogram follows step_count_weights exactly
        p = self.count_p
        if adversarial is False:
            # 5- and 6-step sequences always contain class A
            p = np.where(np.arange(6) < 4, p, 0.0)
            if p.sum() <= 0:
                raise InputError("step_count_weights leave no room for non-adversarial queries")
            p = p / p.sum()
        n = int(rng.choice(6, p=p)) + 1
        while rejected <= self.config.max_resample:
            classes = self._classes(rng, n, adversarial)
            if classes is None:
                rejected += 1
                continue
            names = []
            for c in classes:
                cand, w = self.pool[c]
                names.append(cand[int(rng.choice(len(cand), p=w))])
            order = rng.permutation(len(names))
            names = [names[i] for i in order]
            total = math.fsum(pen[x] for x in names)
            if not 0.0 <= total <= 1.0:
                rejected += 1
                continue
            out = []
            for x in names:
                spec = self.registry[x]
                intensity = float(rng.random()) if spec.intensity_bearing else None
                out.append(TransformationStep(x, spec.cls, intensity))
            return out, rejected
        raise InputError(
            f"no feasible {n}-step sequence after {self.config.max_resample} draws; "
            "planted penalties are too large for the step-count weights"
        )


def _difficulty(step: TransformationStep, registry: Registry) -> float:
    # mean-zero for uniform intensities, so the additive penalties stay unbiased
    kind = registry[step.name].intensity
    if step.intensity is None:
        return 0.0
    x = 1.0 - step.intensity if kind == "remaining_surface" else step.intensity
    return x - 0.5


@dataclass
class Population:
    """Metadata and planted AP for the matched queries (no descriptors)."""

    metadata: list[QueryMetadata]
    expected_ap: dict[str, float]  # noiseless model value
    target_ap: dict[str, float]  # expected value plus noise (unclipped)
    log: dict


def sample_population(config: SynthConfig, query_ids: Sequence[str] | None = None,
                      registry: Registry | None = None) -> Population:
    """Sample metadata and target APs for ``config.n_queries_matched`` queries.

    Face/manual splits, editor volumes and (when ``n_adversarial`` is set)
    the adversarial count are allocated exactly; everything else is drawn
    from per-query substreams.
    """
    registry = registry or default_registry()
    n = config.n_queries_matched
    if query_ids is None:
        query_ids = [f"Q{i:06d}" for i in range(n)]
    if len(query_ids) != n:
        raise InputError("query_ids length differs from n_queries_matched")
    layout = substream(config.seed, _S_LAYOUT)
    n_face = round(n * config.face_fraction)
    n_manual = round(n * config.manual_fraction)
    is_face = np.zeros(n, dtype=bool)
    is_face[layout.permutation(n)[:n_face]] = True
    is_manual = np.zeros(n, dtype=bool)
    manual_rows = layout.permutation(n)[:n_manual]
    is_manual[manual_rows] = True
    editor_of = {}
    if n_manual:
        alloc = allocate(n_manual, config.editors)
        labels = [e for e, c in alloc.items() for _ in range(c)]
        perm = layout.permutation(n_manual)
        for row, j in zip(sorted(manual_rows.tolist()), perm.tolist()):
            editor_of[row] = labels[j]
    auto_rows = [i for i in range(n) if not is_manual[i]]
    adversarial = {}
    if config.n_adversarial is not None:
        if config.n_adversarial > len(auto_rows):
            raise InputError("n_adversarial exceeds the number of automatic queries")
        chosen = set(layout.permutation(len(auto_rows))[: config.n_adversarial].tolist())
        adversarial = {row: (j in chosen) for j, row in enumerate(auto_rows)}

    sampler = _Sampler(config, registry)
    steps_of: dict[int, list[TransformationStep]] = {}
    rejected = 0
    for i in auto_rows:
        rng = substream(config.seed, _S_QUERY + i)
        s, r = sampler.steps(rng, adversarial.get(i))
        steps_of[i] = s
        rejected += r

    # attack models: exact proportional allocation over the adversarial steps
    weights = config.attack_models if config.attack_models is not None else registry.attack_models
    a_rows = [i for i in auto_rows if any(s.cls == "A" for s in steps_of[i])]
    if a_rows and weights:
        alloc = allocate(len(a_rows), weights)
        labels = [m for m, c in alloc.items() for _ in range(c)]
        perm = substream(config.seed, _S_ATTACK).permutation(len(a_rows))
        for row, j in zip(a_rows, perm.tolist()):
            steps_of[row] = [
                TransformationStep(s.name, s.cls, s.intensity, labels[j]) if s.cls == "A" else s
                for s in steps_of[row]
            ]

    metadata, expected, target = [], {}, {}
    pen = config.planted_penalties
    for i, q in enumerate(query_ids):
        source = "face" if is_face[i] else "generic"
        if is_manual[i]:
            e = editor_of[i]
            m = QueryMetadata(q, source, "manual", e, ())
            a = config.editor_ap[e]
        else:
            steps = steps_of[i]
            m = QueryMetadata(q, source, "automatic", None, tuple(steps))
            a = 1.0 - math.fsum(pen[s.name] for s in steps)
            a -= config.intensity_slope * math.fsum(_difficulty(s, registry) for s in steps)
            if m.attack_model is not None:
                a -= config.attack_model_penalty.get(m.attack_model, 0.0)
        if is_face[i]:
            a -= config.face_penalty
        metadata.append(m)
        expected[q] = a
        noise = substream(config.seed, _S_PLANT + i).normal(0.0, config.noise_sigma) if config.noise_sigma else 0.0
        target[q] = a + float(noise)

    counts = Counter(x for i in auto_rows for x in (s.name for s in steps_of[i]))
    log = {
        "rejected_sequences": rejected,
        "transformation_counts": {x: counts[x] for x in registry.names if counts[x]},
        "step_count_histogram": {str(k): v for k, v in sorted(Counter(len(steps_of[i]) for i in auto_rows).items())},
        "n_face": int(n_face),
        "n_manual": int(n_manual),
        "n_automatic": len(auto_rows),
    }
    return Population(metadata, expected, target, log)


# ---------------------------------------------------------------------------
# rank planting
# ---------------------------------------------------------------------------


def rank_mixture(a: float, k: int, far_rank: int) -> tuple[int, int, float]:
    """``(r1, r2, p)``: rank r1 with probability p, else r2, so E[1/rank] = a.

    Below ``1/k`` the second outcome is ``far_rank``, a rank deep enough to
    fall outside a depth-k search (AP 0 there).
    """
    if not 0.0 <= a <= 1.0:
        raise InputError(f"target AP {a!r} outside [0, 1]")
    if a >= 1.0:
        return 1, 1, 1.0
    if a >= 1.0 / k:
        r1 = min(k, max(1, int(math.floor(1.0 / a))))
        if r1 == k:
            return k, k, 1.0
        hi, lo = 1.0 / r1, 1.0 / (r1 + 1)
        return r1, r1 + 1, min(1.0, max(0.0, (a - lo) / (hi - lo)))
    return k, far_rank, a * k


def _plant_block(R64, rn, rows, targets, seeds, k, far_rank, dim):
    """Query vectors realizing the drawn ranks for one block of matched queries."""
    X0 = R64[rows]
    G = np.empty((len(rows), dim))
    ranks = np.empty(len(rows), dtype=np.int64)
    us = np.empty(len(rows))
    for j, (a, rng) in enumerate(zip(targets, seeds)):
        g = rng.standard_normal(dim)
        G[j] = g / np.linalg.norm(g)
        r1, r2, p = rank_mixture(a, k, far_rank)
        ranks[j] = r1 if rng.random() < p else r2
        us[j] = rng.uniform(0.25, 0.75)
    num = rn[rows][:, None] + rn[None, :] - 2.0 * (X0 @ R64.T)  # |ref - x|^2
    den = 2.0 * (G @ R64.T - np.einsum("ij,ij->i", G, X0)[:, None])  # 2 <x - ref, g>
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(den > 0, num / den, np.inf)
    t[np.arange(len(rows)), rows] = np.inf
    out = np.empty((len(rows), dim))
    realized = np.empty(len(rows), dtype=np.int64)
    for j in range(len(rows)):
        r = int(ranks[j])
        if r == 1 and targets[j] >= 1.0:
            out[j] = X0[j]
            realized[j] = 1
            continue
        finite = t[j][np.isfinite(t[j])]
        r = min(r, len(finite) + 1)
        kth = [x for x in (r - 2, r - 1) if 0 <= x < len(finite)]
        if kth:
            finite = np.partition(finite, kth)
        lo = finite[r - 2] if r >= 2 else 0.0
        hi = finite[r - 1] if r - 1 < len(finite) else 2.0 * max(lo, 1.0)
        s = lo + us[j] * (hi - lo)
        out[j] = X0[j] + s * G[j]
        realized[j] = r
    return out, realized


def _unit_rows(rng, n, dim) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(np.float32)


@dataclass
class SynthDataset:
    config: SynthConfig
    refs: DescriptorSet
    queries: DescriptorSet
    train: DescriptorSet
    gt: GroundTruth
    metadata: list[QueryMetadata]
    planted: PenaltyModel
    target_ap: dict[str, float]
    planted_rank: dict[str, int]
    log: dict

    def manifest(self) -> dict:
        return {
            "generator": "copydet.synth",
            "version": __version__,
            "prng": PRNG_ID,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "planted_penalties": self.planted.penalties,
            "sampling_log": self.log,
        }


PLANT_BLOCK = 64


def generate(config: SynthConfig, *, threads: int | None = None, registry: Registry | None = None) -> SynthDataset:
    """Reference, query and training descriptors with planted ground truth."""
    registry = registry or default_registry()
    threads = resolve_threads(threads)
    c = config
    refs = _unit_rows(substream(c.seed, _S_REFS), c.n_refs, c.dim)
    train = _unit_rows(substream(c.seed, _S_TRAIN), c.n_train, c.dim)
    distract = _unit_rows(substream(c.seed, _S_DISTRACT), c.n_distractors, c.dim)

    n_q = c.n_queries_matched + c.n_distractors
    id_rng = substream(c.seed, _S_IDS)
    slot = id_rng.permutation(n_q)  # matched queries first, then distractors
    qid = [f"Q{int(s):06d}" for s in slot]
    matched_refs = id_rng.choice(c.n_refs, c.n_queries_matched, replace=False) if c.n_queries_matched else np.zeros(0, int)
    ref_ids = [f"R{i:06d}" for i in range(c.n_refs)]

    pop = sample_population(c, qid[: c.n_queries_matched], registry)
    clipped = 0
    targets = []
    for q in qid[: c.n_queries_matched]:
        a = pop.target_ap[q]
        if not 0.0 <= a <= 1.0:
            clipped += 1
            a = min(1.0, max(0.0, a))
        targets.append(a)

    far_rank = min(10 * c.k + 1, max(1, c.n_refs))
    R64 = refs.astype(np.float64)
    rn = np.einsum("ij,ij->i", R64, R64)
    blocks = [range(s, min(s + PLANT_BLOCK, c.n_queries_matched)) for s in range(0, c.n_queries_matched, PLANT_BLOCK)]

    def run(b):
        rows = matched_refs[b.start:b.stop]
        rngs = [substream(c.seed, _S_PLANT + (1 << 31) + j) for j in b]
        return _plant_block(R64, rn, rows, targets[b.start:b.stop], rngs, c.k, far_rank, c.dim)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    matched = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, c.dim))
    realized = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, int)

    Q = np.empty((n_q, c.dim), dtype=np.float32)
    Q[: c.n_queries_matched] = matched.astype(np.float32)
    Q[c.n_queries_matched:] = distract
    order = np.argsort(slot)  # store queries in id order
    queries = DescriptorSet([qid[i] for i in order], Q[order])

    gt = GroundTruth({qid[j]: ref_ids[int(matched_refs[j])] for j in range(c.n_queries_matched)})
    by_id = {m.query_id: m for m in pop.metadata}
    metadata = []
    for i in order.tolist():
        q = qid[i]
        metadata.append(by_id[q] if q in by_id else QueryMetadata(q, "generic", "automatic", None, ()))

    counts = pop.log["transformation_counts"]
    planted = PenaltyModel({x: c.planted_penalties[x] for x in registry.names if x in counts}, n_queries=dict(counts))
    log = dict(pop.log)
    log["clipped_targets"] = clipped
    return SynthDataset(
        config=c,
        refs=DescriptorSet(ref_ids, refs),
        queries=queries,
        train=DescriptorSet([f"T{i:06d}" for i in range(c.n_train)], train),
        gt=gt,
        metadata=metadata,
        planted=planted,
        target_ap={q: a for q, a in zip(qid, targets)},
        planted_rank={qid[j]: int(realized[j]) for j in range(c.n_queries_matched)},
        log=log,
    )


def write_dataset(ds: SynthDataset, outdir) -> dict[str, str]:
    """Write the standard file formats plus ``manifest.json``; returns the paths."""
    ensure_dir(outdir)
    paths = {
        "manifest": os.path.join(outdir, "manifest.json"),
        "refs": os.path.join(outdir, "refs.dsc"),
        "queries": os.path.join(outdir, "queries.dsc"),
        "train": os.path.join(outdir, "train.dsc"),
        "gt": os.path.join(outdir, "gt.csv"),
        "metadata": os.path.join(outdir, "metadata.jsonl"),
    }
    with open(paths["manifest"], "w", encoding="utf-8") as f:
        json.dump(ds.manifest(), f, indent=2, sort_keys=True)
        f.write("\n")
    save_descriptors(ds.refs, paths["refs"])
    save_descriptors(ds.queries, paths["queries"])
    save_descriptors(ds.train, paths["train"])
    save_ground_truth(ds.gt, paths["gt"])
    save_metadata(ds.metadata, paths["metadata"])
    return paths


# ---------------------------------------------------------------------------
# benchmark instances
# ---------------------------------------------------------------------------


def with_query_offsets(queries: DescriptorSet, others: Sequence[DescriptorSet], offsets: Mapping[str, float],
                       base: float = 0.5) -> tuple[DescriptorSet, list[DescriptorSet]]:
    """Append one coordinate so every score of query q moves by ``offsets[q]``.

    Queries get ``sqrt(base - o_q)`` in the new coordinate and every other
    set gets 0, which adds ``base - o_q`` to all squared distances of q. The
    background set picks up the same shift, which is what score
    normalization is meant to cancel.
    """
    o = np.array([offsets.get(q, 0.0) for q in queries.ids], dtype=np.float64)
    if np.any(o > base):
        raise InputError(f"offsets must not exceed {base}")
    extra = np.sqrt(base - o)
    Q = np.hstack([queries.data.astype(np.float64), extra[:, None]]).astype(np.float32)
    out = [DescriptorSet(s.ids, np.hstack([s.data, np.zeros((len(s), 1), np.float32)]), max_dim=None) for s in others]
    return DescriptorSet(queries.ids, Q, max_dim=None), out


def unit_queries(queries: DescriptorSet) -> DescriptorSet:
    """Rows scaled to unit norm; with unit references this keeps every per-query ranking."""
    V = queries.data.astype(np.float64)
    return queries.with_data((V / np.linalg.norm(V, axis=1, keepdims=True)).astype(np.float32))


def scale_queries(queries: DescriptorSet, factors: Mapping[str, float]) -> DescriptorSet:
    f = np.array([factors[q] for q in queries.ids], dtype=np.float64)
    return queries.with_data((queries.data.astype(np.float64) * f[:, None]).astype(np.float32))


def uniform_offsets(ids: Sequence[str], seed: int, half_width: float = 0.5, stream: int = 7) -> dict[str, float]:
    rng = substream(seed, stream)
    return {q: float(x) for q, x in zip(ids, rng.uniform(-half_width, half_width, len(ids)))}


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


def oracle_metrics(candidates: CandidateList | Sequence[tuple[str, str, float]], gt: Mapping[str, str],
                   total_positives: int | None = None) -> tuple[float, float]:
    """(micro-AP, mAP) by direct enumeration, for cross-checking small instances.

    Micro-AP sweeps a threshold at every true-positive candidate and counts
    the candidates at or above it under the (score desc, query, reference)
    order; no sorting is involved. mAP counts, for each ground-truth query,
    the candidates of that query ranked ahead of its true match.
    """
    trip = list(candidates)
    P = len(gt) if total_positives is None else total_positives
    n = len(trip)
    q = np.array([t[0] for t in trip], dtype=object)
    r = np.array([t[1] for t in trip], dtype=object)
    s = np.array([float(t[2]) for t in trip], dtype=np.float64)
    tp = np.array([gt.get(a) == b for a, b in zip(q.tolist(), r.tolist())], dtype=bool)
    mu = 0.0
    if n and P:
        for i in np.nonzero(tp)[0]:
            ahead = (s > s[i]) | ((s == s[i]) & ((q < q[i]) | ((q == q[i]) & (r <= r[i]))))
            mu += np.count_nonzero(ahead & tp) / np.count_nonzero(ahead)
        mu /= P
    aps = []
    for query, ref in gt.items():
        mine = q == query
        hit = np.nonzero(mine & (r == ref))[0]
        if len(hit) == 0:
            aps.append(0.0)
            continue
        st = s[hit[0]]
        better = np.count_nonzero(mine & ((s > st) | ((s == st) & (r < ref))))
        aps.append(1.0 / (better + 1))
    mean = sum(aps) / len(aps) if aps else 0.0
    return float(mu), float(mean)


@dataclass
class BenchmarkInstance:
    queries: DescriptorSet
    refs: DescriptorSet
    train: DescriptorSet
    gt: GroundTruth


def clustered_instance(
    seed: int,
    *,
    n_refs: int = 5000,
    n_matched: int = 1000,
    n_distractors: int = 1000,
    n_train: int = 5000,
    dim: int = 64,
    n_clusters: int = 20,
    query_noise: float = 0.9,
    train_coverage: float = 1.0,
) -> BenchmarkInstance:
    """Descriptors sharing cluster components of varying tightness.

    Every vector is ``unit(w_z * c_z + noise)`` for a cluster z, so vectors of
    a tight cluster score high against each other whether they match or
    not. Matched queries are noisy copies of references.

    With ``train_coverage < 1`` only that fraction of the clusters appears in
    the training set; matched queries then come from covered clusters and
    distractors from uncovered ones, so distance to the background
    separates the two populations.
    """
    if not 0.0 < train_coverage <= 1.0:
        raise InputError("train_coverage must lie in (0, 1]")
    rng = substream(seed, 11)
    C = rng.standard_normal((n_clusters, dim))
    C /= np.linalg.norm(C, axis=1, keepdims=True)
    w = rng.uniform(0.3, 2.0, n_clusters)
    n_cov = max(1, int(round(n_clusters * train_coverage)))
    covered = np.arange(n_cov)
    uncovered = np.arange(n_cov, n_clusters) if n_cov < n_clusters else covered

    def draw(z):
        x = C[z] * w[z, None] + rng.standard_normal((len(z), dim)) / np.sqrt(dim)
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    zr = rng.integers(0, n_clusters, n_refs)
    R = draw(zr)
    T = draw(rng.choice(covered, n_train))
    D = draw(rng.choice(uncovered, n_distractors))
    pool = np.nonzero(np.isin(zr, covered))[0]
    if len(pool) < n_matched:
        raise InputError("not enough references in covered clusters for the matched queries")
    mi = rng.choice(pool, n_matched, replace=False)
    s = rng.uniform(0.3, 1.0, n_matched) * query_noise
    M = R[mi] + s[:, None] * rng.standard_normal((n_matched, dim)) / np.sqrt(dim)
    M /= np.linalg.norm(M, axis=1, keepdims=True)
    Q = np.vstack([M, D])
    qids = [f"Q{i:06d}" for i in range(len(Q))]
    rids = [f"R{i:06d}" for i in range(n_refs)]
    return BenchmarkInstance(
        queries=DescriptorSet(qids, Q.astype(np.float32), max_dim=None),
        refs=DescriptorSet(rids, R.astype(np.float32), max_dim=None),
        train=DescriptorSet([f"T{i:06d}" for i in range(n_train)], T.astype(np.float32), max_dim=None),
        gt=GroundTruth({qids[j]: rids[int(mi[j])] for j in range(n_matched)}),
    )
