"""File formats.

Descriptor files are a small little-endian binary container::

    b"DSC1" | u32 version=1 | u32 count | u32 dim
    count x (u16 byte length, UTF-8 id)
    count*dim float32, row-major

Candidates and ground truth are CSV with a fixed header; query metadata is
JSON-lines with one object per query.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
from collections.abc import Iterable, Iterator, Mapping

import numpy as np

from .errors import (
    DimensionMismatchError,
    InputError,
    MalformedHeaderError,
    MetadataError,
    ParseError,
)
from .model import (
    DEFAULT_MAX_DIM,
    CandidateList,
    DescriptorSet,
    GroundTruth,
    QueryMetadata,
    Registry,
)

MAGIC = b"DSC1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_IDLEN = struct.Struct("<H")

CANDIDATE_HEADER = ["query_id", "reference_id", "score"]
GROUND_TRUTH_HEADER = ["query_id", "reference_id"]


def format_score(x: float) -> str:
    return "%.9g" % x


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------


def descriptor_file_size(ids: Iterable[str], dim: int) -> int:
    """Exact byte length of the descriptor file for these ids and dim."""
    ids = list(ids)
    id_bytes = sum(_IDLEN.size + len(i.encode("utf-8")) for i in ids)
    return _HEADER.size + id_bytes + len(ids) * dim * 4


def save_descriptors(ds: DescriptorSet, path) -> None:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, len(ds), ds.dim if len(ds) else ds.data.shape[1]))
    for i in ds.ids:
        b = i.encode("utf-8")
        if len(b) > 0xFFFF:
            raise InputError(f"id too long for descriptor file: {i[:40]!r}...")
        buf.write(_IDLEN.pack(len(b)))
        buf.write(b)
    with open(path, "wb") as f:
        f.write(buf.getvalue())
        f.write(np.ascontiguousarray(ds.data, dtype="<f4").tobytes())


def load_descriptors(path, *, max_dim: int | None = DEFAULT_MAX_DIM, expected_dim: int | None = None) -> DescriptorSet:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, count, dim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    if count and dim == 0:
        raise MalformedHeaderError(f"{path}: zero dimension with {count} rows")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(f"{path}: dimension {dim}, expected {expected_dim}")
    pos = _HEADER.size
    ids = []
    for k in range(count):
        if pos + 2 > len(raw):
            raise MalformedHeaderError(f"{path}: truncated id table at entry {k}")
        (n,) = _IDLEN.unpack_from(raw, pos)
        pos += 2
        if pos + n > len(raw):
            raise MalformedHeaderError(f"{path}: truncated id table at entry {k}")
        try:
            ids.append(raw[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError as e:
            raise MalformedHeaderError(f"{path}: id {k} is not valid UTF-8") from e
        pos += n
    expected = count * dim * 4
    if len(raw) - pos != expected:
        raise MalformedHeaderError(
            f"{path}: payload is {len(raw) - pos} bytes, header implies {count}x{dim} float32 = {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim)
    return DescriptorSet(ids, data.astype(np.float32), max_dim=max_dim)


def load_descriptors_csv(path, *, max_dim: int | None = DEFAULT_MAX_DIM) -> DescriptorSet:
    """Interop importer: one row per descriptor, ``id,v1,...,vd``, optional header."""
    ids, rows = [], []
    dim = None
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, rec in enumerate(csv.reader(f), start=1):
            if not rec:
                continue
            if lineno == 1 and rec[0] in ("id", "query_id", "reference_id"):
                continue
            try:
                vals = [float(x) for x in rec[1:]]
            except ValueError:
                raise ParseError("non-numeric descriptor value", path, lineno) from None
            if dim is None:
                dim = len(vals)
            elif len(vals) != dim:
                raise ParseError(f"{len(vals)} values, expected {dim}", path, lineno)
            ids.append(rec[0])
            rows.append(vals)
    data = np.asarray(rows, dtype=np.float32).reshape(len(rows), dim or 0)
    return DescriptorSet(ids, data, max_dim=max_dim)


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------


def save_candidates(cands: CandidateList, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(",".join(CANDIDATE_HEADER) + "\n")
        lines = [
            f"{q},{r},{format_score(s)}\n"
            for q, r, s in zip(cands.query_ids.tolist(), cands.reference_ids.tolist(), cands.scores.tolist())
        ]
        f.writelines(lines)


def _parse_candidate_rows(reader, path, first_line: int):
    qs, rs, ss = [], [], []
    lineno = first_line
    for lineno, rec in enumerate(reader, start=first_line):
        if not rec:
            continue
        if len(rec) != 3:
            raise ParseError(f"expected 3 fields, got {len(rec)}", path, lineno)
        try:
            s = float(rec[2])
        except ValueError:
            raise ParseError(f"score {rec[2]!r} is not a number", path, lineno) from None
        if not math.isfinite(s):
            raise ParseError(f"non-finite score {rec[2]!r}", path, lineno)
        qs.append(rec[0])
        rs.append(rec[1])
        ss.append(s)
    return qs, rs, ss


def _check_header(rec, expected, path):
    if rec is None or [c.strip() for c in rec] != expected:
        raise ParseError(f"header must be {','.join(expected)}", path, 1)


def load_candidates(path) -> CandidateList:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        _check_header(next(reader, None), CANDIDATE_HEADER, path)
        qs, rs, ss = _parse_candidate_rows(reader, path, 2)
    if not qs:
        return CandidateList.empty()
    return CandidateList(qs, rs, ss)


def iter_candidate_chunks(path, chunk_rows: int) -> Iterator[CandidateList]:
    """Stream the candidate CSV in blocks of at most ``chunk_rows`` rows.

    Blocks are not checked for duplicate pairs; callers that need that
    guarantee across blocks must check it themselves.
    """
    if chunk_rows < 1:
        raise InputError("chunk_rows must be >= 1")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        _check_header(next(reader, None), CANDIDATE_HEADER, path)
        qs, rs, ss = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            q, r, s = _parse_candidate_rows([rec], path, lineno)
            qs += q
            rs += r
            ss += s
            if len(qs) >= chunk_rows:
                yield CandidateList(qs, rs, ss, check=False)
                qs, rs, ss = [], [], []
        if qs:
            yield CandidateList(qs, rs, ss, check=False)


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


def save_ground_truth(gt: GroundTruth, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(",".join(GROUND_TRUTH_HEADER) + "\n")
        for q, r in gt.items():
            f.write(f"{q},{r}\n")


def load_ground_truth(path) -> GroundTruth:
    pairs = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        _check_header(next(reader, None), GROUND_TRUTH_HEADER, path)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise ParseError(f"expected 2 fields, got {len(rec)}", path, lineno)
            if rec[0] in seen:
                raise ParseError(f"query {rec[0]!r} listed twice", path, lineno)
            seen.add(rec[0])
            pairs.append((rec[0], rec[1]))
    return GroundTruth(pairs)


# ---------------------------------------------------------------------------
# per-query AP
# ---------------------------------------------------------------------------

AP_HEADER = ["query_id", "ap"]


def save_aps(aps: Mapping[str, float], path) -> None:
    """``query_id,ap`` rows in id order; values written with full precision."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(",".join(AP_HEADER) + "\n")
        for q in sorted(aps):
            f.write(f"{q},{float(aps[q])!r}\n")


def load_aps(path) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        _check_header(next(reader, None), AP_HEADER, path)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise ParseError(f"expected 2 fields, got {len(rec)}", path, lineno)
            try:
                v = float(rec[1])
            except ValueError:
                raise ParseError(f"AP {rec[1]!r} is not a number", path, lineno) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite AP {rec[1]!r}", path, lineno)
            if rec[0] in out:
                raise ParseError(f"query {rec[0]!r} listed twice", path, lineno)
            out[rec[0]] = v
    return out


# ---------------------------------------------------------------------------
# metadata
# ---------------------------------------------------------------------------


def dumps_metadata(m: QueryMetadata) -> str:
    return json.dumps(m.to_dict(), separators=(",", ":"), ensure_ascii=False)


def save_metadata(records: Iterable[QueryMetadata], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for m in records:
            f.write(dumps_metadata(m) + "\n")


def load_metadata(path, registry: Registry | None = None) -> list[QueryMetadata]:
    """Parse and validate every record; all violations are reported together."""
    out: list[QueryMetadata] = []
    problems = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", path, lineno) from None
            if not isinstance(d, dict):
                raise ParseError("record is not a JSON object", path, lineno)
            try:
                m = QueryMetadata.from_dict(d)
            except (KeyError, TypeError, ValueError) as e:
                problems.append((lineno, d.get("query_id"), f"malformed record: {e!r}"))
                continue
            probs = m.problems(registry)
            if m.query_id in seen:
                probs.append("duplicate query_id")
            seen.add(m.query_id)
            for p in probs:
                problems.append((lineno, m.query_id, p))
            out.append(m)
    if problems:
        raise MetadataError(problems)
    return out


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
