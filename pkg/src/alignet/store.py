"""Embedding matrices, triplet datasets, label and response-time tables.

Binary embedding layout (little endian)::

    b"EMB1" | m: u32 | p: u32 | m*p float32, row-major | id block

The id block is ``n: u32`` followed by ``n`` bytes of UTF-8 text holding the
item ids joined by newlines.  Writers always emit it (``n = 0`` without ids,
so a 1 x 1 matrix takes 20 bytes); readers also accept files that end right
after the payload.

Text tables are UTF-8, tab separated (any whitespace is accepted on read) and
``#`` starts a comment line.  Pair order inside a triplet ``(i, j, k)`` is
always ``(i,j), (i,k), (j,k)``.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagic,
    ChoiceNotInTriple,
    DuplicateIndexInTriple,
    FormatError,
    IndexOutOfRange,
    IoFailure,
    NonFiniteValue,
    SoftNotNormalized,
    TruncatedFile,
    ValidationError,
)

PAIRS = ((0, 1), (0, 2), (1, 2))
# position (0, 1, 2) of the item left out by each pair
ODD_POSITION = np.array([2, 1, 0])

SOFT_TOLERANCE = 1e-9
RENORMALIZE_TOLERANCE = 1e-6

_U32 = struct.Struct("<I")


# ---------------------------------------------------------------------------
# in-memory types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """An ``m x p`` matrix of item representations, held in float64."""

    data: np.ndarray
    item_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"embedding matrix must be 2-d and non-empty, got shape {data.shape}")
        bad = np.flatnonzero(~np.isfinite(data))
        if bad.size:
            r, c = divmod(int(bad[0]), data.shape[1])
            raise NonFiniteValue(f"non-finite entry at row {r}, column {c}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.item_ids is not None:
            ids = tuple(str(x) for x in self.item_ids)
            if len(ids) != data.shape[0]:
                raise ValidationError(f"{len(ids)} item ids for {data.shape[0]} rows")
            if len(set(ids)) != len(ids):
                raise ValidationError("item ids are not unique")
            for x in ids:
                if "\n" in x:
                    raise ValidationError(f"item id {x!r} contains a newline")
            object.__setattr__(self, "item_ids", ids)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and self.item_ids == other.item_ids
        )

    def __repr__(self):
        return f"EmbeddingMatrix(rows={self.rows}, dims={self.dims}, ids={self.item_ids is not None})"


def _as_array(mat) -> np.ndarray:
    if isinstance(mat, EmbeddingMatrix):
        return mat.data
    return np.asarray(mat, dtype=np.float64)


@dataclass(eq=False)
class TripletDataset:
    """Index triples with optional hard and/or soft labels.

    ``choice[s]`` is the index (0, 1, 2) of the chosen pair in canonical
    order; ``soft[s]`` is the probability triple ``(q_ij, q_ik, q_jk)``.
    """

    triplets: np.ndarray
    choice: np.ndarray | None = None
    soft: np.ndarray | None = None
    source_tag: str = ""
    line_numbers: np.ndarray | None = None
    ties: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.triplets, dtype=np.int64)
        if t.size == 0:
            t = t.reshape(0, 3)
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValidationError(f"triplets must have shape (n, 3), got {t.shape}")
        self.triplets = t
        n = len(t)
        bad = (t[:, 0] == t[:, 1]) | (t[:, 0] == t[:, 2]) | (t[:, 1] == t[:, 2])
        if bad.any():
            raise DuplicateIndexInTriple(f"triplet {int(np.flatnonzero(bad)[0])} repeats an index")
        if (t < 0).any():
            raise IndexOutOfRange("negative triplet index")
        if self.choice is not None:
            c = np.asarray(self.choice, dtype=np.int64).reshape(-1)
            if len(c) != n or ((c < 0) | (c > 2)).any():
                raise ValidationError("choice must hold one pair index in {0,1,2} per triplet")
            self.choice = c
        if self.soft is not None:
            s = np.asarray(self.soft, dtype=np.float64).reshape(-1, 3)
            if len(s) != n:
                raise ValidationError("soft labels must have one row per triplet")
            if (~np.isfinite(s)).any() or (s < 0).any():
                raise SoftNotNormalized("soft labels must be finite and non-negative")
            err = np.abs(s.sum(axis=1) - 1.0)
            if (err > SOFT_TOLERANCE).any():
                raise SoftNotNormalized(f"soft label sums off by up to {err.max():.3g}")
            self.soft = s
        if self.ties is not None:
            self.ties = np.asarray(self.ties, dtype=bool).reshape(-1)

    def __len__(self) -> int:
        return len(self.triplets)

    @property
    def kind(self) -> str:
        if self.choice is not None and self.soft is not None:
            return "both"
        if self.choice is not None:
            return "hard"
        if self.soft is not None:
            return "soft"
        return "unlabeled"

    def chosen_pairs(self) -> np.ndarray:
        """Item indices ``(a, b)`` of each chosen pair."""
        if self.choice is None:
            raise ValidationError("dataset has no hard choices")
        pos = np.array(PAIRS)[self.choice]
        rows = np.arange(len(self))
        return np.stack([self.triplets[rows, pos[:, 0]], self.triplets[rows, pos[:, 1]]], axis=1)

    def odd_items(self) -> np.ndarray:
        if self.choice is None:
            raise ValidationError("dataset has no hard choices")
        return self.triplets[np.arange(len(self)), ODD_POSITION[self.choice]]

    def subset(self, idx) -> "TripletDataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return TripletDataset(
            self.triplets[idx],
            choice=pick(self.choice),
            soft=pick(self.soft),
            source_tag=self.source_tag,
            line_numbers=pick(self.line_numbers),
            ties=pick(self.ties),
            meta=dict(self.meta),
        )

    def max_index(self) -> int:
        return int(self.triplets.max()) if len(self) else -1


@dataclass(frozen=True, eq=False)
class HierarchyLabels:
    """Per-item category ids; ``-1`` marks an unknown / unassigned entry."""

    subordinate: np.ndarray
    basic: np.ndarray
    superordinate: np.ndarray
    cluster: np.ndarray | None = None
    item_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        sub = np.asarray(self.subordinate, dtype=np.int64).reshape(-1)
        n = len(sub)
        arrays = {"subordinate": sub}
        for name in ("basic", "superordinate"):
            a = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            if len(a) != n:
                raise ValidationError(f"{name} labels have length {len(a)}, expected {n}")
            arrays[name] = a
        cl = self.cluster
        arrays["cluster"] = np.full(n, -1, dtype=np.int64) if cl is None else np.asarray(cl, dtype=np.int64).reshape(-1)
        if len(arrays["cluster"]) != n:
            raise ValidationError("cluster labels have the wrong length")
        for name, a in arrays.items():
            if (a < -1).any():
                raise ValidationError(f"{name} labels must be >= -1")
            object.__setattr__(self, name, a)
        if self.item_ids is not None:
            ids = tuple(self.item_ids)
            if len(ids) != n:
                raise ValidationError("item ids have the wrong length")
            object.__setattr__(self, "item_ids", ids)

    def __len__(self) -> int:
        return len(self.subordinate)

    def with_clusters(self, cluster) -> "HierarchyLabels":
        return HierarchyLabels(self.subordinate, self.basic, self.superordinate, cluster, self.item_ids)

    @classmethod
    def from_clusters(cls, cluster) -> "HierarchyLabels":
        cluster = np.asarray(cluster, dtype=np.int64)
        unknown = np.full(len(cluster), -1)
        return cls(unknown, unknown, unknown, cluster)


@dataclass(frozen=True)
class ResponseTimeTable:
    """Raw response times (seconds) keyed by triplet index."""

    rts: dict[int, tuple[float, ...]]

    def __post_init__(self):
        for idx, values in self.rts.items():
            for v in values:
                if not (math.isfinite(v) and v > 0):
                    raise ValidationError(f"response time {v!r} for triplet {idx} must be positive and finite")

    def aggregate(self, cutoff: float = 10.0, how: str = "mean") -> dict[int, float]:
        """Per-triplet mean (or median) of log RT after dropping RTs above ``cutoff``.

        Triplets with no surviving observation are omitted.
        """
        if how not in ("mean", "median"):
            raise ValidationError(f"unknown RT aggregator {how!r}")
        out = {}
        for idx, values in self.rts.items():
            kept = np.log([v for v in values if v <= cutoff])
            if kept.size:
                out[idx] = float(np.mean(kept) if how == "mean" else np.median(kept))
        return out


# ---------------------------------------------------------------------------
# binary helpers shared with the transform and checkpoint formats
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` through a temporary file and rename."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def file_sha256(path) -> str:
    return hashlib.sha256(read_bytes(path)).hexdigest()


def to_f32_bytes(values: np.ndarray, what: str = "value") -> bytes:
    arr = np.asarray(values, dtype=np.float64)
    with np.errstate(over="ignore"):
        f32 = arr.astype("<f4")
    bad = np.flatnonzero(~np.isfinite(f32.reshape(-1)))
    if bad.size:
        raise NonFiniteValue(f"{what} at flat position {int(bad[0])} is not representable as a finite float32")
    return f32.tobytes()


def read_f32(buf: bytes, offset: int, count: int, what: str = "payload") -> np.ndarray:
    end = offset + 4 * count
    if len(buf) < end:
        raise TruncatedFile(f"{what}: expected {count} float32 values from byte {offset}, file ends at byte {len(buf)}")
    vals = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise NonFiniteValue(f"{what}: non-finite value at byte offset {offset + 4 * int(bad[0])}")
    return vals


def read_u32(buf: bytes, offset: int, what: str) -> int:
    if len(buf) < offset + 4:
        raise TruncatedFile(f"{what}: file ends at byte {len(buf)}, needed 4 bytes at offset {offset}")
    return _U32.unpack_from(buf, offset)[0]


def check_magic(buf: bytes, magic: bytes) -> None:
    if buf[:4] != magic:
        raise BadMagic(f"expected magic {magic!r} at byte offset 0, found {bytes(buf[:4])!r}")


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------


def embeddings_to_bytes(mat: EmbeddingMatrix) -> bytes:
    ids = b""
    if mat.item_ids is not None:
        if any(not i for i in mat.item_ids):
            raise FormatError("item ids must be non-empty to be stored")
        ids = "\n".join(mat.item_ids).encode("utf-8")
    parts = [b"EMB1", _U32.pack(mat.rows), _U32.pack(mat.dims), to_f32_bytes(mat.data, "embedding entry")]
    return b"".join(parts + [_U32.pack(len(ids)), ids])


def save_embeddings(mat: EmbeddingMatrix, path) -> None:
    """Write ``mat`` in the EMB1 format; entries are rounded to float32."""
    if not isinstance(mat, EmbeddingMatrix):
        mat = EmbeddingMatrix(mat)
    atomic_write_bytes(path, embeddings_to_bytes(mat))


def embeddings_from_bytes(buf: bytes) -> EmbeddingMatrix:
    check_magic(buf, b"EMB1")
    m = read_u32(buf, 4, "row count")
    p = read_u32(buf, 8, "column count")
    if m == 0 or p == 0:
        raise FormatError(f"EMB1 header declares an empty matrix ({m} x {p}) at byte offset 4")
    data = read_f32(buf, 12, m * p, "embedding payload").reshape(m, p)
    offset = 12 + 4 * m * p
    ids = None
    if len(buf) > offset:
        n = read_u32(buf, offset, "id block length")
        start = offset + 4
        if len(buf) < start + n:
            raise TruncatedFile(f"id block: {n} bytes declared at offset {offset}, file ends at byte {len(buf)}")
        if len(buf) > start + n:
            raise FormatError(f"unexpected trailing bytes at offset {start + n}")
        if n:
            try:
                ids = tuple(buf[start : start + n].decode("utf-8").split("\n"))
            except UnicodeDecodeError as exc:
                raise FormatError(f"id block at offset {start} is not UTF-8") from exc
    return EmbeddingMatrix(data, ids)


def load_embeddings(path) -> EmbeddingMatrix:
    return embeddings_from_bytes(read_bytes(path))


# ---------------------------------------------------------------------------
# triplet files
# ---------------------------------------------------------------------------


def _data_lines(path) -> Iterable[tuple[int, list[str]]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path} is not UTF-8") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield lineno, stripped.split()


def _header_lines(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.strip() for line in fh if line.startswith("#")]
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _parse_int(tok: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise FormatError(f"line {lineno}: {tok!r} is not an integer") from None


def _parse_float(tok: str, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise FormatError(f"line {lineno}: {tok!r} is not a number") from None
    if not math.isfinite(v):
        raise NonFiniteValue(f"line {lineno}: non-finite value {tok!r}")
    return v


def pair_index(triple: Sequence[int], a: int, b: int) -> int | None:
    """Canonical pair index of ``{a, b}`` inside ``triple``, or None."""
    for p, (x, y) in enumerate(PAIRS):
        if {triple[x], triple[y]} == {a, b} and a != b:
            return p
    return None


def _check_triple(triple, lineno: int) -> None:
    i, j, k = triple
    if i == j or i == k or j == k:
        raise DuplicateIndexInTriple(f"line {lineno}: triplet {triple} repeats an index")
    if min(triple) < 0:
        raise IndexOutOfRange(f"line {lineno}: negative index in {triple}")


def _normalize_soft(q: list[float], lineno: int) -> list[float]:
    if any(v < 0 for v in q):
        raise SoftNotNormalized(f"line {lineno}: negative probability in {q}")
    total = math.fsum(q)
    if abs(total - 1.0) > RENORMALIZE_TOLERANCE:
        raise SoftNotNormalized(f"line {lineno}: probabilities sum to {total!r}")
    if abs(total - 1.0) > SOFT_TOLERANCE:
        q = [v / total for v in q]
    return q


def load_triplets(path, kind: str = "hard", m: int | None = None) -> TripletDataset:
    """Read a triplet file.

    ``kind`` is one of ``"unlabeled"`` (``i j k``), ``"hard"`` (``i j k a b``),
    ``"soft"`` (``i j k q_ij q_ik q_jk``) or ``"alignet"``
    (``i j k a b q_ij q_ik q_jk``).  When ``m`` is given, indices are also
    checked against it.
    """
    ncols = {"unlabeled": 3, "hard": 5, "soft": 6, "alignet": 8}
    if kind not in ncols:
        raise ValidationError(f"unknown triplet file kind {kind!r}")
    triplets, choices, softs, lines = [], [], [], []
    for lineno, toks in _data_lines(path):
        if len(toks) != ncols[kind]:
            raise FormatError(f"line {lineno}: expected {ncols[kind]} columns for {kind} rows, got {len(toks)}")
        triple = [_parse_int(t, lineno) for t in toks[:3]]
        _check_triple(triple, lineno)
        if kind in ("hard", "alignet"):
            a, b = (_parse_int(t, lineno) for t in toks[3:5])
            p = pair_index(triple, a, b)
            if p is None:
                raise ChoiceNotInTriple(f"line {lineno}: pair {{{a},{b}}} is not a pair of {triple}")
            choices.append(p)
        if kind in ("soft", "alignet"):
            q = [_parse_float(t, lineno) for t in toks[-3:]]
            softs.append(_normalize_soft(q, lineno))
        triplets.append(triple)
        lines.append(lineno)
    ds = TripletDataset(
        np.array(triplets, dtype=np.int64).reshape(-1, 3),
        choice=np.array(choices, dtype=np.int64) if kind in ("hard", "alignet") else None,
        soft=np.array(softs, dtype=np.float64).reshape(-1, 3) if kind in ("soft", "alignet") else None,
        source_tag=str(path),
        line_numbers=np.array(lines, dtype=np.int64),
    )
    ds.meta.update(parse_header_fields(_header_lines(path)))
    if kind == "alignet":
        consistent = np.argmax(ds.soft, axis=1) == ds.choice
        if not consistent.all():
            ln = int(ds.line_numbers[np.flatnonzero(~consistent)[0]])
            raise ValidationError(f"line {ln}: hard choice disagrees with the argmax of the soft triple")
    if m is not None:
        validate_pairing(m, ds)
    return ds


def parse_header_fields(headers: Sequence[str]) -> dict[str, str]:
    out = {}
    for h in headers:
        for tok in h.lstrip("#").split():
            if "=" in tok:
                key, _, value = tok.partition("=")
                out[key] = value
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def format_triplets(ds: TripletDataset, kind: str | None = None, header: Sequence[str] = ()) -> str:
    kind = kind or ("alignet" if ds.kind == "both" else ds.kind)
    rows = [f"# {h}" for h in header]
    pairs = ds.chosen_pairs() if kind in ("hard", "alignet") else None
    for s, (i, j, k) in enumerate(ds.triplets.tolist()):
        cols = [str(i), str(j), str(k)]
        if kind in ("hard", "alignet"):
            cols += [str(int(pairs[s, 0])), str(int(pairs[s, 1]))]
        if kind in ("soft", "alignet"):
            cols += [_fmt(v) for v in ds.soft[s]]
        rows.append("\t".join(cols))
    return "\n".join(rows) + "\n"


def save_triplets(ds: TripletDataset, path, kind: str | None = None, header: Sequence[str] = ()) -> None:
    """Write ``ds``; ``kind`` defaults to the richest form the dataset carries."""
    atomic_write_text(path, format_triplets(ds, kind, header))


def validate_pairing(mat, ds: TripletDataset) -> None:
    """Raise IndexOutOfRange unless every index of ``ds`` addresses a row of ``mat``.

    ``mat`` may be an EmbeddingMatrix, an array, or a plain row count.
    """
    m = mat if isinstance(mat, (int, np.integer)) else _as_array(mat).shape[0]
    if not len(ds):
        return
    bad = np.flatnonzero((ds.triplets >= m).any(axis=1))
    if bad.size:
        if ds.line_numbers is not None:
            where = "lines " + ", ".join(str(int(ds.line_numbers[b])) for b in bad[:20])
        else:
            where = "rows " + ", ".join(str(int(b)) for b in bad[:20])
        more = "" if bad.size <= 20 else f" (+{bad.size - 20} more)"
        raise IndexOutOfRange(f"indices >= {m} on {where}{more}")


# ---------------------------------------------------------------------------
# labels and response times
# ---------------------------------------------------------------------------


def load_labels(path) -> HierarchyLabels:
    """Read ``item_id subordinate basic superordinate [cluster]`` rows in item order."""
    ids, cols = [], []
    width = None
    for lineno, toks in _data_lines(path):
        if len(toks) not in (4, 5):
            raise FormatError(f"line {lineno}: expected 4 or 5 columns, got {len(toks)}")
        if width is None:
            width = len(toks)
        elif len(toks) != width:
            raise FormatError(f"line {lineno}: column count changed from {width} to {len(toks)}")
        ids.append(toks[0])
        cols.append([_parse_int(t, lineno) for t in toks[1:]])
    if not cols:
        raise FormatError(f"{path} holds no label rows")
    arr = np.array(cols, dtype=np.int64)
    cluster = arr[:, 3] if arr.shape[1] == 4 else None
    return HierarchyLabels(arr[:, 0], arr[:, 1], arr[:, 2], cluster, tuple(ids))


def save_labels(labels: HierarchyLabels, path, with_cluster: bool | None = None) -> None:
    if with_cluster is None:
        with_cluster = bool((labels.cluster >= 0).any())
    ids = labels.item_ids or tuple(str(i) for i in range(len(labels)))
    head = "# item_id\tsubordinate\tbasic\tsuperordinate" + ("\tcluster" if with_cluster else "")
    rows = [head]
    for r in range(len(labels)):
        cols = [ids[r], str(labels.subordinate[r]), str(labels.basic[r]), str(labels.superordinate[r])]
        if with_cluster:
            cols.append(str(labels.cluster[r]))
        rows.append("\t".join(cols))
    atomic_write_text(path, "\n".join(rows) + "\n")


def load_rts(path) -> ResponseTimeTable:
    table: dict[int, list[float]] = {}
    for lineno, toks in _data_lines(path):
        if len(toks) != 2:
            raise FormatError(f"line {lineno}: expected 'triplet_index rt_seconds'")
        idx = _parse_int(toks[0], lineno)
        rt = _parse_float(toks[1], lineno)
        if idx < 0 or rt <= 0:
            raise ValidationError(f"line {lineno}: need a non-negative index and a positive RT")
        table.setdefault(idx, []).append(rt)
    return ResponseTimeTable({k: tuple(v) for k, v in table.items()})


def save_rts(rts: ResponseTimeTable, path) -> None:
    rows = ["# triplet_index\trt_seconds"]
    for idx in sorted(rts.rts):
        rows.extend(f"{idx}\t{_fmt(v)}" for v in rts.rts[idx])
    atomic_write_text(path, "\n".join(rows) + "\n")
