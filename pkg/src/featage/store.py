"""Longitudinal embedding datasets: parsing, validation, indexing, and splits.

A dataset is a flat list of (subject, age, seq, vector) observations plus
two indexes: per-subject record lists (sorted by age) and per-age cohorts.
Two interchangeable file formats are supported:

CSV   header line ``d=<int>``, then one record per line as
      ``subject_id,age,seq,v0,v1,...``; ``#`` starts a comment line.
BIN   magic ``FAGE``, version byte 0x01, little-endian u32 dim, u64 record
      count, then per record: u16 id length + UTF-8 id bytes, u16 age,
      u16 seq, dim little-endian float32 components.

Vectors are expected to be approximately unit norm (face matchers emit
near-unit embeddings). Ingestion renormalizes any vector whose norm is off
by more than UNIT_TOL and leaves already-unit vectors untouched, so parsing
a serialized dataset reproduces it bit for bit.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, ValidationError

UNIT_TOL = 1e-4
AGE_MAX = 120
SEQ_MAX = 0xFFFF

BIN_MAGIC = b"FAGE"
BIN_VERSION = 1


def vec_norm(v: np.ndarray) -> float:
    return float(np.sqrt((v * v).sum()))


def as_unit(v: np.ndarray, *, context: str = "vector") -> np.ndarray:
    """Return ``v`` renormalized to unit length when needed.

    Vectors already within UNIT_TOL of unit norm are returned unchanged
    (bitwise), which keeps parse/serialize round trips stable.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValidationError(f"{context}: expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{context}: non-finite component")
    n = vec_norm(v)
    if n == 0.0:
        raise ValidationError(f"{context}: zero-norm vector")
    if abs(n - 1.0) <= UNIT_TOL:
        return v
    return v / n


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """One observation: a subject seen at an integer age, as a unit vector.

    ``seq`` disambiguates multiple images of the same subject at the same
    age. The (subject_id, age, seq) triple is unique within a dataset.
    """

    subject_id: str
    age: int
    seq: int
    vector: np.ndarray

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.subject_id, self.age, self.seq)

    def same_as(self, other: "EmbeddingRecord") -> bool:
        return self.key == other.key and np.array_equal(self.vector, other.vector)


def _check_identity(subject_id: str) -> None:
    if not subject_id:
        raise ValidationError("empty subject_id")
    if any(c in subject_id for c in ",\n\r"):
        raise ValidationError(f"subject_id {subject_id!r} contains a comma or newline")


def make_record(subject_id: str, age: int, seq: int, vector: np.ndarray) -> EmbeddingRecord:
    """Validate fields, renormalize the vector, and freeze it read-only."""
    _check_identity(subject_id)
    if not 0 <= int(age) <= AGE_MAX:
        raise ValidationError(f"age {age} outside [0, {AGE_MAX}] for subject {subject_id!r}")
    if not 0 <= int(seq) <= SEQ_MAX:
        raise ValidationError(f"seq {seq} outside [0, {SEQ_MAX}] for subject {subject_id!r}")
    v = as_unit(vector, context=f"record ({subject_id!r}, {age}, {seq})")
    v = v.copy()
    v.flags.writeable = False
    return EmbeddingRecord(str(subject_id), int(age), int(seq), v)


class LongitudinalDataset:
    """Validated, immutable collection of embedding records with indexes."""

    def __init__(self, dim: int, records: list[EmbeddingRecord]):
        if dim < 1:
            raise ValidationError(f"dimension must be >= 1, got {dim}")
        self.dim = int(dim)
        self.records: tuple[EmbeddingRecord, ...] = tuple(records)
        seen: set[tuple[str, int, int]] = set()
        for rec in self.records:
            if rec.vector.shape != (self.dim,):
                raise ValidationError(
                    f"record {rec.key} has dimension {rec.vector.shape[0]}, expected {self.dim}"
                )
            if rec.key in seen:
                raise ValidationError(f"duplicate record key {rec.key}")
            seen.add(rec.key)
        by_subject: dict[str, list[EmbeddingRecord]] = {}
        by_age: dict[int, list[EmbeddingRecord]] = {}
        for rec in self.records:
            by_subject.setdefault(rec.subject_id, []).append(rec)
            by_age.setdefault(rec.age, []).append(rec)
        for recs in by_subject.values():
            recs.sort(key=lambda r: (r.age, r.seq))
        self.by_subject: dict[str, tuple[EmbeddingRecord, ...]] = {
            sid: tuple(recs) for sid, recs in by_subject.items()
        }
        self.by_age: dict[int, tuple[EmbeddingRecord, ...]] = {
            age: tuple(recs) for age, recs in by_age.items()
        }

    @classmethod
    def build(cls, dim: int, rows) -> "LongitudinalDataset":
        """Construct from raw (subject_id, age, seq, vector) rows."""
        return cls(dim, [make_record(*row) for row in rows])

    def __len__(self) -> int:
        return len(self.records)

    @property
    def subjects(self) -> list[str]:
        return sorted(self.by_subject)

    def equals(self, other: "LongitudinalDataset") -> bool:
        """Field-for-field equality, vectors compared bitwise."""
        if self.dim != other.dim or len(self.records) != len(other.records):
            return False
        return all(a.same_as(b) for a, b in zip(self.records, other.records))


# ---------------------------------------------------------------------------
# CSV format
# ---------------------------------------------------------------------------


def parse_csv(data: bytes) -> LongitudinalDataset:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"CSV stream is not valid UTF-8: {exc}") from exc
    dim: int | None = None
    records: list[EmbeddingRecord] = []
    keys_by_line: dict[tuple[str, int, int], int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if dim is None:
            if not line.startswith("d="):
                raise DataFormatError(f"line {lineno}: expected header 'd=<int>', got {line!r}")
            try:
                dim = int(line[2:])
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: bad dimension in header {line!r}") from exc
            if dim < 1:
                raise DataFormatError(f"line {lineno}: dimension must be >= 1, got {dim}")
            continue
        parts = line.split(",")
        if len(parts) != 3 + dim:
            raise DataFormatError(
                f"line {lineno}: expected {3 + dim} fields for d={dim}, got {len(parts)}"
            )
        sid = parts[0]
        try:
            age = int(parts[1])
            seq = int(parts[2])
            vec = np.array([float(x) for x in parts[3:]], dtype=np.float64)
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from exc
        key = (sid, age, seq)
        if key in keys_by_line:
            raise DataFormatError(
                f"line {lineno}: duplicate key {key} (first seen on line {keys_by_line[key]})"
            )
        keys_by_line[key] = lineno
        try:
            records.append(make_record(sid, age, seq, vec))
        except ValidationError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from exc
    if dim is None:
        raise DataFormatError("missing 'd=<int>' header line")
    return LongitudinalDataset(dim, records)


def serialize_csv(ds: LongitudinalDataset) -> bytes:
    out = io.StringIO()
    out.write(f"d={ds.dim}\n")
    for rec in ds.records:
        comps = ",".join(repr(float(x)) for x in rec.vector)
        out.write(f"{rec.subject_id},{rec.age},{rec.seq},{comps}\n")
    return out.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# BIN format
#
# The low-level blob codec below reads/writes raw rows without touching the
# vectors; dataset parsing layers renormalization and invariant checks on
# top. Mean-feature tables and synthetic ground truth reuse the raw codec
# because their vectors are not unit-norm records.
# ---------------------------------------------------------------------------


def write_bin_blob(dim: int, rows: list[tuple[str, int, int, np.ndarray]]) -> bytes:
    out = io.BytesIO()
    out.write(BIN_MAGIC)
    out.write(struct.pack("<B", BIN_VERSION))
    out.write(struct.pack("<I", dim))
    out.write(struct.pack("<Q", len(rows)))
    for sid, age, seq, vec in rows:
        ident = sid.encode("utf-8")
        if len(ident) > 0xFFFF:
            raise ValidationError(f"subject_id too long for BIN format: {sid!r}")
        out.write(struct.pack("<H", len(ident)))
        out.write(ident)
        out.write(struct.pack("<HH", age, seq))
        out.write(np.asarray(vec, dtype="<f4").tobytes())
    return out.getvalue()


def read_bin_blob(data: bytes) -> tuple[int, list[tuple[str, int, int, np.ndarray]]]:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DataFormatError(f"truncated stream while reading {what} at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != BIN_MAGIC:
        raise DataFormatError("bad magic bytes, not a FAGE stream")
    version = take(1, "version")[0]
    if version != BIN_VERSION:
        raise DataFormatError(f"unsupported FAGE version {version}")
    dim = struct.unpack("<I", take(4, "dimension"))[0]
    if dim < 1:
        raise DataFormatError(f"dimension must be >= 1, got {dim}")
    count = struct.unpack("<Q", take(8, "record count"))[0]
    rows = []
    for i in range(count):
        (id_len,) = struct.unpack("<H", take(2, f"record {i} id length"))
        try:
            sid = bytes(take(id_len, f"record {i} id")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"record {i}: id is not valid UTF-8") from exc
        age, seq = struct.unpack("<HH", take(4, f"record {i} age/seq"))
        raw = take(4 * dim, f"record {i} vector")
        vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        rows.append((sid, age, seq, vec))
    if pos != len(view):
        raise DataFormatError(f"{len(view) - pos} trailing bytes after last record")
    return dim, rows


def parse_bin(data: bytes) -> LongitudinalDataset:
    dim, rows = read_bin_blob(data)
    return LongitudinalDataset.build(dim, rows)


def serialize_bin(ds: LongitudinalDataset) -> bytes:
    return write_bin_blob(ds.dim, [(r.subject_id, r.age, r.seq, r.vector) for r in ds.records])


FORMATS = ("csv", "bin")


def parse_dataset(source, fmt: str = "csv") -> LongitudinalDataset:
    """Parse a dataset from bytes or a binary file object."""
    if hasattr(source, "read"):
        source = source.read()
    if not isinstance(source, (bytes, bytearray, memoryview)):
        raise DataFormatError(f"expected bytes or a binary stream, got {type(source).__name__}")
    data = bytes(source)
    if fmt == "csv":
        return parse_csv(data)
    if fmt == "bin":
        return parse_bin(data)
    raise ConfigError(f"unknown format {fmt!r}, expected one of {FORMATS}")


def serialize_dataset(ds: LongitudinalDataset, fmt: str = "csv") -> bytes:
    if fmt == "csv":
        return serialize_csv(ds)
    if fmt == "bin":
        return serialize_bin(ds)
    raise ConfigError(f"unknown format {fmt!r}, expected one of {FORMATS}")


def load_dataset(path, fmt: str | None = None) -> LongitudinalDataset:
    """Read a dataset file; format inferred from the extension when omitted."""
    p = Path(path)
    if fmt is None:
        fmt = "bin" if p.suffix.lower() == ".bin" else "csv"
    return parse_dataset(p.read_bytes(), fmt)


def save_dataset(ds: LongitudinalDataset, path, fmt: str | None = None) -> None:
    p = Path(path)
    if fmt is None:
        fmt = "bin" if p.suffix.lower() == ".bin" else "csv"
    p.write_bytes(serialize_dataset(ds, fmt))


# ---------------------------------------------------------------------------
# Evaluation splits
# ---------------------------------------------------------------------------


@dataclass
class GalleryProbeSplit:
    """Gallery plus mated and unmated (distractor) probes for one evaluation."""

    gallery: list[EmbeddingRecord] = field(default_factory=list)
    mated_probes: list[EmbeddingRecord] = field(default_factory=list)
    unmated_probes: list[EmbeddingRecord] = field(default_factory=list)

    def validate(self) -> None:
        gallery_ids = [r.subject_id for r in self.gallery]
        id_set = set(gallery_ids)
        if len(id_set) != len(gallery_ids):
            raise ValidationError("gallery contains a subject more than once")
        for rec in self.mated_probes:
            if rec.subject_id not in id_set:
                raise ValidationError(f"mated probe subject {rec.subject_id!r} not in gallery")
        for rec in self.unmated_probes:
            if rec.subject_id in id_set:
                raise ValidationError(f"unmated probe subject {rec.subject_id!r} is in gallery")
        dims = {r.vector.shape[0] for r in self.gallery + self.mated_probes + self.unmated_probes}
        if len(dims) > 1:
            raise ValidationError(f"split mixes vector dimensions: {sorted(dims)}")


def split_folds(ds: LongitudinalDataset, k: int, seed: int) -> list[LongitudinalDataset]:
    """Partition subjects into k disjoint folds by a seeded shuffle.

    Subject ids are sorted before shuffling, so the partition depends only
    on the subject set and the seed, not on input row order. Fold sizes
    differ by at most one subject.
    """
    if k < 2:
        raise ConfigError(f"fold count must be >= 2, got {k}")
    subjects = ds.subjects
    if len(subjects) < k:
        raise ValidationError(f"cannot split {len(subjects)} subjects into {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(subjects))
    base, extra = divmod(len(subjects), k)
    folds: list[LongitudinalDataset] = []
    start = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        members = {subjects[perm[i]] for i in range(start, start + size)}
        start += size
        recs = [r for r in ds.records if r.subject_id in members]
        folds.append(LongitudinalDataset(ds.dim, recs))
    return folds


def merge_datasets(parts: list[LongitudinalDataset]) -> LongitudinalDataset:
    """Concatenate datasets (e.g. training folds); keys must stay unique."""
    if not parts:
        raise ValidationError("nothing to merge")
    dims = {p.dim for p in parts}
    if len(dims) != 1:
        raise ValidationError(f"cannot merge datasets of dimensions {sorted(dims)}")
    records: list[EmbeddingRecord] = []
    for part in parts:
        records.extend(part.records)
    return LongitudinalDataset(parts[0].dim, records)


def build_youngest_oldest(ds: LongitudinalDataset, min_gap: int = 0) -> GalleryProbeSplit:
    """Enroll each subject's youngest image, probe with its oldest.

    Subjects need at least two records and an age span of at least
    ``min_gap`` years. Ties at equal age break toward the smallest seq; a
    subject whose records all share one age probes with its second image
    rather than the enrolled one.
    """
    split = GalleryProbeSplit()
    for sid in ds.subjects:
        recs = ds.by_subject[sid]
        if len(recs) < 2:
            continue
        youngest = recs[0]
        max_age = recs[-1].age
        oldest = next(
            (r for r in recs if r.age == max_age and r.key != youngest.key), None
        )
        if oldest is None:
            continue
        if oldest.age - youngest.age < min_gap:
            continue
        split.gallery.append(youngest)
        split.mated_probes.append(oldest)
    return split


def add_distractors(split: GalleryProbeSplit, ds: LongitudinalDataset) -> GalleryProbeSplit:
    """Extend the unmated probe set with every record of ``ds``.

    Distractor subjects must be disjoint from the gallery; a collision is
    rejected and named.
    """
    gallery_ids = {r.subject_id for r in split.gallery}
    clash = sorted(gallery_ids & set(ds.by_subject))
    if clash:
        raise ValidationError(f"distractor subject {clash[0]!r} collides with the gallery")
    if split.gallery and ds.records and ds.dim != split.gallery[0].vector.shape[0]:
        raise ValidationError(
            f"distractor dimension {ds.dim} != split dimension {split.gallery[0].vector.shape[0]}"
        )
    return GalleryProbeSplit(
        gallery=list(split.gallery),
        mated_probes=list(split.mated_probes),
        unmated_probes=list(split.unmated_probes) + list(ds.records),
    )
