"""Dataset loading, validation, and the AMCF on-disk matrix format.

On-disk layout (all little-endian):
  bytes 0..3   magic "AMCF"
  byte  4      format version (1)
  byte  5      dtype code (1 = float32)
  bytes 6..7   reserved, zero
  bytes 8..11  n_rows, uint32
  bytes 12..15 n_cols, uint32
  bytes 16..   n_rows * n_cols float32 values, row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

MAGIC = b"AMCF"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1
HEADER_SIZE = 16

MODALITIES = ("text", "video", "audio", "user", "post")
METADATA_SIDES = ("user", "post")


class DatasetError(Exception):
    """Base class for dataset and format errors."""


class FormatError(DatasetError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedFile(FormatError):
    def __init__(self, message: str, offset: int, expected: int, actual: int):
        super().__init__(message, offset)
        self.expected = expected
        self.actual = actual


class NonFiniteValue(FormatError):
    pass


class MetadataError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class MissingField(MetadataError):
    def __init__(self, fieldname: str, line: int):
        super().__init__(f"missing field {fieldname!r} on line {line}", line)
        self.field = fieldname


class DuplicatePostId(MetadataError):
    pass


class NonFiniteTarget(MetadataError):
    pass


class UnknownField(DatasetError):
    pass


class RowCountMismatch(DatasetError):
    def __init__(self, modality: str, expected: int, actual: int):
        super().__init__(
            f"modality {modality!r}: expected {expected} rows, got {actual}"
        )
        self.modality = modality
        self.expected = expected
        self.actual = actual


@dataclass
class PostRecord:
    post_id: str
    user_id: str
    popularity: float
    user_meta: dict[str, Any] = field(default_factory=dict)
    post_meta: dict[str, Any] = field(default_factory=dict)


@dataclass
class EmbeddingMatrix:
    """Dense per-modality feature matrix, rows aligned to dataset records.

    ``modality`` may be None for standalone matrices not attached to a
    Dataset. ``data`` keeps whatever float dtype it was built with; the
    on-disk format is always float32.
    """

    modality: str | None
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise DatasetError(f"matrix must be 2-D, got shape {self.data.shape}")
        if self.modality is not None and self.modality not in MODALITIES:
            raise DatasetError(f"unknown modality {self.modality!r}")
        if self.data.size and not np.isfinite(self.data).all():
            raise DatasetError("matrix contains non-finite entries")

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]


def write_embedding_matrix(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write a matrix in the AMCF binary format (see module docstring)."""
    if matrix.n_rows == 0 or matrix.n_cols == 0:
        raise DatasetError(
            f"refusing to write empty matrix of shape {matrix.data.shape}"
        )
    payload = np.ascontiguousarray(matrix.data, dtype="<f4")
    if not np.isfinite(payload).all():
        raise DatasetError("matrix contains non-finite entries after float32 cast")
    header = MAGIC + struct.pack(
        "<BBxxII", FORMAT_VERSION, DTYPE_FLOAT32, matrix.n_rows, matrix.n_cols
    )
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    tmp.replace(path)


def read_embedding_matrix(path: str | Path, modality: str | None = None) -> EmbeddingMatrix:
    """Read an AMCF file back into an EmbeddingMatrix (float32 data)."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(
            f"{path}: file shorter than {HEADER_SIZE}-byte header "
            f"(expected >= {HEADER_SIZE} bytes, got {len(raw)})",
            offset=len(raw),
            expected=HEADER_SIZE,
            actual=len(raw),
        )
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r} at offset 0", offset=0)
    version, dtype_code = raw[4], raw[5]
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(
            f"{path}: unsupported version {version} at offset 4", offset=4
        )
    if dtype_code != DTYPE_FLOAT32:
        raise UnsupportedVersion(
            f"{path}: unsupported dtype code {dtype_code} at offset 5", offset=5
        )
    n_rows, n_cols = struct.unpack_from("<II", raw, 8)
    expected = HEADER_SIZE + 4 * n_rows * n_cols
    if len(raw) < expected:
        raise TruncatedFile(
            f"{path}: expected {expected} bytes, got {len(raw)}",
            offset=len(raw),
            expected=expected,
            actual=len(raw),
        )
    if len(raw) > expected:
        raise FormatError(
            f"{path}: {len(raw) - expected} trailing bytes after payload",
            offset=expected,
        )
    data = np.frombuffer(raw, dtype="<f4", count=n_rows * n_cols, offset=HEADER_SIZE)
    bad = ~np.isfinite(data)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFiniteValue(
            f"{path}: non-finite value at element {idx} "
            f"(byte offset {HEADER_SIZE + 4 * idx})",
            offset=HEADER_SIZE + 4 * idx,
        )
    return EmbeddingMatrix(modality, data.reshape(n_rows, n_cols).copy())


def read_metadata(path: str | Path, target_field: str = "popularity") -> list[PostRecord]:
    """Parse a metadata JSONL file into PostRecords, in file order."""
    records: list[PostRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetadataError(f"line {lineno}: invalid JSON ({exc})", lineno)
            for key in ("post_id", "user_id", target_field, "user_meta", "post_meta"):
                if key not in obj:
                    raise MissingField(key, lineno)
            post_id = str(obj["post_id"])
            if post_id in seen:
                raise DuplicatePostId(
                    f"duplicate post_id {post_id!r} on line {lineno}", lineno
                )
            seen.add(post_id)
            target = obj[target_field]
            if (
                isinstance(target, bool)
                or not isinstance(target, (int, float))
                or not np.isfinite(target)
            ):
                raise NonFiniteTarget(
                    f"line {lineno}: target {target_field!r}={target!r} is not a finite number",
                    lineno,
                )
            records.append(
                PostRecord(
                    post_id=post_id,
                    user_id=str(obj["user_id"]),
                    popularity=float(target),
                    user_meta=dict(obj["user_meta"] or {}),
                    post_meta=dict(obj["post_meta"] or {}),
                )
            )
    return records


def write_metadata(
    records: Sequence[PostRecord], path: str | Path, target_field: str = "popularity"
) -> None:
    """Inverse of read_metadata; one JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "post_id": rec.post_id,
                        "user_id": rec.user_id,
                        target_field: rec.popularity,
                        "user_meta": rec.user_meta,
                        "post_meta": rec.post_meta,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


@dataclass
class MetadataSchema:
    """Declares which metadata fields are numeric vs categorical for one side."""

    numeric: list[str] = field(default_factory=list)
    categorical: list[str] = field(default_factory=list)
    top_k: int = 32

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "MetadataSchema":
        return cls(
            numeric=list(obj.get("numeric", [])),
            categorical=list(obj.get("categorical", [])),
            top_k=int(obj.get("top_k", 32)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "numeric": list(self.numeric),
            "categorical": list(self.categorical),
            "top_k": self.top_k,
        }


def _meta_of(record: PostRecord, side: str) -> dict[str, Any]:
    return record.user_meta if side == "user" else record.post_meta


def _numeric_or_none(value: Any) -> float | None:
    if value is None or isinstance(value, bool):
        return None
    if isinstance(value, (int, float)) and np.isfinite(value):
        return float(value)
    return None


class MetadataEncoder:
    """Turns structured metadata into a numeric matrix.

    Numeric fields pass through (missing values imputed with the fit-time
    median); categorical fields expand to one-hot over the top-K most
    frequent fit-time values plus an "other" column. Column order is
    deterministic: numeric fields in schema order, then categorical fields
    in schema order with categories by descending frequency (ties broken
    by value).
    """

    def __init__(self, side: str, schema: MetadataSchema):
        if side not in METADATA_SIDES:
            raise DatasetError(f"side must be one of {METADATA_SIDES}, got {side!r}")
        self.side = side
        self.schema = schema
        self.medians: dict[str, float] = {}
        self.vocab: dict[str, list[str]] = {}
        self.column_names: list[str] = []

    def fit(self, records: Sequence[PostRecord]) -> "MetadataEncoder":
        if not records:
            raise DatasetError("cannot fit metadata encoder on zero records")
        for name in self.schema.numeric:
            values = [
                v
                for rec in records
                if (v := _numeric_or_none(_meta_of(rec, self.side).get(name)))
                is not None
            ]
            if not values:
                raise UnknownField(
                    f"numeric field {name!r} absent from every {self.side}_meta"
                )
            self.medians[name] = float(np.median(values))
        for name in self.schema.categorical:
            counts: dict[str, int] = {}
            present = False
            for rec in records:
                value = _meta_of(rec, self.side).get(name)
                if value is None:
                    continue
                present = True
                key = str(value)
                counts[key] = counts.get(key, 0) + 1
            if not present:
                raise UnknownField(
                    f"categorical field {name!r} absent from every {self.side}_meta"
                )
            ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
            self.vocab[name] = [value for value, _ in ranked[: self.schema.top_k]]
        self.column_names = [f"{self.side}.{n}" for n in self.schema.numeric]
        for name in self.schema.categorical:
            self.column_names.extend(
                f"{self.side}.{name}={v}" for v in self.vocab[name]
            )
            self.column_names.append(f"{self.side}.{name}=<other>")
        return self

    def transform(self, records: Sequence[PostRecord]) -> np.ndarray:
        if not self.column_names:
            raise DatasetError("encoder not fitted")
        n = len(records)
        out = np.zeros((n, len(self.column_names)), dtype=np.float64)
        col = 0
        for name in self.schema.numeric:
            med = self.medians[name]
            for i, rec in enumerate(records):
                v = _numeric_or_none(_meta_of(rec, self.side).get(name))
                out[i, col] = med if v is None else v
            col += 1
        for name in self.schema.categorical:
            vocab = self.vocab[name]
            index = {v: j for j, v in enumerate(vocab)}
            other = col + len(vocab)
            for i, rec in enumerate(records):
                value = _meta_of(rec, self.side).get(name)
                j = index.get(str(value)) if value is not None else None
                out[i, other if j is None else col + j] = 1.0
            col = other + 1
        return out


def encode_metadata(
    records: Sequence[PostRecord], side: str, schema: MetadataSchema
) -> EmbeddingMatrix:
    """Fit-and-apply metadata encoding; returns the matrix for ``side``."""
    encoder = MetadataEncoder(side, schema).fit(records)
    return EmbeddingMatrix(side, encoder.transform(records))


@dataclass
class Manifest:
    """Paths and options describing one on-disk dataset."""

    metadata_path: Path
    target_field: str
    modalities: dict[str, Path]
    metadata_schema: dict[str, MetadataSchema] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        obj = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        modalities = {
            name: base / p for name, p in obj.get("modalities", {}).items()
        }
        for name in modalities:
            if name not in MODALITIES:
                raise DatasetError(f"manifest names unknown modality {name!r}")
        schema = {
            side: MetadataSchema.from_dict(s)
            for side, s in obj.get("metadata_schema", {}).items()
        }
        return cls(
            metadata_path=base / obj["metadata_path"],
            target_field=obj.get("target_field", "popularity"),
            modalities=modalities,
            metadata_schema=schema,
        )


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    base = path.parent
    obj = {
        "metadata_path": str(manifest.metadata_path.relative_to(base)),
        "target_field": manifest.target_field,
        "modalities": {
            name: str(p.relative_to(base)) for name, p in manifest.modalities.items()
        },
        "metadata_schema": {
            side: s.to_dict() for side, s in manifest.metadata_schema.items()
        },
    }
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Dataset:
    """Aligned post records plus one matrix per modality."""

    records: list[PostRecord]
    matrices: dict[str, EmbeddingMatrix]
    metadata_schema: dict[str, MetadataSchema] = field(default_factory=dict)

    def __post_init__(self):
        if not self.matrices:
            raise DatasetError("dataset must carry at least one modality")
        for name, matrix in self.matrices.items():
            if matrix.n_rows != len(self.records):
                raise RowCountMismatch(name, len(self.records), matrix.n_rows)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def popularity(self) -> np.ndarray:
        return np.array([r.popularity for r in self.records], dtype=np.float64)

    @property
    def user_ids(self) -> list[str]:
        return [r.user_id for r in self.records]

    @property
    def post_ids(self) -> list[str]:
        return [r.post_id for r in self.records]

    def modality_names(self) -> list[str]:
        return [m for m in MODALITIES if m in self.matrices]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = np.asarray(list(indices), dtype=np.intp)
        return Dataset(
            records=[self.records[i] for i in idx],
            matrices={
                name: EmbeddingMatrix(m.modality, m.data[idx])
                for name, m in self.matrices.items()
            },
            metadata_schema=self.metadata_schema,
        )


def load_dataset(manifest: Manifest) -> Dataset:
    """Load and validate a dataset; synthesizes user/post matrices from
    metadata when the manifest supplies a schema but no matrix file."""
    records = read_metadata(manifest.metadata_path, manifest.target_field)
    matrices: dict[str, EmbeddingMatrix] = {}
    for name, path in manifest.modalities.items():
        matrix = read_embedding_matrix(path, modality=name)
        if matrix.n_rows != len(records):
            raise RowCountMismatch(name, len(records), matrix.n_rows)
        matrices[name] = matrix
    for side in METADATA_SIDES:
        if side not in matrices and side in manifest.metadata_schema:
            matrices[side] = encode_metadata(
                records, side, manifest.metadata_schema[side]
            )
    return Dataset(
        records=records, matrices=matrices, metadata_schema=manifest.metadata_schema
    )
