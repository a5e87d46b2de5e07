"""Binary and JSON persistence for embeddings, classifiers, labels and manifests.

Binary layout (all little-endian)::

    b"NTUA" | version u32 | rows u64 | dim u32 | rows*dim f32 | id table

The id table holds one ``u32 length + UTF-8 bytes`` entry per row (sample ids
for embedding sets, class names for classifiers).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NTUA"
FORMAT_VERSION = 1
NORM_TOL = 1e-4
HEADER = struct.Struct("<4sIQI")  # 20 bytes


class FormatError(ValueError):
    """Raised for malformed, truncated or invalid data files."""


class NormError(FormatError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"row {row} has L2 norm {norm:.6g}, expected 1 +/- {NORM_TOL}")
        self.row = row
        self.norm = norm


def check_unit_rows(matrix: np.ndarray, tol: float = NORM_TOL) -> None:
    if matrix.shape[0] == 0:
        return
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    bad = np.flatnonzero(~(np.abs(norms - 1.0) <= tol))
    if bad.size:
        raise NormError(int(bad[0]), float(norms[bad[0]]))


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FormatError("cannot normalize a zero row")
    return (m / norms).astype(np.float32)


@dataclass
class EmbeddingSet:
    features: np.ndarray
    sample_ids: list[str]

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise FormatError("features must be a 2-D matrix")
        self.sample_ids = [str(s) for s in self.sample_ids]
        if len(self.sample_ids) != self.features.shape[0]:
            raise FormatError(
                f"{len(self.sample_ids)} sample ids for {self.features.shape[0]} rows"
            )

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def index_of(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.sample_ids)}

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.sample_ids == other.sample_ids
        )


@dataclass
class ClassifierWeights:
    matrix: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise FormatError("classifier must be a 2-D matrix")
        self.class_names = [str(s) for s in self.class_names]
        if len(self.class_names) != self.matrix.shape[0]:
            raise FormatError(
                f"{len(self.class_names)} class names for {self.matrix.shape[0]} rows"
            )
        if len(set(self.class_names)) != len(self.class_names):
            raise FormatError("class names must be unique")

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ClassifierWeights):
            return NotImplemented
        return (
            self.matrix.shape == other.matrix.shape
            and self.matrix.tobytes() == other.matrix.tobytes()
            and self.class_names == other.class_names
        )


@dataclass
class GroundTruthLabels:
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size and self.labels.min() < 0:
            raise FormatError("labels must be non-negative")
        if self.num_classes is not None and self.labels.size and self.labels.max() >= self.num_classes:
            raise FormatError(
                f"label {int(self.labels.max())} out of range for {self.num_classes} classes"
            )

    @property
    def rows(self) -> int:
        return self.labels.size

    def __eq__(self, other):
        if not isinstance(other, GroundTruthLabels):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.labels, other.labels)


# ---------------------------------------------------------------------------
# low-level matrix block


def encode_block(matrix: np.ndarray, names: list[str]) -> bytes:
    rows, dim = matrix.shape
    out = [HEADER.pack(MAGIC, FORMAT_VERSION, rows, dim)]
    out.append(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    for name in names:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
    return b"".join(out)


def decode_block(buf: bytes, offset: int = 0) -> tuple[np.ndarray, list[str], int]:
    """Decode one matrix block starting at ``offset``; returns the end offset too."""
    if len(buf) - offset < HEADER.size:
        raise FormatError("truncated header")
    magic, version, rows, dim = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = offset + HEADER.size
    nbytes = rows * dim * 4
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes of floats")
    matrix = np.frombuffer(buf, dtype="<f4", count=rows * dim, offset=pos)
    matrix = matrix.astype(np.float32).reshape(rows, dim)
    pos += nbytes
    names = []
    for i in range(rows):
        if len(buf) - pos < 4:
            raise FormatError(f"truncated id table at entry {i}")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) - pos < n:
            raise FormatError(f"truncated id table at entry {i}")
        try:
            names.append(buf[pos : pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"id table entry {i} is not UTF-8") from exc
        pos += n
    return matrix, names, pos


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path, data: bytes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def write_embeddings(emb: EmbeddingSet, path) -> None:
    check_unit_rows(emb.features)
    _write_bytes(path, encode_block(emb.features, emb.sample_ids))


def read_embeddings(path) -> EmbeddingSet:
    matrix, names, _ = decode_block(_read_bytes(path))
    check_unit_rows(matrix)
    return EmbeddingSet(matrix, names)


def write_classifier(w: ClassifierWeights, path) -> None:
    check_unit_rows(w.matrix)
    _write_bytes(path, encode_block(w.matrix, w.class_names))


def read_classifier(path) -> ClassifierWeights:
    matrix, names, _ = decode_block(_read_bytes(path))
    check_unit_rows(matrix)
    return ClassifierWeights(matrix, names)


def read_header(path) -> tuple[int, int]:
    """(rows, dim) of a binary file without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
    if len(head) < HEADER.size:
        raise FormatError("truncated header")
    magic, version, rows, dim = HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    return rows, dim


# ---------------------------------------------------------------------------
# JSON documents


def dump_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def write_labels(gt: GroundTruthLabels, path) -> None:
    dump_json({"num_classes": gt.num_classes, "labels": gt.labels.tolist()}, path)


def read_labels(path) -> GroundTruthLabels:
    doc = load_json(path)
    if isinstance(doc, list):
        return GroundTruthLabels(doc)
    return GroundTruthLabels(doc["labels"], doc.get("num_classes"))


def read_text_matrix(path, normalize: bool = False) -> np.ndarray:
    """Whitespace-separated decimals, one row per line; blank lines skipped."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append([float(tok) for tok in line.split()])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: no rows")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise FormatError(f"{path}: row {i} has {len(r)} columns, expected {width}")
    m = np.asarray(rows, dtype=np.float64)
    if normalize:
        return normalize_rows(m)
    return m.astype(np.float32)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class BundleManifest:
    dim: int
    num_classes: int
    class_names: list[str]
    splits: dict[str, dict] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    base_dir: Path = field(default=Path("."), compare=False)

    def path(self, name: str) -> Path:
        return self.base_dir / self.splits[name]["path"]

    def has(self, name: str) -> bool:
        return name in self.splits

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "dim": self.dim,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "splits": self.splits,
        }

    def validate(self) -> None:
        for name, desc in self.splits.items():
            p = self.path(name)
            if not p.exists():
                raise FormatError(f"manifest split {name!r}: missing file {p}")
            if p.suffix == ".ntua":
                rows, _ = read_header(p)
            else:
                doc = load_json(p)
                rows = len(doc["labels"] if isinstance(doc, dict) else doc)
            if rows != desc["rows"]:
                raise FormatError(
                    f"manifest split {name!r}: {rows} rows on disk, manifest says {desc['rows']}"
                )


def write_manifest(manifest: BundleManifest, path) -> None:
    dump_json(manifest.to_dict(), path)


def read_manifest(path) -> BundleManifest:
    doc = load_json(path)
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported manifest version {doc.get('format_version')}")
    m = BundleManifest(
        dim=int(doc["dim"]),
        num_classes=int(doc["num_classes"]),
        class_names=list(doc["class_names"]),
        splits=dict(doc["splits"]),
        base_dir=Path(os.path.dirname(os.path.abspath(path))),
    )
    m.validate()
    return m
