"""Item database, cosine similarity, and the on-disk embedding format.

Embeddings are plain float64 numpy vectors, stored unnormalized; cosine
similarity normalizes on the fly. Item embeddings are frozen: the database
marks its arrays read-only after construction and nothing downstream ever
writes to them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMB_MAGIC = b"EMB1"


class DatabaseFormatError(ValueError):
    """Raised when a manifest or embedding file violates the on-disk format."""


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def similarity_matrix(feedback_embs: list[np.ndarray], db: "ItemDatabase") -> np.ndarray:
    """Row i, column j: cosine similarity of feedback i to item j. Shape (t, N)."""
    if len(feedback_embs) == 0:
        raise ValueError("empty feedback list")
    F = np.stack([np.asarray(f, dtype=np.float64) for f in feedback_embs])
    if F.shape[1] != db.dim:
        raise ValueError(f"feedback dimension {F.shape[1]} != database dimension {db.dim}")
    fnorm = np.linalg.norm(F, axis=1)
    if np.any(fnorm == 0.0):
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return (F @ db.matrix.T) / (fnorm[:, None] * db.item_norms[None, :])


@dataclass
class Item:
    """One decoration case: id, frozen embedding, optional image, text tags."""

    id: str
    embedding: np.ndarray
    image_path: str | None = None
    sentences: list[str] = field(default_factory=list)
    objects: list[str] = field(default_factory=list)


class ItemDatabase:
    """Ordered, immutable collection of items plus the object dictionary.

    The manifest order is canonical: item index = manifest position, and all
    tie-breaking elsewhere refers to that index.
    """

    def __init__(
        self,
        items: list[Item],
        object_names: list[str],
        object_vectors: np.ndarray,
        encoder_meta: dict | None = None,
    ):
        if len(items) < 2:
            raise ValueError("database needs at least two items")
        dims = {item.embedding.shape for item in items}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError("all item embeddings must be 1-D and share one dimension")
        ids = [item.id for item in items]
        if len(set(ids)) != len(ids):
            raise DatabaseFormatError("duplicate item ids in database")
        known = set(object_names)
        for item in items:
            unknown = [o for o in item.objects if o not in known]
            if unknown:
                raise DatabaseFormatError(f"item {item.id!r} has tags outside the object dictionary: {unknown}")

        self.items = items
        self.dim = items[0].embedding.shape[0]
        self.object_names = list(object_names)
        object_vectors = np.asarray(object_vectors, dtype=np.float64)
        if object_vectors.shape != (len(object_names), self.dim):
            raise ValueError("object dictionary vectors must be (num_objects, dim)")
        self.object_vectors = object_vectors
        self.encoder_meta = encoder_meta

        self.matrix = np.stack([item.embedding for item in items])
        self.item_norms = np.linalg.norm(self.matrix, axis=1)
        if np.any(self.item_norms == 0.0):
            raise ValueError("zero-norm item embedding")
        self._index_by_id = {item.id: i for i, item in enumerate(items)}

        for arr in (self.matrix, self.item_norms, self.object_vectors):
            arr.setflags(write=False)
        for item in self.items:
            item.embedding.setflags(write=False)

    def __len__(self) -> int:
        return len(self.items)

    def index_of(self, item_id: str) -> int:
        try:
            return self._index_by_id[item_id]
        except KeyError:
            raise KeyError(f"unknown item id: {item_id!r}") from None

    def sims_to(self, v: np.ndarray) -> np.ndarray:
        """Cosine similarity of one vector against every item. Shape (N,)."""
        v = np.asarray(v, dtype=np.float64)
        nv = float(np.linalg.norm(v))
        if nv == 0.0:
            raise ValueError("cosine similarity undefined for zero-norm vector")
        return (self.matrix @ v) / (self.item_norms * nv)

    def object_vector(self, name: str) -> np.ndarray:
        try:
            i = self.object_names.index(name)
        except ValueError:
            raise KeyError(f"unknown object tag: {name!r}") from None
        return self.object_vectors[i]


def _write_section(fh, vectors: np.ndarray) -> None:
    count, dim = vectors.shape
    fh.write(EMB_MAGIC)
    fh.write(struct.pack("<II", count, dim))
    fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())


def _read_section(fh, what: str) -> np.ndarray:
    magic = fh.read(4)
    if magic != EMB_MAGIC:
        raise DatabaseFormatError(f"bad magic in {what} section: {magic!r}")
    header = fh.read(8)
    if len(header) != 8:
        raise DatabaseFormatError(f"truncated header in {what} section")
    count, dim = struct.unpack("<II", header)
    raw = fh.read(count * dim * 4)
    if len(raw) != count * dim * 4:
        raise DatabaseFormatError(f"truncated data in {what} section")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(count, dim)


def save_database(db: ItemDatabase, manifest_path: str | Path, embeddings_path: str | Path) -> None:
    """Write the manifest JSON and the two-section embedding binary."""
    manifest: dict = {
        "dim": int(db.dim),
        "items": [
            {
                "id": item.id,
                **({"image_path": item.image_path} if item.image_path else {}),
                "sentences": item.sentences,
                "objects": item.objects,
            }
            for item in db.items
        ],
        "object_dictionary": db.object_names,
    }
    if db.encoder_meta is not None:
        manifest["encoder"] = db.encoder_meta
    Path(manifest_path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    with open(embeddings_path, "wb") as fh:
        _write_section(fh, db.matrix)
        _write_section(fh, db.object_vectors)


def load_database(manifest_path: str | Path, embeddings_path: str | Path) -> ItemDatabase:
    """Load a database; fails whole (never returns a partial database)."""
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatabaseFormatError(f"manifest is not valid JSON: {exc}") from exc
    for key in ("dim", "items", "object_dictionary"):
        if key not in manifest:
            raise DatabaseFormatError(f"manifest missing required key {key!r}")
    dim = int(manifest["dim"])

    with open(embeddings_path, "rb") as fh:
        item_vecs = _read_section(fh, "item")
        dict_vecs = _read_section(fh, "object-dictionary")

    if item_vecs.shape != (len(manifest["items"]), dim):
        raise DatabaseFormatError(
            f"embedding binary holds {item_vecs.shape} item floats, manifest declares "
            f"{len(manifest['items'])} items of dimension {dim}"
        )
    if dict_vecs.shape != (len(manifest["object_dictionary"]), dim):
        raise DatabaseFormatError("object-dictionary section does not match the manifest dictionary")

    items = [
        Item(
            id=entry["id"],
            embedding=item_vecs[i].copy(),
            image_path=entry.get("image_path"),
            sentences=list(entry.get("sentences", [])),
            objects=list(entry.get("objects", [])),
        )
        for i, entry in enumerate(manifest["items"])
    ]
    return ItemDatabase(
        items,
        object_names=list(manifest["object_dictionary"]),
        object_vectors=dict_vecs,
        encoder_meta=manifest.get("encoder"),
    )
