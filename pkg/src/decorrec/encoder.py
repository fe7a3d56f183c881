"""Synthetic attribute-space encoder.

Stands in for a pre-trained multimodal encoder at desk scale: every item or
sentence embedding is a normalized sum of per-tag basis vectors plus a small
deterministic noise term. Sentences additionally carry a marker vector for
their conversational role (request / prefer / dislike), mimicking how a real
text encoder embeds the whole templated sentence rather than just its content
words.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

PREFER_PREFIX = "I prefer "
DISLIKE_PREFIX = "I don't like "

MARKER_REQUEST = "__request__"
MARKER_PREFER = "__prefer__"
MARKER_DISLIKE = "__dislike__"
_MARKERS = (MARKER_REQUEST, MARKER_PREFER, MARKER_DISLIKE)


def _stable_seed(*parts) -> int:
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def _orthonormal_rows(n: int, dim: int, seed: int) -> np.ndarray:
    if n > dim:
        raise ValueError(f"cannot fit {n} orthonormal vectors in dimension {dim}")
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((dim, n))
    q, r = np.linalg.qr(gauss)
    # Fix signs so the basis is unique regardless of LAPACK conventions.
    q = q * np.sign(np.diag(r))[None, :]
    return q.T.copy()


@dataclass
class AttributeSpace:
    """A named basis of tag vectors with a deterministic noise model."""

    names: list[str]
    basis: np.ndarray
    noise_scale: float = 0.0
    seed: int = 0
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.basis.shape[0] != len(self.names):
            raise ValueError("one basis vector per attribute name required")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        self._index = {name: i for i, name in enumerate(self.names)}
        if len(self._index) != len(self.names):
            raise ValueError("attribute names must be unique")

    @property
    def num_attributes(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def generate(cls, names: list[str], dim: int, noise_scale: float = 0.0, seed: int = 0) -> "AttributeSpace":
        """Deterministic pairwise-orthonormal basis from the seed."""
        return cls(names=list(names), basis=_orthonormal_rows(len(names), dim, seed),
                   noise_scale=noise_scale, seed=seed)

    def vector(self, name: str) -> np.ndarray:
        try:
            return self.basis[self._index[name]]
        except KeyError:
            raise KeyError(f"unknown attribute tag: {name!r}") from None


def synth_encode(tags: list[str], space: AttributeSpace) -> np.ndarray:
    """Normalized sum of tag basis vectors plus seed-derived noise.

    Pure: identical (tags, space) inputs give bit-identical vectors. The noise
    vector has L2 norm exactly ``space.noise_scale``.
    """
    if not tags:
        raise ValueError("cannot encode an empty tag list")
    total = np.zeros(space.dim)
    for tag in tags:
        total = total + space.vector(tag)
    norm = float(np.linalg.norm(total))
    if norm == 0.0:
        raise ValueError("tag basis vectors cancel out; cannot normalize")
    out = total / norm
    if space.noise_scale > 0.0:
        rng = np.random.default_rng(_stable_seed(space.seed, *sorted(set(tags))))
        noise = rng.standard_normal(space.dim)
        out = out + noise * (space.noise_scale / float(np.linalg.norm(noise)))
    return out


class SentenceEncoder:
    """Embeds free text by the dictionary tags it mentions, plus a role marker.

    The content basis comes from the database's object dictionary; the three
    role markers are derived deterministically from the encoder seed and
    orthogonalized against the dictionary span so they never leak into
    item-content similarity.
    """

    def __init__(self, object_names: list[str], object_vectors: np.ndarray,
                 noise_scale: float = 0.0, seed: int = 0):
        object_vectors = np.asarray(object_vectors, dtype=np.float64)
        dim = object_vectors.shape[1]
        markers = self._derive_markers(object_vectors, dim, seed)
        names = list(object_names) + list(_MARKERS)
        basis = np.vstack([object_vectors, markers])
        self.space = AttributeSpace(names=names, basis=basis, noise_scale=noise_scale, seed=seed)
        self.object_names = list(object_names)
        self._lower_names = [(name.lower(), name) for name in object_names]

    @staticmethod
    def _derive_markers(object_vectors: np.ndarray, dim: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(_stable_seed("markers", seed))
        markers = []
        span = object_vectors
        for _ in _MARKERS:
            v = rng.standard_normal(dim)
            if span.shape[0] < dim:
                # Project out the dictionary span (and prior markers) when room allows.
                q, _ = np.linalg.qr(span.T)
                v = v - q @ (q.T @ v)
            norm = float(np.linalg.norm(v))
            if norm < 1e-12:
                v = rng.standard_normal(dim)
                norm = float(np.linalg.norm(v))
            v = v / norm
            markers.append(v)
            span = np.vstack([span, v])
        return np.stack(markers)

    @classmethod
    def for_database(cls, db) -> "SentenceEncoder":
        meta = db.encoder_meta or {}
        return cls(db.object_names, db.object_vectors,
                   noise_scale=float(meta.get("noise_scale", 0.0)),
                   seed=int(meta.get("seed", 0)))

    def extract_tags(self, text: str) -> list[str]:
        """Dictionary tags mentioned in the text, in dictionary order."""
        lowered = text.lower()
        return [name for low, name in self._lower_names if low in lowered]

    def split_template(self, text: str) -> tuple[str, str]:
        """(role marker, core sentence) for a possibly templated feedback string."""
        if text.startswith(PREFER_PREFIX):
            return MARKER_PREFER, text[len(PREFER_PREFIX):]
        if text.startswith(DISLIKE_PREFIX):
            return MARKER_DISLIKE, text[len(DISLIKE_PREFIX):]
        return MARKER_REQUEST, text

    def encode_core(self, text: str) -> np.ndarray:
        """Content-only embedding of a sentence (no role marker)."""
        tags = self.extract_tags(text)
        if not tags:
            raise ValueError(f"sentence mentions no dictionary tag: {text!r}")
        return synth_encode(tags, self.space)

    def encode_sentence(self, text: str) -> np.ndarray:
        """Embedding of a full (possibly templated) sentence, role marker included."""
        marker, core = self.split_template(text)
        tags = self.extract_tags(core)
        if not tags:
            raise ValueError(f"sentence mentions no dictionary tag: {text!r}")
        return synth_encode(tags + [marker], self.space)
