"""Object detection, template sentence generation, and difference filtering.

These feed the simulated user's feedback pools: detect which objects an
embedding carries, phrase them through a small grammar, and keep only the
sentences that discriminate between the currently recommended item and the
hidden target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import Item, ItemDatabase, cosine_sim
from .encoder import SentenceEncoder

DEFAULT_GRAMMAR = [
    "a room with {object}",
    "there is {object} in the room",
    "the space features {object}",
    "{object} as the centerpiece",
]


@dataclass
class ObjectDetection:
    item_id: str
    ranked: list[tuple[str, float]]


@dataclass
class GeneratedSentence:
    text: str
    focus: str
    source: str = "template"


def load_grammar(path: str | Path) -> list[str]:
    patterns = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(patterns, list) or not all(isinstance(p, str) for p in patterns):
        raise ValueError("grammar file must be a JSON list of pattern strings")
    bad = [p for p in patterns if "{object}" not in p]
    if bad:
        raise ValueError(f"grammar patterns missing {{object}} placeholder: {bad}")
    return patterns


def detect_objects(item: Item, db: ItemDatabase, m: int = 10) -> ObjectDetection:
    """Top-m dictionary objects by similarity to the item embedding.

    Ties break by dictionary order; m larger than the dictionary returns the
    whole ranked dictionary.
    """
    if not db.object_names:
        raise ValueError("empty object dictionary")
    sims = [cosine_sim(item.embedding, db.object_vectors[i]) for i in range(len(db.object_names))]
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    top = order[: min(m, len(order))]
    return ObjectDetection(item_id=item.id, ranked=[(db.object_names[i], sims[i]) for i in top])


def compose_sentences(detection: ObjectDetection, grammar: list[str]) -> list[GeneratedSentence]:
    """One sentence per (detected object, grammar pattern), deterministic order."""
    if not detection.ranked:
        raise ValueError("empty detection")
    out = []
    for tag, _ in detection.ranked:
        for pattern in grammar:
            out.append(GeneratedSentence(text=pattern.format(object=tag), focus=tag))
    return out


def contrast_split(entries: list[tuple[str, np.ndarray]], action_emb: np.ndarray,
                   target_emb: np.ndarray, delta: float):
    """Partition (text, embedding) pairs by the contrast rule.

    prefer: closer to the target by more than delta; dislike: closer to the
    action by more than delta; dropped: everything in between.
    """
    prefer, dislike, dropped = [], [], []
    for text, emb in entries:
        gap = cosine_sim(emb, target_emb) - cosine_sim(emb, action_emb)
        if gap > delta:
            prefer.append(text)
        elif -gap > delta:
            dislike.append(text)
        else:
            dropped.append(text)
    return prefer, dislike, dropped


def filter_differences(sentences, action: Item, target: Item, delta: float,
                       encoder: SentenceEncoder) -> dict[str, list[str]]:
    """Split candidate sentences into prefer / dislike / dropped.

    Sentences may be strings, GeneratedSentence objects, or (text, embedding)
    pairs; bare text is embedded content-only through the encoder.
    """
    entries = []
    for s in sentences:
        if isinstance(s, GeneratedSentence):
            entries.append((s.text, encoder.encode_core(s.text)))
        elif isinstance(s, str):
            entries.append((s, encoder.encode_core(s)))
        else:
            text, emb = s
            entries.append((text, np.asarray(emb, dtype=np.float64)))
    prefer, dislike, dropped = contrast_split(entries, action.embedding, target.embedding, delta)
    return {"prefer": prefer, "dislike": dislike, "dropped": dropped}


class _CachedSentenceSource:
    """Shared caching: per-item candidate sentences with core embeddings."""

    db: ItemDatabase
    encoder: SentenceEncoder

    def __init__(self):
        self._cache: dict[int, tuple[list[str], np.ndarray]] = {}

    def _build(self, item_idx: int) -> list[tuple[str, np.ndarray]]:
        raise NotImplementedError

    def block_for(self, item_idx: int) -> tuple[list[str], np.ndarray]:
        """(texts, stacked embeddings) for one item; embeddings shape (n, dim)."""
        cached = self._cache.get(item_idx)
        if cached is None:
            entries = self._build(item_idx)
            texts = [t for t, _ in entries]
            embs = (np.stack([e for _, e in entries]) if entries
                    else np.zeros((0, self.db.dim)))
            cached = (texts, embs)
            self._cache[item_idx] = cached
        return cached

    def entries_for(self, item_idx: int) -> list[tuple[str, np.ndarray]]:
        texts, embs = self.block_for(item_idx)
        return list(zip(texts, embs))


class GrammarSentenceSource(_CachedSentenceSource):
    """Candidate sentences from detected objects phrased through the grammar."""

    def __init__(self, db: ItemDatabase, encoder: SentenceEncoder,
                 grammar: list[str] | None = None, top_objects: int = 10):
        super().__init__()
        self.db = db
        self.encoder = encoder
        self.grammar = list(grammar) if grammar is not None else list(DEFAULT_GRAMMAR)
        self.top_objects = top_objects

    def _build(self, item_idx: int) -> list[tuple[str, np.ndarray]]:
        detection = detect_objects(self.db.items[item_idx], self.db, self.top_objects)
        sentences = compose_sentences(detection, self.grammar)
        return [(s.text, self.encoder.encode_core(s.text)) for s in sentences]


class ManifestSentenceSource(_CachedSentenceSource):
    """Candidate sentences straight from the manifest's per-item descriptions.

    Sentences that mention no dictionary tag cannot be scored and are skipped.
    """

    def __init__(self, db: ItemDatabase, encoder: SentenceEncoder):
        super().__init__()
        self.db = db
        self.encoder = encoder

    def _build(self, item_idx: int) -> list[tuple[str, np.ndarray]]:
        return [
            (text, self.encoder.encode_core(text))
            for text in self.db.items[item_idx].sentences
            if self.encoder.extract_tags(text)
        ]
