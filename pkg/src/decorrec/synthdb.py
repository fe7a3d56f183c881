"""Synthetic desk-scale database: attribute-tagged items with deterministic
embeddings, description sentences, and an object dictionary."""

from __future__ import annotations

import numpy as np

from .embedding import Item, ItemDatabase
from .encoder import AttributeSpace, synth_encode
from .feedback import DEFAULT_GRAMMAR

DEFAULT_OBJECT_NAMES = [
    "sofa", "canopy bed", "pendant light", "french window",
    "marble floor", "bookshelf", "fireplace", "bar counter",
    "tatami mat", "chandelier", "walk-in closet", "bay window",
    "kitchen island", "wood paneling", "skylight", "vanity table",
]


def attribute_names(num_attributes: int) -> list[str]:
    if num_attributes <= len(DEFAULT_OBJECT_NAMES):
        return DEFAULT_OBJECT_NAMES[:num_attributes]
    extra = [f"style {i:02d}" for i in range(num_attributes - len(DEFAULT_OBJECT_NAMES))]
    return DEFAULT_OBJECT_NAMES + extra


def generate_database(num_items: int = 512, num_attributes: int = 16, dim: int = 32,
                      seed: int = 0, noise_scale: float = 0.05,
                      min_tags: int = 7, max_tags: int = 9) -> ItemDatabase:
    """Items with unique tag sets; embeddings quantized to float32 so the
    on-disk round trip is lossless."""
    if num_items < 2:
        raise ValueError("need at least two items")
    names = attribute_names(num_attributes)
    space = AttributeSpace.generate(names, dim, noise_scale=noise_scale, seed=seed)
    rng = np.random.default_rng([seed, 1])

    max_tags = min(max_tags, num_attributes)
    seen: set[frozenset[str]] = set()
    items: list[Item] = []
    attempts = 0
    while len(items) < num_items:
        attempts += 1
        if attempts > num_items * 200:
            raise ValueError("attribute space too small for this many unique tag sets")
        size = int(rng.integers(min_tags, max_tags + 1))
        idxs = sorted(rng.choice(num_attributes, size=size, replace=False).tolist())
        tags = [names[i] for i in idxs]
        key = frozenset(tags)
        if key in seen:
            continue
        seen.add(key)
        emb = synth_encode(tags, space).astype(np.float32).astype(np.float64)
        sentences = [
            DEFAULT_GRAMMAR[j % len(DEFAULT_GRAMMAR)].format(object=tag)
            for j, tag in enumerate(tags)
        ]
        items.append(Item(
            id=f"case-{len(items):04d}",
            embedding=emb,
            sentences=sentences,
            objects=tags,
        ))

    return ItemDatabase(
        items,
        object_names=names,
        object_vectors=space.basis.astype(np.float32).astype(np.float64),
        encoder_meta={
            "kind": "synthetic",
            "num_attributes": num_attributes,
            "dim": dim,
            "noise_scale": noise_scale,
            "seed": seed,
        },
    )
