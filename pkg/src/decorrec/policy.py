"""Coarse-to-fine policy: feedback-weighted retrieval plus candidate reranking.

The coarse network scores every item by a learned weighted sum of its
similarity to each feedback sentence; the fine network reranks the top-k
candidates by cross-attending each candidate against the fused multimodal
interaction history.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .embedding import ItemDatabase, similarity_matrix

MASK_LOGIT = -1e30


@dataclass
class PolicyConfig:
    dim: int = 32
    num_heads: int = 4
    hidden: int = 32


@dataclass
class PolicyState:
    """Embedded interaction history: t feedback vectors, t-1 action vectors."""

    feedback_embs: list[np.ndarray]
    action_embs: list[np.ndarray] = field(default_factory=list)
    excluded_ids: set[str] = field(default_factory=set)

    def __post_init__(self):
        if len(self.feedback_embs) < 1:
            raise ValueError("state needs at least the initial request")
        if len(self.action_embs) != len(self.feedback_embs) - 1:
            raise ValueError("history must hold exactly one action per non-initial feedback")


@dataclass
class CandidateSet:
    """Top-k items by coarse probability, in descending-probability order."""

    indices: list[int]
    ids: list[str]
    embeddings: np.ndarray


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * sqrt(2.0 / (fan_in + fan_out))


def init_policy_params(cfg: PolicyConfig, rng: np.random.Generator) -> ParamStore:
    """Fresh parameters for both networks.

    Attention projections start near identity so attention is content-matched
    from the first episode instead of uniform (near-zero logits collapse every
    attended row to the sequence mean, which stalls early learning). Scoring
    heads start at zero so untrained coarse weights are exactly 0.5 and the
    untrained fine distribution is exactly uniform.
    """
    h, hid = cfg.dim, cfg.hidden
    store = ParamStore()
    eye = np.eye(h)
    # The fine side starts with a sharper content-match prior: shallow gains
    # leave the fused history rows collapsed toward their mean, and near-twin
    # candidates then get indistinguishable attended mixes.
    gains = {"coarse.attn": 1.0, "fine.fuse": 4.0, "fine.cross": 4.0}
    for prefix, gain in gains.items():
        for name in ("wq", "wk", "wv"):
            g = gain if name in ("wq", "wk") else 1.0
            store.add(f"{prefix}.{name}", g * eye + rng.standard_normal((h, h)) * 0.05)
    for prefix in ("coarse.weight_mlp", "fine.score_mlp"):
        store.add(f"{prefix}.w0", _xavier(rng, h, hid))
        store.add(f"{prefix}.b0", np.zeros(hid))
        store.add(f"{prefix}.w1", np.zeros((hid, 1)))
        store.add(f"{prefix}.b1", np.zeros(1))
    store.add("fine.modality", rng.standard_normal((2, h)) * 0.1)
    return store


def _mlp_layers(params: ParamStore, prefix: str) -> list[tuple[Tensor, Tensor]]:
    return [
        (params[f"{prefix}.w0"], params[f"{prefix}.b0"]),
        (params[f"{prefix}.w1"], params[f"{prefix}.b1"]),
    ]


def coarse_weights(state: PolicyState, params: ParamStore, cfg: PolicyConfig) -> Tensor:
    """Per-feedback importance in (0, 1): sigmoid(MLP(SelfAttn(F)))."""
    x = Tensor(np.stack(state.feedback_embs))
    att = ad.self_attention(x, params["coarse.attn.wq"], params["coarse.attn.wk"],
                            params["coarse.attn.wv"], cfg.num_heads)
    raw = ad.mlp(att, _mlp_layers(params, "coarse.weight_mlp"))
    return ad.reshape(ad.sigmoid(raw), (len(state.feedback_embs),))


def excluded_indices(state: PolicyState, db: ItemDatabase) -> list[int]:
    return sorted(db.index_of(item_id) for item_id in state.excluded_ids)


def coarse_logits(state: PolicyState, params: ParamStore, cfg: PolicyConfig,
                  db: ItemDatabase, M: np.ndarray | None = None) -> Tensor:
    """w^T M over all N items, with excluded items masked to -inf surrogate."""
    t = len(state.feedback_embs)
    if M is None:
        M = similarity_matrix(state.feedback_embs, db)
    w = coarse_weights(state, params, cfg)
    logits = ad.reshape(ad.matmul(ad.reshape(w, (1, t)), Tensor(M)), (len(db),))
    excluded = excluded_indices(state, db)
    if excluded:
        if len(excluded) >= len(db):
            raise ValueError("all items excluded; no eligible action remains")
        mask = np.zeros(len(db))
        mask[excluded] = MASK_LOGIT
        logits = ad.add(logits, Tensor(mask))
    return logits


def coarse_distribution(state: PolicyState, params: ParamStore, cfg: PolicyConfig,
                        db: ItemDatabase, M: np.ndarray | None = None) -> Tensor:
    """Selection probability over all N items: softmax(w^T M), excluded at 0."""
    return ad.softmax(coarse_logits(state, params, cfg, db, M=M), axis=-1)


def select_candidates(pi: np.ndarray, k: int, excluded: set[int] | list[int],
                      db: ItemDatabase) -> CandidateSet:
    """The k highest-probability eligible items; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    excluded = set(excluded)
    order = np.argsort(-pi, kind="stable")
    picked = [int(i) for i in order if int(i) not in excluded][:k]
    if not picked:
        raise ValueError("no eligible item to recommend")
    return CandidateSet(
        indices=picked,
        ids=[db.items[i].id for i in picked],
        embeddings=db.matrix[picked],
    )


_POSITION_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Standard sin/cos position table, scaled to unit-norm-comparable rows."""
    key = (n, dim)
    cached = _POSITION_CACHE.get(key)
    if cached is not None:
        return cached
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table *= 1.0 / sqrt(dim)
    table.setflags(write=False)
    _POSITION_CACHE[key] = table
    return table


def fuse_history(state: PolicyState, params: ParamStore, cfg: PolicyConfig) -> Tensor:
    """Fused multimodal history: interleaved [f0, a0, f1, ..., f_{t-1}] with
    modality-type embeddings and sinusoidal positions, through one
    self-attention layer. Output keeps the full sequence."""
    t = len(state.feedback_embs)
    rows = []
    modality_pattern = []
    for i in range(t):
        rows.append(state.feedback_embs[i])
        modality_pattern.append(0)
        if i < t - 1:
            rows.append(state.action_embs[i])
            modality_pattern.append(1)
    base = np.stack(rows) + sinusoidal_positions(len(rows), cfg.dim)
    x = ad.add(Tensor(base), ad.index_select(params["fine.modality"], modality_pattern))
    return ad.self_attention(x, params["fine.fuse.wq"], params["fine.fuse.wk"],
                             params["fine.fuse.wv"], cfg.num_heads)


def fine_logits(h_t: Tensor, candidates: CandidateSet, params: ParamStore,
                cfg: PolicyConfig) -> Tensor:
    """One logit per candidate: MLP(CrossAttn(C, h_t)) with candidates as queries."""
    if len(candidates.indices) == 0:
        raise ValueError("empty candidate set")
    c = Tensor(candidates.embeddings)
    att = ad.cross_attention(c, h_t, params["fine.cross.wq"], params["fine.cross.wk"],
                             params["fine.cross.wv"], cfg.num_heads)
    logits = ad.mlp(att, _mlp_layers(params, "fine.score_mlp"))
    return ad.reshape(logits, (len(candidates.indices),))


def fine_distribution(h_t: Tensor, candidates: CandidateSet, params: ParamStore,
                      cfg: PolicyConfig) -> Tensor:
    """Probability over the candidate set: softmax(MLP(CrossAttn(C, h_t)))."""
    return ad.softmax(fine_logits(h_t, candidates, params, cfg), axis=-1)


def greedy_action(pi: np.ndarray) -> int:
    """Argmax with lowest-index tie-break."""
    if len(pi) == 0:
        raise ValueError("empty distribution")
    return int(np.argmax(pi))


def epsilon_action(pi: np.ndarray, epsilon: float, rng: np.random.Generator,
                   eligible: list[int] | np.ndarray | None = None) -> int:
    """Exploit the argmax with probability epsilon, otherwise pick uniformly
    among the remaining eligible actions (epsilon=1 is pure exploitation)."""
    if len(pi) == 0:
        raise ValueError("empty distribution")
    if eligible is None:
        best = int(np.argmax(pi))
        n = len(pi)
    else:
        elig = np.asarray(eligible, dtype=np.intp)
        if elig.size == 0:
            raise ValueError("no eligible action")
        best = int(elig[np.argmax(pi[elig])])
        n = elig.size
    if n == 1 or epsilon >= 1.0 or rng.random() < epsilon:
        return best
    j = int(rng.integers(n - 1))
    if eligible is None:
        return j if j < best else j + 1
    others = elig[elig != best]
    return int(others[j])
