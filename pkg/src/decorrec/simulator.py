"""Rule-based simulated user: hidden target, templated difference feedback,
rank-based satisfaction, and episode termination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import Item, ItemDatabase
from .encoder import SentenceEncoder
from .feedback import GrammarSentenceSource, contrast_split


REFERENCE_ACTION_SPACE = 2865  # catalogue size the default rank thresholds assume


def scaled_thresholds(num_items: int,
                      base: tuple[int, int, int, int] = (10, 20, 30, 50)) -> tuple[int, ...]:
    """Rank thresholds rescaled to a smaller catalogue.

    The defaults are rank cutoffs for a ~2865-item action space; applying them
    verbatim to a few-hundred-item database makes the top band so wide that
    nearly every decent recommendation earns the maximum satisfaction, which
    erases the return difference between an exact hit now and a near-miss
    first (satisfaction 2 + gamma * success 10 = success 10). Floor-scaling
    keeps the bands proportional and the top band strict.
    """
    out: list[int] = []
    prev = 0
    for b in base:
        v = max(prev + 1, int(b * num_items / REFERENCE_ACTION_SPACE))
        out.append(v)
        prev = v
    return tuple(out)


@dataclass
class SimulatorConfig:
    t_max: int = 10
    thresholds: tuple[int, int, int, int] = (10, 20, 30, 50)
    contrast_margin: float = 0.1
    success_reward: float = 10.0
    prefer_template: str = "I prefer {f}"
    dislike_template: str = "I don't like {f}"
    max_request_tags: int = 4
    seed: int = 0

    def __post_init__(self):
        l0, l1, l2, l3 = self.thresholds
        if not (l0 < l1 < l2 < l3):
            raise ValueError("satisfaction thresholds must be strictly increasing")
        if self.contrast_margin <= 0:
            raise ValueError("contrast margin must be positive")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


@dataclass
class EpisodeContext:
    target_idx: int
    target_sims: np.ndarray
    round: int = 0
    served: list[int] = field(default_factory=list)
    done: bool = False
    done_reason: str | None = None


@dataclass
class StepResult:
    feedback_text: str | None
    feedback_emb: np.ndarray | None
    reward: float
    done: bool
    done_reason: str | None
    rank: int | None


def satisfaction(rank: int, config: SimulatorConfig) -> int:
    """Five-level satisfaction from the action's similarity rank to the target."""
    if rank < 1:
        raise ValueError("rank is 1-based")
    l0, l1, l2, l3 = config.thresholds
    if rank <= l0:
        return 2
    if rank <= l1:
        return 1
    if rank <= l2:
        return 0
    if rank <= l3:
        return -1
    return -2


def rank_of(action: Item, target: Item, db: ItemDatabase) -> int:
    """1-based rank of the action among all items by similarity to the target.

    Ties resolve by manifest index; the target itself ranks 1.
    """
    a_idx = db.index_of(action.id)
    db.index_of(target.id)
    sims = db.sims_to(target.embedding)
    return _rank_from_sims(sims, a_idx)


def _rank_from_sims(sims: np.ndarray, a_idx: int) -> int:
    s = sims[a_idx]
    return int(1 + (sims > s).sum() + (sims[:a_idx] == s).sum())


def sample_target(db: ItemDatabase, rng: np.random.Generator) -> int:
    if len(db) < 2:
        raise ValueError("need at least two items to hide a target among alternatives")
    return int(rng.integers(len(db)))


def _render_request(tags: list[str]) -> str:
    if len(tags) == 1:
        return f"a room with {tags[0]}"
    return "a room with " + ", ".join(tags[:-1]) + " and " + tags[-1]


class UserSimulator:
    """Simulates the feedback loop against a hidden target item."""

    def __init__(self, db: ItemDatabase, sentence_source, encoder: SentenceEncoder,
                 config: SimulatorConfig | None = None):
        self.db = db
        self.source = sentence_source
        self.encoder = encoder
        self.config = config or SimulatorConfig()
        self._feedback_emb_cache: dict[str, np.ndarray] = {}

    def sample_target(self, rng: np.random.Generator) -> int:
        return sample_target(self.db, rng)

    def new_episode(self, target_idx: int) -> EpisodeContext:
        target = self.db.items[target_idx]
        return EpisodeContext(target_idx=target_idx, target_sims=self.db.sims_to(target.embedding))

    def initial_request(self, ctx: EpisodeContext, rng: np.random.Generator) -> tuple[str, np.ndarray]:
        """First user message: names a random subset of the target's tags."""
        tags = self.db.items[ctx.target_idx].objects
        if not tags:
            raise ValueError("target item carries no tags to phrase a request from")
        size = int(rng.integers(1, min(self.config.max_request_tags, len(tags)) + 1))
        chosen = sorted(rng.choice(len(tags), size=size, replace=False).tolist())
        text = _render_request([tags[i] for i in chosen])
        return text, self._encode_feedback(text)

    def _encode_feedback(self, text: str) -> np.ndarray:
        emb = self._feedback_emb_cache.get(text)
        if emb is None:
            emb = self.encoder.encode_sentence(text)
            self._feedback_emb_cache[text] = emb
        return emb

    def build_feedback_pool(self, action_idx: int, target_idx: int) -> dict[str, list[str]]:
        """Templated candidate feedback split by the contrast rule.

        Vectorized but entry-for-entry equal to feedback.contrast_split.
        """
        texts_a, embs_a = self.source.block_for(action_idx)
        texts_t, embs_t = self.source.block_for(target_idx)
        texts = list(texts_a)
        blocks = [embs_a]
        seen = set(texts_a)
        fresh = [i for i, t in enumerate(texts_t) if t not in seen]
        if fresh:
            texts += [texts_t[i] for i in fresh]
            blocks.append(embs_t[fresh])
        if not texts:
            return {"prefer": [], "dislike": []}
        E = np.concatenate(blocks, axis=0)
        norms = np.linalg.norm(E, axis=1)
        a_emb = self.db.items[action_idx].embedding
        t_emb = self.db.items[target_idx].embedding
        sims_t = (E @ t_emb) / (norms * np.linalg.norm(t_emb))
        sims_a = (E @ a_emb) / (norms * np.linalg.norm(a_emb))
        gap = sims_t - sims_a
        delta = self.config.contrast_margin
        return {
            "prefer": [self.config.prefer_template.format(f=texts[i])
                       for i in np.flatnonzero(gap > delta)],
            "dislike": [self.config.dislike_template.format(f=texts[i])
                        for i in np.flatnonzero(-gap > delta)],
        }

    def _fallback_feedback(self, action_idx: int, target_idx: int, rng: np.random.Generator) -> str:
        target_tags = self.db.items[target_idx].objects
        action_tags = set(self.db.items[action_idx].objects)
        missing = [t for t in target_tags if t not in action_tags] or list(target_tags)
        tag = missing[int(rng.integers(len(missing)))]
        return self.config.prefer_template.format(f=tag)

    def step(self, ctx: EpisodeContext, action_idx: int, rng: np.random.Generator) -> StepResult:
        """Serve one recommendation; returns reward, feedback, termination."""
        if ctx.done:
            raise RuntimeError("step() after the episode ended")
        ctx.round += 1
        ctx.served.append(action_idx)

        if action_idx == ctx.target_idx:
            ctx.done = True
            ctx.done_reason = "success"
            return StepResult(None, None, self.config.success_reward, True, "success", 1)

        rank = _rank_from_sims(ctx.target_sims, action_idx)
        reward = float(satisfaction(rank, self.config))
        pool = self.build_feedback_pool(action_idx, ctx.target_idx)
        union = pool["prefer"] + pool["dislike"]
        if union:
            text = union[int(rng.integers(len(union)))]
        else:
            text = self._fallback_feedback(action_idx, ctx.target_idx, rng)

        if ctx.round >= self.config.t_max:
            ctx.done = True
            ctx.done_reason = "exhausted"
        return StepResult(text, self._encode_feedback(text), reward, ctx.done, ctx.done_reason, rank)


def make_simulator(db: ItemDatabase, config: SimulatorConfig | None = None,
                   source: str = "grammar", grammar: list[str] | None = None,
                   encoder: SentenceEncoder | None = None) -> UserSimulator:
    """Wire a simulator with the database's own encoder and a sentence source."""
    from .feedback import ManifestSentenceSource

    encoder = encoder or SentenceEncoder.for_database(db)
    if source == "grammar":
        src = GrammarSentenceSource(db, encoder, grammar=grammar)
    elif source == "manifest":
        src = ManifestSentenceSource(db, encoder)
    else:
        raise ValueError(f"unknown sentence source: {source!r}")
    return UserSimulator(db, src, encoder, config)
