"""Baselines, recall metrics, per-round curves, weight analysis, ablation.

Every policy is evaluated on the same seed-paired episode stream: episode i
always draws the same target, the same initial request, and the same
simulator randomness, so differences between policies are differences in
behavior, not in luck.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import policy as pol
from .autodiff import ParamStore
from .embedding import ItemDatabase
from .policy import PolicyConfig, PolicyState
from .simulator import UserSimulator
from .training import TrainConfig, train

POLICY_KINDS = ("random", "greedy", "greedy_topk_random", "coarse_only", "coarse_fine")


@dataclass
class EvalConfig:
    episodes: int = 2000
    t_max: int = 10
    ks: tuple[int, ...] = (1, 2)
    k: int = 4
    seed: int = 0
    exclusion: bool = True
    num_heads: int = 4
    hidden: int = 32

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if any(k < 1 for k in self.ks):
            raise ValueError("recall cutoffs must be >= 1")


@dataclass
class EpisodeOutcome:
    success_round: int | None
    rounds: int
    topk_first_round: dict[int, int | None]


@dataclass
class EvalResult:
    policy: str
    episodes: int
    t_max: int
    recall: dict[int, float]
    curve: list[float]
    mean_rounds_to_success: float | None
    outcomes: list[EpisodeOutcome] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "episodes": self.episodes,
            "t_max": self.t_max,
            "recall": {f"recall@{k}": v for k, v in sorted(self.recall.items())},
            "per_round_recall_at_1": self.curve,
            "mean_rounds_to_success": self.mean_rounds_to_success,
        }


def recall_at_k(outcomes: list[EpisodeOutcome], k: int) -> float:
    """Fraction of episodes whose target entered the policy's top-k at any round."""
    if not outcomes:
        return 0.0
    return sum(1 for o in outcomes if o.topk_first_round.get(k) is not None) / len(outcomes)


def per_round_curve(outcomes: list[EpisodeOutcome], t_max: int) -> list[float]:
    """Cumulative success fraction by round; nondecreasing by construction."""
    if not outcomes:
        return [0.0] * t_max
    counts = np.zeros(t_max + 1)
    for o in outcomes:
        if o.success_round is not None:
            counts[o.success_round] += 1
    return list(np.cumsum(counts[1:]) / len(outcomes))


def _ranked_prefix(order: np.ndarray, excluded: set[int], limit: int) -> list[int]:
    out = []
    for i in order:
        i = int(i)
        if i not in excluded:
            out.append(i)
            if len(out) == limit:
                break
    return out


def run_policy(kind: str, config: EvalConfig, db: ItemDatabase, sim: UserSimulator,
               params: ParamStore | None = None) -> EvalResult:
    """Evaluate one policy greedily (no exploration) over the paired episode set."""
    if kind not in POLICY_KINDS:
        raise ValueError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")
    needs_params = kind in ("coarse_only", "coarse_fine")
    if needs_params and params is None:
        raise ValueError(f"policy {kind!r} requires a trained checkpoint")
    pcfg = PolicyConfig(dim=db.dim, num_heads=config.num_heads, hidden=config.hidden)
    max_k = max(config.ks)
    outcomes: list[EpisodeOutcome] = []

    for ep in range(config.episodes):
        rng = np.random.default_rng([config.seed, ep])
        ctx = sim.new_episode(sim.sample_target(rng))
        _, emb = sim.initial_request(ctx, rng)
        feedback_embs = [emb]
        rows = [db.sims_to(emb)]
        action_idxs: list[int] = []
        excluded: set[int] = set()
        first_topk: dict[int, int | None] = {k: None for k in config.ks}
        success_round = None

        with ad.no_grad():
            while not ctx.done:
                round_no = ctx.round + 1
                ranking = _rank_actions(kind, config, db, sim, params, pcfg, rng,
                                        feedback_embs, rows, action_idxs, excluded, max_k)
                for k in config.ks:
                    if first_topk[k] is None and ctx.target_idx in ranking[:k]:
                        first_topk[k] = round_no
                action = ranking[0]
                result = sim.step(ctx, action, rng)
                if config.exclusion:
                    excluded.add(action)
                action_idxs.append(action)
                if result.done_reason == "success":
                    success_round = round_no
                if result.feedback_emb is not None and not ctx.done:
                    feedback_embs.append(result.feedback_emb)
                    rows.append(db.sims_to(result.feedback_emb))

        outcomes.append(EpisodeOutcome(
            success_round=success_round,
            rounds=ctx.round,
            topk_first_round=first_topk,
        ))

    recall = {k: recall_at_k(outcomes, k) for k in config.ks}
    successes = [o.success_round for o in outcomes if o.success_round is not None]
    return EvalResult(
        policy=kind,
        episodes=config.episodes,
        t_max=config.t_max,
        recall=recall,
        curve=per_round_curve(outcomes, config.t_max),
        mean_rounds_to_success=float(np.mean(successes)) if successes else None,
        outcomes=outcomes,
    )


def _rank_actions(kind, config, db, sim, params, pcfg, rng, feedback_embs, rows,
                  action_idxs, excluded, max_k) -> list[int]:
    """The policy's preference ranking for this round; element 0 is executed."""
    if kind == "random":
        eligible = np.array([i for i in range(len(db)) if i not in excluded])
        picks = rng.choice(len(eligible), size=min(max_k, len(eligible)), replace=False)
        return [int(eligible[j]) for j in picks]

    if kind in ("greedy", "greedy_topk_random"):
        scores = np.sum(rows, axis=0)
        order = np.argsort(-scores, kind="stable")
        if kind == "greedy":
            return _ranked_prefix(order, excluded, max_k)
        cands = _ranked_prefix(order, excluded, config.k)
        j = int(rng.integers(len(cands)))
        return [cands[j]] + [c for i, c in enumerate(cands) if i != j]

    state = PolicyState(
        feedback_embs=feedback_embs[:],
        action_embs=[db.matrix[i] for i in action_idxs],
        excluded_ids={db.items[i].id for i in excluded},
    )
    pi_c = pol.coarse_distribution(state, params, pcfg, db, M=np.stack(rows)).data
    if kind == "coarse_only":
        order = np.argsort(-pi_c, kind="stable")
        return _ranked_prefix(order, excluded, max_k)

    cands = pol.select_candidates(pi_c, config.k, excluded, db)
    h_t = pol.fuse_history(state, params, pcfg)
    pi_f = pol.fine_distribution(h_t, cands, params, pcfg).data
    order = sorted(range(len(cands.indices)), key=lambda p: (-pi_f[p], p))
    return [cands.indices[p] for p in order]


def compare_policies(kinds: list[str], config: EvalConfig, db: ItemDatabase,
                     sim: UserSimulator, params: ParamStore | None = None) -> dict[str, EvalResult]:
    return {kind: run_policy(kind, config, db, sim, params=params) for kind in kinds}


# ---------------------------------------------------------------------------
# Weight analysis (feedback-importance table)


DEFAULT_WEIGHT_FIXTURES = [
    "a room with sofa",
    "a room with sofa and fireplace",
    "a room with sofa, fireplace and skylight",
    "a room with sofa, fireplace, skylight and chandelier",
]


def weight_report(params: ParamStore, pcfg: PolicyConfig, encoder,
                  fixtures: list[str] | None = None) -> list[dict]:
    """Learned per-feedback weights on fixed fixtures, one sentence at a time.

    The equal-weight column mirrors how an unweighted similarity baseline
    treats every sentence.
    """
    fixtures = fixtures if fixtures is not None else list(DEFAULT_WEIGHT_FIXTURES)
    report = []
    with ad.no_grad():
        for text in fixtures:
            state = PolicyState([encoder.encode_sentence(text)], [], set())
            w = float(pol.coarse_weights(state, params, pcfg).data[0])
            report.append({"feedback": text, "equal_weight_baseline": 1.0, "learned_weight": w})
    return report


# ---------------------------------------------------------------------------
# Reward-vs-return ablation


def ablation_reward_vs_return(base: TrainConfig, db: ItemDatabase, sim: UserSimulator,
                              eval_config: EvalConfig,
                              value_gamma: float = 0.8) -> dict[str, dict]:
    """Train {coarse, cf} x {reward gamma=0, value gamma} on one seed and report
    recall@1 for each variant."""
    from dataclasses import replace

    out = {}
    for loss in ("coarse", "cf"):
        for label, gamma in (("reward", 0.0), ("value", value_gamma)):
            cfg = replace(base, loss=loss, gamma=gamma)
            result = train(cfg, db, sim)
            kind = "coarse_only" if loss == "coarse" else "coarse_fine"
            ev = run_policy(kind, eval_config, db, sim, params=result.params)
            out[f"{loss}_{label}"] = {
                "loss": loss,
                "gamma": gamma,
                "recall@1": ev.recall[1],
                "recall@2": ev.recall.get(2),
            }
    return out


# ---------------------------------------------------------------------------
# Report rendering


def render_table(results: dict[str, EvalResult]) -> str:
    """Aligned plain-text comparison table."""
    ks = sorted(next(iter(results.values())).recall) if results else []
    header = ["policy"] + [f"r@{k}" for k in ks] + ["mean rounds"]
    rows = [header]
    for name, res in results.items():
        rounds = f"{res.mean_rounds_to_success:.2f}" if res.mean_rounds_to_success else "-"
        rows.append([name] + [f"{res.recall[k] * 100:.2f}%" for k in ks] + [rounds])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    return "\n".join(lines)


def csv_rows(result: EvalResult) -> list[dict]:
    """One row per episode, for external plotting."""
    rows = []
    for i, o in enumerate(result.outcomes):
        row = {
            "episode": i,
            "policy": result.policy,
            "rounds": o.rounds,
            "success_round": o.success_round if o.success_round is not None else "",
        }
        for k in sorted(o.topk_first_round):
            first = o.topk_first_round[k]
            row[f"first_top{k}_round"] = first if first is not None else ""
        rows.append(row)
    return rows
