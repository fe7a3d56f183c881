"""Episode rollout, discounted returns, policy-gradient losses, training loop.

Rollouts run gradient-free; each optimizer step replays the collected batch
through the policy with the tape on, so the executed actions' log-probabilities
re-enter the loss exactly as they were produced.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import numpy as np

from . import autodiff as ad
from . import policy as pol
from .autodiff import ParamStore, Tensor
from .embedding import ItemDatabase
from .policy import CandidateSet, PolicyConfig, PolicyState
from .simulator import UserSimulator, make_simulator


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epsilon: float = 0.8
    gamma: float = 0.8
    alpha: float = 0.1
    k: int = 4
    lr: float = 1e-5
    t_max: int = 10
    episodes: int = 5000
    batch_episodes: int = 16
    seed: int = 0
    exclusion: bool = True
    standardize_returns: bool = False
    loss: str = "cf"  # "cf" trains both networks, "coarse" only the retrieval side
    pretrain_episodes: int = 0  # leading slice of the budget trained coarse-only
    num_heads: int = 4
    hidden: int = 32
    grad_clip: float = 5.0
    workers: int = 1

    def __post_init__(self):
        for name in ("epsilon", "gamma", "alpha"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.loss not in ("cf", "coarse"):
            raise ValueError("loss must be 'cf' or 'coarse'")
        if self.k < 1 or self.t_max < 1 or self.batch_episodes < 1:
            raise ValueError("k, t_max, batch_episodes must be >= 1")
        if not 0 <= self.pretrain_episodes <= self.episodes:
            raise ValueError("pretrain_episodes must be within the episode budget")
        if self.pretrain_episodes % self.batch_episodes != 0:
            raise ValueError("pretrain_episodes must align with batch boundaries")

    def policy_config(self, dim: int) -> PolicyConfig:
        return PolicyConfig(dim=dim, num_heads=self.num_heads, hidden=self.hidden)


def discounted_returns(rewards: list[float], gamma: float) -> list[float]:
    """Reward-to-go with discount gamma, computed back-to-front."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    out = [0.0] * len(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


@dataclass
class TraceRound:
    n_feedback: int
    action_idx: int
    logp_coarse: float
    reward: float
    ret: float = 0.0
    candidate_idxs: list[int] | None = None
    cand_pos: int | None = None
    logp_fine: float | None = None


@dataclass
class EpisodeTrace:
    target_idx: int
    feedback_texts: list[str]
    feedback_embs: list[np.ndarray]
    sim_rows: np.ndarray  # (len(feedback_embs), N) feedback-to-item similarities
    rounds: list[TraceRound]
    success: bool
    episode_index: int = 0

    @property
    def episode_return(self) -> float:
        return self.rounds[0].ret if self.rounds else 0.0


def _state_at(trace: EpisodeTrace, rd: TraceRound, db: ItemDatabase, exclusion: bool) -> PolicyState:
    n = rd.n_feedback
    action_idxs = [r.action_idx for r in trace.rounds[: n - 1]]
    excluded = {db.items[i].id for i in action_idxs} if exclusion else set()
    return PolicyState(
        feedback_embs=trace.feedback_embs[:n],
        action_embs=[db.matrix[i] for i in action_idxs],
        excluded_ids=excluded,
    )


def rollout(params: ParamStore, cfg: TrainConfig, db: ItemDatabase, sim: UserSimulator,
            rng: np.random.Generator, episode_index: int = 0,
            use_fine: bool | None = None) -> EpisodeTrace:
    """One full episode under the current parameters (no gradients recorded)."""
    pcfg = cfg.policy_config(db.dim)
    if use_fine is None:
        use_fine = cfg.loss == "cf"
    ctx = sim.new_episode(sim.sample_target(rng))
    text, emb = sim.initial_request(ctx, rng)
    feedback_texts, feedback_embs = [text], [emb]
    sim_rows = [db.sims_to(emb)]
    action_idxs: list[int] = []
    rounds: list[TraceRound] = []

    with ad.no_grad():
        while not ctx.done:
            n = len(feedback_embs)
            excluded = {db.items[i].id for i in action_idxs} if cfg.exclusion else set()
            state = PolicyState(
                feedback_embs=feedback_embs[:],
                action_embs=[db.matrix[i] for i in action_idxs],
                excluded_ids=excluded,
            )
            M = np.stack(sim_rows)
            logp_all = ad.np_log_softmax(pol.coarse_logits(state, params, pcfg, db, M=M).data)
            pi_c = np.exp(logp_all)

            if use_fine:
                cands = pol.select_candidates(pi_c, cfg.k, [db.index_of(i) for i in excluded], db)
                h_t = pol.fuse_history(state, params, pcfg)
                logp_f = ad.np_log_softmax(pol.fine_logits(h_t, cands, params, pcfg).data)
                pos = pol.epsilon_action(np.exp(logp_f), cfg.epsilon, rng)
                action_idx = cands.indices[pos]
                rd = TraceRound(
                    n_feedback=n, action_idx=action_idx,
                    logp_coarse=float(logp_all[action_idx]),
                    reward=0.0, candidate_idxs=cands.indices, cand_pos=pos,
                    logp_fine=float(logp_f[pos]),
                )
            else:
                eligible = [i for i in range(len(db)) if db.items[i].id not in excluded]
                action_idx = pol.epsilon_action(pi_c, cfg.epsilon, rng, eligible=eligible)
                rd = TraceRound(n_feedback=n, action_idx=action_idx,
                                logp_coarse=float(logp_all[action_idx]), reward=0.0)

            result = sim.step(ctx, action_idx, rng)
            rd.reward = result.reward
            rounds.append(rd)
            action_idxs.append(action_idx)
            if result.feedback_emb is not None and not ctx.done:
                feedback_texts.append(result.feedback_text)
                feedback_embs.append(result.feedback_emb)
                sim_rows.append(db.sims_to(result.feedback_emb))

    returns = discounted_returns([r.reward for r in rounds], cfg.gamma)
    for rd, v in zip(rounds, returns):
        rd.ret = v
    return EpisodeTrace(
        target_idx=ctx.target_idx,
        feedback_texts=feedback_texts,
        feedback_embs=feedback_embs,
        sim_rows=np.stack(sim_rows),
        rounds=rounds,
        success=ctx.done_reason == "success",
        episode_index=episode_index,
    )


def _coarse_logp(trace: EpisodeTrace, rd: TraceRound, params: ParamStore,
                 pcfg: PolicyConfig, db: ItemDatabase, exclusion: bool) -> Tensor:
    state = _state_at(trace, rd, db, exclusion)
    logits = pol.coarse_logits(state, params, pcfg, db, M=trace.sim_rows[: rd.n_feedback])
    return ad.pick(ad.log_softmax(logits, axis=-1), rd.action_idx)


def _fine_logp(trace: EpisodeTrace, rd: TraceRound, params: ParamStore,
               pcfg: PolicyConfig, db: ItemDatabase, exclusion: bool) -> Tensor:
    state = _state_at(trace, rd, db, exclusion)
    cands = CandidateSet(
        indices=rd.candidate_idxs,
        ids=[db.items[i].id for i in rd.candidate_idxs],
        embeddings=db.matrix[rd.candidate_idxs],
    )
    h_t = pol.fuse_history(state, params, pcfg)
    logits = pol.fine_logits(h_t, cands, params, pcfg)
    return ad.pick(ad.log_softmax(logits, axis=-1), rd.cand_pos)


def loss_coarse(traces: list[EpisodeTrace], params: ParamStore, cfg: TrainConfig,
                db: ItemDatabase) -> Tensor:
    """Coarse-only policy-gradient loss: -mean over traces of sum_t logp * v_t."""
    if not traces:
        raise ValueError("empty batch")
    pcfg = cfg.policy_config(db.dim)
    total = None
    for trace in traces:
        for rd in trace.rounds:
            term = ad.mul(_coarse_logp(trace, rd, params, pcfg, db, cfg.exclusion), rd.ret)
            total = term if total is None else ad.add(total, term)
    return ad.mul(total, -1.0 / len(traces))


def loss_cf(traces: list[EpisodeTrace], params: ParamStore, cfg: TrainConfig,
            db: ItemDatabase, alpha: float | None = None) -> Tensor:
    """Joint coarse-to-fine loss: the executed action is scored under both
    networks, the coarse term weighted by alpha."""
    if not traces:
        raise ValueError("empty batch")
    alpha = cfg.alpha if alpha is None else alpha
    pcfg = cfg.policy_config(db.dim)
    total = None
    for trace in traces:
        for rd in trace.rounds:
            logp_c = _coarse_logp(trace, rd, params, pcfg, db, cfg.exclusion)
            logp_f = _fine_logp(trace, rd, params, pcfg, db, cfg.exclusion)
            term = ad.mul(ad.add(ad.mul(logp_c, alpha), logp_f), rd.ret)
            total = term if total is None else ad.add(total, term)
    return ad.mul(total, -1.0 / len(traces))


def collect_batch(params: ParamStore, cfg: TrainConfig, db: ItemDatabase, sim: UserSimulator,
                  episode_indices: range) -> list[EpisodeTrace]:
    """Roll out a batch; results always merge in episode order, so worker count
    never changes the outcome."""
    def run(ep_idx: int) -> EpisodeTrace:
        rng = np.random.default_rng([cfg.seed, ep_idx])
        use_fine = cfg.loss == "cf" and ep_idx >= cfg.pretrain_episodes
        return rollout(params, cfg, db, sim, rng, episode_index=ep_idx, use_fine=use_fine)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool_:
            traces = list(pool_.map(run, episode_indices))
    else:
        traces = [run(i) for i in episode_indices]
    return sorted(traces, key=lambda tr: tr.episode_index)


def _standardize(traces: list[EpisodeTrace]) -> None:
    rets = np.array([rd.ret for tr in traces for rd in tr.rounds])
    std = rets.std()
    if std < 1e-8:
        return
    mean = rets.mean()
    for tr in traces:
        for rd in tr.rounds:
            rd.ret = (rd.ret - mean) / std


@dataclass
class TrainResult:
    params: ParamStore
    metrics: list[dict] = field(default_factory=list)
    config: TrainConfig | None = None


def train(cfg: TrainConfig, db: ItemDatabase, sim: UserSimulator | None = None,
          on_epoch=None) -> TrainResult:
    """REINFORCE over simulated episodes; deterministic given (config, db)."""
    sim = sim or make_simulator(db)
    if sim.config.t_max != cfg.t_max:
        raise ValueError("simulator t_max differs from the training t_max")
    pcfg = cfg.policy_config(db.dim)
    params = pol.init_policy_params(pcfg, np.random.default_rng(cfg.seed))
    metrics: list[dict] = []

    num_batches = cfg.episodes // cfg.batch_episodes
    ep = 0
    for epoch in range(num_batches):
        traces = collect_batch(params, cfg, db, sim, range(ep, ep + cfg.batch_episodes))
        ep += cfg.batch_episodes
        if cfg.standardize_returns:
            _standardize(traces)

        params.zero_grad()
        if cfg.loss == "cf" and traces[0].rounds[0].candidate_idxs is not None:
            loss = loss_cf(traces, params, cfg, db)
        else:
            loss = loss_coarse(traces, params, cfg, db)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch} (episode {ep})")
        ad.backward(loss)
        params.clip_grad_norm(cfg.grad_clip)
        ad.adam_step(params, cfg.lr)

        record = {
            "epoch": epoch,
            "episodes": ep,
            "success_rate": sum(tr.success for tr in traces) / len(traces),
            "mean_return": float(np.mean([tr.episode_return for tr in traces])),
            "loss": loss_val,
        }
        metrics.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(params=params, metrics=metrics, config=cfg)
