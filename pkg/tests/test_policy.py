import numpy as np
import pytest

from decorrec import autodiff as ad
from decorrec import policy as pol
from decorrec.policy import CandidateSet, PolicyConfig, PolicyState


@pytest.fixture(scope="module")
def pcfg(tiny_db):
    return PolicyConfig(dim=tiny_db.dim)


@pytest.fixture(scope="module")
def params(tiny_db, pcfg):
    return pol.init_policy_params(pcfg, np.random.default_rng(0))


def make_state(db, n_feedback, rng, excluded=()):
    embs = [rng.standard_normal(db.dim) for _ in range(n_feedback)]
    actions = [db.matrix[i] for i in range(n_feedback - 1)]
    return PolicyState(embs, actions, set(excluded))


class TestPolicyState:
    def test_history_shape_enforced(self):
        with pytest.raises(ValueError, match="one action per"):
            PolicyState([np.ones(4)], [np.ones(4)], set())
        with pytest.raises(ValueError, match="initial request"):
            PolicyState([], [], set())


class TestCoarseWeights:
    def test_untrained_head_gives_half(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 3, np.random.default_rng(1))
        w = pol.coarse_weights(state, params, pcfg).data
        assert np.array_equal(w, np.full(3, 0.5))

    def test_single_feedback(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 1, np.random.default_rng(2))
        assert pol.coarse_weights(state, params, pcfg).data.shape == (1,)

    def test_weights_in_open_interval(self, tiny_db, pcfg):
        trained = pol.init_policy_params(pcfg, np.random.default_rng(3))
        trained["coarse.weight_mlp.w1"].data = np.random.default_rng(4).standard_normal((pcfg.hidden, 1))
        state = make_state(tiny_db, 4, np.random.default_rng(5))
        w = pol.coarse_weights(state, trained, pcfg).data
        assert np.all(w > 0) and np.all(w < 1)


class TestCoarseDistribution:
    def test_zero_similarities_give_uniform(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 1, np.random.default_rng(6))
        pi = pol.coarse_distribution(state, params, pcfg, tiny_db,
                                     M=np.zeros((1, len(tiny_db)))).data
        assert np.allclose(pi, 1.0 / len(tiny_db), atol=1e-12)

    def test_dominant_logit_saturates(self, tiny_db, pcfg, params):
        M = np.zeros((1, len(tiny_db)))
        M[0, 5] = 40.0  # x0.5 weight -> logit gap 20
        state = make_state(tiny_db, 1, np.random.default_rng(7))
        pi = pol.coarse_distribution(state, params, pcfg, tiny_db, M=M).data
        assert pi[5] > 0.999999

    def test_matches_softmax_oracle(self, tiny_db, pcfg, params):
        rng = np.random.default_rng(8)
        state = make_state(tiny_db, 3, rng)
        from decorrec.embedding import similarity_matrix
        M = similarity_matrix(state.feedback_embs, tiny_db)
        pi = pol.coarse_distribution(state, params, pcfg, tiny_db).data
        w = pol.coarse_weights(state, params, pcfg).data
        logits = w @ M
        expected = np.exp(logits - logits.max())
        expected /= expected.sum()
        assert np.allclose(pi, expected, atol=1e-10)

    def test_sums_to_one(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 2, np.random.default_rng(9))
        pi = pol.coarse_distribution(state, params, pcfg, tiny_db).data
        assert pi.sum() == pytest.approx(1.0, abs=1e-9)

    def test_excluded_get_zero(self, tiny_db, pcfg, params):
        excluded = {tiny_db.items[0].id, tiny_db.items[4].id}
        state = make_state(tiny_db, 2, np.random.default_rng(10), excluded=excluded)
        pi = pol.coarse_distribution(state, params, pcfg, tiny_db).data
        assert pi[0] == 0.0 and pi[4] == 0.0
        assert pi.sum() == pytest.approx(1.0, abs=1e-9)

    def test_all_excluded_rejected(self, tiny_db, pcfg, params):
        excluded = {item.id for item in tiny_db.items}
        state = make_state(tiny_db, 1, np.random.default_rng(11), excluded=excluded)
        with pytest.raises(ValueError, match="excluded"):
            pol.coarse_distribution(state, params, pcfg, tiny_db)

    def test_argmax_invariant_under_feedback_rescaling(self, tiny_db, pcfg, params):
        rng = np.random.default_rng(12)
        state = make_state(tiny_db, 3, rng)
        scaled = PolicyState([3.7 * f for f in state.feedback_embs],
                             state.action_embs, state.excluded_ids)
        a = pol.coarse_distribution(state, params, pcfg, tiny_db).data
        b = pol.coarse_distribution(scaled, params, pcfg, tiny_db).data
        assert np.argmax(a) == np.argmax(b)


class TestSelectCandidates:
    def test_k1_is_argmax(self, tiny_db):
        pi = np.zeros(len(tiny_db))
        pi[7] = 1.0
        cands = pol.select_candidates(pi, 1, set(), tiny_db)
        assert cands.indices == [7]

    def test_full_k_sorted_descending(self, tiny_db):
        rng = np.random.default_rng(13)
        pi = rng.random(len(tiny_db))
        pi /= pi.sum()
        cands = pol.select_candidates(pi, len(tiny_db), set(), tiny_db)
        assert len(cands.indices) == len(tiny_db)
        assert all(pi[a] >= pi[b] for a, b in zip(cands.indices, cands.indices[1:]))

    def test_tie_goes_to_lower_index(self, tiny_db):
        pi = np.zeros(len(tiny_db))
        pi[3] = pi[9] = 0.4
        pi[15] = 0.2
        cands = pol.select_candidates(pi, 2, set(), tiny_db)
        assert cands.indices == [3, 9]

    def test_excluded_never_selected(self, tiny_db):
        pi = np.full(len(tiny_db), 1.0 / len(tiny_db))
        cands = pol.select_candidates(pi, len(tiny_db), {0, 1, 2}, tiny_db)
        assert set(cands.indices).isdisjoint({0, 1, 2})

    def test_no_eligible_rejected(self, tiny_db):
        pi = np.full(len(tiny_db), 1.0 / len(tiny_db))
        with pytest.raises(ValueError, match="eligible"):
            pol.select_candidates(pi, 2, set(range(len(tiny_db))), tiny_db)

    def test_shrinks_when_nearly_exhausted(self, tiny_db):
        pi = np.full(len(tiny_db), 1.0 / len(tiny_db))
        cands = pol.select_candidates(pi, 4, set(range(len(tiny_db) - 2)), tiny_db)
        assert len(cands.indices) == 2


class TestFuseHistory:
    def test_single_round_sequence_length(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 1, np.random.default_rng(14))
        assert pol.fuse_history(state, params, pcfg).data.shape == (1, tiny_db.dim)

    def test_interleaved_length(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 3, np.random.default_rng(15))
        assert pol.fuse_history(state, params, pcfg).data.shape == (5, tiny_db.dim)

    def test_single_row_is_value_projection(self, tiny_db, pcfg):
        # degenerate config: t=1, zero modality embedding -> attention over one
        # key is the value projection of (row + position 0)
        store = pol.init_policy_params(pcfg, np.random.default_rng(16))
        store["fine.modality"].data = np.zeros((2, tiny_db.dim))
        state = make_state(tiny_db, 1, np.random.default_rng(17))
        out = pol.fuse_history(state, store, pcfg).data
        raw = state.feedback_embs[0] + pol.sinusoidal_positions(1, tiny_db.dim)[0]
        assert np.allclose(out[0], raw @ store["fine.fuse.wv"].data, atol=1e-10)

    def test_pure(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 2, np.random.default_rng(18))
        a = pol.fuse_history(state, params, pcfg).data
        b = pol.fuse_history(state, params, pcfg).data
        assert np.array_equal(a, b)


class TestFineDistribution:
    def candidates(self, db, idxs):
        return CandidateSet(indices=list(idxs), ids=[db.items[i].id for i in idxs],
                            embeddings=db.matrix[list(idxs)])

    def test_single_candidate_is_certain(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 2, np.random.default_rng(19))
        h_t = pol.fuse_history(state, params, pcfg)
        pi = pol.fine_distribution(h_t, self.candidates(tiny_db, [3]), params, pcfg).data
        assert np.array_equal(pi, [1.0])

    def test_identical_candidates_uniform(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 2, np.random.default_rng(20))
        h_t = pol.fuse_history(state, params, pcfg)
        cands = CandidateSet(indices=[0, 1, 2], ids=["x", "y", "z"],
                             embeddings=np.tile(tiny_db.matrix[5], (3, 1)))
        pi = pol.fine_distribution(h_t, cands, params, pcfg).data
        assert np.allclose(pi, 1.0 / 3.0, atol=1e-12)

    def test_matches_formula_oracle(self, tiny_db, pcfg):
        store = pol.init_policy_params(pcfg, np.random.default_rng(21))
        rng = np.random.default_rng(22)
        store["fine.score_mlp.w1"].data = rng.standard_normal((pcfg.hidden, 1))
        state = make_state(tiny_db, 2, rng)
        h_t = pol.fuse_history(state, store, pcfg)
        cands = self.candidates(tiny_db, [1, 4, 8])
        pi = pol.fine_distribution(h_t, cands, store, pcfg).data

        from test_autodiff import reference_attention
        att = reference_attention(cands.embeddings, h_t.data,
                                  store["fine.cross.wq"].data, store["fine.cross.wk"].data,
                                  store["fine.cross.wv"].data, pcfg.num_heads)
        hidden = np.maximum(att @ store["fine.score_mlp.w0"].data + store["fine.score_mlp.b0"].data, 0)
        logits = (hidden @ store["fine.score_mlp.w1"].data + store["fine.score_mlp.b1"].data).ravel()
        expected = np.exp(logits - logits.max())
        expected /= expected.sum()
        assert np.allclose(pi, expected, atol=1e-10)

    def test_sums_to_one(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 3, np.random.default_rng(23))
        h_t = pol.fuse_history(state, params, pcfg)
        pi = pol.fine_distribution(h_t, self.candidates(tiny_db, [0, 5, 9, 11]), params, pcfg).data
        assert pi.sum() == pytest.approx(1.0, abs=1e-9)

    def test_empty_candidates_rejected(self, tiny_db, pcfg, params):
        state = make_state(tiny_db, 1, np.random.default_rng(24))
        h_t = pol.fuse_history(state, params, pcfg)
        with pytest.raises(ValueError, match="empty"):
            pol.fine_distribution(h_t, CandidateSet([], [], np.zeros((0, tiny_db.dim))),
                                  params, pcfg)


class TestSelectAction:
    def test_greedy_argmax(self):
        assert pol.greedy_action(np.array([0.2, 0.5, 0.3])) == 1

    def test_greedy_tie_lowest_index(self):
        assert pol.greedy_action(np.array([0.4, 0.4, 0.2])) == 0

    def test_epsilon_one_always_argmax(self):
        rng = np.random.default_rng(25)
        pi = np.array([0.1, 0.6, 0.3])
        assert all(pol.epsilon_action(pi, 1.0, rng) == 1 for _ in range(100))

    def test_epsilon_zero_uniform_over_rest(self):
        rng = np.random.default_rng(26)
        pi = np.array([0.1, 0.6, 0.2, 0.1])
        counts = np.zeros(4)
        n = 10000
        for _ in range(n):
            counts[pol.epsilon_action(pi, 0.0, rng)] += 1
        assert counts[1] == 0
        expected = n / 3
        sigma = np.sqrt(n * (1 / 3) * (2 / 3))
        for i in (0, 2, 3):
            assert abs(counts[i] - expected) < 3 * sigma

    def test_eligible_restriction(self):
        rng = np.random.default_rng(27)
        pi = np.array([0.9, 0.05, 0.05])
        for _ in range(50):
            assert pol.epsilon_action(pi, 0.0, rng, eligible=[1, 2]) in (1, 2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            pol.greedy_action(np.array([]))
