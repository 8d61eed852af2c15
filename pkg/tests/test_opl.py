import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssrlab.core import AHSpec, Dataset, TabularPolicy, Trajectory
from ssrlab.envs import (
    chain_trajectories,
    exact_policy_value,
    make_random_mdp,
    rollout,
    uniform_behavior_policy,
)
from ssrlab.ope import wis_estimate
from ssrlab.opl import (
    AHSpecError,
    LEARNER_SCHEMAS,
    PoisParams,
    bcq_admissible,
    fit_ah,
    fit_bc,
    fit_bcq_tabular,
    fit_mbs_tabular,
    fit_mle_mdp,
    fit_pmdp_ensemble,
    fit_pois,
    hoeffding_penalty,
    numerical_gradient,
    pessimistic_reward,
    plan_horizon_h,
    plan_horizon_q,
    pois_batch,
    pois_gradient,
    pois_objective,
    resolve_params,
)


def _ds(trajs, n_states, n_actions, gamma=1.0):
    return Dataset(tuple(trajs), gamma, n_states, n_actions)


def _bandit(counts, prop=None):
    """One state, actions taken ``counts[a]`` times in single-step trajectories."""
    trajs = []
    for a, c in enumerate(counts):
        trajs += [Trajectory([0], [a], [float(a)], [0], [prop or 1.0 / len(counts)])] * c
    return _ds(trajs, 1, len(counts))


def _random_dataset(rng, nS=4, nA=3, n=20, L=4, gamma=1.0):
    env = make_random_mdp(nS, nA, L, 0.7, int(rng.integers(1 << 30)), gamma)
    return rollout(env, uniform_behavior_policy(env), n, int(rng.integers(1 << 30)))


def _loop_value_iteration(model, admissible, n_iter, familiar=None):
    """Plain-loop oracle for constrained exact backups."""
    S, A = model.counts.shape
    Q = np.zeros((S, A))
    for _ in range(n_iter):
        new = np.zeros((S, A))
        V = np.zeros(S)
        for s in range(S):
            vals = [
                (Q[s, a] if familiar is None or familiar[s, a] else 0.0)
                for a in range(A)
                if admissible[s, a]
            ]
            V[s] = max(vals) if vals else 0.0
        for s in range(S):
            for a in range(A):
                if admissible[s, a]:
                    new[s, a] = model.reward_sa[s, a] + model.gamma * sum(
                        model.transition[s, a, sp] * V[sp] for sp in range(S)
                    )
        Q = new
    return Q


class TestMle:
    def test_top_trajectory_alone(self, chain_env):
        m = fit_mle_mdp(_ds([chain_trajectories(chain_env)[-1]], chain_env.n_states, 2))
        for i in range(chain_env.horizon):
            assert m.transition_mle[i, 1, i + 1] == 1.0
        assert not m.observed_mask[:, 0].any()
        np.testing.assert_array_equal(m.transition_mle[:, 0], 0.0)
        assert m.reward_mle[chain_env.horizon] == 201.0

    def test_unvisited_rows(self):
        m = fit_mle_mdp(_ds([Trajectory([0], [1], [1.0], [1], [0.5])], 3, 2))
        np.testing.assert_array_equal(m.observed_mask, [[False, True], [False, False], [False, False]])
        np.testing.assert_allclose(m.transition_mle[m.observed_mask].sum(axis=-1), 1.0)
        assert m.reward_mle[2] == 0.0

    def test_duplication_invariant(self, chain_data):
        a = fit_mle_mdp(chain_data)
        b = fit_mle_mdp(chain_data.with_trajectories(chain_data.trajectories * 2))
        np.testing.assert_array_equal(b.counts, 2 * a.counts)
        np.testing.assert_allclose(a.transition, b.transition, rtol=0, atol=1e-15)
        np.testing.assert_allclose(a.reward_sa, b.reward_sa, rtol=1e-13, atol=1e-15)
        np.testing.assert_array_equal(a.initial_dist, b.initial_dist)

    def test_counts_by_hand(self):
        trajs = [
            Trajectory([0, 1], [0, 1], [1.0, 2.0], [1, 0], [0.5, 0.5]),
            Trajectory([0], [0], [3.0], [0], [0.5]),
        ]
        m = fit_mle_mdp(_ds(trajs, 2, 2))
        np.testing.assert_array_equal(m.counts, [[2, 0], [0, 1]])
        np.testing.assert_allclose(m.transition[0, 0], [0.5, 0.5])
        assert m.reward_sa[0, 0] == 2.0
        np.testing.assert_allclose(m.reward_state, [2.5, 1.0])
        np.testing.assert_allclose(m.behavior_freq, [[1, 0], [0, 1]])


class TestPlanHorizon:
    def test_true_chain_start_action(self, chain_env):
        m = fit_mle_mdp(_ds(chain_trajectories(chain_env), chain_env.n_states, 2))
        H = chain_env.horizon
        for h in range(1, H):
            assert plan_horizon_h(m, h, H).greedy_actions()[0] == 0
        pi = plan_horizon_h(m, H, H)
        assert pi.greedy_actions()[0] == 1
        assert exact_policy_value(chain_env, pi) == 201.0

    def test_training_set_with_top(self, chain_env, chain_data):
        pi = plan_horizon_h(fit_mle_mdp(chain_data), 6, 6)
        assert exact_policy_value(chain_env, pi) == 201.0

    def test_two_step_formula(self):
        rng = np.random.default_rng(3)
        ds = _random_dataset(rng)
        m = fit_mle_mdp(ds)
        Q2 = plan_horizon_q(m, 2)[1]
        mask = m.observed_mask
        V1 = np.array([max((m.reward_sa[s, a] for a in range(3) if mask[s, a]), default=0.0) for s in range(4)])
        expected = m.reward_sa + m.transition @ V1
        np.testing.assert_allclose(Q2, expected, rtol=1e-14)
        acts = plan_horizon_h(m, 2, 4).greedy_actions()
        for s in range(4):
            if mask[s].any():
                assert mask[s, acts[s]]
                assert Q2[s, acts[s]] >= np.max(Q2[s][mask[s]]) - 1e-12

    def test_range_check(self, chain_data):
        m = fit_mle_mdp(chain_data)
        with pytest.raises(ValueError):
            plan_horizon_h(m, 0, 6)
        with pytest.raises(ValueError):
            plan_horizon_h(m, 7, 6)

    def test_unobserved_state_uniform_and_flagged(self):
        m = fit_mle_mdp(_ds([Trajectory([0], [1], [1.0], [1], [0.5])], 2, 2))
        pi = plan_horizon_h(m, 1, 1)
        np.testing.assert_array_equal(pi.probs[1], [0.5, 0.5])
        assert any("uniform fallback" in f for f in pi.flags)

    def test_ties_lowest_index(self):
        pi = plan_horizon_h(fit_mle_mdp(_bandit([2, 2, 2])), 1, 1)
        # rewards equal the action index, so action 2 is strictly best
        assert pi.greedy_actions()[0] == 2
        trajs = [Trajectory([0], [a], [1.0], [0], [0.5]) for a in (0, 1)]
        assert plan_horizon_h(fit_mle_mdp(_ds(trajs, 1, 2)), 1, 1).greedy_actions()[0] == 0

    def test_deterministic(self, chain_data):
        m = fit_mle_mdp(chain_data)
        assert plan_horizon_h(m, 4, 6).same_as(plan_horizon_h(m, 4, 6))


class TestBC:
    def test_alpha_zero_frequencies(self):
        np.testing.assert_allclose(fit_bc(_bandit([1, 3]), 0.0).probs, [[0.25, 0.75]])

    def test_deterministic_behavior_reproduced(self, chain_env):
        pi = TabularPolicy.deterministic([1, 0, 1, 0, 1, 0, 1], 2)
        ds = rollout(chain_env, pi, 10, 0)
        bc = fit_bc(ds, 0.0)
        visited = np.unique(ds.flat.states)
        np.testing.assert_array_equal(bc.probs[visited], pi.probs[visited])

    def test_safety_threshold_example(self):
        np.testing.assert_array_equal(fit_bc(_bandit([1, 24]), 0.05).probs, [[0.0, 1.0]])

    def test_threshold_wiping_row_is_ignored(self):
        bc = fit_bc(_bandit([1, 1, 1]), 0.5)
        np.testing.assert_allclose(bc.probs, [[1 / 3] * 3])
        assert any("ignored" in f for f in bc.flags)

    def test_unvisited_uniform(self):
        bc = fit_bc(_ds([Trajectory([0], [0], [0.0], [1], [1.0])], 2, 2))
        np.testing.assert_array_equal(bc.probs[1], [0.5, 0.5])
        assert bc.flags

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            fit_bc(_bandit([1]), 1.0)


class TestBCQ:
    def test_delta_zero_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            ds = _random_dataset(rng, gamma=0.9)
            m = fit_mle_mdp(ds)
            _, q = fit_bcq_tabular(ds, 0.0, n_iterations=4)
            np.testing.assert_allclose(q.values, _loop_value_iteration(m, m.observed_mask, 4), rtol=1e-12, atol=1e-12)

    def test_chain_optimal(self, chain_env, chain_data):
        pi, q = fit_bcq_tabular(chain_data, 0.0, n_iterations=6)
        assert exact_policy_value(chain_env, pi) == 201.0
        np.testing.assert_array_equal(q.values, plan_horizon_q(fit_mle_mdp(chain_data), 6)[-1])

    def test_delta_high_empties_sets(self, chain_data):
        pi, q = fit_bcq_tabular(chain_data, 0.9, n_iterations=6)
        np.testing.assert_array_equal(q.values, 0.0)
        assert any("no admissible" in f for f in pi.flags)

    def test_gamma_override(self):
        rng = np.random.default_rng(5)
        ds = _random_dataset(rng)
        m = fit_mle_mdp(ds)
        _, q = fit_bcq_tabular(ds, 0.0, gamma=0.5, n_iterations=3)
        m05 = type(m)(m.counts, m.transition, m.reward_sa, m.reward_state, m.initial_dist, m.propensity, 0.5)
        np.testing.assert_allclose(q.values, _loop_value_iteration(m05, m.observed_mask, 3), atol=1e-12)

    def test_converges_early(self):
        ds = _random_dataset(np.random.default_rng(6), gamma=0.5)
        _, q_long = fit_bcq_tabular(ds, 0.0, n_iterations=5000)
        _, q_mid = fit_bcq_tabular(ds, 0.0, n_iterations=200)
        np.testing.assert_allclose(q_long.values, q_mid.values, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 0.95), st.floats(0, 0.95))
    def test_admissible_monotone(self, seed, d1, d2):
        lo, hi = sorted((d1, d2))
        m = fit_mle_mdp(_random_dataset(np.random.default_rng(seed), n=8))
        assert np.all(bcq_admissible(m, hi) <= bcq_admissible(m, lo))

    def test_invalid_delta(self, chain_data):
        with pytest.raises(ValueError):
            fit_bcq_tabular(chain_data, 1.0)


class TestMBS:
    def test_beta_one_equals_bcq(self):
        ds = _random_dataset(np.random.default_rng(7), gamma=0.9)
        p1, q1 = fit_mbs_tabular(ds, 0.1, 1, n_iterations=4)
        p2, q2 = fit_bcq_tabular(ds, 0.1, n_iterations=4)
        np.testing.assert_array_equal(q1.values, q2.values)
        assert p1.same_as(p2)

    def test_large_beta_gives_immediate_reward(self):
        ds = _random_dataset(np.random.default_rng(8))
        m = fit_mle_mdp(ds)
        _, q = fit_mbs_tabular(ds, 0.0, int(m.counts.max()) + 1, n_iterations=4)
        np.testing.assert_allclose(q.values, np.where(m.observed_mask, m.reward_sa, 0.0))

    def test_matches_loop_oracle(self):
        ds = _random_dataset(np.random.default_rng(9), n=15, gamma=0.8)
        m = fit_mle_mdp(ds)
        _, q = fit_mbs_tabular(ds, 0.0, 3, n_iterations=4)
        np.testing.assert_allclose(q.values, _loop_value_iteration(m, m.observed_mask, 4, m.counts >= 3), atol=1e-12)

    def test_chain_count_threshold(self, chain_env, chain_data):
        m = fit_mle_mdp(chain_data)
        assert m.counts[5, 1] == 3  # only the all-up copies reach position 5
        for beta, value in ((2, 201.0), (3, 201.0), (4, 1.0)):
            pi, _ = fit_mbs_tabular(chain_data, 0.0, beta, n_iterations=6)
            assert exact_policy_value(chain_env, pi) == pytest.approx(value, abs=1e-12)

    def test_invalid_beta(self, chain_data):
        with pytest.raises(ValueError):
            fit_mbs_tabular(chain_data, 0.0, 0)


class TestPMDP:
    def test_penalty_value(self):
        assert hoeffding_penalty([8], 1.0, 0.1)[0] == pytest.approx(math.sqrt(2 * math.log(10) / 8))
        # the formula gives 0.75871; the quoted four-digit value 0.7585 is within 3e-4
        assert hoeffding_penalty([8], 1.0, 0.1)[0] == pytest.approx(0.7585, abs=3e-4)

    def test_beta_zero_is_clamp(self):
        r = np.array([-3.0, -0.5, 0.2, 4.0])
        np.testing.assert_array_equal(pessimistic_reward(r, [0, 1, 5, 2], 0.0, 0.1), np.clip(r, -1, 1))

    def test_unseen_pairs_get_floor(self):
        np.testing.assert_array_equal(pessimistic_reward([0.5, 0.5], [0, 3], 0.5, 0.1)[0], -1.0)

    @given(
        st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=10),
        st.floats(0, 5),
        st.floats(0.01, 0.99),
        st.integers(0, 50),
    )
    def test_below_reward(self, rewards, beta, delta, n):
        # below -1 the lower clamp lifts the reward, so the property holds on [-1, 1]
        r = np.array(rewards)
        assert np.all(pessimistic_reward(r, np.full(len(r), n), beta, delta) <= r)

    def test_custom_clip(self):
        np.testing.assert_array_equal(pessimistic_reward([5.0], [4], 0.0, 0.1, clip=(-10, 10)), [5.0])

    def test_seeded_and_softmax(self, chain_data):
        a = fit_pmdp_ensemble(chain_data, 3, 0.5, 0.1, 0.5, 6, seed=1)
        b = fit_pmdp_ensemble(chain_data, 3, 0.5, 0.1, 0.5, 6, seed=1)
        assert a.same_as(b)
        assert np.all(a.probs > 0)
        assert a.flags

    def test_single_member_matches_value_iteration(self):
        ds = _random_dataset(np.random.default_rng(10), n=30, gamma=0.9)
        m = fit_mle_mdp(ds)
        r = pessimistic_reward(m.reward_sa, m.counts, 0.3, 0.1)
        Q = np.zeros(r.shape)
        for _ in range(5):
            Q = r + 0.9 * m.transition @ Q.max(axis=1)
        pi = fit_pmdp_ensemble(ds, 1, 0.3, 0.1, 0.7, 5, seed=3)
        z = np.exp((Q - Q.max(axis=1, keepdims=True)) / 0.7)
        np.testing.assert_allclose(pi.probs, z / z.sum(axis=1, keepdims=True), rtol=1e-10)

    @pytest.mark.parametrize(
        "kw", [dict(n_ensembles=0), dict(penalty_beta=-1.0), dict(confidence_delta=1.0), dict(temperature=0.0)]
    )
    def test_invalid(self, chain_data, kw):
        args = dict(n_ensembles=2, penalty_beta=0.5, confidence_delta=0.1, temperature=1.0, n_iterations=2, seed=0)
        args.update(kw)
        with pytest.raises(ValueError):
            fit_pmdp_ensemble(chain_data, **args)


def _small_pois_data(seed, nS=3, nA=2, n=20):
    env = make_random_mdp(nS, nA, 3, 1.0, seed)
    rng = np.random.default_rng(seed)
    return rollout(env, TabularPolicy(rng.dirichlet([2] * nA, size=nS)), n, seed)


class TestPOIS:
    def test_ess_of_equal_weights(self):
        ds = _small_pois_data(0)
        uniform_logged = ds.with_trajectories(
            Trajectory(t.states, t.actions, t.rewards, t.next_states, np.full(len(t), 0.5)) for t in ds
        )
        batch = pois_batch(uniform_logged)
        lam = 3.0
        j = pois_objective(np.zeros((3, 2)), batch, lam)
        assert j == pytest.approx(np.mean(uniform_logged.returns) - lam / len(ds), rel=1e-12)

    @pytest.mark.parametrize("estimator", ["wis", "is"])
    def test_gradient_three_state(self, estimator):
        batch = pois_batch(_small_pois_data(1))
        theta = np.random.default_rng(1).normal(size=(3, 2))
        g = pois_gradient(theta, batch, 0.7, estimator)
        fd = numerical_gradient(lambda t: pois_objective(t, batch, 0.7, estimator), theta, 1e-5)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(g)) <= 1e-4

    def test_ascent_from_bc(self):
        ds = _small_pois_data(2)
        init = fit_bc(ds)
        theta0 = np.log(np.maximum(init.probs, 1e-6))
        batch = pois_batch(ds)
        j0 = pois_objective(theta0, batch, 0.0)
        theta1 = theta0 + 1e-3 * pois_gradient(theta0, batch, 0.0)
        assert pois_objective(theta1, batch, 0.0) >= j0
        pi = fit_pois(ds, PoisParams(learning_rate=1e-3, epochs=1), init=init)
        np.testing.assert_allclose(pi.probs, np.exp(theta1) / np.exp(theta1).sum(axis=1, keepdims=True), rtol=1e-12)

    def test_sharp_logits_recover_wis(self):
        ds = _small_pois_data(3)
        greedy = TabularPolicy.deterministic([0, 1, 0], 2)
        theta = 60.0 * (greedy.probs - 0.5)
        j = pois_objective(theta, pois_batch(ds), 0.0)
        assert j == pytest.approx(wis_estimate(greedy, ds), rel=1e-9)

    def test_safety_alpha_marks_trajectories(self):
        trajs = [
            Trajectory([0], [0], [1.0], [0], [0.1]),
            Trajectory([0], [1], [2.0], [0], [0.9]),
        ]
        b = pois_batch(_ds(trajs, 1, 2), safety_alpha=0.2)
        np.testing.assert_array_equal(b.valid, [False, True])
        # surviving propensity renormalized to 0.9 / 0.9 = 1
        assert b.log_behavior[1] == pytest.approx(0.0, abs=1e-15)

    def test_zero_weight_batches_skipped(self):
        trajs = [Trajectory([0], [0], [1.0], [0], [0.1])] * 3 + [Trajectory([0], [1], [2.0], [0], [0.9])]
        pi = fit_pois(_ds(trajs, 1, 2), PoisParams(safety_alpha=0.2, minibatch_size=1, epochs=2), seed=0)
        assert any("skipped" in f for f in pi.flags)

    def test_seeded(self):
        ds = _small_pois_data(4)
        p = PoisParams(epochs=3, minibatch_size=4, lambda_ess=0.5)
        assert fit_pois(ds, p, seed=8).same_as(fit_pois(ds, p, seed=8))

    def test_params_validation(self):
        with pytest.raises(ValueError):
            PoisParams(lambda_ess=-1.0)
        with pytest.raises(ValueError):
            PoisParams(safety_alpha=1.0)

    def test_bad_estimator(self):
        with pytest.raises(ValueError):
            pois_gradient(np.zeros((3, 2)), pois_batch(_small_pois_data(5)), 0.0, "cwpdis")


class TestRegistry:
    def test_defaults_filled(self):
        assert resolve_params(AHSpec("bc-mini-pois", {}))["minibatch_size"] == 4
        assert resolve_params(AHSpec("pmdp", dict(n_ensembles=2, penalty_beta=0.1, temperature=1.0, n_iterations=3)))[
            "confidence_delta"
        ] == 0.1

    @pytest.mark.parametrize(
        "ah,match",
        [
            (AHSpec("dqn", {}), "unknown algorithm"),
            (AHSpec("horizon-h", {}), "missing"),
            (AHSpec("horizon-h", {"h": 2, "x": 1}), "unknown hyperparameters"),
            (AHSpec("horizon-h", {"h": 2.5}), "integer"),
        ],
    )
    def test_errors(self, ah, match):
        with pytest.raises(AHSpecError, match=match):
            resolve_params(ah)

    def test_every_learner_is_pure(self, chain_data):
        examples = {
            "horizon-h": {"h": 3},
            "bc": {"safety_alpha": 0.1},
            "bcq": {"delta": 0.0, "n_iterations": 6},
            "mbs": {"delta": 0.0, "count_beta": 2, "n_iterations": 6},
            "pmdp": {"n_ensembles": 2, "penalty_beta": 0.2, "temperature": 1.0, "n_iterations": 4},
            "pois": {"epochs": 2},
            "bc-pois": {"epochs": 2, "lambda_ess": 0.1},
            "bc-mini-pois": {"epochs": 1},
        }
        assert set(examples) == set(LEARNER_SCHEMAS)
        for alg, params in examples.items():
            ah = AHSpec(alg, params)
            a, b = fit_ah(ah, chain_data, seed=3), fit_ah(ah, chain_data, seed=3)
            assert a.same_as(b), alg
            assert a.probs.shape == (chain_data.n_states, 2)
