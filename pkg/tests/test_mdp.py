"""Tabular oracle, logged-data containers, sliding windows and the CSV format."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_episode, make_stream, self_loop_mdp
from shpi.data import (
    DataError,
    Dataset,
    Episode,
    Step,
    dumps_episodes,
    load_dataset,
    loads_episodes,
    save_dataset,
    window_episodes,
    window_stream,
)
from shpi.mdp import (
    TabularMDP,
    TabularPolicy,
    decode_contexts,
    dp_k_advantage,
    dp_q,
    dp_value,
    dp_value_stationary,
    episodes_from_paths,
    pdl_residual,
    pdl_terms,
    random_mdp,
    random_policy,
    sample_paths,
    state_distribution,
    tabular_contexts,
)


def random_instance(seed: int, S: int = 4, A: int = 3, T: int = 6, gamma: float = 0.9):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A, T, gamma)
    return mdp, random_policy(rng, S, A, T), random_policy(rng, S, A, T)


class TestValidation:
    def test_transition_rows_must_sum_to_one(self):
        P = np.full((2, 1, 2), 0.6)
        with pytest.raises(ValueError, match="probability"):
            TabularMDP(P, np.zeros((2, 1)), np.array([1.0, 0.0]), 3, 0.9)

    def test_negative_transition_rejected(self):
        P = np.array([[[1.5, -0.5]], [[0.0, 1.0]]])
        with pytest.raises(ValueError):
            TabularMDP(P, np.zeros((2, 1)), np.array([1.0, 0.0]), 3, 0.9)

    def test_initial_dist_must_sum_to_one(self):
        with pytest.raises(ValueError, match="initial_dist"):
            TabularMDP(np.ones((1, 1, 1)), np.zeros((1, 1)), np.array([0.5]), 3, 0.9)

    def test_gamma_range(self):
        with pytest.raises(ValueError, match="gamma"):
            TabularMDP(np.ones((1, 1, 1)), np.zeros((1, 1)), np.ones(1), 3, 1.5)

    def test_policy_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            TabularPolicy(np.array([[0.2, 0.2]]))

    def test_dimension_mismatch(self):
        mdp = self_loop_mdp()
        with pytest.raises(ValueError, match="does not match"):
            dp_value(mdp, TabularPolicy(np.array([[0.5, 0.5]])))

    def test_arrays_are_read_only(self):
        mdp = self_loop_mdp()
        with pytest.raises(ValueError):
            mdp.reward[0, 0] = 2.0


class TestDpValue:
    def test_geometric_self_loop(self):
        V = dp_value(self_loop_mdp(1.0, 0.5, 3), TabularPolicy(np.ones((1, 1))))
        assert V[0, 0] == pytest.approx(1.75, abs=1e-15)
        assert V[3, 0] == 0.0

    def test_zero_rewards_give_zero_values(self):
        mdp, mu, _ = random_instance(0)
        zero = TabularMDP(mdp.transition, np.zeros_like(mdp.reward), mdp.initial_dist, mdp.horizon, mdp.gamma)
        np.testing.assert_array_equal(dp_value(zero, mu), 0.0)

    def test_matches_monte_carlo(self):
        # independent oracle: average discounted return of 10^6 sampled episodes
        mdp, mu, _ = random_instance(7, S=4, A=3, T=6)
        paths = sample_paths(mdp, mu, 1_000_000, np.random.default_rng(1))
        G = paths["rewards"] @ (mdp.gamma ** np.arange(mdp.horizon))
        expected = dp_value(mdp, mu)[0] @ mdp.initial_dist
        se = G.std(ddof=1) / np.sqrt(len(G))
        assert abs(G.mean() - expected) < 3 * se

    def test_stationary_solution_is_a_fixed_point(self):
        mdp, _, _ = random_instance(3)
        pi = random_policy(np.random.default_rng(0), mdp.n_states, mdp.n_actions)
        V = dp_value_stationary(mdp, pi)
        backup = np.sum(pi.probs * (mdp.reward + mdp.gamma * mdp.transition @ V), axis=1)
        np.testing.assert_allclose(V, backup, atol=1e-12)

    def test_stationary_needs_gamma_below_one(self):
        with pytest.raises(ValueError):
            dp_value_stationary(self_loop_mdp(gamma=1.0), TabularPolicy(np.ones((1, 1))))


class TestDpQ:
    @given(st.integers(0, 10_000))
    def test_policy_advantage_averages_to_zero(self, seed):
        mdp, mu, _ = random_instance(seed)
        Q, V = dp_q(mdp, mu), dp_value(mdp, mu)
        pi = mu.stacked(mdp.horizon)
        np.testing.assert_allclose(np.sum(pi * (Q - V[:-1, :, None]), axis=-1), 0.0, atol=1e-12)

    def test_myopic_limit(self):
        mdp, mu, _ = random_instance(1, gamma=0.0)
        Q = dp_q(mdp, mu)
        np.testing.assert_array_equal(Q, np.broadcast_to(mdp.reward, Q.shape))

    def test_consistent_with_value(self):
        mdp, mu, _ = random_instance(7)
        V = dp_value(mdp, mu)
        np.testing.assert_allclose(np.sum(mu.stacked(mdp.horizon) * dp_q(mdp, mu), axis=-1), V[:-1], atol=1e-12)


class TestDpKAdvantage:
    @given(st.integers(0, 10_000))
    def test_k1_is_mu_advantage(self, seed):
        mdp, mu, pi = random_instance(seed)
        A_mu = dp_q(mdp, mu) - dp_value(mdp, mu)[:-1, :, None]
        assert np.max(np.abs(dp_k_advantage(mdp, mu, pi, 1) - A_mu)) < 1e-12

    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_own_policy_advantage_is_zero_on_average(self, seed, k):
        mdp, mu, _ = random_instance(seed)
        adv = dp_k_advantage(mdp, mu, mu, k)
        np.testing.assert_allclose(np.sum(mu.stacked(mdp.horizon) * adv, axis=-1), 0.0, atol=1e-12)

    def test_full_horizon_at_t0(self):
        mdp, mu, pi = random_instance(11)
        T = mdp.horizon
        expected = dp_q(mdp, pi)[0] - dp_value(mdp, mu)[0][:, None]
        assert np.max(np.abs(dp_k_advantage(mdp, mu, pi, T)[0] - expected)) < 1e-12

    @pytest.mark.parametrize("k", [0, 7])
    def test_k_out_of_range(self, k):
        mdp, mu, pi = random_instance(0)
        with pytest.raises(ValueError, match="k must lie"):
            dp_k_advantage(mdp, mu, pi, k)

    def test_bonus_shape_checked(self):
        mdp, mu, pi = random_instance(0)
        with pytest.raises(ValueError, match="bonus"):
            dp_k_advantage(mdp, mu, pi, 2, bonus=np.zeros((2, 2)))


class TestPerformanceDifference:
    @given(st.integers(0, 10_000), st.sampled_from([0.7, 0.95, 1.0]))
    def test_identity_holds_for_every_k(self, seed, gamma):
        mdp, mu, pi = random_instance(seed, gamma=gamma)
        for k in range(1, mdp.horizon + 1):
            assert pdl_residual(mdp, mu, pi, k) < 1e-10

    def test_identical_policies(self):
        mdp, mu, _ = random_instance(5)
        for k in range(1, mdp.horizon + 1):
            terms = pdl_terms(mdp, mu, mu, k)
            assert abs(terms["lhs"]) < 1e-12
            assert pdl_residual(mdp, mu, mu, k) < 1e-12

    def test_full_horizon_needs_no_correction(self):
        mdp, mu, pi = random_instance(9)
        terms = pdl_terms(mdp, mu, pi, mdp.horizon)
        assert abs(terms["correction"]) < 1e-12
        assert terms["advantage"] == pytest.approx(terms["lhs"], abs=1e-10)

    def test_state_distribution_is_normalized(self):
        mdp, mu, _ = random_instance(2)
        np.testing.assert_allclose(state_distribution(mdp, mu).sum(axis=1), 1.0, atol=1e-12)


class TestContexts:
    @given(st.integers(1, 5), st.integers(1, 6), st.data())
    def test_one_hot_round_trip(self, S, T, data):
        s = data.draw(st.lists(st.integers(0, S - 1), min_size=1, max_size=10))
        t = data.draw(st.lists(st.integers(0, T), min_size=len(s), max_size=len(s)))
        ctx = tabular_contexts(np.array(s), np.array(t), S, T)
        assert ctx.shape == (len(s), (T + 1) * S)
        np.testing.assert_array_equal(ctx.sum(axis=1), 1.0)
        tt, ss = decode_contexts(ctx, S)
        np.testing.assert_array_equal(tt, t)
        np.testing.assert_array_equal(ss, s)

    def test_episodes_append_terminal_step(self):
        mdp, mu, _ = random_instance(0)
        paths = sample_paths(mdp, mu, 5, np.random.default_rng(0))
        eps = episodes_from_paths(paths, mdp, mu, np.random.default_rng(1))
        assert len(eps) == 5
        assert all(len(ep) == mdp.horizon + 1 for ep in eps)
        assert all(ep.rewards[-1] == 0.0 for ep in eps)
        t, s = decode_contexts(eps[0].contexts, mdp.n_states)
        np.testing.assert_array_equal(t, np.arange(mdp.horizon + 1))
        np.testing.assert_array_equal(s, paths["states"][0])


class TestSteps:
    def test_zero_propensity_rejected(self):
        with pytest.raises(DataError, match="propensity"):
            Step(np.zeros(2), 0, 0.0, 1.0)

    def test_negative_action_rejected(self):
        with pytest.raises(DataError):
            Step(np.zeros(2), -1, 0.5, 1.0)

    def test_episode_rejects_nonfinite_context(self):
        with pytest.raises(DataError, match="non-finite"):
            Episode(np.array([[np.nan, 0.0]]), np.array([0]), np.array([0.5]), np.array([1.0]))

    def test_step_view_round_trip(self):
        ep = make_episode(10, seed=3)
        s = ep.step(4)
        np.testing.assert_array_equal(s.context, ep.contexts[4])
        assert (s.action, s.propensity, s.reward, s.time_index) == (
            ep.actions[4], ep.propensities[4], ep.rewards[4], 4)


class TestWindowStream:
    def test_standard_windows(self):
        ds = window_stream(make_stream(150), 28, 20)
        assert len(ds) == 7
        np.testing.assert_array_equal(ds.windows["offset"], [0, 20, 40, 60, 80, 100, 120])

    def test_stream_of_exactly_one_window(self):
        for delta in (1, 5, 100):
            ds = window_stream(make_stream(28), 28, delta)
            assert len(ds) == 1
            assert ds.windows["offset"][0] == 0

    def test_full_length_window_with_unit_step(self):
        assert len(window_stream(make_stream(150), 150, 1)) == 1

    def test_too_short(self):
        with pytest.raises(DataError, match="stream too short"):
            window_stream(make_stream(10), 28, 20)

    @pytest.mark.parametrize("W,delta", [(0, 1), (1, 0)])
    def test_bad_parameters(self, W, delta):
        with pytest.raises(DataError):
            window_stream(make_stream(10), W, delta)

    @given(st.integers(1, 60), st.integers(1, 30), st.integers(1, 30))
    def test_window_count(self, n, W, delta):
        if n < W:
            return
        ds = window_stream(make_stream(n, seed=n), W, delta)
        assert len(ds) == (n - W) // delta + 1

    @given(st.integers(5, 40), st.integers(1, 5), st.integers(1, 7))
    def test_windows_copy_steps_verbatim(self, n, W, delta):
        stream = make_stream(n, seed=1)
        ds = window_stream(stream, W, delta)
        for traj in ds.trajectories:
            assert len(traj.steps) == W
            times = [s.time_index for s in traj.steps]
            assert times == list(range(traj.source_offset, traj.source_offset + W))
            for s in traj.steps:
                orig = stream[s.time_index]
                np.testing.assert_array_equal(s.context, orig.context)
                assert (s.action, s.propensity, s.reward) == (orig.action, orig.propensity, orig.reward)

    def test_lookahead_step(self):
        ds = window_stream(make_stream(50), 20, 15)
        # windows at 0, 15, 30: the last one ends the stream
        np.testing.assert_array_equal(ds.windows["has_next"], [True, True, False])
        trajs = ds.trajectories
        assert trajs[0].lookahead.time_index == 20
        assert trajs[-1].lookahead is None


class TestDataset:
    def test_gamma_range(self):
        with pytest.raises(DataError, match="gamma"):
            window_episodes([make_episode(10)], 5, 5, gamma=1.2)

    def test_inconsistent_dimensions(self):
        with pytest.raises(DataError, match="dimension"):
            window_episodes([make_episode(10, d=2), make_episode(10, d=3)], 5, 5)

    def test_action_count_inferred_and_checked(self):
        ep = make_episode(20, n_actions=4)
        assert window_episodes([ep], 5, 5).action_count == int(ep.actions.max()) + 1
        with pytest.raises(DataError, match="action"):
            window_episodes([ep], 5, 5, action_count=1)

    def test_transitions_skip_window_ends_without_successor(self):
        ep = make_episode(12)
        ds = window_episodes([ep], 4, 4)
        x, r, xn = ds.transitions()
        # windows [0,4), [4,8) have lookaheads, [8,12) does not
        assert len(x) == 4 + 4 + 3
        np.testing.assert_array_equal(xn[3], ep.contexts[4])
        np.testing.assert_array_equal(r[:4], ep.rewards[:4])

    def test_window_arrays_are_read_only(self):
        ds = window_episodes([make_episode(12)], 4, 4)
        with pytest.raises(ValueError):
            ds.windows["rewards"][0, 0] = 1.0

    def test_with_episodes_replaces_rewards(self):
        ep = make_episode(12)
        ds = window_episodes([ep], 4, 4)
        ds2 = ds.with_episodes([ep.with_rewards(np.zeros(12))])
        np.testing.assert_array_equal(ds2.windows["rewards"], 0.0)
        assert ds.windows["rewards"].any()


class TestCsvFormat:
    def test_round_trip_is_exact(self, tmp_path):
        eps = [make_episode(9, seed=s, episode_id=s) for s in range(3)]
        ds = window_episodes(eps, 4, 2)
        save_dataset(ds, tmp_path / "d.csv")
        back = load_dataset(tmp_path / "d.csv", 4, 2)
        for a, b in zip(ds.episodes, back.episodes):
            np.testing.assert_array_equal(a.contexts, b.contexts)
            np.testing.assert_array_equal(a.rewards, b.rewards)
            np.testing.assert_array_equal(a.propensities, b.propensities)
            np.testing.assert_array_equal(a.actions, b.actions)
            assert a.episode_id == b.episode_id
        assert dumps_episodes(back.episodes) == dumps_episodes(ds.episodes)

    def test_header(self):
        text = dumps_episodes([make_episode(2, d=3)])
        assert text.splitlines()[0] == "episode_id,t,action,propensity,reward,x_0,x_1,x_2"

    def test_rejects_nonpositive_propensity(self):
        text = "episode_id,t,action,propensity,reward,x_0\n0,0,1,0.0,1.0,0.5\n"
        with pytest.raises(DataError, match="propensity"):
            loads_episodes(text)

    def test_rejects_missing_header(self):
        with pytest.raises(DataError, match="header"):
            loads_episodes("0,0,1,0.5,1.0,0.5\n")

    def test_rejects_short_row(self):
        text = "episode_id,t,action,propensity,reward,x_0\n0,0,1,0.5\n"
        with pytest.raises(DataError, match="expected"):
            loads_episodes(text)

    def test_rejects_gaps_in_time(self):
        text = "episode_id,t,action,propensity,reward,x_0\n0,0,1,0.5,1.0,0.5\n0,2,1,0.5,1.0,0.5\n"
        with pytest.raises(DataError, match="consecutive"):
            loads_episodes(text)

    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=2, max_size=6))
    def test_floats_survive_serialization(self, values):
        n = len(values)
        ep = Episode(np.array(values)[:, None], np.zeros(n, dtype=np.int64), np.full(n, 0.5), np.array(values))
        back = loads_episodes(dumps_episodes([ep]))[0]
        np.testing.assert_array_equal(back.rewards, ep.rewards)
        np.testing.assert_array_equal(back.contexts, ep.contexts)
