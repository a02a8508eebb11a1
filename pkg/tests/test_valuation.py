"""Value fitting by Bellman residual descent and backshift reward recovery."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_episode, markov_stream
from shpi.approximator import Optimizer, make_regressor
from shpi.data import Episode, window_episodes
from shpi.mdp import dp_value_stationary, random_mdp, random_policy
from shpi.valuation import (
    ValueModel,
    backshift_dataset,
    backshift_reward,
    constant_value,
    fit_value,
    zero_value,
)


def table(value: ValueModel, S: int) -> np.ndarray:
    return value(np.eye(S))


class TestFitValue:
    def test_geometric_fixed_point(self):
        n = 200
        ep = Episode(np.ones((n, 1)), np.zeros(n, dtype=np.int64), np.ones(n), np.ones(n))
        ds = window_episodes([ep], 20, 20, gamma=0.5)
        v = fit_value(ds, make_regressor(1, 1, (), seed=None), Optimizer("sgd", 0.1), epochs=200, batch_size=32)
        assert v(np.ones((1, 1)))[0] == pytest.approx(2.0, abs=1e-3)

    def test_myopic_fit_is_the_mean_reward(self):
        rng = np.random.default_rng(0)
        n = 400
        s = rng.integers(0, 3, size=n)
        r = np.array([1.0, -2.0, 0.5])[s] + rng.normal(size=n)
        ep = Episode(np.eye(3)[s], np.zeros(n, dtype=np.int64), np.ones(n), r)
        ds = window_episodes([ep], 40, 40, gamma=0.0)
        v = fit_value(ds, make_regressor(3, 1, (), seed=None), Optimizer("sgd", 0.2), epochs=2000, batch_size=n)
        x, rr, _ = ds.transitions()
        means = [rr[x[:, j] == 1].mean() for j in range(3)]
        np.testing.assert_allclose(table(v, 3), means, atol=1e-6)

    def test_tabular_value_matches_dynamic_programming(self):
        rng = np.random.default_rng(3)
        mdp = random_mdp(rng, 5, 2, 10, 0.9)
        mu = random_policy(rng, 5, 2)
        ep = markov_stream(mdp, mu, 20_000, seed=1)
        ds = window_episodes([ep], 100, 100, gamma=0.9)
        v = fit_value(ds, make_regressor(5, 1, (), seed=None), Optimizer("adam", 1e-2, anneal_to=0.01),
                      epochs=40, batch_size=64, seed=0)
        truth = dp_value_stationary(mdp, mu)
        assert np.max(np.abs(table(v, 5) - truth)) < 0.1

    def test_full_residual_gradient_also_fits(self):
        n = 200
        ep = Episode(np.ones((n, 1)), np.zeros(n, dtype=np.int64), np.ones(n), np.ones(n))
        ds = window_episodes([ep], 20, 20, gamma=0.5)
        v = fit_value(ds, make_regressor(1, 1, (), seed=None), Optimizer("sgd", 0.05), epochs=300,
                      batch_size=32, residual="full")
        assert v(np.ones((1, 1)))[0] == pytest.approx(2.0, abs=1e-3)

    def test_reward_shift_is_subtracted_and_recorded(self):
        n = 200
        ep = Episode(np.ones((n, 1)), np.zeros(n, dtype=np.int64), np.ones(n), np.full(n, 11.0))
        ds = window_episodes([ep], 20, 20, gamma=0.5)
        v = fit_value(ds, make_regressor(1, 1, (), seed=None), Optimizer("sgd", 0.1), epochs=200,
                      batch_size=32, reward_shift=10.0)
        assert v(np.ones((1, 1)))[0] == pytest.approx(2.0, abs=1e-3)
        assert v.regressor.meta["reward_shift"] == 10.0

    def test_history_records_every_epoch(self):
        ds = window_episodes([make_episode(60)], 10, 10, gamma=0.9)
        hist: list[float] = []
        fit_value(ds, epochs=7, hidden=(4,), history=hist)
        assert len(hist) == 7 and all(np.isfinite(hist))

    def test_same_seed_same_model(self):
        ds = window_episodes([make_episode(60)], 10, 10, gamma=0.9)
        a, b = (fit_value(ds, epochs=3, hidden=(4,), seed=5) for _ in range(2))
        np.testing.assert_array_equal(a.regressor.params, b.regressor.params)

    def test_single_step_windows_without_successor_rejected(self):
        ds = window_episodes([make_episode(1)], 1, 1)
        with pytest.raises(ValueError, match="at least 2 steps"):
            fit_value(ds)

    def test_bad_residual_mode(self):
        with pytest.raises(ValueError, match="residual"):
            fit_value(window_episodes([make_episode(10)], 5, 5), residual="both")

    def test_records_dataset_discount(self):
        ds = window_episodes([make_episode(30)], 10, 10, gamma=0.7)
        assert fit_value(ds, epochs=1, hidden=()).gamma == 0.7

    def test_round_trip(self, tmp_path):
        ds = window_episodes([make_episode(30)], 10, 10, gamma=0.7)
        v = fit_value(ds, epochs=2, hidden=(3,))
        v.save(tmp_path / "v.json")
        back = ValueModel.load(tmp_path / "v.json")
        x = np.random.default_rng(0).normal(size=(5, 2))
        np.testing.assert_array_equal(back(x), v(x))
        assert back.gamma == 0.7


class TestBackshift:
    def test_arithmetic(self):
        v = lambda x: np.where(x[:, 0] > 0, 1.0, 0.5)
        assert backshift_reward(v, np.array([1.0]), np.array([-1.0]), 0.99) == pytest.approx(0.505)

    def test_zero_discount_returns_value(self):
        v = constant_value(2, 3.25)
        assert backshift_reward(v, np.zeros(2), np.ones(2), 0.0) == 3.25

    def test_zero_value_gives_zero(self):
        np.testing.assert_array_equal(backshift_reward(zero_value(3), np.ones((4, 3)), np.ones((4, 3)), 0.9), 0.0)

    @given(st.integers(0, 10_000), st.sampled_from([0.0, 0.5, 0.95]))
    def test_exact_value_recovers_mean_reward(self, seed, gamma):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, 4, 3, 5, gamma)
        mu = random_policy(rng, 4, 3)
        V = dp_value_stationary(mdp, mu)
        value = lambda x: x @ V
        S = np.eye(4)
        # V(s) - gamma V(s') for every (s, s') pair, averaged over a ~ mu and s' ~ P(.|s,a)
        x = np.repeat(S, 4, axis=0)
        xn = np.tile(S, (4, 1))
        shift = backshift_reward(value, x, xn, gamma).reshape(4, 4)
        averaged = np.einsum("sa,sap,sp->s", mu.probs, mdp.transition, shift)
        r_mu = np.sum(mu.probs * mdp.reward, axis=1)
        np.testing.assert_allclose(averaged, r_mu, atol=1e-10)

    @given(st.floats(-1e3, 1e3), st.sampled_from([0.0, 0.5, 0.99, 1.0]))
    def test_constant_offset(self, c, gamma):
        rng = np.random.default_rng(0)
        x, xn = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        base = make_regressor(2, 1, (3,), seed=1)
        shifted = base.copy()
        shifted.y_shift = shifted.y_shift + c
        d = backshift_reward(ValueModel(shifted, gamma), x, xn, gamma) - backshift_reward(ValueModel(base, gamma), x, xn, gamma)
        np.testing.assert_allclose(d, c * (1 - gamma), atol=1e-9 * (1 + abs(c)))

    def test_dataset_drops_last_step(self):
        eps = [make_episode(12, seed=s, episode_id=s) for s in range(2)]
        ds = window_episodes(eps, 4, 4, gamma=0.9)
        v = constant_value(2, 5.0, 0.9)
        out = backshift_dataset(ds, v)
        assert [len(e) for e in out.episodes] == [11, 11]
        np.testing.assert_allclose(out.episodes[0].rewards, 5.0 * 0.1)
        np.testing.assert_array_equal(out.episodes[1].actions, eps[1].actions[:11])
