"""Importance weights, offline and online k-step advantages, and the bias bound."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import chain_mdp, make_stream, uniform
from shpi.advantages import (
    AdvantageTable,
    ClipBounds,
    advantage_mse_diagnostic,
    bias_bound,
    importance_weight,
    mse_rows_csv,
    offline_k_advantages,
    online_k_advantage,
    online_k_advantages,
)
from shpi.data import DataError, Step, window_episodes, window_stream
from shpi.envs.base import Env, EnvError
from shpi.envs.tabular import TabularEnv
from shpi.mdp import (
    TabularContextPolicy,
    TabularPolicy,
    TabularValue,
    decode_contexts,
    dp_k_advantage,
    dp_value,
    episodes_from_paths,
    random_mdp,
    random_policy,
    sample_paths,
)
from shpi.policies import FunctionPolicy
from shpi.sampling import collect_episodes
from shpi.valuation import zero_value


def tabular_dataset(mdp, mu, n: int, seed: int):
    rng = np.random.default_rng(seed)
    eps = episodes_from_paths(sample_paths(mdp, mu, n, rng), mdp, mu, rng)
    T = mdp.horizon
    return window_episodes(eps, T + 1, T + 1, mdp.gamma, mdp.n_actions)


def deterministic(actions: np.ndarray, A: int) -> TabularPolicy:
    return TabularPolicy(np.eye(A)[actions])


def uniform_trajectory(actions: list[int], A: int = 4):
    steps = [Step(np.array([float(i)]), a, 1.0 / A, 1.0, time_index=i) for i, a in enumerate(actions)]
    return window_stream(steps, len(steps), 1).trajectories[0], steps


class TestClipBounds:
    @pytest.mark.parametrize("q1,q2", [(0.0, 2.0), (1.5, 2.0), (0.5, 0.9)])
    def test_invalid(self, q1, q2):
        with pytest.raises(ValueError):
            ClipBounds(q1, q2)

    @given(st.floats(0.01, 1.0), st.floats(1.0, 100.0), st.floats(0, 1e6))
    def test_clipped_value_in_range(self, q1, q2, w):
        c = ClipBounds(q1, q2)(w)
        assert q1 <= c <= q2


class TestImportanceWeight:
    def test_empty_range_is_one(self):
        traj, _ = uniform_trajectory([0, 1, 2])
        assert importance_weight(lambda x: np.zeros((len(x), 4)), traj, 2, 1) == 1.0

    def test_matching_deterministic_policy(self):
        traj, steps = uniform_trajectory([3, 1])
        acts = {float(s.context[0]): s.action for s in steps}
        pi = lambda x: np.eye(4)[[acts[float(c[0])] for c in x]]
        assert importance_weight(pi, traj, 0, 1) == 16.0
        assert importance_weight(pi, traj, 0, 1, ClipBounds(0.5, 2.0)) == 2.0

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=6), st.data())
    def test_same_policy_gives_one(self, actions, data):
        traj, _ = uniform_trajectory(actions)
        t1 = data.draw(st.integers(0, len(actions) - 1))
        t2 = data.draw(st.integers(t1, len(actions) - 1))
        mu = lambda x: np.full((len(x), 4), 0.25)
        assert importance_weight(mu, traj, t1, t2) == pytest.approx(1.0)
        assert importance_weight(mu, traj, t1, t2, ClipBounds()) == pytest.approx(1.0)

    @given(st.integers(0, 10_000))
    def test_clipped_product_in_bounds(self, seed):
        rng = np.random.default_rng(seed)
        traj, _ = uniform_trajectory(list(rng.integers(0, 4, size=5)))
        table = rng.dirichlet(np.ones(4) * 0.3, size=5)
        pi = lambda x: table[x[:, 0].astype(int)]
        w = importance_weight(pi, traj, 0, 4, ClipBounds(0.5, 2.0))
        assert 0.5 <= w <= 2.0

    def test_out_of_range(self):
        traj, _ = uniform_trajectory([0, 1])
        with pytest.raises(IndexError):
            importance_weight(lambda x: np.full((len(x), 4), 0.25), traj, 0, 5)

    def test_lookahead_index(self):
        steps = make_stream(6, n_actions=2, seed=0)
        traj = window_stream(steps, 3, 3).trajectories[0]
        pi = lambda x: np.full((len(x), 2), 0.5)
        expected = np.prod([0.5 / s.propensity for s in steps[1:4]])
        assert importance_weight(pi, traj, 1, 3) == pytest.approx(expected)


class TestOfflineAdvantages:
    def test_one_step_ignores_target_policy(self):
        rng = np.random.default_rng(0)
        mdp = random_mdp(rng, 3, 2, 5, 0.9)
        mu = random_policy(rng, 3, 2, 5)
        ds = tabular_dataset(mdp, mu, 50, seed=1)
        V = TabularValue(dp_value(mdp, mu), 3)
        pis = [TabularContextPolicy(random_policy(np.random.default_rng(s), 3, 2, 5), 3, 5) for s in (2, 3)]
        tabs = [offline_k_advantages(ds, p, V, 1, clip=ClipBounds()) for p in pis]
        np.testing.assert_array_equal(tabs[0].estimates, tabs[1].estimates)
        w = ds.windows
        t = tabs[0].t
        rows = tabs[0].window
        td = w["rewards"][rows, t] + 0.9 * V(w["contexts"][rows, t + 1]) - V(w["contexts"][rows, t])
        np.testing.assert_allclose(tabs[0].estimates, td, atol=1e-12)

    def test_own_policy_averages_to_zero(self):
        rng = np.random.default_rng(4)
        mdp = random_mdp(rng, 4, 3, 5, 0.9)
        mu = random_policy(rng, 4, 3, 5)
        ds = tabular_dataset(mdp, mu, 20_000, seed=5)
        V = TabularValue(dp_value(mdp, mu), 4)
        tab = offline_k_advantages(ds, TabularContextPolicy(mu, 4, 5), V, 3, clip=None)
        t, s = decode_contexts(tab.contexts, 4)
        for cell in np.unique(t * 4 + s):
            est = tab.estimates[t * 4 + s == cell]
            if len(est) < 30:
                continue
            assert abs(est.mean()) < 3 * est.std(ddof=1) / np.sqrt(len(est)) + 1e-12

    def test_unclipped_pdis_matches_dynamic_programming(self):
        rng = np.random.default_rng(8)
        mdp = random_mdp(rng, 3, 2, 4, 0.9)
        mu = uniform(3, 2)
        pi = deterministic(np.array([0, 1, 1]), 2)
        ds = tabular_dataset(mdp, mu, 40_000, seed=9)
        V = TabularValue(dp_value(mdp, mu), 3)
        for k in (1, 2, 3):
            tab = offline_k_advantages(ds, TabularContextPolicy(pi, 3, 4), V, k, clip=ClipBounds.unclipped())
            truth = dp_k_advantage(mdp, mu, pi, k)
            t, s = decode_contexts(tab.contexts, 3)
            a = tab.actions
            for sa in range(6):
                sel = s * 2 + a == sa
                est = tab.estimates[sel]
                oracle = truth[t[sel], s[sel], a[sel]].mean()
                assert abs(est.mean() - oracle) <= 3 * est.std(ddof=1) / np.sqrt(len(est)) + 1e-9

    def test_unit_clip_removes_policy_dependence(self):
        rng = np.random.default_rng(0)
        mdp = random_mdp(rng, 3, 2, 5, 0.9)
        mu = random_policy(rng, 3, 2, 5)
        ds = tabular_dataset(mdp, mu, 30, seed=1)
        V = TabularValue(dp_value(mdp, mu), 3)
        pis = [TabularContextPolicy(random_policy(np.random.default_rng(s), 3, 2, 5), 3, 5) for s in (7, 8)]
        a, b = (offline_k_advantages(ds, p, V, 4, clip=ClipBounds(1.0, 1.0)) for p in pis)
        np.testing.assert_array_equal(a.estimates, b.estimates)
        assert a.stats["clipped_fraction"] > 0

    def test_zero_bonus_full_window_is_the_discounted_return(self):
        rng = np.random.default_rng(0)
        mdp = random_mdp(rng, 3, 2, 5, 0.8)
        mu = random_policy(rng, 3, 2, 5)
        ds = tabular_dataset(mdp, mu, 10, seed=1)
        pi = TabularContextPolicy(mu, 3, 5)
        tab = offline_k_advantages(ds, pi, zero_value(ds.context_dim, 0.8), 5, clip=None)
        r = ds.windows["rewards"][tab.window, :5]
        np.testing.assert_allclose(tab.estimates, r @ 0.8 ** np.arange(5), atol=1e-12)

    def test_positions_beyond_the_window_are_skipped(self):
        rng = np.random.default_rng(0)
        mdp = random_mdp(rng, 3, 2, 5, 0.9)
        mu = random_policy(rng, 3, 2, 5)
        ds = tabular_dataset(mdp, mu, 4, seed=1)
        V = TabularValue(dp_value(mdp, mu), 3)
        for k in (1, 3, 5):
            tab = offline_k_advantages(ds, TabularContextPolicy(mu, 3, 5), V, k)
            assert len(tab) == 4 * (6 - k)
            assert tab.t.max() == 5 - k

    def test_k_above_window_rejected(self):
        ds = window_episodes([episodes_from_paths(
            sample_paths(chain_mdp(), uniform(2, 2), 1, np.random.default_rng(0)),
            chain_mdp(), uniform(2, 2), np.random.default_rng(0))[0]], 3, 1, 0.9)
        with pytest.raises((ValueError, DataError), match="k"):
            offline_k_advantages(ds, lambda x: np.full((len(x), 2), 0.5), zero_value(ds.context_dim), 4)

    def test_literal_bonus_weight_differs(self):
        rng = np.random.default_rng(0)
        mdp = random_mdp(rng, 3, 2, 5, 0.9)
        mu = uniform(3, 2)
        ds = tabular_dataset(mdp, mu, 50, seed=1)
        V = TabularValue(dp_value(mdp, mu), 3)
        pi = TabularContextPolicy(deterministic(np.array([0, 1, 0]), 2), 3, 5)
        a = offline_k_advantages(ds, pi, V, 2, clip=None, bonus_weight="reached")
        b = offline_k_advantages(ds, pi, V, 2, clip=None, bonus_weight="literal")
        assert not np.allclose(a.estimates, b.estimates)
        with pytest.raises(ValueError):
            offline_k_advantages(ds, pi, V, 2, bonus_weight="halfway")

    def test_table_export(self):
        tab = AdvantageTable(np.array([3]), np.array([0]), np.array([1]), np.array([7]), np.zeros((1, 2)),
                             np.array([2]), np.array([0.25]), 1, 0.9)
        assert tab.dumps() == "episode_id,t,action,estimate\n3,7,2,0.25\n"

    def test_table_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            AdvantageTable(np.array([0]), np.array([0]), np.array([0]), np.array([0]), np.zeros((1, 1)),
                           np.array([0]), np.array([np.nan]), 1, 0.9)


class TestOnlineAdvantages:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.mdp = random_mdp(rng, 3, 2, 5, 0.9)
        self.mu = random_policy(rng, 3, 2, 5)
        self.pi = random_policy(rng, 3, 2, 5)
        self.V = TabularValue(dp_value(self.mdp, self.mu), 3)
        self.env = TabularEnv(self.mdp)

    def test_matches_dynamic_programming(self):
        truth = {k: dp_k_advantage(self.mdp, self.mu, self.pi, k) for k in (1, 3)}
        snaps = [{"s": np.array(s), "t": np.array(t)} for t in (0, 2) for s in range(3)]
        pi = TabularContextPolicy(self.pi, 3, 5)
        for k, adv in truth.items():
            for a in range(2):
                mean, se = online_k_advantages(self.env, snaps, np.full(len(snaps), a), pi, self.V, k, 0.9,
                                               20_000, np.random.default_rng(k * 10 + a))
                expected = np.array([adv[int(sn["t"]), int(sn["s"]), a] for sn in snaps])
                assert np.all(np.abs(mean - expected) <= 3 * se + 1e-12)

    def test_one_step_is_the_behavior_advantage(self):
        snap = {"s": np.array(1), "t": np.array(0)}
        A1 = dp_k_advantage(self.mdp, self.mu, self.pi, 1)
        pi = TabularContextPolicy(self.pi, 3, 5)
        est = online_k_advantage(Env(self.env), pi, self.V, snap, 0, 1, 0.9, 50_000, seed=3)
        P = self.mdp.transition[1, 0]
        exact = self.mdp.reward[1, 0] + 0.9 * P @ self.V.table[1] - self.V.table[0, 1]
        assert exact == pytest.approx(A1[0, 1, 0], abs=1e-12)
        assert est == pytest.approx(exact, abs=0.02)

    def test_zero_bonus_to_the_end_is_the_return(self):
        mdp = chain_mdp(gamma=0.9, horizon=4)
        env = TabularEnv(mdp)
        always_1 = TabularContextPolicy(deterministic(np.array([1, 1]), 2), 2, 4)
        est = online_k_advantage(Env(env), always_1, zero_value(env.context_dim, 0.9),
                                 {"s": np.array(0), "t": np.array(0)}, 1, 4, 0.9, 3)
        assert est == pytest.approx(-0.1 + 0.9 * 0.9 + 0.81 * 0.9 + 0.729 * 0.9, abs=1e-12)

    def test_missing_state(self):
        with pytest.raises(EnvError):
            online_k_advantage(Env(self.env), lambda x: np.full((len(x), 2), 0.5), self.V, None, 0, 1, 0.9, 5)

    def test_argument_checks(self):
        snap = [{"s": np.array(0), "t": np.array(0)}]
        with pytest.raises(ValueError):
            online_k_advantages(self.env, snap, np.zeros(1), lambda x: np.full((len(x), 2), 0.5), self.V, 0, 0.9, 5,
                                np.random.default_rng(0))


class TestDiagnostic:
    def test_deterministic_on_policy_error_is_zero(self):
        mdp = chain_mdp(gamma=0.9, horizon=6)
        env = TabularEnv(mdp)
        mu_table = deterministic(np.array([1, 1]), 2)
        mu = FunctionPolicy(TabularContextPolicy(mu_table, 2, 6), 2)
        eps = collect_episodes(env, mu, 5, np.random.default_rng(0), keep_snapshots=True)
        ds = window_episodes(eps, 3, 1, 0.9, 2)
        V = TabularValue(dp_value(mdp, mu_table), 2)
        for truth in ("full", "per-k"):
            rows = advantage_mse_diagnostic(env, ds, mu, mu, V, [1, 2], n_truth_rollouts=3, n_probes=10, truth=truth)
            assert [r["k"] for r in rows] == [1, 2]
            for r in rows:
                assert r["mse"] < 1e-24

    def test_unknown_truth_mode(self):
        with pytest.raises(ValueError, match="truth"):
            advantage_mse_diagnostic(None, None, None, None, None, [1], truth="half")

    def test_csv(self):
        text = mse_rows_csv([{"k": 1, "mse": 0.5, "stderr": 0.125}, {"k": 5, "mse": 0.25, "stderr": 0.0}])
        assert text == "k,mse,stderr\n1,0.5,0.125\n5,0.25,0.0\n"


class TestBiasBound:
    def test_exact_inputs(self):
        assert bias_bound(5, 0.9, 0, 10, 2.0, 0, 0, 0, 0, 3.0) == 0.0

    def test_geometric_limit(self):
        assert bias_bound(2000, 0.9, 0, 3000, 2.0, 0.1, 0, 0, 0, 1.0) == pytest.approx(2.0 * 0.1 / 0.1, rel=1e-9)

    def test_value_terms(self):
        assert bias_bound(2, 0.5, 0, 4, 2.0, 0, 0, 0.3, 0.1, 1.0) == pytest.approx(0.25 * 2.0 * 0.1 + 0.3)

    def test_weight_term(self):
        got = bias_bound(2, 0.5, 1, 4, 1.0, 0, 0.2, 0, 0, -3.0)
        assert got == pytest.approx((1 - 0.25 + 0.125 - 0.5**5) / 0.5 * 3.0 * 0.2)

    def test_undiscounted_rejected(self):
        with pytest.raises(ValueError, match="gamma"):
            bias_bound(1, 1.0, 0, 3, 2.0, 0, 0, 0, 0, 1.0)

    def test_negative_error_rejected(self):
        with pytest.raises(ValueError):
            bias_bound(1, 0.5, 0, 3, 2.0, -0.1, 0, 0, 0, 1.0)

    @given(st.integers(1, 20), st.floats(0, 0.99), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_reward_error(self, k, gamma, e1, e2):
        lo, hi = sorted([e1, e2])
        assert bias_bound(k, gamma, 0, 30, 2.0, lo, 0.1, 0.1, 0.1, 1.0) <= \
            bias_bound(k, gamma, 0, 30, 2.0, hi, 0.1, 0.1, 0.1, 1.0) + 1e-12
