"""Exact tabular ground truth: soft values, optimal policy, terminal
marginals, tilted and mis-specified targets, and the enumerated objective."""

import json

import numpy as np
import pytest
from scipy.special import logsumexp

from tiltrl.evalmetrics import tv_distance
from tiltrl.fixtures import t2b3
from tiltrl.oracle import (
    kl_objective_gradient_logits,
    kl_objective_value,
    optimal_policy,
    oracle_tables,
    save_tables_json,
    soft_values,
    softmax_policy,
    terminal_marginal,
    tilted_target,
    wrong_tilted_target,
)
from tiltrl.tabular import TabularEnv, random_env, tabular_enumerate, two_terminal_env


def single_path_env(energy=1.3, alpha=1.0):
    return TabularEnv(
        horizon=2,
        layers=[[0], [1], [2]],
        children=[[1], [2], []],
        log_prior=[np.zeros(1), np.zeros(1), np.zeros(0)],
        energy=np.array([0.0, 0.0, energy]),
        alpha=alpha,
    )


class TestSoftValues:
    def test_zero_energy_gives_zero_values(self):
        env = t2b3()
        env = TabularEnv(
            horizon=env.horizon,
            layers=env.layers,
            children=env.children,
            log_prior=env.log_prior,
            energy=np.zeros(env.n_states),
            alpha=1.0,
        )
        v, _ = soft_values(env)
        np.testing.assert_allclose(v, 0.0, atol=1e-12)

    def test_single_path_value_is_minus_energy(self):
        for alpha in (0.5, 1.0, 3.0):
            env = single_path_env(energy=1.3, alpha=alpha)
            v, _ = soft_values(env)
            assert v[0] == pytest.approx(-1.3, abs=1e-12)

    def test_t2b3_root_value_matches_enumeration(self):
        for alpha in (0.5, 1.0, 2.0):
            env = t2b3(alpha=alpha)
            v, _ = soft_values(env)
            # alpha * log sum_tau prior(tau) exp(-E(tau)/alpha), brute force
            terms = [
                lp - env.energy[path[-1]] / alpha
                for path, lp in tabular_enumerate(env)
            ]
            expected = alpha * logsumexp(terms)
            assert v[0] == pytest.approx(expected, abs=1e-12)


class TestOptimalPolicy:
    def test_zero_energy_recovers_prior(self):
        env = two_terminal_env(energies=(0.0, 0.0), prior=(0.25, 0.75))
        v, q = soft_values(env)
        pi = optimal_policy(env, v, q)
        np.testing.assert_allclose(pi[0], [0.25, 0.75], atol=1e-14)

    def test_large_alpha_approaches_prior(self):
        env = t2b3(alpha=1e6)
        v, q = soft_values(env)
        pi = optimal_policy(env, v, q)
        for s in range(env.n_states):
            if len(env.children[s]):
                np.testing.assert_allclose(
                    pi[s], np.exp(env.log_prior[s]), atol=1e-5
                )

    def test_rows_normalize(self):
        env = t2b3(alpha=0.7)
        v, q = soft_values(env)
        pi = optimal_policy(env, v, q)
        for s in range(env.n_states):
            if len(env.children[s]):
                assert pi[s].sum() == pytest.approx(1.0, abs=1e-12)

    def test_t2b3_marginal_equals_tilted(self):
        env = t2b3()
        tables = oracle_tables(env)
        marg = terminal_marginal(env, tables.pi_star)
        assert tv_distance(marg, tables.tilted) < 1e-12


class TestTerminalMarginal:
    def test_deterministic_policy_is_point_mass(self):
        env = t2b3()
        pi = [np.zeros(0)] * env.n_states
        for s in range(env.n_states):
            if len(env.children[s]):
                row = np.zeros(len(env.children[s]))
                row[0] = 1.0
                pi[s] = row
        marg = terminal_marginal(env, pi)
        assert marg[0] == 1.0 and marg[1:].sum() == 0.0

    def test_prior_policy_matches_path_products(self):
        env = t2b3()
        prior_pi = [
            np.exp(env.log_prior[s]) if len(env.children[s]) else np.zeros(0)
            for s in range(env.n_states)
        ]
        marg = terminal_marginal(env, prior_pi)
        by_hand = np.zeros(len(env.terminal_states))
        for path, lp in tabular_enumerate(env):
            by_hand[env.terminal_states.index(path[-1])] += np.exp(lp)
        np.testing.assert_allclose(marg, by_hand, atol=1e-14)

    def test_mixing_tables_differs_from_mixing_marginals(self):
        env = t2b3()
        tables = oracle_tables(env)
        prior_pi = [
            np.exp(env.log_prior[s]) if len(env.children[s]) else np.zeros(0)
            for s in range(env.n_states)
        ]
        mixed_tables = [
            0.5 * a + 0.5 * b if len(a) else np.zeros(0)
            for a, b in zip(tables.pi_star, prior_pi)
        ]
        lhs = terminal_marginal(env, mixed_tables)
        rhs = 0.5 * terminal_marginal(env, tables.pi_star) + 0.5 * terminal_marginal(
            env, prior_pi
        )
        assert np.max(np.abs(lhs - rhs)) > 1e-6


class TestTargets:
    def test_zero_energy_targets_equal_prior_marginal(self):
        env = two_terminal_env(energies=(0.0, 0.0), prior=(0.3, 0.7), alpha=0.5)
        tilted, log_z = tilted_target(env)
        wrong = wrong_tilted_target(env)
        np.testing.assert_allclose(tilted, [0.3, 0.7], atol=1e-14)
        np.testing.assert_allclose(wrong, [0.3, 0.7], atol=1e-14)
        assert log_z == pytest.approx(0.0, abs=1e-14)

    def test_two_terminal_arithmetic(self):
        env = two_terminal_env(energies=(0.0, np.log(2.0)), prior=(0.5, 0.5))
        tilted, _ = tilted_target(env)
        np.testing.assert_allclose(tilted, [2.0 / 3.0, 1.0 / 3.0], atol=1e-14)

    def test_tilted_differs_from_wrong_for_nonconstant_energy(self):
        env = t2b3()
        tilted, _ = tilted_target(env)
        wrong = wrong_tilted_target(env)
        assert tv_distance(tilted, wrong) > 0.0

    def test_log_z_consistency_with_root_value(self):
        for seed in range(20):
            env = random_env(np.random.default_rng(seed))
            v, _ = soft_values(env)
            _, log_z = tilted_target(env)
            z = np.exp(log_z)
            assert np.exp(v[0] / env.alpha) == pytest.approx(z, rel=1e-12)


class TestEnumeratedObjective:
    def test_kl_objective_value_at_prior_zero_energy(self):
        env = two_terminal_env(energies=(0.0, 0.0))
        prior_pi = [np.exp(env.log_prior[0]), np.zeros(0), np.zeros(0)]
        assert kl_objective_value(env, prior_pi) == pytest.approx(0.0, abs=1e-14)

    def test_gradient_vanishes_at_optimal_policy(self):
        env = t2b3()
        tables = oracle_tables(env)
        # logits reproducing pi_star exactly
        logits = np.concatenate(
            [np.log(tables.pi_star[s]) for s in range(env.n_states)
             if len(env.children[s])]
        )
        grad = kl_objective_gradient_logits(env, logits)
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_gradient_matches_finite_differences_of_value(self):
        env = t2b3()
        rng = np.random.default_rng(3)
        logits = rng.normal(size=env.n_edges)
        grad = kl_objective_gradient_logits(env, logits)
        eps = 1e-6
        for idx in rng.choice(env.n_edges, size=5, replace=False):
            up = logits.copy()
            up[idx] += eps
            dn = logits.copy()
            dn[idx] -= eps
            fd = (
                kl_objective_value(env, softmax_policy(env, up))
                - kl_objective_value(env, softmax_policy(env, dn))
            ) / (2 * eps)
            assert grad[idx] == pytest.approx(fd, abs=1e-6)


class TestSerialization:
    def test_tables_json_schema(self, tmp_path):
        env = t2b3()
        tables = oracle_tables(env)
        path = tmp_path / "tables.json"
        save_tables_json(env, tables, path)
        with open(path) as f:
            data = json.load(f)
        assert data["schema"] == "tiltrl-oracle-tables/1"
        assert data["terminal_states"] == env.terminal_states
        np.testing.assert_allclose(data["tilted"], tables.tilted, atol=1e-15)
        assert sum(data["tilted"]) == pytest.approx(1.0, abs=1e-9)
