"""Tabular environment construction, enumeration, and serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiltrl.fixtures import T2B3_SEED, t2b3
from tiltrl import tabular
from tiltrl.tabular import (
    MalformedEnvError,
    TabularEnv,
    random_env,
    tabular_enumerate,
    two_terminal_env,
)


def depth1_env(prior=(0.3, 0.7), energies=(0.0, 0.0), alpha=1.0):
    return TabularEnv(
        horizon=1,
        layers=[[0], [1, 2]],
        children=[[1, 2], [], []],
        log_prior=[np.log(np.asarray(prior)), np.zeros(0), np.zeros(0)],
        energy=np.array([0.0, *energies]),
        alpha=alpha,
    )


class TestConstruction:
    def test_two_terminal_env(self):
        env = two_terminal_env()
        assert env.horizon == 1
        assert env.terminal_states == [1, 2]
        np.testing.assert_allclose(env.terminal_energies(), [0.0, 2.0])

    def test_prior_rows_must_normalize(self):
        with pytest.raises(MalformedEnvError):
            TabularEnv(
                horizon=1,
                layers=[[0], [1, 2]],
                children=[[1, 2], [], []],
                log_prior=[np.log([0.3, 0.3]), np.zeros(0), np.zeros(0)],
                energy=np.zeros(3),
                alpha=1.0,
            )

    def test_childless_internal_state_rejected(self):
        with pytest.raises(MalformedEnvError):
            TabularEnv(
                horizon=2,
                layers=[[0], [1, 2], [3]],
                children=[[1, 2], [3], [], []],
                log_prior=[
                    np.log([0.5, 0.5]),
                    np.log([1.0]),
                    np.zeros(0),
                    np.zeros(0),
                ],
                energy=np.zeros(4),
                alpha=1.0,
            )

    def test_nonpositive_alpha_rejected(self):
        with pytest.raises(MalformedEnvError):
            two_terminal_env(alpha=0.0)

    def test_edge_indexing(self):
        env = t2b3()
        assert env.n_edges == 12
        assert env.child_pos(0, 2) == 1
        assert env.edge_index(1, env.child_pos(1, 5)) == 3 + 1


class TestEnumerate:
    def test_depth1_reads_prior_directly(self):
        env = depth1_env()
        paths = tabular_enumerate(env)
        assert [p for p, _ in paths] == [[0, 1], [0, 2]]
        np.testing.assert_allclose(
            np.exp([lp for _, lp in paths]), [0.3, 0.7], rtol=1e-14
        )

    def test_depth2_binary_tree_probability_sum(self):
        env = TabularEnv(
            horizon=2,
            layers=[[0], [1, 2], [3, 4, 5, 6]],
            children=[[1, 2], [3, 4], [5, 6], [], [], [], []],
            log_prior=[
                np.log([0.6, 0.4]),
                np.log([0.5, 0.5]),
                np.log([0.9, 0.1]),
                np.zeros(0),
                np.zeros(0),
                np.zeros(0),
                np.zeros(0),
            ],
            energy=np.zeros(7),
            alpha=1.0,
        )
        paths = tabular_enumerate(env)
        assert len(paths) == 4
        assert sum(np.exp(lp) for _, lp in paths) == pytest.approx(1.0, abs=1e-10)

    def test_t2b3_matches_hand_multiplied_edge_products(self):
        env = t2b3()
        paths = tabular_enumerate(env)
        assert len(paths) == 9
        for path, lp in paths:
            by_hand = sum(
                env.log_prior[s][env.child_pos(s, c)]
                for s, c in zip(path[:-1], path[1:])
            )
            assert lp == pytest.approx(by_hand, abs=1e-14)

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_random_env_total_probability_is_one(self, seed):
        env = random_env(np.random.default_rng(seed))
        total = sum(np.exp(lp) for _, lp in tabular_enumerate(env))
        assert total == pytest.approx(1.0, abs=1e-10)


class TestFixture:
    def test_t2b3_is_reproducible(self):
        a, b = t2b3(), t2b3()
        for row_a, row_b in zip(a.log_prior, b.log_prior):
            np.testing.assert_array_equal(row_a, row_b)
        np.testing.assert_array_equal(a.energy, b.energy)
        assert T2B3_SEED == 20260401

    def test_t2b3_shape(self):
        env = t2b3()
        assert env.horizon == 2
        assert len(env.terminal_states) == 9
        assert np.all(env.terminal_energies() >= 0.0)
        assert np.all(env.terminal_energies() <= 2.0)


class TestSerialization:
    def test_json_roundtrip(self, tmp_path):
        env = t2b3(alpha=1.7)
        path = tmp_path / "env.json"
        tabular.save_json(env, path)
        back = tabular.load_json(path)
        assert back.horizon == env.horizon
        assert back.alpha == env.alpha
        assert back.layers == env.layers
        assert back.children == env.children
        for a, b in zip(back.log_prior, env.log_prior):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(back.energy, env.energy)

    def test_unknown_schema_rejected(self):
        with pytest.raises(ValueError):
            tabular.from_json_dict({"schema": "bogus/9"})
