import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjblab.controls import (
    ControlSet,
    concat_strategy,
    constant_strategy,
    controlled_state,
    enumerate_strategies,
    feedback_strategy,
    materialize,
    max_state_bound,
    open_loop_strategy,
    strategy_count,
)
from hjblab.errors import ConfigurationError, GridError, SizeBudgetError, StrategyError
from hjblab.lattice import TimeGrid, build_path_tree


@pytest.fixture
def tree2():
    return build_path_tree(1, TimeGrid(1.0, 2))


@pytest.fixture
def two_controls():
    return ControlSet.from_values([0.5, 1.0])


class TestControlSet:
    def test_bound_and_shapes(self):
        cs = ControlSet.from_values([[0.5, 0.0], [1.0, 0.0]], d=1, m=2)
        assert cs.state_dim == 1 and cs.wiener_dim == 2
        assert abs(cs.bound - 1.0) < 1e-15

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            ControlSet(())

    def test_mixed_shapes_rejected(self):
        with pytest.raises(ConfigurationError):
            ControlSet((np.ones((1, 1)), np.ones((2, 1))))


class TestControlledState:
    def test_zero_control(self, tree2):
        cs = ControlSet.from_values([0.0])
        x = controlled_state(constant_strategy(cs, 0), tree2)
        for v in x.values:
            assert np.all(v == 0.0)

    def test_unit_control_reproduces_walk(self, tree2, two_controls):
        x = controlled_state(constant_strategy(two_controls, 1), tree2)
        for k in range(3):
            assert np.allclose(x.values[k][:, 0], tree2.wiener_values(k)[:, 0], atol=1e-15)

    def test_open_loop_two_level(self, tree2, two_controls):
        # 0.5 at the root, 1.0 on both level-1 nodes
        sigma = open_loop_strategy(two_controls, [np.array([0]), np.array([1, 1])])
        x = controlled_state(sigma, tree2)
        sq = math.sqrt(0.5)
        leaves = sorted(np.round(x.values[2][:, 0], 12))
        expected = sorted(
            np.round([-0.5 * sq - sq, -0.5 * sq + sq, 0.5 * sq - sq, 0.5 * sq + sq], 12)
        )
        assert leaves == expected

    def test_missing_table_entry(self, tree2, two_controls):
        sigma = open_loop_strategy(two_controls, [np.array([0])])
        with pytest.raises(StrategyError):
            controlled_state(sigma, tree2)

    def test_bound_invariant(self, tree2, two_controls):
        x = controlled_state(constant_strategy(two_controls, 1), tree2)
        bound = max_state_bound(two_controls, tree2)
        for v in x.values:
            assert np.abs(v).max() <= bound + 1e-12


class TestConcat:
    def test_t_zero_all_second(self, tree2, two_controls):
        a = constant_strategy(two_controls, 0)
        b = constant_strategy(two_controls, 1)
        c = concat_strategy(a, b, 0.0, tree2)
        assert all(np.all(row == 1) for row in c.table)

    def test_t_horizon_all_first(self, tree2, two_controls):
        a = constant_strategy(two_controls, 0)
        b = constant_strategy(two_controls, 1)
        c = concat_strategy(a, b, 1.0, tree2)
        assert all(np.all(row == 0) for row in c.table)

    def test_midpoint_split(self, tree2, two_controls):
        a = constant_strategy(two_controls, 0)
        b = constant_strategy(two_controls, 1)
        c = concat_strategy(a, b, 0.5, tree2)
        assert np.all(c.table[0] == 0) and np.all(c.table[1] == 1)

    def test_off_grid_time(self, tree2, two_controls):
        with pytest.raises(GridError):
            concat_strategy(
                constant_strategy(two_controls, 0),
                constant_strategy(two_controls, 1),
                0.3,
                tree2,
            )

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 3))
    def test_state_agrees_before_split(self, k_star):
        tree = build_path_tree(1, TimeGrid(1.0, 3))
        cs = ControlSet.from_values([0.5, 1.0])
        rng = np.random.default_rng(k_star)
        table_a = [rng.integers(0, 2, tree.level_size(k)) for k in range(3)]
        table_b = [rng.integers(0, 2, tree.level_size(k)) for k in range(3)]
        a = open_loop_strategy(cs, table_a)
        b = open_loop_strategy(cs, table_b)
        t = k_star * tree.grid.dt
        c = concat_strategy(a, b, t, tree)
        xa = controlled_state(a, tree)
        xc = controlled_state(c, tree)
        for k in range(k_star + 1):
            assert np.array_equal(xa.values[k], xc.values[k])


class TestEnumeration:
    def test_counts(self):
        cs = ControlSet.from_values([0.5, 1.0])
        for n, expected in [(1, 2), (2, 8), (3, 128)]:
            tree = build_path_tree(1, TimeGrid(1.0, n))
            assert strategy_count(tree, cs) == expected
            strategies = list(enumerate_strategies(tree, cs))
            assert len(strategies) == expected
            seen = {tuple(np.concatenate(s.table)) for s in strategies}
            assert len(seen) == expected

    def test_budget(self):
        cs = ControlSet.from_values([0.5, 1.0])
        tree = build_path_tree(1, TimeGrid(1.0, 4))
        with pytest.raises(SizeBudgetError, match="32768"):
            list(enumerate_strategies(tree, cs, budget=100))


class TestFeedback:
    def test_materialized_rule(self, tree2, two_controls):
        rule = lambda k, x: 1 if x[0] > 0 else 0
        fb = feedback_strategy(two_controls, rule)
        sigma = materialize(fb, tree2, base=np.array([0.1]))
        x = controlled_state(sigma, tree2)
        assert sigma.table[0][0] == 1  # base 0.1 > 0
        assert x.values[1].shape == (2, 1)
