import math

import numpy as np
import pytest

from hjblab.controls import ControlSet, constant_strategy
from hjblab.errors import ConfigurationError, PropertyError
from hjblab.lattice import SpatialGrid, TimeGrid, build_path_tree
from hjblab.problems import builtin_problem
from hjblab.potential import (
    decompose_potential,
    energy_residuals,
    gradient_norm,
    k_bound_ratio,
    measure_eval,
    measure_infimum_certificate,
    measure_view,
    path_continuity_modulus,
    penalize_potential,
    potential_from_gap,
    psi_components,
    semigroup_apply,
    solve_linear_shifted,
    strong_continuity_statistic,
    weak_form_residual,
)
from hjblab.value import ValueField, value_backward, value_recombining


@pytest.fixture(scope="module")
def tree4():
    return build_path_tree(1, TimeGrid(1.0, 4))


@pytest.fixture(scope="module")
def unit_sigma():
    return constant_strategy(ControlSet.from_values([1.0]), 0)


def gauss(x):
    return np.exp(-0.5 * np.square(x).sum(axis=-1))


class TestLinearSolver:
    def test_zero_data(self, tree4, unit_sigma):
        sol = solve_linear_shifted(unit_sigma, None, None, tree4, [0.0])
        for v in sol.field.values:
            assert np.all(v == 0.0)
        for z in sol.coeff:
            assert np.all(z == 0.0)

    def test_unit_running_cost(self, tree4, unit_sigma):
        sol = solve_linear_shifted(
            unit_sigma, lambda t, x, w: np.ones(x.shape[:-1]), None, tree4, [0.0]
        )
        times = tree4.grid.times()
        for k, v in enumerate(sol.field.values):
            assert np.abs(v - (1.0 - times[k])).max() < 1e-14
        for z in sol.coeff:
            assert np.abs(z).max() < 1e-15

    def test_gaussian_terminal_benchmark(self):
        spec = builtin_problem("gaussian_terminal")
        sol = value_recombining(spec, spec.default_controls, TimeGrid(1.0, 200), [0.0])
        assert abs(sol.root_values()[0] - 1.0 / math.sqrt(2.0)) < 5e-3
        # root coefficient approximates the flat spatial derivative at 0
        tree = build_path_tree(1, TimeGrid(1.0, 8))
        lin = solve_linear_shifted(
            constant_strategy(spec.default_controls, 0),
            None,
            lambda x, w: gauss(x),
            tree,
            [0.0],
        )
        assert abs(lin.coeff[0][0, 0, 0]) < 5e-3

    def test_representation_identity_exact(self, tree4, unit_sigma):
        # shifted process plus martingale part balances terminal plus running
        lin = solve_linear_shifted(
            unit_sigma,
            lambda t, x, w: np.square(x).sum(axis=-1),
            lambda x, w: gauss(x),
            tree4,
            [-0.3, 0.4],
        )
        field = lin.field
        tree = tree4
        dt = tree.grid.dt
        sq = math.sqrt(dt)
        for k in range(tree.depth):
            parent = field.values[k]
            child = field.values[k + 1].reshape(-1, 2, field.n_bases)
            pts = field.points(k)
            fv = np.square(pts).sum(axis=-1)
            # u_k = f dt + (u_{k+1,+} + u_{k+1,-})/2 and the coefficient
            # reproduces the half-difference
            mean = 0.5 * (child[:, 0] + child[:, 1])
            assert np.abs(parent - fv * dt - mean).max() < 1e-13
            zc = lin.coeff[k][:, :, 0]
            assert np.abs(zc - (child[:, 1] - child[:, 0]) / (2 * sq)).max() < 1e-12


class TestSemigroup:
    def test_zero_shift_is_identity(self, tree4, unit_sigma):
        op = semigroup_apply(unit_sigma, lambda x: gauss(x), 0.5, 0.0, tree4)
        pts = np.linspace(-1, 1, 5)
        out = op(pts)
        assert np.abs(out - gauss(pts[:, None])[None, :]).max() < 1e-14

    def test_beyond_horizon_is_zero(self, tree4, unit_sigma):
        op = semigroup_apply(unit_sigma, lambda x: gauss(x), 0.75, 0.5, tree4)
        assert np.all(op(np.array([0.0])) == 0.0)

    def test_gaussian_convolution(self, unit_sigma):
        tree = build_path_tree(1, TimeGrid(0.25, 16))
        op = semigroup_apply(unit_sigma, lambda x: gauss(x), 0.0, 0.25, tree)
        out = op(np.array([0.0]))[0, 0]
        assert abs(out - 1.0 / math.sqrt(1.25)) < 5e-3

    def test_contraction_on_random_fields(self):
        # grid spacing divides the step displacements: translation is exact
        tree = build_path_tree(1, TimeGrid(1.0, 4))
        grid = SpatialGrid(1, 8.0, 1.0 / 16.0)
        cs = ControlSet.from_values([0.5, 1.0])
        rng = np.random.default_rng(0)
        for trial in range(20):
            coefs = rng.normal(size=4)
            locs = rng.uniform(-2, 2, size=4)

            def u_fn(x):
                r = x[..., 0]
                vals = sum(c * np.exp(-((r - l) ** 2)) for c, l in zip(coefs, locs))
                return np.where(np.abs(r) <= 3.0, vals, 0.0)

            sigma = constant_strategy(cs, trial % 2)
            for shift_levels in (1, 2):
                t0 = 0.25 * (trial % 3)
                op = semigroup_apply(sigma, u_fn, t0, shift_levels * 0.25, tree)
                shifted = op(grid.points)
                norm_shifted = math.sqrt((shifted**2).sum(axis=1).mean() * grid.weight)
                norm_raw = math.sqrt((u_fn(grid.points) ** 2).sum() * grid.weight)
                assert norm_shifted <= norm_raw + 1e-12

    def test_strong_continuity_decreasing(self):
        grid = SpatialGrid(1, 8.0, 1.0 / 16.0)

        def u_fn(t, x):
            r = x[..., 0]
            return np.where(np.abs(r) <= 3.0, (1.0 + 0.5 * t) * np.exp(-(r**2)), 0.0)

        for n in (4, 8):
            tree = build_path_tree(1, TimeGrid(1.0, n))
            sigma = constant_strategy(ControlSet.from_values([1.0]), 0)
            stats = [
                strong_continuity_statistic(sigma, u_fn, s, tree, grid.points, grid.weight)
                for s in (4, 2, 1)
            ]
            assert stats[0] > stats[1] > stats[2] > 0.0


class TestPenalization:
    def test_zero_field(self, tree4):
        field = ValueField(
            tree4,
            np.zeros((1, 1)),
            [np.zeros((tree4.level_size(k), 1)) for k in range(5)],
            [np.zeros((tree4.level_size(k), 1)) for k in range(5)],
        )
        pen = penalize_potential(field, 10.0)
        for v in pen.field.values:
            assert np.all(v == 0.0)

    def test_deterministic_scalar_recursion(self):
        # independent scalar recursion for u(t) = c (T - t) / T
        tree = build_path_tree(1, TimeGrid(1.0, 4))
        c, n = 2.0, 10.0
        times = tree.grid.times()
        u = [np.full((tree.level_size(k), 1), c * (1 - times[k])) for k in range(5)]
        field = ValueField(tree, np.zeros((1, 1)), u, u)
        pen = penalize_potential(field, n)
        dt = tree.grid.dt
        expected = [0.0]
        for k in range(3, -1, -1):
            expected.insert(0, (expected[0] + n * dt * c * (1 - times[k])) / (1 + n * dt))
        for k in range(5):
            assert abs(pen.field.values[k][0, 0] - expected[k]) < 1e-14
            assert np.all(pen.field.values[k] <= u[k] + 1e-14)

    def test_monotone_in_penalty_and_convergent(self):
        spec = builtin_problem("two_control_1d")
        tree = build_path_tree(1, TimeGrid(1.0, 3))
        sigma = constant_strategy(spec.default_controls, 1)
        pot = potential_from_gap(spec, spec.default_controls, sigma, tree, [0.0, 0.5])
        sup_u = max(float(np.abs(v).max()) for v in pot.field.values)
        prev = None
        errs = []
        for n in (1.0, 10.0, 100.0, 1000.0):
            pen = penalize_potential(pot.field, n)
            for k in range(4):
                assert pen.field.values[k].min() >= -1e-12
                assert np.all(pen.field.values[k] <= pot.field.values[k] + 1e-12)
                if prev is not None:
                    assert np.all(pen.field.values[k] >= prev[k] - 1e-12)
            prev = pen.field.values
            errs.append(
                max(float(np.abs(pot.field.values[k] - pen.field.values[k]).max()) for k in range(4))
            )
        assert errs[0] > errs[1] > errs[2] > errs[3]
        # first-order law in the penalty strength
        assert 5.0 < errs[1] / errs[2] < 15.0
        assert errs[-1] < 1e-2 * sup_u

    def test_negative_penalty_rejected(self, tree4):
        field = ValueField(
            tree4,
            np.zeros((1, 1)),
            [np.zeros((tree4.level_size(k), 1)) for k in range(5)],
            [np.zeros((tree4.level_size(k), 1)) for k in range(5)],
        )
        with pytest.raises(ConfigurationError):
            penalize_potential(field, -1.0)


class TestDecomposition:
    def test_zero_potential(self, tree4):
        field = ValueField(
            tree4,
            np.zeros((1, 1)),
            [np.zeros((tree4.level_size(k), 1)) for k in range(5)],
            [np.zeros((tree4.level_size(k), 1)) for k in range(5)],
        )
        pot = decompose_potential(field)
        assert np.all(pot.decomposition.increasing[-1] == 0.0)
        assert pot.energy_residual.max() == 0.0

    def test_deterministic_ramp(self, tree4):
        times = tree4.grid.times()
        vals = [np.full((tree4.level_size(k), 1), 1.0 - times[k]) for k in range(5)]
        offs = [np.zeros((tree4.level_size(k), 1)) for k in range(5)]
        pot = decompose_potential(ValueField(tree4, np.zeros((1, 1)), vals, offs))
        for k in range(5):
            assert np.abs(pot.decomposition.increasing[k] - times[k]).max() < 1e-14
        assert pot.energy_residual.max() < 1e-12
        assert pot.reconstruction < 1e-13

    def test_gap_potential_two_control(self):
        spec = builtin_problem("two_control_1d")
        tree = build_path_tree(1, TimeGrid(1.0, 3))
        sigma = constant_strategy(spec.default_controls, 1)
        bases = np.linspace(-1.0, 1.0, 9)
        pot = potential_from_gap(spec, spec.default_controls, sigma, tree, bases)
        assert pot.energy_residual.max() <= 1e-10
        assert pot.reconstruction <= 1e-12
        assert pot.energy_coeff_gap <= 1e-12  # binary tree: coefficient form exact
        for d in pot.decomposition.delta:
            assert d.min() >= -1e-12
        # mean terminal mass equals the initial gap
        mass = measure_view(pot).total_mass_per_base()
        assert np.abs(mass - pot.field.values[0][0]).max() < 1e-12
        assert k_bound_ratio(pot).max() < 10.0

    def test_rejects_nonzero_terminal(self, tree4):
        vals = [np.full((tree4.level_size(k), 1), 1.0) for k in range(5)]
        offs = [np.zeros((tree4.level_size(k), 1)) for k in range(5)]
        with pytest.raises(PropertyError, match="horizon"):
            decompose_potential(ValueField(tree4, np.zeros((1, 1)), vals, offs))

    def test_rejects_negative_field(self, tree4):
        times = tree4.grid.times()
        vals = [np.full((tree4.level_size(k), 1), -(1.0 - times[k])) for k in range(5)]
        offs = [np.zeros((tree4.level_size(k), 1)) for k in range(5)]
        with pytest.raises(PropertyError, match="nonnegative"):
            decompose_potential(ValueField(tree4, np.zeros((1, 1)), vals, offs))


class TestMeasure:
    def test_zero_increments_zero_mass(self, tree4):
        field = ValueField(
            tree4,
            np.zeros((1, 1)),
            [np.zeros((tree4.level_size(k), 1)) for k in range(5)],
            [np.zeros((tree4.level_size(k), 1)) for k in range(5)],
        )
        pot = decompose_potential(field)
        view = measure_view(pot)
        assert measure_eval(view, lambda t, x: np.ones(x.shape[:-1])) == 0.0

    def test_unit_test_function_gives_mean_terminal(self):
        spec = builtin_problem("two_control_1d")
        tree = build_path_tree(1, TimeGrid(1.0, 3))
        sigma = constant_strategy(spec.default_controls, 1)
        grid = SpatialGrid(1, 2.0, 0.5)
        pot = potential_from_gap(spec, spec.default_controls, sigma, tree, grid.points)
        view = measure_view(pot, weights=np.full(grid.n_points, grid.weight))
        val = measure_eval(view, lambda t, x: np.ones(x.shape[:-1]))
        expected = (view.total_mass_per_base() * grid.weight).sum()
        assert abs(val - expected) < 1e-12
        assert val > 0.0
        # nonnegative test functions give nonnegative mass
        val2 = measure_eval(view, lambda t, x: gauss(x))
        assert val2 >= 0.0


class TestCertificate:
    def test_singleton_control_zero_mass(self):
        spec = builtin_problem("gaussian_terminal")
        tree = build_path_tree(1, TimeGrid(1.0, 3))
        report = measure_infimum_certificate(
            spec, spec.default_controls, tree, 1.5, [0.5], degraded=False
        )
        assert report.passed
        assert all(abs(r.gap) < 1e-14 and abs(r.mass) < 1e-14 for r in report.rows)

    def test_exact_feedback_mass_vanishes(self):
        spec = builtin_problem("two_control_1d")
        tree = build_path_tree(1, TimeGrid(1.0, 3))
        report = measure_infimum_certificate(
            spec, spec.default_controls, tree, 2.0, [0.25], degraded=False
        )
        assert report.passed
        assert max(abs(r.mass) for r in report.rows) <= 1e-10

    def test_degraded_schedule_decreasing_and_bounded(self):
        spec = builtin_problem("two_control_1d")
        tree = build_path_tree(1, TimeGrid(1.0, 10))
        report = measure_infimum_certificate(
            spec,
            spec.default_controls,
            tree,
            2.0,
            [0.4, 0.2, 0.1],
            degraded=True,
        )
        masses = [report.aggregated[e] for e in (0.4, 0.2, 0.1)]
        assert masses[0] > masses[1] > masses[2] > 0.0
        assert report.passed
        for e in (0.4, 0.2, 0.1):
            assert report.aggregated[e] <= report.bound[e]


class TestGradients:
    def test_constant_field_zero(self, tree4):
        bases = np.linspace(-1, 1, 11)[:, None]
        vals = [np.ones((tree4.level_size(k), 11)) for k in range(5)]
        offs = [np.zeros((tree4.level_size(k), 1)) for k in range(5)]
        field = ValueField(tree4, bases, vals, offs)
        assert gradient_norm(field, np.array([[1.0]])) == 0.0

    def test_linear_field_closed_form(self, tree4):
        a, b, radius = 0.7, 1.3, 2.0
        h = 0.1
        n = int(round(2 * radius / h))
        bases = (-radius + (np.arange(n) + 0.5) * h)[:, None]
        vals = [np.tile(a * bases[:, 0], (tree4.level_size(k), 1)) for k in range(5)]
        offs = [np.zeros((tree4.level_size(k), 1)) for k in range(5)]
        field = ValueField(tree4, bases, vals, offs)
        expected = (a * b) ** 2 * 1.0 * (2 * radius)
        assert abs(gradient_norm(field, np.array([[b]])) - expected) < 1e-10

    def test_too_coarse_rejected(self, tree4):
        bases = np.array([[0.0], [1.0]])
        vals = [np.zeros((tree4.level_size(k), 2)) for k in range(5)]
        offs = [np.zeros((tree4.level_size(k), 1)) for k in range(5)]
        with pytest.raises(ConfigurationError):
            gradient_norm(ValueField(tree4, bases, vals, offs), np.array([[1.0]]))

    def test_gaussian_value_field_stable_under_refinement(self):
        spec = builtin_problem("gaussian_terminal")
        tree = build_path_tree(1, TimeGrid(1.0, 4))
        results = []
        for h in (0.05, 0.025):
            n = int(round(2.0 / h))
            bases = -1.0 + (np.arange(n) + 0.5) * h
            sol = value_backward(spec, spec.default_controls, tree, bases)
            field = sol.field_along(constant_strategy(spec.default_controls, 0), tree)
            results.append(gradient_norm(field, np.array([[1.0]])))
        assert results[0] > 0.0
        assert abs(results[0] - results[1]) / results[0] < 0.05


class TestObservedFiltration:
    def test_psi_trailing_component_vanishes(self):
        spec = builtin_problem("partial_nonmarkov")
        tree = build_path_tree(2, TimeGrid(1.0, 4))
        h = 0.05
        n = int(round(2.0 / h))
        bases = -1.0 + (np.arange(n) + 0.5) * h
        sol = value_backward(spec, spec.default_controls, tree, bases)
        sigma = constant_strategy(spec.default_controls, 1)
        field = sol.field_along(sigma, tree)
        psi = psi_components(field, sigma)
        worst_second = max(float(np.abs(p[:, :, 1]).max()) for p in psi)
        assert worst_second <= 1e-10
        worst_first = max(float(np.abs(p[:, :, 0]).max()) for p in psi)
        assert worst_first > 1e-3  # the observed coordinate carries real noise

    def test_branch_identity_of_cost(self):
        from hjblab.value import cost_functional

        spec = builtin_problem("partial_nonmarkov")
        tree = build_path_tree(2, TimeGrid(1.0, 3))
        sigma = constant_strategy(spec.default_controls, 0)
        j = cost_functional(spec, sigma, tree, [0.0, 0.7])
        for k in range(1, 4):
            grouped = j.values[k].reshape(tree.level_size(k - 1), 4, -1)
            # children 0,2 share the observed sign (coordinate 1 down), 1,3 up
            assert np.abs(grouped[:, 0] - grouped[:, 2]).max() <= 1e-12
            assert np.abs(grouped[:, 1] - grouped[:, 3]).max() <= 1e-12


class TestDiagnostics:
    def test_path_modulus_decreases(self):
        from hjblab.value import cost_functional

        spec = builtin_problem("gaussian_terminal")
        mods = []
        for n in (4, 8, 16):
            tree = build_path_tree(1, TimeGrid(1.0, n))
            sigma = constant_strategy(spec.default_controls, 0)
            j = cost_functional(spec, sigma, tree, [0.0])
            mods.append(path_continuity_modulus(j))
        assert mods[0] > mods[1] > mods[2]

    def test_weak_form_residual_shrinks(self):
        spec = builtin_problem("two_control_1d")

        def phi(t, x):
            return (1.0 - t) * np.exp(-np.square(x))

        def dphi_dt(t, x):
            return -np.exp(-np.square(x))

        def d2phi_dx2(t, x):
            return (1.0 - t) * np.exp(-np.square(x)) * (4 * np.square(x) - 2.0)

        res = []
        for n, h in ((4, 0.2), (8, 0.1)):
            tree = build_path_tree(1, TimeGrid(1.0, n))
            res.append(
                weak_form_residual(
                    spec, spec.default_controls, 1, tree, 6.0, h, phi, dphi_dt, d2phi_dx2
                )
            )
        assert res[1] < res[0]
