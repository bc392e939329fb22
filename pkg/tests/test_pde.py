import math

import numpy as np
import pytest

from hjblab.controls import ControlSet
from hjblab.errors import ConfigurationError
from hjblab.lattice import TimeGrid
from hjblab.pde import FdScheme, gaussian_reference, heat_tail, hjb_fd_solve
from hjblab.problems import builtin_problem
from hjblab.value import value_recombining


class TestGaussianReference:
    def test_terminal_identity(self):
        assert gaussian_reference(1.0, 0.7, 1.0, 2.0) == math.exp(-0.49 / 2)

    def test_root_value(self):
        assert abs(gaussian_reference(0.0, 0.0, 1.0, 1.0) - 1 / math.sqrt(2)) < 1e-15

    def test_zero_volatility(self):
        for t in (0.0, 0.5, 1.0):
            assert gaussian_reference(t, 1.2, 1.0, 0.0) == math.exp(-1.44 / 2)

    def test_negative_vol_rejected(self):
        with pytest.raises(ConfigurationError):
            gaussian_reference(0.0, 0.0, 1.0, -1.0)


class TestHeatTail:
    def test_matches_closed_form(self):
        for x in (-1.0, 0.0, 2.0):
            got = heat_tail(lambda p: np.exp(-0.5 * p**2), x, 1.0)
            assert abs(got - gaussian_reference(0.0, x, 1.0, 1.0)) < 1e-10


class TestFdSolver:
    def test_zero_problem(self):
        spec = builtin_problem("zero")
        scheme = FdScheme(2.0, 0.1, 0.005, spec.default_controls)
        sol = hjb_fd_solve(spec, scheme, 1.0)
        assert np.abs(sol.values).max() == 0.0

    def test_gaussian_benchmark(self):
        spec = builtin_problem("gaussian_terminal")
        scheme = FdScheme(8.0, 0.02, 0.0004, spec.default_controls)
        sol = hjb_fd_solve(spec, scheme, 1.0)
        assert abs(sol.at(0.0, 0.0) - 1 / math.sqrt(2)) <= 1e-3
        # pointwise agreement with the closed form away from the boundary
        mask = np.abs(sol.xs) <= 4.0
        ref = np.array([gaussian_reference(0.0, x, 1.0, 1.0) for x in sol.xs[mask]])
        assert np.abs(sol.values[0, mask] - ref).max() <= 2e-3

    def test_cfl_violation_states_bound(self):
        spec = builtin_problem("gaussian_terminal")
        scheme = FdScheme(2.0, 0.1, 0.05, spec.default_controls)
        with pytest.raises(ConfigurationError, match="stability bound"):
            hjb_fd_solve(spec, scheme, 1.0)

    def test_consistency_order(self):
        spec = builtin_problem("gaussian_terminal")
        errs = []
        for h in (0.08, 0.04):
            scheme = FdScheme(8.0, h, h * h, spec.default_controls)
            sol = hjb_fd_solve(spec, scheme, 1.0)
            errs.append(abs(sol.at(0.0, 0.0) - 1 / math.sqrt(2)))
        rate = math.log(errs[0] / errs[1]) / math.log(2.0)
        assert rate >= 0.9

    def test_comparison_monotone_in_terminal_data(self):
        spec = builtin_problem("two_control_1d")
        grown = builtin_problem("two_control_1d")
        grown.terminal = lambda x, w: np.exp(-0.5 * np.square(x).sum(axis=-1)) + 0.3
        scheme = FdScheme(4.0, 0.1, 0.005, spec.default_controls)
        a = hjb_fd_solve(spec, scheme, 1.0)
        b = hjb_fd_solve(grown, scheme, 1.0)
        assert (b.values - a.values).min() >= -1e-12

    def test_control_freezing_lower_bound(self):
        spec = builtin_problem("two_control_1d")
        scheme = FdScheme(4.0, 0.1, 0.005, spec.default_controls)
        full = hjb_fd_solve(spec, scheme, 1.0)
        for i in range(2):
            frozen_scheme = FdScheme(
                4.0, 0.1, 0.005, ControlSet((spec.default_controls[i],))
            )
            frozen = hjb_fd_solve(spec, frozen_scheme, 1.0)
            assert (frozen.values - full.values).min() >= -1e-12

    def test_two_control_cross_backend(self):
        spec = builtin_problem("two_control_1d")
        scheme = FdScheme(8.0, 0.02, 0.0004, spec.default_controls)
        pde = hjb_fd_solve(spec, scheme, 1.0)
        pts = np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0])
        lattice = value_recombining(
            spec, spec.default_controls, TimeGrid(1.0, 200), pts
        ).root_values()
        for x, v in zip(pts, lattice):
            ref = pde.at(0.0, float(x))
            assert abs(v - ref) / abs(ref) <= 2e-2
