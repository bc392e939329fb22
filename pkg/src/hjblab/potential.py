"""Shifted linear solver, transition semigroup, potentials and random measures.

A nonnegative supermartingale field along a controlled path with zero
terminal value is decomposed into its increasing process K and per-step
martingale coefficient; K generates a random measure on time-space whose
evaluations, energy balance and vanishing-infimum certificate are the
checkable content of the weak-solution construction.

Energy identities are stated with the exact discrete martingale increments.
On binary trees (m == 1) the per-step coefficient reproduces the increments
pathwise, so the coefficient form of the identity is equally exact; for
m >= 2 the coefficient only spans the first-order part and the remainder is
reported, not asserted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .controls import ControlSet, Strategy, constant_strategy, controlled_state
from .errors import ConfigurationError, GridError, PropertyError
from .lattice import (
    AdaptedProcess,
    PathTree,
    PotentialDecomposition,
    cond_expect_step,
    doob_meyer_decompose,
    reconstruction_residual,
    z_extract,
)
from .problems import CostSpec
from .value import (
    ValueField,
    ValueSolution,
    as_base_points,
    cost_functional,
    field_difference,
    optimal_feedback,
    solve_value,
    value_backward,
)


# ---------------------------------------------------------------------------
# linear shifted solver


@dataclass
class LinearSolution:
    field: ValueField
    coeff: list[np.ndarray]


def solve_linear_shifted(
    strategy: Strategy,
    running: Callable[[float, np.ndarray, np.ndarray | None], np.ndarray] | None,
    terminal: Callable[[np.ndarray, np.ndarray | None], np.ndarray] | None,
    tree: PathTree,
    bases,
    observed_dim: int = 0,
) -> LinearSolution:
    """Backward solution of the path-shifted linear equation.

    ``values[k][node, b]`` equals the conditional expectation, at the node,
    of terminal(base + X_N) plus the running field summed over t_j >= t_k at
    the shifted points base + X_j.  The extracted coefficient plays the
    martingale term of the shifted representation.
    """
    d = strategy.controls.state_dim
    base_pts = as_base_points(bases, d)
    x = controlled_state(strategy, tree)
    n = tree.depth
    times = tree.grid.times()
    dt = tree.grid.dt

    def eval_field(fn, level, t, with_time):
        pts = base_pts[None, :, :] + x.values[level][:, None, :]
        if fn is None:
            return np.zeros(pts.shape[:-1])
        if observed_dim == 0:
            return np.asarray(fn(t, pts, None) if with_time else fn(pts, None), dtype=float)
        wp = tree.wiener_paths(level)[:, :, :observed_dim]
        out = np.empty(pts.shape[:-1])
        for node in range(pts.shape[0]):
            w = wp[node]
            out[node] = fn(t, pts[node], w) if with_time else fn(pts[node], w)
        return out

    vals: list[np.ndarray | None] = [None] * (n + 1)
    vals[n] = eval_field(terminal, n, None, with_time=False)
    for k in range(n - 1, -1, -1):
        fv = eval_field(running, k, float(times[k]), with_time=True)
        vals[k] = fv * dt + cond_expect_step(tree, vals[k + 1])
    field = ValueField(tree, base_pts, vals, list(x.values))
    return LinearSolution(field, z_extract(field.as_adapted()))


# ---------------------------------------------------------------------------
# transition semigroup


def semigroup_apply(
    strategy: Strategy,
    u_fn: Callable[[np.ndarray], np.ndarray],
    t0: float,
    s: float,
    tree: PathTree,
):
    """Conditional shift operator applied to a spatial field given at t0 + s.

    Returns a callable mapping points (n, d) to values (nodes at t0, n).
    Beyond the horizon the operator is identically zero.
    """
    if s < 0:
        raise GridError(f"semigroup needs s >= 0, got {s}")
    k0 = tree.grid.level_of(t0)
    horizon = tree.grid.horizon
    if t0 + s > horizon + 1e-9 * max(1.0, horizon):
        def zero(points: np.ndarray) -> np.ndarray:
            pts = as_base_points(points, strategy.controls.state_dim)
            return np.zeros((tree.level_size(k0), pts.shape[0]))

        return zero
    k1 = tree.grid.level_of(t0 + s)
    x = controlled_state(strategy, tree)
    block = tree.n_children ** (k1 - k0)
    d = strategy.controls.state_dim

    def apply(points: np.ndarray) -> np.ndarray:
        pts = as_base_points(points, d)
        out = np.empty((tree.level_size(k0), pts.shape[0]))
        for node in range(tree.level_size(k0)):
            lo = node * block
            shift = x.values[k1][lo : lo + block] - x.values[k0][node]
            vals = u_fn(pts[None, :, :] + shift[:, None, :])
            out[node] = np.asarray(vals, dtype=float).mean(axis=0)
        return out

    return apply


def strong_continuity_statistic(
    strategy: Strategy,
    u_fn: Callable[[float, np.ndarray], np.ndarray],
    shift_levels: int,
    tree: PathTree,
    points: np.ndarray,
    weight: float,
) -> float:
    """Time-integrated squared distance between the shifted and raw field.

    Includes the tail mass of the field on the final stretch of length s,
    where the operator is zero by definition.
    """
    dt = tree.grid.dt
    times = tree.grid.times()
    s = shift_levels * dt
    total = 0.0
    for k0 in range(tree.depth + 1):
        raw = np.asarray(u_fn(times[k0], points), dtype=float)
        if k0 + shift_levels <= tree.depth:
            op = semigroup_apply(strategy, lambda x: u_fn(times[k0] + s, x), times[k0], s, tree)
            diff_sq = (op(points) - raw[None, :]) ** 2
            total += diff_sq.sum(axis=1).mean() * weight * dt
        else:
            total += (raw**2).sum() * weight * dt
    return float(total)


# ---------------------------------------------------------------------------
# penalization


@dataclass
class PenalizedPotential:
    field: ValueField
    increments: list[np.ndarray]
    coeff: list[np.ndarray]
    penalty: float


def penalize_potential(field: ValueField, penalty: float) -> PenalizedPotential:
    """Implicit penalization step toward the candidate potential.

    Backward recursion u_n(T) = 0,
    u_n(t_k) = (E_k[u_n(t_{k+1})] + n dt u(t_k)) / (1 + n dt); the resolvent
    division keeps the step stable for arbitrarily large n.  Increments
    n (u - u_n) dt are nonnegative whenever u is a supermartingale along the
    carrying path.
    """
    if penalty <= 0:
        raise ConfigurationError(f"penalty must be positive, got {penalty}")
    tree = field.tree
    dt = tree.grid.dt
    n_steps = tree.depth
    vals: list[np.ndarray | None] = [None] * (n_steps + 1)
    vals[n_steps] = np.zeros_like(field.values[n_steps])
    increments: list[np.ndarray] = [None] * n_steps
    for k in range(n_steps - 1, -1, -1):
        e = cond_expect_step(tree, vals[k + 1])
        vals[k] = (e + penalty * dt * field.values[k]) / (1.0 + penalty * dt)
        increments[k] = penalty * (field.values[k] - vals[k]) * dt
    out = ValueField(tree, field.bases, vals, field.offsets)
    return PenalizedPotential(out, increments, z_extract(out.as_adapted()), penalty)


# ---------------------------------------------------------------------------
# regular potentials


@dataclass
class RegularPotential:
    """Nonnegative supermartingale field with terminal value zero, decomposed."""

    field: ValueField
    decomposition: PotentialDecomposition
    provenance: str
    energy_residual: np.ndarray
    energy_coeff_gap: float
    reconstruction: float

    @property
    def tree(self) -> PathTree:
        return self.field.tree


def _mean_over_nodes(values: np.ndarray) -> np.ndarray:
    return values.mean(axis=0)


def energy_residuals(field: ValueField, decomp: PotentialDecomposition) -> tuple[np.ndarray, float]:
    """Per-base max-over-time residual of the energy identity, plus the
    coefficient-form gap.

    Identity per base point and level t:
    E[Y_t^2] + sum_{j >= t} E[M_{j+1}^2] = E[(K_N - K_t)^2].
    """
    tree = field.tree
    n = tree.depth
    dt = tree.grid.dt
    mart_sq = [(_mean_over_nodes(decomp.martingale[j] ** 2)) for j in range(1, n + 1)]
    coeff_sq = [
        _mean_over_nodes((decomp.coeff[j] ** 2).sum(axis=-1)) * dt for j in range(n)
    ]
    k_leaf = decomp.increasing[n]
    residual = np.zeros(field.n_bases)
    coeff_gap = 0.0
    for t in range(n + 1):
        lhs = _mean_over_nodes(field.values[t] ** 2)
        tail = sum(mart_sq[j] for j in range(t, n)) if t < n else 0.0
        k_t = decomp.increasing[t]
        expanded = k_t
        for _ in range(n - t):
            expanded = np.repeat(expanded, tree.n_children, axis=0)
        rhs = _mean_over_nodes((k_leaf - expanded) ** 2)
        residual = np.maximum(residual, np.abs(lhs + tail - rhs))
        if t < n:
            coeff_tail = sum(coeff_sq[j] for j in range(t, n))
            coeff_gap = max(coeff_gap, float(np.abs(coeff_tail - tail).max()))
    return residual, coeff_gap


def decompose_potential(
    field: ValueField,
    provenance: str = "difference",
    supermartingale_tol: float = 1e-10,
    nonnegative_tol: float = 1e-10,
) -> RegularPotential:
    """Validate and decompose a candidate potential along its carrying path."""
    terminal_max = float(np.abs(field.values[-1]).max())
    if terminal_max > nonnegative_tol:
        raise PropertyError(f"potential must vanish at the horizon, got max {terminal_max:.3e}")
    low = min(float(v.min()) for v in field.values)
    if low < -nonnegative_tol:
        raise PropertyError(f"potential must be nonnegative, got min {low:.3e}")
    decomp = doob_meyer_decompose(field.as_adapted(), supermartingale_tol)
    residual, coeff_gap = energy_residuals(field, decomp)
    recon = reconstruction_residual(field.as_adapted(), decomp)
    return RegularPotential(field, decomp, provenance, residual, coeff_gap, recon)


def potential_from_gap(
    spec: CostSpec,
    controls: ControlSet,
    strategy: Strategy,
    tree: PathTree,
    bases,
    solution: ValueSolution | None = None,
) -> RegularPotential:
    """Potential built from the excess cost of one strategy over the value."""
    sol = solution or value_backward(spec, controls, tree, bases)
    j = cost_functional(spec, strategy, tree, bases)
    v = sol.field_along(strategy, tree)
    gap = field_difference(j, v)
    return decompose_potential(gap, provenance="difference")


def k_bound_ratio(potential: RegularPotential) -> np.ndarray:
    """Per-base ratio E[K_N^2] / E[sup_k Y_k^2]; finiteness diagnostic."""
    tree = potential.tree
    n = tree.depth
    sup_sq = potential.field.values[0] ** 2
    for k in range(1, n + 1):
        sup_sq = np.repeat(sup_sq, tree.n_children, axis=0)
        sup_sq = np.maximum(sup_sq, potential.field.values[k] ** 2)
    e_sup = _mean_over_nodes(sup_sq)
    e_k_sq = _mean_over_nodes(potential.decomposition.increasing[n] ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(e_sup > 0, e_k_sq / np.maximum(e_sup, 1e-300), 0.0)
    return ratio


def path_continuity_modulus(field: ValueField) -> float:
    """Largest one-step jump along any path; refinement diagnostic."""
    tree = field.tree
    worst = 0.0
    for k in range(tree.depth):
        expanded = np.repeat(field.values[k], tree.n_children, axis=0)
        worst = max(worst, float(np.abs(field.values[k + 1] - expanded).max()))
    return worst


# ---------------------------------------------------------------------------
# random measures


@dataclass
class RandomMeasureView:
    """Increasing-process increments along paths, one column per base point."""

    tree: PathTree
    bases: np.ndarray
    weights: np.ndarray
    increments: list[np.ndarray]
    offsets: list[np.ndarray]

    def total_mass_per_base(self) -> np.ndarray:
        """E[K_T(x)] per base point."""
        total = np.zeros(self.bases.shape[0])
        for k in range(self.tree.depth):
            total += _mean_over_nodes(self.increments[k])
        return total


def measure_view(potential: RegularPotential, weights=None) -> RandomMeasureView:
    field = potential.field
    b = field.n_bases
    w = np.full(b, 1.0) if weights is None else np.asarray(weights, dtype=float).reshape(b)
    return RandomMeasureView(
        tree=potential.tree,
        bases=field.bases,
        weights=w,
        increments=list(potential.decomposition.delta),
        offsets=list(field.offsets[: potential.tree.depth]),
    )


def measure_eval(view: RandomMeasureView, phi, t_start: float = 0.0) -> float:
    """Integral of phi(t, x + path) against the increments, then over bases."""
    k0 = view.tree.grid.level_of(t_start)
    times = view.tree.grid.times()
    per_base = np.zeros(view.bases.shape[0])
    for k in range(k0, view.tree.depth):
        pts = view.bases[None, :, :] + view.offsets[k][:, None, :]
        phi_vals = np.asarray(phi(float(times[k]), pts), dtype=float)
        per_base += _mean_over_nodes(phi_vals * view.increments[k])
    return float((per_base * view.weights).sum())


# ---------------------------------------------------------------------------
# vanishing-infimum certificate


@dataclass
class CertificateRow:
    eps: float
    cell: int
    center: float
    gap: float
    mass: float


@dataclass
class CertificateReport:
    rows: list[CertificateRow]
    aggregated: dict
    bound: dict
    empirical_constant: dict
    passed: bool


def _degrade_table(table: list[np.ndarray], n_controls: int, wrong_levels: int) -> list[np.ndarray]:
    out = []
    for k, row in enumerate(table):
        if k < wrong_levels:
            out.append((row + 1) % n_controls)
        else:
            out.append(row.copy())
    return out


def measure_infimum_certificate(
    spec: CostSpec,
    controls: ControlSet,
    tree: PathTree,
    box_radius: float,
    eps_schedule: Sequence[float],
    degraded: bool = False,
    tolerance: float = 1e-10,
    bound_cap: float = 1.0,
) -> CertificateReport:
    """Aggregate mass of the control-indexed measures under near-optimal play.

    The box is partitioned into cells of radius eps; each cell center gets a
    feedback-optimal strategy (optionally degraded by forcing the wrong
    control on the initial levels of length ~ eps times the horizon).  The
    measure built from the excess-cost potential at the center then has mean
    terminal mass equal to the optimality gap, and the cell-weighted
    aggregate must shrink with eps.
    """
    if not eps_schedule:
        raise ConfigurationError("eps schedule must be nonempty")
    from .controls import open_loop_strategy

    l1 = spec.holder_constant * (1.0 + tree.grid.horizon)
    volume = 2.0 * box_radius
    rows: list[CertificateRow] = []
    aggregated: dict = {}
    bound: dict = {}
    constant: dict = {}
    for eps in eps_schedule:
        if eps <= 0:
            raise ConfigurationError(f"eps must be positive, got {eps}")
        n_cells = max(1, int(math.ceil(box_radius / eps)))
        centers = np.array([-box_radius + (2 * i + 1) * box_radius / n_cells for i in range(n_cells)])
        width = 2.0 * box_radius / n_cells
        solution = solve_value(spec, controls, spec.wiener_dim, tree.grid, centers)
        total = 0.0
        wrong_levels = int(math.ceil(eps / tree.grid.horizon * tree.depth)) if degraded else 0
        for i, center in enumerate(centers):
            sigma = optimal_feedback(solution, tree, i)
            if wrong_levels:
                sigma = open_loop_strategy(
                    controls, _degrade_table(sigma.table, len(controls), wrong_levels)
                )
            j = cost_functional(spec, sigma, tree, [center])
            v_along = solution.field_along(sigma, tree)
            gap_field = ValueField(
                tree,
                np.array([[center]]),
                [j.values[k] - v_along.values[k][:, i : i + 1] for k in range(tree.depth + 1)],
                j.offsets,
            )
            pot = decompose_potential(gap_field, provenance="difference")
            mass = float(measure_view(pot).total_mass_per_base()[0])
            gap = float(j.root_values()[0] - solution.root_values()[i])
            rows.append(CertificateRow(eps, i, float(center), gap, mass))
            total += width * mass
        aggregated[eps] = total
        bound[eps] = (2.0 * l1 + 1.0) * volume * eps**spec.holder_exponent
        constant[eps] = total / bound[eps] if bound[eps] > 0 else math.inf

    eps_sorted = sorted(eps_schedule, reverse=True)
    masses = [aggregated[e] for e in eps_sorted]
    if degraded:
        decreasing = all(masses[i] > masses[i + 1] for i in range(len(masses) - 1))
        within = all(aggregated[e] <= bound[e] * bound_cap for e in eps_schedule)
        passed = decreasing and within
    else:
        passed = all(m <= tolerance for m in masses)
    return CertificateReport(rows, aggregated, bound, constant, passed)


# ---------------------------------------------------------------------------
# gradients and observed-filtration diagnostics


def _uniform_spacing(bases: np.ndarray) -> float:
    if bases.shape[1] != 1 or bases.shape[0] < 3:
        raise ConfigurationError("gradient diagnostics need >= 3 collinear base points")
    diffs = np.diff(bases[:, 0])
    h = float(diffs[0])
    if h <= 0 or np.abs(diffs - h).max() > 1e-9 * max(1.0, abs(h)):
        raise ConfigurationError("base points must form a uniform one-dimensional grid")
    return h


def gradient_norm(field: ValueField, sigma_bar: np.ndarray, levels: Sequence[int] | None = None) -> float:
    """Time-integrated squared norm of the spatial gradient times a matrix.

    Central differences across the base-point axis (one-sided at the edges,
    exact for affine fields); quadrature weight equals the grid spacing.
    """
    h = _uniform_spacing(field.bases)
    sig = np.atleast_2d(np.asarray(sigma_bar, dtype=float))
    col_sq = float(np.square(sig).sum())
    tree = field.tree
    dt = tree.grid.dt
    ks = range(tree.depth) if levels is None else levels
    total = 0.0
    for k in ks:
        du = np.gradient(field.values[k], h, axis=1)
        total += _mean_over_nodes((du**2).sum(axis=1) * h) * col_sq * dt
    return float(total)


def psi_components(field: ValueField, strategy: Strategy) -> list[np.ndarray]:
    """Martingale coefficient minus the gradient transport, per coordinate.

    For fields measurable with respect to the first m0 noise coordinates the
    trailing components must vanish.
    """
    h = _uniform_spacing(field.bases)
    tree = field.tree
    coeff = z_extract(field.as_adapted())
    mats = np.stack(strategy.controls.elements)
    out = []
    for k in range(tree.depth):
        du = np.gradient(field.values[k], h, axis=1)
        idx = strategy.indices_at(tree, k)
        sig = mats[idx][:, 0, :]  # state dimension 1
        out.append(coeff[k] - du[:, :, None] * sig[:, None, :])
    return out


# ---------------------------------------------------------------------------
# weak-form diagnostic (reported, not asserted at fixed tolerance)


def weak_form_residual(
    spec: CostSpec,
    controls: ControlSet,
    control_index: int,
    tree: PathTree,
    box_radius: float,
    spacing: float,
    phi,
    dphi_dt,
    d2phi_dx2,
) -> float:
    """Expectation form of the variational identity for the excess-cost
    potential of a constant Markovian strategy; returns |lhs - rhs|.

    The deterministic potential u = J - V is read at the base points, the
    measure side from the path decomposition; the balance closes at first
    order in dt and second order in the grid spacing.
    """
    if spec.observed_dim != 0 or spec.state_dim != 1:
        raise ConfigurationError("weak-form diagnostic supports Markovian 1-d problems")
    n_pts = int(round(2 * box_radius / spacing))
    xs = -box_radius + (np.arange(n_pts) + 0.5) * spacing
    sigma = constant_strategy(controls, control_index)
    sol_v = solve_value(spec, controls, spec.wiener_dim, tree.grid, xs)
    sol_j = solve_value(
        spec, ControlSet((controls[control_index],)), spec.wiener_dim, tree.grid, xs
    )
    v_base = sol_v.field_at_base(tree)
    j_base = sol_j.field_at_base(tree)
    u_base = [j_base.values[k].mean(axis=0) - v_base.values[k].mean(axis=0) for k in range(tree.depth + 1)]

    times = tree.grid.times()
    dt = tree.grid.dt
    s2 = float((controls[control_index] @ controls[control_index].T)[0, 0])
    lhs = float((u_base[0] * phi(0.0, xs)).sum() * spacing)
    for k in range(tree.depth):
        integrand = u_base[k] * (dphi_dt(times[k], xs) - 0.5 * s2 * d2phi_dx2(times[k], xs))
        lhs += float(integrand.sum() * spacing) * dt

    pot = potential_from_gap(spec, controls, sigma, tree, xs, solution=sol_v)
    view = measure_view(pot, weights=np.full(n_pts, spacing))
    rhs = measure_eval(view, lambda t, pts: phi(t, pts[..., 0]), 0.0)
    return abs(lhs - rhs)
