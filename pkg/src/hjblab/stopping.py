"""Snell envelopes, penalized reflection and reflected backward problems.

The envelope recursion excludes the obstacle at the terminal level (stopping
exactly at the horizon pays the terminal data, not the obstacle), so pure
envelopes need a nonpositive terminal obstacle and the reflected problem
needs the obstacle dominated by the terminal condition at the horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .controls import Strategy, controlled_state
from .errors import ConfigurationError, ObstacleError, SizeBudgetError
from .lattice import PathTree, cond_expect_step
from .potential import (
    LinearSolution,
    RegularPotential,
    decompose_potential,
    measure_view,
    solve_linear_shifted,
)
from .value import ValueField, as_base_points


@dataclass
class ObstacleSpec:
    """Obstacle and optional (running, terminal) data for reflection.

    ``obstacle(t, x, w)`` is vectorized over x like running costs; ``w`` is
    the observed-path prefix (ignored when observed_dim == 0).
    """

    obstacle: Callable
    running: Callable | None = None
    terminal: Callable | None = None
    observed_dim: int = 0


def _obstacle_values(
    spec: ObstacleSpec, tree: PathTree, level: int, t: float, pts: np.ndarray
) -> np.ndarray:
    if spec.observed_dim == 0:
        return np.asarray(spec.obstacle(t, pts, None), dtype=float)
    wp = tree.wiener_paths(level)[:, :, : spec.observed_dim]
    out = np.empty(pts.shape[:-1])
    for node in range(pts.shape[0]):
        out[node] = spec.obstacle(t, pts[node], wp[node])
    return out


def obstacle_field(
    spec: ObstacleSpec, strategy: Strategy, tree: PathTree, bases
) -> ValueField:
    """Obstacle evaluated along the controlled path, as a field."""
    base_pts = as_base_points(bases, strategy.controls.state_dim)
    x = controlled_state(strategy, tree)
    times = tree.grid.times()
    vals = []
    for k in range(tree.depth + 1):
        pts = base_pts[None, :, :] + x.values[k][:, None, :]
        vals.append(_obstacle_values(spec, tree, k, float(times[k]), pts))
    return ValueField(tree, base_pts, vals, list(x.values))


def snell_backward(
    strategy: Strategy,
    spec: ObstacleSpec,
    tree: PathTree,
    bases,
    terminal_tol: float = 1e-12,
) -> RegularPotential:
    """Least supermartingale above the obstacle, stopped before the horizon.

    Recursion E_N = 0, E_k = max(obstacle_k, E_k[E_{k+1}]).  The contact
    structure makes the reflection measure charge only {envelope = obstacle},
    so the complementarity residual vanishes identically.
    """
    xi = obstacle_field(spec, strategy, tree, bases)
    if float(xi.values[-1].max()) > terminal_tol:
        raise ObstacleError(
            f"obstacle must be <= 0 at the horizon, got max {float(xi.values[-1].max()):.3e}"
        )
    n = tree.depth
    vals: list[np.ndarray | None] = [None] * (n + 1)
    vals[n] = np.zeros_like(xi.values[n])
    for k in range(n - 1, -1, -1):
        vals[k] = np.maximum(xi.values[k], cond_expect_step(tree, vals[k + 1]))
    field = ValueField(tree, xi.bases, vals, xi.offsets)
    return decompose_potential(field, provenance="envelope")


def skorohod_residual(potential: RegularPotential, xi: ValueField) -> float:
    """Max over bases of E sum (u - obstacle) dK; zero on the contact set."""
    tree = potential.tree
    worst = 0.0
    for k in range(tree.depth):
        gap = potential.field.values[k] - xi.values[k]
        contrib = (gap * potential.decomposition.delta[k]).mean(axis=0)
        worst = max(worst, float(np.abs(contrib).max()))
    return worst


def snell_penalized(
    strategy: Strategy,
    spec: ObstacleSpec,
    penalty: float,
    tree: PathTree,
    bases,
) -> ValueField:
    """Implicit penalization of the reflection constraint.

    Where the conditional continuation already clears the obstacle the step
    is plain; otherwise the resolvent pulls the value toward the obstacle:
    u_n(t_k) = (e + n dt obstacle_k) / (1 + n dt) with e the continuation.
    Nondecreasing in n and below the envelope.
    """
    if penalty <= 0:
        raise ConfigurationError(f"penalty must be positive, got {penalty}")
    xi = obstacle_field(spec, strategy, tree, bases)
    n_levels = tree.depth
    dt = tree.grid.dt
    vals: list[np.ndarray | None] = [None] * (n_levels + 1)
    vals[n_levels] = np.zeros_like(xi.values[n_levels])
    for k in range(n_levels - 1, -1, -1):
        e = cond_expect_step(tree, vals[k + 1])
        pulled = (e + penalty * dt * xi.values[k]) / (1.0 + penalty * dt)
        vals[k] = np.where(e >= xi.values[k], e, pulled)
    return ValueField(tree, xi.bases, vals, xi.offsets)


def stopping_rule_values(tree: PathTree, xi: ValueField, budget: int = 1 << 10):
    """All expected rewards E[xi(tau) 1_{tau < T}] over adapted stopping rules.

    Literal enumeration (stop now, or recurse over every combination of the
    children's rules); the envelope must equal the maximum of this list.
    """

    def count(level: int) -> int:
        if level == tree.depth:
            return 1
        return 1 + count(level + 1) ** tree.n_children

    total = count(0)
    if total > budget:
        raise SizeBudgetError(f"{total} stopping rules exceed budget {budget}")

    def rules(level: int, node: int) -> list[np.ndarray]:
        stop_now = xi.values[level][node]
        if level == tree.depth:
            return [np.zeros_like(stop_now)]
        child_lists = [
            rules(level + 1, node * tree.n_children + c) for c in range(tree.n_children)
        ]
        out = [stop_now]
        mean_w = 0.5**tree.m
        combos: list[np.ndarray] = [np.zeros_like(stop_now)]
        for lst in child_lists:
            combos = [acc + v for acc in combos for v in lst]
        out.extend(mean_w * c for c in combos)
        return out

    return rules(0, 0)


@dataclass
class ReflectedSolution:
    field: ValueField
    linear_part: LinearSolution
    envelope: RegularPotential
    coeff: list[np.ndarray]
    skorohod: float
    min_gap: float

    def measure(self):
        return measure_view(self.envelope)


def reflected_solve(
    strategy: Strategy,
    spec: ObstacleSpec,
    tree: PathTree,
    bases,
    terminal_tol: float = 1e-9,
) -> ReflectedSolution:
    """Reflected backward problem with running data, terminal data and an
    obstacle, split into a linear part plus the envelope of the residual
    obstacle.

    Requires obstacle <= terminal data at the horizon.  The reflection
    measure is carried by the envelope part and charges only the contact
    set; the solution dominates the obstacle everywhere.
    """
    base_pts = as_base_points(bases, strategy.controls.state_dim)
    lin = solve_linear_shifted(
        strategy, spec.running, spec.terminal, tree, base_pts, spec.observed_dim
    )
    xi = obstacle_field(spec, strategy, tree, base_pts)
    over = float((xi.values[-1] - lin.field.values[-1]).max())
    if over > terminal_tol:
        raise ObstacleError(
            f"obstacle exceeds the terminal data at the horizon by {over:.3e}"
        )
    # envelope of (obstacle - linear part), assembled directly from the fields
    shifted_vals = [xi.values[k] - lin.field.values[k] for k in range(tree.depth + 1)]
    n = tree.depth
    env_vals: list[np.ndarray | None] = [None] * (n + 1)
    env_vals[n] = np.zeros_like(shifted_vals[n])
    for k in range(n - 1, -1, -1):
        env_vals[k] = np.maximum(shifted_vals[k], cond_expect_step(tree, env_vals[k + 1]))
    env_field = ValueField(tree, base_pts, env_vals, xi.offsets)
    envelope = decompose_potential(env_field, provenance="envelope")

    u_vals = [lin.field.values[k] + env_vals[k] for k in range(n + 1)]
    field = ValueField(tree, base_pts, u_vals, xi.offsets)
    coeff = [
        lin.coeff[k] + envelope.decomposition.coeff[k] for k in range(n)
    ]
    worst = 0.0
    for k in range(n):
        gap = field.values[k] - xi.values[k]
        contrib = (gap * envelope.decomposition.delta[k]).mean(axis=0)
        worst = max(worst, float(np.abs(contrib).max()))
    min_gap = min(float((field.values[k] - xi.values[k]).min()) for k in range(n + 1))
    return ReflectedSolution(field, lin, envelope, coeff, worst, min_gap)
