"""Cost functionals and value functions by exact backward recursion.

Two independent routes compute the value of the control problem:

* ``value_backward`` runs dynamic programming over (level, observed-noise
  prefix, spatial offset).  Offsets are tracked as integer combinations of
  the control columns scaled by sqrt(dt), so reachable points are stored
  exactly, recombine whenever control steps are commensurate, and no spatial
  interpolation ever happens.  A zero offset is seeded at every level so the
  value at the raw base points is always available.
* ``value_bruteforce`` enumerates every open-loop adapted strategy and takes
  a literal pointwise minimum of path sums.  It shares no recursion code
  with the backward route and serves as its oracle on small trees.

Stored tables are read out either at the base points (``field_at_base``) or
along the controlled path of one strategy (``field_along``), which is the
carrier for every supermartingale and potential construction downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .controls import (
    ControlSet,
    Strategy,
    controlled_state,
    enumerate_strategies,
    open_loop_strategy,
)
from .errors import ConfigurationError, SizeBudgetError, StrategyError
from .lattice import AdaptedProcess, PathTree, TimeGrid, cond_expect_step
from .problems import CostSpec

DEFAULT_WORK_BUDGET = 500_000_000


def as_base_points(bases, d: int) -> np.ndarray:
    pts = np.asarray(bases, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts[:, None] if d == 1 else pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != d:
        raise ConfigurationError(f"base points must have shape (B, {d}), got {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# offset lattice


def _float_gcd(values: Sequence[float], tol: float = 1e-9) -> float:
    g = 0.0
    for v in values:
        a, b = g, abs(float(v))
        while b > tol:
            a, b = b, math.fmod(a, b)
        g = a
    return g


class _OffsetBasis:
    """Integer coordinates for reachable offsets.

    Generic mode uses one integer per (control, noise column); when the
    problem is one-dimensional and the control entries share a common
    divisor, coordinates collapse to a single integer so commensurate steps
    recombine.
    """

    def __init__(self, controls: ControlSet, dt: float):
        d, m = controls.state_dim, controls.wiener_dim
        self.sqdt = math.sqrt(dt)
        self.n_controls = len(controls)
        self.m = m
        reduced = None
        if d == 1:
            entries = [controls[v][0, j] for v in range(len(controls)) for j in range(m)]
            nonzero = [abs(e) for e in entries if abs(e) > 0]
            if not nonzero:
                reduced = (1.0, np.zeros((len(controls), m), dtype=np.int64))
            else:
                g = _float_gcd(nonzero)
                if g > 1e-9 * max(nonzero):
                    mult = np.array(
                        [[round(controls[v][0, j] / g) for j in range(m)] for v in range(len(controls))],
                        dtype=np.int64,
                    )
                    exact = all(
                        abs(mult[v, j] * g - controls[v][0, j]) <= 1e-12 * max(1.0, abs(controls[v][0, j]))
                        for v in range(len(controls))
                        for j in range(m)
                    )
                    if exact and np.abs(mult).max() <= 64:
                        reduced = (g, mult)
        signs = np.empty((2**m, m), dtype=np.int64)
        for c in range(2**m):
            for j in range(m):
                signs[c, j] = 1 if (c >> j) & 1 else -1
        if reduced is not None:
            g, mult = reduced
            self.width = 1
            self.generator = np.array([[g]])  # (P, d)
            self.delta = np.einsum("vj,cj->vc", mult, signs)[:, :, None]  # (nu, 2^m, 1)
        else:
            self.width = self.n_controls * m
            gen = np.zeros((self.width, d))
            for v in range(self.n_controls):
                for j in range(m):
                    gen[v * m + j] = controls[v][:, j]
            self.generator = gen
            delta = np.zeros((self.n_controls, 2**m, self.width), dtype=np.int64)
            for v in range(self.n_controls):
                for c in range(2**m):
                    for j in range(m):
                        delta[v, c, v * m + j] = signs[c, j]
            self.delta = delta

    def vectors(self, keys: np.ndarray) -> np.ndarray:
        return self.sqdt * (keys.astype(float) @ self.generator)

    def advance(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
        """Grow the key set by one step, keeping a zero-offset seed.

        Returns (new_keys, next_index, zero_row) with ``next_index`` of shape
        (n_controls, n_keys, 2^m) indexing rows of ``new_keys``.
        """
        nu, nc, P = self.n_controls, self.delta.shape[1], self.width
        cand = keys[None, :, None, :] + self.delta[:, None, :, :]
        flat = np.concatenate([cand.reshape(-1, P), np.zeros((1, P), dtype=np.int64)])
        new_keys, inverse = np.unique(flat, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        next_index = inverse[:-1].reshape(nu, keys.shape[0], nc)
        return new_keys, next_index, int(inverse[-1])


# ---------------------------------------------------------------------------
# solution containers


@dataclass
class ValueField:
    """Values per (level, tree node, base point), plus the evaluation offsets.

    ``values[k]`` has shape (nodes_k, B); the entry is the field at
    ``bases[b] + offsets[k][node]``.  A field "at base" has zero offsets; a
    field "along" a strategy carries that strategy's controlled state.
    """

    tree: PathTree
    bases: np.ndarray
    values: list[np.ndarray]
    offsets: list[np.ndarray]
    argmin: list[np.ndarray] | None = None

    @property
    def n_bases(self) -> int:
        return self.bases.shape[0]

    def as_adapted(self) -> AdaptedProcess:
        return AdaptedProcess(self.tree, self.values)

    def root_values(self) -> np.ndarray:
        return self.values[0][0]

    def points(self, level: int) -> np.ndarray:
        """Evaluation points at a level: (nodes, B, d)."""
        return self.bases[None, :, :] + self.offsets[level][:, None, :]


def field_difference(a: ValueField, b: ValueField) -> ValueField:
    if a.tree is not b.tree or a.bases.shape != b.bases.shape:
        raise ConfigurationError("fields live on different trees or base sets")
    vals = [va - vb for va, vb in zip(a.values, b.values)]
    return ValueField(a.tree, a.bases, vals, a.offsets)


@dataclass
class ValueSolution:
    """Backward dynamic-programming tables over (prefix, offset, base)."""

    spec: CostSpec
    controls: ControlSet
    wiener_dim: int
    grid: TimeGrid
    bases: np.ndarray
    keys: list[np.ndarray]
    offsets: list[np.ndarray]
    zero_row: list[int]
    next_index: list[np.ndarray]
    values: list[np.ndarray]
    argmin: list[np.ndarray]
    wpaths: list[np.ndarray]

    def root_values(self) -> np.ndarray:
        """V(0, x_b) for every base point."""
        return self.values[0][0, self.zero_row[0], :]

    def _tilde_prefixes(self, tree: PathTree) -> list[np.ndarray]:
        m0 = self.spec.observed_dim
        out = [np.zeros(1, dtype=np.int64)]
        mask = (1 << m0) - 1
        for k in range(tree.depth):
            pats = np.arange(tree.n_children, dtype=np.int64) & mask
            nxt = (np.repeat(out[k], tree.n_children) << m0) | np.tile(pats, tree.level_size(k))
            out.append(nxt)
        return out

    def field_at_base(self, tree: PathTree) -> ValueField:
        """Unshifted read-out V(t_k, x_b) per tree node."""
        self._check_tree(tree)
        ptilde = self._tilde_prefixes(tree)
        vals, args = [], []
        for k in range(tree.depth + 1):
            vals.append(self.values[k][ptilde[k], self.zero_row[k], :])
            if k < tree.depth:
                args.append(self.argmin[k][ptilde[k], self.zero_row[k], :])
        offsets = [np.zeros((tree.level_size(k), self.bases.shape[1])) for k in range(tree.depth + 1)]
        return ValueField(tree, self.bases, vals, offsets, argmin=args)

    def field_along(self, strategy: Strategy, tree: PathTree) -> ValueField:
        """Read-out along one strategy's controlled path."""
        self._check_tree(tree)
        if strategy.kind == "feedback":
            raise StrategyError("materialize feedback strategies before taking a path view")
        ptilde = self._tilde_prefixes(tree)
        m0 = self.spec.observed_dim
        oidx = np.array([self.zero_row[0]], dtype=np.int64)
        vals = [self.values[0][ptilde[0], oidx, :]]
        args: list[np.ndarray] = []
        offs = [self.offsets[0][oidx]]
        for k in range(tree.depth):
            v = strategy.indices_at(tree, k)
            args.append(self.argmin[k][ptilde[k], oidx, :])
            oidx = self.next_index[k][v[:, None], oidx[:, None], np.arange(tree.n_children)[None, :]]
            oidx = oidx.reshape(-1)
            vals.append(self.values[k + 1][ptilde[k + 1], oidx, :])
            offs.append(self.offsets[k + 1][oidx])
        return ValueField(tree, self.bases, vals, offs, argmin=args)

    def _check_tree(self, tree: PathTree) -> None:
        if tree.m != self.wiener_dim or tree.grid.steps != self.grid.steps:
            raise ConfigurationError("tree does not match the solved problem dimensions")


# ---------------------------------------------------------------------------
# dynamic programming core


def _observed_paths(m0: int, steps: int, dt: float) -> list[np.ndarray]:
    """Per level: observed-walk values (n_prefixes, level+1, m0)."""
    sq = math.sqrt(dt)
    signs = np.empty((2**m0, m0))
    for c in range(2**m0):
        for j in range(m0):
            signs[c, j] = 1.0 if (c >> j) & 1 else -1.0
    out = [np.zeros((1, 1, m0))]
    for k in range(steps):
        prev = out[k]
        n_prev = prev.shape[0]
        nxt = np.empty((n_prev * 2**m0, k + 2, m0))
        nxt[:, : k + 1, :] = np.repeat(prev, 2**m0, axis=0)
        nxt[:, k + 1, :] = nxt[:, k, :] + sq * np.tile(signs, (n_prev, 1))
        out.append(nxt)
    return out


def solve_value(
    spec: CostSpec,
    controls: ControlSet,
    wiener_dim: int,
    grid: TimeGrid,
    bases,
    work_budget: int = DEFAULT_WORK_BUDGET,
) -> ValueSolution:
    """Backward dynamic programming; exact on the lattice of reachable offsets."""
    if controls.state_dim != spec.state_dim or controls.wiener_dim != wiener_dim:
        raise ConfigurationError(
            f"controls are {controls.state_dim}x{controls.wiener_dim}, problem needs "
            f"{spec.state_dim}x{wiener_dim}"
        )
    base_pts = as_base_points(bases, spec.state_dim)
    n_bases = base_pts.shape[0]
    m0 = spec.observed_dim
    nu = len(controls)
    n_steps = grid.steps
    dt = grid.dt
    basis = _OffsetBasis(controls, dt)

    keys = [np.zeros((1, basis.width), dtype=np.int64)]
    next_index: list[np.ndarray] = []
    zero_row = [0]
    work = 0
    for k in range(n_steps):
        new_keys, nxt, zrow = basis.advance(keys[k])
        keys.append(new_keys)
        next_index.append(nxt)
        zero_row.append(zrow)
        work += (2**m0) ** (k + 1) * new_keys.shape[0] * n_bases * nu
        if work > work_budget:
            raise SizeBudgetError(
                f"value recursion needs more than {work_budget} updates "
                f"(level {k + 1}: {new_keys.shape[0]} offsets, {(2**m0) ** (k + 1)} prefixes)"
            )
    offsets = [basis.vectors(kk) for kk in keys]
    wpaths = _observed_paths(m0, n_steps, dt) if m0 > 0 else [np.zeros((1, k + 1, 0)) for k in range(n_steps + 1)]

    times = grid.times()
    mats = controls.elements
    values: list[np.ndarray | None] = [None] * (n_steps + 1)
    argmins: list[np.ndarray | None] = [None] * n_steps

    n_p = (2**m0) ** n_steps
    pts = base_pts[None, :, :] + offsets[n_steps][:, None, :]
    term = np.empty((n_p, keys[n_steps].shape[0], n_bases))
    for p in range(n_p):
        w = wpaths[n_steps][p] if m0 > 0 else None
        term[p] = spec.terminal(pts, w)
    values[n_steps] = term

    child_mask = (1 << m0) - 1
    mean_w = 0.5**wiener_dim
    for k in range(n_steps - 1, -1, -1):
        n_p = (2**m0) ** k
        n_off = keys[k].shape[0]
        pts = base_pts[None, :, :] + offsets[k][:, None, :]
        level_vals = np.empty((n_p, n_off, n_bases))
        level_args = np.empty((n_p, n_off, n_bases), dtype=np.int64)
        nxt_vals = values[k + 1]
        for p in range(n_p):
            w = wpaths[k][p] if m0 > 0 else None
            cand = np.empty((nu, n_off, n_bases))
            for v in range(nu):
                fv = np.asarray(spec.running(float(times[k]), pts, mats[v], w), dtype=float)
                cont = np.zeros((n_off, n_bases))
                for c in range(2**wiener_dim):
                    cp = (p << m0) | (c & child_mask)
                    cont += nxt_vals[cp][next_index[k][v, :, c], :]
                cand[v] = fv * dt + mean_w * cont
            level_vals[p] = cand.min(axis=0)
            level_args[p] = cand.argmin(axis=0)
        values[k] = level_vals
        argmins[k] = level_args

    return ValueSolution(
        spec=spec,
        controls=controls,
        wiener_dim=wiener_dim,
        grid=grid,
        bases=base_pts,
        keys=keys,
        offsets=offsets,
        zero_row=zero_row,
        next_index=next_index,
        values=values,
        argmin=argmins,
        wpaths=wpaths,
    )


def value_backward(
    spec: CostSpec,
    controls: ControlSet,
    tree: PathTree,
    bases,
    work_budget: int = DEFAULT_WORK_BUDGET,
) -> ValueSolution:
    if tree.m != spec.wiener_dim:
        raise ConfigurationError(f"tree has m={tree.m}, problem declares m={spec.wiener_dim}")
    return solve_value(spec, controls, tree.m, tree.grid, bases, work_budget)


def value_recombining(
    spec: CostSpec,
    controls: ControlSet,
    grid: TimeGrid,
    bases,
    work_budget: int = DEFAULT_WORK_BUDGET,
) -> ValueSolution:
    """Large-step-count entry point; no tree views, tables only.

    Only worthwhile when offsets recombine (control steps commensurate) and
    the problem is Markovian or nearly so; the budget guard rejects the rest.
    """
    return solve_value(spec, controls, spec.wiener_dim, grid, bases, work_budget)


# ---------------------------------------------------------------------------
# cost functional along one strategy


def _terminal_values(spec: CostSpec, tree: PathTree, pts: np.ndarray) -> np.ndarray:
    if not spec.path_dependent:
        return np.asarray(spec.terminal(pts, None), dtype=float)
    wp = tree.wiener_paths(tree.depth)[:, :, : spec.observed_dim]
    out = np.empty(pts.shape[:-1])
    for n in range(pts.shape[0]):
        out[n] = spec.terminal(pts[n], wp[n])
    return out


def _running_values(
    spec: CostSpec,
    tree: PathTree,
    level: int,
    t: float,
    pts: np.ndarray,
    idx: np.ndarray,
    mats,
    node_offset: int = 0,
) -> np.ndarray:
    """Running cost per node; ``node_offset`` locates pts[0] within the level."""
    out = np.empty(pts.shape[:-1])
    if not spec.path_dependent:
        for v in np.unique(idx):
            mask = idx == v
            out[mask] = spec.running(t, pts[mask], mats[v], None)
        return out
    wp = tree.wiener_paths(level)[:, :, : spec.observed_dim]
    for n in range(pts.shape[0]):
        out[n] = spec.running(t, pts[n], mats[idx[n]], wp[node_offset + n])
    return out


def cost_functional(spec: CostSpec, strategy: Strategy, tree: PathTree, bases) -> ValueField:
    """Expected cost-to-go along the strategy's controlled path.

    ``values[k][node, b]`` is the conditional expected cost from time t_k at
    the point ``bases[b] + X_k(node)``, computed by one backward sweep with
    cost evaluations exactly at the shifted arguments.
    """
    if strategy.kind == "feedback":
        raise StrategyError("materialize feedback strategies (they are base-point specific)")
    base_pts = as_base_points(bases, spec.state_dim)
    x = controlled_state(strategy, tree)
    mats = strategy.controls.elements
    times = tree.grid.times()
    dt = tree.grid.dt
    n = tree.depth

    vals: list[np.ndarray | None] = [None] * (n + 1)
    pts = base_pts[None, :, :] + x.values[n][:, None, :]
    vals[n] = _terminal_values(spec, tree, pts)
    for k in range(n - 1, -1, -1):
        pts = base_pts[None, :, :] + x.values[k][:, None, :]
        idx = strategy.indices_at(tree, k)
        fv = _running_values(spec, tree, k, float(times[k]), pts, idx, mats)
        vals[k] = fv * dt + cond_expect_step(tree, vals[k + 1])
    return ValueField(tree, base_pts, vals, list(x.values))


def running_cost_along(spec: CostSpec, strategy: Strategy, tree: PathTree, field: ValueField) -> list[np.ndarray]:
    """f(t_k, base + X_k, control at node) per level, on the field's offsets."""
    mats = strategy.controls.elements
    times = tree.grid.times()
    out = []
    for k in range(tree.depth):
        pts = field.points(k)
        idx = strategy.indices_at(tree, k)
        out.append(_running_values(spec, tree, k, float(times[k]), pts, idx, mats))
    return out


# ---------------------------------------------------------------------------
# brute-force oracle


def value_bruteforce(
    spec: CostSpec,
    controls: ControlSet,
    tree: PathTree,
    bases,
    budget: int = 1 << 10,
) -> ValueField:
    """Pointwise minimum of literal path sums over every open-loop strategy.

    Values are the cost-to-go from the raw base points (zero offsets); no
    recursion machinery is shared with the backward solver.
    """
    base_pts = as_base_points(bases, spec.state_dim)
    n = tree.depth
    n_bases = base_pts.shape[0]
    mats = controls.elements
    times = tree.grid.times()
    dt = tree.grid.dt
    best = [np.full((tree.level_size(k), n_bases), np.inf) for k in range(n + 1)]

    for strategy in enumerate_strategies(tree, controls, budget):
        x = controlled_state(strategy, tree)
        for k in range(n + 1):
            for node in range(tree.level_size(k)):
                acc = np.zeros((1, n_bases))
                for j in range(k, n):
                    block = tree.n_children ** (j - k)
                    lo = node * block
                    desc_pts = (
                        base_pts[None, :, :]
                        + x.values[j][lo : lo + block, None, :]
                        - x.values[k][node, None, None, :]
                    )
                    idx = strategy.table[j][lo : lo + block]
                    fv = _running_values(
                        spec, tree, j, float(times[j]), desc_pts, idx, mats, node_offset=lo
                    )
                    acc = np.repeat(acc + fv * dt, tree.n_children, axis=0)
                block = tree.n_children ** (n - k)
                lo = node * block
                leaf_pts = (
                    base_pts[None, :, :]
                    + x.values[n][lo : lo + block, None, :]
                    - x.values[k][node, None, None, :]
                )
                gv = _terminal_bruteforce(spec, tree, leaf_pts, lo)
                total = (acc + gv).mean(axis=0)
                best[k][node] = np.minimum(best[k][node], total)
    offsets = [np.zeros((tree.level_size(k), spec.state_dim)) for k in range(n + 1)]
    return ValueField(tree, base_pts, best, offsets)


def _terminal_bruteforce(spec: CostSpec, tree: PathTree, pts: np.ndarray, leaf_lo: int) -> np.ndarray:
    if not spec.path_dependent:
        return np.asarray(spec.terminal(pts, None), dtype=float)
    wp = tree.wiener_paths(tree.depth)[:, :, : spec.observed_dim]
    out = np.empty(pts.shape[:-1])
    for i in range(pts.shape[0]):
        out[i] = spec.terminal(pts[i], wp[leaf_lo + i])
    return out


# ---------------------------------------------------------------------------
# feedback extraction


def optimal_feedback(solution: ValueSolution, tree: PathTree, base_index: int) -> Strategy:
    """Open-loop strategy reading the stored argmin along each path.

    Ties were already broken toward the lowest control index by the solver.
    """
    if solution.argmin is None or any(a is None for a in solution.argmin):
        raise ConfigurationError("solution carries no argmin data")
    solution._check_tree(tree)
    m0 = solution.spec.observed_dim
    mask = (1 << m0) - 1
    pidx = np.zeros(1, dtype=np.int64)
    oidx = np.array([solution.zero_row[0]], dtype=np.int64)
    table = []
    pats = np.arange(tree.n_children, dtype=np.int64)
    for k in range(tree.depth):
        v = solution.argmin[k][pidx, oidx, base_index]
        table.append(v.astype(np.int64))
        oidx = solution.next_index[k][v[:, None], oidx[:, None], pats[None, :]].reshape(-1)
        pidx = ((pidx[:, None] << m0) | (pats & mask)[None, :]).reshape(-1)
    return open_loop_strategy(solution.controls, table)
