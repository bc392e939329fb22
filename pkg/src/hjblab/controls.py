"""Finite control sets, adapted strategies and controlled state processes."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, GridError, SizeBudgetError, StrategyError
from .lattice import AdaptedProcess, PathTree

DEFAULT_ENUMERATION_BUDGET = 1 << 17


@dataclass(frozen=True)
class ControlSet:
    """Nonempty ordered list of d x m matrices with a finite norm bound."""

    elements: tuple[np.ndarray, ...]
    state_dim: int = field(init=False)
    wiener_dim: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.elements:
            raise ConfigurationError("control set must be nonempty")
        mats = tuple(np.atleast_2d(np.asarray(e, dtype=float)) for e in self.elements)
        d, m = mats[0].shape
        for mat in mats:
            if mat.shape != (d, m):
                raise ConfigurationError(
                    f"control matrices must share one shape, got {mat.shape} vs {(d, m)}"
                )
            mat.setflags(write=False)
        object.__setattr__(self, "elements", mats)
        object.__setattr__(self, "state_dim", d)
        object.__setattr__(self, "wiener_dim", m)

    def __len__(self) -> int:
        return len(self.elements)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.elements[i]

    @property
    def bound(self) -> float:
        return max(float(np.linalg.norm(e)) for e in self.elements)

    @staticmethod
    def from_values(values: Sequence, d: int = 1, m: int = 1) -> "ControlSet":
        """Build from scalars (d = m = 1) or nested row-major lists."""
        mats = []
        for v in values:
            arr = np.asarray(v, dtype=float)
            if arr.ndim == 0:
                arr = arr.reshape(1, 1)
            elif arr.ndim == 1:
                arr = arr.reshape(d, m)
            mats.append(arr)
        return ControlSet(tuple(mats))


@dataclass
class Strategy:
    """Adapted piecewise-constant control, one choice per non-terminal node.

    kinds:
      constant  — one control index used everywhere
      open_loop — explicit table: ``table[k][node]`` is a control index
      feedback  — ``rule(k, x) -> index`` evaluated at the controlled state
    """

    controls: ControlSet
    kind: str
    index: int | None = None
    table: list[np.ndarray] | None = None
    rule: Callable[[int, np.ndarray], int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "open_loop", "feedback"):
            raise StrategyError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "constant":
            if self.index is None or not (0 <= self.index < len(self.controls)):
                raise StrategyError(f"constant strategy needs a valid index, got {self.index}")
        if self.kind == "open_loop":
            if self.table is None:
                raise StrategyError("open-loop strategy needs a table")
            for k, row in enumerate(self.table):
                if np.any(row < 0) or np.any(row >= len(self.controls)):
                    raise StrategyError(f"control index out of range at level {k}")
        if self.kind == "feedback" and self.rule is None:
            raise StrategyError("feedback strategy needs a rule")

    def indices_at(self, tree: PathTree, level: int, x: np.ndarray | None = None) -> np.ndarray:
        """Control index per node at ``level``; feedback needs the state x."""
        n = tree.level_size(level)
        if self.kind == "constant":
            return np.full(n, self.index, dtype=np.int64)
        if self.kind == "open_loop":
            if self.table is None or level >= len(self.table):
                raise StrategyError(f"open-loop table missing level {level}")
            row = self.table[level]
            if row.shape[0] != n:
                raise StrategyError(
                    f"open-loop table at level {level} has {row.shape[0]} entries, expected {n}"
                )
            return row
        if x is None:
            raise StrategyError("feedback strategy needs the state to pick controls")
        return np.array([self.rule(level, x[i]) for i in range(n)], dtype=np.int64)


def constant_strategy(controls: ControlSet, index: int) -> Strategy:
    return Strategy(controls, "constant", index=index)


def open_loop_strategy(controls: ControlSet, table: Sequence[np.ndarray]) -> Strategy:
    return Strategy(controls, "open_loop", table=[np.asarray(t, dtype=np.int64) for t in table])


def feedback_strategy(controls: ControlSet, rule) -> Strategy:
    return Strategy(controls, "feedback", rule=rule)


def controlled_state(
    strategy: Strategy, tree: PathTree, base: np.ndarray | None = None
) -> AdaptedProcess:
    """State X driven by the strategy: X_0 = 0, dX = control . dW.

    ``base`` is only consulted by feedback rules, which see base + X.
    """
    d = strategy.controls.state_dim
    if strategy.controls.wiener_dim != tree.m:
        raise StrategyError(
            f"control set drives {strategy.controls.wiener_dim} noise coordinates, tree has {tree.m}"
        )
    if strategy.kind == "feedback" and base is None:
        raise StrategyError("feedback strategy needs a base point")
    base_vec = np.zeros(d) if base is None else np.asarray(base, dtype=float).reshape(d)
    values = [np.zeros((1, d))]
    mats = np.stack(strategy.controls.elements)
    for k in range(tree.depth):
        idx = strategy.indices_at(tree, k, base_vec[None, :] + values[k])
        steps = np.einsum("ndm,cm->ncd", mats[idx], tree.increments)
        nxt = values[k][:, None, :] + steps
        values.append(nxt.reshape(-1, d))
    return AdaptedProcess(tree, values)


def materialize(strategy: Strategy, tree: PathTree, base: np.ndarray | None = None) -> Strategy:
    """Open-loop table equivalent to the strategy on this tree."""
    if strategy.kind == "open_loop":
        return strategy
    if strategy.kind == "constant":
        table = [np.full(tree.level_size(k), strategy.index, dtype=np.int64) for k in range(tree.depth)]
        return open_loop_strategy(strategy.controls, table)
    x = controlled_state(strategy, tree, base)
    d = strategy.controls.state_dim
    base_vec = np.asarray(base, dtype=float).reshape(d)
    table = [
        strategy.indices_at(tree, k, base_vec[None, :] + x.values[k]) for k in range(tree.depth)
    ]
    return open_loop_strategy(strategy.controls, table)


def concat_strategy(
    first: Strategy,
    second: Strategy,
    t: float,
    tree: PathTree,
    base: np.ndarray | None = None,
) -> Strategy:
    """Follow ``first`` strictly before grid time t, ``second`` from t on."""
    k_star = tree.grid.level_of(t)
    a = materialize(first, tree, base)
    b = materialize(second, tree, base)
    if first.controls is not second.controls and len(first.controls) != len(second.controls):
        raise StrategyError("concatenated strategies must share a control set")
    table = [a.table[k] if k < k_star else b.table[k] for k in range(tree.depth)]
    return open_loop_strategy(first.controls, table)


def decision_node_count(tree: PathTree) -> int:
    return sum(tree.level_size(k) for k in range(tree.depth))


def enumerate_strategies(
    tree: PathTree,
    controls: ControlSet,
    budget: int = DEFAULT_ENUMERATION_BUDGET,
) -> Iterator[Strategy]:
    """All open-loop adapted strategies, duplicate-free, in a fixed order.

    Nodes are ordered level-major; the last node's choice varies fastest.
    """
    n_nodes = decision_node_count(tree)
    total = len(controls) ** n_nodes
    if total > budget:
        raise SizeBudgetError(
            f"{len(controls)}**{n_nodes} = {total} strategies exceeds budget {budget}"
        )
    sizes = [tree.level_size(k) for k in range(tree.depth)]
    for assignment in itertools.product(range(len(controls)), repeat=n_nodes):
        table = []
        pos = 0
        for size in sizes:
            table.append(np.array(assignment[pos : pos + size], dtype=np.int64))
            pos += size
        yield open_loop_strategy(controls, table)


def strategy_count(tree: PathTree, controls: ControlSet) -> int:
    return len(controls) ** decision_node_count(tree)


def max_state_bound(controls: ControlSet, tree: PathTree) -> float:
    """Coarse bound on |X| over the tree: B sqrt(dt) N sqrt(m)."""
    return controls.bound * math.sqrt(tree.grid.dt) * tree.depth * math.sqrt(tree.m)
