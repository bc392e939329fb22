"""Deterministic reference solver for the Markovian case.

Explicit monotone finite differences on a vertex grid over [-R, R]:
backward sweeps minimize over the control set with central second
differences, under the usual stability restriction on the time step.
Dirichlet boundary values extrapolate the terminal data through the frozen
single-control heat flow, evaluated by Gauss-Hermite quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .controls import ControlSet
from .errors import ConfigurationError
from .problems import CostSpec


def gaussian_reference(t: float, x: float, horizon: float, vol: float) -> float:
    """Closed form of the heat-smoothed standard Gaussian bump."""
    if vol < 0:
        raise ConfigurationError(f"volatility must be >= 0, got {vol}")
    var = 1.0 + vol * vol * (horizon - t)
    return math.exp(-x * x / (2.0 * var)) / math.sqrt(var)


@dataclass(frozen=True)
class FdScheme:
    """Grid and step parameters for the explicit sweep."""

    box_radius: float
    spacing: float
    time_step: float
    controls: ControlSet
    boundary: Callable[[float, float], float] | None = None
    xs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.controls.state_dim != 1 or self.controls.wiener_dim != 1:
            raise ConfigurationError("the reference solver covers one-dimensional problems")
        n = int(round(2.0 * self.box_radius / self.spacing))
        if n < 2 or abs(n * self.spacing - 2.0 * self.box_radius) > 1e-9:
            raise ConfigurationError(
                "spacing must divide the box width; "
                f"got radius {self.box_radius}, spacing {self.spacing}"
            )
        object.__setattr__(self, "xs", -self.box_radius + np.arange(n + 1) * self.spacing)

    @property
    def max_diffusion(self) -> float:
        return max(float(c[0, 0]) ** 2 for c in self.controls.elements)

    @property
    def cfl_bound(self) -> float:
        return self.spacing**2 / self.max_diffusion if self.max_diffusion > 0 else math.inf


@dataclass
class PdeSolution:
    times: np.ndarray
    xs: np.ndarray
    values: np.ndarray  # (n_times, n_x)

    def at(self, t: float, x: float) -> float:
        k = int(round((t - self.times[0]) / (self.times[1] - self.times[0])))
        j = int(round((x - self.xs[0]) / (self.xs[1] - self.xs[0])))
        if not (0 <= k < len(self.times) and 0 <= j < len(self.xs)):
            raise ConfigurationError(f"point (t={t}, x={x}) outside the solved table")
        return float(self.values[k, j])


_HERMITE_NODES, _HERMITE_WEIGHTS = np.polynomial.hermite.hermgauss(40)


def heat_tail(terminal: Callable[[np.ndarray], np.ndarray], x: float, std: float) -> float:
    """E[terminal(x + std Z)] with standard normal Z, by quadrature."""
    if std == 0.0:
        return float(np.asarray(terminal(np.array([x]))).ravel()[0])
    pts = x + math.sqrt(2.0) * std * _HERMITE_NODES
    vals = np.asarray(terminal(pts), dtype=float)
    return float((vals * _HERMITE_WEIGHTS).sum() / math.sqrt(math.pi))


def _default_boundary(spec: CostSpec, scheme: FdScheme, horizon: float):
    """Frozen-control value at the box edge: best single control held to T."""
    vols = [abs(float(c[0, 0])) for c in scheme.controls.elements]

    def boundary(t: float, x: float) -> float:
        best = math.inf
        xv = np.array([[x]])
        for c, vol in zip(scheme.controls.elements, vols):
            run = float(np.asarray(spec.running(t, xv, c, None)).ravel()[0]) * (horizon - t)
            tail = heat_tail(
                lambda pts: spec.terminal(pts[:, None], None),
                x,
                vol * math.sqrt(horizon - t),
            )
            best = min(best, run + tail)
        return best

    return boundary


def hjb_fd_solve(spec: CostSpec, scheme: FdScheme, horizon: float, n_steps: int | None = None) -> PdeSolution:
    """Explicit monotone backward sweep for the Markovian value function.

    The time step must satisfy dt <= h^2 / max(sigma sigma'); violating it
    breaks monotonicity and is rejected outright.
    """
    if spec.observed_dim != 0:
        raise ConfigurationError("the reference solver needs a Markovian problem")
    if spec.state_dim != 1:
        raise ConfigurationError("the reference solver covers one-dimensional problems")
    if n_steps is None:
        n_steps = int(math.ceil(horizon / scheme.time_step))
    dt = horizon / n_steps
    if dt > scheme.cfl_bound * (1.0 + 1e-12):
        raise ConfigurationError(
            f"time step {dt:.3e} violates the stability bound h^2 / max sigma^2 = "
            f"{scheme.cfl_bound:.3e}"
        )
    xs = scheme.xs
    h2 = scheme.spacing**2
    times = np.linspace(0.0, horizon, n_steps + 1)
    boundary = scheme.boundary or _default_boundary(spec, scheme, horizon)

    values = np.empty((n_steps + 1, xs.shape[0]))
    values[n_steps] = np.asarray(spec.terminal(xs[:, None], None), dtype=float)
    for k in range(n_steps - 1, -1, -1):
        nxt = values[k + 1]
        lap = (nxt[2:] - 2.0 * nxt[1:-1] + nxt[:-2]) / h2
        best = None
        for c in scheme.controls.elements:
            s2 = float(c[0, 0]) ** 2
            run = np.asarray(spec.running(float(times[k]), xs[1:-1, None], c, None), dtype=float)
            cand = nxt[1:-1] + dt * (0.5 * s2 * lap + run)
            best = cand if best is None else np.minimum(best, cand)
        values[k, 1:-1] = best
        values[k, 0] = boundary(float(times[k]), float(xs[0]))
        values[k, -1] = boundary(float(times[k]), float(xs[-1]))
    return PdeSolution(times, xs, values)
