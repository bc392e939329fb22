"""Problem data: running/terminal costs, validation, built-in examples.

Cost callables are vectorized over the spatial argument: ``f(t, x, v, w)``
takes x with shape (..., d), a single d x m control matrix v and a noise-path
prefix w of shape (k+1, m0) (the walk values of the first m0 coordinates up
to the current level); it returns an array of shape (...).  ``G(x, w)`` takes
the full-horizon prefix.  Specs with m0 == 0 must ignore w.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .controls import ControlSet
from .errors import ConfigurationError


@dataclass
class CostSpec:
    name: str
    state_dim: int
    wiener_dim: int
    observed_dim: int  # m0: coordinates the costs may depend on (0 = Markovian)
    running: Callable[[float, np.ndarray, np.ndarray, np.ndarray | None], np.ndarray]
    terminal: Callable[[np.ndarray, np.ndarray | None], np.ndarray]
    dominating: Callable[[float, np.ndarray], np.ndarray]
    holder_constant: float
    holder_exponent: float
    default_controls: ControlSet

    def __post_init__(self) -> None:
        if not (0 < self.holder_exponent <= 1.0):
            raise ConfigurationError(
                f"holder_exponent must lie in (0, 1], got {self.holder_exponent}"
            )
        if not (0 <= self.observed_dim <= self.wiener_dim):
            raise ConfigurationError(
                f"observed_dim must lie in 0..{self.wiener_dim}, got {self.observed_dim}"
            )

    @property
    def path_dependent(self) -> bool:
        return self.observed_dim > 0


# ---------------------------------------------------------------------------
# built-in problems


def _gauss_bump(x: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * np.square(x).sum(axis=-1))


def _make_zero() -> CostSpec:
    return CostSpec(
        name="zero",
        state_dim=1,
        wiener_dim=1,
        observed_dim=0,
        running=lambda t, x, v, w: np.zeros(x.shape[:-1]),
        terminal=lambda x, w: np.zeros(x.shape[:-1]),
        dominating=lambda t, x: np.zeros(x.shape[:-1]),
        holder_constant=0.01,
        holder_exponent=1.0,
        default_controls=ControlSet.from_values([1.0]),
    )


def _make_constant_running() -> CostSpec:
    return CostSpec(
        name="constant_running",
        state_dim=1,
        wiener_dim=1,
        observed_dim=0,
        running=lambda t, x, v, w: np.ones(x.shape[:-1]),
        terminal=lambda x, w: np.zeros(x.shape[:-1]),
        dominating=lambda t, x: np.ones(x.shape[:-1]),
        holder_constant=0.01,
        holder_exponent=1.0,
        default_controls=ControlSet.from_values([1.0]),
    )


def _make_gaussian_terminal() -> CostSpec:
    # sup |G'| = exp(-1/2) ~ 0.6065 attained at |x| = 1
    return CostSpec(
        name="gaussian_terminal",
        state_dim=1,
        wiener_dim=1,
        observed_dim=0,
        running=lambda t, x, v, w: np.zeros(x.shape[:-1]),
        terminal=lambda x, w: _gauss_bump(x),
        dominating=lambda t, x: np.zeros(x.shape[:-1]),
        holder_constant=0.61,
        holder_exponent=1.0,
        default_controls=ControlSet.from_values([1.0]),
    )


def _make_two_control_1d() -> CostSpec:
    def running(t, x, v, w):
        return np.full(x.shape[:-1], float(v[0, 0]) ** 2)

    return CostSpec(
        name="two_control_1d",
        state_dim=1,
        wiener_dim=1,
        observed_dim=0,
        running=running,
        terminal=lambda x, w: _gauss_bump(x),
        dominating=lambda t, x: np.ones(x.shape[:-1]),
        holder_constant=0.61,
        holder_exponent=1.0,
        default_controls=ControlSet.from_values([0.5, 1.0]),
    )


def _make_partial_nonmarkov() -> CostSpec:
    # Noise is 2-dimensional but the costs read only coordinate 1; the
    # default controls leave the second column zero, so the whole problem is
    # measurable with respect to the first coordinate and the second noise
    # direction enters nothing.
    def running(t, x, v, w):
        observed = 0.0 if w is None else float(w[-1, 0])
        return _gauss_bump(x) * (1.0 + math.tanh(observed))

    def dominating(t, x):
        return 2.0 * _gauss_bump(x)

    return CostSpec(
        name="partial_nonmarkov",
        state_dim=1,
        wiener_dim=2,
        observed_dim=1,
        running=running,
        terminal=lambda x, w: _gauss_bump(x),
        dominating=dominating,
        holder_constant=1.83,
        holder_exponent=1.0,
        default_controls=ControlSet.from_values([[0.5, 0.0], [1.0, 0.0]], d=1, m=2),
    )


_BUILTINS: dict[str, Callable[[], CostSpec]] = {
    "zero": _make_zero,
    "constant_running": _make_constant_running,
    "gaussian_terminal": _make_gaussian_terminal,
    "two_control_1d": _make_two_control_1d,
    "partial_nonmarkov": _make_partial_nonmarkov,
}


def builtin_problem(name: str) -> CostSpec:
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown problem {name!r}; available: {sorted(_BUILTINS)}"
        ) from None
    return factory()


def builtin_names() -> list[str]:
    return sorted(_BUILTINS)


# ---------------------------------------------------------------------------
# assumption validation


@dataclass(frozen=True)
class SamplingPlan:
    samples: int = 10_000
    box_radius: float = 4.0
    horizon: float = 1.0
    steps: int = 8
    seed: int = 0
    pair_scales: tuple[float, ...] = (2.0, 0.5, 0.05)


@dataclass
class ValidationRow:
    check: str
    worst: float
    passed: bool


@dataclass
class ValidationReport:
    spec_name: str
    rows: list[ValidationRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)


def validate_assumption_a1(spec: CostSpec, plan: SamplingPlan | None = None) -> ValidationReport:
    """Sampled nonnegativity, domination and Holder checks.

    Violations are report rows, never exceptions.  The Holder ratio uses
    |f(x1)-f(x2)| + |G(x1)-G(x2)| <= L |x1-x2|^alpha on common noise paths.
    """
    plan = plan or SamplingPlan()
    rng = np.random.default_rng(plan.seed)
    d = spec.state_dim
    n = plan.samples
    dt = plan.horizon / plan.steps
    controls = spec.default_controls

    ts = rng.uniform(0.0, plan.horizon, size=n)
    x1 = rng.uniform(-plan.box_radius, plan.box_radius, size=(n, d))
    scales = np.asarray(plan.pair_scales)[rng.integers(0, len(plan.pair_scales), size=n)]
    x2 = x1 + rng.standard_normal((n, d)) * scales[:, None]
    v_idx = rng.integers(0, len(controls), size=n)

    worst_f_neg = 0.0
    worst_g_neg = 0.0
    worst_dom = 0.0
    worst_holder = 0.0
    for i in range(n):
        k = int(rng.integers(0, plan.steps + 1))
        w = None
        if spec.observed_dim > 0:
            steps = rng.choice([-1.0, 1.0], size=(k, spec.observed_dim)) * math.sqrt(dt)
            w = np.vstack([np.zeros((1, spec.observed_dim)), np.cumsum(steps, axis=0)]) if k else np.zeros((1, spec.observed_dim))
        t = float(ts[i])
        v = controls[int(v_idx[i])]
        f1 = float(spec.running(t, x1[i], v, w))
        f2 = float(spec.running(t, x2[i], v, w))
        wg = None
        if spec.observed_dim > 0:
            tail = rng.choice([-1.0, 1.0], size=(plan.steps - k, spec.observed_dim)) * math.sqrt(dt)
            wg = np.vstack([w, w[-1] + np.cumsum(tail, axis=0)]) if plan.steps > k else w
        g1 = float(spec.terminal(x1[i], wg))
        g2 = float(spec.terminal(x2[i], wg))
        dom = float(spec.dominating(t, x1[i]))
        worst_f_neg = min(worst_f_neg, f1, f2)
        worst_g_neg = min(worst_g_neg, g1, g2)
        worst_dom = max(worst_dom, f1 - dom)
        dist = float(np.linalg.norm(x1[i] - x2[i]))
        if dist > 1e-12:
            ratio = (abs(f1 - f2) + abs(g1 - g2)) / dist**spec.holder_exponent
            worst_holder = max(worst_holder, ratio - spec.holder_constant)

    rows = [
        ValidationRow("running_nonnegative", worst_f_neg, worst_f_neg >= 0.0),
        ValidationRow("terminal_nonnegative", worst_g_neg, worst_g_neg >= 0.0),
        ValidationRow("running_dominated", worst_dom, worst_dom <= 0.0),
        ValidationRow("holder_ratio_excess", worst_holder, worst_holder <= 0.0),
    ]
    return ValidationReport(spec.name, rows)


# ---------------------------------------------------------------------------
# expression-config problems (polynomial / Gaussian / tanh atoms only)


def _build_term(term: dict):
    """One additive term: coef * spatial(x) * noise(w) * control(v)."""
    coef = float(term.get("coef", 1.0))
    spatial = term.get("x", "const")
    noise = term.get("w", "none")
    control = term.get("v", "none")

    if spatial == "const":
        sp = lambda x: np.ones(x.shape[:-1])
    elif spatial.startswith("gauss:"):
        a = float(spatial.split(":")[1])
        sp = lambda x: np.exp(-a * np.square(x).sum(axis=-1))
    elif spatial.startswith("poly:"):
        p = int(spatial.split(":")[1])
        sp = lambda x: np.power(x[..., 0], p)
    else:
        raise ConfigurationError(f"unknown spatial atom {spatial!r} in problem term")

    if noise == "none":
        nz = lambda w: 1.0
    elif noise.startswith("tanh:"):
        coord = int(noise.split(":")[1])
        nz = lambda w: 1.0 + math.tanh(float(w[-1, coord])) if w is not None else 1.0
    else:
        raise ConfigurationError(f"unknown noise atom {noise!r} in problem term")

    if control == "none":
        cv = lambda v: 1.0
    elif control == "sq":
        cv = lambda v: float(np.square(v).sum())
    else:
        raise ConfigurationError(f"unknown control atom {control!r} in problem term")

    return coef, sp, nz, cv


def costspec_from_config(cfg: dict) -> CostSpec:
    """Build a CostSpec from a small declarative description.

    Keys: name, d, m, m0, L, alpha, controls (nested lists), f (term list),
    G (term list), g (term list).  Each term is a dict per ``_build_term``.
    """
    for key in ("d", "m", "L", "alpha"):
        if key not in cfg:
            raise ConfigurationError(f"problem config missing field {key!r}")
    d = int(cfg["d"])
    m = int(cfg["m"])
    m0 = int(cfg.get("m0", 0))
    f_terms = [_build_term(t) for t in cfg.get("f", [])]
    g_terms = [_build_term(t) for t in cfg.get("G", [])]
    dom_terms = [_build_term(t) for t in cfg.get("g", [])]
    controls = cfg.get("controls")
    cset = (
        ControlSet.from_values(controls, d=d, m=m)
        if controls is not None
        else ControlSet.from_values([np.ones((d, m))])
    )

    def running(t, x, v, w):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for coef, sp, nz, cv in f_terms:
            out = out + coef * sp(x) * nz(w) * cv(v)
        return out

    def terminal(x, w):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for coef, sp, nz, _ in g_terms:
            out = out + coef * sp(x) * nz(w)
        return out

    def dominating(t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for coef, sp, _, _ in dom_terms:
            out = out + coef * sp(x)
        return out

    return CostSpec(
        name=str(cfg.get("name", "config_problem")),
        state_dim=d,
        wiener_dim=m,
        observed_dim=m0,
        running=running,
        terminal=terminal,
        dominating=dominating,
        holder_constant=float(cfg["L"]),
        holder_exponent=float(cfg["alpha"]),
        default_controls=cset,
    )
