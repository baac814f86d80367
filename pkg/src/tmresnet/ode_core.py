"""Fixed-step ODE integrators: explicit Runge-Kutta family and the Taylor multistep method.

States are 1-D float64 arrays. All step functions share the signature
``step(problem, t, theta, tau) -> theta_next`` except :func:`tm_step`, which
consumes a three-state :class:`TmHistory`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateFit, HistoryShapeMismatch, MissingExactSolution, NonFiniteState

__all__ = [
    "IntegratorId",
    "OdeProblem",
    "TmHistory",
    "Trajectory",
    "OrderEstimate",
    "ButcherTableau",
    "TABLEAUX",
    "GLOBAL_ORDER",
    "TM_STATE_COEFFS",
    "euler_step",
    "improved_euler_step",
    "rk2_ralston_step",
    "heun3_step",
    "rk3_kutta_step",
    "rk4_classical_step",
    "tm_step",
    "step_function",
    "integrate",
    "empirical_order",
    "tm_stability_probe",
    "PROBLEMS",
    "make_problem",
    "polynomial_problem",
    "parse_method",
]


class IntegratorId(str, enum.Enum):
    EULER = "euler"
    IMPROVED_EULER = "ie"
    RK2_RALSTON = "rk2"
    RK3_KUTTA = "rk3"
    HEUN3 = "heun3"
    RK4_CLASSICAL = "rk4"
    TAYLOR_MULTISTEP = "tm"


GLOBAL_ORDER = {
    IntegratorId.EULER: 1,
    IntegratorId.IMPROVED_EULER: 2,
    IntegratorId.RK2_RALSTON: 2,
    IntegratorId.RK3_KUTTA: 3,
    IntegratorId.HEUN3: 3,
    IntegratorId.RK4_CLASSICAL: 4,
    IntegratorId.TAYLOR_MULTISTEP: 2,
}

_ALIASES = {
    "euler": IntegratorId.EULER,
    "ie": IntegratorId.IMPROVED_EULER,
    "improved-euler": IntegratorId.IMPROVED_EULER,
    "rk2": IntegratorId.RK2_RALSTON,
    "ralston": IntegratorId.RK2_RALSTON,
    "rk3": IntegratorId.RK3_KUTTA,
    "kutta3": IntegratorId.RK3_KUTTA,
    "heun3": IntegratorId.HEUN3,
    "rk4": IntegratorId.RK4_CLASSICAL,
    "tm": IntegratorId.TAYLOR_MULTISTEP,
    "taylor-multistep": IntegratorId.TAYLOR_MULTISTEP,
}


def parse_method(name: Union[str, IntegratorId]) -> IntegratorId:
    if isinstance(name, IntegratorId):
        return name
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        valid = ", ".join(m.value for m in IntegratorId)
        raise ValueError(f"unknown method {name!r}; valid: {valid}") from None


def _as_state(theta) -> np.ndarray:
    return np.atleast_1d(np.asarray(theta, dtype=np.float64))


@dataclass(frozen=True)
class OdeProblem:
    """theta' = rhs(t, theta) with theta(t0) = theta0 and an optional closed form."""

    rhs: Callable[[float, np.ndarray], np.ndarray]
    t0: float
    theta0: np.ndarray
    exact: Optional[Callable[[float], np.ndarray]] = None
    name: str = "anonymous"

    def __post_init__(self):
        object.__setattr__(self, "theta0", _as_state(self.theta0))
        object.__setattr__(self, "t0", float(self.t0))

    @property
    def dim(self) -> int:
        return self.theta0.shape[0]

    def f(self, t: float, theta: np.ndarray) -> np.ndarray:
        out = _as_state(self.rhs(t, theta))
        if out.shape != theta.shape:
            raise ValueError(f"rhs returned shape {out.shape}, state has shape {theta.shape}")
        if not np.all(np.isfinite(out)):
            raise NonFiniteState(f"non-finite derivative at t={t!r}", t=t)
        return out

    def exact_state(self, t: float) -> np.ndarray:
        if self.exact is None:
            raise MissingExactSolution(f"problem {self.name!r} has no closed-form solution")
        return _as_state(self.exact(t))

    def consistency_error(self, t_end: float, samples: int = 16, h: float = 1e-5) -> float:
        """Worst relative mismatch between a central difference of ``exact`` and ``rhs``."""
        worst = 0.0
        for t in np.linspace(self.t0, t_end, samples):
            fd = (self.exact_state(t + h) - self.exact_state(t - h)) / (2 * h)
            f = self.f(t, self.exact_state(t))
            scale = max(np.max(np.abs(f)), 1.0)
            worst = max(worst, float(np.max(np.abs(fd - f)) / scale))
        return worst


# Runge-Kutta family -----------------------------------------------------------


@dataclass(frozen=True)
class ButcherTableau:
    name: str
    a: tuple  # strictly lower-triangular rows, Fractions
    b: tuple
    c: tuple

    @property
    def stages(self) -> int:
        return len(self.b)

    def floats(self):
        a = [[float(x) for x in row] for row in self.a]
        return a, [float(x) for x in self.b], [float(x) for x in self.c]


F = Fraction

TABLEAUX = {
    IntegratorId.EULER: ButcherTableau("euler", ((),), (F(1),), (F(0),)),
    # Heun form: slope at the far end, trapezoid weights.
    IntegratorId.IMPROVED_EULER: ButcherTableau(
        "improved-euler", ((), (F(1),)), (F(1, 2), F(1, 2)), (F(0), F(1))
    ),
    IntegratorId.RK2_RALSTON: ButcherTableau(
        "ralston", ((), (F(2, 3),)), (F(1, 4), F(3, 4)), (F(0), F(2, 3))
    ),
    IntegratorId.HEUN3: ButcherTableau(
        "heun3",
        ((), (F(1, 3),), (F(0), F(2, 3))),
        (F(1, 4), F(0), F(3, 4)),
        (F(0), F(1, 3), F(2, 3)),
    ),
    IntegratorId.RK3_KUTTA: ButcherTableau(
        "kutta3",
        ((), (F(1, 2),), (F(-1), F(2))),
        (F(1, 6), F(4, 6), F(1, 6)),
        (F(0), F(1, 2), F(1)),
    ),
    IntegratorId.RK4_CLASSICAL: ButcherTableau(
        "rk4",
        ((), (F(1, 2),), (F(0), F(1, 2)), (F(0), F(0), F(1))),
        (F(1, 6), F(1, 3), F(1, 3), F(1, 6)),
        (F(0), F(1, 2), F(1, 2), F(1)),
    ),
}

_FLOAT_TABLEAUX = {k: v.floats() for k, v in TABLEAUX.items()}


def _rk_step(method: IntegratorId, problem: OdeProblem, t: float, theta, tau: float) -> np.ndarray:
    if not (tau > 0 and math.isfinite(tau)):
        raise ValueError(f"step size must be positive and finite, got {tau!r}")
    theta = _as_state(theta)
    if theta.shape != problem.theta0.shape:
        raise ValueError(f"state shape {theta.shape} does not match problem shape {problem.theta0.shape}")
    a, b, c = _FLOAT_TABLEAUX[method]
    ks = []
    for i in range(len(b)):
        incr = np.zeros_like(theta)
        for aij, kj in zip(a[i], ks):
            if aij != 0.0:
                incr = incr + aij * kj
        ks.append(problem.f(t + c[i] * tau, theta + tau * incr))
    slope = np.zeros_like(theta)
    for bi, ki in zip(b, ks):
        if bi != 0.0:
            slope = slope + bi * ki
    out = theta + tau * slope
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"non-finite state after step from t={t!r}", t=t)
    return out


def euler_step(problem: OdeProblem, t: float, theta, tau: float) -> np.ndarray:
    """theta + tau * f(t, theta)."""
    return _rk_step(IntegratorId.EULER, problem, t, theta, tau)


def improved_euler_step(problem: OdeProblem, t: float, theta, tau: float) -> np.ndarray:
    return _rk_step(IntegratorId.IMPROVED_EULER, problem, t, theta, tau)


def rk2_ralston_step(problem: OdeProblem, t: float, theta, tau: float) -> np.ndarray:
    return _rk_step(IntegratorId.RK2_RALSTON, problem, t, theta, tau)


def heun3_step(problem: OdeProblem, t: float, theta, tau: float) -> np.ndarray:
    """Heun's third-order method: stages at tau/3 and 2tau/3, weights (1/4, 0, 3/4)."""
    return _rk_step(IntegratorId.HEUN3, problem, t, theta, tau)


def rk3_kutta_step(problem: OdeProblem, t: float, theta, tau: float) -> np.ndarray:
    """Kutta's third-order method, k3 = f(t + tau, theta + 2 tau k2 - tau k1)."""
    return _rk_step(IntegratorId.RK3_KUTTA, problem, t, theta, tau)


def rk4_classical_step(problem: OdeProblem, t: float, theta, tau: float) -> np.ndarray:
    return _rk_step(IntegratorId.RK4_CLASSICAL, problem, t, theta, tau)


_SINGLE_STEP = {
    IntegratorId.EULER: euler_step,
    IntegratorId.IMPROVED_EULER: improved_euler_step,
    IntegratorId.RK2_RALSTON: rk2_ralston_step,
    IntegratorId.HEUN3: heun3_step,
    IntegratorId.RK3_KUTTA: rk3_kutta_step,
    IntegratorId.RK4_CLASSICAL: rk4_classical_step,
}


def step_function(method) -> Callable:
    method = parse_method(method)
    if method is IntegratorId.TAYLOR_MULTISTEP:
        raise ValueError("the Taylor multistep method needs a TmHistory; use tm_step")
    return _SINGLE_STEP[method]


# Taylor multistep -------------------------------------------------------------

# theta_{l+1} = 3/2 theta_l - theta_{l-1} + 1/2 theta_{l-2} + tau f(t_l, theta_l)
TM_STATE_COEFFS = (F(3, 2), F(-1), F(1, 2))  # applied to (theta_l, theta_{l-1}, theta_{l-2})
TM_SLOPE_COEFF = F(1)


@dataclass(frozen=True)
class TmHistory:
    s0: np.ndarray  # theta at t_{l-2}
    s1: np.ndarray  # theta at t_{l-1}
    s2: np.ndarray  # theta at t_l
    t: float
    tau: float

    def __post_init__(self):
        for name in ("s0", "s1", "s2"):
            object.__setattr__(self, name, _as_state(getattr(self, name)))
        if not (self.s0.shape == self.s1.shape == self.s2.shape):
            raise HistoryShapeMismatch(
                f"history states have shapes {self.s0.shape}, {self.s1.shape}, {self.s2.shape}"
            )
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"step size must be positive and finite, got {self.tau!r}")

    def shifted(self, new_state: np.ndarray) -> "TmHistory":
        return TmHistory(self.s1, self.s2, new_state, self.t + self.tau, self.tau)


def tm_combine(cur, prev, prev2):
    """3/2 cur - prev + 1/2 prev2, arranged so equal inputs return ``cur`` bit for bit.

    Works for numpy arrays and for anything else supporting +, - and scalar *.
    """
    return cur + 0.5 * ((cur - prev) - (prev - prev2))


def tm_step(problem: OdeProblem, history: TmHistory) -> np.ndarray:
    if history.s2.shape != problem.theta0.shape:
        raise HistoryShapeMismatch(
            f"history state shape {history.s2.shape} does not match problem shape {problem.theta0.shape}"
        )
    slope = problem.f(history.t, history.s2)
    out = tm_combine(history.s2, history.s1, history.s0) + history.tau * slope
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"non-finite state after step from t={history.t!r}", t=history.t)
    return out


# Driving ----------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    times: tuple
    states: tuple

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if len(self.times) >= 2:
            dt = np.diff(np.asarray(self.times, dtype=np.float64))
            if np.any(dt <= 0):
                raise ValueError("times must be strictly increasing")
            if not np.allclose(dt, dt[0], rtol=1e-12, atol=0.0):
                raise ValueError("times must be uniformly spaced")

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def as_array(self) -> np.ndarray:
        return np.stack(self.states)


Bootstrap = Union[IntegratorId, str]


def integrate(
    method,
    problem: OdeProblem,
    tau: float,
    n_steps: int,
    bootstrap: Bootstrap = IntegratorId.RK4_CLASSICAL,
) -> Trajectory:
    """Take ``n_steps`` uniform steps of size ``tau`` from ``(problem.t0, problem.theta0)``.

    For the Taylor multistep method the two states after theta0 come from
    ``bootstrap``: any single-step integrator, or ``"exact"`` to sample the
    closed-form solution. Single-step methods ignore ``bootstrap``.
    """
    method = parse_method(method)
    if not (tau > 0 and math.isfinite(tau)):
        raise ValueError(f"step size must be positive and finite, got {tau!r}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    t0 = problem.t0
    times = [t0 + k * tau for k in range(n_steps + 1)]
    states = [problem.theta0.copy()]

    def run(k, fn):
        try:
            return fn()
        except NonFiniteState as exc:
            raise NonFiniteState(f"step {k}: {exc}", t=exc.t, step=k) from exc

    if method is not IntegratorId.TAYLOR_MULTISTEP:
        step = _SINGLE_STEP[method]
        for k in range(n_steps):
            states.append(run(k, lambda: step(problem, times[k], states[k], tau)))
        return Trajectory(tuple(times), tuple(states))

    if n_steps < 3:
        raise ValueError("the Taylor multistep method needs n_steps >= 3")
    if isinstance(bootstrap, str) and bootstrap == "exact":
        for k in (1, 2):
            states.append(problem.exact_state(times[k]))
    else:
        boot = parse_method(bootstrap)
        if boot is IntegratorId.TAYLOR_MULTISTEP:
            raise ValueError("bootstrap must be a single-step integrator or 'exact'")
        step = _SINGLE_STEP[boot]
        for k in (0, 1):
            states.append(run(k, lambda: step(problem, times[k], states[k], tau)))
    history = TmHistory(states[0], states[1], states[2], times[2], tau)
    for k in range(2, n_steps):
        nxt = run(k, lambda: tm_step(problem, history))
        states.append(nxt)
        history = TmHistory(history.s1, history.s2, nxt, times[k + 1], tau)
    return Trajectory(tuple(times), tuple(states))


@dataclass(frozen=True)
class OrderEstimate:
    taus: tuple
    errors: tuple
    slope: float = field(default=float("nan"))

    def __post_init__(self):
        if len(self.taus) != len(self.errors):
            raise ValueError("taus and errors differ in length")
        if any(b >= a for a, b in zip(self.taus, self.taus[1:])):
            raise ValueError("taus must be strictly decreasing")
        if any(not e > 0 for e in self.errors):
            raise ValueError("errors must be strictly positive")


def _loglog_slope(taus, errors) -> float:
    slope, _ = np.polyfit(np.log(taus), np.log(errors), 1)
    return float(slope)


def empirical_order(
    method,
    problem: OdeProblem,
    taus: Sequence[float],
    horizon: float,
    bootstrap: Bootstrap = "exact",
) -> OrderEstimate:
    """Fit the log-log slope of terminal max-norm error against step size."""
    method = parse_method(method)
    if problem.exact is None:
        raise MissingExactSolution(f"problem {problem.name!r} has no closed-form solution")
    taus = sorted((float(t) for t in taus), reverse=True)
    if len(taus) < 4:
        raise ValueError("need at least 4 step sizes")
    if len(set(taus)) != len(taus):
        raise ValueError("step sizes must be distinct")
    if taus[0] / taus[-1] < 8.0 - 1e-12:
        raise ValueError("step sizes must span at least a factor of 8")
    target = problem.exact_state(problem.t0 + horizon)
    errors = []
    for tau in taus:
        n = int(round(horizon / tau))
        if n < 1 or abs(n * tau - horizon) > 1e-12 * max(1.0, abs(horizon)):
            raise ValueError(f"step size {tau} does not divide horizon {horizon}")
        traj = integrate(method, problem, tau, n, bootstrap=bootstrap)
        errors.append(float(np.max(np.abs(traj.final - target))))
    if all(e < 1e-14 for e in errors):
        raise DegenerateFit("all errors below 1e-14; slope undefined")
    if any(e <= 0 for e in errors):
        raise DegenerateFit("some errors are exactly zero; slope undefined")
    return OrderEstimate(tuple(taus), tuple(errors), _loglog_slope(taus, errors))


def tm_stability_probe(perturbation: float, n_steps: int) -> list:
    """Run the homogeneous multistep recurrence from (1, 1, 1 + perturbation).

    Returns |theta_l - 1| for each of the ``n_steps`` produced states.
    """
    if perturbation < 0:
        raise ValueError("perturbation must be non-negative")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    s0, s1, s2 = 1.0, 1.0, 1.0 + perturbation
    out = []
    for _ in range(n_steps):
        s0, s1, s2 = s1, s2, tm_combine(s2, s1, s0)
        out.append(abs(s2 - 1.0))
    return out


# Reference problems -----------------------------------------------------------


def _decay_sin() -> OdeProblem:
    # theta(t) = (e^{-t} + sin t - cos t) / 2
    return OdeProblem(
        rhs=lambda t, y: -y + math.sin(t),
        t0=0.0,
        theta0=[0.0],
        exact=lambda t: [0.5 * (math.exp(-t) + math.sin(t) - math.cos(t))],
        name="decay-sin",
    )


def _exp_growth() -> OdeProblem:
    return OdeProblem(lambda t, y: y, 0.0, [1.0], lambda t: [math.exp(t)], "exp-growth")


def _decay() -> OdeProblem:
    return OdeProblem(lambda t, y: -2.0 * y, 0.0, [1.0], lambda t: [math.exp(-2.0 * t)], "decay")


def _oscillator() -> OdeProblem:
    return OdeProblem(
        rhs=lambda t, y: np.array([y[1], -y[0]]),
        t0=0.0,
        theta0=[1.0, 0.0],
        exact=lambda t: [math.cos(t), -math.sin(t)],
        name="oscillator",
    )


def _linear() -> OdeProblem:
    return OdeProblem(lambda t, y: np.ones_like(y), 0.0, [0.0], lambda t: [t], "linear")


PROBLEMS = {
    "decay-sin": _decay_sin,
    "exp-growth": _exp_growth,
    "decay": _decay,
    "oscillator": _oscillator,
    "linear": _linear,
}


def make_problem(name: str) -> OdeProblem:
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; valid: {', '.join(PROBLEMS)}") from None


def polynomial_problem(coeffs: Sequence[float], t0: float = 0.0) -> OdeProblem:
    """theta(t) = sum_k coeffs[k] t^k, posed as theta' = p'(t) with theta(t0) = p(t0)."""
    p = np.polynomial.Polynomial(np.asarray(coeffs, dtype=np.float64))
    dp = p.deriv()
    return OdeProblem(
        rhs=lambda t, y: np.full_like(y, dp(t)),
        t0=t0,
        theta0=[p(t0)],
        exact=lambda t: [p(t)],
        name=f"poly-deg{len(coeffs) - 1}",
    )
