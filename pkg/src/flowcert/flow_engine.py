"""Gradient flow integration with exact tracking of the pushforward log-density.

Along a trajectory of ``dh/dt = -grad C(h)`` the log-density of the pushed
initialization grows at rate ``Laplacian C(h_t)``, so integrating the
augmented system

    dh/dt = -grad C(h),     dI/dt = Laplacian C(h)

gives ``log rho_T(h_T) - log rho_0(h_0) = I(T)``. Everything here works on flat
parameter vectors; objectives that think in matrices reshape internally.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, Union

import numpy as np
from scipy.integrate import simpson

from .priors import PriorSpec

SCHEMES = ("euler", "rk4")
ACCUMULATORS = ("stage", "rectangle")


class FlowDivergence(RuntimeError):
    """Raised when the state, gradient or Laplacian stops being finite."""


class UndefinedResult(ValueError):
    """Raised when a closed form is evaluated outside its domain."""


class Objective:
    """A twice differentiable training objective on R^N.

    Subclasses implement ``value``, ``gradient`` and ``laplacian``; override
    ``gradient_and_laplacian`` when the two share work.
    """

    def value(self, h: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, h: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def laplacian(self, h: np.ndarray) -> float:
        raise NotImplementedError

    def gradient_and_laplacian(self, h: np.ndarray) -> tuple[np.ndarray, float]:
        return self.gradient(h), self.laplacian(h)


class FunctionObjective(Objective):
    """Objective assembled from plain callables."""

    def __init__(self, value: Callable, gradient: Callable, laplacian: Callable):
        self._value = value
        self._gradient = gradient
        self._laplacian = laplacian

    def value(self, h):
        return float(self._value(h))

    def gradient(self, h):
        return np.asarray(self._gradient(h), dtype=float)

    def laplacian(self, h):
        return float(self._laplacian(h))


class QuadraticObjective(Objective):
    """C(h) = 1/2 h^T H h - b.h with constant Laplacian Tr H."""

    def __init__(self, H: np.ndarray, b: np.ndarray | None = None):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        n = self.H.shape[0]
        self.b = np.zeros(n) if b is None else np.asarray(b, dtype=float)
        self._trace = float(np.trace(self.H))

    def value(self, h):
        return float(0.5 * h @ self.H @ h - self.b @ h)

    def gradient(self, h):
        return self.H @ h - self.b

    def laplacian(self, h):
        return self._trace


@dataclass(frozen=True)
class FlowState:
    t: float
    h: np.ndarray
    laplacian_integral: float = 0.0


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "euler"
    dt: float = 1e-3
    horizon_grid: tuple[float, ...] = (1.0,)
    accumulator: str = "stage"

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.accumulator not in ACCUMULATORS:
            raise ValueError(f"unknown accumulator {self.accumulator!r}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        grid = tuple(float(T) for T in self.horizon_grid)
        if not grid:
            raise ValueError("horizon grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("horizon grid must be strictly ascending")
        if grid[0] < 0:
            raise ValueError("horizons must be nonnegative")
        object.__setattr__(self, "horizon_grid", grid)
        self.horizon_steps()

    @property
    def K(self) -> int:
        return len(self.horizon_grid)

    def horizon_steps(self) -> list[int]:
        return [steps_for(T, self.dt) for T in self.horizon_grid]


def steps_for(T: float, dt: float) -> int:
    """Number of steps of size ``dt`` spanning ``T``; ``T`` must be a multiple."""
    n = round(T / dt)
    if abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"time {T} is not an integer multiple of dt={dt}")
    return int(n)


@dataclass(frozen=True)
class BatchSchedule:
    """Piecewise-constant objective: ``(t_start, t_end, batch_id)`` segments.

    ``batches`` optionally holds the example indices of each batch id.
    """

    segments: tuple[tuple[float, float, int], ...]
    batches: tuple[np.ndarray, ...] = ()

    def __post_init__(self) -> None:
        segs = tuple((float(a), float(b), int(k)) for a, b, k in self.segments)
        if not segs:
            raise ValueError("empty schedule")
        if segs[0][0] != 0.0:
            raise ValueError("schedule must start at t=0")
        for (a, b, _), (c, _, _) in zip(segs, segs[1:]):
            if not math.isclose(b, c, rel_tol=1e-12, abs_tol=1e-15):
                raise ValueError("segments must be contiguous")
        if any(b <= a for a, b, _ in segs):
            raise ValueError("segments must have positive length")
        object.__setattr__(self, "segments", segs)

    @property
    def total_time(self) -> float:
        return self.segments[-1][1]

    def step_boundaries(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Segment end steps and batch ids, with endpoints checked against ``dt``."""
        ends = np.array([steps_for(b, dt) for _, b, _ in self.segments])
        ids = np.array([k for _, _, k in self.segments])
        return ends, ids


ObjectiveSource = Union[Objective, Sequence[Objective], Callable[[int], Objective]]


@dataclass
class IntegrationResult:
    """Snapshots at each horizon, plus the full path if it was recorded."""

    snapshots: list[tuple[float, FlowState]]
    aborted: bool = False
    message: str = ""
    path: list[FlowState] = field(default_factory=list)

    def __iter__(self) -> Iterator[tuple[float, FlowState]]:
        return iter(self.snapshots)

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, i):
        return self.snapshots[i]

    @property
    def final(self) -> FlowState:
        return self.snapshots[-1][1]


def _check_finite(g: np.ndarray, lap: float, h: np.ndarray) -> None:
    if not math.isfinite(lap):
        raise FlowDivergence(f"non-finite Laplacian ({lap}); |h|={np.linalg.norm(h):.3e}")
    if not np.all(np.isfinite(g)):
        raise FlowDivergence(f"non-finite gradient; |h|={np.linalg.norm(h):.3e}")


def _advance(h: np.ndarray, acc: float, objective: Objective, dt: float,
             scheme: str, accumulator: str) -> tuple[np.ndarray, float]:
    # overflow is detected explicitly below, so numpy's warnings are noise here
    with np.errstate(over="ignore", invalid="ignore"):
        return _advance_unchecked(h, acc, objective, dt, scheme, accumulator)


def _advance_unchecked(h: np.ndarray, acc: float, objective: Objective, dt: float,
                       scheme: str, accumulator: str) -> tuple[np.ndarray, float]:
    g1, l1 = objective.gradient_and_laplacian(h)
    _check_finite(g1, l1, h)
    if scheme == "euler":
        h_new = h - dt * g1
        acc_new = acc + dt * l1
    else:
        g2, l2 = objective.gradient_and_laplacian(h - 0.5 * dt * g1)
        _check_finite(g2, l2, h)
        g3, l3 = objective.gradient_and_laplacian(h - 0.5 * dt * g2)
        _check_finite(g3, l3, h)
        g4, l4 = objective.gradient_and_laplacian(h - dt * g3)
        _check_finite(g4, l4, h)
        h_new = h - (dt / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
        if accumulator == "stage":
            acc_new = acc + (dt / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
        else:
            acc_new = acc + dt * l1
    if not np.all(np.isfinite(h_new)):
        raise FlowDivergence(f"state became non-finite; last |h|={np.linalg.norm(h):.3e}")
    return h_new, acc_new


def step(state: FlowState, objective: Objective, dt: float, scheme: str = "euler",
         accumulator: str = "stage") -> FlowState:
    """Advance the augmented system (h, Laplacian integral) by one step."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    h, acc = _advance(np.asarray(state.h, dtype=float), state.laplacian_integral,
                      objective, dt, scheme, accumulator)
    return FlowState(t=state.t + dt, h=h, laplacian_integral=acc)


def _resolve(source: ObjectiveSource, batch_id: int) -> Objective:
    if isinstance(source, Objective):
        return source
    if callable(source):
        return source(batch_id)
    return source[batch_id]


def integrate(h0: np.ndarray, objective: ObjectiveSource, config: IntegratorConfig,
              schedule: BatchSchedule | None = None, keep_path: bool = False,
              max_norm: float | None = None) -> IntegrationResult:
    """Integrate from ``h0`` and snapshot at every horizon of ``config``.

    With a ``schedule``, ``objective`` maps batch ids to objectives (a
    sequence or a callable) and is swapped at segment boundaries; the
    accumulator then holds the sum of per-segment integrals. Divergence
    returns the snapshots reached so far with ``aborted`` set.
    """
    targets = config.horizon_steps()
    n_total = targets[-1]
    if schedule is not None:
        ends, ids = schedule.step_boundaries(config.dt)
        if ends[-1] < n_total:
            raise ValueError(
                f"schedule spans {schedule.total_time} < last horizon {config.horizon_grid[-1]}")
    elif not isinstance(objective, Objective):
        raise TypeError("a batch-indexed objective needs a schedule")

    h = np.array(h0, dtype=float).ravel()
    acc = 0.0
    result = IntegrationResult(snapshots=[])
    if keep_path:
        result.path.append(FlowState(0.0, h.copy(), 0.0))

    seg = 0
    current = _resolve(objective, int(ids[0])) if schedule is not None else objective
    next_target = 0
    while next_target < len(targets) and targets[next_target] == 0:
        result.snapshots.append((config.horizon_grid[next_target], FlowState(0.0, h.copy(), 0.0)))
        next_target += 1

    for n in range(n_total):
        if schedule is not None and n >= ends[seg]:
            while n >= ends[seg]:
                seg += 1
            current = _resolve(objective, int(ids[seg]))
        try:
            h, acc = _advance(h, acc, current, config.dt, config.scheme, config.accumulator)
            if max_norm is not None:
                norm = float(np.linalg.norm(h))
                if norm > max_norm:
                    raise FlowDivergence(f"|h|={norm:.3e} exceeded max_norm={max_norm:.3e}")
        except FlowDivergence as exc:
            result.aborted = True
            result.message = f"step {n} (t={n * config.dt:.6g}): {exc}"
            return result
        t = (n + 1) * config.dt
        if keep_path:
            result.path.append(FlowState(t, h.copy(), acc))
        while next_target < len(targets) and targets[next_target] == n + 1:
            result.snapshots.append((config.horizon_grid[next_target], FlowState(t, h.copy(), acc)))
            next_target += 1
    return result


def complexity_term(prior: PriorSpec, h0: np.ndarray, hT: np.ndarray,
                    laplacian_integral: float) -> float:
    """log rho0(h0)/rho0(hT) + integral of the Laplacian along the path."""
    return prior.log_ratio(h0, hT) + laplacian_integral


def one_d_laplacian_closed_form(objective: Objective, h0: float, hT: float) -> float:
    """log|C'(h0)| - log|C'(hT)|, the 1-D value of the Laplacian integral."""
    d0 = float(objective.gradient(np.array([h0], dtype=float))[0])
    dT = float(objective.gradient(np.array([hT], dtype=float))[0])
    if d0 == 0.0 or dT == 0.0:
        raise UndefinedResult("derivative vanishes at an endpoint")
    if (d0 > 0) != (dT > 0):
        raise UndefinedResult("derivative changes sign: the path crossed a critical point")
    return math.log(abs(d0)) - math.log(abs(dT))


def tangent_divergence(objective: Objective, h: np.ndarray, step: float | None = None) -> float:
    """div tau at ``h`` for tau = -grad C / |grad C|, by central differences."""
    h = np.asarray(h, dtype=float)
    eps = 1e-4 * (1.0 + float(np.linalg.norm(h))) if step is None else step

    def tau(x):
        g = objective.gradient(x)
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            raise UndefinedResult("gradient vanishes: tangent undefined")
        return -g / norm

    total = 0.0
    x = h.copy()
    for i in range(h.size):
        x[i] = h[i] + eps
        up = tau(x)[i]
        x[i] = h[i] - eps
        down = tau(x)[i]
        x[i] = h[i]
        total += (up - down) / (2.0 * eps)
    return total


def divergence_decomposition(trajectory: Sequence[FlowState],
                             objective: Objective) -> tuple[float, float]:
    """Compare the accumulated Laplacian with its gradient-norm / curvature form.

    Returns ``(lhs, rhs)`` with ``lhs`` the tracked integral and
    ``rhs = log(|grad C(h0)| / |grad C(hT)|) - line integral of div tau``.
    The line integral is evaluated in time, since |dh| = |grad C| dt.
    """
    if len(trajectory) < 3:
        raise ValueError("need at least three stored states for quadrature")
    ts = np.array([s.t for s in trajectory])
    norms = np.empty(len(trajectory))
    divs = np.empty(len(trajectory))
    for i, s in enumerate(trajectory):
        norms[i] = float(np.linalg.norm(objective.gradient(s.h)))
        if norms[i] == 0.0:
            raise UndefinedResult(f"gradient vanishes on the path at t={s.t}")
        divs[i] = tangent_divergence(objective, s.h)
    line_integral = float(simpson(divs * norms, x=ts))
    lhs = trajectory[-1].laplacian_integral - trajectory[0].laplacian_integral
    rhs = math.log(norms[0] / norms[-1]) - line_integral
    return lhs, rhs


class _AscentField(Objective):
    """Reverse-time field: the gradient is negated, the Laplacian is kept.

    Stepping this forward integrates dg/dtau = +grad C(g) while the
    accumulator collects the integral of Laplacian C along g.
    """

    def __init__(self, objective: Objective):
        self.objective = objective

    def value(self, h):
        return -self.objective.value(h)

    def gradient(self, h):
        return -self.objective.gradient(h)

    def laplacian(self, h):
        return self.objective.laplacian(h)

    def gradient_and_laplacian(self, h):
        g, lap = self.objective.gradient_and_laplacian(h)
        return -g, lap


def backward_integrate(hT: np.ndarray, objective: Objective, span: float,
                       config: IntegratorConfig, keep_path: bool = False,
                       max_norm: float = 1e12) -> IntegrationResult:
    """Run the flow of ``objective`` backwards in time for ``span`` from ``hT``.

    The returned final state holds the point the forward flow would start
    from to reach ``hT`` after ``span``, and its ``laplacian_integral`` is the
    integral of the Laplacian along that reverse path (positive orientation).
    """
    hT = np.array(hT, dtype=float).ravel()
    if span == 0:
        state = FlowState(0.0, hT.copy(), 0.0)
        return IntegrationResult(snapshots=[(0.0, state)], path=[state] if keep_path else [])
    cfg = IntegratorConfig(scheme=config.scheme, dt=config.dt, horizon_grid=(span,),
                           accumulator=config.accumulator)
    result = integrate(hT, _AscentField(objective), cfg, keep_path=keep_path, max_norm=max_norm)
    if result.aborted:
        raise FlowDivergence(f"backward flow blew up: {result.message}")
    return result


@dataclass(frozen=True)
class DataDependentComplexity:
    """Itemized complexity under a prior learned by flowing on held-out data."""

    log_density_ratio: float
    prior_phase_integral: float
    backward_integral: float
    train_phase_integral: float

    @property
    def laplacian_terms(self) -> float:
        return (self.prior_phase_integral - self.backward_integral) + self.train_phase_integral

    @property
    def total(self) -> float:
        return self.log_density_ratio + (self.prior_phase_integral - self.backward_integral) \
            + self.train_phase_integral


def data_dependent_complexity(prior0: PriorSpec, h_t0: np.ndarray, hT: np.ndarray,
                              prior_phase_integral: float, train_phase_integral: float,
                              objective_prior_phase: Objective, t0: float,
                              config: IntegratorConfig) -> DataDependentComplexity:
    """Complexity when the prior is rho0 flowed for ``t0`` on the auxiliary objective.

    ``h_t0`` and ``prior_phase_integral`` come from the first phase (auxiliary
    objective on [0, t0]); ``hT`` and ``train_phase_integral`` from the second
    (training objective on [t0, T]). The auxiliary flow is run backwards from
    ``hT`` for ``t0`` to locate where the prior mass at ``hT`` came from.
    """
    back = backward_integrate(hT, objective_prior_phase, t0, config)
    h_hat = back.final.h
    return DataDependentComplexity(
        log_density_ratio=prior0.log_ratio(h_t0, h_hat),
        prior_phase_integral=prior_phase_integral,
        backward_integral=back.final.laplacian_integral,
        train_phase_integral=train_phase_integral,
    )


@dataclass
class DataDependentSnapshot:
    T: float
    h_t0: np.ndarray
    state: FlowState
    complexity: DataDependentComplexity


def data_dependent_flow(prior0: PriorSpec, h0: np.ndarray, objective_prior_phase: Objective,
                        objective_train_phase: Objective, t0: float,
                        config: IntegratorConfig) -> list[DataDependentSnapshot]:
    """Two-phase training with a data-dependent prior, one entry per horizon.

    Horizons in ``config`` are absolute times and must all exceed ``t0``.
    """
    if t0 < 0:
        raise ValueError(f"t0 must be nonnegative, got {t0}")
    if any(T <= t0 for T in config.horizon_grid):
        raise ValueError("every horizon must exceed t0")
    if t0 > 0:
        phase1 = integrate(h0, objective_prior_phase,
                           IntegratorConfig(config.scheme, config.dt, (t0,), config.accumulator))
        if phase1.aborted:
            raise FlowDivergence(phase1.message)
        h_t0, i1 = phase1.final.h, phase1.final.laplacian_integral
    else:
        h_t0, i1 = np.array(h0, dtype=float).ravel(), 0.0
    phase2_cfg = IntegratorConfig(config.scheme, config.dt,
                                  tuple(T - t0 for T in config.horizon_grid), config.accumulator)
    phase2 = integrate(h_t0, objective_train_phase, phase2_cfg)
    if phase2.aborted:
        raise FlowDivergence(phase2.message)
    out = []
    for T, (_, state) in zip(config.horizon_grid, phase2.snapshots):
        cx = data_dependent_complexity(prior0, h_t0, state.h, i1, state.laplacian_integral,
                                       objective_prior_phase, t0, config)
        out.append(DataDependentSnapshot(T=T, h_t0=h_t0,
                                         state=FlowState(T, state.h, state.laplacian_integral),
                                         complexity=cx))
    return out


TRAJECTORY_COLUMNS = ("t", "h_norm", "laplacian_integral", "objective_value")


def trajectory_rows(states: Sequence[FlowState], objective: Objective) -> list[dict]:
    return [
        {
            "t": s.t,
            "h_norm": float(np.linalg.norm(s.h)),
            "laplacian_integral": s.laplacian_integral,
            "objective_value": objective.value(s.h),
        }
        for s in states
    ]


def write_trajectory_csv(fh, states: Sequence[FlowState], objective: Objective) -> None:
    writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(trajectory_rows(states, objective))


class CorrectedObjective(Objective):
    """C + eps |grad C|^2, the modified objective whose flow tracks Euler steps.

    The gradient uses a central-difference Hessian-vector product of the
    wrapped objective's gradient; the Laplacian is the finite-difference trace
    of that gradient, costing O(N) gradient calls. Verification use only.
    """

    def __init__(self, objective: Objective, epsilon: float):
        self.objective = objective
        self.epsilon = float(epsilon)

    def value(self, h):
        g = self.objective.gradient(h)
        return self.objective.value(h) + self.epsilon * float(g @ g)

    def gradient(self, h):
        h = np.asarray(h, dtype=float)
        g = self.objective.gradient(h)
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            return g
        e = 1e-5 * (1.0 + float(np.linalg.norm(h)))
        u = g / norm
        hess_g = norm * (self.objective.gradient(h + e * u) - self.objective.gradient(h - e * u)) / (2 * e)
        return g + 2.0 * self.epsilon * hess_g

    def laplacian(self, h):
        h = np.asarray(h, dtype=float)
        eps = 1e-4 * (1.0 + float(np.linalg.norm(h)))
        x = h.copy()
        total = 0.0
        for i in range(h.size):
            x[i] = h[i] + eps
            up = self.gradient(x)[i]
            x[i] = h[i] - eps
            down = self.gradient(x)[i]
            x[i] = h[i]
            total += (up - down) / (2 * eps)
        return total


def backward_error_corrected_objective(objective: Objective, epsilon: float) -> Objective:
    if epsilon == 0:
        return objective
    return CorrectedObjective(objective, epsilon)
