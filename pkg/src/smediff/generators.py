"""Markov generators of the jump and limit equations evaluated on test functionals.

The jump-equation generator acts as

    A_eps f(rho) = Df(L_eps(rho))
                   + sum_i [f(J_i rho) - f(rho) - Df(J_i rho - rho)] Tr[D_i rho D_i^dag]

over all counting channels (scaled ones through ``A_j + I/eps``), and the
limit generator replaces the scaled-channel brackets by
``1/2 D^2 f(h_j(rho), h_j(rho))``. Both broadcast over stacks of states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simulate import Modulation
from .states import (
    CONDITION_TOL,
    Observable,
    OperatorSet,
    as_matrix,
    check_condition,
    diffusive_drift,
    jump_map,
    lindblad_apply,
    random_state,
)

KINDS = ("linear", "quadratic", "bilinear")


def _tr(B: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.einsum("ij,...ji->...", B, X)


@dataclass(frozen=True)
class TestFunctional:
    """Polynomial functional of the state with exact derivatives.

    ``linear``: ``Tr[B rho]``; ``quadratic``: ``Tr[B rho]^2``;
    ``bilinear``: ``Tr[B1 rho] Tr[B2 rho]``.
    """

    __test__ = False  # not a pytest class

    kind: str
    B1: Observable
    B2: Observable | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.kind == "bilinear" and self.B2 is None:
            raise ValueError("bilinear functional needs two observables")

    @classmethod
    def linear(cls, B) -> "TestFunctional":
        return cls("linear", _obs(B))

    @classmethod
    def quadratic(cls, B) -> "TestFunctional":
        return cls("quadratic", _obs(B))

    @classmethod
    def bilinear(cls, B1, B2) -> "TestFunctional":
        return cls("bilinear", _obs(B1), _obs(B2))

    def _parts(self, X):
        b1 = _tr(self.B1.matrix, X)
        b2 = _tr(self.B2.matrix, X) if self.B2 is not None else b1
        return b1, b2

    def __call__(self, rho) -> np.ndarray:
        a, b = self._parts(rho)
        if self.kind == "linear":
            return np.real(a)
        return np.real(a * b)

    def d1(self, rho, X) -> np.ndarray:
        """First differential ``D_rho f(X)``."""
        if self.kind == "linear":
            return np.real(_tr(self.B1.matrix, X))
        r1, r2 = self._parts(rho)
        x1, x2 = self._parts(X)
        return np.real(x1 * r2 + r1 * x2)

    def d2(self, rho, X, Y) -> np.ndarray:
        """Second differential ``D^2_rho f(X, Y)``; independent of ``rho``."""
        if self.kind == "linear":
            return np.zeros(np.shape(_tr(self.B1.matrix, X)))
        x1, x2 = self._parts(X)
        y1, y2 = self._parts(Y)
        return np.real(x1 * y2 + y1 * x2)


def _obs(B) -> Observable:
    return B if isinstance(B, Observable) else Observable(as_matrix(B))


@dataclass(frozen=True)
class WeightFunctional:
    """A bounded factor ``theta(rho_{t_i})`` of the martingale test."""

    theta: TestFunctional
    time: float


def _jump_brackets(f: TestFunctional, channels, rho) -> np.ndarray:
    total = 0.0
    for _, D in channels:
        res = jump_map(D, rho)
        bracket = f(res.state) - f(rho) - f.d1(rho, res.state - rho)
        total = total + np.where(res.degenerate, 0.0, bracket * res.intensity)
    return total


def _diffusion_terms(f: TestFunctional, ops_list, rho, phases=None) -> np.ndarray:
    total = 0.0
    for k, C in enumerate(ops_list):
        if phases is not None:
            C = C * phases[k]
        h = diffusive_drift(C, rho)
        total = total + 0.5 * f.d2(rho, h, h)
    return total


def generator_eps(f: TestFunctional, ops: OperatorSet, rho, epsilon: float | None = None) -> np.ndarray:
    """Generator of the epsilon-scaled jump equation applied to ``f`` at ``rho``."""
    if epsilon is not None:
        ops = ops.with_epsilon(epsilon)
    rho = as_matrix(rho, ops.dim, what="rho")
    out = f.d1(rho, lindblad_apply(ops, rho, "scaled_D_eps"))
    out = out + _jump_brackets(f, ops.jump_channels("scaled_D_eps"), rho)
    out = out + _diffusion_terms(f, ops.diffusive_ops, rho)
    return out


def generator_limit(f: TestFunctional, ops: OperatorSet, rho, s: float = 0.0,
                    modulation: Modulation | None = None) -> np.ndarray:
    """Generator of the limit equation; the scaled channels act diffusively.

    With ``modulation`` the diffusive coefficients are rotated to time ``s``.
    """
    rho = as_matrix(rho, ops.dim, what="rho")
    out = f.d1(rho, lindblad_apply(ops, rho, "base_A"))
    out = out + _jump_brackets(f, ops.jump_ops, rho)
    diff_ops = ops.limit_diffusive_ops()
    phases = modulation.phases(len(diff_ops), s) if modulation is not None else None
    out = out + _diffusion_terms(f, diff_ops, rho, phases)
    return out


def sample_states(count: int, dim: int, seed: int = 0) -> np.ndarray:
    """Haar eigenbasis with Dirichlet(1, ..., 1) spectrum, ``count`` times."""
    rng = np.random.default_rng(seed)
    return np.stack([random_state(rng, dim) for _ in range(count)])


def fit_order(eps, values) -> float:
    """Least-squares slope of ``log(values)`` against ``log(eps)``."""
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    return float(np.polyfit(np.log(eps), np.log(values), 1)[0])


EXACT_AGREEMENT = 1e-9


@dataclass
class ScanResult:
    epsilons: list
    sup_diff: list
    fitted_order: float
    condition_residual: float
    sample_count: int
    exact: bool = False
    sup_generator: list = field(default_factory=list)

    @property
    def converges(self) -> bool:
        return self.exact or self.fitted_order >= 0.9

    @property
    def diverges(self) -> bool:
        return not self.exact and self.fitted_order <= -0.9

    def rows(self) -> list:
        return [(e, d, self.fitted_order) for e, d in zip(self.epsilons, self.sup_diff)]

    def verdict(self) -> dict:
        return {"condition_residual": self.condition_residual,
                "converges": bool(self.converges)}


def uniform_convergence_scan(f: TestFunctional, ops: OperatorSet, epsilons,
                             sample_count: int = 100, seed: int = 0) -> ScanResult:
    """Sampled sup of ``|A_eps f - A f|`` over states for each ``eps``.

    The sup is a maximum over ``sample_count`` sampled states, not a
    certified bound. If every difference stays below round-off the scan
    reports exact agreement and the order is not fitted.
    """
    eps = [float(e) for e in epsilons]
    if len(eps) < 3:
        raise ValueError("need at least three epsilon values")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon list must be strictly decreasing")
    if sample_count < 50:
        raise ValueError("sample_count must be at least 50")
    if not ops.scaled_jump_ops:
        raise ValueError("operator set has no scaled channels")
    rho = sample_states(sample_count, ops.dim, seed)
    limit = generator_limit(f, ops, rho)
    sups, gens = [], []
    for e in eps:
        g = generator_eps(f, ops, rho, epsilon=e)
        sups.append(float(np.max(np.abs(g - limit))))
        gens.append(float(np.max(np.abs(g))))
    residual = check_condition(ops.scaled_jump_ops)
    exact = max(sups) <= EXACT_AGREEMENT
    order = float("nan") if exact else fit_order(eps, sups)
    return ScanResult(eps, sups, order, residual, sample_count, exact, gens)


def condition_holds(ops: OperatorSet) -> bool:
    return check_condition(ops.scaled_jump_ops) <= CONDITION_TOL


def _grid_index(times: np.ndarray, t: float) -> int:
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} is not on the recorded grid")
    return k


def martingale_residual(f: TestFunctional, weights, states: np.ndarray, times, t: float,
                        s: float, generator) -> tuple:
    """Monte-Carlo estimate of the weighted martingale increment and its standard error.

    Estimates ``E[(f(rho_{t+s}) - f(rho_t) - int_t^{t+s} Af(rho_u) du) prod theta_i(rho_{t_i})]``
    from ``states`` of shape ``(n_traj, R, N, N)`` recorded at ``times``. The
    time integral is a trapezoid on the recorded grid. ``generator(rho, u)``
    evaluates ``Af`` on a stack of states at time ``u``.
    """
    states = np.asarray(states)
    times = np.asarray(times, dtype=float)
    if states.ndim != 4 or states.shape[1] != len(times):
        raise ValueError("states must be (n_traj, len(times), N, N)")
    i0 = _grid_index(times, t)
    i1 = _grid_index(times, t + s)
    weights = list(weights)
    if any(w.time > t + 1e-12 for w in weights):
        raise ValueError("weight times must not exceed t")
    integrand = np.stack([generator(states[:, k], times[k]) for k in range(i0, i1 + 1)], axis=1)
    integral = np.trapezoid(integrand, times[i0:i1 + 1], axis=1)
    z = f(states[:, i1]) - f(states[:, i0]) - integral
    for w in weights:
        z = z * w.theta(states[:, _grid_index(times, w.time)])
    n = len(z)
    se = float(np.std(z, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return float(np.mean(z)), se
