"""Homodyne and heterodyne detection models of a driven two-level atom."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simulate import Modulation
from .states import SIGMA_MINUS, SIGMA_X, OperatorSet, as_matrix, dagger, trace


def _hamiltonian(hamiltonian, rabi: float) -> np.ndarray:
    if hamiltonian is None:
        return 0.5 * rabi * SIGMA_X
    return as_matrix(hamiltonian, 2, what="hamiltonian")


@dataclass(frozen=True)
class HomodyneParams:
    """Homodyne setup; ``epsilon = sqrt(2) / (sqrt(gamma0) |beta|)``.

    Without an explicit ``hamiltonian`` the atom is Rabi driven,
    ``H = (rabi/2) sigma_x``.
    """

    gamma0: float = 1.0
    theta: float = 0.0
    epsilon: float = 0.1
    rabi: float = 1.0
    hamiltonian: np.ndarray | None = None

    def __post_init__(self):
        if not self.gamma0 >= 0:
            raise ValueError("gamma0 must be nonnegative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def from_amplitude(cls, gamma0: float, beta_abs: float, **kw) -> "HomodyneParams":
        return cls(gamma0=gamma0, epsilon=np.sqrt(2) / (np.sqrt(gamma0) * beta_abs), **kw)

    @property
    def H(self) -> np.ndarray:
        return _hamiltonian(self.hamiltonian, self.rabi)

    @property
    def C(self) -> np.ndarray:
        """Rotated lowering operator ``sigma_- e^{-i theta}``."""
        return SIGMA_MINUS * np.exp(-1j * self.theta)


@dataclass(frozen=True)
class HeterodyneParams:
    gamma0: float = 1.0
    theta: float = 0.0
    delta: float = 20.0
    rabi: float = 1.0
    hamiltonian: np.ndarray | None = None

    def __post_init__(self):
        if not self.gamma0 >= 0:
            raise ValueError("gamma0 must be nonnegative")
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    @property
    def H(self) -> np.ndarray:
        return _hamiltonian(self.hamiltonian, self.rabi)

    @property
    def C(self) -> np.ndarray:
        return SIGMA_MINUS * np.exp(-1j * self.theta)


def homodyne_base_operators(p: HomodyneParams) -> tuple:
    a = np.sqrt(p.gamma0 / 2) * p.C
    return -a, a


def build_homodyne_jump(p: HomodyneParams) -> OperatorSet:
    """Two photodetectors, jump operators ``-/+ sqrt(gamma0/2) C + I/eps``."""
    a1, a2 = homodyne_base_operators(p)
    return OperatorSet(H=p.H, scaled_jump_ops=[("D1", a1), ("D2", a2)],
                       epsilon=p.epsilon)


def build_homodyne_limit(p: HomodyneParams, combined: bool = False) -> OperatorSet:
    """Diffusive homodyne equation.

    ``combined=False`` keeps one Brownian motion per detector (channels
    ``A_1, A_2``); ``combined=True`` merges them into the single channel
    ``sqrt(gamma0) C``.
    """
    if combined:
        return OperatorSet(H=p.H, diffusive_ops=[np.sqrt(p.gamma0) * p.C])
    return OperatorSet(H=p.H, diffusive_ops=list(homodyne_base_operators(p)))


def _h(K, rho, sign=1.0):
    Kr = K @ rho
    m = Kr + sign * dagger(Kr)
    return m - trace(m)[..., None, None] * rho


def heterodyne_h_plus(p: HeterodyneParams, rho) -> np.ndarray:
    return np.sqrt(p.gamma0 / 2) * _h(p.C, as_matrix(rho), 1.0)


def heterodyne_h_minus(p: HeterodyneParams, rho) -> np.ndarray:
    """``sqrt(gamma0/2) (C rho - rho C^dag - Tr[rho (C - C^dag)] rho)``; anti-Hermitian."""
    return np.sqrt(p.gamma0 / 2) * _h(p.C, as_matrix(rho), -1.0)


def heterodyne_coefficient(p: HeterodyneParams, s: float, rho) -> np.ndarray:
    """Noise coefficient of the detuned equation at time ``s``, with ``C(s) = C e^{i delta s}``."""
    Cs = p.C * np.exp(1j * p.delta * s)
    return np.sqrt(p.gamma0) * _h(Cs, as_matrix(rho), 1.0)


def build_heterodyne(p: HeterodyneParams) -> tuple:
    """Single-noise heterodyne model: ``(ops, modulation)`` for the simulators."""
    ops = OperatorSet(H=p.H, diffusive_ops=[np.sqrt(p.gamma0) * p.C])
    return ops, Modulation(p.delta)


def build_heterodyne_limit(p: HeterodyneParams) -> OperatorSet:
    """Two-noise limit: channels ``sqrt(gamma0/2) C`` and ``i sqrt(gamma0/2) C``.

    Their noise coefficients are exactly ``h_+`` and ``i h_-``.
    """
    a = np.sqrt(p.gamma0 / 2) * p.C
    return OperatorSet(H=p.H, diffusive_ops=[a, 1j * a])
