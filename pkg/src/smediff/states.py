"""Density matrices, operator sets and the superoperators built from them.

Every kernel here broadcasts over leading axes: ``rho`` may be a single
``(N, N)`` matrix or a stack ``(..., N, N)`` of them, which is how the
simulators advance whole ensembles in one call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
POSITIVITY_TOL = 1e-9
OPERATOR_HERMITIAN_TOL = 1e-12
DEGENERATE_INTENSITY = 1e-14
CONDITION_TOL = 1e-12

SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.conj().T
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)


class DimensionMismatchError(ValueError):
    """Operands of incompatible matrix dimension."""

    def __init__(self, what: str, expected: int, got: int):
        super().__init__(f"{what}: expected dimension {expected}, got {got}")
        self.what = what
        self.expected = expected
        self.got = got


class InvalidStateError(ValueError):
    """A matrix that fails the density-matrix invariants."""


class StateProjectionError(ArithmeticError):
    """Projection back onto the state set failed (integration blow-up).

    ``time`` and ``channel`` are filled in by the simulators when known.
    """

    def __init__(self, message: str, time: float | None = None,
                 channel: str | None = None, trajectory: int | None = None):
        self.time = time
        self.channel = channel
        self.trajectory = trajectory
        details = [message]
        if time is not None:
            details.append(f"t={time:.6g}")
        if channel is not None:
            details.append(f"channel={channel}")
        if trajectory is not None:
            details.append(f"trajectory={trajectory}")
        super().__init__(", ".join(details))


def dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def trace(m: np.ndarray) -> np.ndarray:
    return np.trace(m, axis1=-2, axis2=-1)


def frobenius(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(m) ** 2, axis=(-2, -1)))


def as_matrix(m, dim: int | None = None, what: str = "matrix") -> np.ndarray:
    """Coerce to a finite square complex128 array, optionally checking ``dim``."""
    a = np.asarray(getattr(m, "matrix", m), dtype=complex)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or a.shape[-1] < 1:
        raise ValueError(f"{what} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} has non-finite entries")
    if dim is not None and a.shape[-1] != dim:
        raise DimensionMismatchError(what, dim, a.shape[-1])
    return a


def state_violations(rho: np.ndarray) -> dict:
    """Largest Hermiticity, trace and positivity defects of ``rho``."""
    rho = np.asarray(rho, dtype=complex)
    herm = frobenius(rho - dagger(rho))
    tr = np.abs(trace(rho) - 1.0)
    lam = np.linalg.eigvalsh((rho + dagger(rho)) / 2)[..., 0]
    return {"hermitian": float(np.max(herm)), "trace": float(np.max(tr)),
            "min_eigenvalue": float(np.min(lam))}


def is_state(rho: np.ndarray) -> bool:
    v = state_violations(rho)
    return (v["hermitian"] <= HERMITIAN_TOL and v["trace"] <= TRACE_TOL
            and v["min_eigenvalue"] >= -POSITIVITY_TOL)


@dataclass(frozen=True)
class DensityMatrix:
    """A validated ``N x N`` state (Hermitian, positive, unit trace)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = as_matrix(self.matrix, what="density matrix")
        if m.ndim != 2:
            raise ValueError("DensityMatrix holds a single matrix")
        v = state_violations(m)
        if v["hermitian"] > HERMITIAN_TOL:
            raise InvalidStateError(f"not Hermitian (defect {v['hermitian']:.3g})")
        if v["trace"] > TRACE_TOL:
            raise InvalidStateError(f"trace differs from 1 by {v['trace']:.3g}")
        if v["min_eigenvalue"] < -POSITIVITY_TOL:
            raise InvalidStateError(
                f"negative eigenvalue {v['min_eigenvalue']:.3g}")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def pure(cls, vector) -> "DensityMatrix":
        v = np.asarray(vector, dtype=complex)
        v = v / np.linalg.norm(v)
        return cls(np.outer(v, v.conj()))

    @classmethod
    def maximally_mixed(cls, dim: int) -> "DensityMatrix":
        return cls(np.eye(dim, dtype=complex) / dim)

    def expect(self, observable) -> float:
        return float(np.real(np.trace(as_matrix(observable, self.dim) @ self.matrix)))


@dataclass(frozen=True)
class Observable:
    """Hermitian matrix ``B`` used through the scalar ``Tr[B rho]``."""

    matrix: np.ndarray
    label: str = "B"

    def __post_init__(self):
        m = as_matrix(self.matrix, what=f"observable {self.label}")
        if frobenius(m - dagger(m)) > OPERATOR_HERMITIAN_TOL:
            raise ValueError(f"observable {self.label} is not Hermitian")
        object.__setattr__(self, "matrix", m)

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        """``Tr[B rho]`` for one state or a stack of states."""
        return np.real(np.einsum("ij,...ji->...", self.matrix, rho))


def _pairs(items) -> tuple:
    out = []
    for label, m in items:
        out.append((str(label), as_matrix(m, what=f"operator {label}")))
    return tuple(out)


@dataclass(frozen=True)
class OperatorSet:
    """Hamiltonian plus diffusive, jump and scaled-jump channels.

    ``jump_ops`` are the unscaled counting channels ``D_i``. Each entry of
    ``scaled_jump_ops`` is a base operator ``A_j``; the jump operator actually
    used for it is ``A_j + I/epsilon``.
    """

    H: np.ndarray
    diffusive_ops: tuple = ()
    jump_ops: tuple = ()
    scaled_jump_ops: tuple = ()
    epsilon: float | None = None

    def __post_init__(self):
        H = as_matrix(self.H, what="H")
        if H.ndim != 2:
            raise ValueError("H must be a single matrix")
        n = H.shape[0]
        if frobenius(H - dagger(H)) > OPERATOR_HERMITIAN_TOL:
            raise ValueError("H is not Hermitian")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "diffusive_ops", tuple(
            as_matrix(c, n, what=f"C[{k}]") for k, c in enumerate(self.diffusive_ops)))
        jumps = _pairs(self.jump_ops)
        scaled = _pairs(self.scaled_jump_ops)
        for label, m in jumps + scaled:
            if m.shape != (n, n):
                raise DimensionMismatchError(f"operator {label}", n, m.shape[-1])
        labels = [lab for lab, _ in jumps + scaled]
        if len(set(labels)) != len(labels):
            raise ValueError(f"jump labels must be unique, got {labels}")
        object.__setattr__(self, "jump_ops", jumps)
        object.__setattr__(self, "scaled_jump_ops", scaled)
        if self.epsilon is not None:
            eps = float(self.epsilon)
            if not eps > 0:
                raise ValueError("epsilon must be positive")
            object.__setattr__(self, "epsilon", eps)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def with_epsilon(self, epsilon: float) -> "OperatorSet":
        return OperatorSet(self.H, self.diffusive_ops, self.jump_ops,
                           self.scaled_jump_ops, epsilon)

    def scaled_operators(self) -> tuple:
        """``(label, A_j + I/epsilon)`` for the scaled channels."""
        if self.scaled_jump_ops and self.epsilon is None:
            raise ValueError("scaled jump channels need epsilon")
        eye = np.eye(self.dim, dtype=complex)
        return tuple((lab, a + eye / self.epsilon) for lab, a in self.scaled_jump_ops)

    def jump_channels(self, scaled_as: str = "scaled_D_eps") -> tuple:
        """All counting channels, the scaled ones in the requested form."""
        if scaled_as == "scaled_D_eps":
            return self.jump_ops + self.scaled_operators()
        if scaled_as == "base_A":
            return self.jump_ops + self.scaled_jump_ops
        raise ValueError(f"unknown mode {scaled_as!r}")

    def limit_diffusive_ops(self) -> tuple:
        """Diffusive operators of the limit equation: the ``C_i`` then the ``A_j``."""
        return self.diffusive_ops + tuple(a for _, a in self.scaled_jump_ops)

    def to_dict(self) -> dict:
        def enc(m):
            return [[[float(z.real), float(z.imag)] for z in row] for row in m]

        return {
            "dim": self.dim,
            "H": enc(self.H),
            "C": [enc(c) for c in self.diffusive_ops],
            "D": [{"label": lab, "matrix": enc(m)} for lab, m in self.jump_ops],
            "A_scaled": [{"label": lab, "matrix": enc(m)}
                         for lab, m in self.scaled_jump_ops],
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OperatorSet":
        dim = int(doc["dim"])

        def dec(rows):
            a = np.array(rows, dtype=float)
            if a.shape != (dim, dim, 2):
                raise DimensionMismatchError("serialized matrix", dim, a.shape[0])
            return a[..., 0] + 1j * a[..., 1]

        return cls(
            H=dec(doc["H"]),
            diffusive_ops=[dec(c) for c in doc.get("C", [])],
            jump_ops=[(d["label"], dec(d["matrix"])) for d in doc.get("D", [])],
            scaled_jump_ops=[(d["label"], dec(d["matrix"]))
                             for d in doc.get("A_scaled", [])],
            epsilon=doc.get("epsilon"),
        )

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "OperatorSet":
        return cls.from_dict(json.loads(text))


def _check_dim(ops: OperatorSet, rho: np.ndarray) -> np.ndarray:
    rho = as_matrix(rho, what="rho")
    if rho.shape[-1] != ops.dim:
        raise DimensionMismatchError("rho", ops.dim, rho.shape[-1])
    return rho


def dissipator(K: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``K rho K^dag - 1/2 {K^dag K, rho}``."""
    KdK = dagger(K) @ K
    return K @ rho @ dagger(K) - 0.5 * (KdK @ rho + rho @ KdK)


def lindblad_apply(ops: OperatorSet, rho, scaled_as: str = "base_A") -> np.ndarray:
    """Evaluate the Lindblad generator on ``rho``.

    Sums the dissipators of every diffusive and jump channel. The scaled
    channels enter through ``A_j`` (``scaled_as="base_A"``) or through
    ``A_j + I/epsilon`` (``"scaled_D_eps"``); the two agree exactly when the
    scaled operators satisfy the balance condition.
    """
    rho = _check_dim(ops, rho)
    H = ops.H
    out = -1j * (H @ rho - rho @ H)
    for C in ops.diffusive_ops:
        out = out + dissipator(C, rho)
    for _, D in ops.jump_channels(scaled_as):
        out = out + dissipator(D, rho)
    return out


class JumpResult(NamedTuple):
    state: np.ndarray
    intensity: float | np.ndarray
    degenerate: bool | np.ndarray


def jump_map(D, rho) -> JumpResult:
    """Post-jump state ``D rho D^dag / Tr[D rho D^dag]`` and the jump intensity.

    Where the intensity is below ``DEGENERATE_INTENSITY`` the channel cannot
    fire; the input state is returned unchanged and flagged degenerate.
    """
    D = as_matrix(D, what="D")
    rho = as_matrix(rho, what="rho")
    if D.shape[-1] != rho.shape[-1]:
        raise DimensionMismatchError("D", rho.shape[-1], D.shape[-1])
    num = D @ rho @ dagger(D)
    intensity = np.real(trace(num))
    degenerate = intensity <= DEGENERATE_INTENSITY
    safe = np.where(degenerate, 1.0, intensity)
    state = np.where(np.asarray(degenerate)[..., None, None], rho,
                     num / np.asarray(safe)[..., None, None])
    if np.ndim(intensity) == 0:
        return JumpResult(state, float(max(intensity, 0.0)), bool(degenerate))
    return JumpResult(state, np.maximum(intensity, 0.0), degenerate)


def diffusive_drift(A, rho) -> np.ndarray:
    """``A rho + rho A^dag - Tr[rho (A + A^dag)] rho``."""
    A = as_matrix(A, what="A")
    rho = as_matrix(rho, what="rho")
    if A.shape[-1] != rho.shape[-1]:
        raise DimensionMismatchError("A", rho.shape[-1], A.shape[-1])
    Arho = A @ rho
    m = Arho + dagger(Arho)
    return m - np.real(trace(m))[..., None, None] * rho


def check_condition(scaled_jump_ops: Sequence) -> float:
    """Frobenius norm of ``sum_j (A_j - A_j^dag)``; zero means the balance holds.

    Accepts bare matrices or ``(label, matrix)`` pairs.
    """
    mats = [m[1] if isinstance(m, tuple) else m for m in scaled_jump_ops]
    if not mats:
        raise ValueError("need at least one scaled operator")
    total = sum(as_matrix(a) - dagger(as_matrix(a)) for a in mats)
    return float(frobenius(total))


def _min_eigenvalue(rho: np.ndarray) -> np.ndarray:
    if rho.shape[-1] == 2:
        a = np.real(rho[..., 0, 0])
        d = np.real(rho[..., 1, 1])
        b = np.abs(rho[..., 0, 1])
        half = 0.5 * (a + d)
        return half - np.sqrt(0.25 * (a - d) ** 2 + b * b)
    return np.linalg.eigvalsh(rho)[..., 0]


def project_to_state(M) -> np.ndarray:
    """Nearest-state repair after a discrete step.

    Hermitizes, clips negative eigenvalues to zero and renormalizes the
    trace. States that are already valid come back unchanged up to the
    Hermitize/renormalize round-off. Works on stacks.
    """
    M = as_matrix(M, what="M")
    tr0 = np.real(trace(M))
    if not np.all(np.abs(tr0 - 1.0) <= 0.5):
        raise StateProjectionError(
            f"trace {float(np.max(np.abs(tr0 - 1.0))) + 1:.6g} too far from 1")
    rho = 0.5 * (M + dagger(M))
    lam_min = _min_eigenvalue(rho)
    bad = lam_min < 0
    if np.any(bad):
        sub = rho[bad] if rho.ndim > 2 else rho
        w, v = np.linalg.eigh(sub)
        w = np.clip(w, 0.0, None)
        fixed = (v * w[..., None, :]) @ dagger(v)
        if rho.ndim > 2:
            rho = rho.copy()
            rho[bad] = fixed
        else:
            rho = fixed
    tr = np.real(trace(rho))
    if np.any(tr <= 0):
        raise StateProjectionError("trace vanished after clipping")
    return rho / tr[..., None, None]


def random_state(rng: np.random.Generator, dim: int, rank: int | None = None) -> np.ndarray:
    """Haar-random eigenbasis with a flat Dirichlet spectrum.

    ``rank`` restricts the spectrum to that many nonzero eigenvalues.
    """
    z = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(z)
    q = q * (np.diag(r) / np.abs(np.diag(r)))
    k = dim if rank is None else rank
    p = np.zeros(dim)
    p[:k] = rng.dirichlet(np.ones(k))
    return (q * p) @ q.conj().T


def random_states(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    return np.stack([random_state(rng, dim) for _ in range(count)])
