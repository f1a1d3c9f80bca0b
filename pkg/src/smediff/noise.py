"""Reproducible noise: Brownian increments and Poisson candidate points.

Each stream is a Philox generator whose key is derived from
``(master_seed, trajectory_index, channel)``, so any trajectory can be
regenerated on its own, in any order, by any worker.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .states import as_matrix, dagger

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class StreamKey:
    master_seed: int
    trajectory_index: int
    channel: str

    def philox_key(self) -> np.ndarray:
        payload = f"{self.master_seed & _MASK64}:{self.trajectory_index}:{self.channel}"
        digest = hashlib.blake2b(payload.encode(), digest_size=16).digest()
        return np.frombuffer(digest, dtype=np.uint64).copy()

    def stream(self) -> "Stream":
        return Stream(self)


def brownian_channel(k: int) -> str:
    return f"brownian-{k}"


class CandidateJump(NamedTuple):
    time: float
    mark_x: float


class Stream:
    """Random source for one (trajectory, channel) pair."""

    def __init__(self, key: StreamKey):
        self.key = key
        self.rng = np.random.Generator(np.random.Philox(key=key.philox_key()))

    def brownian_increment(self, dt: float) -> float:
        if not dt > 0:
            raise ValueError("dt must be positive")
        return float(self.rng.standard_normal() * np.sqrt(dt))

    def brownian_increments(self, dt: float, size) -> np.ndarray:
        if not dt > 0:
            raise ValueError("dt must be positive")
        return self.rng.standard_normal(size) * np.sqrt(dt)

    def uniforms(self, size) -> np.ndarray:
        return self.rng.random(size)

    def candidate_arrays(self, t0: float, t1: float, bound: float):
        """Times and marks of a rate-``bound`` Poisson process on ``[t0, t1)``.

        Marks are uniform on ``[0, bound)``; times are sorted.
        """
        if not t1 > t0:
            raise ValueError("need t1 > t0")
        if not bound > 0:
            raise ValueError("bound must be positive")
        n = self.rng.poisson(bound * (t1 - t0))
        times = np.sort(t0 + (t1 - t0) * self.rng.random(n))
        marks = bound * self.rng.random(n)
        return times, marks

    def candidate_jumps(self, t0: float, t1: float, bound: float) -> list[CandidateJump]:
        times, marks = self.candidate_arrays(t0, t1, bound)
        return [CandidateJump(float(t), float(x)) for t, x in zip(times, marks)]


def brownian_increment(stream: Stream, dt: float) -> float:
    return stream.brownian_increment(dt)


def candidate_jumps(stream: Stream, t0: float, t1: float, bound: float) -> list[CandidateJump]:
    return stream.candidate_jumps(t0, t1, bound)


def intensity_bound(D) -> float:
    """Exact supremum of ``Tr[D rho D^dag]`` over states: ``lambda_max(D^dag D)``."""
    D = as_matrix(D, what="D")
    if not np.any(D):
        raise ValueError("intensity bound of the zero operator is undefined")
    return float(np.linalg.eigvalsh(dagger(D) @ D)[-1])
