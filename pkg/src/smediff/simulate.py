"""Time integration of jump, diffusive and jump-diffusion master equations.

All simulators run on a batch of trajectories at once: the state array has
shape ``(n_traj, N, N)`` and every trajectory draws its noise from its own
keyed streams, so a trajectory's output depends only on
``(master_seed, trajectory_index)`` and not on the batch it ran in.

Jump channels are integrated either by

* ``thinning_exact``: candidates of a dominating Poisson process (rate equal
  to the exact intensity bound) are accepted when their mark falls under the
  current intensity; the deterministic flow between candidates is advanced
  with classical RK4.
* ``euler_bernoulli``: one Euler drift step per grid step, channel ``i``
  fires with probability ``min(1, Tr[D_i rho D_i^dag] dt)``.

Diffusive channels are advanced first in each grid step, from its left end.
The default ``kraus`` update applies ``M rho M^dag / Tr`` with a measurement
operator built from the innovation increments and stays inside the state
set; ``euler_maruyama`` adds the plain increment ``sum_k h_k(rho) dW_k``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .noise import StreamKey, brownian_channel, intensity_bound
from .states import (
    DensityMatrix,
    OperatorSet,
    DEGENERATE_INTENSITY,
    StateProjectionError,
    _min_eigenvalue,
    as_matrix,
    dagger,
    trace,
)

SCHEMES = ("thinning_exact", "euler_bernoulli")
DIFFUSION_SCHEMES = ("kraus", "euler_maruyama")
EULER_BERNOULLI_REGIME = 0.1


def default_dt(epsilon: float | None) -> float:
    """1e-3, shrunk to ``epsilon**2 / 10`` once the jump rate outgrows it."""
    if epsilon is None or epsilon >= 0.05:
        return 1e-3
    return epsilon**2 / 10


@dataclass(frozen=True)
class Modulation:
    """Diffusive coefficients rotating as ``C e^{i delta s}``.

    ``channels`` indexes the diffusive operators that rotate; ``None`` means
    all of them.
    """

    delta: float
    channels: tuple | None = None

    def phases(self, n_channels: int, s: float) -> np.ndarray:
        ph = np.ones(n_channels, dtype=complex)
        idx = range(n_channels) if self.channels is None else self.channels
        for k in idx:
            ph[k] = np.exp(1j * self.delta * s)
        return ph


@dataclass(frozen=True)
class SimConfig:
    t_final: float
    dt: float | None = None
    scheme: str = "thinning_exact"
    record_stride: int = 1
    epsilon: float | None = None
    time_dependent: Modulation | None = None
    diffusion_scheme: str = "kraus"

    def __post_init__(self):
        if not self.t_final > 0:
            raise ValueError("t_final must be positive")
        if self.dt is not None and not 0 < self.dt <= self.t_final:
            raise ValueError("need 0 < dt <= t_final")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.diffusion_scheme not in DIFFUSION_SCHEMES:
            raise ValueError(f"diffusion_scheme must be one of {DIFFUSION_SCHEMES}")
        if int(self.record_stride) < 1:
            raise ValueError("record_stride must be a positive integer")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def resolved_dt(self, epsilon: float | None = None) -> float:
        eps = self.epsilon if self.epsilon is not None else epsilon
        return min(self.dt if self.dt is not None else default_dt(eps), self.t_final)

    def grid(self, epsilon: float | None = None):
        """``(n_steps, step, recorded step indices)`` for this config."""
        dt = self.resolved_dt(epsilon)
        n_steps = max(1, math.ceil(self.t_final / dt - 1e-9))
        step = self.t_final / n_steps
        rec = list(range(0, n_steps + 1, int(self.record_stride)))
        if rec[-1] != n_steps:
            rec.append(n_steps)
        return n_steps, step, np.array(rec)


@dataclass
class TrajectoryPath:
    """One sample path on the recorded grid.

    ``counts[r, c]`` is the cumulative number of jumps of channel
    ``labels[c]`` up to and including ``times[r]``; the state recorded at a
    jump time is the post-jump state.
    """

    times: np.ndarray
    states: np.ndarray
    labels: tuple = ()
    counts: np.ndarray | None = None
    jumps: list = field(default_factory=list)

    def __len__(self):
        return len(self.times)

    def state_at(self, r: int) -> DensityMatrix:
        return DensityMatrix(self.states[r])


@dataclass
class PathBatch:
    """Paths of several trajectories sharing one recorded grid."""

    times: np.ndarray
    states: np.ndarray          # (n_traj, R, N, N)
    labels: tuple
    counts: np.ndarray          # (n_traj, R, n_channels)
    indices: np.ndarray
    events: tuple | None = None  # (trajectory position, time, channel) arrays

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    def jumps_of(self, pos: int) -> list:
        if self.events is None:
            return []
        who, when, chan = self.events
        sel = np.flatnonzero(who == pos)
        sel = sel[np.argsort(when[sel], kind="stable")]
        return [(float(when[k]), self.labels[chan[k]]) for k in sel]

    def path(self, pos: int) -> TrajectoryPath:
        return TrajectoryPath(self.times, self.states[pos], self.labels,
                              self.counts[pos], self.jumps_of(pos))


def superop(A, B) -> np.ndarray:
    """Matrix of ``X -> A X B`` acting on row-major vectorized ``X``."""
    return np.kron(A, B.T)


class _Dynamics:
    """Precomputed superoperators for the batched right-hand sides.

    States travel as row-major vectorized rows of shape ``(n, N*N)`` so that
    every linear map is a single ``(n, N^2) x (N^2, N^2)`` product.
    """

    def __init__(self, H, diffusive, jumps, modulation: Modulation | None = None,
                 diffusion_scheme: str = "kraus"):
        if diffusion_scheme not in DIFFUSION_SCHEMES:
            raise ValueError(f"diffusion_scheme must be one of {DIFFUSION_SCHEMES}")
        H = as_matrix(H)
        n = H.shape[0]
        eye = np.eye(n)
        self.dim = n
        self.C = np.array(diffusive, dtype=complex).reshape(-1, n, n)
        self.labels = tuple(lab for lab, _ in jumps)
        self.D = np.array([d for _, d in jumps], dtype=complex).reshape(-1, n, n)
        self.modulation = modulation
        CdC = np.einsum("kji,kjl->il", self.C.conj(), self.C)
        DdD = np.einsum("kji,kjl->il", self.D.conj(), self.D)
        # The identity part of sum D^dag D cancels between the anticommutator
        # and the normalization term on trace-one states; removing it keeps the
        # between-jump flow from amplifying trace round-off.
        shift = np.real(np.trace(DdD)) / n
        Kd = DdD - shift * eye
        sandwich_C = sum((superop(c, c.conj().T) for c in self.C), np.zeros((n * n, n * n)))
        sandwich_D = sum((superop(d, d.conj().T) for d in self.D), np.zeros((n * n, n * n)))
        self.diffusion_scheme = diffusion_scheme
        self.CdC = CdC
        if diffusion_scheme == "kraus":
            # the diffusive dissipators are carried by the Kraus step instead
            G_jump = -1j * H - 0.5 * Kd
            drift_C = 0
        else:
            G_jump = -1j * H - 0.5 * (CdC + Kd)
            drift_C = sandwich_C
        G_lind = -1j * H - 0.5 * (CdC + DdD)
        # transposed so that rows @ S applies the map
        self.S_drift = (superop(G_jump, eye) + superop(eye, G_jump.conj().T) + drift_C).T
        self.S_lind = (superop(G_lind, eye) + superop(eye, G_lind.conj().T)
                       + sandwich_C + sandwich_D).T
        self.kd_vec = Kd.T.reshape(-1)
        self.has_jumps = len(self.D) > 0
        self.intensity_vecs = np.array([(d.conj().T @ d).T.reshape(-1) for d in self.D])
        self.jump_ops = np.array([superop(d, d.conj().T).T for d in self.D])
        self.left = np.array([superop(c, eye).T for c in self.C])
        self.right = np.array([superop(eye, c.conj().T).T for c in self.C])
        self.trace_vec = eye.reshape(-1)
        self.expect_vecs = np.array([c.T.reshape(-1) for c in self.C])
        self.bounds = np.array([intensity_bound(d) for d in self.D])

    def drift(self, x):
        """Between-jump flow: Lindblad part plus jump compensators."""
        out = x @ self.S_drift
        if self.has_jumps:
            out += np.real(x @ self.kd_vec)[..., None] * x
        return out

    def lindblad(self, x):
        return x @ self.S_lind

    def intensities(self, c: int, x):
        return np.real(x @ self.intensity_vecs[c])

    def diffusion(self, x, k: int, phase: complex = 1.0):
        m = phase * (x @ self.left[k]) + np.conj(phase) * (x @ self.right[k])
        return m - np.real(m @ self.trace_vec)[..., None] * x

    def kraus_pairs(self, dt: float) -> np.ndarray:
        """Superoperators ``X -> K_a X K_b^dag`` for ``K_0 = I - CdC dt/2, K_k = C_k``."""
        eye = np.eye(self.dim)
        ks = [eye - 0.5 * dt * self.CdC] + list(self.C)
        return np.array([[superop(a, b.conj().T).T for b in ks] for a in ks])

    def kraus_step(self, x, pairs, dW, phases, dt):
        """Positivity-preserving diffusion step ``M rho M^dag / Tr``.

        ``M = I - sum C^dag C dt/2 + sum_k C_k(s) dy_k`` with the innovation
        ``dy_k = Tr[(C_k(s) + C_k(s)^dag) rho] dt + dW_k``. It agrees with the
        Euler-Maruyama increment to first order and never leaves the state set.
        """
        n = len(x)
        coef = np.empty((n, len(self.C) + 1), dtype=complex)
        coef[:, 0] = 1.0
        for k in range(len(self.C)):
            mean = 2 * np.real(phases[k] * (x @ self.expect_vecs[k]))
            coef[:, k + 1] = phases[k] * (mean * dt + dW[:, k])
        out = 0
        for a in range(len(coef[0])):
            for b in range(len(coef[0])):
                out = out + (coef[:, a] * np.conj(coef[:, b]))[:, None] * (x @ pairs[a, b])
        return out / np.real(out @ self.trace_vec)[:, None]

    def linear_step(self, h: float) -> np.ndarray:
        """RK4 propagator of the drift as one matrix; valid only without jump channels."""
        S = h * self.S_drift
        eye = np.eye(len(S))
        return eye + S @ (eye + S @ (eye / 2 + S @ (eye / 6 + S / 24)))

    def rk4(self, f, x, h):
        h = np.asarray(h, dtype=float)[..., None]
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _project_batch(x, dim, t, last_channel, labels, indices):
    """Hermitize, clip negative eigenvalues and renormalize vectorized states."""
    rho = x.reshape(-1, dim, dim)
    rho = 0.5 * (rho + dagger(rho))
    tr = np.real(trace(rho))

    def fail(k, what):
        ch = last_channel[k]
        raise StateProjectionError(
            what, time=t, channel=labels[ch] if ch >= 0 else "drift/diffusion",
            trajectory=int(indices[k]))

    bad = ~(np.abs(tr - 1.0) <= 0.5)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        fail(k, f"trace {tr[k]:.6g} escaped the state set")
    neg = _min_eigenvalue(rho) < 0
    if np.any(neg):
        w, v = np.linalg.eigh(rho[neg])
        w = np.clip(w, 0.0, None)
        rho[neg] = (v * w[..., None, :]) @ dagger(v)
        tr = np.real(trace(rho))
        if np.any(tr <= 0):
            fail(int(np.flatnonzero(tr <= 0)[0]), "trace vanished after clipping")
    return (rho / tr[..., None, None]).reshape(x.shape)


def _candidate_table(seed, indices, labels, bounds, t_final):
    """Merged, time-sorted thinning candidates per trajectory (padded with inf)."""
    per = []
    for idx in indices:
        ts, xs, cs = [], [], []
        for c, (lab, b) in enumerate(zip(labels, bounds)):
            t, x = StreamKey(seed, int(idx), lab).stream().candidate_arrays(0.0, t_final, b)
            ts.append(t)
            xs.append(x)
            cs.append(np.full(len(t), c))
        t = np.concatenate(ts) if ts else np.empty(0)
        order = np.argsort(t, kind="stable")
        per.append((t[order], np.concatenate(xs)[order] if xs else t,
                    np.concatenate(cs)[order] if cs else t.astype(int)))
    width = max([len(p[0]) for p in per], default=0) + 1
    n = len(indices)
    times = np.full((n, width), np.inf)
    marks = np.zeros((n, width))
    chans = np.zeros((n, width), dtype=int)
    for i, (t, x, c) in enumerate(per):
        times[i, :len(t)] = t
        marks[i, :len(t)] = x
        chans[i, :len(t)] = c
    return times, marks, chans


def simulate_batch(dyn: _Dynamics, rho0, cfg: SimConfig, seed: int, indices,
                   epsilon: float | None = None, record_events: bool = False) -> PathBatch:
    """Integrate ``len(indices)`` trajectories of the model held by ``dyn``."""
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indices)
    rho0 = as_matrix(rho0, dyn.dim, what="rho0")
    n_steps, dt, rec = cfg.grid(epsilon)
    times = rec * dt
    times[-1] = cfg.t_final
    nC, nD = len(dyn.C), len(dyn.D)
    if cfg.scheme == "euler_bernoulli" and nD and dt * dyn.bounds.max() > EULER_BERNOULLI_REGIME:
        warnings.warn(
            f"dt*bound = {dt * dyn.bounds.max():.3g} exceeds the Bernoulli "
            f"accuracy regime {EULER_BERNOULLI_REGIME}", RuntimeWarning, stacklevel=2)

    dW = np.zeros((n, n_steps, nC))
    for i, idx in enumerate(indices):
        for k in range(nC):
            dW[i, :, k] = StreamKey(seed, int(idx), brownian_channel(k)).stream() \
                .brownian_increments(dt, n_steps)
    if nD and cfg.scheme == "thinning_exact":
        c_times, c_marks, c_chans = _candidate_table(seed, indices, dyn.labels,
                                                     dyn.bounds, cfg.t_final)
        ptr = np.zeros(n, dtype=np.int64)
    elif nD:
        u = np.empty((n, n_steps, nD))
        for i, idx in enumerate(indices):
            for c, lab in enumerate(dyn.labels):
                u[i, :, c] = StreamKey(seed, int(idx), lab).stream().uniforms(n_steps)

    N2 = dyn.dim * dyn.dim
    linear_prop = None if nD else dyn.linear_step(dt)
    kraus_pairs = dyn.kraus_pairs(dt) if nC and dyn.diffusion_scheme == "kraus" else None
    x = np.broadcast_to(rho0.reshape(-1), (n, N2)).copy()
    rows = np.arange(n)
    counts = np.zeros((n, nD), dtype=np.int64)
    last_channel = np.full(n, -1)
    states_out = np.empty((n, len(rec), N2), dtype=complex)
    counts_out = np.zeros((n, len(rec), nD), dtype=np.int64)
    states_out[:, 0] = x
    ev_who, ev_when, ev_chan = [], [], []
    r = 1

    def fire(sel, c, t_ev):
        t_ev = np.broadcast_to(np.asarray(t_ev, dtype=float), sel.shape)
        num = x[sel] @ dyn.jump_ops[c]
        lam = np.real(num @ dyn.trace_vec)
        ok = lam > DEGENERATE_INTENSITY
        sel, t_ev = sel[ok], t_ev[ok]
        x[sel] = num[ok] / lam[ok][:, None]
        counts[sel, c] += 1
        last_channel[sel] = c
        if record_events:
            ev_who.append(sel)
            ev_when.append(t_ev.copy())
            ev_chan.append(np.full(len(sel), c))

    for step in range(n_steps):
        t = step * dt
        t_next = (step + 1) * dt
        if nC:
            phases = (dyn.modulation.phases(nC, t) if dyn.modulation is not None
                      else np.ones(nC))
            if kraus_pairs is not None:
                x = dyn.kraus_step(x, kraus_pairs, dW[:, step], phases, dt)
            else:
                incr = 0
                for k in range(nC):
                    incr = incr + dyn.diffusion(x, k, phases[k]) * dW[:, step, k][:, None]
                x = x + incr
        if cfg.scheme == "thinning_exact":
            cur = np.full(n, t)
            while nD:
                ct = c_times[rows, ptr]
                act = np.flatnonzero(ct < t_next)
                if not len(act):
                    break
                tc = ct[act]
                x[act] = dyn.rk4(dyn.drift, x[act], tc - cur[act])
                cur[act] = tc
                chan = c_chans[act, ptr[act]]
                mark = c_marks[act, ptr[act]]
                ptr[act] += 1
                for c in range(nD):
                    m = chan == c
                    if not np.any(m):
                        continue
                    sub = act[m]
                    acc = mark[m] < dyn.intensities(c, x[sub])
                    if np.any(acc):
                        fire(sub[acc], c, tc[m][acc])
            if nD:
                x = dyn.rk4(dyn.drift, x, t_next - cur)
            else:
                x = x @ linear_prop
        else:
            lam = [dyn.intensities(c, x) for c in range(nD)]
            x = x + dt * dyn.drift(x)
            for c in range(nD):
                hit = np.flatnonzero(u[:, step, c] < np.minimum(1.0, lam[c] * dt))
                if len(hit):
                    fire(hit, c, t)
        x = _project_batch(x, dyn.dim, t_next, last_channel, dyn.labels, indices)
        if r < len(rec) and rec[r] == step + 1:
            states_out[:, r] = x
            counts_out[:, r] = counts
            r += 1

    states_out = states_out.reshape(n, len(rec), dyn.dim, dyn.dim)
    events = None
    if record_events:
        events = (np.concatenate(ev_who) if ev_who else np.empty(0, dtype=int),
                  np.concatenate(ev_when) if ev_when else np.empty(0),
                  np.concatenate(ev_chan) if ev_chan else np.empty(0, dtype=int))
    return PathBatch(times, states_out, dyn.labels, counts_out, indices, events)


def _key_parts(key) -> tuple:
    if isinstance(key, StreamKey):
        return key.master_seed, key.trajectory_index
    seed, index = key
    return int(seed), int(index)


def _effective_epsilon(ops: OperatorSet, cfg: SimConfig):
    return cfg.epsilon if cfg.epsilon is not None else ops.epsilon


def jump_dynamics(ops: OperatorSet, cfg: SimConfig) -> _Dynamics:
    """Dynamics of the jump (epsilon-scaled) equation."""
    eps = _effective_epsilon(ops, cfg)
    if ops.scaled_jump_ops:
        if eps is None:
            raise ValueError("scaled jump channels need epsilon")
        ops = ops.with_epsilon(eps)
    return _Dynamics(ops.H, ops.diffusive_ops, ops.jump_channels("scaled_D_eps"),
                     cfg.time_dependent, cfg.diffusion_scheme)


def diffusive_dynamics(ops: OperatorSet, cfg: SimConfig) -> _Dynamics:
    """Dynamics of the limit equation: the ``A_j`` become diffusive channels."""
    return _Dynamics(ops.H, ops.limit_diffusive_ops(), ops.jump_ops, cfg.time_dependent,
                     cfg.diffusion_scheme)


def _as_rho(rho0, dim):
    return as_matrix(getattr(rho0, "matrix", rho0), dim, what="rho0")


def simulate_jump_diffusion(ops: OperatorSet, rho0, cfg: SimConfig, key) -> TrajectoryPath:
    """One path of the jump-diffusion equation; scaled channels use ``A_j + I/eps``."""
    seed, index = _key_parts(key)
    dyn = jump_dynamics(ops, cfg)
    batch = simulate_batch(dyn, _as_rho(rho0, ops.dim), cfg, seed, [index],
                           epsilon=_effective_epsilon(ops, cfg), record_events=True)
    return batch.path(0)


def simulate_diffusive(ops: OperatorSet, rho0, cfg: SimConfig, key) -> TrajectoryPath:
    """One path of the limit equation, each ``A_j`` driven by its own Brownian motion."""
    seed, index = _key_parts(key)
    dyn = diffusive_dynamics(ops, cfg)
    batch = simulate_batch(dyn, _as_rho(rho0, ops.dim), cfg, seed, [index],
                           record_events=True)
    return batch.path(0)


def lindblad_ode_solve(ops: OperatorSet, rho0, cfg: SimConfig) -> TrajectoryPath:
    """Deterministic master equation ``d rho/dt = L(rho)`` by fixed-step RK4.

    Scaled channels enter through their base operators ``A_j``.
    """
    dyn = _Dynamics(ops.H, ops.limit_diffusive_ops(), ops.jump_ops)
    x = _as_rho(rho0, ops.dim).reshape(1, -1).copy()
    n_steps, dt, rec = cfg.grid(_effective_epsilon(ops, cfg))
    times = rec * dt
    times[-1] = cfg.t_final
    out = np.empty((len(rec), ops.dim * ops.dim), dtype=complex)
    out[0] = x[0]
    r = 1
    no_channel = np.full(1, -1)
    for step in range(n_steps):
        x = dyn.rk4(dyn.lindblad, x, dt)
        x = _project_batch(x, ops.dim, (step + 1) * dt, no_channel, (), np.zeros(1))
        if r < len(rec) and rec[r] == step + 1:
            out[r] = x[0]
            r += 1
    return TrajectoryPath(times, out.reshape(len(rec), ops.dim, ops.dim))
