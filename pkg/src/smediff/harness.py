"""Ensembles, distribution distances and the convergence studies."""

from __future__ import annotations

import dataclasses
import csv
import hashlib
import json
import math
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .models import (
    HeterodyneParams,
    HomodyneParams,
    build_heterodyne,
    build_heterodyne_limit,
    build_homodyne_jump,
    build_homodyne_limit,
)
from .simulate import (
    Modulation,
    SimConfig,
    diffusive_dynamics,
    jump_dynamics,
    lindblad_ode_solve,
    simulate_batch,
)
from .states import (
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    Observable,
    OperatorSet,
    StateProjectionError,
    as_matrix,
    frobenius,
)

PRESETS = ("homodyne-jump", "homodyne-limit", "heterodyne", "heterodyne-limit")
EXCITED = np.array([[0, 0], [0, 1]], dtype=complex)

# Kolmogorov distribution: mean and 99th percentile of sqrt(n_eff) * KS under the null
KS_NULL_MEAN = 0.8687
KS_NULL_Q99 = 1.6276
# headroom for finite dt and finite epsilon / delta; with n = 1e4 per side the
# threshold is about 0.05
BIAS_ALLOWANCE = 0.027


@dataclass(frozen=True)
class Model:
    """An operator set plus which equation to integrate for it."""

    name: str
    ops: OperatorSet
    kind: str = "jump"
    modulation: Modulation | None = None
    rho0: np.ndarray = field(default_factory=lambda: EXCITED.copy())

    def __post_init__(self):
        if self.kind not in ("jump", "diffusive"):
            raise ValueError("kind must be 'jump' or 'diffusive'")


def preset(name: str, gamma0: float = 1.0, theta: float = 0.0, epsilon: float = 0.1,
           delta: float = 20.0, rabi: float = 1.0, combined: bool = False) -> Model:
    """Named detection model, started in the excited state."""
    if name == "homodyne-jump":
        p = HomodyneParams(gamma0, theta, epsilon, rabi)
        return Model(name, build_homodyne_jump(p), "jump")
    if name == "homodyne-limit":
        p = HomodyneParams(gamma0, theta, epsilon, rabi)
        return Model(name, build_homodyne_limit(p, combined), "diffusive")
    if name == "heterodyne":
        ops, mod = build_heterodyne(HeterodyneParams(gamma0, theta, delta, rabi))
        return Model(name, ops, "diffusive", mod)
    if name == "heterodyne-limit":
        return Model(name, build_heterodyne_limit(HeterodyneParams(gamma0, theta, delta, rabi)),
                     "diffusive")
    raise ValueError(f"unknown model {name!r}; choose from {PRESETS}")


def bloch_observables() -> dict:
    return {"sx": Observable(SIGMA_X, "sx"), "sy": Observable(SIGMA_Y, "sy"),
            "sz": Observable(SIGMA_Z, "sz")}


def _observables(observables, dim: int) -> dict:
    if observables is None:
        if dim != 2:
            raise ValueError("default observables are the Bloch coordinates; pass some for N != 2")
        return bloch_observables()
    out = {}
    for label, B in dict(observables).items():
        out[label] = B if isinstance(B, Observable) else Observable(as_matrix(B, dim), label)
    return out


def _as_model(model) -> Model:
    if isinstance(model, Model):
        return model
    if isinstance(model, OperatorSet):
        return Model("custom", model, "jump")
    return preset(model)


@dataclass
class EnsembleSummary:
    n_traj: int
    times: np.ndarray
    mean_state: np.ndarray            # (R, N, N)
    mean_se: np.ndarray               # (R,) Frobenius standard error of the mean
    observable_samples: dict          # label -> (n_traj, R)
    labels: tuple = ()
    final_counts: np.ndarray | None = None   # (n_traj, n_channels)
    states: np.ndarray | None = None  # (n_traj, R, N, N) when kept

    def time_index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the recorded grid")
        return k

    def samples(self, label: str, t: float) -> np.ndarray:
        return self.observable_samples[label][:, self.time_index(t)]

    def jump_count_histogram(self) -> dict:
        if self.final_counts is None:
            return {}
        return {lab: np.bincount(self.final_counts[:, c])
                for c, lab in enumerate(self.labels)}

    def mean_jump_counts(self) -> dict:
        if self.final_counts is None:
            return {}
        return {lab: float(self.final_counts[:, c].mean()) for c, lab in enumerate(self.labels)}


def _run_chunk(dyn, rho0, cfg, seed, idx, eps, obs, keep):
    batch = simulate_batch(dyn, rho0, cfg, seed, idx, epsilon=eps)
    flat = batch.states.reshape(batch.n_traj, len(batch.times), -1)
    part = {
        "times": batch.times,
        "sum": flat.sum(axis=0),
        "sumsq": (np.abs(flat) ** 2).sum(axis=0),
        "obs": {lab: B(batch.states) for lab, B in obs.items()},
        "counts": batch.counts[:, -1],
        "labels": batch.labels,
    }
    if keep:
        part["states"] = batch.states
    return part


def run_ensemble(model, cfg: SimConfig, n_traj: int, seed: int, observables=None,
                 rho0=None, chunk_size: int = 1024, keep_paths: bool = False,
                 n_jobs: int = 1) -> EnsembleSummary:
    """Simulate trajectories ``0 .. n_traj-1`` and aggregate them in index order.

    Trajectories are split into chunks that may run in parallel; each
    trajectory only depends on ``(seed, index)`` and chunk results are merged
    in index order, so the summary does not depend on ``n_jobs``.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    model = _as_model(model)
    if model.modulation is not None:
        cfg = dataclasses.replace(cfg, time_dependent=model.modulation)
    rho0 = as_matrix(model.rho0 if rho0 is None else rho0, model.ops.dim, what="rho0")
    obs = _observables(observables, model.ops.dim)
    if model.kind == "jump":
        dyn = jump_dynamics(model.ops, cfg)
        eps = cfg.epsilon if cfg.epsilon is not None else model.ops.epsilon
    else:
        dyn = diffusive_dynamics(model.ops, cfg)
        eps = None
    chunks = [np.arange(a, min(a + chunk_size, n_traj)) for a in range(0, n_traj, chunk_size)]
    try:
        if n_jobs == 1:
            parts = [_run_chunk(dyn, rho0, cfg, seed, c, eps, obs, keep_paths) for c in chunks]
        else:
            from joblib import Parallel, delayed

            parts = Parallel(n_jobs=n_jobs)(
                delayed(_run_chunk)(dyn, rho0, cfg, seed, c, eps, obs, keep_paths) for c in chunks)
    except StateProjectionError as err:
        raise StateProjectionError(f"ensemble {model.name} aborted: {err}", err.time,
                                   err.channel, err.trajectory) from err
    total = sum(p["sum"] for p in parts)
    total_sq = sum(p["sumsq"] for p in parts)
    dim = model.ops.dim
    mean = total / n_traj
    if n_traj > 1:
        var = np.clip(total_sq / n_traj - np.abs(mean) ** 2, 0.0, None) * n_traj / (n_traj - 1)
        se = np.sqrt(var.sum(axis=-1) / n_traj)
    else:
        se = np.zeros(len(mean))
    return EnsembleSummary(
        n_traj=n_traj,
        times=parts[0]["times"],
        mean_state=mean.reshape(-1, dim, dim),
        mean_se=se,
        observable_samples={lab: np.concatenate([p["obs"][lab] for p in parts]) for lab in obs},
        labels=parts[0]["labels"],
        final_counts=np.concatenate([p["counts"] for p in parts]),
        states=np.concatenate([p["states"] for p in parts]) if keep_paths else None,
    )


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be nonempty")
    return float(stats.ks_2samp(a, b).statistic)


def wasserstein1(a, b) -> float:
    """Wasserstein-1 distance of the empirical laws (quantile coupling)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be nonempty")
    return float(stats.wasserstein_distance(a, b))


def ks_noise(n_a: int, n_b: int) -> float:
    """Mean of the two-sample KS statistic under the null."""
    return KS_NULL_MEAN * math.sqrt(1 / n_a + 1 / n_b)


def ks_null_q99(n_a: int, n_b: int) -> float:
    return KS_NULL_Q99 * math.sqrt(1 / n_a + 1 / n_b)


def mean_check(summary: EnsembleSummary, ode_states: np.ndarray, n_se: float = 3.0) -> dict:
    """Compare the ensemble mean with the master-equation solution at every recorded time."""
    err = frobenius(summary.mean_state - ode_states)
    bound = n_se * summary.mean_se + 1e-10
    ratio = np.where(summary.mean_se > 0, err / np.maximum(summary.mean_se, 1e-300), 0.0)
    return {"sup_error": float(err.max()), "max_ratio": float(ratio.max()),
            "passed": bool(np.all(err <= bound))}


def _record_stride(t_final: float, dt: float, record_points: int) -> int:
    n_steps = max(1, math.ceil(t_final / dt - 1e-9))
    return max(1, n_steps // record_points)


def _trend(values, noise) -> bool:
    return all(b <= a + 2 * noise for a, b in zip(values, values[1:]))


@dataclass
class ConvergenceReport:
    study: str
    parameter: str
    values: list
    n_traj: int
    seed: int
    observables: list
    times: list
    rows: list
    reference: dict
    thresholds: dict
    verdicts: dict
    notes: list = field(default_factory=list)
    # raw samples and mean paths for the CSV outputs; not part of the JSON
    artifacts: dict = field(default_factory=dict, repr=False, compare=False)

    def ks(self, key: str) -> list:
        return [row["ks"][key] for row in self.rows]

    def passed(self) -> bool:
        return all(v for v in _flatten_verdicts(self.verdicts) if v is not None)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
               if f.name != "artifacts"}
        return json.loads(json.dumps(out))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _flatten_verdicts(v):
    if isinstance(v, dict):
        for x in v.values():
            yield from _flatten_verdicts(x)
    else:
        yield v


def _key(label: str, t: float) -> str:
    return f"{label}@{t:g}"


def _collect(artifacts, name, summary, ode, obs, times):
    samples = artifacts.setdefault("samples", {})
    for label in obs:
        for t in times:
            samples.setdefault((label, t), {})[name] = summary.samples(label, t)
    artifacts.setdefault("means", {})[name] = (summary.times, summary.mean_state,
                                               summary.mean_se, ode)


def _compare(summary, reference, obs, times) -> tuple:
    ks, w1 = {}, {}
    for label in obs:
        for t in times:
            a = summary.samples(label, t)
            b = reference.samples(label, t)
            ks[_key(label, t)] = ks_distance(a, b)
            w1[_key(label, t)] = wasserstein1(a, b)
    return ks, w1


CALIBRATION_NOTE = ("KS thresholds are calibration choices: the two-sample null 99th percentile "
                    "plus an explicit discretization/finite-parameter bias allowance. No "
                    "quantitative convergence rate backs them.")


def _study_verdicts(rows, keys, values_label, n_traj, bias_allowance, trend: bool):
    noise = ks_noise(n_traj, n_traj)
    threshold = ks_null_q99(n_traj, n_traj) + bias_allowance
    verdicts = {
        "final_ks_within_threshold": {k: bool(rows[-1]["ks"][k] <= threshold) for k in keys},
        "mean_checks": {str(r[values_label]): bool(r["mean_check"]["passed"]) for r in rows},
    }
    if trend:
        verdicts["weakly_decreasing"] = {
            k: bool(_trend([r["ks"][k] for r in rows], noise)) for k in keys}
    else:
        verdicts["weakly_decreasing"] = None
    thresholds = {"ks_noise": noise, "ks_null_q99": ks_null_q99(n_traj, n_traj),
                  "bias_allowance": bias_allowance, "ks_threshold": threshold}
    return verdicts, thresholds


def diffusion_approximation_study(params: HomodyneParams, epsilons, n_traj: int,
                                  observables=None, times=None, t_final: float = 2.0,
                                  dt: float | None = None, seed: int = 0,
                                  scheme: str = "thinning_exact", bias_allowance: float = BIAS_ALLOWANCE,
                                  record_points: int = 20, chunk_size: int = 1024,
                                  n_jobs: int = 1) -> ConvergenceReport:
    """Homodyne epsilon-jump ensembles against one diffusive-limit ensemble.

    For every epsilon the observable marginals at ``times`` are compared by
    KS and W1 with the limit ensemble (run with an independent seed), and every
    ensemble mean is checked against the master equation.
    """
    eps = [float(e) for e in epsilons]
    if len(eps) < 3:
        raise ValueError("need at least three epsilon values")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon list must be strictly decreasing")
    times = [t_final / 2, t_final] if times is None else [float(t) for t in times]
    obs = _observables(observables, 2)
    limit_model = Model("homodyne-limit", build_homodyne_limit(params), "diffusive")
    dt_lim = dt if dt is not None else 1e-3
    cfg_lim = SimConfig(t_final, dt_lim, scheme,
                        _record_stride(t_final, dt_lim, record_points))
    limit = run_ensemble(limit_model, cfg_lim, n_traj, seed + 1, obs,
                         chunk_size=chunk_size, n_jobs=n_jobs)
    ode_lim = lindblad_ode_solve(limit_model.ops, EXCITED, cfg_lim).states
    reference = {"mean_check": mean_check(limit, ode_lim), "dt": cfg_lim.resolved_dt()}
    artifacts = {}
    _collect(artifacts, "limit", limit, ode_lim, obs, times)
    rows = []
    for e in eps:
        step = dt if dt is not None else SimConfig(t_final).resolved_dt(e)
        cfg = SimConfig(t_final, step, scheme, _record_stride(t_final, step, record_points),
                        epsilon=e)
        model = Model("homodyne-jump", build_homodyne_jump(params).with_epsilon(e), "jump")
        summary = run_ensemble(model, cfg, n_traj, seed, obs, chunk_size=chunk_size,
                               n_jobs=n_jobs)
        ode = lindblad_ode_solve(model.ops, EXCITED, cfg).states
        _collect(artifacts, f"epsilon={e:g}", summary, ode, obs, times)
        ks, w1 = _compare(summary, limit, obs, times)
        rows.append({"epsilon": e, "dt": cfg.resolved_dt(e), "ks": ks, "w1": w1,
                     "mean_check": mean_check(summary, ode)})
    keys = [_key(lab, t) for lab in obs for t in times]
    verdicts, thresholds = _study_verdicts(rows, keys, "epsilon", n_traj, bias_allowance, True)
    verdicts["mean_checks"]["limit"] = reference["mean_check"]["passed"]
    return ConvergenceReport(
        "diffusion_approximation", "epsilon", eps, n_traj, seed, list(obs), times, rows,
        reference, thresholds, verdicts,
        [CALIBRATION_NOTE, f"model: gamma0={params.gamma0}, theta={params.theta}, "
                           f"rabi={params.rabi}, scheme={scheme}"], artifacts)


def heterodyne_delta_study(params: HeterodyneParams, deltas, n_traj: int, observables=None,
                           times=None, t_final: float = 1.0, dt: float | None = None,
                           seed: int = 0, bias_allowance: float = BIAS_ALLOWANCE,
                           record_points: int = 20, chunk_size: int = 1024,
                           n_jobs: int = 1) -> ConvergenceReport:
    """Single-noise detuned ensembles against the two-noise limit ensemble."""
    ds = [float(d) for d in deltas]
    if not ds:
        raise ValueError("need at least one detuning")
    if any(b <= a for a, b in zip(ds, ds[1:])):
        raise ValueError("detuning list must be strictly increasing")
    finest = 2 * math.pi / (50 * ds[-1])
    if dt is None:
        dt = finest
    elif dt > finest * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} does not resolve 50 points per period of delta={ds[-1]:g} "
                         f"(need dt <= {finest:g})")
    times = [t_final / 2, t_final] if times is None else [float(t) for t in times]
    obs = _observables(observables, 2)
    stride = _record_stride(t_final, dt, record_points)
    cfg = SimConfig(t_final, dt, record_stride=stride)
    limit_p = dataclasses.replace(params, delta=ds[0])
    limit_model = Model("heterodyne-limit", build_heterodyne_limit(limit_p), "diffusive")
    limit = run_ensemble(limit_model, cfg, n_traj, seed + 1, obs, chunk_size=chunk_size,
                         n_jobs=n_jobs)
    ode = lindblad_ode_solve(limit_model.ops, EXCITED, cfg).states
    reference = {"mean_check": mean_check(limit, ode), "dt": cfg.resolved_dt()}
    artifacts = {}
    _collect(artifacts, "limit", limit, ode, obs, times)
    rows = []
    for d in ds:
        ops, mod = build_heterodyne(dataclasses.replace(params, delta=d))
        summary = run_ensemble(Model("heterodyne", ops, "diffusive", mod), cfg, n_traj, seed,
                               obs, chunk_size=chunk_size, n_jobs=n_jobs)
        _collect(artifacts, f"delta={d:g}", summary, ode, obs, times)
        ks, w1 = _compare(summary, limit, obs, times)
        rows.append({"delta": d, "dt": cfg.resolved_dt(), "ks": ks, "w1": w1,
                     "mean_check": mean_check(summary, ode)})
    keys = [_key(lab, t) for lab in obs for t in times]
    verdicts, thresholds = _study_verdicts(rows, keys, "delta", n_traj, bias_allowance,
                                           len(ds) > 1)
    verdicts["mean_checks"]["limit"] = reference["mean_check"]["passed"]
    return ConvergenceReport(
        "heterodyne_delta", "delta", ds, n_traj, seed, list(obs), times, rows, reference,
        thresholds, verdicts,
        [CALIBRATION_NOTE, f"model: gamma0={params.gamma0}, theta={params.theta}, "
                           f"rabi={params.rabi}"], artifacts)


def config_hash(config: dict) -> str:
    """Content hash of a canonical JSON rendering of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _fmt(x: float) -> str:
    return repr(float(x))


def _entry_columns(dim: int) -> list:
    return [f"{part}_{i}{j}" for i in range(dim) for j in range(dim) for part in ("re", "im")]


def _entry_values(m: np.ndarray) -> list:
    out = []
    for z in m.reshape(-1):
        out += [_fmt(z.real), _fmt(z.imag)]
    return out


def write_trajectory_csv(path, traj) -> None:
    """Columns: time, re/im of each entry (row-major), cumulative counts per channel."""
    dim = traj.states.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time"] + _entry_columns(dim) + [f"count_{lab}" for lab in traj.labels])
        for r, t in enumerate(traj.times):
            counts = [] if traj.counts is None else [str(int(c)) for c in traj.counts[r]]
            w.writerow([_fmt(t)] + _entry_values(traj.states[r]) + counts)


def run_metadata(config: dict) -> dict:
    """Metadata written next to every output; ``config`` must be JSON-serializable."""
    return {"seed": config.get("seed"), "dt": config.get("dt"), "scheme": config.get("scheme"),
            "epsilon": config.get("epsilon"), "config_hash": config_hash(config),
            "config": config}


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _safe(label) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in f"{label}")


def write_mean_paths(path, means: dict) -> None:
    """One row per (ensemble, time): mean state, its standard error, the ODE solution."""
    first = next(iter(means.values()))
    dim = first[1].shape[-1]
    cols = _entry_columns(dim)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ensemble", "time"] + cols + ["se"] + [f"ode_{c}" for c in cols]
                   + ["error"])
        for name, (times, mean, se, ode) in means.items():
            for r, t in enumerate(times):
                err = float(np.linalg.norm(mean[r] - ode[r]))
                w.writerow([name, _fmt(t)] + _entry_values(mean[r]) + [_fmt(se[r])]
                           + _entry_values(ode[r]) + [_fmt(err)])


def write_samples(outdir, samples: dict) -> list:
    """``samples_<obs>_<time>.csv`` with one column per ensemble."""
    written = []
    for (label, t), cols in samples.items():
        path = Path(outdir) / f"samples_{_safe(label)}_{t:g}.csv"
        names = list(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for row in zip(*(cols[n] for n in names)):
                w.writerow([_fmt(v) for v in row])
        written.append(path)
    return written


def write_report(report: ConvergenceReport, outdir) -> None:
    """``summary.json``, the sample CSVs and ``mean_path.csv`` under ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_json(outdir / "summary.json", report.to_dict())
    if report.artifacts.get("samples"):
        write_samples(outdir, report.artifacts["samples"])
    if report.artifacts.get("means"):
        write_mean_paths(outdir / "mean_path.csv", report.artifacts["means"])


def render_markdown(report: dict) -> str:
    """Markdown tables of a ``summary.json`` document."""
    param = report["parameter"]
    keys = sorted(report["rows"][0]["ks"]) if report["rows"] else []
    lines = [f"# {report['study']}", "",
             f"n_traj = {report['n_traj']}, seed = {report['seed']}", ""]
    lines.append("| " + " | ".join([param] + [f"KS {k}" for k in keys]
                                  + [f"W1 {k}" for k in keys] + ["mean err", "mean ok"]) + " |")
    lines.append("|" + "---|" * (len(keys) * 2 + 3))
    for row in report["rows"]:
        cells = [f"{row[param]:g}"] + [f"{row['ks'][k]:.4f}" for k in keys]
        cells += [f"{row['w1'][k]:.4f}" for k in keys]
        cells += [f"{row['mean_check']['sup_error']:.3g}", str(row["mean_check"]["passed"])]
        lines.append("| " + " | ".join(cells) + " |")
    lines += ["", "## Thresholds", ""]
    lines += [f"- {k}: {v:.4g}" for k, v in sorted(report["thresholds"].items())]
    lines += ["", "## Verdicts", ""]
    for name, v in sorted(report["verdicts"].items()):
        if isinstance(v, dict):
            for k, ok in sorted(v.items()):
                lines.append(f"- {name} [{k}]: {'pass' if ok else 'FAIL'}")
        else:
            lines.append(f"- {name}: {'n/a' if v is None else ('pass' if v else 'FAIL')}")
    if report.get("notes"):
        lines += ["", "## Notes", ""] + [f"- {n}" for n in report["notes"]]
    return "\n".join(lines) + "\n"
