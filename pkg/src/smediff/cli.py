"""Command line entry point: ``smediff <subcommand>``.

Exit codes: 0 when every verdict passes, 2 when a verdict fails, 1 on errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .generators import TestFunctional, uniform_convergence_scan
from .harness import (
    EXCITED,
    PRESETS,
    bloch_observables,
    diffusion_approximation_study,
    heterodyne_delta_study,
    lindblad_ode_solve,
    mean_check,
    preset,
    render_markdown,
    run_ensemble,
    run_metadata,
    write_json,
    write_mean_paths,
    write_report,
    write_trajectory_csv,
)
from .models import HeterodyneParams, HomodyneParams
from .simulate import SCHEMES, SimConfig, simulate_diffusive, simulate_jump_diffusion
from .states import Observable

DEFAULTS = {
    "model": "homodyne-jump",
    "gamma0": 1.0,
    "theta": 0.0,
    "epsilon": 0.1,
    "delta": 20.0,
    "rabi": 1.0,
    "epsilon_list": [0.4, 0.2, 0.1],
    "delta_list": [10.0, 40.0, 160.0],
    "t_final": 2.0,
    "dt": None,
    "n_traj": 1000,
    "seed": 0,
    "observables": None,
    "record_times": None,
    "scheme": "thinning_exact",
}


def _observables(given):
    """Names of Bloch coordinates, or a mapping label -> matrix of [re, im] pairs."""
    if given is None:
        return None
    bloch = bloch_observables()
    if isinstance(given, str):
        given = [s for s in given.split(",") if s]
    if isinstance(given, list):
        try:
            return {name: bloch[name] for name in given}
        except KeyError as err:
            raise ValueError(f"unknown observable {err}; named ones are {sorted(bloch)}") from None
    out = {}
    for label, m in given.items():
        arr = np.asarray(m, dtype=float)
        out[label] = Observable(arr[..., 0] + 1j * arr[..., 1], label)
    return out


def _float_list(text):
    return [float(v) for v in text.split(",") if v]


def _settings(args) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _model(cfg):
    return preset(cfg["model"], cfg["gamma0"], cfg["theta"], cfg["epsilon"], cfg["delta"],
                  cfg["rabi"])


def _sim_config(cfg, stride=1):
    model = cfg["model"]
    eps = cfg["epsilon"] if model == "homodyne-jump" else None
    return SimConfig(cfg["t_final"], cfg["dt"], cfg["scheme"], stride, epsilon=eps)


def _meta(cfg, sim_cfg) -> dict:
    cfg = dict(cfg, dt=sim_cfg.resolved_dt())
    return run_metadata(cfg)


def cmd_simulate(args) -> int:
    cfg = _settings(args)
    model = _model(cfg)
    sim_cfg = _sim_config(cfg, args.record_stride)
    if model.modulation is not None:
        from dataclasses import replace

        sim_cfg = replace(sim_cfg, time_dependent=model.modulation)
    run = simulate_jump_diffusion if model.kind == "jump" else simulate_diffusive
    path = run(model.ops, model.rho0, sim_cfg, (cfg["seed"], args.index))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out, path)
    write_json(out.with_suffix(".json"), _meta(dict(cfg, index=args.index), sim_cfg))
    return 0


def cmd_mean_check(args) -> int:
    cfg = _settings(args)
    model = _model(cfg)
    n_steps = max(1, round(cfg["t_final"] / _sim_config(cfg).resolved_dt()))
    sim_cfg = _sim_config(cfg, max(1, n_steps // args.record_points))
    summary = run_ensemble(model, sim_cfg, int(cfg["n_traj"]), int(cfg["seed"]),
                           _observables(cfg["observables"]))
    ode = lindblad_ode_solve(model.ops, EXCITED, sim_cfg).states
    check = mean_check(summary, ode)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_mean_paths(outdir / "mean_path.csv",
                     {model.name: (summary.times, summary.mean_state, summary.mean_se, ode)})
    write_json(outdir / "summary.json",
               {"mean_check": check, "n_traj": summary.n_traj,
                "mean_jump_counts": summary.mean_jump_counts(),
                "metadata": _meta(cfg, sim_cfg)})
    print(f"mean-check {model.name}: sup error {check['sup_error']:.3g}, "
          f"max error/SE {check['max_ratio']:.2f} -> {'pass' if check['passed'] else 'FAIL'}")
    return 0 if check["passed"] else 2


def _finish(report, args, cfg) -> int:
    write_report(report, args.out)
    write_json(Path(args.out) / "metadata.json", run_metadata(cfg))
    print(render_markdown(report.to_dict()), end="")
    return 0 if report.passed() else 2


def cmd_converge(args) -> int:
    cfg = _settings(args)
    params = HomodyneParams(cfg["gamma0"], cfg["theta"], cfg["epsilon_list"][-1], cfg["rabi"])
    report = diffusion_approximation_study(
        params, cfg["epsilon_list"], int(cfg["n_traj"]), _observables(cfg["observables"]),
        cfg["record_times"], cfg["t_final"], cfg["dt"], int(cfg["seed"]), cfg["scheme"],
        n_jobs=args.n_jobs)
    return _finish(report, args, cfg)


def cmd_heterodyne_scan(args) -> int:
    cfg = _settings(args)
    if args.t_final is None and not (args.config and "t_final" in json.loads(
            Path(args.config).read_text())):
        cfg["t_final"] = 1.0
    params = HeterodyneParams(cfg["gamma0"], cfg["theta"], cfg["delta_list"][0], cfg["rabi"])
    report = heterodyne_delta_study(
        params, cfg["delta_list"], int(cfg["n_traj"]), _observables(cfg["observables"]),
        cfg["record_times"], cfg["t_final"], cfg["dt"], int(cfg["seed"]), n_jobs=args.n_jobs)
    return _finish(report, args, cfg)


def cmd_generators(args) -> int:
    cfg = _settings(args)
    params = HomodyneParams(cfg["gamma0"], cfg["theta"], cfg["epsilon"], cfg["rabi"])
    ops = preset("homodyne-jump", params.gamma0, params.theta, params.epsilon,
                 rabi=params.rabi).ops
    B = bloch_observables()[args.observable].matrix
    f = TestFunctional.linear(B) if args.kind == "linear" else TestFunctional.quadratic(B)
    scan = uniform_convergence_scan(f, ops, cfg["epsilon_list"], args.samples, int(cfg["seed"]))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = ["epsilon,sup_diff,fitted_order"]
    lines += [f"{e!r},{d!r},{o!r}" for e, d, o in scan.rows()]
    (outdir / "scan.csv").write_text("\n".join(lines) + "\n")
    write_json(outdir / "verdict.json", scan.verdict())
    for e, d, o in scan.rows():
        print(f"epsilon={e:g} sup_diff={d:.3e}")
    print(f"fitted order {scan.fitted_order:.3f}; converges: {scan.converges}")
    return 0 if scan.converges else 2


def cmd_report(args) -> int:
    report = json.loads(Path(args.summary).read_text())
    text = render_markdown(report)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def _model_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--model", choices=PRESETS)
    p.add_argument("--gamma0", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--rabi", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--t-final", dest="t_final", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--scheme", choices=SCHEMES)


def _ensemble_flags(p):
    p.add_argument("--n-traj", dest="n_traj", type=int)
    p.add_argument("--observables", help="comma separated subset of sx,sy,sz")
    p.add_argument("--record-times", dest="record_times", type=_float_list)
    p.add_argument("--n-jobs", dest="n_jobs", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smediff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="one trajectory to CSV")
    _model_flags(p)
    p.add_argument("--index", type=int, default=0, help="trajectory index")
    p.add_argument("--record-stride", dest="record_stride", type=int, default=1)
    p.add_argument("--out", default="trajectory.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mean-check", help="ensemble mean against the master equation")
    _model_flags(p)
    _ensemble_flags(p)
    p.add_argument("--record-points", dest="record_points", type=int, default=20)
    p.add_argument("--out", default="mean-check")
    p.set_defaults(func=cmd_mean_check)

    p = sub.add_parser("converge", help="homodyne epsilon scan against the diffusive limit")
    _model_flags(p)
    _ensemble_flags(p)
    p.add_argument("--epsilon-list", dest="epsilon_list", type=_float_list)
    p.add_argument("--out", default="converge")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("heterodyne-scan", help="heterodyne detuning scan against its limit")
    _model_flags(p)
    _ensemble_flags(p)
    p.add_argument("--delta-list", dest="delta_list", type=_float_list)
    p.add_argument("--out", default="heterodyne-scan")
    p.set_defaults(func=cmd_heterodyne_scan)

    p = sub.add_parser("generators", help="sampled sup of the generator difference")
    _model_flags(p)
    p.add_argument("--epsilon-list", dest="epsilon_list", type=_float_list)
    p.add_argument("--kind", choices=("linear", "quadratic"), default="quadratic")
    p.add_argument("--observable", choices=("sx", "sy", "sz"), default="sz")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--out", default="generators")
    p.set_defaults(func=cmd_generators)

    p = sub.add_parser("report", help="render summary.json as markdown")
    p.add_argument("summary")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # noqa: BLE001 - any failure maps to exit code 1
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
