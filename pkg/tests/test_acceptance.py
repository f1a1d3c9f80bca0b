"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``. The ensemble criteria use
1e4 trajectories and take a few minutes in total.
"""

import time

import numpy as np
import pytest

from smediff.cli import main as cli_main
from smediff.generators import (
    TestFunctional,
    WeightFunctional,
    generator_eps,
    generator_limit,
    martingale_residual,
    uniform_convergence_scan,
)
from smediff.harness import (
    EXCITED,
    Model,
    diffusion_approximation_study,
    heterodyne_delta_study,
    mean_check,
    preset,
    run_ensemble,
)
from smediff.models import (
    HeterodyneParams,
    HomodyneParams,
    build_homodyne_jump,
    build_homodyne_limit,
    heterodyne_coefficient,
    heterodyne_h_minus,
    heterodyne_h_plus,
)
from smediff.simulate import SimConfig, jump_dynamics, lindblad_ode_solve, simulate_batch
from smediff.states import (
    SIGMA_MINUS,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    CONDITION_TOL,
    Observable,
    OperatorSet,
    check_condition,
    diffusive_drift,
    frobenius,
    jump_map,
    lindblad_apply,
    random_state,
)

N_TRAJ = 10_000
ZERO = np.zeros((2, 2))


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion, bypassing output capture."""
    start = time.perf_counter()

    def emit(number, name, ok, detail=""):
        with capsys.disabled():
            took = time.perf_counter() - start
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail} "
                  f"({took:.1f}s)")
        return ok

    return emit


def _hermitian(rng):
    m = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    return m + m.conj().T


def _battery():
    rng = np.random.default_rng(1)
    K = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    H = 0.5 * SIGMA_X
    homodyne = build_homodyne_jump(HomodyneParams(gamma0=1.0, theta=0.4))
    return [
        ("homodyne pair", homodyne),
        ("hermitian singleton", OperatorSet(H=H, scaled_jump_ops=[("A", _hermitian(rng))])),
        ("adjoint pair", OperatorSet(H=H, scaled_jump_ops=[("A", K), ("B", K.conj().T)])),
        ("homodyne + loss channel",
         OperatorSet(H=H, jump_ops=[("L", 0.5 * SIGMA_MINUS)],
                     scaled_jump_ops=homodyne.scaled_jump_ops)),
        ("sigma_minus", OperatorSet(H=ZERO, scaled_jump_ops=[("A", SIGMA_MINUS)])),
        ("random non-hermitian", OperatorSet(H=H, scaled_jump_ops=[("A", K)])),
        ("repeated pair", OperatorSet(H=H, scaled_jump_ops=[("A", K), ("B", K)])),
    ]


def test_criterion_01_condition_equivalence(verdict):
    f = TestFunctional.quadratic(SIGMA_Z)
    g = TestFunctional.bilinear(SIGMA_X, SIGMA_Y)
    eps = [0.1, 0.05, 0.025, 0.0125]
    results, ok = [], True
    for name, ops in _battery():
        holds = check_condition(ops.scaled_jump_ops) <= CONDITION_TOL
        for fn in (f, g):
            scan = uniform_convergence_scan(fn, ops, eps, sample_count=100, seed=7)
            good = scan.converges == holds
            good &= (scan.fitted_order >= 0.9) if holds else (scan.fitted_order <= -0.9)
            ok &= bool(good)
            results.append(f"{name}:{scan.fitted_order:+.2f}")
    verdict(1, "condition equivalence", ok, ", ".join(results))
    assert ok


def test_criterion_02_generator_identity(verdict):
    rng = np.random.default_rng(2)
    states = np.stack([random_state(rng, 2) for _ in range(100)])
    worst = 0.0
    for eps in (1.0, 0.1, 0.01):
        ops = build_homodyne_jump(HomodyneParams(gamma0=1.5, theta=0.7, epsilon=eps))
        diff = lindblad_apply(ops, states, "scaled_D_eps") - lindblad_apply(ops, states)
        worst = max(worst, float(frobenius(diff).max()))
    ok = verdict(2, "L_eps = L", worst <= 1e-10, f"max |L_eps - L|_F = {worst:.2e}")
    assert ok


def test_criterion_03_epsilon_expansion(verdict):
    rng = np.random.default_rng(3)
    epsilons = (0.1, 0.05, 0.025)
    res = np.empty((100, 3))
    for i in range(100):
        A = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        rho = random_state(rng, 2)
        for k, e in enumerate(epsilons):
            J = jump_map(A + np.eye(2) / e, rho).state
            res[i, k] = frobenius(J - rho - e * diffusive_drift(A, rho))
    mean = res.mean(axis=0)
    factors = mean[:-1] / mean[1:]
    ok = bool(np.all((factors >= 3.5) & (factors <= 4.5)))
    verdict(3, "epsilon expansion", ok, f"halving factors {np.round(factors, 3).tolist()}")
    assert ok


def test_criterion_04_mean_matches_ode(verdict):
    cfg = SimConfig(2.0, dt=1e-3, record_stride=100)
    runs = []
    for eps in (0.4, 0.1):
        model = preset("homodyne-jump", epsilon=eps)
        runs.append((f"homodyne-jump eps={eps}", model,
                     SimConfig(2.0, dt=1e-3, record_stride=100, epsilon=eps)))
    runs += [("homodyne-limit", preset("homodyne-limit"), cfg),
             ("heterodyne delta=20", preset("heterodyne", delta=20.0), cfg),
             ("heterodyne-limit", preset("heterodyne-limit"), cfg)]
    ok, details = True, []
    for seed, (name, model, c) in enumerate(runs):
        summary = run_ensemble(model, c, N_TRAJ, seed=seed)
        ode = lindblad_ode_solve(model.ops, EXCITED, c).states
        check = mean_check(summary, ode)
        ok &= check["passed"]
        details.append(f"{name}: max err/SE {check['max_ratio']:.2f}")
    verdict(4, "ensemble means vs ODE", ok, "; ".join(details))
    assert ok


def test_criterion_05_diffusion_approximation(verdict):
    # a strongly damped, strongly driven atom makes the finite-eps effect
    # visible above Monte Carlo noise at n = 1e4
    rep = diffusion_approximation_study(
        HomodyneParams(gamma0=16.0, rabi=2.0), [0.4, 0.2, 0.1], N_TRAJ,
        observables={"sz": Observable(SIGMA_Z, "sz")}, times=[2.0], t_final=2.0, seed=0)
    ks = rep.ks("sz@2")
    ok = ks[-1] < ks[0] and ks[-1] <= 0.05
    verdict(5, "diffusion approximation", ok,
            f"KS = {np.round(ks, 4).tolist()}, threshold {rep.thresholds['ks_threshold']:.4f}, "
            f"mean checks {all(rep.verdicts['mean_checks'].values())}")
    assert ok


def test_criterion_06_heterodyne_limit(verdict):
    rep = heterodyne_delta_study(
        HeterodyneParams(gamma0=4.0, rabi=2.0), [10.0, 40.0, 160.0], N_TRAJ,
        observables={"sx": Observable(SIGMA_X, "sx")}, times=[1.0], t_final=1.0, seed=0)
    ks = rep.ks("sx@1")
    trend = rep.verdicts["weakly_decreasing"]["sx@1"]
    ok = trend and ks[-1] <= 0.05
    verdict(6, "heterodyne limit", ok,
            f"KS = {np.round(ks, 4).tolist()}, 2x noise {2 * rep.thresholds['ks_noise']:.4f}, "
            f"dt = {rep.rows[0]['dt']:.3g}, "
            f"mean checks {all(rep.verdicts['mean_checks'].values())}")
    assert ok


def test_criterion_07_heterodyne_identity(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        p = HeterodyneParams(gamma0=rng.uniform(0.1, 5), theta=rng.uniform(-np.pi, np.pi),
                             delta=rng.uniform(1, 200))
        s = rng.uniform(0, 10)
        rho = random_state(rng, 2)
        rhs = np.sqrt(2) * (heterodyne_h_plus(p, rho) * np.cos(p.delta * s)
                            + 1j * heterodyne_h_minus(p, rho) * np.sin(p.delta * s))
        worst = max(worst, float(frobenius(heterodyne_coefficient(p, s, rho) - rhs)))
    ok = verdict(7, "heterodyne decomposition", worst <= 1e-12, f"max residual {worst:.2e}")
    assert ok


def test_criterion_08_martingale_residual(verdict):
    p = HomodyneParams(gamma0=16.0, rabi=2.0)
    f = TestFunctional.quadratic(SIGMA_Z)
    weights = [WeightFunctional(TestFunctional.linear(SIGMA_X), 0.05),
               WeightFunctional(TestFunctional.quadratic(SIGMA_Z), 0.1)]
    t, s = 0.1, 0.2
    jump_ops = build_homodyne_jump(p)

    def limit_gen(rho, u):
        return generator_limit(f, jump_ops, rho)

    limit = run_ensemble(Model("limit", build_homodyne_limit(p), "diffusive"),
                         SimConfig(0.3, dt=1e-3, record_stride=2), N_TRAJ, seed=1,
                         keep_paths=True)
    ok, details = True, []
    for m in (0, 2):
        est, se = martingale_residual(f, weights[:m], limit.states, limit.times, t, s,
                                      limit_gen)
        ok &= abs(est) <= 3 * se
        details.append(f"limit m={m}: {est:+.4f} (SE {se:.4f})")

    residuals = []
    for eps in (0.4, 0.2, 0.1):
        cfg = SimConfig(0.3, dt=1e-3, record_stride=2, epsilon=eps)
        ens = run_ensemble(Model("jump", jump_ops.with_epsilon(eps)), cfg, N_TRAJ, seed=2,
                           keep_paths=True)
        est, se = martingale_residual(f, [], ens.states, ens.times, t, s, limit_gen)
        own, own_se = martingale_residual(
            f, [], ens.states, ens.times, t, s,
            lambda rho, u, e=eps: generator_eps(f, jump_ops, rho, e))
        ok &= abs(own) <= 3 * own_se
        residuals.append((abs(est), se))
        details.append(f"eps={eps}: vs limit {est:+.4f} (SE {se:.4f}), own {own:+.4f}")
    trend = all(b <= a + 2 * np.hypot(sa, sb)
                for (a, sa), (b, sb) in zip(residuals, residuals[1:]))
    ok &= trend and residuals[-1][0] < residuals[0][0]
    verdict(8, "martingale residual", ok, "; ".join(details))
    assert ok


def test_criterion_09_micro_oracles(verdict):
    decay = OperatorSet(H=ZERO, jump_ops=[("D", SIGMA_MINUS)])
    ode = lindblad_ode_solve(decay, EXCITED, SimConfig(1.0, dt=1e-3))
    pop = float(np.real(ode.states[-1, 1, 1]))
    ok_ode = abs(pop - np.exp(-1.0)) <= 1e-6

    cfg = SimConfig(20.0, dt=0.05, record_stride=400)
    batch = simulate_batch(jump_dynamics(decay, cfg), EXCITED, cfg, 9, np.arange(N_TRAJ),
                           record_events=True)
    jump_times = batch.events[1]
    ok_jump = len(jump_times) == N_TRAJ and abs(jump_times.mean() - 1.0) <= 0.03

    counter = Model("counter", OperatorSet(H=ZERO, jump_ops=[("D", np.eye(2))]))
    ens = run_ensemble(counter, SimConfig(10.0, dt=0.05, record_stride=200), N_TRAJ, seed=9)
    mean_count = ens.mean_jump_counts()["D"]
    ok_count = abs(mean_count - 10.0) <= 3 * np.sqrt(10.0 / N_TRAJ)

    ok = ok_ode and ok_jump and ok_count
    verdict(9, "analytic micro-oracles", ok,
            f"exp(-1) error {abs(pop - np.exp(-1)):.1e}, mean jump time "
            f"{jump_times.mean():.4f}, mean count {mean_count:.3f}")
    assert ok


def test_criterion_10_determinism(verdict, tmp_path):
    def run(tag):
        out = tmp_path / tag
        cli_main(["converge", "--epsilon-list", "0.4,0.2,0.1", "--n-traj", "200",
                  "--t-final", "0.5", "--gamma0", "4", "--seed", "17", "--out", str(out)])
        cli_main(["simulate", "--model", "heterodyne", "--delta", "20", "--t-final", "0.5",
                  "--seed", "17", "--out", str(out / "trajectory.csv")])
        return {p.name: p.read_bytes() for p in sorted(out.iterdir())}

    first, second = run("a"), run("b")
    ok = first.keys() == second.keys() and all(first[k] == second[k] for k in first)
    verdict(10, "determinism", ok, f"{len(first)} files compared byte for byte")
    assert ok
