import json

import numpy as np
import pytest

from smediff.harness import (
    EXCITED,
    Model,
    bloch_observables,
    config_hash,
    diffusion_approximation_study,
    heterodyne_delta_study,
    ks_distance,
    ks_null_q99,
    mean_check,
    preset,
    render_markdown,
    run_ensemble,
    wasserstein1,
    write_report,
    write_trajectory_csv,
)
from smediff.models import HeterodyneParams, HomodyneParams
from smediff.simulate import SimConfig, jump_dynamics, lindblad_ode_solve, simulate_batch
from smediff.states import OperatorSet


def ecdf_sup(a, b):
    """Brute force: evaluate both ECDFs at every sample point."""
    pts = np.concatenate([a, b])
    fa = (a[None, :] <= pts[:, None]).mean(axis=1)
    fb = (b[None, :] <= pts[:, None]).mean(axis=1)
    return np.abs(fa - fb).max()


def quantile_w1(a, b):
    """Integral of |F_a^-1 - F_b^-1| over the merged quantile grid."""
    a, b = np.sort(a), np.sort(b)
    cuts = np.union1d(np.arange(1, len(a)) / len(a), np.arange(1, len(b)) / len(b))
    edges = np.concatenate([[0.0], cuts, [1.0]])
    mid = 0.5 * (edges[:-1] + edges[1:])
    qa = a[np.minimum((mid * len(a)).astype(int), len(a) - 1)]
    qb = b[np.minimum((mid * len(b)).astype(int), len(b) - 1)]
    return float(np.sum(np.abs(qa - qb) * np.diff(edges)))


def test_ks_examples():
    assert ks_distance([0.3, 0.5], [0.3, 0.5]) == 0.0
    assert ks_distance([0.0, 1.0], [0.0, 1.0, 2.0]) == pytest.approx(1 / 3)
    assert ks_distance([0.0, 0.1], [1.0, 2.0, 3.0]) == 1.0


def test_ks_matches_brute_force(rng):
    for n, m in [(7, 13), (50, 50), (31, 4)]:
        a, b = rng.normal(size=n), rng.normal(0.3, 1, size=m)
        assert ks_distance(a, b) == pytest.approx(ecdf_sup(a, b), abs=1e-15)
    a = rng.integers(0, 4, 40).astype(float)
    b = rng.integers(0, 5, 30).astype(float)
    assert ks_distance(a, b) == pytest.approx(ecdf_sup(a, b), abs=1e-15)


def test_w1_examples():
    assert wasserstein1([0.2, 0.7], [0.7, 0.2]) == 0.0
    assert wasserstein1([0, 0], [1, 1]) == pytest.approx(1.0)
    assert wasserstein1([0, 1], [0, 2]) == pytest.approx(0.5)


def test_w1_matches_quantile_coupling(rng):
    for n, m in [(5, 5), (6, 9), (40, 17)]:
        a, b = rng.exponential(size=n), rng.normal(size=m)
        assert wasserstein1(a, b) == pytest.approx(quantile_w1(a, b), rel=1e-12)


@pytest.mark.parametrize("fn", [ks_distance, wasserstein1])
def test_distances_reject_empty(fn):
    with pytest.raises(ValueError):
        fn([], [1.0])
    with pytest.raises(ValueError):
        fn([1.0], [])


def test_presets():
    assert preset("homodyne-jump", epsilon=0.3).ops.epsilon == 0.3
    assert preset("homodyne-limit").kind == "diffusive"
    assert preset("heterodyne", delta=9.0).modulation.delta == 9.0
    assert len(preset("heterodyne-limit").ops.diffusive_ops) == 2
    with pytest.raises(ValueError, match="unknown model"):
        preset("photon-counting")
    with pytest.raises(ValueError):
        Model("x", preset("homodyne-jump").ops, kind="ode")


def test_single_trajectory_summary_is_the_path():
    model = preset("homodyne-jump", gamma0=2.0, epsilon=0.3, rabi=1.0)
    cfg = SimConfig(0.5, dt=1e-3, record_stride=50, epsilon=0.3)
    summary = run_ensemble(model, cfg, 1, seed=4)
    batch = simulate_batch(jump_dynamics(model.ops, cfg), EXCITED, cfg, 4, [0], epsilon=0.3)
    assert np.array_equal(summary.mean_state, batch.states[0])
    assert np.all(summary.mean_se == 0)
    sz = bloch_observables()["sz"](batch.states[0])
    assert np.array_equal(summary.observable_samples["sz"][0], sz)


def test_ensemble_is_deterministic_and_order_merged():
    model = preset("homodyne-jump", epsilon=0.3)
    cfg = SimConfig(0.3, dt=1e-3, record_stride=100, epsilon=0.3)
    a = run_ensemble(model, cfg, 50, seed=9, chunk_size=16)
    b = run_ensemble(model, cfg, 50, seed=9, chunk_size=16)
    c = run_ensemble(model, cfg, 50, seed=9, chunk_size=16, n_jobs=2)
    for other in (b, c):
        assert np.array_equal(a.mean_state, other.mean_state)
        assert np.array_equal(a.observable_samples["sx"], other.observable_samples["sx"])
        assert np.array_equal(a.final_counts, other.final_counts)
    d = run_ensemble(model, cfg, 50, seed=9, chunk_size=50)
    assert np.abs(a.mean_state - d.mean_state).max() <= 1e-14


def test_ensemble_summary_invariants():
    model = preset("heterodyne", gamma0=2.0, delta=10.0)
    cfg = SimConfig(0.2, dt=2e-3, record_stride=10)
    s = run_ensemble(model, cfg, 64, seed=1, keep_paths=True)
    assert np.abs(np.trace(s.mean_state, axis1=1, axis2=2) - 1).max() <= 1e-9
    assert all(v.shape == (64, len(s.times)) for v in s.observable_samples.values())
    assert s.states.shape == (64, len(s.times), 2, 2)
    assert np.allclose(s.states.mean(axis=0), s.mean_state, atol=1e-15)
    with pytest.raises(ValueError):
        s.samples("sz", 0.1234)


def test_identity_channel_histogram_mean():
    model = Model("counter", OperatorSet(H=np.zeros((2, 2)), jump_ops=[("D", np.eye(2))]))
    s = run_ensemble(model, SimConfig(10.0, dt=0.05, record_stride=200), 10_000, seed=3)
    hist = s.jump_count_histogram()["D"]
    mean = (np.arange(len(hist)) * hist).sum() / hist.sum()
    assert hist.sum() == 10_000 and abs(mean - 10.0) <= 0.3
    assert s.mean_jump_counts()["D"] == pytest.approx(mean)


def test_run_ensemble_rejects_empty():
    with pytest.raises(ValueError):
        run_ensemble(preset("homodyne-limit"), SimConfig(0.1), 0, seed=0)


def test_mean_check_flags_wrong_reference():
    model = preset("homodyne-limit", gamma0=2.0)
    cfg = SimConfig(0.5, dt=1e-3, record_stride=100)
    s = run_ensemble(model, cfg, 500, seed=2)
    ode = lindblad_ode_solve(model.ops, EXCITED, cfg).states
    assert mean_check(s, ode)["passed"]
    assert not mean_check(s, np.broadcast_to(EXCITED, ode.shape))["passed"]


def test_self_distance_within_null_quantile():
    model = preset("homodyne-limit", gamma0=4.0, rabi=2.0)
    cfg = SimConfig(0.5, dt=1e-3, record_stride=500)
    a = run_ensemble(model, cfg, 10_000, seed=100)
    b = run_ensemble(model, cfg, 10_000, seed=200)
    for label in ("sx", "sz"):
        assert ks_distance(a.samples(label, 0.5), b.samples(label, 0.5)) <= 0.027
    assert ks_null_q99(10_000, 10_000) <= 0.027


def small_study(seed=0):
    return diffusion_approximation_study(HomodyneParams(gamma0=4.0, rabi=2.0), [0.4, 0.2, 0.1],
                                         n_traj=100, t_final=0.2, seed=seed, record_points=4)


def test_study_report_structure():
    rep = small_study()
    assert rep.parameter == "epsilon" and rep.values == [0.4, 0.2, 0.1]
    assert rep.times == [0.1, 0.2]
    for row in rep.rows:
        assert set(row["ks"]) == {f"{o}@{t:g}" for o in ("sx", "sy", "sz") for t in (0.1, 0.2)}
        assert all(0 <= v <= 1 for v in row["ks"].values())
        assert all(v >= 0 for v in row["w1"].values())
    assert set(rep.verdicts) == {"final_ks_within_threshold", "mean_checks",
                                 "weakly_decreasing"}
    assert "calibration" in rep.notes[0]
    assert "artifacts" not in json.loads(rep.to_json())


@pytest.mark.parametrize("eps", [[0.1, 0.1], [0.4, 0.2], [0.1, 0.2, 0.4]])
def test_study_rejects_bad_epsilon_lists(eps):
    with pytest.raises(ValueError):
        diffusion_approximation_study(HomodyneParams(), eps, n_traj=10)


def test_delta_study_validation_and_single_delta():
    p = HeterodyneParams(gamma0=2.0)
    with pytest.raises(ValueError, match="resolve"):
        heterodyne_delta_study(p, [10.0, 160.0], n_traj=10, dt=1e-3)
    with pytest.raises(ValueError, match="increasing"):
        heterodyne_delta_study(p, [40.0, 10.0], n_traj=10)
    rep = heterodyne_delta_study(p, [10.0], n_traj=50, t_final=0.1, record_points=2)
    assert rep.verdicts["weakly_decreasing"] is None
    assert rep.values == [10.0]


def test_report_bytes_reproducible(tmp_path):
    write_report(small_study(seed=5), tmp_path / "a")
    write_report(small_study(seed=5), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "summary.json" in names and "mean_path.csv" in names
    assert "samples_sz_0.2.csv" in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_render_markdown():
    text = render_markdown(small_study().to_dict())
    assert text.startswith("# diffusion_approximation")
    assert "| epsilon |" in text and "## Verdicts" in text


def test_trajectory_csv_columns(tmp_path):
    from smediff.simulate import simulate_jump_diffusion

    model = preset("homodyne-jump", epsilon=0.3)
    path = simulate_jump_diffusion(model.ops, EXCITED, SimConfig(0.1, epsilon=0.3), (0, 0))
    write_trajectory_csv(tmp_path / "t.csv", path)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",") == ["time", "re_00", "im_00", "re_01", "im_01", "re_10", "im_10",
                                   "re_11", "im_11", "count_D1", "count_D2"]
    assert len(lines) == len(path.times) + 1


def test_config_hash_is_canonical():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
