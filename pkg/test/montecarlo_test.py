import dataclasses
import pytest

import numpy as np

from circuitse.casegen import relative_sigma
from circuitse.exceptions import McAborted, ValidationError
from circuitse.interface import ExecutorKind
from circuitse.montecarlo import (
    Histogram,
    McConfig,
    RunningStats,
    _check_failures,
    compare_spreads,
    draw_sample,
    run_mc,
)
from circuitse.network import PerturbationSpec
from circuitse.nonlinear_se import solve_nonlinear_se


def test_running_stats_merge_matches_numpy():
    rng = np.random.default_rng(0)
    data = rng.normal(1.0, 0.1, size=(200, 3))
    parts = [RunningStats.empty(3) for _ in range(3)]
    for i, row in enumerate(data):
        parts[i * 3 // len(data)].push(row)
    total = RunningStats.empty(3)
    for p in parts:
        total.merge(p)
    assert total.count == 200
    np.testing.assert_allclose(total.mean, data.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(total.std, data.std(axis=0, ddof=1), rtol=1e-10)
    np.testing.assert_array_equal(total.min, data.min(axis=0))
    np.testing.assert_array_equal(total.max, data.max(axis=0))


def test_running_stats_small_counts():
    s = RunningStats.empty(2)
    np.testing.assert_array_equal(s.std, [0.0, 0.0])
    s.push(np.array([1.0, 2.0]))
    np.testing.assert_array_equal(s.std, [0.0, 0.0])


def test_histogram_clips_overflow():
    stats = RunningStats.empty(1)
    for x in (0.9, 1.0, 1.1):
        stats.push(np.array([x]))
    hist = Histogram.around(stats, bins=4)
    counts = hist.score(np.array([[-100.0], [1.0], [100.0]]))
    assert counts.sum() == 3
    assert counts[0, 0] == 1
    assert counts[0, -1] == 1


def test_draw_sample_is_pure(noisy_se):
    cfg = McConfig(samples=10, pilot_samples=5, net_uncertainty=PerturbationSpec.typical())
    a = draw_sample(noisy_se, cfg, 3)
    b = draw_sample(noisy_se, cfg, 3)
    np.testing.assert_array_equal(a.measurements.rtu_p, b.measurements.rtu_p)
    np.testing.assert_array_equal(a.branches.x, b.branches.x)
    c = draw_sample(noisy_se, cfg, 4)
    assert not np.array_equal(a.measurements.rtu_p, c.measurements.rtu_p)
    # perfect PMUs keep their readings
    perfect = noisy_se.measurements.pmu_perfect
    np.testing.assert_array_equal(a.measurements.pmu_vr[perfect], noisy_se.measurements.pmu_vr[perfect])
    with pytest.raises(ValidationError):
        draw_sample(noisy_se, cfg, 10)


def test_no_network_draw_without_uncertainty(noisy_se):
    cfg = McConfig(samples=10, pilot_samples=5, net_uncertainty=PerturbationSpec())
    assert not cfg.perturbs_network
    assert draw_sample(noisy_se, cfg, 0).branches is None


def test_zero_uncertainty_collapses(zero_noise_se):
    cfg = McConfig(samples=200, pilot_samples=50, histogram_bins=16, chunk_size=32)
    summary = run_mc(zero_noise_se, cfg)
    assert summary.samples_completed == 200
    assert summary.failed_samples == ()
    np.testing.assert_array_equal(summary.vm.std, 0.0)
    np.testing.assert_allclose(summary.vm.mean, np.abs(zero_noise_se.truth.complex()), atol=1e-8)
    occupied = (summary.vm_hist.counts > 0).sum(axis=1)
    np.testing.assert_array_equal(occupied, 1)
    np.testing.assert_array_equal(summary.vm_hist.counts.sum(axis=1), 200)


def test_histogram_counts_cover_all_samples(noisy_se):
    cfg = McConfig(samples=300, pilot_samples=100, histogram_bins=20, chunk_size=40)
    summary = run_mc(noisy_se, cfg)
    np.testing.assert_array_equal(summary.vm_hist.counts.sum(axis=1), summary.samples_completed)
    np.testing.assert_array_equal(summary.va_hist.counts.sum(axis=1), summary.samples_completed)
    assert summary.vm_hist.edges.shape == (noisy_se.grid.n, 21)
    assert np.all(np.diff(summary.vm_hist.edges, axis=1) > 0)
    assert summary.pmu_hops is not None


def test_independent_of_thread_count(noisy_se):
    cfg = McConfig(samples=256, pilot_samples=64, chunk_size=16, seed=9, net_uncertainty=PerturbationSpec.typical())
    one = run_mc(noisy_se, cfg)
    four = run_mc(noisy_se, dataclasses.replace(cfg, threads=4))
    np.testing.assert_array_equal(one.vm.mean, four.vm.mean)
    np.testing.assert_array_equal(one.va.m2, four.va.m2)
    np.testing.assert_array_equal(one.vm_hist.counts, four.vm_hist.counts)


def test_process_executor_agrees(noisy_se):
    cfg = McConfig(samples=64, pilot_samples=32, chunk_size=16, seed=2)
    threads = run_mc(noisy_se, cfg)
    processes = run_mc(noisy_se, dataclasses.replace(cfg, threads=2, executor=ExecutorKind.PROCESS))
    np.testing.assert_array_equal(threads.vr.mean, processes.vr.mean)
    np.testing.assert_array_equal(threads.vi.m2, processes.vi.m2)


@pytest.mark.asyncio
async def test_aio(noisy_se):
    summary = await run_mc.aio(noisy_se, McConfig(samples=32, pilot_samples=16))
    assert summary.samples_completed == 32


def test_failure_budget():
    _check_failures([1] * 10, 1000)
    with pytest.raises(McAborted) as exc:
        _check_failures([1] * 11, 1000)
    assert exc.value.failed == 11


def test_config_validated():
    with pytest.raises(ValidationError):
        McConfig(samples=10, pilot_samples=20)
    with pytest.raises(ValidationError):
        McConfig(histogram_bins=1)


@pytest.mark.slow
def test_mean_tracks_baseline(noisy_se):
    summary = run_mc(noisy_se, McConfig(samples=4000, pilot_samples=500, threads=4))
    baseline_vm = np.abs(summary.baseline.v)
    stderr = summary.vm.std / np.sqrt(summary.samples_completed)
    assert np.all(np.abs(summary.vm.mean - baseline_vm) < 6 * stderr + 1e-4)


@pytest.mark.slow
def test_network_uncertainty_widens_spread(synthetic60_se):
    cfg = McConfig(samples=2000, pilot_samples=300, threads=4, seed=1)
    without = run_mc(synthetic60_se, cfg)
    with_ = run_mc(synthetic60_se, dataclasses.replace(cfg, net_uncertainty=PerturbationSpec.typical()))
    spread = compare_spreads(without, with_)
    assert spread.median_vm_increase > 0
    assert spread.max_vm_increase > 0.05
    assert spread.median_vm_increase > spread.median_va_increase


def test_draw_sample_channel_spread(noisy_se):
    samples = 20_000
    cfg = McConfig(samples=samples, pilot_samples=100)
    meas = noisy_se.measurements
    noisy = ~meas.pmu_perfect
    channels = {
        "rtu_vm": meas.rtu_sigma_vm_rel,
        "rtu_p": meas.rtu_sigma_p_rel,
        "rtu_q": meas.rtu_sigma_q_rel,
        "pmu_vr": meas.pmu_sigma_rel,
        "pmu_ii": meas.pmu_sigma_rel,
    }
    draws = [draw_sample(noisy_se, cfg, k).measurements for k in range(samples)]
    for name, rel in channels.items():
        mean = getattr(meas, name)
        values = np.array([getattr(d, name) for d in draws])
        if name.startswith("pmu"):
            mean, rel, values = mean[noisy], rel[noisy], values[:, noisy]
        z = (values - mean) / relative_sigma(rel, mean)
        assert np.std(z, ddof=1) == pytest.approx(1.0, rel=0.02), name


@pytest.fixture(scope="module")
def measurement_mc(synthetic60_se):
    return run_mc(synthetic60_se, McConfig(samples=10_000, pilot_samples=500, threads=4, seed=3))


@pytest.mark.slow
def test_mean_coincides_with_deterministic_estimates(synthetic60_se, measurement_mc):
    summary = measurement_mc
    n = summary.samples_completed
    linear = summary.baseline
    nonlinear = solve_nonlinear_se(synthetic60_se)
    for stats, lin, nl in ((summary.vr, linear.vr, nonlinear.vr), (summary.vi, linear.vi, nonlinear.vi)):
        assert np.mean(np.abs(stats.mean - lin) <= 4 * stats.std / np.sqrt(n)) >= 0.99
        assert np.mean(np.abs(stats.mean - nl) <= 5 * stats.std) >= 0.99


@pytest.mark.slow
def test_truth_inside_sampled_range(synthetic60_se, measurement_mc):
    truth = synthetic60_se.truth
    inside = np.ones(synthetic60_se.grid.n, dtype=bool)
    for stats, value in ((measurement_mc.vr, np.asarray(truth.vr)), (measurement_mc.vi, np.asarray(truth.vi))):
        inside &= (stats.min <= value) & (value <= stats.max)
    assert inside.mean() >= 0.99
