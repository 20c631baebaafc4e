import dataclasses
import pytest

import numpy as np

from circuitse.casegen import NoiseSpec, synthetic_case
from circuitse.evaluation import (
    CiTracker,
    StoppingRule,
    ci_stopping,
    estimate,
    run_experiment,
    run_trials,
    sigma_max,
    sigma_max_complex,
    sigma_ss,
)
from circuitse.exceptions import LengthMismatch, ValidationError
from circuitse.interface import Measure, RtuModel, StoppedBy

PMU_RICH = dict(frac_pmu_perfect=0.2, frac_pmu_noisy=0.1)


def test_metric_examples():
    est = ([1.01, 0.0], [0.0, -0.02])
    truth = ([1.0, 0.0], [0.0, 0.0])
    assert sigma_ss(est, truth) == pytest.approx(5e-4)
    assert sigma_max(est, truth) == pytest.approx(0.02)
    assert sigma_max_complex(([0.03], [0.04]), ([0.0], [0.0])) == pytest.approx(0.05)


def test_metrics_check_lengths():
    with pytest.raises(LengthMismatch):
        sigma_ss(([1.0, 2.0], [0.0, 0.0]), ([1.0], [0.0]))


def test_z_value():
    assert StoppingRule(level=0.99).z == pytest.approx(2.5758293, abs=1e-6)
    assert StoppingRule(level=0.95).z == pytest.approx(1.959964, abs=1e-6)


def test_rule_validated():
    with pytest.raises(ValidationError):
        StoppingRule(level=1.0)
    with pytest.raises(ValidationError):
        StoppingRule(min_trials=50, max_trials=10)


def test_constant_stream_stops_at_min_trials():
    stats = ci_stopping(iter(lambda: 3.0, None), StoppingRule(min_trials=30))
    assert stats.trials == 30
    assert stats.stopped_by == StoppedBy.CI
    assert stats.mean == 3.0
    assert stats.ci_half_width == 0.0


def test_zero_stream_stops_at_min_trials():
    stats = ci_stopping(iter(lambda: 0.0, None), StoppingRule(min_trials=30))
    assert stats.trials == 30
    assert stats.stopped_by == StoppedBy.CI
    assert not stats.degenerate_mean


def test_zero_mean_noise_runs_to_max_trials():
    rng = np.random.default_rng(0)
    values = (float(x) for x in rng.standard_normal(10_000))
    stats = ci_stopping(values, StoppingRule(min_trials=30, max_trials=400))
    assert stats.trials == 400
    assert stats.stopped_by == StoppedBy.MAX_TRIALS
    assert not stats.degenerate_mean


def test_positive_stream_converges():
    rng = np.random.default_rng(1)
    values = (float(x) for x in rng.normal(10.0, 1.0, size=10_000))
    rule = StoppingRule(level=0.99, rel=0.05, min_trials=30, max_trials=10_000)
    stats = ci_stopping(values, rule)
    assert stats.stopped_by == StoppedBy.CI
    assert stats.ci_half_width < 0.05 * stats.mean
    assert 30 <= stats.trials < 100


def test_tracker_refuses_after_stop():
    tracker = CiTracker(StoppingRule(min_trials=2, max_trials=2))
    tracker.push(1.0)
    assert tracker.push(2.0)
    with pytest.raises(RuntimeError):
        tracker.push(3.0)


def test_estimate_dispatch(zero_noise_se):
    assert estimate(zero_noise_se, RtuModel.DELTA_I).model == RtuModel.DELTA_I
    assert estimate(zero_noise_se, RtuModel.DELTA_Y).model == RtuModel.DELTA_Y


def test_zero_noise_trials(case14, case14_pf):
    spec = NoiseSpec.zero_noise(**PMU_RICH)
    stats = run_trials(case14, spec, RtuModel.DELTA_I, Measure.SIGMA_SS, StoppingRule(min_trials=5), pf=case14_pf)
    assert stats.stopped_by == StoppedBy.CI
    assert stats.trials == 5
    assert max(stats.values) < 1e-14


def test_trials_reproducible_across_threads(case14, case14_pf):
    spec = NoiseSpec(**PMU_RICH)
    rule = StoppingRule(min_trials=10, max_trials=40)
    one = run_trials(case14, spec, stopping=rule, seed=3, threads=1, pf=case14_pf)
    three = run_trials(case14, spec, stopping=rule, seed=3, threads=3, pf=case14_pf)
    assert one.values == three.values
    assert one.trials == three.trials


@pytest.mark.asyncio
async def test_trials_aio(case14, case14_pf):
    rule = StoppingRule(min_trials=4, max_trials=8)
    stats = await run_trials.aio(case14, NoiseSpec(**PMU_RICH), stopping=rule, pf=case14_pf)
    assert 4 <= stats.trials <= 8


def test_experiment_rows(case14):
    rule = StoppingRule(min_trials=4, max_trials=6)
    rows = run_experiment(
        case14,
        NoiseSpec(**PMU_RICH, degraded_frac=0.2),
        models=(RtuModel.DELTA_I, RtuModel.DELTA_Y),
        measures=(Measure.SIGMA_SS,),
        weightings=(True, False),
        stopping=rule,
    )
    assert [(r.weighted, r.model) for r in rows] == [
        (True, RtuModel.DELTA_I),
        (True, RtuModel.DELTA_Y),
        (False, RtuModel.DELTA_I),
        (False, RtuModel.DELTA_Y),
    ]
    record = rows[0].as_record()
    assert record["case"] == case14.name
    assert record["measure"] == "ss"


@pytest.mark.slow
def test_weighting_helps_with_degraded_rtus(synthetic60):
    spec = NoiseSpec(**PMU_RICH, degraded_frac=0.3)
    rule = StoppingRule(min_trials=50, max_trials=400)
    weighted = run_trials(synthetic60, spec, stopping=rule, seed=1, threads=4)
    unweighted = run_trials(synthetic60, dataclasses.replace(spec, weighted=False), stopping=rule, seed=1, threads=4)
    assert weighted.mean < unweighted.mean


@pytest.mark.slow
def test_trials_on_large_synthetic_case():
    rule = StoppingRule(min_trials=3, max_trials=3)
    stats = run_trials(synthetic_case(200, seed=2), NoiseSpec(**PMU_RICH), stopping=rule, threads=2)
    assert stats.trials == 3
    assert stats.failed_trials == ()


@pytest.mark.parametrize("seed", range(5))
def test_metric_identities(seed):
    rng = np.random.default_rng(seed)
    est = tuple(rng.standard_normal(12) for _ in range(2))
    truth = tuple(rng.standard_normal(12) for _ in range(2))
    assert sigma_ss(truth, truth) == 0.0
    assert sigma_max(est, truth) ** 2 <= sigma_ss(est, truth)
    perm = rng.permutation(12)
    shuffled_est = tuple(a[perm] for a in est)
    shuffled_truth = tuple(a[perm] for a in truth)
    assert sigma_ss(shuffled_est, shuffled_truth) == pytest.approx(sigma_ss(est, truth), rel=1e-12)
    assert sigma_max(shuffled_est, shuffled_truth) == sigma_max(est, truth)


@pytest.mark.parametrize("mu,sigma", [(10.0, 3.0), (1.0, 0.2)])
def test_stopping_point_tracks_sample_size_formula(mu, sigma):
    rule = StoppingRule(level=0.99, rel=0.05, min_trials=5, max_trials=20_000)
    n_star = (rule.z * sigma / (0.05 * mu)) ** 2
    stops = []
    for rep in range(100):
        rng = np.random.default_rng(1000 + rep)
        stops.append(ci_stopping((float(x) for x in rng.normal(mu, sigma, size=20_000)), rule).trials)
    assert n_star / 2 <= np.median(stops) <= 2 * n_star


@pytest.mark.slow
def test_models_agree_on_a_500_bus_case():
    c = synthetic_case(500, seed=0)
    rule = StoppingRule(min_trials=30, max_trials=300)
    rows = run_experiment(
        c,
        NoiseSpec(),
        models=(RtuModel.DELTA_I, RtuModel.DELTA_Y),
        measures=(Measure.SIGMA_SS,),
        stopping=rule,
        threads=4,
    )
    delta_i, delta_y = (r.stats.mean for r in rows)
    assert 1 / 5 <= delta_y / delta_i <= 5


@pytest.mark.slow
def test_weighting_separates_confidence_intervals():
    c = synthetic_case(118, seed=0)
    rule = StoppingRule(min_trials=30, max_trials=2000)
    rows = run_experiment(
        c,
        NoiseSpec(degraded_frac=0.1),
        measures=(Measure.SIGMA_SS,),
        weightings=(True, False),
        stopping=rule,
        seed=5,
        threads=4,
    )
    by_key = {(r.model, r.weighted): r.stats for r in rows}
    for model in (RtuModel.DELTA_I, RtuModel.DELTA_Y):
        weighted, unweighted = by_key[model, True], by_key[model, False]
        assert weighted.mean + weighted.ci_half_width < unweighted.mean - unweighted.ci_half_width
