from dataclasses import replace

import numpy as np
import pytest

from autolock_sim.cache_model import LatencyModel, Side
from autolock_sim.detection import (CalibrationError, Capabilities, InconclusiveError, Method,
                                    SimulatorPlatform, TargetPlatform, UnsupportedMethod,
                                    calibrate_threshold, debugger_test, emit_histogram,
                                    histogram, histogram_csv, pairwise_tests, pmu_test,
                                    run_test, threshold_from_samples, timing_test)
from autolock_sim.eviction import EvictionStrategy
from autolock_sim.profiles import PROFILE_NAMES, load_profile

TARGET = 0x40000


def platform(name, jitter=None, seed=0):
    prof = load_profile(name)
    cfg = prof.config
    if jitter is not None:
        cfg = cfg.with_(latency=replace(cfg.latency, jitter_stddev=jitter))
    return prof, SimulatorPlatform(cfg, seed=seed), prof.eviction_strategy(TARGET, cfg)


@pytest.mark.parametrize("method", list(Method))
@pytest.mark.parametrize("name", PROFILE_NAMES)
def test_verdicts_match_ground_truth_noiseless(name, method):
    prof, p, s = platform(name, jitter=0.0)
    v = run_test(method, p, TARGET, s, trials=11)
    assert v.present == prof.ground_truth_autolock and v.confidence == 1.0


def test_debugger_on_a57_and_krait():
    _, p, s = platform("A57")
    assert debugger_test(p, TARGET, s, 5).present
    _, p, s = platform("Krait450")
    v = debugger_test(p, TARGET, s, 5)
    assert not v.present and v.evidence == (False,) * 5


def test_pmu_reference_and_deltas():
    _, p, s = platform("A53")
    v = pmu_test(p, TARGET, s, trials=3)
    assert v.present and v.reference == 0 and set(v.evidence) == {0}
    _, p, s = platform("Krait450")
    v = pmu_test(p, TARGET, s, trials=3)
    assert not v.present and set(v.evidence) == {v.reference + 1}


def test_pmu_single_trial():
    _, p, s = platform("A15")
    v = pmu_test(p, TARGET, s, trials=1)
    assert v.present and v.confidence == 1.0


def test_pmu_delta_replays_from_trace():
    # the counter delta equals the number of L1 misses in the reload trace
    _, p, s = platform("Krait450")
    p.reset()
    p.bring_in(0, TARGET, s.side)
    p.evict_from(1, s)
    l1_resident = p.in_l1(0, TARGET, s.side)
    before = p.l2_access_count()
    p.reload(0, TARGET, s.side)
    assert p.l2_access_count() - before == int(not l1_resident)


def test_timing_verdicts_with_default_jitter():
    _, p, s = platform("A57")
    assert timing_test(p, TARGET, s, 170.0, trials=31).present
    _, p, s = platform("Krait450")
    v = timing_test(p, TARGET, s, 170.0, trials=31)
    assert not v.present and v.confidence >= 0.95


def test_wrong_set_strategy_is_inconclusive():
    prof, p, _ = platform("A15")
    other = prof.eviction_strategy(TARGET + prof.config.line_size)
    with pytest.raises(InconclusiveError) as err:
        debugger_test(p, TARGET, other, 3)
    assert err.value.verdict.present


def test_calibration_thresholds():
    _, p, _ = platform("A15")
    assert 40 < calibrate_threshold(p, TARGET, samples=200) < 300
    _, p, _ = platform("A15", jitter=0.0)
    assert calibrate_threshold(p, TARGET, samples=10) == 170.0


def test_calibration_fails_on_inseparable_model():
    prof = load_profile("A15")
    with pytest.raises(CalibrationError):
        threshold_from_samples([40, 41, 39], [40, 40, 41])
    lat = LatencyModel(l1_hit=4, l2_hit=40, memory=300, jitter_stddev=0.0)
    p = SimulatorPlatform(prof.config.with_(latency=lat))
    with pytest.raises(ValueError):
        calibrate_threshold(p, TARGET, samples=1)


def test_calibration_needs_two_cores():
    prof = load_profile("A15")
    p = SimulatorPlatform(prof.config.with_(num_cores=1, autolock=False))
    with pytest.raises(ValueError):
        calibrate_threshold(p, TARGET)


def test_trials_validated():
    _, p, s = platform("A15")
    with pytest.raises(ValueError):
        debugger_test(p, TARGET, s, 0)


def test_pairwise_runs_every_core():
    prof, p, s = platform("A7", jitter=0.0)
    res = pairwise_tests(Method.PMU, p, TARGET, s, trials=3)
    assert sorted(res) == [1, 2, 3] and all(v.present for v in res.values())


class _TimingOnly(TargetPlatform):
    capabilities = Capabilities(False, False, True)
    num_cores = 2

    def reset(self):
        pass

    def bring_in(self, core, addr, side):
        pass

    def evict_from(self, core, strategy):
        pass


def test_missing_capability_raises():
    s = EvictionStrategy(1, 1, 1, (0, 64))
    with pytest.raises(UnsupportedMethod):
        debugger_test(_TimingOnly(), 0, s, 1)
    with pytest.raises(UnsupportedMethod):
        pmu_test(_TimingOnly(), 0, s, 1)


def test_confidence_degrades_gracefully_with_jitter():
    # largest jitter the config accepts is just below (memory - l2_hit) / 6
    sd = 43.0
    for name in ("A57", "Krait450"):
        prof, p, s = platform(name, jitter=sd, seed=5)
        v = timing_test(p, TARGET, s, 170.0, trials=201)
        assert v.present == prof.ground_truth_autolock and v.confidence >= 0.95


def test_histograms():
    _, p, s = platform("Krait450")
    rows = emit_histogram(p, TARGET, s, 300, with_eviction=True)
    assert sum(c for _, c, _ in rows) == 300
    assert all(b > 170 for b, _, _ in rows) and rows[0][2] == "with_eviction"
    rows = emit_histogram(p, TARGET, s, 300, with_eviction=False)
    assert all(b < 170 for b, _, _ in rows)
    _, p, s = platform("A57")
    rows = emit_histogram(p, TARGET, s, 300, with_eviction=True)
    assert all(b < 170 for b, _, _ in rows)


def test_histogram_binning_and_csv():
    rows = histogram([0, 9, 10, 305, 309], "x")
    assert rows == [(0, 2, "x"), (10, 1, "x"), (300, 2, "x")]
    assert histogram_csv(rows).splitlines() == ["latency_bin,count,series_label", "0,2,x",
                                                "10,1,x", "300,2,x"]


def test_verdict_report_text():
    _, p, s = platform("A15")
    v = pmu_test(p, TARGET, s, trials=1)
    assert v.report("A15") == "method=pmu profile=A15 present=true confidence=1.0000"


def test_platform_seed_reproducible():
    times = []
    for _ in range(2):
        _, p, s = platform("Krait450", seed=9)
        times.append(timing_test(p, TARGET, s, 170.0, trials=5).evidence)
    assert times[0] == times[1]
    assert np.std(times[0]) > 0
