"""AutoLock detection: debugger-style inspection, L2 access counting and
reload timing, run against an abstract two-core target platform."""

from __future__ import annotations

import abc
import csv
import enum
import io
import statistics
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cache_model import (AccessKind, CacheHierarchy, CacheLevel, HierarchyConfig,
                          MemoryAccess, Side)
from .eviction import EvictionStrategy, run_eviction

DEFAULT_TRIALS = 101
HISTOGRAM_BIN = 10


class Method(enum.Enum):
    DEBUGGER = "debugger"
    PMU = "pmu"
    TIMING = "timing"


class UnsupportedMethod(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Capabilities:
    can_inspect: bool
    can_count_events: bool
    can_time: bool


@dataclass(frozen=True)
class DetectionVerdict:
    method: Method
    present: bool
    confidence: float
    evidence: tuple = ()
    reference: int | None = None

    def report(self, profile: str = "") -> str:
        return (f"method={self.method.value} profile={profile} "
                f"present={str(self.present).lower()} confidence={self.confidence:.4f}")


class InconclusiveError(RuntimeError):
    """Same-core eviction failed with the given strategy, so a cross-core
    survival would not prove anything."""

    def __init__(self, method: Method, verdict: DetectionVerdict | None = None):
        super().__init__(f"{method.value} test inconclusive: the strategy does not evict "
                         "the target even on the same core")
        self.method = method
        self.verdict = verdict


class TargetPlatform(abc.ABC):
    """What a detection test needs from a device: two cores, memory accesses,
    an eviction routine and at least one way of observing the target."""

    capabilities: Capabilities
    num_cores: int

    @abc.abstractmethod
    def reset(self) -> None:
        """Return to a cold-cache starting point."""

    @abc.abstractmethod
    def bring_in(self, core: int, addr: int, side: Side) -> None: ...

    @abc.abstractmethod
    def evict_from(self, core: int, strategy: EvictionStrategy) -> None: ...

    def reload_time(self, core: int, addr: int, side: Side) -> int:
        raise UnsupportedMethod("platform cannot time accesses")

    def l2_access_count(self) -> int:
        raise UnsupportedMethod("platform has no L2 access counter")

    def in_l1(self, core: int, addr: int, side: Side) -> bool:
        raise UnsupportedMethod("platform cannot inspect caches")

    def in_l2(self, addr: int) -> bool:
        raise UnsupportedMethod("platform cannot inspect caches")

    def reload(self, core: int, addr: int, side: Side) -> None:
        """Untimed reload; defaults to a timed one with the result dropped."""
        self.reload_time(core, addr, side)


class SimulatorPlatform(TargetPlatform):
    capabilities = Capabilities(True, True, True)

    def __init__(self, config: HierarchyConfig, seed: int | None = None):
        self.config = config
        self.num_cores = config.num_cores
        self.h = CacheHierarchy(config)
        self._rng = np.random.default_rng(config.latency.rng_seed if seed is None else seed)

    def reset(self) -> None:
        self.h.reset()

    def bring_in(self, core: int, addr: int, side: Side) -> None:
        self.h.touch(core, addr, side)

    def evict_from(self, core: int, strategy: EvictionStrategy) -> None:
        run_eviction(self.h, strategy, core)

    def reload_time(self, core: int, addr: int, side: Side) -> int:
        z = float(self._rng.standard_normal())
        return self.h.access(MemoryAccess(core, addr, AccessKind.for_side(side)), z).latency

    def reload(self, core: int, addr: int, side: Side) -> None:
        self.h.touch(core, addr, side)

    def l2_access_count(self) -> int:
        return self.h.read_counters().l2_accesses

    def in_l1(self, core: int, addr: int, side: Side) -> bool:
        return self.h.in_l1(core, addr, side)

    def in_l2(self, addr: int) -> bool:
        return self.h.inspect(CacheLevel.L2, addr).present


def _require(p: TargetPlatform, method: Method) -> None:
    caps = p.capabilities
    ok = {Method.DEBUGGER: caps.can_inspect, Method.PMU: caps.can_count_events,
          Method.TIMING: caps.can_time}[method]
    if not ok:
        raise UnsupportedMethod(f"platform does not support the {method.value} test")


def same_core_eviction_works(p: TargetPlatform, target: int, strategy: EvictionStrategy,
                             trials: int = 3, threshold: float | None = None) -> bool | None:
    """Check the strategy evicts the target on its own core.

    Uses inspection when available, otherwise a timed reload against
    ``threshold``. Returns None when the platform offers neither.
    """
    caps = p.capabilities
    if not caps.can_inspect and not (caps.can_time and threshold is not None):
        return None
    ok = 0
    for _ in range(trials):
        p.reset()
        p.bring_in(0, target, strategy.side)
        p.evict_from(0, strategy)
        if caps.can_inspect:
            ok += not p.in_l2(target)
        else:
            ok += p.reload_time(0, target, strategy.side) >= threshold
    return 2 * ok > trials


def _guard(p, method, target, strategy, verdict, threshold=None):
    if same_core_eviction_works(p, target, strategy, threshold=threshold) is False:
        raise InconclusiveError(method, verdict)
    return verdict


def _verdict(method: Method, votes: Sequence[bool], evidence, reference=None,
             present: bool | None = None) -> DetectionVerdict:
    if present is None:
        present = 2 * sum(votes) > len(votes)
    agree = sum(1 for v in votes if v == present)
    return DetectionVerdict(method, present, agree / len(votes), tuple(evidence), reference)


def _check_trials(trials: int) -> None:
    if trials < 1:
        raise ValueError("trials must be at least 1")


def debugger_test(p: TargetPlatform, target: int, strategy: EvictionStrategy,
                  trials: int = DEFAULT_TRIALS, victim: int = 0,
                  attacker: int = 1) -> DetectionVerdict:
    """Present if the target survives a cross-core eviction in the victim's
    L1 or in L2, judged by direct inspection."""
    _require(p, Method.DEBUGGER)
    _check_trials(trials)
    votes = []
    for _ in range(trials):
        p.reset()
        p.bring_in(victim, target, strategy.side)
        p.evict_from(attacker, strategy)
        votes.append(p.in_l1(victim, target, strategy.side) or p.in_l2(target))
    return _guard(p, Method.DEBUGGER, target, strategy,
                  _verdict(Method.DEBUGGER, votes, votes))


def pmu_test(p: TargetPlatform, target: int, strategy: EvictionStrategy,
             trials: int = DEFAULT_TRIALS, tolerance: int = 0, victim: int = 0,
             attacker: int = 1) -> DetectionVerdict:
    """Present if the reload after a cross-core eviction costs no more L2
    accesses than a reload with no eviction at all (the reference R)."""
    _require(p, Method.PMU)
    _check_trials(trials)
    p.reset()
    p.bring_in(victim, target, strategy.side)
    before = p.l2_access_count()
    p.reload(victim, target, strategy.side)
    ref = p.l2_access_count() - before

    deltas = []
    for _ in range(trials):
        p.reset()
        p.bring_in(victim, target, strategy.side)
        p.evict_from(attacker, strategy)
        before = p.l2_access_count()
        p.reload(victim, target, strategy.side)
        deltas.append(p.l2_access_count() - before)
    votes = [abs(d - ref) <= tolerance for d in deltas]
    return _guard(p, Method.PMU, target, strategy,
                  _verdict(Method.PMU, votes, deltas, reference=ref))


def timing_test(p: TargetPlatform, target: int, strategy: EvictionStrategy,
                memory_threshold: float, trials: int = DEFAULT_TRIALS, victim: int = 0,
                attacker: int = 1) -> DetectionVerdict:
    """Present if the median reload time after a cross-core eviction stays
    below ``memory_threshold``."""
    _require(p, Method.TIMING)
    _check_trials(trials)
    times = []
    for _ in range(trials):
        p.reset()
        p.bring_in(victim, target, strategy.side)
        p.evict_from(attacker, strategy)
        times.append(p.reload_time(victim, target, strategy.side))
    present = statistics.median(times) < memory_threshold
    votes = [t < memory_threshold for t in times]
    return _guard(p, Method.TIMING, target, strategy,
                  _verdict(Method.TIMING, votes, times, present=present), memory_threshold)


def run_test(method: Method, p: TargetPlatform, target: int, strategy: EvictionStrategy,
             trials: int = DEFAULT_TRIALS, memory_threshold: float | None = None,
             victim: int = 0, attacker: int = 1) -> DetectionVerdict:
    if method is Method.DEBUGGER:
        return debugger_test(p, target, strategy, trials, victim, attacker)
    if method is Method.PMU:
        return pmu_test(p, target, strategy, trials, victim=victim, attacker=attacker)
    if memory_threshold is None:
        memory_threshold = calibrate_threshold(p, target, side=strategy.side)
    return timing_test(p, target, strategy, memory_threshold, trials, victim, attacker)


def pairwise_tests(method: Method, p: TargetPlatform, target: int,
                   strategy: EvictionStrategy, trials: int = DEFAULT_TRIALS,
                   memory_threshold: float | None = None) -> dict[int, DetectionVerdict]:
    """Repeat a test with core 0 as victim against every other core."""
    return {k: run_test(method, p, target, strategy, trials, memory_threshold, 0, k)
            for k in range(1, p.num_cores)}


def threshold_from_samples(cached: Sequence[float], uncached: Sequence[float]) -> float:
    """Midpoint of the two medians; fails when the median gap is not larger
    than twice the pooled standard deviation."""
    if len(cached) < 2 or len(uncached) < 2:
        raise ValueError("need at least two samples per distribution")
    mc, mu = statistics.median(cached), statistics.median(uncached)
    pooled = ((statistics.pvariance(cached) + statistics.pvariance(uncached)) / 2) ** 0.5
    if mu - mc <= 2 * pooled:
        raise CalibrationError(f"cached and uncached reloads are not separable "
                               f"(median gap {mu - mc:.1f}, pooled stddev {pooled:.1f})")
    return (mc + mu) / 2


def calibrate_threshold(p: TargetPlatform, target: int, samples: int = 1000,
                        side: Side = Side.DATA, core: int = 0, helper: int = 1) -> float:
    """Reload-time threshold separating L2 hits from memory fetches.

    Cached samples reload a line that ``helper`` just brought into L2;
    uncached samples reload a line nobody has touched.
    """
    _require(p, Method.TIMING)
    if samples < 2:
        raise ValueError("samples must be at least 2")
    if p.num_cores < 2:
        raise ValueError("calibration needs a second core to stage L2 hits")
    cached, uncached = [], []
    for _ in range(samples):
        p.reset()
        p.bring_in(helper, target, side)
        cached.append(p.reload_time(core, target, side))
        p.reset()
        uncached.append(p.reload_time(core, target, side))
    return threshold_from_samples(cached, uncached)


def measure_reloads(p: TargetPlatform, target: int, strategy: EvictionStrategy,
                    samples: int, with_eviction: bool, victim: int = 0,
                    attacker: int = 1) -> list[int]:
    if samples < 1:
        raise ValueError("samples must be at least 1")
    _require(p, Method.TIMING)
    out = []
    for _ in range(samples):
        p.reset()
        p.bring_in(victim, target, strategy.side)
        if with_eviction:
            p.evict_from(attacker, strategy)
        out.append(p.reload_time(victim, target, strategy.side))
    return out


def histogram(times: Sequence[int], label: str, bin_width: int = HISTOGRAM_BIN
              ) -> list[tuple[int, int, str]]:
    counts = Counter((t // bin_width) * bin_width for t in times)
    return [(b, counts[b], label) for b in sorted(counts)]


def emit_histogram(p: TargetPlatform, target: int, strategy: EvictionStrategy,
                   samples: int, with_eviction: bool, label: str | None = None
                   ) -> list[tuple[int, int, str]]:
    """(latency_bin, count, series_label) rows for one series, bin width 10."""
    if label is None:
        label = "with_eviction" if with_eviction else "without_eviction"
    return histogram(measure_reloads(p, target, strategy, samples, with_eviction), label)


def histogram_csv(rows: Sequence[tuple[int, int, str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["latency_bin", "count", "series_label"])
    w.writerows(rows)
    return buf.getvalue()
