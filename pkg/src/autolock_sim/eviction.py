"""Congruent eviction sets, sliding-window eviction and N-A-D tuning."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _kernels as K
from .cache_model import CacheHierarchy, CacheLevel, HierarchyConfig, Side


class NoReliableStrategy(RuntimeError):
    """No grid point reached the requested success rate."""

    def __init__(self, report: "SearchReport"):
        super().__init__(f"no reliable strategy in grid (threshold {report.threshold})")
        self.report = report


@dataclass(frozen=True)
class EvictionStrategy:
    n: int
    a: int
    d: int
    c: tuple[int, ...]
    side: Side = Side.DATA

    def __post_init__(self):
        if min(self.n, self.a, self.d) < 1:
            raise ValueError("N, A and D must all be at least 1")
        if len(self.c) < self.n + self.d:
            raise ValueError(f"eviction set of {len(self.c)} addresses is smaller than "
                             f"N + D = {self.n + self.d}")
        if self.side is Side.NONE:
            raise ValueError("strategy side must be data or instruction")

    @property
    def triple(self) -> tuple[int, int, int]:
        return (self.n, self.a, self.d)

    @property
    def accesses(self) -> int:
        return self.n * self.a * self.d

    def label(self) -> str:
        return f"{self.n}-{self.a}-{self.d}"

    @classmethod
    def for_target(cls, config: HierarchyConfig, target: int, n: int, a: int, d: int,
                   side: Side = Side.DATA) -> "EvictionStrategy":
        return cls(n, a, d, tuple(build_eviction_set(target, n + d, config)), side)


def parse_triple(text: str) -> tuple[int, int, int]:
    """Parse ``"23-4-2"`` into (23, 4, 2)."""
    parts = text.strip().split("-")
    if len(parts) != 3:
        raise ValueError(f"expected N-A-D, got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def build_eviction_set(target: int, size: int, config: HierarchyConfig) -> list[int]:
    """``size`` addresses sharing the target's L2 set index but not its tag.

    Tags are walked upward from the target's, wrapping around the physical
    address space.
    """
    if size < 1:
        raise ValueError("eviction set size must be at least 1")
    space = 1 << config.address_bits
    if not 0 <= target < space:
        raise ValueError(f"target {target:#x} outside the physical range")
    stride = config.line_size * config.l2_sets
    n_tags = space // stride
    if size > n_tags - 1:
        raise ValueError(f"address space offers only {n_tags - 1} congruent lines, "
                         f"{size} requested")
    base = target & ~(config.line_size - 1)
    return [(base + k * stride) % space for k in range(1, size + 1)]


def access_sequence(strategy: EvictionStrategy) -> Iterator[int]:
    """Addresses in issue order: for i < N, j < A, k < D: C[i + k]."""
    c = strategy.c
    for i in range(strategy.n):
        for _ in range(strategy.a):
            for k in range(strategy.d):
                yield c[i + k]


def line_array(strategy: EvictionStrategy, config: HierarchyConfig) -> np.ndarray:
    return np.array([addr >> config.line_bits for addr in strategy.c], np.int64)


def run_eviction(h: CacheHierarchy, strategy: EvictionStrategy, core: int) -> None:
    """Issue the strategy's N*A*D accesses on ``core``."""
    if not 0 <= core < h.config.num_cores:
        raise ValueError(f"core {core} out of range")
    K.run_eviction(h.state, core, strategy.side.code, line_array(strategy, h.config),
                   strategy.n, strategy.a, strategy.d)


def eviction_trial(config: HierarchyConfig, target: int, strategy: EvictionStrategy,
                   owner: int = 0, evictor: int = 0, seed: int = 0) -> bool:
    """Fresh hierarchy: ``owner`` loads the target, ``evictor`` runs the
    strategy. True if the target left L2."""
    h = CacheHierarchy(config.with_(replacement_seed=seed))
    h.touch(owner, target, strategy.side)
    run_eviction(h, strategy, evictor)
    return not h.inspect(CacheLevel.L2, target).present


@dataclass(frozen=True)
class Candidate:
    n: int
    a: int
    d: int
    accesses: int
    success_rate: float


@dataclass
class SearchReport:
    threshold: float
    candidates: list[Candidate] = field(default_factory=list)
    chosen: Candidate | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "A", "D", "accesses", "success_rate"])
        for c in self.candidates:
            w.writerow([c.n, c.a, c.d, c.accesses, f"{c.success_rate:.6f}"])
        return buf.getvalue()


def default_grid(n: Iterable[int] = range(1, 61), a: Iterable[int] = range(1, 7),
                 d: Iterable[int] = range(1, 7)) -> list[tuple[int, int, int]]:
    return list(itertools.product(n, a, d))


def search_parameters(config: HierarchyConfig, target: int,
                      grid: Sequence[tuple[int, int, int]], trials: int = 10,
                      threshold: float = 1.0, side: Side = Side.DATA,
                      core: int = 0, seed: int = 0, strict: bool = True) -> SearchReport:
    """Evaluate every grid triple same-core and pick the cheapest reliable one.

    Candidates are listed by access count, ties broken by (N, A, D). With
    ``strict`` a grid without a reliable triple raises NoReliableStrategy;
    otherwise the report comes back with ``chosen = None``.
    """
    if not grid:
        raise ValueError("empty parameter grid")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    report = SearchReport(threshold)
    for n, a, d in sorted(set(grid), key=lambda t: (t[0] * t[1] * t[2], t)):
        strategy = EvictionStrategy.for_target(config, target, n, a, d, side)
        ok = sum(eviction_trial(config, target, strategy, core, core, seed + t)
                 for t in range(trials))
        cand = Candidate(n, a, d, n * a * d, ok / trials)
        report.candidates.append(cand)
        if report.chosen is None and cand.success_rate >= threshold:
            report.chosen = cand
    if report.chosen is None and strict:
        raise NoReliableStrategy(report)
    return report
