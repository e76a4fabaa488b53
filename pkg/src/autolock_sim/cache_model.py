"""Multi-core cache hierarchy with split L1s and a shared, optionally
inclusive L2 that can auto-lock lines held in core-private caches."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import _kernels as K


class ConfigError(ValueError):
    """Raised for hierarchy descriptions the simulator refuses to model."""


class Side(enum.Enum):
    INSTRUCTION = "instruction"
    DATA = "data"
    NONE = "none"

    @property
    def code(self) -> int:
        return {Side.INSTRUCTION: K.SIDE_I, Side.DATA: K.SIDE_D, Side.NONE: K.SIDE_NONE}[self]


class Replacement(enum.Enum):
    LRU = "lru"
    ROUND_ROBIN = "round_robin"
    PSEUDO_RANDOM = "pseudo_random"


class NonInclusiveAllocation(enum.Enum):
    ON_EVICTION = "on_eviction"
    ON_MISS = "on_miss"
    NEVER = "never"


class AccessKind(enum.Enum):
    DATA_READ = "data_read"
    DATA_WRITE = "data_write"
    INSTRUCTION_FETCH = "instruction_fetch"

    @property
    def side(self) -> Side:
        return Side.INSTRUCTION if self is AccessKind.INSTRUCTION_FETCH else Side.DATA

    @classmethod
    def for_side(cls, side: Side) -> "AccessKind":
        return cls.INSTRUCTION_FETCH if side is Side.INSTRUCTION else cls.DATA_READ


class Level(enum.Enum):
    L1 = "L1"
    L2 = "L2"
    MEMORY = "Memory"


class CacheLevel(enum.Enum):
    """Structures that can be inspected."""
    L1I = "L1I"
    L1D = "L1D"
    L2 = "L2"


_LEVELS = (Level.L1, Level.L2, Level.MEMORY)


def _pow2(x: int) -> bool:
    return x > 0 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class LatencyModel:
    l1_hit: int = 4
    l2_hit: int = 40
    memory: int = 300
    jitter_stddev: float = 20.0
    rng_seed: int = 0

    def validate(self) -> None:
        if not (0 <= self.l1_hit < self.l2_hit < self.memory):
            raise ConfigError("latencies must satisfy l1_hit < l2_hit < memory")
        if self.jitter_stddev < 0:
            raise ConfigError("jitter_stddev must be non-negative")
        if not (self.memory - self.l2_hit) > 6 * self.jitter_stddev:
            raise ConfigError("memory - l2_hit must exceed 6 x jitter_stddev")

    def base(self, level: Level) -> int:
        return {Level.L1: self.l1_hit, Level.L2: self.l2_hit, Level.MEMORY: self.memory}[level]


@dataclass(frozen=True)
class HierarchyConfig:
    num_cores: int
    line_size: int
    l1i_ways: int
    l1d_ways: int
    l2_ways: int
    l1_sets: int
    l2_sets: int
    l2_inclusive_side: Side
    autolock: bool
    replacement: Replacement = Replacement.LRU
    replacement_seed: int = 0
    latency: LatencyModel = field(default_factory=LatencyModel)
    noninclusive_allocation: NonInclusiveAllocation = NonInclusiveAllocation.ON_EVICTION
    address_bits: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_cores < 1:
            raise ConfigError("need at least one core")
        for name in ("line_size", "l1_sets", "l2_sets"):
            if not _pow2(getattr(self, name)):
                raise ConfigError(f"{name} must be a power of two")
        for name in ("l1i_ways", "l1d_ways", "l2_ways"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.line_size < 4:
            raise ConfigError("line_size must hold at least one 4-byte word")
        if (1 << self.address_bits) < self.line_size * self.l2_sets:
            raise ConfigError("address space smaller than one L2 way")
        if self.autolock:
            if self.l2_inclusive_side is Side.NONE:
                raise ConfigError("autolock requires an inclusive L2 side")
            if self.l2_ways < self.inclusive_ways_sum:
                raise ConfigError(
                    f"autolock with l2_ways={self.l2_ways} below the inclusive L1 way sum "
                    f"{self.inclusive_ways_sum} is not modelled")
            if self.l2_sets < self.l1_sets:
                raise ConfigError("autolock requires l2_sets >= l1_sets")
        self.latency.validate()

    @property
    def inclusive_ways_sum(self) -> int:
        """Sum of inclusive-side L1 ways over all cores (0 if non-inclusive)."""
        if self.l2_inclusive_side is Side.INSTRUCTION:
            return self.num_cores * self.l1i_ways
        if self.l2_inclusive_side is Side.DATA:
            return self.num_cores * self.l1d_ways
        return 0

    @property
    def line_bits(self) -> int:
        return self.line_size.bit_length() - 1

    def l1_ways(self, side: Side) -> int:
        return self.l1i_ways if side is Side.INSTRUCTION else self.l1d_ways

    def l2_set_of(self, addr: int) -> int:
        return (addr >> self.line_bits) & (self.l2_sets - 1)

    def l1_set_of(self, addr: int) -> int:
        return (addr >> self.line_bits) & (self.l1_sets - 1)

    def with_(self, **changes) -> "HierarchyConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["l2_inclusive_side"] = self.l2_inclusive_side.value
        d["replacement"] = self.replacement.value
        d["noninclusive_allocation"] = self.noninclusive_allocation.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchyConfig":
        d = dict(d)
        d["l2_inclusive_side"] = Side(d["l2_inclusive_side"])
        d["replacement"] = Replacement(d.get("replacement", "lru"))
        d["noninclusive_allocation"] = NonInclusiveAllocation(
            d.get("noninclusive_allocation", "on_eviction"))
        d["latency"] = LatencyModel(**d.get("latency", {}))
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HierarchyConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class MemoryAccess:
    core: int
    addr: int
    kind: AccessKind = AccessKind.DATA_READ


@dataclass(frozen=True)
class AccessResult:
    level_served: Level
    latency: int


@dataclass(frozen=True)
class CacheLine:
    tag: int
    valid: bool
    inclusion_locked: bool
    replacement_meta: int


@dataclass(frozen=True)
class Inspection:
    present: bool
    locked: bool


@dataclass(frozen=True)
class EventCounters:
    l2_accesses: int = 0
    l1_hits: int = 0
    l2_hits: int = 0
    memory_fetches: int = 0
    l2_evictions: int = 0
    l2_lock_fallbacks: int = 0

    def __sub__(self, other: "EventCounters") -> "EventCounters":
        pairs = zip(astuple_counters(self), astuple_counters(other))
        return EventCounters(*(a - b for a, b in pairs))


def astuple_counters(c: EventCounters) -> tuple[int, ...]:
    return (c.l2_accesses, c.l1_hits, c.l2_hits, c.memory_fetches, c.l2_evictions,
            c.l2_lock_fallbacks)


class CacheHierarchy:
    """Mutable simulator state for one SoC.

    Not thread-safe; use one instance per worker.
    """

    def __init__(self, config: HierarchyConfig):
        self.config = config
        self.reset()

    # -- state -------------------------------------------------------------

    def reset(self) -> None:
        """Cold caches, zeroed counters, RNGs reseeded from the config."""
        cfg = self.config
        w1 = max(cfg.l1i_ways, cfg.l1d_ways)
        offsets, size = K.layout(cfg.num_cores, cfg.l1_sets, w1, cfg.l2_sets, cfg.l2_ways)
        m = np.zeros(size, np.int64)
        m[K.G_CORES] = cfg.num_cores
        m[K.G_LINE_BITS] = cfg.line_bits
        m[K.G_L1_SETS] = cfg.l1_sets
        m[K.G_L1I_WAYS] = cfg.l1i_ways
        m[K.G_L1D_WAYS] = cfg.l1d_ways
        m[K.G_L2_SETS] = cfg.l2_sets
        m[K.G_L2_WAYS] = cfg.l2_ways
        m[K.G_INCL] = cfg.l2_inclusive_side.code
        m[K.G_AUTOLOCK] = int(cfg.autolock)
        m[K.G_POLICY] = {Replacement.LRU: K.POLICY_LRU, Replacement.ROUND_ROBIN: K.POLICY_RR,
                         Replacement.PSEUDO_RANDOM: K.POLICY_RANDOM}[cfg.replacement]
        m[K.G_NONINCL_ALLOC] = {NonInclusiveAllocation.ON_EVICTION: K.ALLOC_ON_EVICTION,
                                NonInclusiveAllocation.ON_MISS: K.ALLOC_ON_MISS,
                                NonInclusiveAllocation.NEVER: K.ALLOC_NEVER}[
            cfg.noninclusive_allocation]
        m[K.G_LAT_L1] = cfg.latency.l1_hit
        m[K.G_LAT_L2] = cfg.latency.l2_hit
        m[K.G_LAT_MEM] = cfg.latency.memory
        m[K.G_W1] = w1
        m[K.O_L1_TAG:K.O_L2_RR + 1] = offsets
        m[K.C_RNG] = np.uint64(cfg.replacement_seed % 2**64).astype(np.int64)
        m[offsets[0]:offsets[1]] = -1
        m[offsets[3]:offsets[4]] = -1
        self._m = m
        self._jitter = np.random.default_rng(cfg.latency.rng_seed)

    def _region(self, o: int, shape: tuple) -> np.ndarray:
        m = self._m
        start = int(m[o])
        return m[start:start + int(np.prod(shape))].reshape(shape)

    def _l1(self, o: int) -> np.ndarray:
        """(core, side, set, way) view of an L1 region."""
        cfg = self.config
        return self._region(o, (cfg.num_cores, 2, cfg.l1_sets, int(self._m[K.G_W1])))

    def _l2(self, o: int) -> np.ndarray:
        return self._region(o, (self.config.l2_sets, self.config.l2_ways))

    @property
    def state(self) -> np.ndarray:
        """Raw kernel state buffer (shared, not copied)."""
        return self._m

    def copy(self) -> "CacheHierarchy":
        other = CacheHierarchy.__new__(CacheHierarchy)
        other.config = self.config
        other._m = self._m.copy()
        other._jitter = np.random.default_rng()
        other._jitter.bit_generator.state = self._jitter.bit_generator.state
        return other

    # -- accesses ----------------------------------------------------------

    def _line(self, addr: int) -> int:
        if not 0 <= addr < (1 << self.config.address_bits):
            raise ValueError(f"address {addr:#x} outside the {self.config.address_bits}-bit "
                             "physical range")
        return addr >> self.config.line_bits

    def _core(self, core: int) -> int:
        if not 0 <= core < self.config.num_cores:
            raise ValueError(f"core {core} out of range")
        return core

    def access(self, a: MemoryAccess, jitter: float | None = None) -> AccessResult:
        """Perform one access. ``jitter`` overrides the standard-normal draw."""
        line = self._line(a.addr)
        core = self._core(a.core)
        level = _LEVELS[K.access(self._m, core, line, a.kind.side.code)]
        z = self._jitter.standard_normal() if jitter is None else jitter
        lat = int(K.latency_of(self._m, _LEVELS.index(level),
                               float(self.config.latency.jitter_stddev), float(z)))
        return AccessResult(level, lat)

    def touch(self, core: int, addr: int, side: Side = Side.DATA) -> Level:
        """Untimed access (no jitter draw); used by bulk drivers."""
        return _LEVELS[K.access(self._m, self._core(core), self._line(addr), side.code)]

    def drop_l1_line(self, core: int, addr: int, side: Side = Side.DATA) -> bool:
        """Force one line out of a core's L1 as if replaced there."""
        return bool(K.drop_l1_line(self._m, self._core(core), side.code, self._line(addr)))

    def evict_l1(self, core: int, side: Side, set_index: int) -> int:
        """Replace one line of a full L1 set; returns its line address."""
        cfg = self.config
        tags = self._l1(K.O_L1_TAG)[self._core(core), side.code, set_index, :cfg.l1_ways(side)]
        if (tags < 0).any():
            raise ValueError("evict_l1 requires a full set")
        w = K.l1_victim(self._m, core, side.code, set_index)
        line = K.l1_remove(self._m, core, side.code, set_index, w)
        return int(line) << cfg.line_bits

    def evict_l2(self, set_index: int) -> int:
        """Replace one line of a full L2 set (forced, so the all-locked
        fallback may fire); returns its line address."""
        tags = self._l2(K.O_L2_TAG)[set_index]
        if (tags < 0).any():
            raise ValueError("evict_l2 requires a full set")
        w, fallback = K.l2_victim(self._m, set_index, True)
        if fallback:
            self._m[K.C_FALLBACKS] += 1
        line = K.l2_evict_way(self._m, set_index, w)
        return int(line) << self.config.line_bits

    # -- inspection --------------------------------------------------------

    def inspect(self, level: CacheLevel, addr: int, core: int | None = None) -> Inspection:
        """Debugger-style view of one line; never changes state."""
        line = self._line(addr)
        cfg = self.config
        if level is CacheLevel.L2:
            s2 = line & (cfg.l2_sets - 1)
            tags = self._l2(K.O_L2_TAG)[s2]
            hit = np.nonzero(tags == line)[0]
            if hit.size == 0:
                return Inspection(False, False)
            return Inspection(True, bool(self._l2(K.O_L2_LOCK)[s2, hit[0]]))
        if core is None:
            raise ValueError("L1 inspection needs a core")
        side = Side.INSTRUCTION if level is CacheLevel.L1I else Side.DATA
        s1 = line & (cfg.l1_sets - 1)
        tags = self._l1(K.O_L1_TAG)[self._core(core), side.code, s1, :cfg.l1_ways(side)]
        return Inspection(bool((tags == line).any()), False)

    def in_l1(self, core: int, addr: int, side: Side) -> bool:
        level = CacheLevel.L1I if side is Side.INSTRUCTION else CacheLevel.L1D
        return self.inspect(level, addr, core).present

    def in_l2(self, addr: int) -> bool:
        return self.inspect(CacheLevel.L2, addr).present

    def read_counters(self) -> EventCounters:
        return EventCounters(*(int(self._m[i]) for i in K.COUNTERS))

    def lines(self, level: CacheLevel, core: int | None = None
              ) -> Iterator[tuple[int, int, CacheLine]]:
        """Yield (set, way, CacheLine) for every way of one structure.

        replacement_meta is the LRU rank within the set (0 = most recent)
        under LRU and the raw way index otherwise.
        """
        cfg = self.config
        if level is CacheLevel.L2:
            tags, meta = self._l2(K.O_L2_TAG), self._l2(K.O_L2_META)
            lock = self._l2(K.O_L2_LOCK)
            sets, ways, bits = cfg.l2_sets, cfg.l2_ways, cfg.l2_sets.bit_length() - 1
        else:
            side = Side.INSTRUCTION if level is CacheLevel.L1I else Side.DATA
            tags = self._l1(K.O_L1_TAG)[core, side.code]
            meta = self._l1(K.O_L1_META)[core, side.code]
            lock = None
            sets, ways, bits = cfg.l1_sets, cfg.l1_ways(side), cfg.l1_sets.bit_length() - 1
        lru = cfg.replacement is Replacement.LRU
        for s in range(sets):
            row = tags[s, :ways]
            valid = row >= 0
            if lru:
                stamps = np.where(valid, meta[s, :ways], np.iinfo(np.int64).min)
                order = np.argsort(-stamps, kind="stable")
                rank = np.empty(ways, np.int64)
                rank[order] = np.arange(ways)
            for w in range(ways):
                if row[w] < 0:
                    yield s, w, CacheLine(-1, False, False, -1)
                    continue
                yield s, w, CacheLine(int(row[w]) >> bits, True,
                                      bool(lock[s, w]) if lock is not None else False,
                                      int(rank[w]) if lru else w)

    def dump(self, include_invalid: bool = False) -> str:
        """Text dump: one row per line (level, core, set, way, tag, valid, locked)."""
        out = ["level core set way tag valid locked"]
        structures = [(CacheLevel.L1I, c) for c in range(self.config.num_cores)]
        structures += [(CacheLevel.L1D, c) for c in range(self.config.num_cores)]
        structures.append((CacheLevel.L2, None))
        for level, core in structures:
            for s, w, ln in self.lines(level, core):
                if not ln.valid and not include_invalid:
                    continue
                out.append(f"{level.value} {'-' if core is None else core} {s} {w} "
                           f"{ln.tag:#x} {int(ln.valid)} {int(ln.inclusion_locked)}")
        return "\n".join(out) + "\n"
