"""Brute-force reference hierarchy used as an oracle for the numba kernels.

Deliberately naive: every set is a list of way slots plus an explicit
recency list (least recent first), lock bits live in a set of lines,
and nothing is shared with the simulator except the config object. LRU is
the only policy it models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from autolock_sim.cache_model import HierarchyConfig, NonInclusiveAllocation, Replacement, Side

L1, L2, MEMORY = "L1", "L2", "Memory"


@dataclass
class RefSet:
    ways: int
    slots: list = field(default_factory=list)
    recency: list = field(default_factory=list)

    def __post_init__(self):
        self.slots = [None] * self.ways

    def has(self, line: int) -> bool:
        return line in self.slots

    def use(self, line: int) -> None:
        if line in self.recency:
            self.recency.remove(line)
        self.recency.append(line)

    def drop(self, line: int) -> None:
        self.slots[self.slots.index(line)] = None
        self.recency.remove(line)

    def full(self) -> bool:
        return None not in self.slots

    def put(self, way: int, line: int) -> None:
        self.slots[way] = line
        self.use(line)

    def clone(self) -> "RefSet":
        out = RefSet.__new__(RefSet)
        out.ways, out.slots, out.recency = self.ways, self.slots[:], self.recency[:]
        return out

    def way_for(self, eligible) -> int | None:
        """Lowest free way, else the least recent eligible line's way."""
        if None in self.slots:
            return self.slots.index(None)
        for line in self.recency:
            if eligible(line):
                return self.slots.index(line)
        return None


class ReferenceHierarchy:
    def __init__(self, config: HierarchyConfig):
        if config.replacement is not Replacement.LRU:
            raise ValueError("reference model implements LRU only")
        self.cfg = config
        self.l1 = {(c, side): [RefSet(config.l1_ways(side)) for _ in range(config.l1_sets)]
                   for c in range(config.num_cores) for side in (Side.INSTRUCTION, Side.DATA)}
        self.l2 = [RefSet(config.l2_ways) for _ in range(config.l2_sets)]
        self.locked: set[int] = set()
        self.counters = dict(l2_accesses=0, l1_hits=0, l2_hits=0, memory_fetches=0,
                             l2_evictions=0, l2_lock_fallbacks=0)
        self.evicted_while_held: list[int] = []

    def clone(self) -> "ReferenceHierarchy":
        out = ReferenceHierarchy.__new__(ReferenceHierarchy)
        out.cfg = self.cfg
        out.l1 = {k: [s.clone() for s in sets] for k, sets in self.l1.items()}
        out.l2 = [s.clone() for s in self.l2]
        out.locked = set(self.locked)
        out.counters = dict(self.counters)
        out.evicted_while_held = self.evicted_while_held[:]
        return out

    # helpers
    def l1_set(self, core, side, line) -> RefSet:
        return self.l1[(core, side)][line % self.cfg.l1_sets]

    def l2_set(self, line) -> RefSet:
        return self.l2[line % self.cfg.l2_sets]

    def holders(self, side, line) -> list[int]:
        return [c for c in range(self.cfg.num_cores) if self.l1_set(c, side, line).has(line)]

    @property
    def incl(self) -> Side:
        return self.cfg.l2_inclusive_side

    # L2
    def l2_fill(self, line: int, forced: bool) -> bool:
        s = self.l2_set(line)
        if self.cfg.autolock:
            way = s.way_for(lambda x: x not in self.locked)
        else:
            way = s.way_for(lambda x: True)
        if way is None:
            if not forced:
                return False
            way = s.way_for(lambda x: True)
            self.counters["l2_lock_fallbacks"] += 1
        old = s.slots[way]
        if old is not None:
            self.l2_evict(old)
        s.put(way, line)
        self.locked.discard(line)
        return True

    def l2_evict(self, line: int) -> None:
        if self.incl is not Side.NONE and self.holders(self.incl, line) and self.cfg.autolock:
            self.evicted_while_held.append(line)
        self.l2_set(line).drop(line)
        self.locked.discard(line)
        self.counters["l2_evictions"] += 1
        if self.incl is not Side.NONE:
            for c in self.holders(self.incl, line):
                s = self.l1_set(c, self.incl, line)
                s.slots[s.slots.index(line)] = None
                s.recency.remove(line)

    # L1
    def l1_remove(self, core: int, side: Side, line: int) -> None:
        self.l1_set(core, side, line).drop(line)
        if side is self.incl:
            if self.cfg.autolock and not self.holders(side, line):
                self.locked.discard(line)
        elif self.cfg.noninclusive_allocation is NonInclusiveAllocation.ON_EVICTION:
            if not self.l2_set(line).has(line):
                self.l2_fill(line, forced=False)

    def access(self, core: int, line: int, side: Side) -> str:
        s1 = self.l1_set(core, side, line)
        if s1.has(line):
            self.counters["l1_hits"] += 1
            s1.use(line)
            return L1
        self.counters["l2_accesses"] += 1
        s2 = self.l2_set(line)
        if s2.has(line):
            self.counters["l2_hits"] += 1
            s2.use(line)
            level = L2
        else:
            self.counters["memory_fetches"] += 1
            level = MEMORY
            if side is self.incl:
                self.l2_fill(line, forced=True)
            elif self.cfg.noninclusive_allocation is NonInclusiveAllocation.ON_MISS:
                self.l2_fill(line, forced=False)
        way = s1.way_for(lambda x: True)
        if s1.slots[way] is not None:
            self.l1_remove(core, side, s1.slots[way])
        s1.put(way, line)
        if side is self.incl and self.cfg.autolock:
            self.locked.add(line)
        return level

    def evict_l1_set(self, core: int, side: Side, index: int) -> int | None:
        s = self.l1[(core, side)][index]
        if not s.full():
            return None
        line = s.slots[s.way_for(lambda x: True)]
        self.l1_remove(core, side, line)
        return line

    def evict_l2_set(self, index: int) -> int | None:
        s = self.l2[index]
        if not s.full():
            return None
        line = s.recency[0]
        if self.cfg.autolock:
            unlocked = [x for x in s.recency if x not in self.locked]
            if unlocked:
                line = unlocked[0]
            else:
                self.counters["l2_lock_fallbacks"] += 1
        self.l2_evict(line)
        return line

    # comparison
    def snapshot(self) -> tuple:
        """Contents in recency order plus lock bits and counters."""
        l1 = tuple((k, i, tuple(s.slots), tuple(s.recency))
                   for k, sets in sorted(self.l1.items(), key=lambda kv: (kv[0][0], kv[0][1].code))
                   for i, s in enumerate(sets))
        l2 = tuple((i, tuple(s.slots), tuple(s.recency)) for i, s in enumerate(self.l2))
        locks = tuple(sorted(self.locked))
        return l1, l2, locks, tuple(self.counters.values())


def kernel_snapshot(h) -> tuple:
    """The simulator's state in ReferenceHierarchy.snapshot() form."""
    from autolock_sim import _kernels as K

    cfg = h.config
    tags, meta = h._l1(K.O_L1_TAG), h._l1(K.O_L1_META)

    def ordered(row_tags, row_meta):
        slots = tuple(None if t < 0 else int(t) for t in row_tags)
        valid = [(int(m), int(t)) for t, m in zip(row_tags, row_meta) if t >= 0]
        return slots, tuple(t for _, t in sorted(valid))

    l1 = []
    for c in range(cfg.num_cores):
        for side in (Side.INSTRUCTION, Side.DATA):
            w = cfg.l1_ways(side)
            for i in range(cfg.l1_sets):
                slots, rec = ordered(tags[c, side.code, i, :w], meta[c, side.code, i, :w])
                l1.append(((c, side), i, slots, rec))
    t2, m2, k2 = h._l2(K.O_L2_TAG), h._l2(K.O_L2_META), h._l2(K.O_L2_LOCK)
    l2 = tuple((i,) + ordered(t2[i], m2[i]) for i in range(cfg.l2_sets))
    locks = tuple(sorted(int(t2[s, w]) for s in range(cfg.l2_sets)
                         for w in range(cfg.l2_ways) if t2[s, w] >= 0 and k2[s, w]))
    c = h.read_counters()
    counters = (c.l2_accesses, c.l1_hits, c.l2_hits, c.memory_fetches, c.l2_evictions,
                c.l2_lock_fallbacks)
    return tuple(l1), l2, locks, counters


# Trace operations: ("access", core, line, side), ("evict_l1", core, side, set),
# ("evict_l2", set). Evictions of sets that are not full are no-ops in both models.

def apply_ref(ref: ReferenceHierarchy, op) -> object:
    if op[0] == "access":
        return ref.access(op[1], op[2], op[3])
    if op[0] == "evict_l1":
        return ref.evict_l1_set(op[1], op[2], op[3])
    return ref.evict_l2_set(op[1])


def apply_sim(h, op) -> object:
    from autolock_sim import _kernels as K

    cfg = h.config
    if op[0] == "access":
        return h.touch(op[1], op[2] << cfg.line_bits, op[3]).value
    if op[0] == "evict_l1":
        tags = h._l1(K.O_L1_TAG)[op[1], op[2].code, op[3], :cfg.l1_ways(op[2])]
        if (tags < 0).any():
            return None
        return h.evict_l1(op[1], op[2], op[3]) >> cfg.line_bits
    if (h._l2(K.O_L2_TAG)[op[1]] < 0).any():
        return None
    return h.evict_l2(op[1]) >> cfg.line_bits


@dataclass
class Exploration:
    traces: int = 0
    nodes: int = 0
    fallbacks_seen: int = 0
    skipped_locked: int = 0
    divergences: list = field(default_factory=list)


def explore(config: HierarchyConfig, alphabet, depth: int,
            sim_config: HierarchyConfig | None = None) -> Exploration:
    """Check simulator against reference on every trace over ``alphabet`` of
    length <= ``depth``. ``sim_config`` runs the simulator on a different
    config, which is only useful to show that mismatches get caught.

    Depth-first over trace prefixes. A (state, remaining depth) pair that was
    already verified is not expanded again: both models are deterministic
    functions of their state, so its subtree has identical outcomes. The
    returned trace count is still the full number of traces covered.
    """
    from autolock_sim.cache_model import CacheHierarchy

    out = Exploration()
    out.traces = sum(len(alphabet) ** k for k in range(depth + 1))
    done: set = set()

    def visit(h, ref, left, prefix):
        out.nodes += 1
        if left == 0:
            return
        key = (ref.snapshot()[:3], left)
        if key in done:
            return
        done.add(key)
        for op in alphabet:
            h2, r2 = h.copy(), ref.clone()
            before = r2.counters["l2_lock_fallbacks"]
            ev_before = r2.counters["l2_evictions"]
            held_before = len(r2.evicted_while_held)
            got, want = apply_sim(h2, op), apply_ref(r2, op)
            if got != want or kernel_snapshot(h2) != r2.snapshot():
                out.divergences.append(prefix + (op,))
                continue
            fb = r2.counters["l2_lock_fallbacks"] - before
            out.fallbacks_seen += fb
            if r2.counters["l2_evictions"] > ev_before and not fb and _lru_locked(ref, op):
                out.skipped_locked += 1
            if len(r2.evicted_while_held) != held_before and not fb:
                out.divergences.append(prefix + (op,) + ("evicted a held line",))
            visit(h2, r2, left - 1, prefix + (op,))

    visit(CacheHierarchy(sim_config or config), ReferenceHierarchy(config), depth, ())
    return out


def _lru_locked(ref: ReferenceHierarchy, op) -> bool:
    """Whether the least recent line of the L2 set ``op`` targets is locked."""
    if op[0] == "evict_l2":
        s = ref.l2[op[1]]
    elif op[0] == "access":
        s = ref.l2_set(op[2])
    else:
        return False
    return s.full() and s.recency[0] in ref.locked


# Tiny configurations for exhaustive checking: two L2 sets, at most four ways
# and two cores. Each alphabet is chosen so its corner case is reachable.

def _tiny(**kw) -> HierarchyConfig:
    base = dict(num_cores=2, line_size=64, l1i_ways=1, l1d_ways=1, l2_ways=2, l1_sets=1,
                l2_sets=2, l2_inclusive_side=Side.DATA, autolock=True)
    base.update(kw)
    return HierarchyConfig(**base)


def _reads(cores, lines, side=Side.DATA):
    return [("access", c, l, side) for c in cores for l in lines]


D, I = Side.DATA, Side.INSTRUCTION
TINY_CASES = {
    # two holders keep locked lines; LRU has to skip them
    "skip_locked": (_tiny(l2_ways=3), _reads((0, 1), (0, 2, 4, 6)) + [("evict_l2", 0)]),
    # four locked ways in one set: forced fills take the fallback path
    "fallback": (_tiny(l1d_ways=2, l2_ways=4),
                 _reads((0,), (0, 2, 4)) + _reads((1,), (4, 6, 8)) + [("evict_l2", 0)]),
    # instruction-inclusive L2 with data traffic on the other side
    "instruction_side": (_tiny(l2_inclusive_side=I),
                         _reads((0,), (0, 2, 4), I) + _reads((1,), (0, 2), I)
                         + _reads((0, 1), (4, 6))
                         + [("evict_l1", 0, D, 0), ("evict_l2", 0)]),
    "no_autolock": (_tiny(autolock=False),
                    _reads((0, 1), (0, 2, 4)) + [("access", 0, 1, I), ("evict_l2", 0),
                                                 ("evict_l1", 0, D, 0)]),
    "noninclusive": (_tiny(l2_inclusive_side=Side.NONE, autolock=False,
                           noninclusive_allocation=NonInclusiveAllocation.ON_MISS),
                     _reads((0, 1), (0, 2, 4)) + _reads((0,), (0, 6), I) + [("evict_l2", 0)]),
    "two_l1_sets": (_tiny(l1_sets=2, l2_ways=4, l1d_ways=2),
                    _reads((0, 1), (0, 1, 2, 4)) + [("evict_l2", 0)]),
}
