"""Compiled simulator core.

The whole hierarchy lives in one flat int64 buffer ``m`` so the hot loops
(eviction strategies, victim encryptions, reloads) pass a single array
between compiled functions. ``cache_model.CacheHierarchy`` owns the buffer
and is the only intended caller.

Buffer layout: a header of HEADER words (geometry, policy, offsets,
counters, RNG state) followed by these regions::

    l1_tag  [C*2*S1, W1]  line number per way, -1 when invalid
    l1_meta [C*2*S1, W1]  LRU stamp
    l1_rr   [C*2*S1]      round-robin pointer
    l2_tag  [S2, W2]
    l2_meta [S2, W2]
    l2_lock [S2, W2]      inclusion indicator bit
    l2_rr   [S2]

L1 rows are indexed (core * 2 + side) * S1 + set; side 0 is the
instruction side, side 1 the data side.
"""

import numpy as np
from numba import njit

# header words
G_CORES = 0
G_LINE_BITS = 1
G_L1_SETS = 2
G_L1I_WAYS = 3
G_L1D_WAYS = 4
G_L2_SETS = 5
G_L2_WAYS = 6
G_INCL = 7
G_AUTOLOCK = 8
G_POLICY = 9
G_NONINCL_ALLOC = 10
G_LAT_L1 = 11
G_LAT_L2 = 12
G_LAT_MEM = 13
G_W1 = 14
O_L1_TAG = 15
O_L1_META = 16
O_L1_RR = 17
O_L2_TAG = 18
O_L2_META = 19
O_L2_LOCK = 20
O_L2_RR = 21
C_L2_ACCESSES = 22
C_L1_HITS = 23
C_L2_HITS = 24
C_MEMORY = 25
C_L2_EVICTIONS = 26
C_FALLBACKS = 27
C_CLOCK = 28
C_RNG = 29
HEADER = 32

COUNTERS = (C_L2_ACCESSES, C_L1_HITS, C_L2_HITS, C_MEMORY, C_L2_EVICTIONS, C_FALLBACKS)

SIDE_I = 0
SIDE_D = 1
SIDE_NONE = -1

POLICY_LRU = 0
POLICY_RR = 1
POLICY_RANDOM = 2

ALLOC_ON_EVICTION = 0
ALLOC_ON_MISS = 1
ALLOC_NEVER = 2

LEVEL_L1 = 0
LEVEL_L2 = 1
LEVEL_MEMORY = 2


def layout(cores, l1_sets, w1, l2_sets, l2_ways):
    """Region offsets (in O_* order) and total buffer size for a geometry."""
    rows = cores * 2 * l1_sets
    sizes = (rows * w1, rows * w1, rows, l2_sets * l2_ways, l2_sets * l2_ways,
             l2_sets * l2_ways, l2_sets)
    offsets = []
    at = HEADER
    for s in sizes:
        offsets.append(at)
        at += s
    return tuple(offsets), at


@njit(cache=True, error_model="numpy")
def _rand(m):
    z = np.uint64(m[C_RNG]) + np.uint64(0x9E3779B97F4A7C15)
    m[C_RNG] = np.int64(z)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, error_model="numpy")
def _find(m, base, ways, line):
    for w in range(ways):
        if m[base + w] == line:
            return w
    return -1


@njit(cache=True, error_model="numpy")
def _touch(m, meta_base, w):
    if m[G_POLICY] == POLICY_LRU:
        m[C_CLOCK] += 1
        m[meta_base + w] = m[C_CLOCK]


@njit(cache=True, error_model="numpy")
def _pick(m, tag_base, meta_base, lock_base, use_lock, ways, rr_at):
    """Way to fill: an invalid way if any, else the policy's choice.

    With ``use_lock`` the policy is re-queried past locked ways; -1 means
    every way is valid and locked (nothing is consumed in that case).
    """
    for w in range(ways):
        if m[tag_base + w] < 0:
            return w
    if use_lock:
        unlocked = 0
        for w in range(ways):
            if m[lock_base + w] == 0:
                unlocked += 1
        if unlocked == 0:
            return -1
    policy = m[G_POLICY]
    if policy == POLICY_LRU:
        best = -1
        for w in range(ways):
            if use_lock and m[lock_base + w] != 0:
                continue
            if best < 0 or m[meta_base + w] < m[meta_base + best]:
                best = w
        return best
    if policy == POLICY_RR:
        while True:
            w = m[rr_at]
            m[rr_at] = (w + 1) % ways
            if not (use_lock and m[lock_base + w] != 0):
                return w
    while True:
        w = np.int64(_rand(m) % np.uint64(ways))
        if not (use_lock and m[lock_base + w] != 0):
            return w


@njit(cache=True, error_model="numpy")
def l1_ways(m, side):
    if side == SIDE_I:
        return m[G_L1I_WAYS]
    return m[G_L1D_WAYS]


@njit(cache=True, error_model="numpy")
def l1_row(m, core, side, s1):
    return (core * 2 + side) * m[G_L1_SETS] + s1


@njit(cache=True, error_model="numpy")
def l1_tag_base(m, row):
    return m[O_L1_TAG] + row * m[G_W1]


@njit(cache=True, error_model="numpy")
def l2_base(m, s2):
    return s2 * m[G_L2_WAYS]


@njit(cache=True, error_model="numpy")
def held_in_l1(m, side, line, skip_core):
    s1 = line & (m[G_L1_SETS] - 1)
    ways = l1_ways(m, side)
    for c in range(m[G_CORES]):
        if c == skip_core:
            continue
        if _find(m, l1_tag_base(m, l1_row(m, c, side, s1)), ways, line) >= 0:
            return True
    return False


@njit(cache=True, error_model="numpy")
def l2_find(m, line):
    s2 = line & (m[G_L2_SETS] - 1)
    return _find(m, m[O_L2_TAG] + l2_base(m, s2), m[G_L2_WAYS], line)


@njit(cache=True, error_model="numpy")
def _back_invalidate(m, line):
    side = m[G_INCL]
    if side < 0:
        return
    s1 = line & (m[G_L1_SETS] - 1)
    ways = l1_ways(m, side)
    for c in range(m[G_CORES]):
        base = l1_tag_base(m, l1_row(m, c, side, s1))
        w = _find(m, base, ways, line)
        if w >= 0:
            m[base + w] = -1


@njit(cache=True, error_model="numpy")
def l2_evict_way(m, s2, w2):
    """Remove one L2 line, invalidating inclusive-side L1 copies."""
    at = l2_base(m, s2) + w2
    line = m[m[O_L2_TAG] + at]
    m[m[O_L2_TAG] + at] = -1
    m[m[O_L2_LOCK] + at] = 0
    m[C_L2_EVICTIONS] += 1
    _back_invalidate(m, line)
    return line


@njit(cache=True, error_model="numpy")
def l2_victim(m, s2, forced):
    """Select the L2 way to replace in set ``s2``.

    Returns (way, fallback). way is -1 when the set is fully locked and the
    request is not forced.
    """
    b = l2_base(m, s2)
    ways = m[G_L2_WAYS]
    rr_at = m[O_L2_RR] + s2
    w = _pick(m, m[O_L2_TAG] + b, m[O_L2_META] + b, m[O_L2_LOCK] + b,
              m[G_AUTOLOCK] != 0, ways, rr_at)
    if w >= 0:
        return w, False
    if not forced:
        return -1, False
    w = _pick(m, m[O_L2_TAG] + b, m[O_L2_META] + b, m[O_L2_LOCK] + b, False, ways, rr_at)
    return w, True


@njit(cache=True, error_model="numpy")
def l2_fill(m, line, forced):
    """Allocate ``line`` into L2. Unforced fills give up on a fully locked set."""
    s2 = line & (m[G_L2_SETS] - 1)
    w, fallback = l2_victim(m, s2, forced)
    if w < 0:
        return False
    if fallback:
        m[C_FALLBACKS] += 1
    b = l2_base(m, s2)
    if m[m[O_L2_TAG] + b + w] >= 0:
        l2_evict_way(m, s2, w)
    m[m[O_L2_TAG] + b + w] = line
    m[m[O_L2_LOCK] + b + w] = 0
    _touch(m, m[O_L2_META] + b, w)
    return True


@njit(cache=True, error_model="numpy")
def l1_remove(m, core, side, s1, w):
    """Drop one L1 line and do the L2 bookkeeping."""
    base = l1_tag_base(m, l1_row(m, core, side, s1))
    line = m[base + w]
    m[base + w] = -1
    if side == m[G_INCL]:
        if m[G_AUTOLOCK] != 0 and not held_in_l1(m, side, line, core):
            w2 = l2_find(m, line)
            if w2 >= 0:
                m[m[O_L2_LOCK] + l2_base(m, line & (m[G_L2_SETS] - 1)) + w2] = 0
    elif m[G_NONINCL_ALLOC] == ALLOC_ON_EVICTION:
        if l2_find(m, line) < 0:
            l2_fill(m, line, False)
    return line


@njit(cache=True, error_model="numpy")
def l1_victim(m, core, side, s1):
    row = l1_row(m, core, side, s1)
    off = row * m[G_W1]
    return _pick(m, m[O_L1_TAG] + off, m[O_L1_META] + off, 0, False, l1_ways(m, side),
                 m[O_L1_RR] + row)


@njit(cache=True, error_model="numpy")
def access(m, core, line, side):
    """One memory access; returns the level that served it."""
    s1 = line & (m[G_L1_SETS] - 1)
    off = l1_row(m, core, side, s1) * m[G_W1]
    tag_b = m[O_L1_TAG] + off
    w = _find(m, tag_b, l1_ways(m, side), line)
    if w >= 0:
        m[C_L1_HITS] += 1
        _touch(m, m[O_L1_META] + off, w)
        return LEVEL_L1

    m[C_L2_ACCESSES] += 1
    incl = m[G_INCL]
    s2 = line & (m[G_L2_SETS] - 1)
    b2 = l2_base(m, s2)
    w2 = _find(m, m[O_L2_TAG] + b2, m[G_L2_WAYS], line)
    if w2 >= 0:
        m[C_L2_HITS] += 1
        _touch(m, m[O_L2_META] + b2, w2)
        level = LEVEL_L2
    else:
        m[C_MEMORY] += 1
        level = LEVEL_MEMORY
        if side == incl:
            l2_fill(m, line, True)
        elif m[G_NONINCL_ALLOC] == ALLOC_ON_MISS:
            l2_fill(m, line, False)

    w = l1_victim(m, core, side, s1)
    if m[tag_b + w] >= 0:
        l1_remove(m, core, side, s1, w)
    m[tag_b + w] = line
    _touch(m, m[O_L1_META] + off, w)
    if side == incl and m[G_AUTOLOCK] != 0:
        m[m[O_L2_LOCK] + b2 + _find(m, m[O_L2_TAG] + b2, m[G_L2_WAYS], line)] = 1
    return level


@njit(cache=True, error_model="numpy")
def latency_of(m, level, jitter_sd, z):
    base = m[G_LAT_L1 + level]
    t = np.round(base + jitter_sd * z)
    if t < 0.0:
        return 0
    return np.int64(t)


@njit(cache=True, error_model="numpy")
def run_eviction(m, core, side, lines, n, a, d):
    """Sliding-window eviction: for i < n, j < a, k < d: access(lines[i + k]).

    Repetitions after the first are skipped when the whole window is already
    L1-resident: they would all be L1 hits, so only the hit counter and the
    LRU stamps change, and both are updated exactly as a replay would.
    """
    ways = l1_ways(m, side)
    mask = m[G_L1_SETS] - 1
    for i in range(n):
        for k in range(d):
            access(m, core, lines[i + k], side)
        if a == 1:
            continue
        resident = True
        for k in range(d):
            ln = lines[i + k]
            if _find(m, l1_tag_base(m, l1_row(m, core, side, ln & mask)), ways, ln) < 0:
                resident = False
                break
        if resident:
            m[C_L1_HITS] += (a - 1) * d
            if m[G_POLICY] == POLICY_LRU:
                m[C_CLOCK] += (a - 2) * d
                for k in range(d):
                    ln = lines[i + k]
                    off = l1_row(m, core, side, ln & mask) * m[G_W1]
                    _touch(m, m[O_L1_META] + off, _find(m, m[O_L1_TAG] + off, ways, ln))
        else:
            for j in range(1, a):
                for k in range(d):
                    access(m, core, lines[i + k], side)


@njit(cache=True, error_model="numpy")
def drop_l1_line(m, core, side, line):
    """Evict a specific line from one core's L1 (self-eviction noise)."""
    s1 = line & (m[G_L1_SETS] - 1)
    w = _find(m, l1_tag_base(m, l1_row(m, core, side, s1)), l1_ways(m, side), line)
    if w < 0:
        return False
    l1_remove(m, core, side, s1, w)
    return True


# --- victim AES, with every table lookup routed through the hierarchy -------

LAST_ROUND_TABLE = (2, 3, 0, 1)


@njit(cache=True, error_model="numpy")
def aes_encrypt_traced(m, core, tables, rk, table_addrs, pt, ct, trace):
    """T-table AES-128 encryption issuing its 160 lookups into the hierarchy.

    ``trace`` (int64[160, 2]) receives (table, index) per lookup. core < 0
    computes the cipher without touching the caches.
    """
    line_bits = m[G_LINE_BITS]
    s = np.empty(4, np.uint32)
    t = np.empty(4, np.uint32)
    for c in range(4):
        s[c] = ((np.uint32(pt[4 * c]) ^ np.uint32(rk[0, 4 * c])) << 24
                | (np.uint32(pt[4 * c + 1]) ^ np.uint32(rk[0, 4 * c + 1])) << 16
                | (np.uint32(pt[4 * c + 2]) ^ np.uint32(rk[0, 4 * c + 2])) << 8
                | (np.uint32(pt[4 * c + 3]) ^ np.uint32(rk[0, 4 * c + 3])))
    n = 0
    for r in range(1, 10):
        for c in range(4):
            acc = (np.uint32(rk[r, 4 * c]) << 24 | np.uint32(rk[r, 4 * c + 1]) << 16
                   | np.uint32(rk[r, 4 * c + 2]) << 8 | np.uint32(rk[r, 4 * c + 3]))
            for row in range(4):
                x = np.int64((s[(c + row) % 4] >> np.uint32(24 - 8 * row)) & np.uint32(0xFF))
                trace[n, 0] = row
                trace[n, 1] = x
                n += 1
                if core >= 0:
                    access(m, core, (table_addrs[row] + 4 * x) >> line_bits, SIDE_D)
                acc ^= tables[row, x]
            t[c] = acc
        for c in range(4):
            s[c] = t[c]
    for c in range(4):
        for row in range(4):
            x = np.int64((s[(c + row) % 4] >> np.uint32(24 - 8 * row)) & np.uint32(0xFF))
            tab = LAST_ROUND_TABLE[row]
            trace[n, 0] = tab
            trace[n, 1] = x
            n += 1
            if core >= 0:
                access(m, core, (table_addrs[tab] + 4 * x) >> line_bits, SIDE_D)
            word = tables[tab, x]
            out = (word >> np.uint32(24 - 8 * row)) & np.uint32(0xFF)
            ct[4 * c + row] = np.uint8(out ^ np.uint32(rk[10, 4 * c + row]))


@njit(cache=True, error_model="numpy")
def attack_rounds(m, attacker, victim, ev_lines, n, a, d, mon_lines, table_lines,
                  tables, rk, table_addrs, plaintexts, noise_u, jitter_z,
                  p_evict, threshold, jitter_sd, out_ct, out_fast):
    """Evict+Reload rounds. Per round: evict every monitored line from the
    attacker core, let the victim encrypt, apply self-eviction noise to all
    table lines, then reload and classify every monitored line."""
    trace = np.empty((160, 2), np.int64)
    for r in range(plaintexts.shape[0]):
        for q in range(mon_lines.shape[0]):
            run_eviction(m, attacker, SIDE_D, ev_lines[q], n, a, d)
        aes_encrypt_traced(m, victim, tables, rk, table_addrs,
                           plaintexts[r], out_ct[r], trace)
        for q in range(table_lines.shape[0]):
            if noise_u[r, q] < p_evict:
                drop_l1_line(m, victim, SIDE_D, table_lines[q])
        for q in range(mon_lines.shape[0]):
            level = access(m, attacker, mon_lines[q], SIDE_D)
            lat = latency_of(m, level, jitter_sd, jitter_z[r, q])
            out_fast[r, q] = lat < threshold


@njit(cache=True, error_model="numpy")
def accumulate_rounds(ct, fast, mon_table, mon_line, entries_per_line, sbox, byte_pos,
                      slow, excl, early_slow, early_window, seen):
    """Fold observations into per-line exclusion counts.

    For a monitored line seen slow, every key candidate c_i ^ S[e] with e on
    that line is excluded for each ciphertext byte i served by the line's table.
    """
    for r in range(ct.shape[0]):
        idx = seen + r
        for q in range(mon_table.shape[0]):
            if fast[r, q]:
                continue
            slow[q] += 1
            if idx < early_window:
                early_slow[q] += 1
            t = mon_table[q]
            e0 = mon_line[q] * entries_per_line
            for b in range(4):
                c = ct[r, byte_pos[t, b]]
                for e in range(e0, e0 + entries_per_line):
                    excl[q, b, c ^ sbox[e]] += 1
