"""Four-T-table AES-128 victim whose table lookups go through the simulator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K
from .cache_model import CacheHierarchy

TABLE_BYTES = 1024
ENTRY_BYTES = 4
LOOKUPS_PER_ENCRYPTION = 160
LAST_ROUND_TABLE = K.LAST_ROUND_TABLE


def _xtime(a: int) -> int:
    a <<= 1
    return (a ^ 0x11B) & 0xFF if a & 0x100 else a


def gmul(a: int, b: int) -> int:
    """Multiplication in GF(2^8) modulo x^8 + x^4 + x^3 + x + 1."""
    r = 0
    while b:
        if b & 1:
            r ^= a
        a = _xtime(a)
        b >>= 1
    return r


def _build_sbox() -> np.ndarray:
    inv = [0] * 256
    for a in range(1, 256):
        for b in range(1, 256):
            if gmul(a, b) == 1:
                inv[a] = b
                break
    box = np.empty(256, np.uint8)
    for x in range(256):
        b = inv[x]
        s = b
        for k in range(1, 5):
            s ^= ((b << k) | (b >> (8 - k))) & 0xFF
        box[x] = s ^ 0x63
    return box


SBOX = _build_sbox()
INV_SBOX = np.argsort(SBOX).astype(np.uint8)


def _build_tables() -> np.ndarray:
    te = np.empty((4, 256), np.uint32)
    for x in range(256):
        s = int(SBOX[x])
        w = (gmul(s, 2) << 24) | (s << 16) | (s << 8) | gmul(s, 3)
        for t in range(4):
            te[t, x] = ((w >> (8 * t)) | (w << (32 - 8 * t))) & 0xFFFFFFFF
    return te


T_TABLES = _build_tables()

_RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)


def _check_block(b: bytes | Sequence[int], what: str) -> bytes:
    b = bytes(b)
    if len(b) != 16:
        raise ValueError(f"{what} must be 16 bytes, got {len(b)}")
    return b


def expand_key(key: bytes) -> np.ndarray:
    """AES-128 key schedule as an (11, 16) uint8 array of round keys."""
    key = _check_block(key, "key")
    w = [list(key[4 * i:4 * i + 4]) for i in range(4)]
    for i in range(4, 44):
        t = list(w[i - 1])
        if i % 4 == 0:
            t = [int(SBOX[b]) for b in t[1:] + t[:1]]
            t[0] ^= _RCON[i // 4 - 1]
        w.append([a ^ b for a, b in zip(w[i - 4], t)])
    return np.array(w, np.uint8).reshape(11, 16)


def invert_key_schedule(last_round_key: bytes) -> bytes:
    """Master key from the round-10 key (runs the schedule backwards)."""
    rk = _check_block(last_round_key, "round key")
    w = [None] * 44
    for i in range(4):
        w[40 + i] = list(rk[4 * i:4 * i + 4])
    for i in range(43, 3, -1):
        t = list(w[i - 1])
        if i % 4 == 0:
            t = [int(SBOX[b]) for b in t[1:] + t[:1]]
            t[0] ^= _RCON[i // 4 - 1]
        w[i - 4] = [a ^ b for a, b in zip(w[i], t)]
    return bytes(sum(w[:4], []))


def encrypt_traced(key_or_rk, plaintext: bytes) -> tuple[bytes, list[tuple[int, int]]]:
    """Plain-Python T-table encryption returning (ciphertext, lookups).

    Each lookup is (table, index) in issue order: 144 for rounds 1-9 then
    16 for the last round.
    """
    rk = key_or_rk if isinstance(key_or_rk, np.ndarray) else expand_key(key_or_rk)
    pt = _check_block(plaintext, "plaintext")
    s = [int.from_bytes(bytes(a ^ b for a, b in zip(pt[4 * c:4 * c + 4], rk[0, 4 * c:4 * c + 4])),
                        "big") for c in range(4)]
    trace = []
    for r in range(1, 10):
        t = []
        for c in range(4):
            acc = int.from_bytes(bytes(rk[r, 4 * c:4 * c + 4]), "big")
            for row in range(4):
                x = (s[(c + row) % 4] >> (24 - 8 * row)) & 0xFF
                trace.append((row, x))
                acc ^= int(T_TABLES[row, x])
            t.append(acc)
        s = t
    ct = bytearray(16)
    for c in range(4):
        for row in range(4):
            x = (s[(c + row) % 4] >> (24 - 8 * row)) & 0xFF
            tab = LAST_ROUND_TABLE[row]
            trace.append((tab, x))
            out = (int(T_TABLES[tab, x]) >> (24 - 8 * row)) & 0xFF
            ct[4 * c + row] = out ^ int(rk[10, 4 * c + row])
    return bytes(ct), trace


def encrypt(key: bytes, plaintext: bytes) -> bytes:
    return encrypt_traced(key, plaintext)[0]


def last_round_byte_positions() -> np.ndarray:
    """(4, 4) array: ciphertext byte positions served by each table in round 10."""
    pos = np.empty((4, 4), np.int64)
    for row, tab in enumerate(LAST_ROUND_TABLE):
        pos[tab] = [4 * c + row for c in range(4)]
    return pos


def line_usage(trace: Sequence[tuple[int, int]], line_size: int = 64) -> np.ndarray:
    """(4, lines_per_table) boolean array of lines touched by one encryption."""
    per_line = line_size // ENTRY_BYTES
    used = np.zeros((4, TABLE_BYTES // line_size), bool)
    for t, x in trace:
        used[t, x // per_line] = True
    return used


def no_access_probability(t: int, n: int) -> float:
    """Probability that a line holding t of 256 entries sees none of n lookups."""
    if not 0 <= t <= 256:
        raise ValueError("entries per line must lie in [0, 256]")
    if n < 0:
        raise ValueError("lookup count must be non-negative")
    return (1.0 - t / 256) ** n


@dataclass(frozen=True)
class TTableLayout:
    base: int = 0x100000
    line_size: int = 64

    def __post_init__(self):
        if self.base % self.line_size:
            raise ValueError("table base must be line-aligned")
        if TABLE_BYTES % self.line_size:
            raise ValueError("line size must divide the table size")

    @property
    def lines_per_table(self) -> int:
        return TABLE_BYTES // self.line_size

    @property
    def entries_per_line(self) -> int:
        return self.line_size // ENTRY_BYTES

    def table_address(self, t: int) -> int:
        return self.base + t * TABLE_BYTES

    def entry_address(self, t: int, e: int) -> int:
        return self.table_address(t) + ENTRY_BYTES * e

    def line_address(self, t: int, line: int) -> int:
        return self.table_address(t) + line * self.line_size

    def line_of(self, e: int) -> int:
        return e * ENTRY_BYTES // self.line_size

    def table_addrs(self) -> np.ndarray:
        return np.array([self.table_address(t) for t in range(4)], np.int64)

    def all_lines(self) -> list[tuple[int, int]]:
        return [(t, l) for t in range(4) for l in range(self.lines_per_table)]

    def line_numbers(self, line_bits: int) -> np.ndarray:
        return np.array([self.line_address(t, l) >> line_bits for t, l in self.all_lines()],
                        np.int64)


def effective_evict_prob(p: float, idle_slots: int) -> float:
    """Chance a line leaves the victim's L1 during ``idle_slots`` idle periods."""
    return 1.0 - (1.0 - p) ** idle_slots


@dataclass
class VictimProcess:
    """AES victim pinned to one core.

    After every encryption each table line independently drops out of the
    victim's L1 with probability 1 - (1 - self_evict_prob)^idle_slots, where
    idle_slots is how long the victim waits for the attacker's next reload.
    """
    key: bytes
    core: int
    layout: TTableLayout = field(default_factory=TTableLayout)
    self_evict_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.key = _check_block(self.key, "key")
        if not 0.0 <= self.self_evict_prob <= 1.0:
            raise ValueError("self_evict_prob must lie in [0, 1]")
        self.round_keys = expand_key(self.key)
        self._rng = np.random.default_rng(self.seed)
        self._ct = np.zeros(16, np.uint8)
        self._trace = np.zeros((LOOKUPS_PER_ENCRYPTION, 2), np.int64)
        self.last_trace: list[tuple[int, int]] = []

    @property
    def last_round_key(self) -> bytes:
        return bytes(self.round_keys[10])

    def encrypt(self, h: CacheHierarchy, plaintext: bytes, noise_u: np.ndarray | None = None,
                idle_slots: int = 1) -> bytes:
        """Encrypt with all 160 lookups issued on the victim core, then apply
        self-eviction noise. ``noise_u`` overrides the per-line uniform draws."""
        pt = np.frombuffer(_check_block(plaintext, "plaintext"), np.uint8)
        K.aes_encrypt_traced(h.state, self.core, T_TABLES, self.round_keys,
                             self.layout.table_addrs(), pt, self._ct, self._trace)
        self.last_trace = [(int(t), int(x)) for t, x in self._trace]
        lines = self.layout.line_numbers(h.config.line_bits)
        if noise_u is None:
            noise_u = self._rng.random(lines.size)
        p = effective_evict_prob(self.self_evict_prob, idle_slots)
        for q in np.nonzero(noise_u < p)[0]:
            h.drop_l1_line(self.core, int(lines[q]) << h.config.line_bits)
        return bytes(self._ct)


def table_dump() -> str:
    """Text listing of the four T-tables, eight words per row."""
    out = []
    for t in range(4):
        out.append(f"# Te{t}")
        for i in range(0, 256, 8):
            out.append(" ".join(f"{int(w):08x}" for w in T_TABLES[t, i:i + 8]))
    return "\n".join(out) + "\n"
