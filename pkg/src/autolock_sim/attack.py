"""Evict+Reload last-round key recovery against the T-table victim.

Observations are folded into per-line counters: how often the line was
slow, and for each of the four ciphertext bytes its table serves, how often
each key candidate was ruled out. A candidate's count-based score for one
line is ``slow - excluded``; all four variants read their key out of these
counters, so one observation stream can feed several variants.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as K
from .aes_target import (SBOX, T_TABLES, TTableLayout, VictimProcess, effective_evict_prob,
                         last_round_byte_positions, no_access_probability)
from .cache_model import CacheHierarchy, MemoryAccess, Side
from .detection import SimulatorPlatform, calibrate_threshold
from .eviction import EvictionStrategy, build_eviction_set, run_eviction
from .profiles import SoCProfile

P_NA = no_access_probability(16, 40)
# Per idle slot; the victim waits one slot per monitored line per round.
DEFAULT_SELF_EVICT_PROB = 4e-4
PROB_FILTER_FRACTION = 0.1
BLOCK_ROUNDS = 4096
BYTE_POS = last_round_byte_positions()


class Variant(enum.Enum):
    ORIGINAL = "original"
    MAJORITY = "majority"
    PROB_FILTER = "prob_filter"
    WEIGHTED = "weighted"

    @property
    def all_lines(self) -> bool:
        return self is not Variant.ORIGINAL


def parse_variant(text: str) -> Variant:
    key = text.strip().lower().replace("-", "_")
    aliases = {"probfilter": "prob_filter", "orig": "original"}
    return Variant(aliases.get(key, key))


def monitored_lines_for(variant: Variant, layout: TTableLayout) -> tuple[tuple[int, int], ...]:
    """Line 0 of every table for the original attack, every line otherwise."""
    if variant.all_lines:
        return tuple(layout.all_lines())
    return tuple((t, 0) for t in range(4))


@dataclass(frozen=True)
class AttackConfig:
    attacker_core: int
    victim_core: int
    monitored_lines: tuple[tuple[int, int], ...]
    strategy: tuple[int, int, int]
    encryptions: int
    variant: Variant
    reload_threshold: float
    same_core: bool = False

    def __post_init__(self):
        if self.same_core != (self.attacker_core == self.victim_core):
            raise ValueError("attacker and victim share a core only in same-core mode")
        if not self.monitored_lines:
            raise ValueError("no monitored lines")

    def strategies(self, h: CacheHierarchy, layout: TTableLayout) -> list[EvictionStrategy]:
        n, a, d = self.strategy
        return [EvictionStrategy.for_target(h.config, layout.line_address(t, l), n, a, d,
                                            Side.DATA)
                for t, l in self.monitored_lines]


@dataclass(frozen=True)
class AttackObservation:
    ciphertext: bytes
    reload_fast: tuple[bool, ...]


def evict_reload_round(h: CacheHierarchy, cfg: AttackConfig, victim: VictimProcess,
                       plaintext: bytes, noise_u: np.ndarray | None = None,
                       jitter_z: Sequence[float] | None = None,
                       strategies: Sequence[EvictionStrategy] | None = None
                       ) -> AttackObservation:
    """One round: evict every monitored line, let the victim encrypt, reload.

    Plain-Python reference for the compiled campaign loop.
    """
    if strategies is None:
        strategies = cfg.strategies(h, victim.layout)
    for s in strategies:
        run_eviction(h, s, cfg.attacker_core)
    ct = victim.encrypt(h, plaintext, noise_u, idle_slots=len(cfg.monitored_lines))
    fast = []
    for m, (t, l) in enumerate(cfg.monitored_lines):
        z = None if jitter_z is None else float(jitter_z[m])
        res = h.access(MemoryAccess(cfg.attacker_core, victim.layout.line_address(t, l)), z)
        fast.append(res.latency < cfg.reload_threshold)
    return AttackObservation(ct, tuple(fast))


class KeyHypothesisTable:
    """Per-line counters behind every variant's key scores."""

    def __init__(self, monitored_lines: Sequence[tuple[int, int]], layout: TTableLayout,
                 early_window: int = 0):
        self.lines = tuple(monitored_lines)
        self.layout = layout
        self.early_window = early_window
        m = len(self.lines)
        self.mon_table = np.array([t for t, _ in self.lines], np.int64)
        self.mon_line = np.array([l for _, l in self.lines], np.int64)
        self.slow = np.zeros(m, np.int64)
        self.early_slow = np.zeros(m, np.int64)
        self.excl = np.zeros((m, 4, 256), np.int64)
        self.seen = 0

    def add_rounds(self, ct: np.ndarray, fast: np.ndarray) -> None:
        """Fold a block of rounds (ciphertexts (R, 16), fast flags (R, M))."""
        K.accumulate_rounds(ct, fast, self.mon_table, self.mon_line,
                            self.layout.entries_per_line, SBOX, BYTE_POS, self.slow,
                            self.excl, self.early_slow, self.early_window, self.seen)
        self.seen += ct.shape[0]

    def line_scores(self, m: int) -> np.ndarray:
        """(4, 256) count scores of line m for the bytes its table serves."""
        return self.slow[m] - self.excl[m]

    def p_tilde(self) -> np.ndarray:
        """Observed per-line no-access frequency."""
        return self.slow / max(self.seen, 1)

    def early_p_tilde(self) -> np.ndarray:
        n = min(self.seen, self.early_window) if self.early_window else self.seen
        counts = self.early_slow if self.early_window else self.slow
        return counts / max(n, 1)

    def weights(self, p_na: float = P_NA) -> np.ndarray:
        """S_l = 1 - |P_na - P~_l| / (1 - P_na), clamped at 0."""
        return np.maximum(0.0, 1.0 - np.abs(p_na - self.p_tilde()) / (1.0 - p_na))

    def lines_of_table(self, t: int) -> np.ndarray:
        return np.nonzero(self.mon_table == t)[0]


def accumulate(obs: AttackObservation, layout: TTableLayout, table: KeyHypothesisTable,
               variant: Variant | None = None) -> None:
    """Fold one observation in (plain-Python path).

    A slow line means none of the 16 entries on it was looked up, so for
    every byte i served by its table the candidates c_i ^ S[e] are ruled
    out; all other candidates gain one. Weighted scaling is applied at
    recovery time, from the final per-line frequencies.
    """
    epl = layout.entries_per_line
    for m, fast in enumerate(obs.reload_fast):
        if fast:
            continue
        table.slow[m] += 1
        if table.seen < table.early_window:
            table.early_slow[m] += 1
        t = int(table.mon_table[m])
        e0 = int(table.mon_line[m]) * epl
        for q in range(4):
            c = obs.ciphertext[BYTE_POS[t, q]]
            for e in range(e0, e0 + epl):
                table.excl[m, q, c ^ int(SBOX[e])] += 1
    table.seen += 1


@dataclass(frozen=True)
class Recovery:
    key: bytes
    ranking: np.ndarray  # (16, 256): candidates best first
    scores: np.ndarray   # (16, 256) variant score used for the ranking

    def rank_of(self, true_key: bytes) -> np.ndarray:
        """1-based position of each true byte in its ranking."""
        return np.array([int(np.nonzero(self.ranking[i] == true_key[i])[0][0]) + 1
                         for i in range(16)])

    def log2_complexity(self, true_key: bytes) -> float:
        """log2 of the brute-force work left: the product of per-byte ranks."""
        return float(np.sum(np.log2(self.rank_of(true_key))))

    def correct_bytes(self, true_key: bytes) -> int:
        return sum(a == b for a, b in zip(self.key, true_key))


def _rank(scores: np.ndarray) -> np.ndarray:
    # stable sort on -score: ties keep ascending candidate order
    return np.argsort(-scores, axis=1, kind="stable")


def _per_byte(table: KeyHypothesisTable, per_table) -> np.ndarray:
    out = np.zeros((16, 256))
    for t in range(4):
        sc = per_table(t)
        for q in range(4):
            out[BYTE_POS[t, q]] = sc[q]
    return out


def recover_key(table: KeyHypothesisTable, variant: Variant, allow_empty: bool = False,
                p_na: float = P_NA) -> Recovery:
    """Best key guess and per-byte candidate ranking for one variant."""
    if table.seen == 0 and not allow_empty:
        raise ValueError("no observations accumulated")
    for t in range(4):
        if table.lines_of_table(t).size == 0:
            raise ValueError(f"no monitored line in table {t}")

    if variant is Variant.ORIGINAL:
        def per_table(t):
            m = table.lines_of_table(t)
            return table.line_scores(m[np.argmin(table.mon_line[m])])
        scores = _per_byte(table, per_table)
    elif variant is Variant.PROB_FILTER:
        d = np.abs(p_na - table.early_p_tilde())

        def per_table(t):
            m = table.lines_of_table(t)
            return table.line_scores(m[np.argmin(d[m])])
        scores = _per_byte(table, per_table)
    elif variant is Variant.WEIGHTED:
        w = table.weights(p_na)

        def per_table(t):
            m = table.lines_of_table(t)
            return np.tensordot(w[m], table.excl[m] * -1.0 + table.slow[m, None, None], 1)
        scores = _per_byte(table, per_table)
    else:
        def per_table(t):
            votes = np.zeros((4, 256))
            for m in table.lines_of_table(t):
                best = np.argmax(table.line_scores(m), axis=1)
                votes[np.arange(4), best] += 1
            return votes
        scores = _per_byte(table, per_table)

    ranking = _rank(scores)
    return Recovery(bytes(int(v) for v in ranking[:, 0]), ranking, scores)


# --- campaigns ---------------------------------------------------------------

@dataclass
class CampaignResult:
    rows: list[tuple[str, int, int, int]] = field(default_factory=list)
    ranks: list[tuple[str, int, int, float]] = field(default_factory=list)

    def extend(self, other: "CampaignResult") -> None:
        self.rows += other.rows
        self.ranks += other.ranks

    def sort(self) -> None:
        self.rows.sort(key=lambda r: (r[0], r[1], r[2]))
        self.ranks.sort(key=lambda r: (r[0], r[1], r[2]))

    def mean_correct(self) -> dict[tuple[str, int], float]:
        acc: dict[tuple[str, int], list[int]] = {}
        for variant, _, enc, correct in self.rows:
            acc.setdefault((variant, enc), []).append(correct)
        return {k: sum(v) / len(v) for k, v in sorted(acc.items())}

    def campaign_csv(self) -> str:
        return _csv(["variant", "key_index", "encryptions", "correct_bytes"], self.rows)

    def summary_csv(self) -> str:
        rows = [(v, e, f"{m:.4f}") for (v, e), m in self.mean_correct().items()]
        return _csv(["variant", "encryptions", "mean_correct_bytes"], rows)

    def ranks_csv(self) -> str:
        rows = [(v, k, e, f"{c:.4f}") for v, k, e, c in self.ranks]
        return _csv(["variant", "key_index", "encryptions", "log2_rank_product"], rows)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass(frozen=True)
class _Job:
    profile: SoCProfile
    variants: tuple[Variant, ...]
    key_index: int
    checkpoints: tuple[int, ...]
    seed: int
    same_core: bool
    self_evict_prob: float
    threshold: float
    layout: TTableLayout
    victim_core: int = 0
    attacker_core: int = 1


def _key_for(seed: int, key_index: int) -> bytes:
    ss = np.random.SeedSequence([seed, key_index, 0])
    return np.random.default_rng(ss).integers(0, 256, 16, dtype=np.uint8).tobytes()


def _run_stream(job: _Job, variants: tuple[Variant, ...], stream_id: int) -> CampaignResult:
    prof, layout = job.profile, job.layout
    cfg = prof.config
    key = _key_for(job.seed, job.key_index)
    victim_core, attacker = job.victim_core, job.attacker_core
    rng = np.random.default_rng(np.random.SeedSequence([job.seed, job.key_index, 1, stream_id]))
    h = CacheHierarchy(cfg.with_(replacement_seed=int(rng.integers(2**63))))

    mon = monitored_lines_for(variants[0], layout)
    n, a, d = prof.strategy
    ev = np.array([[x >> cfg.line_bits for x in
                    build_eviction_set(layout.line_address(t, l), n + d, cfg)]
                   for t, l in mon], np.int64)
    mon_lines = np.array([layout.line_address(t, l) >> cfg.line_bits for t, l in mon], np.int64)
    table_lines = layout.line_numbers(cfg.line_bits)
    rk = VictimProcess(key, victim_core, layout).round_keys
    true_k10 = bytes(rk[10])
    p_eff = effective_evict_prob(job.self_evict_prob, len(mon))

    total = max(job.checkpoints)
    table = KeyHypothesisTable(mon, layout, math.ceil(PROB_FILTER_FRACTION * total) or 1)
    out = CampaignResult()

    def snapshot(enc):
        for v in variants:
            rec = recover_key(table, v, allow_empty=True)
            out.rows.append((v.value, job.key_index, enc, rec.correct_bytes(true_k10)))
            out.ranks.append((v.value, job.key_index, enc, rec.log2_complexity(true_k10)))

    pending = sorted(set(job.checkpoints))
    if pending and pending[0] == 0:
        snapshot(0)
        pending.pop(0)
    done = 0
    sd = float(cfg.latency.jitter_stddev)
    while pending:
        pts = rng.integers(0, 256, (BLOCK_ROUNDS, 16), dtype=np.uint8)
        noise = rng.random((BLOCK_ROUNDS, table_lines.size))
        jit = rng.standard_normal((BLOCK_ROUNDS, len(mon)))
        ct = np.zeros((BLOCK_ROUNDS, 16), np.uint8)
        fast = np.zeros((BLOCK_ROUNDS, len(mon)), np.bool_)
        lo = 0
        while lo < BLOCK_ROUNDS and pending:
            hi = min(BLOCK_ROUNDS, lo + pending[0] - done)
            K.attack_rounds(h.state, attacker, victim_core, ev, n, a, d, mon_lines,
                            table_lines, T_TABLES, rk, layout.table_addrs(), pts[lo:hi],
                            noise[lo:hi], jit[lo:hi], p_eff, float(job.threshold), sd,
                            ct[lo:hi], fast[lo:hi])
            table.add_rounds(ct[lo:hi], fast[lo:hi])
            done += hi - lo
            lo = hi
            if done == pending[0]:
                snapshot(done)
                pending.pop(0)
    return out


def _run_key(job: _Job) -> CampaignResult:
    out = CampaignResult()
    original = tuple(v for v in job.variants if not v.all_lines)
    improved = tuple(v for v in job.variants if v.all_lines)
    if original:
        out.extend(_run_stream(job, original, 0))
    if improved:
        out.extend(_run_stream(job, improved, 1))
    return out


def attack_threshold(profile: SoCProfile, seed: int, layout: TTableLayout) -> float:
    """Reload threshold calibrated on the profile's timing model (raises
    CalibrationError when L2 hits and memory fetches overlap)."""
    # latency is side-agnostic; stage on the side whose misses fill L2
    p = SimulatorPlatform(profile.config, seed=seed)
    return calibrate_threshold(p, layout.line_address(0, 0), side=profile.strategy_side)


def run_campaign(profile: SoCProfile, variants: Iterable[Variant], keys: int,
                 checkpoints: Sequence[int], seed: int = 0, same_core: bool = False,
                 self_evict_prob: float = DEFAULT_SELF_EVICT_PROB,
                 layout: TTableLayout | None = None, workers: int = 1,
                 victim_core: int = 0, attacker_core: int | None = None) -> CampaignResult:
    """Attack ``keys`` random keys, recording correct last-round-key bytes at
    every checkpoint for each variant.

    The original attack monitors line 0 of each table; the other variants
    share one stream that monitors all lines. Results depend only on the
    arguments, not on ``workers``. The attacker defaults to the victim's
    core in same-core mode and to the next core otherwise.
    """
    variants = tuple(dict.fromkeys(variants))
    if not variants:
        raise ValueError("no variants requested")
    if keys < 1:
        raise ValueError("keys must be at least 1")
    cps = tuple(checkpoints)
    if not cps or any(b <= a for a, b in zip(cps, cps[1:])) or cps[0] < 0:
        raise ValueError("checkpoints must be non-negative and strictly ascending")
    if profile.config.num_cores < 2 and not same_core:
        raise ValueError("cross-core mode needs two cores")
    cores = profile.config.num_cores
    if attacker_core is None:
        attacker_core = victim_core if same_core else (victim_core + 1) % cores
    for c in (victim_core, attacker_core):
        if not 0 <= c < cores:
            raise ValueError(f"core {c} out of range for {cores} cores")
    if same_core != (attacker_core == victim_core):
        raise ValueError("attacker and victim share a core only in same-core mode")
    layout = layout or TTableLayout(line_size=profile.config.line_size)
    threshold = attack_threshold(profile, seed, layout)
    jobs = [_Job(profile, variants, k, cps, seed, same_core, self_evict_prob, threshold, layout,
                 victim_core, attacker_core) for k in range(keys)]
    result = CampaignResult()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for r in pool.map(_run_key, jobs):
                result.extend(r)
    else:
        for j in jobs:
            result.extend(_run_key(j))
    result.sort()
    return result
