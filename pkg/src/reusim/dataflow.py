"""Cycle-approximate timing of the PE array.

Row-stationary geometry: one PE per kernel row, so a k1 x k2 dot product
occupies a set of k1 PEs for 2x cycles (x = kernel side): x multiplies per
row in parallel with accumulation, then the cross-row accumulation.  The
signature phase runs the same dataflow with random filters;

  non-pipelined:  every bit of every signature costs 2x cycles,
  pipelined:      the first bit costs 2x+1 (extra overlap register), every
                  further bit of any signature costs x.

Vectors are assigned to PE sets in contiguous raster blocks.  The sync
design barriers all sets at every filter switch; the async design lets each
set run ahead through the filter sequence, bounded by the M filter-buffer
slots (one slot streams the random filters during the signature phase, the
other M-1 are preloaded with the first compute filters; a new filter loads
only when every set is done with an old one).

Per-vector compute costs, all config-exposed:
  HIT   cache_read_latency
  MAU   2x * mac_latency + cache_write_latency
  MNU   2x * mac_latency
Data writes and the per-filter VD flash-clear default to zero visible
cycles (overlapped with the next dot product / the filter reload stream);
insert-queue serialization is reported as an event tally, not cycled.
"""

import math
from dataclasses import dataclass

import numpy as np

from .cache import HitState
from .kernels import ConfigError, backward_window_grid


@dataclass(frozen=True)
class PEArrayConfig:
    pe_count: int = 168
    pe_set_size: int = 0          # 0: one PE per kernel row (k1)
    mac_latency: int = 1
    cache_read_latency: int = 1
    cache_write_latency: int = 0  # overlapped with the next dot product
    vd_invalidate_cycles: int = 0  # flash bitline clear per filter switch
    hitmap_check_cycles: int = 0
    pipelined_signatures: bool = True

    def __post_init__(self):
        if self.pe_count < 1:
            raise ConfigError("pe_count must be positive")
        if min(self.mac_latency, self.cache_read_latency) < 1:
            raise ConfigError("mac and cache read latencies must be >= 1")
        if min(self.cache_write_latency, self.vd_invalidate_cycles, self.hitmap_check_cycles) < 0:
            raise ConfigError("cycle costs must be non-negative")

    def set_size(self, k1):
        return self.pe_set_size or k1

    def pe_sets(self, k1):
        sets = self.pe_count // self.set_size(k1)
        if sets < 1:
            raise ConfigError(f"{self.pe_count} PEs cannot host a set of {self.set_size(k1)}")
        return sets


@dataclass
class CycleReport:
    """Per-run cycle counts and event tallies.  total = signature + compute
    + stall; executed + reused covers every demanded dot product."""

    signature_cycles: int = 0
    compute_cycles: int = 0
    stall_cycles: int = 0
    dot_products_executed: int = 0
    dot_products_reused: int = 0
    cache_reads: int = 0
    cache_writes: int = 0
    signature_regenerations: int = 0
    baseline_cycles: int = 0
    insert_conflicts: int = 0

    @property
    def total_cycles(self):
        return self.signature_cycles + self.compute_cycles + self.stall_cycles

    @property
    def modeled_speedup(self):
        return self.baseline_cycles / self.total_cycles if self.total_cycles else 1.0

    def merge(self, other):
        self.signature_cycles += other.signature_cycles
        self.compute_cycles += other.compute_cycles
        self.stall_cycles += other.stall_cycles
        self.dot_products_executed += other.dot_products_executed
        self.dot_products_reused += other.dot_products_reused
        self.cache_reads += other.cache_reads
        self.cache_writes += other.cache_writes
        self.signature_regenerations += other.signature_regenerations
        self.baseline_cycles += other.baseline_cycles
        self.insert_conflicts += other.insert_conflicts
        return self

    def to_dict(self):
        d = {
            "signature_cycles": self.signature_cycles,
            "compute_cycles": self.compute_cycles,
            "stall_cycles": self.stall_cycles,
            "total_cycles": self.total_cycles,
            "dot_products_executed": self.dot_products_executed,
            "dot_products_reused": self.dot_products_reused,
            "cache_reads": self.cache_reads,
            "cache_writes": self.cache_writes,
            "signature_regenerations": self.signature_regenerations,
            "baseline_cycles": self.baseline_cycles,
            "insert_conflicts": self.insert_conflicts,
            "modeled_speedup": self.modeled_speedup,
        }
        return d


def signature_phase_cycles(x, num_vectors_per_set, n_bits, pipelined):
    """Cycles for one PE set to produce all bits of its signatures."""
    if x < 1 or n_bits < 0 or num_vectors_per_set < 0:
        raise ConfigError("signature phase parameters out of range")
    total_bits = n_bits * num_vectors_per_set
    if total_bits == 0:
        return 0
    if pipelined:
        return (2 * x + 1) + x * (total_bits - 1)
    return 2 * x * total_bits


def partition_vectors(num_vectors, pe_sets):
    """Contiguous raster-order assignment; the first sets take the ceiling."""
    base, extra = divmod(num_vectors, pe_sets)
    return [base + 1] * extra + [base] * (pe_sets - extra)


def signature_completion_cycles(x, set_vector_count, n_bits, pipelined):
    """Cycle at which each of a PE set's signatures is complete.

    The convolution formulation computes bit j of every vector before bit
    j+1 of any, so vector v's signature lands with its last bit, the
    ((n_bits - 1) * count + v + 1)-th dot product of the set.
    """
    times = []
    for v in range(set_vector_count):
        dots = (n_bits - 1) * set_vector_count + v + 1
        if pipelined:
            times.append((2 * x + 1) + x * (dots - 1))
        else:
            times.append(2 * x * dots)
    return times


def insert_queue_conflicts(mau_events, queue=None):
    """Serialize simultaneous tag inserts through the per-set queues.

    ``mau_events`` holds (cache_set, request_cycle) pairs in probe order.
    Returns (delayed_insert_count, max_delay); the drain overlaps the
    ongoing signature pipeline, so it is reported rather than added to the
    phase totals.
    """
    from .cache import InsertQueue

    queue = queue or InsertQueue()
    delayed = 0
    for set_idx, cycle in mau_events:
        grant = queue.schedule(set_idx, cycle)
        if grant != cycle:
            delayed += 1
    return delayed, queue.max_delay


def _as_states(hitmap):
    states = getattr(hitmap, "states", hitmap)
    return np.asarray(states, dtype=np.int8)


def _split_by_set(states, counts):
    out = []
    start = 0
    for c in counts:
        out.append(states[start : start + c])
        start += c
    return out


def _set_filter_cost(states_slice, x, cfg):
    """One PE set's cycles over its vectors for one filter."""
    miss_cost = 2 * x * cfg.mac_latency
    cost = 0
    for s in states_slice:
        cost += cfg.hitmap_check_cycles
        if s == HitState.HIT:
            cost += cfg.cache_read_latency
        elif s == HitState.MAU:
            cost += miss_cost + cfg.cache_write_latency
        else:
            cost += miss_cost
    return cost


def _tally(report, states, filters, cfg):
    n_hit = int(np.sum(states == HitState.HIT))
    n_miss = len(states) - n_hit
    n_mau = int(np.sum(states == HitState.MAU))
    report.dot_products_reused += n_hit * filters
    report.dot_products_executed += n_miss * filters
    report.cache_reads += n_hit * filters
    report.cache_writes += n_mau * filters


def _check_hitmaps(spec, hitmaps, expected_len):
    if len(hitmaps) != spec.in_channels:
        raise ConfigError(
            f"{len(hitmaps)} hitmaps for {spec.in_channels} channels"
        )
    maps = [_as_states(h) for h in hitmaps]
    for m in maps:
        if len(m) != expected_len:
            raise ConfigError(f"hitmap length {len(m)} != vector count {expected_len}")
    return maps


def analytic_forward_baseline(spec, cfg):
    """Closed-form no-reuse cycle count of the row-stationary forward pass:
    ceil(positions / pe_sets) * 2x * filters * channels."""
    x = spec.kernel[0]
    sets = cfg.pe_sets(x)
    per_filter = math.ceil(spec.num_vectors / sets) * 2 * x * cfg.mac_latency
    return per_filter * spec.out_channels * spec.in_channels


def analytic_backward_baseline(spec, cfg):
    """No-reuse cycles of both backward convolutions: each of the
    out_channels gradient channels makes 2 * in_channels filter passes over
    the gradient-vector grid."""
    x = spec.kernel[0]
    sets = cfg.pe_sets(x)
    gh, gw = backward_window_grid(spec)
    per_pass = math.ceil(gh * gw / sets) * 2 * x * cfg.mac_latency
    return per_pass * 2 * spec.in_channels * spec.out_channels


def analytic_fc_baseline(spec, batch, cfg):
    """No-reuse FC cycles: each PE hosts one batch row and streams every
    weight column of every block (block_len MACs per column)."""
    waves = math.ceil(batch / cfg.pe_count)
    return (
        waves
        * spec.num_blocks
        * spec.out_features
        * spec.block_vector_len
        * cfg.mac_latency
    )


# ---------------------------------------------------------------------------
# row-stationary forward

def simulate_forward_sync(spec, hitmaps, cfg, n_bits):
    """Synchronous design: every PE set waits at each filter switch until
    all sets are done (per-filter cost = max over sets)."""
    x = spec.kernel[0]
    sets = cfg.pe_sets(x)
    maps = _check_hitmaps(spec, hitmaps, spec.num_vectors)
    counts = partition_vectors(spec.num_vectors, sets)
    filters = spec.out_channels
    report = CycleReport(baseline_cycles=analytic_forward_baseline(spec, cfg))
    for states in maps:
        slices = _split_by_set(states, counts)
        report.signature_cycles += signature_phase_cycles(
            x, max(counts), n_bits, cfg.pipelined_signatures
        )
        per_set = [_set_filter_cost(sl, x, cfg) for sl in slices]
        report.compute_cycles += filters * max(per_set)
        if np.any(states == HitState.MAU) and filters > 1:
            report.stall_cycles += cfg.vd_invalidate_cycles * (filters - 1)
        _tally(report, states, filters, cfg)
    return report


def simulate_forward_async(spec, hitmaps, cfg, n_bits, m_filters=4):
    """Asynchronous design: each set starts computing as soon as its own
    signatures are done and walks the filter sequence independently, bounded
    by the M filter-buffer slots (multi-version cache supplies per-filter
    data slots).  M=1 degenerates to the synchronous barriers."""
    if m_filters < 1:
        raise ConfigError("need at least one filter slot")
    x = spec.kernel[0]
    sets = cfg.pe_sets(x)
    maps = _check_hitmaps(spec, hitmaps, spec.num_vectors)
    counts = partition_vectors(spec.num_vectors, sets)
    filters = spec.out_channels
    report = CycleReport(baseline_cycles=analytic_forward_baseline(spec, cfg))
    for states in maps:
        slices = _split_by_set(states, counts)
        sig = [
            signature_phase_cycles(x, c, n_bits, cfg.pipelined_signatures)
            for c in counts
        ]
        cost = [_set_filter_cost(sl, x, cfg) for sl in slices]
        sig_end = max(sig)
        now = list(sig)          # per-set clock after its own signature work
        waited = [0] * sets
        finish_all = []          # completion time of filter f across all sets
        for f in range(filters):
            if f < m_filters - 1:
                ready = 0        # preloaded alongside the random-filter slot
            elif f == m_filters - 1:
                ready = sig_end  # takes over the slot the randoms streamed in
            else:
                ready = finish_all[f - m_filters]
            worst = 0
            for s in range(sets):
                start = max(now[s], ready)
                waited[s] += start - now[s]
                now[s] = start + cost[s]
                worst = max(worst, now[s])
            finish_all.append(worst)
        total = finish_all[-1] if filters else sig_end
        crit = max(range(sets), key=lambda s: now[s])
        report.signature_cycles += sig[crit]
        report.compute_cycles += filters * cost[crit]
        report.stall_cycles += total - sig[crit] - filters * cost[crit]
        _tally(report, states, filters, cfg)
    return report


# ---------------------------------------------------------------------------
# weight- and input-stationary variants

def simulate_weight_stationary(spec, hitmaps, cfg, n_bits):
    """Weights resident in PEs, vectors broadcast.  Random vectors ride in
    as the first part of the filters, so the signature phase is one
    broadcast pass of every vector (m MACs each); a HIT vector later skips
    its broadcast and MACs entirely."""
    m = spec.kernel_area
    maps = _check_hitmaps(spec, hitmaps, spec.num_vectors)
    filters = spec.out_channels
    fpasses = math.ceil(filters / cfg.pe_count)
    baseline = spec.in_channels * fpasses * spec.num_vectors * m * cfg.mac_latency
    report = CycleReport(baseline_cycles=baseline)
    for states in maps:
        report.signature_cycles += spec.num_vectors * m * cfg.mac_latency
        compute = 0
        for s in states:
            if s == HitState.HIT:
                compute += cfg.cache_read_latency
            else:
                compute += m * cfg.mac_latency + (
                    cfg.cache_write_latency if s == HitState.MAU else 0
                )
        report.compute_cycles += fpasses * compute
        _tally(report, states, filters, cfg)
    return report


def simulate_input_stationary(spec, hitmaps, cfg, n_bits):
    """Vectors resident in PEs, weights broadcast.  A HIT vector skips the
    whole weight stream and reads its cached results; a miss streams all
    filters (m MACs each)."""
    m = spec.kernel_area
    maps = _check_hitmaps(spec, hitmaps, spec.num_vectors)
    filters = spec.out_channels
    load = 1
    baseline = spec.in_channels * spec.num_vectors * (load + filters * m * cfg.mac_latency)
    report = CycleReport(baseline_cycles=baseline)
    waves = math.ceil(spec.num_vectors / cfg.pe_count)
    for states in maps:
        report.signature_cycles += waves * n_bits * m * cfg.mac_latency
        compute = 0
        for s in states:
            if s == HitState.HIT:
                compute += load + filters * cfg.cache_read_latency
            else:
                compute += load + filters * m * cfg.mac_latency + (
                    cfg.cache_write_latency * filters if s == HitState.MAU else 0
                )
        report.compute_cycles += compute
        _tally(report, states, filters, cfg)
    return report


# ---------------------------------------------------------------------------
# backward pass

def simulate_backward(spec, next_spec, hitmaps, cfg, n_bits):
    """Both backward convolutions of one layer, driven by per-gradient-
    channel hitmaps over the gradient-vector grid.

    When the following layer's kernel dimensions match this layer's, its
    stored forward signatures/Hitmap are reloaded: zero signature cycles.
    Otherwise signatures are regenerated from the gradient vectors, one
    regeneration per gradient channel.
    """
    x = spec.kernel[0]
    sets = cfg.pe_sets(x)
    gh, gw = backward_window_grid(spec)
    n_vec = gh * gw
    maps = [_as_states(h) for h in hitmaps]
    if len(maps) != spec.out_channels:
        raise ConfigError(
            f"{len(maps)} hitmaps for {spec.out_channels} gradient channels"
        )
    for mstates in maps:
        if len(mstates) != n_vec:
            raise ConfigError(f"hitmap length {len(mstates)} != gradient grid {n_vec}")
    reload_ok = next_spec is not None and tuple(next_spec.kernel) == tuple(spec.kernel)
    counts = partition_vectors(n_vec, sets)
    passes = 2 * spec.in_channels  # input-gradient pass + weight-gradient pass
    report = CycleReport(baseline_cycles=analytic_backward_baseline(spec, cfg))
    for states in maps:
        if not reload_ok:
            report.signature_cycles += signature_phase_cycles(
                x, max(counts), n_bits, cfg.pipelined_signatures
            )
            report.signature_regenerations += 1
        slices = _split_by_set(states, counts)
        per_set = [_set_filter_cost(sl, x, cfg) for sl in slices]
        report.compute_cycles += passes * max(per_set)
        if np.any(states == HitState.MAU) and passes > 1:
            report.stall_cycles += cfg.vd_invalidate_cycles * (passes - 1)
        _tally(report, states, passes, cfg)
    return report
