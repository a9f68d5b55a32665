"""Signature-keyed reuse cache.

Set-associative with NO replacement: once a set is full, further new
signatures are turned away for the rest of the channel pass.  Tag and data
validity are split (VT / VD) because the tag (a signature) exists before any
dot product has been computed; data slots are multi-versioned so concurrent
filters can each keep their own result.

Probe outcome per vector, recorded in the Hitmap:
  HIT  - signature already present: reuse the cached result
  MAU  - miss, a free way existed: tag inserted, data filled on compute
  MNU  - miss, set full: compute without caching
"""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class HitState(IntEnum):
    HIT = 0
    MAU = 1  # miss and update
    MNU = 2  # miss no update


class ProtocolError(RuntimeError):
    """A caller violated the probe/read/write discipline."""


@dataclass(frozen=True)
class CacheConfig:
    """Cache geometry.  ``versions`` is the number of per-line data slots
    (one per in-flight filter for the asynchronous design); ``result_width``
    describes how many values one data slot carries - 1 for conv dot
    products, one per weight column for FC blocks."""

    total_entries: int = 1024
    ways: int = 16
    versions: int = 4
    result_width: int = 1

    def __post_init__(self):
        if min(self.total_entries, self.ways, self.versions, self.result_width) < 1:
            raise ValueError("cache parameters must be positive")
        if self.total_entries % self.ways:
            raise ValueError("total_entries must be divisible by ways")
        sets = self.total_entries // self.ways
        if sets & (sets - 1):
            raise ValueError(f"set count {sets} must be a power of two")

    @property
    def sets(self):
        return self.total_entries // self.ways

    @property
    def index_bits(self):
        return (self.sets - 1).bit_length()


class Hitmap:
    """Ternary per-vector verdict for one channel pass.

    Every ordinal is assigned exactly once before the compute phase; a
    second assignment is a protocol error.
    """

    def __init__(self, n_vectors):
        self.states = np.full(n_vectors, -1, dtype=np.int8)

    def set(self, ordinal, state):
        if self.states[ordinal] != -1:
            raise ProtocolError(f"ordinal {ordinal} probed twice in one channel pass")
        self.states[ordinal] = int(state)

    def state(self, ordinal):
        s = self.states[ordinal]
        if s == -1:
            raise ProtocolError(f"ordinal {ordinal} was never probed")
        return HitState(s)

    def counts(self):
        return {
            HitState.HIT: int(np.sum(self.states == HitState.HIT)),
            HitState.MAU: int(np.sum(self.states == HitState.MAU)),
            HitState.MNU: int(np.sum(self.states == HitState.MNU)),
        }

    def fully_assigned(self):
        return not np.any(self.states == -1)

    def __len__(self):
        return len(self.states)


class _Line:
    __slots__ = ("tag", "vt", "vd", "data")

    def __init__(self, versions):
        self.tag = None
        self.vt = False
        self.vd = [False] * versions
        self.data = [None] * versions


class ReuseCache:
    """The reuse cache plus its per-channel statistics.

    Entry ids are stable (set * ways + way) so later reads go through the id
    saved in the signature table without another tag comparison.
    """

    def __init__(self, config=None):
        self.config = config or CacheConfig()
        self.lines = [_Line(self.config.versions) for _ in range(self.config.total_entries)]
        self.reset_stats()

    def reset_stats(self):
        self.stats = {"hits": 0, "maus": 0, "mnus": 0, "vd_writes": 0, "reads": 0}

    # -- addressing ---------------------------------------------------------

    def index_and_tag(self, sig):
        """Split a signature into (set index, tag): the low index_bits bits
        select the set, the remaining high bits are the tag."""
        bits = self.config.index_bits
        if sig.n_bits < bits:
            raise ValueError(
                f"signature of {sig.n_bits} bits is shorter than the {bits}-bit index"
            )
        return sig.value & (self.config.sets - 1), sig.value >> bits

    # -- signature phase ----------------------------------------------------

    def probe_and_update(self, sig, ordinal, hitmap, sigtable=None):
        """One probe of the signature phase; see the module docstring for
        the HIT/MAU/MNU transition rules."""
        set_idx, tag = self.index_and_tag(sig)
        base = set_idx * self.config.ways
        free_way = None
        for way in range(self.config.ways):
            line = self.lines[base + way]
            if line.vt and line.tag == tag:
                hitmap.set(ordinal, HitState.HIT)
                self.stats["hits"] += 1
                if sigtable is not None:
                    sigtable.record(ordinal, sig, base + way)
                return HitState.HIT
            if free_way is None and not line.vt:
                free_way = way
        if free_way is not None:
            line = self.lines[base + free_way]
            line.tag = tag
            line.vt = True
            hitmap.set(ordinal, HitState.MAU)
            self.stats["maus"] += 1
            if sigtable is not None:
                sigtable.record(ordinal, sig, base + free_way)
            return HitState.MAU
        hitmap.set(ordinal, HitState.MNU)
        self.stats["mnus"] += 1
        if sigtable is not None:
            sigtable.record(ordinal, sig, None)
        return HitState.MNU

    # -- compute phase ------------------------------------------------------

    def read_result(self, entry_id, version=0):
        """Cached result for a version, or None while that version's VD is
        unset (or after invalidation)."""
        if not 0 <= version < self.config.versions:
            raise ValueError(f"version {version} out of range")
        line = self.lines[entry_id]
        self.stats["reads"] += 1
        if line.vd[version]:
            return line.data[version]
        return None

    def write_result(self, entry_id, version, value):
        if not 0 <= version < self.config.versions:
            raise ValueError(f"version {version} out of range")
        line = self.lines[entry_id]
        if not line.vt:
            raise ProtocolError("write to a line whose tag is not valid")
        line.data[version] = value
        line.vd[version] = True
        self.stats["vd_writes"] += 1

    def invalidate_vd_all(self):
        """Flash-clear every VD bit (the per-filter-switch bitline); tags,
        VT flags and the Hitmap stay valid."""
        for line in self.lines:
            for v in range(self.config.versions):
                line.vd[v] = False

    def clear(self, hitmap=None, sigtable=None):
        """Start of a new channel pass: drop every tag and every result."""
        for line in self.lines:
            line.tag = None
            line.vt = False
            for v in range(self.config.versions):
                line.vd[v] = False
                line.data[v] = None
        if hitmap is not None:
            hitmap.states[:] = -1
        if sigtable is not None:
            sigtable.clear()

    # -- introspection ------------------------------------------------------

    def occupancy(self):
        return sum(1 for line in self.lines if line.vt)

    def set_tags(self, set_idx):
        base = set_idx * self.config.ways
        return [
            self.lines[base + w].tag
            for w in range(self.config.ways)
            if self.lines[base + w].vt
        ]

    def channel_stats(self):
        snap = dict(self.stats)
        snap["occupancy"] = self.occupancy()
        return snap

    def check_invariants(self):
        """VD implies VT on every line; no duplicate tags within a set."""
        for line in self.lines:
            if any(line.vd) and not line.vt:
                raise ProtocolError("valid data on a line without a valid tag")
        for s in range(self.config.sets):
            tags = self.set_tags(s)
            if len(tags) != len(set(tags)):
                raise ProtocolError(f"duplicate tags in set {s}")


class InsertQueue:
    """Per-set serialization of simultaneous tag inserts: at most one insert
    drains per set per cycle; different sets are independent.

    schedule() returns the cycle at which a request submitted at
    ``request_cycle`` is actually granted.
    """

    def __init__(self):
        self._last_grant = {}
        self.max_delay = 0

    def schedule(self, set_idx, request_cycle):
        last = self._last_grant.get(set_idx)
        grant = request_cycle if last is None else max(request_cycle, last + 1)
        self._last_grant[set_idx] = grant
        self.max_delay = max(self.max_delay, grant - request_cycle)
        return grant

    def reset(self):
        self._last_grant.clear()
        self.max_delay = 0
