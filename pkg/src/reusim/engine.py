"""Functional execution of conv / FC / attention layers with
signature-driven computation reuse.

Numerics are arranged so that whenever two colliding vectors are bitwise
equal, reuse-enabled outputs are bit-identical to the reference kernels:
the cache stores the float64 dot product of the first occurrence, and the
engine accumulates those float64 partials in exactly the reference order.

The weight-gradient pass reuses gradient-vector similarity by grouping:
each input position contributes its pixel value times the flipped gradient
window around it, so positions whose windows share a signature fold into
one multiply of the window by the summed coefficients.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .cache import CacheConfig, Hitmap, HitState, ProtocolError, ReuseCache
from .dataflow import CycleReport, PEArrayConfig, analytic_fc_baseline
from .kernels import (
    IDENTITY,
    ConvLayerSpec,
    FCLayerSpec,
    ShapeError,
    activation_grad,
    apply_activation,
    as_channels,
    as_filters,
    backward_window_grid,
    dilate_and_pad_delta,
    extract_gradient_vectors,
    extract_input_vectors,
)
from .signatures import (
    Signature,
    SignatureTable,
    gen_projection,
    signature_of,
    signatures_via_convolution,
)


@dataclass
class ReuseStats:
    """Dot-product bookkeeping; executed + reused equals the demand of the
    layer, mnu_forced counts computations the full cache refused to hold."""

    executed: int = 0
    reused: int = 0
    mnu_forced: int = 0

    @property
    def demand(self):
        return self.executed + self.reused

    @property
    def reuse_fraction(self):
        return self.reused / self.demand if self.demand else 0.0

    def merge(self, other):
        self.executed += other.executed
        self.reused += other.reused
        self.mnu_forced += other.mnu_forced
        return self


@dataclass
class StoredLayerMaps:
    """Forward-pass signatures and Hitmap of one layer, kept for the
    backward pass of the layer below."""

    kernel: tuple
    n_bits: int
    grid: tuple
    channels: list = field(default_factory=list)  # (signatures, states) pairs


class LayerSignatureStore:
    """Per-layer signature/Hitmap snapshots captured during forward.

    An entry may be consumed at most once per backward pass; call
    begin_backward_pass() when a new pass starts.
    """

    def __init__(self):
        self._entries = {}
        self._consumed = set()

    def save(self, layer_id, maps):
        self._entries[layer_id] = maps

    def peek(self, layer_id):
        return self._entries.get(layer_id)

    def fetch(self, layer_id):
        if layer_id not in self._entries:
            return None
        if layer_id in self._consumed:
            raise ProtocolError(f"stored maps for layer {layer_id} consumed twice")
        self._consumed.add(layer_id)
        return self._entries[layer_id]

    def begin_backward_pass(self):
        self._consumed.clear()

    def __contains__(self, layer_id):
        return layer_id in self._entries


# ---------------------------------------------------------------------------
# binary spill format for stored maps

_SPILL_MAGIC = b"SIGS"


def save_store(store, path):
    """Spill stored maps to disk.  Little-endian; per channel record:
    header {layer_id, channel, n_bits, count} as u32, then `count` packed
    signature bit rows and `count` Hitmap state bytes."""
    with open(path, "wb") as fh:
        fh.write(_SPILL_MAGIC)
        fh.write(struct.pack("<I", len(store._entries)))
        for layer_id, maps in sorted(store._entries.items()):
            fh.write(
                struct.pack(
                    "<IIIII",
                    int(layer_id),
                    len(maps.channels),
                    maps.kernel[0],
                    maps.kernel[1],
                    maps.n_bits,
                )
            )
            fh.write(struct.pack("<II", maps.grid[0], maps.grid[1]))
            row_bytes = (maps.n_bits + 7) // 8
            for channel, (sigs, states) in enumerate(maps.channels):
                fh.write(
                    struct.pack("<IIII", int(layer_id), channel, maps.n_bits, len(sigs))
                )
                for sig in sigs:
                    fh.write(sig.value.to_bytes(row_bytes, "little"))
                fh.write(np.asarray(states, dtype=np.int8).tobytes())


def load_store(path):
    store = LayerSignatureStore()
    with open(path, "rb") as fh:
        if fh.read(4) != _SPILL_MAGIC:
            raise ValueError("not a signature spill file")
        (n_layers,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_layers):
            layer_id, n_channels, k1, k2, n_bits = struct.unpack("<IIIII", fh.read(20))
            gh, gw = struct.unpack("<II", fh.read(8))
            maps = StoredLayerMaps((k1, k2), n_bits, (gh, gw))
            row_bytes = (n_bits + 7) // 8
            for _c in range(n_channels):
                _lid, _ch, bits, count = struct.unpack("<IIII", fh.read(16))
                sigs = []
                for _i in range(count):
                    value = int.from_bytes(fh.read(row_bytes), "little")
                    sigs.append(Signature(value, bits))
                states = np.frombuffer(fh.read(count), dtype=np.int8).copy()
                maps.channels.append((sigs, states))
            store.save(layer_id, maps)
    return store


# ---------------------------------------------------------------------------
# forward convolution

def build_channel_hitmap(plane, spec, proj, cache):
    """Signature phase of one channel: generate signatures and populate the
    Hitmap and signature table through cache probes."""
    sigs = signatures_via_convolution(plane, spec, proj)
    hm = Hitmap(len(sigs))
    table = SignatureTable()
    for i, sig in enumerate(sigs):
        cache.probe_and_update(sig, i, hm, table)
    return sigs, hm, table


def forward_conv_with_reuse(
    inp, weights, spec, proj, cache, detect=True, store=None, layer_id=None
):
    """Forward convolution where HIT vectors reuse the cached dot product
    of an earlier vector with the same signature.

    Per channel: the cache is cleared, signatures probed into the Hitmap,
    then every filter walks the vectors (VD bits flash-cleared between
    filters).  Matching the reference bit-for-bit relies only on colliding
    vectors being bitwise equal; signature equality is the sole reuse
    criterion at run time.

    Returns (output, ReuseStats, per-channel Hitmaps).
    """
    inp3, in_2d = as_channels(inp)
    w4, w_2d = as_filters(weights)
    if inp3.shape[1:] != spec.input_size:
        raise ShapeError(f"input {inp3.shape[1:]} does not match {spec.input_size}")
    if w4.shape[0] != spec.out_channels or w4.shape[1] != spec.in_channels:
        raise ShapeError("weight channels do not match spec")
    if w4.shape[2:] != spec.kernel:
        raise ShapeError("weight kernel does not match spec")
    if detect and proj.m != spec.kernel_area:
        raise ShapeError(f"projection m={proj.m} does not match kernel area")
    nf, nc = w4.shape[:2]
    n_vec = spec.num_vectors
    w64 = w4.astype(np.float64).reshape(nf, nc, spec.kernel_area)
    out64 = np.zeros((nf, n_vec), dtype=np.float64)
    stats = ReuseStats()
    hitmaps = []
    saved_channels = []
    for c in range(nc):
        win64 = extract_input_vectors(inp3[c], spec).astype(np.float64)
        cache.clear()
        if detect:
            sigs, hm, table = build_channel_hitmap(inp3[c], spec, proj, cache)
        else:
            sigs, table = [], None
            hm = Hitmap(n_vec)
            for i in range(n_vec):
                hm.set(i, HitState.MNU)
        for f in range(nf):
            if f and detect:
                cache.invalidate_vd_all()
            fc = w64[f, c]
            row = out64[f]
            for i in range(n_vec):
                state = hm.state(i)
                if state == HitState.HIT:
                    val = cache.read_result(table.entry_ids[i], 0)
                    stats.reused += 1
                else:
                    val = np.dot(win64[i], fc)
                    stats.executed += 1
                    if state == HitState.MAU:
                        cache.write_result(table.entry_ids[i], 0, val)
                    elif detect:
                        stats.mnu_forced += 1
                row[i] += val
        hitmaps.append(hm)
        if store is not None and detect:
            saved_channels.append((sigs, hm.states.copy()))
    if store is not None and detect:
        store.save(
            layer_id,
            StoredLayerMaps(spec.kernel, proj.n_bits, spec.out_size, saved_channels),
        )
    out = out64.astype(np.float32).reshape(nf, *spec.out_size)
    out = apply_activation(out, spec.activation)
    if in_2d and w_2d:
        return out[0], stats, hitmaps
    return out, stats, hitmaps


# ---------------------------------------------------------------------------
# backward convolution

@dataclass
class BackwardResult:
    weight_grad: np.ndarray
    input_grad: np.ndarray
    stats: ReuseStats
    regenerations: int
    hitmaps: list


def _stored_usable(stored, spec, interior):
    return (
        stored is not None
        and tuple(stored.kernel) == tuple(spec.kernel)
        and tuple(stored.grid) == interior
        and len(stored.channels) == spec.out_channels
    )


def backward_conv_with_reuse(
    delta, weights, out_prev, act_input, spec, proj, cache,
    stored=None, activation=None, detect=True,
):
    """Both backward convolutions of one layer with gradient-vector reuse.

    The gradient vectors are the k1 x k2 windows of the (dilated, padded)
    output gradient; they drive the input-gradient correlation directly and
    the weight gradient through coefficient grouping.  When ``stored``
    carries matching-dimension forward maps, their signatures are replayed
    over the interior windows (windows overlapping the zero padding are
    computed without caching); otherwise signatures are regenerated from
    the gradient vectors, once per gradient channel.

    Beware of sparsity: sign projections cannot separate vectors that are
    positive multiples of each other, so gradient windows holding a single
    nonzero value (stride-dilated deltas) merge regardless of signature
    length.  Reuse there is as approximate as the hashing itself.
    """
    d3, _ = as_channels(delta)
    x3, _ = as_channels(out_prev)
    a3, _ = as_channels(act_input)
    w4, _ = as_filters(weights)
    if activation is None:
        activation = spec.activation
    if d3.shape[0] != spec.out_channels or d3.shape[1:] != spec.out_size:
        raise ShapeError("delta does not match spec output")
    if x3.shape[0] != spec.in_channels or x3.shape[1:] != spec.input_size:
        raise ShapeError("out_prev does not match spec input")
    if w4.shape != (spec.out_channels, spec.in_channels, *spec.kernel):
        raise ShapeError("weights do not match spec")
    nf, nc = w4.shape[:2]
    k1, k2 = spec.kernel
    k_area = spec.kernel_area
    gh, gw = backward_window_grid(spec)
    n_g = gh * gw
    interior = (gh - 2 * (k1 - 1), gw - 2 * (k2 - 1))
    use_stored = _stored_usable(stored, spec, interior)
    wf64 = w4[:, :, ::-1, ::-1].astype(np.float64).reshape(nf, nc, k_area)
    wgrad64 = np.zeros((nf, nc, k_area), dtype=np.float64)
    g64 = np.zeros((nc, n_g), dtype=np.float64)
    xflat64 = []
    for c in range(nc):
        xp = np.pad(x3[c], spec.padding) if spec.padding else x3[c]
        xflat64.append(xp.astype(np.float64).ravel())
    stats = ReuseStats()
    regenerations = 0
    hitmaps = []
    for fidx in range(nf):
        padded = dilate_and_pad_delta(d3[fidx], spec)
        gwin64 = extract_gradient_vectors(d3[fidx], spec).astype(np.float64)
        cache.clear()
        hm = Hitmap(n_g)
        ids = _IdRecorder(n_g)
        if not detect:
            for i in range(n_g):
                hm.set(i, HitState.MNU)
        elif use_stored:
            # replay the forward signatures over the interior windows;
            # ring windows overlap the zero padding: compute, never cache
            sigs, _states = stored.channels[fidx]
            pos = 0
            for u in range(interior[0]):
                base = (u + k1 - 1) * gw + (k2 - 1)
                for v in range(interior[1]):
                    cache.probe_and_update(sigs[pos], base + v, hm, ids)
                    pos += 1
            for i in range(n_g):
                if hm.states[i] == -1:
                    hm.set(i, HitState.MNU)
        else:
            spec_b = ConvLayerSpec(1, 1, spec.kernel, padded.shape, 1, 0, IDENTITY)
            sigs = signatures_via_convolution(padded, spec_b, proj)
            for i, sig in enumerate(sigs):
                cache.probe_and_update(sig, i, hm, ids)
            regenerations += 1
        entry_ids = ids.entry_ids
        # Eq. for the input gradient: one pass per input channel
        for c in range(nc):
            if c:
                cache.invalidate_vd_all()
            fc = np.ascontiguousarray(wf64[fidx, c])
            row = g64[c]
            for i in range(n_g):
                state = hm.state(i)
                if state == HitState.HIT:
                    val = cache.read_result(entry_ids[i], 0)
                    stats.reused += 1
                else:
                    val = np.dot(gwin64[i], fc)
                    stats.executed += 1
                    if state == HitState.MAU:
                        cache.write_result(entry_ids[i], 0, val)
                    elif detect:
                        stats.mnu_forced += 1
                row[i] += val
        # Eq. for the weight gradient: group positions by cache entry
        leaders = {}
        groups = []
        for i in range(n_g):
            state = hm.state(i)
            eid = entry_ids[i]
            if state == HitState.HIT and eid in leaders:
                groups[leaders[eid]].append(i)
            else:
                if state == HitState.MAU:
                    leaders[eid] = len(groups)
                groups.append([i])
        flipped = gwin64.reshape(-1, k1, k2)[:, ::-1, ::-1].reshape(-1, k_area)
        for c in range(nc):
            xc = xflat64[c]
            target = wgrad64[fidx, c]
            for members in groups:
                coeff = np.float64(0.0)
                for i in members:
                    coeff += xc[i]
                target += coeff * flipped[members[0]]
                stats.executed += 1
                stats.reused += len(members) - 1
        hitmaps.append(hm)
    igrad = g64.astype(np.float32).reshape(nc, gh, gw)
    p = spec.padding
    if p:
        igrad = igrad[:, p : gh - p, p : gw - p]
    igrad = igrad * activation_grad(a3, activation)
    wgrad = wgrad64.astype(np.float32).reshape(nf, nc, k1, k2)
    return BackwardResult(wgrad, igrad, stats, regenerations, hitmaps)


class _IdRecorder:
    """Signature-table stand-in for sparse ordinal order: keeps only the
    cache entry ids, indexed by full-grid ordinal."""

    def __init__(self, n):
        self.entry_ids = [None] * n

    def record(self, ordinal, signature, entry_id):
        self.entry_ids[ordinal] = entry_id


# ---------------------------------------------------------------------------
# fully connected

def forward_fc_with_reuse(
    inputs, weights, spec, proj, caches=None, cfg=None, one_step_ahead=True
):
    """Minibatch FC layer with per-block signature reuse.

    Rows are split into block_vector_len sub-vectors; per block position the
    batch's sub-vectors are hashed into one of two alternating caches, and a
    HIT row receives the earlier row's products with every weight column
    (one send per weight, serialized per source, with the earlier row
    stalling if it outruns its sends).  A FIFO conflict handler retires one
    output write per cycle.

    Returns (output, ReuseStats, CycleReport).
    """
    x = np.asarray(inputs, dtype=np.float32)
    w = np.asarray(weights, dtype=np.float32)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError("expected 2-D inputs and weights")
    if x.shape[1] != spec.in_features or w.shape[0] != spec.in_features:
        raise ShapeError("in_features mismatch with spec")
    if proj.m != spec.block_vector_len:
        raise ShapeError("projection m must equal block_vector_len")
    cfg = cfg or PEArrayConfig()
    batch, out_f = x.shape[0], w.shape[1]
    if caches is None:
        caches = tuple(ReuseCache(CacheConfig(result_width=out_f)) for _ in range(2))
    length = spec.block_vector_len
    nb = spec.num_blocks
    xp = np.zeros((batch, spec.padded_features), dtype=np.float32)
    xp[:, : spec.in_features] = x
    wp64 = np.zeros((spec.padded_features, out_f), dtype=np.float64)
    wp64[: spec.in_features] = w.astype(np.float64)
    out64 = np.zeros((batch, out_f), dtype=np.float64)
    stats = ReuseStats()
    report = CycleReport(baseline_cycles=analytic_fc_baseline(spec, batch, cfg))
    for b in range(nb):
        cache = caches[b % 2]
        cache.clear()
        blk_t = np.ascontiguousarray(wp64[b * length : (b + 1) * length].T)
        sub32 = xp[:, b * length : (b + 1) * length]
        sub64 = sub32.astype(np.float64)
        hm = Hitmap(batch)
        table = SignatureTable()
        leader_of = {}
        dependents = {}
        for r in range(batch):
            state = cache.probe_and_update(signature_of(sub32[r], proj), r, hm, table)
            if state == HitState.HIT:
                vals = cache.read_result(table.entry_ids[r], 0)
                stats.reused += out_f
                dependents.setdefault(leader_of[table.entry_ids[r]], []).append(r)
            else:
                vals = np.empty(out_f, dtype=np.float64)
                row = sub64[r]
                for j in range(out_f):
                    vals[j] = np.dot(row, blk_t[j])
                stats.executed += out_f
                if state == HitState.MAU:
                    cache.write_result(table.entry_ids[r], 0, vals)
                    leader_of[table.entry_ids[r]] = r
                else:
                    stats.mnu_forced += out_f
            out64[r] += vals
        # timing sketch: one PE per batch row
        report.signature_cycles += proj.n_bits * length * cfg.mac_latency
        pure = 0
        crit = 0
        for r in range(batch):
            if hm.state(r) == HitState.HIT:
                cost = out_f * cfg.cache_read_latency
                finish = cost
            else:
                cost = out_f * length * cfg.mac_latency
                finish = _send_schedule(
                    out_f, length * cfg.mac_latency, len(dependents.get(r, ())),
                    one_step_ahead,
                )
            pure = max(pure, cost)
            crit = max(crit, finish)
        block_total = max(crit, batch * out_f)  # conflict-handler floor
        report.compute_cycles += pure
        report.stall_cycles += block_total - pure
    return out64.astype(np.float32), stats, report


def _send_schedule(out_f, weight_cycles, n_dependents, one_step_ahead):
    """Finish time of a source row.  Sends run in parallel with the next
    column's compute (one send per cycle); when the PE finishes a column
    before the previous column's sends have drained, it stalls until they
    have (the one-step-ahead bound)."""
    t = 0
    send_done = 0
    for wcol in range(out_f):
        t += weight_cycles           # finish computing column wcol
        if wcol and one_step_ahead:
            t = max(t, send_done)    # previous column's sends must be out
        send_done = max(send_done, t) + n_dependents
    return max(t, send_done)


# ---------------------------------------------------------------------------
# attention

def forward_attention_with_reuse(x, spec, proj, caches=None, cfg=None):
    """Simplified attention with both matmuls routed through the FC reuse
    path: the correlation matrix W = X X^T reuses duplicate rows of X, and
    Y = W X reuses duplicate rows of W.

    ``proj`` hashes length-``dim`` rows; the second stage derives a
    length-``seq_len`` projection from the same seed.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (spec.seq_len, spec.dim):
        raise ShapeError(f"input {x.shape} does not match attention spec")
    if proj.m != spec.dim:
        raise ShapeError("projection m must equal the attention dim")
    spec1 = FCLayerSpec(spec.dim, spec.seq_len, block_vector_len=spec.dim)
    spec2 = FCLayerSpec(spec.seq_len, spec.dim, block_vector_len=spec.seq_len)
    proj2 = (
        proj
        if spec.seq_len == spec.dim
        else gen_projection(proj.seed, spec.seq_len, proj.n_bits)
    )
    # the two stages cache different result widths (one per output column)
    w_corr, stats1, rep1 = forward_fc_with_reuse(
        x, np.ascontiguousarray(x.T), spec1, proj, caches, cfg
    )
    y, stats2, rep2 = forward_fc_with_reuse(w_corr, x, spec2, proj2, caches, cfg)
    return y, stats1.merge(stats2), rep1.merge(rep2)
