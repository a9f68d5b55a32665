"""Random-projection-with-quantization signatures.

A vector of length m is multiplied by an m x N matrix of standard normal
entries; each projected value keeps only its sign bit, yielding an N-bit
signature.  Equal signatures flag near-identical vectors.  The same
calculation can be phrased as N single-filter convolutions over an input
plane, which is how the accelerator model computes it with its existing PEs.

Also holds the Bloom-filter comparator used by the uniqueness experiment.
"""

import dataclasses
import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .kernels import IDENTITY, ShapeError, conv2d_forward


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """Seeded m x N standard-normal projection.

    Columns are drawn independently from per-column generators, so growing N
    with the same seed appends columns without reshuffling existing ones
    (prefix stability).  Adaptive signature growth relies on this: longer
    signatures refine, never rehash.
    """

    seed: int
    m: int
    n_bits: int
    entries: np.ndarray = field(repr=False)

    def column64(self, j):
        """Column j as a contiguous float64 vector (the random filter)."""
        return np.ascontiguousarray(self.entries[:, j], dtype=np.float64)

    def filter_grid(self, j, k1, k2):
        """Column j reshaped to a k1 x k2 random filter."""
        if k1 * k2 != self.m:
            raise ShapeError(f"kernel area {k1 * k2} does not match m={self.m}")
        return self.entries[:, j].reshape(k1, k2)

    def prefix(self, n_bits):
        if n_bits > self.n_bits:
            return gen_projection(self.seed, self.m, n_bits)
        return ProjectionMatrix(self.seed, self.m, n_bits, self.entries[:, :n_bits])


def gen_projection(seed, m, n_bits):
    """Deterministic, prefix-stable projection matrix from (seed, m, N)."""
    if m < 1 or n_bits < 1:
        raise ValueError("m and n_bits must be >= 1")
    cols = np.empty((m, n_bits), dtype=np.float32)
    for j in range(n_bits):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), j]))
        cols[:, j] = rng.standard_normal(m)
    return ProjectionMatrix(int(seed), int(m), int(n_bits), cols)


def sign_quantize(x):
    """Quantize one projected value to its sign bit: 1 iff x < 0.

    Both +0.0 and -0.0 quantize to 0.
    """
    return 1 if x < 0 else 0


@dataclass(frozen=True)
class Signature:
    """N-bit signature packed into an int; bit j sits at weight 2**j.

    Signatures of different lengths are never comparable.
    """

    value: int
    n_bits: int

    def __post_init__(self):
        if self.n_bits < 1:
            raise ValueError("signature must have at least one bit")
        if self.value >> self.n_bits:
            raise ValueError("value wider than n_bits")

    def bit(self, j):
        return (self.value >> j) & 1

    @property
    def bits(self):
        return tuple(self.bit(j) for j in range(self.n_bits))

    def __len__(self):
        return self.n_bits


def pack_bits(bit_iterable):
    value = 0
    n = 0
    for b in bit_iterable:
        value |= int(b) << n
        n += 1
    return Signature(value, n)


def signature_of(v, proj):
    """Signature of one flat vector: bit j is the sign of v . column_j."""
    v = np.asarray(v)
    if v.shape != (proj.m,):
        raise ShapeError(f"vector length {v.shape} does not match m={proj.m}")
    v64 = np.ascontiguousarray(v, dtype=np.float64)
    value = 0
    for j in range(proj.n_bits):
        acc = np.float64(0.0)
        acc += np.dot(v64, proj.column64(j))
        if np.float32(acc) < 0:
            value |= 1 << j
    return Signature(value, proj.n_bits)


def signatures_via_convolution(plane, spec, proj):
    """All signatures of one channel, computed as N single-filter
    convolutions: column j of the projection becomes a k1 x k2 random filter,
    and bit j of signature i is the sign of output position i of that filter.

    Bit-identical to applying signature_of to extract_input_vectors output.
    """
    k1, k2 = spec.kernel
    if proj.m != k1 * k2:
        raise ShapeError(f"projection m={proj.m} does not match kernel area {k1 * k2}")
    sig_spec = dataclasses.replace(
        spec, in_channels=1, out_channels=1, activation=IDENTITY
    )
    n_vec = sig_spec.num_vectors
    values = [0] * n_vec
    for j in range(proj.n_bits):
        out_map = conv2d_forward(plane, proj.filter_grid(j, k1, k2), sig_spec)
        flat = out_map.ravel()
        for i in range(n_vec):
            if flat[i] < 0:
                values[i] |= 1 << j
    return [Signature(v, proj.n_bits) for v in values]


class SignatureTable:
    """Per-channel table indexed by input-vector ordinal; each entry holds
    the signature and, after the cache probe, the cache entry id (or None
    for uncached vectors)."""

    def __init__(self):
        self.signatures = []
        self.entry_ids = []

    def record(self, ordinal, signature, entry_id):
        if ordinal != len(self.signatures):
            raise ValueError(f"ordinal {ordinal} recorded out of order")
        self.signatures.append(signature)
        self.entry_ids.append(entry_id)

    def __len__(self):
        return len(self.signatures)

    def clear(self):
        self.signatures.clear()
        self.entry_ids.clear()


# ---------------------------------------------------------------------------
# Bloom-filter comparator

BLOOM_QUANT_STEP = 1.0 / 16.0  # 8-bit fixed point, range [-8, 8)


def bloom_signature(v, filter_bits, hash_count):
    """Bloom-filter bit array over a vector's quantized elements.

    Each (index, 8-bit value) pair is fed to ``hash_count`` independent
    64-bit hashes; the resulting array plays the role of a signature in the
    uniqueness comparison.
    """
    if hash_count < 1 or filter_bits < hash_count:
        raise ValueError("need filter_bits >= hash_count >= 1")
    q = np.clip(np.round(np.asarray(v, dtype=np.float64) / BLOOM_QUANT_STEP), -128, 127)
    bits = np.zeros(filter_bits, dtype=np.uint8)
    for idx, val in enumerate(q.astype(np.int64)):
        for h in range(hash_count):
            digest = hashlib.blake2b(
                struct.pack("<qqq", idx, int(val), h), digest_size=8
            ).digest()
            bits[int.from_bytes(digest, "little") % filter_bits] = 1
    return bits


def _bloom_hash_count(filter_bits, dim):
    return max(1, int(round(filter_bits / dim * math.log(2))))


def uniqueness_experiment(
    base_count=10,
    dim=10,
    copies=10,
    lengths=(1, 2, 4, 8, 16, 24, 32, 48, 64),
    seed=0,
    epsilon=1e-4,
):
    """How many distinct vectors each method finds among ``base_count``
    random vectors plus ``copies`` near-duplicates of each.

    Ground truth is ``base_count`` groups.  Near-duplicates perturb every
    element by a uniform value in [-epsilon, epsilon].  Returns one record
    per (length, method) with the count of distinct signatures over all
    base_count * (1 + copies) vectors.
    """
    lengths = sorted(int(n) for n in lengths)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB10C]))
    bases = rng.standard_normal((base_count, dim))
    vectors = [b for b in bases]
    for b in bases:
        for _ in range(copies):
            vectors.append(b + rng.uniform(-epsilon, epsilon, size=dim))
    vectors = np.asarray(vectors, dtype=np.float32)

    proj = gen_projection(seed, dim, max(lengths))
    sigs = [signature_of(v, proj) for v in vectors]
    masks = {n: (1 << n) - 1 for n in lengths}

    records = []
    for n in lengths:
        rpq_unique = len({s.value & masks[n] for s in sigs})
        records.append(
            {"length": n, "method": "rpq", "unique_count": rpq_unique, "trial_seed": seed}
        )
    for n in lengths:
        k = _bloom_hash_count(n, dim)
        bloom_unique = len({bloom_signature(v, n, k).tobytes() for v in vectors})
        records.append(
            {"length": n, "method": "bloom", "unique_count": bloom_unique, "trial_seed": seed}
        )
    return records
