"""Reference numerical kernels: convolution, fully connected, attention,
and the two backward-pass convolutions (weight gradient and input gradient).

These define ground truth for the reuse-enabled execution engine.  All
tensors are float32; every dot product is accumulated in float64 and rounded
to float32 on store.  The accumulation order is fixed (one float64 dot per
input channel / block, summed in channel order), so the reuse engine can
reproduce outputs bit-for-bit by caching the same float64 partial products.
"""

from dataclasses import dataclass

import numpy as np

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)


class ShapeError(ValueError):
    """Tensor dimensions do not match the layer description."""


class ConfigError(ValueError):
    """Layer description is internally inconsistent."""


def tensor(data, shape=None):
    """Validated dense float32 array.

    Rejects NaN/Inf on construction and enforces that the element count
    matches the requested shape.
    """
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(
                f"shape {shape} needs {int(np.prod(shape))} values, got {arr.size}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


@dataclass(frozen=True)
class ConvLayerSpec:
    """Geometry of one convolution layer.

    ``kernel`` is (k1, k2), ``input_size`` is (H, W).  Output extents must
    come out as positive integers for the given stride/padding.
    """

    in_channels: int
    out_channels: int
    kernel: tuple
    input_size: tuple
    stride: int = 1
    padding: int = 0
    activation: str = RELU

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if len(self.kernel) != 2 or len(self.input_size) != 2:
            raise ConfigError("kernel and input_size must be 2-D")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("stride must be >= 1 and padding >= 0")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for ext, k in zip(self.input_size, self.kernel):
            if k < 1:
                raise ConfigError("kernel extents must be positive")
            span = ext - k + 2 * self.padding
            if span < 0 or span % self.stride != 0:
                raise ConfigError(
                    f"output extent for input {ext}, kernel {k}, stride "
                    f"{self.stride}, padding {self.padding} is not a positive integer"
                )

    @property
    def out_size(self):
        h, w = self.input_size
        k1, k2 = self.kernel
        return (
            (h - k1 + 2 * self.padding) // self.stride + 1,
            (w - k2 + 2 * self.padding) // self.stride + 1,
        )

    @property
    def num_vectors(self):
        oh, ow = self.out_size
        return oh * ow

    @property
    def kernel_area(self):
        return self.kernel[0] * self.kernel[1]


@dataclass(frozen=True)
class FCLayerSpec:
    """Fully connected layer; inputs are split into sub-vectors of
    ``block_vector_len`` for signature generation.  Rows whose length is not
    a multiple of the block length are zero-padded on the right."""

    in_features: int
    out_features: int
    block_vector_len: int = 9

    def __post_init__(self):
        if min(self.in_features, self.out_features, self.block_vector_len) < 1:
            raise ConfigError("FC extents must be positive")

    @property
    def num_blocks(self):
        return -(-self.in_features // self.block_vector_len)

    @property
    def padded_features(self):
        return self.num_blocks * self.block_vector_len


@dataclass(frozen=True)
class AttentionSpec:
    """Simplified non-parametric attention: Y = (X @ X.T) @ X."""

    seq_len: int
    dim: int

    def __post_init__(self):
        if self.seq_len < 1 or self.dim < 1:
            raise ConfigError("attention extents must be positive")


# ---------------------------------------------------------------------------
# activations

def apply_activation(x, activation):
    if activation == RELU:
        return np.maximum(x, np.float32(0.0))
    if activation == IDENTITY:
        return x
    raise ConfigError(f"unknown activation {activation!r}")


def activation_grad(pre_act, activation):
    """Derivative of the activation at the pre-activation values.

    ReLU derivative at exactly zero is defined as 0.
    """
    if activation == RELU:
        return (pre_act > 0).astype(np.float32)
    if activation == IDENTITY:
        return np.ones_like(pre_act, dtype=np.float32)
    raise ConfigError(f"unknown activation {activation!r}")


# ---------------------------------------------------------------------------
# shape plumbing

def as_channels(inp):
    """Normalize an input tensor to (C, H, W); remember if it was 2-D."""
    arr = np.asarray(inp, dtype=np.float32)
    if arr.ndim == 2:
        return arr[None, :, :], True
    if arr.ndim == 3:
        return arr, False
    raise ShapeError(f"expected 2-D or 3-D input, got {arr.ndim}-D")


def as_filters(weights):
    """Normalize weights to (F, C, k1, k2); remember if they were 2-D."""
    arr = np.asarray(weights, dtype=np.float32)
    if arr.ndim == 2:
        return arr[None, None, :, :], True
    if arr.ndim == 4:
        return arr, False
    raise ShapeError(f"expected 2-D or 4-D weights, got {arr.ndim}-D")


def _check_conv_shapes(inp3, w4, spec):
    c, h, w = inp3.shape
    f, wc, k1, k2 = w4.shape
    if (h, w) != spec.input_size:
        raise ShapeError(f"input {h}x{w} does not match spec {spec.input_size}")
    if c != spec.in_channels or wc != spec.in_channels:
        raise ShapeError("channel count mismatch with spec")
    if f != spec.out_channels:
        raise ShapeError("filter count mismatch with spec")
    if (k1, k2) != spec.kernel:
        raise ShapeError(f"kernel {k1}x{k2} does not match spec {spec.kernel}")


# ---------------------------------------------------------------------------
# window extraction

def extract_input_vectors(plane, spec):
    """Flattened k1*k2 input vectors of one channel in raster order of the
    output positions.  Returns an array of shape (out_h*out_w, k1*k2)."""
    plane = np.asarray(plane, dtype=np.float32)
    if plane.ndim != 2 or plane.shape != spec.input_size:
        raise ConfigError(
            f"channel slice {plane.shape} does not match spec input {spec.input_size}"
        )
    k1, k2 = spec.kernel
    if spec.padding:
        plane = np.pad(plane, spec.padding)
    view = np.lib.stride_tricks.sliding_window_view(plane, (k1, k2))
    view = view[:: spec.stride, :: spec.stride]
    return np.ascontiguousarray(view.reshape(-1, k1 * k2))


def backward_window_grid(spec):
    """Grid of gradient-vector positions for the backward convolutions: the
    layer's output gradient is dilated by the stride and zero-padded by
    (k1-1, k2-1) before windows are slid over it."""
    oh, ow = spec.out_size
    k1, k2 = spec.kernel
    return ((oh - 1) * spec.stride + k1, (ow - 1) * spec.stride + k2)


def dilate_and_pad_delta(plane, spec):
    """One output-gradient channel, stride-dilated and zero-padded so that
    stride-1 windows of size k1 x k2 enumerate every input position."""
    plane = np.asarray(plane, dtype=np.float32)
    if plane.shape != spec.out_size:
        raise ShapeError(f"delta {plane.shape} does not match output {spec.out_size}")
    k1, k2 = spec.kernel
    s = spec.stride
    if s > 1:
        oh, ow = plane.shape
        dil = np.zeros(((oh - 1) * s + 1, (ow - 1) * s + 1), dtype=np.float32)
        dil[::s, ::s] = plane
        plane = dil
    return np.pad(plane, ((k1 - 1, k1 - 1), (k2 - 1, k2 - 1)))


def extract_gradient_vectors(plane, spec):
    """Flattened gradient vectors (windows of the dilated, padded output
    gradient) in raster order; shape (grid_h*grid_w, k1*k2)."""
    padded = dilate_and_pad_delta(plane, spec)
    k1, k2 = spec.kernel
    view = np.lib.stride_tricks.sliding_window_view(padded, (k1, k2))
    return np.ascontiguousarray(view.reshape(-1, k1 * k2))


# ---------------------------------------------------------------------------
# forward kernels

def conv2d_forward(inp, weights, spec):
    """Cross-correlation per filter, summed over input channels, activation
    applied per spec.  Each output value is a float64 accumulation of one
    float64 dot product per channel, rounded to float32 on store."""
    inp3, in_2d = as_channels(inp)
    w4, w_2d = as_filters(weights)
    _check_conv_shapes(inp3, w4, spec)
    nf, nc = w4.shape[:2]
    n_vec = spec.num_vectors
    k_area = spec.kernel_area
    w64 = w4.astype(np.float64).reshape(nf, nc, k_area)
    out64 = np.zeros((nf, n_vec), dtype=np.float64)
    for c in range(nc):
        win64 = extract_input_vectors(inp3[c], spec).astype(np.float64)
        for f in range(nf):
            fc = w64[f, c]
            row = out64[f]
            for i in range(n_vec):
                row[i] += np.dot(win64[i], fc)
    out = out64.astype(np.float32).reshape(nf, *spec.out_size)
    out = apply_activation(out, spec.activation)
    if in_2d and w_2d:
        return out[0]
    return out


def fc_forward(inputs, weights):
    """Batched matrix multiply: (batch, in) @ (in, out) with one float64 dot
    per output element."""
    x = np.asarray(inputs, dtype=np.float32)
    w = np.asarray(weights, dtype=np.float32)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError("fc_forward expects 2-D inputs and weights")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"inner dimensions differ: {x.shape[1]} vs {w.shape[0]}")
    x64 = x.astype(np.float64)
    wt64 = np.ascontiguousarray(w.astype(np.float64).T)
    batch, out_f = x.shape[0], w.shape[1]
    out64 = np.zeros((batch, out_f), dtype=np.float64)
    for r in range(batch):
        row = x64[r]
        for j in range(out_f):
            out64[r, j] += np.dot(row, wt64[j])
    return out64.astype(np.float32)


def attention_forward(x):
    """Simplified attention: the correlation matrix W = X @ X.T weights the
    rows of X, with no scaling or softmax: Y = W @ X."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError("attention_forward expects a (t, k) matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("attention input must be finite")
    w = fc_forward(x, x.T)
    return fc_forward(w, x)


# ---------------------------------------------------------------------------
# backward kernels

def conv2d_weight_grad(delta, out_prev, spec):
    """Loss gradient w.r.t. every weight: the correlation between the output
    gradient of this layer and the (padded) output of the previous layer."""
    d3, d_2d = as_channels(delta)
    x3, x_2d = as_channels(out_prev)
    oh, ow = spec.out_size
    if d3.shape[1:] != (oh, ow):
        raise ShapeError(f"delta {d3.shape[1:]} does not match output {(oh, ow)}")
    if x3.shape[1:] != spec.input_size:
        raise ShapeError(f"out_prev {x3.shape[1:]} does not match input {spec.input_size}")
    if d3.shape[0] != spec.out_channels or x3.shape[0] != spec.in_channels:
        raise ShapeError("channel counts do not match spec")
    k1, k2 = spec.kernel
    nf, nc = d3.shape[0], x3.shape[0]
    grad64 = np.zeros((nf, nc, k1 * k2), dtype=np.float64)
    for c in range(nc):
        # windows of the padded input, one per output position
        win64 = extract_input_vectors(x3[c], spec).astype(np.float64)
        for f in range(nf):
            d64 = d3[f].astype(np.float64).ravel()
            grad64[f, c] = win64.T @ d64
    grad = grad64.astype(np.float32).reshape(nf, nc, k1, k2)
    if d_2d and x_2d:
        return grad[0, 0]
    return grad


def conv2d_input_grad(delta, weights, act_input, spec, activation=None):
    """Loss gradient w.r.t. every input position: a full correlation of the
    dilated, zero-padded output gradient with the flipped weights, multiplied
    elementwise by the activation derivative at ``act_input``.

    ``activation`` names the function that produced this input (defaults to
    spec.activation); ``act_input`` holds its pre-activation values.
    """
    d3, d_2d = as_channels(delta)
    a3, a_2d = as_channels(act_input)
    w4, w_2d = as_filters(weights)
    if activation is None:
        activation = spec.activation
    oh, ow = spec.out_size
    if d3.shape[1:] != (oh, ow):
        raise ShapeError(f"delta {d3.shape[1:]} does not match output {(oh, ow)}")
    if a3.shape[1:] != spec.input_size:
        raise ShapeError("act_input does not match spec input size")
    if d3.shape[0] != spec.out_channels or w4.shape[0] != spec.out_channels:
        raise ShapeError("filter/delta channel mismatch")
    if w4.shape[1] != spec.in_channels or a3.shape[0] != spec.in_channels:
        raise ShapeError("input channel mismatch")
    nf, nc = w4.shape[:2]
    k_area = spec.kernel_area
    gh, gw = backward_window_grid(spec)
    # flipped weights: Eq. for the input gradient applies the kernel in the
    # full-convolution orientation
    wf64 = w4[:, :, ::-1, ::-1].astype(np.float64).reshape(nf, nc, k_area)
    g64 = np.zeros((nc, gh * gw), dtype=np.float64)
    for f in range(nf):
        gwin64 = extract_gradient_vectors(d3[f], spec).astype(np.float64)
        for c in range(nc):
            fc = np.ascontiguousarray(wf64[f, c])
            row = g64[c]
            for i in range(gh * gw):
                row[i] += np.dot(gwin64[i], fc)
    g = g64.astype(np.float32).reshape(nc, gh, gw)
    p = spec.padding
    if p:
        g = g[:, p : gh - p, p : gw - p]
    g = g * activation_grad(a3, activation)
    if d_2d and a_2d and w_2d:
        return g[0]
    return g
